#pragma once

// Baseline-JPEG-style quantization roundtrip: 8x8 block DCT, quality-scaled
// quantization with the ITU-T T.81 Annex K tables, dequantize, inverse DCT.
// No entropy coding and no chroma subsampling (4:4:4); the point is the
// quantization artifact structure, not bitstream compatibility.

#include <algorithm>
#include <array>
#include <cmath>
#include <vector>
#include <cstddef>
#include <numbers>

#include "stabletrain/common.hpp"
#include "stabletrain/image.hpp"

namespace stabletrain {

namespace jpeg_detail {

// Annex K, Table K.1 (luminance) and K.2 (chrominance).
inline constexpr std::array<int, 64> kLumaBase = {
    16, 11, 10, 16, 24,  40,  51,  61,  12, 12, 14, 19, 26,  58,  60,  55,
    14, 13, 16, 24, 40,  57,  69,  56,  14, 17, 22, 29, 51,  87,  80,  62,
    18, 22, 37, 56, 68,  109, 103, 77,  24, 35, 55, 64, 81,  104, 113, 92,
    49, 64, 78, 87, 103, 121, 120, 101, 72, 92, 95, 98, 112, 100, 103, 99};

inline constexpr std::array<int, 64> kChromaBase = {
    17, 18, 24, 47, 99, 99, 99, 99, 18, 21, 26, 66, 99, 99, 99, 99,
    24, 26, 56, 99, 99, 99, 99, 99, 47, 66, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99};

// Conventional quality -> scale mapping (5000/q below 50, 200-2q above).
inline std::array<int, 64> scaled_table(const std::array<int, 64>& base,
                                        int quality) {
  const int scale = quality < 50 ? 5000 / quality : 200 - 2 * quality;
  std::array<int, 64> t{};
  for (std::size_t i = 0; i < 64; ++i) {
    int v = (base[i] * scale + 50) / 100;
    t[i] = std::clamp(v, 1, 255);
  }
  return t;
}

struct DctBasis {
  // cos((2x+1) u pi / 16) table and normalization factors
  std::array<double, 64> cosv{};
  std::array<double, 8> alpha{};
  DctBasis() {
    for (int u = 0; u < 8; ++u) {
      alpha[u] = u == 0 ? 1.0 / std::sqrt(2.0) : 1.0;
      for (int x = 0; x < 8; ++x)
        cosv[u * 8 + x] =
            std::cos((2 * x + 1) * u * std::numbers::pi / 16.0);
    }
  }
};

inline const DctBasis& basis() {
  static const DctBasis b;
  return b;
}

inline void fdct8x8(const double* in, double* out) {
  const auto& b = basis();
  for (int u = 0; u < 8; ++u)
    for (int v = 0; v < 8; ++v) {
      double s = 0;
      for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x)
          s += in[y * 8 + x] * b.cosv[u * 8 + y] * b.cosv[v * 8 + x];
      out[u * 8 + v] = 0.25 * b.alpha[u] * b.alpha[v] * s;
    }
}

inline void idct8x8(const double* in, double* out) {
  const auto& b = basis();
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x) {
      double s = 0;
      for (int u = 0; u < 8; ++u)
        for (int v = 0; v < 8; ++v)
          s += b.alpha[u] * b.alpha[v] * in[u * 8 + v] * b.cosv[u * 8 + y] *
               b.cosv[v * 8 + x];
      out[y * 8 + x] = 0.25 * s;
    }
}

// Quantization roundtrip of a single plane, values in 0..255 centered at 128.
// Blocks past the image edge are filled by edge replication.
inline void roundtrip_plane(std::vector<double>& plane, std::size_t h,
                            std::size_t w, const std::array<int, 64>& table) {
  double block[64], coef[64];
  for (std::size_t by = 0; by < h; by += 8)
    for (std::size_t bx = 0; bx < w; bx += 8) {
      for (std::size_t y = 0; y < 8; ++y)
        for (std::size_t x = 0; x < 8; ++x) {
          const std::size_t sy = std::min(by + y, h - 1);
          const std::size_t sx = std::min(bx + x, w - 1);
          block[y * 8 + x] = plane[sy * w + sx] - 128.0;
        }
      fdct8x8(block, coef);
      for (std::size_t i = 0; i < 64; ++i)
        coef[i] = std::round(coef[i] / table[i]) * table[i];
      idct8x8(coef, block);
      for (std::size_t y = 0; y < 8 && by + y < h; ++y)
        for (std::size_t x = 0; x < 8 && bx + x < w; ++x)
          plane[(by + y) * w + bx + x] = block[y * 8 + x] + 128.0;
    }
}

}  // namespace jpeg_detail

// Encode-then-decode roundtrip at the given quality level q in [1,100].
inline Image jpeg_compress(const Image& img, int quality) {
  if (quality < 1 || quality > 100)
    throw DataError("jpeg_compress: quality " + std::to_string(quality) +
                    " outside [1,100]");
  const std::size_t h = img.height, w = img.width;
  const auto luma = jpeg_detail::scaled_table(jpeg_detail::kLumaBase, quality);
  const auto chroma =
      jpeg_detail::scaled_table(jpeg_detail::kChromaBase, quality);

  Image out = img;
  if (img.channels == 3) {
    // full-range JFIF YCbCr
    std::vector<double> Y(h * w), Cb(h * w), Cr(h * w);
    for (std::size_t i = 0; i < h * w; ++i) {
      const double r = img.px[i * 3 + 0] * 255.0;
      const double g = img.px[i * 3 + 1] * 255.0;
      const double b = img.px[i * 3 + 2] * 255.0;
      Y[i] = 0.299 * r + 0.587 * g + 0.114 * b;
      Cb[i] = 128.0 - 0.168736 * r - 0.331264 * g + 0.5 * b;
      Cr[i] = 128.0 + 0.5 * r - 0.418688 * g - 0.081312 * b;
    }
    jpeg_detail::roundtrip_plane(Y, h, w, luma);
    jpeg_detail::roundtrip_plane(Cb, h, w, chroma);
    jpeg_detail::roundtrip_plane(Cr, h, w, chroma);
    for (std::size_t i = 0; i < h * w; ++i) {
      const double y = Y[i], cb = Cb[i] - 128.0, cr = Cr[i] - 128.0;
      out.px[i * 3 + 0] = static_cast<float>((y + 1.402 * cr) / 255.0);
      out.px[i * 3 + 1] =
          static_cast<float>((y - 0.344136 * cb - 0.714136 * cr) / 255.0);
      out.px[i * 3 + 2] = static_cast<float>((y + 1.772 * cb) / 255.0);
    }
  } else {
    for (std::size_t c = 0; c < img.channels; ++c) {
      std::vector<double> plane(h * w);
      for (std::size_t i = 0; i < h * w; ++i)
        plane[i] = img.px[i * img.channels + c] * 255.0;
      jpeg_detail::roundtrip_plane(plane, h, w, luma);
      for (std::size_t i = 0; i < h * w; ++i)
        out.px[i * img.channels + c] = static_cast<float>(plane[i] / 255.0);
    }
  }
  out.clip01();
  return out;
}

}  // namespace stabletrain
