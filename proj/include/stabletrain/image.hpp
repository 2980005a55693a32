#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "stabletrain/common.hpp"

namespace stabletrain {

// H x W x C floating-point image, values in [0,1] (interleaved channels).
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;
  std::vector<float> px;  // height*width*channels, row-major, HWC

  Image() = default;
  Image(std::size_t h, std::size_t w, std::size_t c, float fill = 0.f)
      : height(h), width(w), channels(c), px(h * w * c, fill) {}

  float& at(std::size_t y, std::size_t x, std::size_t ch) {
    return px[(y * width + x) * channels + ch];
  }
  float at(std::size_t y, std::size_t x, std::size_t ch) const {
    return px[(y * width + x) * channels + ch];
  }
  std::size_t size() const { return px.size(); }

  void clip01() {
    for (auto& v : px) v = std::clamp(v, 0.f, 1.f);
  }
};

// Bilinear resize with the half-pixel sample convention. Resizing to the
// same dimensions is an exact identity.
inline Image resize_bilinear(const Image& img, std::size_t oh, std::size_t ow) {
  if (oh == 0 || ow == 0)
    throw DataError("resize_bilinear: zero target dimension");
  Image out(oh, ow, img.channels);
  const double sy = static_cast<double>(img.height) / oh;
  const double sx = static_cast<double>(img.width) / ow;
  for (std::size_t y = 0; y < oh; ++y) {
    double py = (y + 0.5) * sy - 0.5;
    py = std::clamp(py, 0.0, static_cast<double>(img.height - 1));
    const std::size_t y0 = static_cast<std::size_t>(py);
    const std::size_t y1 = std::min(y0 + 1, img.height - 1);
    const float fy = static_cast<float>(py - y0);
    for (std::size_t x = 0; x < ow; ++x) {
      double px_ = (x + 0.5) * sx - 0.5;
      px_ = std::clamp(px_, 0.0, static_cast<double>(img.width - 1));
      const std::size_t x0 = static_cast<std::size_t>(px_);
      const std::size_t x1 = std::min(x0 + 1, img.width - 1);
      const float fx = static_cast<float>(px_ - x0);
      for (std::size_t c = 0; c < img.channels; ++c) {
        const float top =
            (1 - fx) * img.at(y0, x0, c) + fx * img.at(y0, x1, c);
        const float bot =
            (1 - fx) * img.at(y1, x0, c) + fx * img.at(y1, x1, c);
        out.at(y, x, c) = (1 - fy) * top + fy * bot;
      }
    }
  }
  return out;
}

// Crop of size (ch, cw) whose top-left corner is (top, left).
inline Image crop(const Image& img, std::size_t top, std::size_t left,
                  std::size_t ch, std::size_t cw) {
  if (top + ch > img.height || left + cw > img.width)
    throw DataError("crop: region " + std::to_string(ch) + "x" +
                    std::to_string(cw) + "@(" + std::to_string(top) + "," +
                    std::to_string(left) + ") outside " +
                    std::to_string(img.height) + "x" +
                    std::to_string(img.width));
  Image out(ch, cw, img.channels);
  for (std::size_t y = 0; y < ch; ++y)
    for (std::size_t x = 0; x < cw; ++x)
      for (std::size_t c = 0; c < img.channels; ++c)
        out.at(y, x, c) = img.at(top + y, left + x, c);
  return out;
}

inline Image center_crop(const Image& img, std::size_t side) {
  return crop(img, (img.height - side) / 2, (img.width - side) / 2, side, side);
}

// Peak signal-to-noise ratio in dB for [0,1] images; +inf for identical ones.
inline double psnr(const Image& a, const Image& b) {
  if (a.px.size() != b.px.size())
    throw DataError("psnr: size mismatch");
  double mse = 0;
  for (std::size_t i = 0; i < a.px.size(); ++i) {
    const double d = static_cast<double>(a.px[i]) - b.px[i];
    mse += d * d;
  }
  mse /= static_cast<double>(a.px.size());
  if (mse == 0) return std::numeric_limits<double>::infinity();
  return -10.0 * std::log10(mse);
}

}  // namespace stabletrain
