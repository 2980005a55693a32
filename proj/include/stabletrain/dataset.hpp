#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "stabletrain/common.hpp"
#include "stabletrain/distortions.hpp"
#include "stabletrain/image.hpp"
#include "stabletrain/rng.hpp"
#include "stabletrain/tensor.hpp"

namespace stabletrain {

enum class Split { train, val, test };

struct Dataset {
  std::vector<Image> images;  // uniform shape
  std::vector<std::size_t> labels;
  std::size_t classes = 0;
  Split split = Split::train;

  std::size_t size() const { return images.size(); }

  void validate() const {
    if (images.size() != labels.size())
      throw DataError("dataset: " + std::to_string(images.size()) +
                      " images vs " + std::to_string(labels.size()) +
                      " labels");
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] >= classes)
        throw DataError("dataset: label " + std::to_string(labels[i]) +
                        " at index " + std::to_string(i) +
                        " outside [0," + std::to_string(classes) + ")");
  }
};

// ---- synthetic generator ----

// Class-structured images: each class carries a fixed signature made of a
// per-pixel (high-frequency) component and a smooth sinusoidal component;
// samples are cyclically jittered copies with mild pixel noise. The
// high-frequency part makes classes sensitive to additive noise, the smooth
// part to geometric transforms, which is the regime the robustness
// experiments need.
struct SyntheticSpec {
  std::size_t classes = 10;
  std::size_t per_class = 100;
  std::size_t height = 40;
  std::size_t width = 40;
  std::size_t channels = 3;
  double white_amp = 0.08;
  double smooth_amp = 0.12;
  long jitter = 2;           // cyclic shift range in pixels
  double sample_noise = 0.02;

  void validate() const {
    if (classes < 2 || per_class == 0 || height == 0 || width == 0 ||
        channels == 0)
      throw ConfigError("synthetic: degenerate spec");
  }
};

inline Dataset load_synthetic(const SyntheticSpec& spec, std::uint64_t seed) {
  spec.validate();
  Dataset ds;
  ds.classes = spec.classes;
  RngStream root(seed);

  // fixed per-class signatures
  std::vector<std::vector<float>> sig(spec.classes);
  for (std::size_t k = 0; k < spec.classes; ++k) {
    RngStream crng = root.split(k);
    std::vector<float>& s = sig[k];
    s.assign(spec.height * spec.width * spec.channels, 0.f);
    // smooth component: a few random sinusoids per channel
    struct Wave { double fy, fx, phase, weight; };
    std::vector<std::vector<Wave>> waves(spec.channels);
    for (auto& wv : waves)
      for (int j = 0; j < 3; ++j)
        wv.push_back({crng.uniform(0.05, 0.45), crng.uniform(0.05, 0.45),
                      crng.uniform(0, 6.2831853), crng.uniform(0.3, 1.0)});
    for (std::size_t y = 0; y < spec.height; ++y)
      for (std::size_t x = 0; x < spec.width; ++x)
        for (std::size_t c = 0; c < spec.channels; ++c) {
          double v = 0;
          for (const auto& w : waves[c])
            v += w.weight *
                 std::sin(2 * std::numbers::pi * (w.fy * y + w.fx * x) +
                          w.phase);
          s[(y * spec.width + x) * spec.channels + c] =
              static_cast<float>(spec.smooth_amp * v / 3.0);
        }
    // high-frequency component: per-pixel values
    for (auto& v : s)
      v += static_cast<float>(spec.white_amp * crng.uniform(-1.0, 1.0));
  }

  for (std::size_t k = 0; k < spec.classes; ++k)
    for (std::size_t i = 0; i < spec.per_class; ++i) {
      RngStream srng = root.split((k + 1) * 1000003ULL + i);
      const long dy = srng.uniform_int(-spec.jitter, spec.jitter);
      const long dx = srng.uniform_int(-spec.jitter, spec.jitter);
      Image img(spec.height, spec.width, spec.channels);
      const long h = static_cast<long>(spec.height);
      const long w = static_cast<long>(spec.width);
      for (long y = 0; y < h; ++y)
        for (long x = 0; x < w; ++x) {
          const long sy = ((y + dy) % h + h) % h;
          const long sx = ((x + dx) % w + w) % w;
          for (std::size_t c = 0; c < spec.channels; ++c)
            img.at(y, x, c) =
                0.5f + sig[k][(sy * w + sx) * spec.channels + c] +
                static_cast<float>(spec.sample_noise * srng.normal());
        }
      img.clip01();
      ds.images.push_back(std::move(img));
      ds.labels.push_back(k);
    }
  ds.validate();
  return ds;
}

// ---- IDX loader ----

namespace idx_detail {

inline std::uint32_t read_be_u32(std::istream& in, const std::string& path,
                                 std::size_t offset) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4))
    throw DataError("idx: " + path + ": truncated at byte " +
                    std::to_string(offset));
  return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) |
         (std::uint32_t(b[2]) << 8) | std::uint32_t(b[3]);
}

}  // namespace idx_detail

// Reads an IDX file of unsigned bytes; returns dims and flat payload.
// Validates magic, dimensionality and payload length, reporting byte
// offsets on failure.
inline std::pair<std::vector<std::size_t>, std::vector<std::uint8_t>>
load_idx_u8(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("idx: cannot open " + path);
  const std::uint32_t magic = idx_detail::read_be_u32(in, path, 0);
  if ((magic & 0xffffff00u) != 0x00000800u)
    throw DataError("idx: " + path + ": bad magic 0x" + [&] {
      char buf[16];
      std::snprintf(buf, sizeof buf, "%08x", magic);
      return std::string(buf);
    }() + " at byte 0 (expected 0x000008NN, u8 payload)");
  const std::size_t ndim = magic & 0xffu;
  if (ndim == 0 || ndim > 4)
    throw DataError("idx: " + path + ": unsupported dimensionality " +
                    std::to_string(ndim));
  std::vector<std::size_t> dims(ndim);
  std::size_t total = 1;
  for (std::size_t i = 0; i < ndim; ++i) {
    dims[i] = idx_detail::read_be_u32(in, path, 4 + 4 * i);
    total *= dims[i];
  }
  std::vector<std::uint8_t> payload(total);
  in.read(reinterpret_cast<char*>(payload.data()),
          static_cast<std::streamsize>(total));
  const std::size_t got = static_cast<std::size_t>(in.gcount());
  if (got != total)
    throw DataError("idx: " + path + ": truncated payload, expected " +
                    std::to_string(total) + " bytes, got " +
                    std::to_string(got) + " (data starts at byte " +
                    std::to_string(4 + 4 * ndim) + ")");
  return {dims, std::move(payload)};
}

// Image file: magic 0x00000803 [N,H,W] (grayscale) or 0x00000804 [N,H,W,C].
// Label file: magic 0x00000801 [N].
inline Dataset load_idx(const std::string& images_path,
                        const std::string& labels_path) {
  auto [idims, ipay] = load_idx_u8(images_path);
  if (idims.size() != 3 && idims.size() != 4)
    throw DataError("idx: " + images_path + ": expected 3-D or 4-D tensor, got " +
                    std::to_string(idims.size()) + "-D");
  auto [ldims, lpay] = load_idx_u8(labels_path);
  if (ldims.size() != 1)
    throw DataError("idx: " + labels_path + ": expected 1-D labels");
  if (idims[0] != ldims[0])
    throw DataError("idx: image count " + std::to_string(idims[0]) +
                    " != label count " + std::to_string(ldims[0]));
  const std::size_t n = idims[0], h = idims[1], w = idims[2];
  const std::size_t c = idims.size() == 4 ? idims[3] : 1;
  Dataset ds;
  for (std::size_t i = 0; i < n; ++i) {
    Image img(h, w, c);
    for (std::size_t j = 0; j < h * w * c; ++j)
      img.px[j] = static_cast<float>(ipay[i * h * w * c + j]) / 255.f;
    ds.images.push_back(std::move(img));
    ds.labels.push_back(lpay[i]);
  }
  ds.classes =
      lpay.empty() ? 0 : *std::max_element(lpay.begin(), lpay.end()) + 1;
  ds.validate();
  return ds;
}

// ---- split ----

// Per-class split: exactly train_n / val_n samples per class, disjoint,
// deterministic in the seed.
inline std::pair<Dataset, Dataset> split_per_class(const Dataset& ds,
                                                   std::size_t train_n,
                                                   std::size_t val_n,
                                                   std::uint64_t seed) {
  std::vector<std::vector<std::size_t>> per_class(ds.classes);
  for (std::size_t i = 0; i < ds.size(); ++i)
    per_class[ds.labels[i]].push_back(i);

  Dataset train, val;
  train.classes = val.classes = ds.classes;
  train.split = Split::train;
  val.split = Split::val;
  RngStream root(seed);
  for (std::size_t k = 0; k < ds.classes; ++k) {
    auto& idx = per_class[k];
    if (idx.size() < train_n + val_n)
      throw DataError("split: class " + std::to_string(k) + " has " +
                      std::to_string(idx.size()) + " samples, needs " +
                      std::to_string(train_n + val_n));
    RngStream rng = root.split(k);
    for (std::size_t i = idx.size() - 1; i > 0; --i)
      std::swap(idx[i], idx[rng.uniform_int(0, static_cast<long>(i))]);
    for (std::size_t i = 0; i < train_n; ++i) {
      train.images.push_back(ds.images[idx[i]]);
      train.labels.push_back(k);
    }
    for (std::size_t i = train_n; i < train_n + val_n; ++i) {
      val.images.push_back(ds.images[idx[i]]);
      val.labels.push_back(k);
    }
  }
  return {train, val};
}

// ---- preprocessing ----

struct ChannelStats {
  std::vector<float> mean;
  std::vector<float> stddev;

  void validate() const {
    for (float s : stddev)
      if (!(s > 0.f))
        throw DataError("channel stats: nonpositive stddev");
  }
};

struct PipelineConfig {
  std::size_t resize_short = 36;  // paper scale: 256
  std::size_t crop_side = 32;     // paper scale: 224
  bool thumbnail_downsample_variant = false;
};

namespace pipeline_detail {

inline Image resize_shortest_side(const Image& img, std::size_t target) {
  if (img.height <= img.width) {
    const std::size_t w =
        std::max<std::size_t>(1, img.width * target / img.height);
    return resize_bilinear(img, target, w);
  }
  const std::size_t h =
      std::max<std::size_t>(1, img.height * target / img.width);
  return resize_bilinear(img, h, target);
}

// Split a spec into the crop distortion (which replaces the center-crop
// step) and everything else (applied after conversion to [0,1]).
inline void split_crop(const DistortionSpec& spec, const DistortionSpec*& crop,
                       std::vector<DistortionSpec>& rest) {
  if (spec.kind == DistortionKind::crop) {
    crop = &spec;
  } else if (spec.kind == DistortionKind::compose) {
    for (const auto& child : spec.children) split_crop(child, crop, rest);
  } else {
    rest.push_back(spec);
  }
}

}  // namespace pipeline_detail

// Steps 1-3 of the pipeline (resize, center crop, [0,1] values) without
// distortion or normalization. Channel statistics are computed over these.
inline Image preprocess_geometry(const Image& raw, const PipelineConfig& cfg) {
  Image resized = pipeline_detail::resize_shortest_side(raw, cfg.resize_short);
  if (cfg.crop_side > resized.height || cfg.crop_side > resized.width)
    throw DataError("preprocess: crop " + std::to_string(cfg.crop_side) +
                    " larger than resized image " +
                    std::to_string(resized.height) + "x" +
                    std::to_string(resized.width));
  return center_crop(resized, cfg.crop_side);
}

// Per-channel mean/std over the undistorted training images, measured after
// the geometric pipeline steps.
inline ChannelStats compute_channel_stats(const Dataset& train,
                                          const PipelineConfig& cfg) {
  if (train.images.empty()) throw DataError("channel stats: empty dataset");
  const std::size_t c = train.images[0].channels;
  std::vector<double> s(c, 0), s2(c, 0);
  std::size_t count = 0;
  for (const auto& raw : train.images) {
    Image img = preprocess_geometry(raw, cfg);
    for (std::size_t i = 0; i < img.px.size(); i += c)
      for (std::size_t ch = 0; ch < c; ++ch) {
        s[ch] += img.px[i + ch];
        s2[ch] += static_cast<double>(img.px[i + ch]) * img.px[i + ch];
      }
    count += img.height * img.width;
  }
  ChannelStats stats;
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double mean = s[ch] / count;
    const double var = std::max(1e-12, s2[ch] / count - mean * mean);
    stats.mean.push_back(static_cast<float>(mean));
    stats.stddev.push_back(static_cast<float>(std::sqrt(var)));
  }
  stats.validate();
  return stats;
}

// Full pipeline: (1) resize shortest side, (2) center/offset crop,
// (3) values already in [0,1], (4) optional distortion, (5) normalize.
// Returns CHW-ordered values ready for batch assembly.
inline std::vector<float> preprocess(const Image& raw,
                                     const PipelineConfig& cfg,
                                     const ChannelStats& stats,
                                     const DistortionSpec* distortion,
                                     RngStream& rng,
                                     const DistortionContext* ctx = nullptr) {
  stats.validate();
  Image resized = pipeline_detail::resize_shortest_side(raw, cfg.resize_short);
  if (cfg.crop_side > resized.height || cfg.crop_side > resized.width)
    throw DataError("preprocess: crop " + std::to_string(cfg.crop_side) +
                    " larger than resized image " +
                    std::to_string(resized.height) + "x" +
                    std::to_string(resized.width));

  const DistortionSpec* crop_spec = nullptr;
  std::vector<DistortionSpec> rest;
  if (distortion)
    pipeline_detail::split_crop(*distortion, crop_spec, rest);

  Image img = crop_spec
                  ? offset_crop(resized,
                                static_cast<long>(crop_spec->parameter),
                                cfg.crop_side, rng)
                  : center_crop(resized, cfg.crop_side);

  for (const auto& spec : rest) {
    if (spec.kind == DistortionKind::thumbnail &&
        cfg.thumbnail_downsample_variant)
      img = thumbnail_downsample(img,
                                 static_cast<std::size_t>(spec.parameter));
    else
      img = apply(spec, img, rng, ctx);
  }

  const std::size_t c = img.channels, hw = img.height * img.width;
  if (stats.mean.size() != c)
    throw DataError("preprocess: stats have " +
                    std::to_string(stats.mean.size()) + " channels, image " +
                    std::to_string(c));
  std::vector<float> out(c * hw);
  for (std::size_t i = 0; i < hw; ++i)
    for (std::size_t ch = 0; ch < c; ++ch)
      out[ch * hw + i] =
          (img.px[i * c + ch] - stats.mean[ch]) / stats.stddev[ch];
  return out;
}

// Stacks preprocessed samples into an NCHW batch tensor.
inline TensorF make_batch(const std::vector<std::vector<float>>& samples,
                          std::size_t channels, std::size_t side) {
  const std::size_t per = channels * side * side;
  std::vector<float> data;
  data.reserve(samples.size() * per);
  for (const auto& s : samples) {
    if (s.size() != per)
      throw ShapeError("make_batch: sample size " + std::to_string(s.size()) +
                       " vs expected " + std::to_string(per));
    data.insert(data.end(), s.begin(), s.end());
  }
  return TensorF({samples.size(), channels, side, side}, std::move(data));
}

}  // namespace stabletrain
