#pragma once

#include <cmath>
#include <functional>
#include <numbers>
#include <string>
#include <vector>

#include "stabletrain/common.hpp"
#include "stabletrain/image.hpp"
#include "stabletrain/jpeg.hpp"
#include "stabletrain/rng.hpp"

namespace stabletrain {

enum class DistortionKind {
  gaussian,
  jpeg,
  thumbnail,
  fgsm,
  rotation,
  crop,
  compose,
};

inline std::string to_string(DistortionKind k) {
  switch (k) {
    case DistortionKind::gaussian: return "gaussian";
    case DistortionKind::jpeg: return "jpeg";
    case DistortionKind::thumbnail: return "thumbnail";
    case DistortionKind::fgsm: return "fgsm";
    case DistortionKind::rotation: return "rotation";
    case DistortionKind::crop: return "crop";
    case DistortionKind::compose: return "compose";
  }
  return "?";
}

inline DistortionKind distortion_kind_from(const std::string& s) {
  if (s == "gaussian") return DistortionKind::gaussian;
  if (s == "jpeg") return DistortionKind::jpeg;
  if (s == "thumbnail") return DistortionKind::thumbnail;
  if (s == "fgsm") return DistortionKind::fgsm;
  if (s == "rotation") return DistortionKind::rotation;
  if (s == "crop") return DistortionKind::crop;
  if (s == "compose") return DistortionKind::compose;
  throw ConfigError("unknown distortion kind '" + s +
                    "' (expected gaussian|jpeg|thumbnail|fgsm|rotation|crop|"
                    "compose)");
}

// Tagged distortion: a kind plus its scalar parameter (sigma | q | A |
// epsilon | rho | C). compose applies its children left to right.
struct DistortionSpec {
  DistortionKind kind = DistortionKind::compose;
  double parameter = 0.0;
  std::vector<DistortionSpec> children;  // compose only

  static DistortionSpec single(DistortionKind k, double p) {
    DistortionSpec s;
    s.kind = k;
    s.parameter = p;
    return s;
  }
  static DistortionSpec compose_of(std::vector<DistortionSpec> cs) {
    DistortionSpec s;
    s.kind = DistortionKind::compose;
    s.children = std::move(cs);
    return s;
  }
  bool contains(DistortionKind k) const {
    if (kind == k) return true;
    for (const auto& c : children)
      if (c.contains(k)) return true;
    return false;
  }
  std::string describe() const {
    if (kind == DistortionKind::compose) {
      std::string s = "compose[";
      for (std::size_t i = 0; i < children.size(); ++i) {
        if (i) s += "+";
        s += children[i].describe();
      }
      return s + "]";
    }
    return to_string(kind) + "(" + std::to_string(parameter) + ")";
  }
};

// Model-side hooks some distortions need: FGSM requires the loss gradient
// with respect to the input image, rotation fills exposed corners with the
// per-channel dataset mean.
struct DistortionContext {
  // Returns dL/dx with the image's layout, for the image's reference label.
  std::function<std::vector<float>(const Image&)> fgsm_input_grad;
  std::vector<float> rotation_fill;  // per channel; 0.5 if empty
};

inline Image gaussian_noise(const Image& img, double sigma, RngStream& rng) {
  if (sigma < 0)
    throw DataError("gaussian_noise: negative sigma " + std::to_string(sigma));
  if (sigma == 0) return img;
  Image out = img;
  for (auto& v : out.px)
    v = static_cast<float>(v + sigma * rng.normal());
  out.clip01();
  return out;
}

// Center crop to an A x A square, then bilinear resize back to the original
// dimensions.
inline Image thumbnail_resize(const Image& img, std::size_t area_side) {
  if (area_side < 1 || area_side > std::min(img.height, img.width))
    throw DataError("thumbnail_resize: side " + std::to_string(area_side) +
                    " outside [1," +
                    std::to_string(std::min(img.height, img.width)) + "]");
  if (area_side == img.height && area_side == img.width) return img;
  Image small = center_crop(img, area_side);
  return resize_bilinear(small, img.height, img.width);
}

// Alternative reading of thumbnail distortion: downsample the full image to
// A x A, then upsample back. Exposed as a config variant.
inline Image thumbnail_downsample(const Image& img, std::size_t area_side) {
  if (area_side < 1 || area_side > std::min(img.height, img.width))
    throw DataError("thumbnail_downsample: side " + std::to_string(area_side) +
                    " out of range");
  Image small = resize_bilinear(img, area_side, area_side);
  return resize_bilinear(small, img.height, img.width);
}

// x' = clip(x + eps * sign(dL/dx)). The gradient closure must not mutate
// model parameters; sign(0) is taken as 0.
inline Image fgsm(const Image& img, double epsilon,
                  const std::function<std::vector<float>(const Image&)>& grad_fn) {
  if (epsilon < 0)
    throw DataError("fgsm: negative epsilon " + std::to_string(epsilon));
  if (epsilon == 0) return img;
  std::vector<float> g = grad_fn(img);
  if (g.size() != img.px.size())
    throw DataError("fgsm: gradient size " + std::to_string(g.size()) +
                    " vs image size " + std::to_string(img.px.size()));
  Image out = img;
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (!std::isfinite(g[i]))
      throw NumericError("fgsm: non-finite input gradient at element " +
                         std::to_string(i));
    const float s = g[i] > 0 ? 1.f : (g[i] < 0 ? -1.f : 0.f);
    out.px[i] = img.px[i] + static_cast<float>(epsilon) * s;
  }
  out.clip01();
  return out;
}

// Rotation by a fixed angle (degrees, counter-clockwise) about the image
// center, bilinear resampling, fill for out-of-support pixels. Angles that
// are exact multiples of 90 on square images reduce to pixel permutations.
inline Image rotate_by(const Image& img, double angle_deg,
                       const std::vector<float>& fill = {}) {
  const double rad = angle_deg * std::numbers::pi / 180.0;
  double c = std::cos(rad), s = std::sin(rad);
  // snap near-exact axis angles so 90/180/270 are lossless
  auto snap = [](double v) {
    if (std::abs(v) < 1e-12) return 0.0;
    if (std::abs(v - 1.0) < 1e-12) return 1.0;
    if (std::abs(v + 1.0) < 1e-12) return -1.0;
    return v;
  };
  c = snap(c);
  s = snap(s);
  const double cy = (img.height - 1) / 2.0, cx = (img.width - 1) / 2.0;
  Image out(img.height, img.width, img.channels);
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x) {
      // inverse map: rotate output coords by -angle
      const double dy = y - cy, dx = x - cx;
      const double srcy = cy + (c * dy + s * dx);
      const double srcx = cx + (-s * dy + c * dx);
      for (std::size_t ch = 0; ch < img.channels; ++ch) {
        float v;
        if (srcy < 0 || srcy > img.height - 1 || srcx < 0 ||
            srcx > img.width - 1) {
          v = fill.empty() ? 0.5f : fill[ch % fill.size()];
        } else {
          const std::size_t y0 = static_cast<std::size_t>(srcy);
          const std::size_t x0 = static_cast<std::size_t>(srcx);
          const std::size_t y1 = std::min(y0 + 1, img.height - 1);
          const std::size_t x1 = std::min(x0 + 1, img.width - 1);
          const float fy = static_cast<float>(srcy - y0);
          const float fx = static_cast<float>(srcx - x0);
          v = (1 - fy) * ((1 - fx) * img.at(y0, x0, ch) +
                          fx * img.at(y0, x1, ch)) +
              fy * ((1 - fx) * img.at(y1, x0, ch) + fx * img.at(y1, x1, ch));
        }
        out.at(y, x, ch) = v;
      }
    }
  out.clip01();
  return out;
}

// Random rotation, angle uniform in [-rho_max, +rho_max] degrees.
inline Image rotate(const Image& img, double rho_max, RngStream& rng,
                    const std::vector<float>& fill = {}) {
  if (rho_max < 0 || rho_max > 180)
    throw DataError("rotate: rho " + std::to_string(rho_max) +
                    " outside [0,180]");
  if (rho_max == 0) return img;
  const double angle = rng.uniform(-rho_max, rho_max);
  return rotate_by(img, angle, fill);
}

// Crop of side crop_side whose center is displaced from the image center by
// integer offsets drawn uniformly from [-C, C] in both axes.
inline Image offset_crop(const Image& full_img, long max_offset,
                         std::size_t crop_side, RngStream& rng) {
  if (max_offset < 0)
    throw DataError("offset_crop: negative offset bound");
  const long top0 = static_cast<long>(full_img.height - crop_side) / 2;
  const long left0 = static_cast<long>(full_img.width - crop_side) / 2;
  if (crop_side > full_img.height || crop_side > full_img.width ||
      top0 - max_offset < 0 || left0 - max_offset < 0 ||
      top0 + max_offset + static_cast<long>(crop_side) >
          static_cast<long>(full_img.height) ||
      left0 + max_offset + static_cast<long>(crop_side) >
          static_cast<long>(full_img.width))
    throw DataError("offset_crop: crop " + std::to_string(crop_side) +
                    " with offset " + std::to_string(max_offset) +
                    " exceeds source " + std::to_string(full_img.height) +
                    "x" + std::to_string(full_img.width));
  const long dy = rng.uniform_int(-max_offset, max_offset);
  const long dx = rng.uniform_int(-max_offset, max_offset);
  return crop(full_img, static_cast<std::size_t>(top0 + dy),
              static_cast<std::size_t>(left0 + dx), crop_side, crop_side);
}

// Dispatch. The crop kind is handled by the preprocessing pipeline (it
// replaces the center-crop step) and is rejected here.
inline Image apply(const DistortionSpec& spec, const Image& img,
                   RngStream& rng, const DistortionContext* ctx = nullptr) {
  switch (spec.kind) {
    case DistortionKind::gaussian:
      return gaussian_noise(img, spec.parameter, rng);
    case DistortionKind::jpeg:
      return jpeg_compress(img, static_cast<int>(spec.parameter));
    case DistortionKind::thumbnail:
      return thumbnail_resize(img, static_cast<std::size_t>(spec.parameter));
    case DistortionKind::fgsm:
      if (!ctx || !ctx->fgsm_input_grad)
        throw DataError("apply: fgsm distortion requires a model context");
      return fgsm(img, spec.parameter, ctx->fgsm_input_grad);
    case DistortionKind::rotation:
      return rotate(img, spec.parameter, rng,
                    ctx ? ctx->rotation_fill : std::vector<float>{});
    case DistortionKind::crop:
      throw DataError(
          "apply: crop distortion operates inside the preprocessing "
          "pipeline, not on preprocessed images");
    case DistortionKind::compose: {
      Image out = img;
      for (const auto& child : spec.children) out = apply(child, out, rng, ctx);
      return out;
    }
  }
  throw DataError("apply: unknown distortion kind");
}

}  // namespace stabletrain
