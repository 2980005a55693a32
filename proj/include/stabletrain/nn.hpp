#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "stabletrain/common.hpp"
#include "stabletrain/rng.hpp"
#include "stabletrain/tensor.hpp"

namespace stabletrain {

// Desk-scale residual classifier. Defaults: 32x32x3 input, 16 stem channels,
// 3 stages of 2 residual blocks with channel doubling and stride-2
// downsampling between stages, global average pool, dense head.
struct ModelConfig {
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t channels = 3;
  std::size_t classes = 10;
  std::size_t stem_channels = 16;
  std::vector<std::size_t> blocks_per_stage = {2, 2, 2};
  bool batch_norm = true;

  void validate() const {
    if (classes < 2) throw ConfigError("model: classes must be >= 2");
    if (height == 0 || width == 0 || channels == 0 || stem_channels == 0 ||
        blocks_per_stage.empty())
      throw ConfigError("model: all extents must be positive");
    // every stage past the first halves the spatial dims; a stride-2
    // transition on a 1-pixel map is degenerate
    std::size_t h = height, w = width;
    for (std::size_t s = 1; s < blocks_per_stage.size(); ++s) {
      if (h < 2 || w < 2)
        throw ConfigError("model: stage " + std::to_string(s) +
                          " would reduce spatial dims below 1x1");
      h = (h + 1) / 2;
      w = (w + 1) / 2;
    }
  }

  std::size_t stage_channels(std::size_t stage) const {
    return stem_channels << stage;
  }
};

// Named parameter map. Trainable tensors carry requires_grad; batch-norm
// running statistics live in `state` and are updated in place during
// training-mode forward passes.
template <typename T>
struct ModelParams {
  std::map<std::string, Tensor<T>> tensors;
  std::map<std::string, std::vector<T>> state;

  Tensor<T>& at(const std::string& name) {
    auto it = tensors.find(name);
    if (it == tensors.end())
      throw DataError("model params: missing tensor '" + name + "'");
    return it->second;
  }
  const Tensor<T>& at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end())
      throw DataError("model params: missing tensor '" + name + "'");
    return it->second;
  }
  std::vector<T>& state_at(const std::string& name) {
    auto it = state.find(name);
    if (it == state.end())
      throw DataError("model params: missing state '" + name + "'");
    return it->second;
  }

  void zero_grad() {
    for (auto& [name, t] : tensors) t.zero_grad();
  }

  // Tensors are shared handles; a trainable copy needs fresh nodes.
  ModelParams clone() const {
    ModelParams out;
    for (const auto& [name, t] : tensors)
      out.tensors.emplace(name,
                          Tensor<T>(t.shape(), t.data(), t.requires_grad()));
    out.state = state;
    return out;
  }
};

namespace nn_detail {

template <typename T>
Tensor<T> he_conv(std::size_t f, std::size_t c, std::size_t k,
                  RngStream& rng) {
  const T stddev = std::sqrt(T(2) / static_cast<T>(c * k * k));
  std::vector<T> w(f * c * k * k);
  for (auto& v : w) v = static_cast<T>(rng.normal()) * stddev;
  return Tensor<T>({f, c, k, k}, std::move(w), true);
}

template <typename T>
Tensor<T> he_dense(std::size_t in, std::size_t out, RngStream& rng) {
  const T stddev = std::sqrt(T(2) / static_cast<T>(in));
  std::vector<T> w(in * out);
  for (auto& v : w) v = static_cast<T>(rng.normal()) * stddev;
  return Tensor<T>({in, out}, std::move(w), true);
}

template <typename T>
void add_norm(ModelParams<T>& p, const std::string& prefix, std::size_t c) {
  p.tensors.emplace(prefix + ".gamma",
                    Tensor<T>({c}, std::vector<T>(c, T(1)), true));
  p.tensors.emplace(prefix + ".beta",
                    Tensor<T>({c}, std::vector<T>(c, T(0)), true));
  p.state.emplace(prefix + ".running_mean", std::vector<T>(c, T(0)));
  p.state.emplace(prefix + ".running_var", std::vector<T>(c, T(1)));
}

}  // namespace nn_detail

// Deterministic He-style initialization: normal(0, 2/fan_in) conv/dense
// weights, zero biases, ones/zeros for norm scale/shift.
template <typename T>
ModelParams<T> build_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ModelParams<T> p;
  RngStream rng(seed);

  p.tensors.emplace("stem.conv.w", nn_detail::he_conv<T>(cfg.stem_channels,
                                                         cfg.channels, 3, rng));
  if (cfg.batch_norm) {
    nn_detail::add_norm(p, "stem.bn", cfg.stem_channels);
  } else {
    p.tensors.emplace("stem.conv.b",
                      Tensor<T>({cfg.stem_channels},
                                std::vector<T>(cfg.stem_channels, T(0)), true));
  }

  std::size_t in_ch = cfg.stem_channels;
  for (std::size_t s = 0; s < cfg.blocks_per_stage.size(); ++s) {
    const std::size_t out_ch = cfg.stage_channels(s);
    for (std::size_t b = 0; b < cfg.blocks_per_stage[s]; ++b) {
      const std::string pre =
          "stage" + std::to_string(s) + ".block" + std::to_string(b);
      const bool transition = b == 0 && (out_ch != in_ch || s > 0);
      const std::size_t block_in = b == 0 ? in_ch : out_ch;
      p.tensors.emplace(pre + ".conv1.w",
                        nn_detail::he_conv<T>(out_ch, block_in, 3, rng));
      p.tensors.emplace(pre + ".conv2.w",
                        nn_detail::he_conv<T>(out_ch, out_ch, 3, rng));
      if (transition)
        p.tensors.emplace(pre + ".proj.w",
                          nn_detail::he_conv<T>(out_ch, block_in, 1, rng));
      if (cfg.batch_norm) {
        nn_detail::add_norm(p, pre + ".bn1", out_ch);
        nn_detail::add_norm(p, pre + ".bn2", out_ch);
      } else {
        p.tensors.emplace(pre + ".conv1.b",
                          Tensor<T>({out_ch}, std::vector<T>(out_ch, T(0)),
                                    true));
        p.tensors.emplace(pre + ".conv2.b",
                          Tensor<T>({out_ch}, std::vector<T>(out_ch, T(0)),
                                    true));
      }
    }
    in_ch = out_ch;
  }

  p.tensors.emplace("head.w", nn_detail::he_dense<T>(in_ch, cfg.classes, rng));
  p.tensors.emplace("head.b", Tensor<T>({cfg.classes},
                                        std::vector<T>(cfg.classes, T(0)),
                                        true));
  return p;
}

// Forward pass: [N,C,H,W] batch -> [N,classes] logits. `training` selects
// batch-norm statistics (batch stats vs frozen running stats); everything
// else is mode-independent. `update_stats=false` keeps training-mode
// normalization but leaves the running statistics untouched — the mode for
// perturbed-branch forwards, whose distribution must not pollute the
// statistics used at evaluation time.
template <typename T>
Tensor<T> predict(ModelParams<T>& params, const ModelConfig& cfg,
                  const Tensor<T>& batch, bool training,
                  bool update_stats = true) {
  if (batch.shape().size() != 4 || batch.shape()[1] != cfg.channels ||
      batch.shape()[2] != cfg.height || batch.shape()[3] != cfg.width)
    throw ShapeError("predict: batch " + shape_str(batch.shape()) +
                     " does not match model input (" +
                     std::to_string(cfg.channels) + "," +
                     std::to_string(cfg.height) + "," +
                     std::to_string(cfg.width) + ")");

  Tensor<T> h;
  if (cfg.batch_norm) {
    h = conv2d(batch, params.at("stem.conv.w"), Tensor<T>(), 1, Pad::same);
    h = batchnorm2d(h, params.at("stem.bn.gamma"), params.at("stem.bn.beta"),
                    params.state_at("stem.bn.running_mean"),
                    params.state_at("stem.bn.running_var"), training,
                    T(0.9), T(1e-5), update_stats);
  } else {
    h = conv2d(batch, params.at("stem.conv.w"), params.at("stem.conv.b"), 1,
               Pad::same);
  }
  h = relu(h);

  std::size_t in_ch = cfg.stem_channels;
  for (std::size_t s = 0; s < cfg.blocks_per_stage.size(); ++s) {
    const std::size_t out_ch = cfg.stage_channels(s);
    for (std::size_t b = 0; b < cfg.blocks_per_stage[s]; ++b) {
      const std::string pre =
          "stage" + std::to_string(s) + ".block" + std::to_string(b);
      const bool transition = b == 0 && (out_ch != in_ch || s > 0);
      const std::size_t stride = (b == 0 && s > 0) ? 2 : 1;

      Tensor<T> skip = h;
      if (transition)
        skip = conv2d(h, params.at(pre + ".proj.w"), Tensor<T>(), stride,
                      Pad::same);

      Tensor<T> f;
      if (cfg.batch_norm) {
        f = conv2d(h, params.at(pre + ".conv1.w"), Tensor<T>(), stride,
                   Pad::same);
        f = batchnorm2d(f, params.at(pre + ".bn1.gamma"),
                        params.at(pre + ".bn1.beta"),
                        params.state_at(pre + ".bn1.running_mean"),
                        params.state_at(pre + ".bn1.running_var"), training,
                        T(0.9), T(1e-5), update_stats);
        f = relu(f);
        f = conv2d(f, params.at(pre + ".conv2.w"), Tensor<T>(), 1, Pad::same);
        f = batchnorm2d(f, params.at(pre + ".bn2.gamma"),
                        params.at(pre + ".bn2.beta"),
                        params.state_at(pre + ".bn2.running_mean"),
                        params.state_at(pre + ".bn2.running_var"), training,
                        T(0.9), T(1e-5), update_stats);
      } else {
        f = conv2d(h, params.at(pre + ".conv1.w"), params.at(pre + ".conv1.b"),
                   stride, Pad::same);
        f = relu(f);
        f = conv2d(f, params.at(pre + ".conv2.w"), params.at(pre + ".conv2.b"),
                   1, Pad::same);
      }
      h = relu(add(f, skip));
    }
    in_ch = out_ch;
  }

  h = global_avg_pool(h);
  return add_bias_rows(matmul(h, params.at("head.w")), params.at("head.b"));
}

// softmax(logits), rows summing to 1.
template <typename T>
Tensor<T> predict_proba(ModelParams<T>& params, const ModelConfig& cfg,
                        const Tensor<T>& batch, bool training = false) {
  return exp_op(log_softmax(predict(params, cfg, batch, training)));
}

}  // namespace stabletrain
