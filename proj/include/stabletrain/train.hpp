#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "stabletrain/checkpoint.hpp"
#include "stabletrain/common.hpp"
#include "stabletrain/dataset.hpp"
#include "stabletrain/distortions.hpp"
#include "stabletrain/nn.hpp"
#include "stabletrain/objectives.hpp"
#include "stabletrain/optim.hpp"

namespace stabletrain {

enum class TrainMethod { baseline, stability, stability_sym, augment, adversarial };

inline std::string to_string(TrainMethod m) {
  switch (m) {
    case TrainMethod::baseline: return "baseline";
    case TrainMethod::stability: return "stability";
    case TrainMethod::stability_sym: return "stability_sym";
    case TrainMethod::augment: return "augment";
    case TrainMethod::adversarial: return "adversarial";
  }
  return "?";
}

inline TrainMethod train_method_from(const std::string& s) {
  if (s == "baseline") return TrainMethod::baseline;
  if (s == "stability") return TrainMethod::stability;
  if (s == "stability_sym") return TrainMethod::stability_sym;
  if (s == "augment") return TrainMethod::augment;
  if (s == "adversarial") return TrainMethod::adversarial;
  throw ConfigError("unknown training method '" + s +
                    "' (valid: baseline, stability, stability_sym, augment, "
                    "adversarial)");
}

struct TrainConfig {
  TrainMethod method = TrainMethod::baseline;
  double alpha = 0.0;  // ST: stability weight
  double p = 1.0;      // DA: probability the augmentation is applied
  double mu = 0.5;     // AT: clean-loss weight
  bool per_batch_bernoulli = false;   // DA variant (default: per sample)
  bool block_reference_grad = false;  // ST variant (default: both branches)
  std::optional<DistortionSpec> distortion;
  std::size_t epochs = 15;
  std::size_t batch_size = 32;
  double learning_rate = 0.01;
  double momentum = 0.9;
  std::uint64_t seed = 0;

  void validate() const {
    if (alpha < 0) throw ConfigError("train: alpha must be >= 0");
    if (p < 0 || p > 1) throw ConfigError("train: p must be in [0,1]");
    if (mu < 0 || mu > 1) throw ConfigError("train: mu must be in [0,1]");
    if (epochs == 0 || batch_size == 0)
      throw ConfigError("train: epochs and batch size must be positive");
    const bool needs_distortion = method == TrainMethod::stability ||
                                  method == TrainMethod::stability_sym ||
                                  method == TrainMethod::augment ||
                                  method == TrainMethod::adversarial;
    if (needs_distortion && !distortion)
      throw ConfigError("train: method " + to_string(method) +
                        " requires a train distortion");
  }
};

struct EpochStats {
  double train_loss = 0;
  double val_acc = 0;
  double wall_time = 0;  // seconds
};

struct RunRecord {
  TrainConfig config;
  std::vector<EpochStats> epochs;
  std::size_t selected_epoch = 0;  // argmax val acc, earliest on ties
  // provenance of the early-stopping signal
  std::string selection_metric = "accuracy";
  std::string selection_split = "val";
  std::string selection_distortion = "none";
  std::string checkpoint_path;  // selected checkpoint, empty if not persisted
  double augment_fraction = 0;  // DA only: observed fraction of perturbed samples
};

struct RunResult {
  RunRecord record;
  Checkpoint best;
};

// Everything a training run consumes besides its TrainConfig.
struct TrainData {
  Dataset train;
  Dataset val;
  PipelineConfig pipeline;
  ChannelStats stats;
  ModelConfig model;
};

namespace train_detail {

// dL/dx in image (HWC) layout for a single [0,1] image at the distortion
// point: gradients pass through normalization and the network in eval mode,
// parameter grads incurred along the way are discarded.
inline std::vector<float> fgsm_input_grad(ModelParams<float>& params,
                                          const ModelConfig& mcfg,
                                          const ChannelStats& stats,
                                          const Image& img,
                                          std::size_t label) {
  const std::size_t c = img.channels, hw = img.height * img.width;
  std::vector<float> chw(c * hw);
  for (std::size_t i = 0; i < hw; ++i)
    for (std::size_t ch = 0; ch < c; ++ch) chw[ch * hw + i] = img.px[i * c + ch];
  std::vector<float> sc(c), sh(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    sc[ch] = 1.f / stats.stddev[ch];
    sh[ch] = -stats.mean[ch] / stats.stddev[ch];
  }
  TensorF x({1, c, img.height, img.width}, std::move(chw));
  auto grad = input_gradient<float>(
      [&](const TensorF& xi) {
        auto normed = channel_affine(xi, sc, sh);
        return cross_entropy_logits(predict(params, mcfg, normed, false),
                                    std::vector<std::size_t>{label});
      },
      x);
  params.zero_grad();
  std::vector<float> hwc(c * hw);
  for (std::size_t i = 0; i < hw; ++i)
    for (std::size_t ch = 0; ch < c; ++ch) hwc[i * c + ch] = grad[ch * hw + i];
  return hwc;
}

}  // namespace train_detail

// Distortion context bound to a model: FGSM gradients from the current
// parameters, rotation fill from the dataset mean.
inline DistortionContext make_distortion_context(ModelParams<float>& params,
                                                 const ModelConfig& mcfg,
                                                 const ChannelStats& stats,
                                                 std::size_t label) {
  DistortionContext ctx;
  ctx.rotation_fill = stats.mean;
  ctx.fgsm_input_grad = [&params, &mcfg, &stats, label](const Image& img) {
    return train_detail::fgsm_input_grad(params, mcfg, stats, img, label);
  };
  return ctx;
}

// Top-1 accuracy on a dataset, optionally under a test distortion. The
// evaluation stream is split per sample index so every model sees the same
// distorted set for a given seed, independent of batching.
inline double evaluate_accuracy(ModelParams<float>& params,
                                const ModelConfig& mcfg, const Dataset& ds,
                                const PipelineConfig& pipeline,
                                const ChannelStats& stats,
                                const DistortionSpec* distortion,
                                std::uint64_t eval_seed,
                                std::size_t batch_size = 64) {
  if (ds.size() == 0) throw DataError("evaluate: empty dataset");
  RngStream root(eval_seed);
  std::size_t correct = 0;
  for (std::size_t start = 0; start < ds.size(); start += batch_size) {
    const std::size_t n = std::min(batch_size, ds.size() - start);
    std::vector<std::vector<float>> samples;
    std::vector<std::size_t> labels;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t idx = start + i;
      RngStream rng = root.split(idx);
      DistortionContext ctx = make_distortion_context(params, mcfg, stats,
                                                      ds.labels[idx]);
      samples.push_back(preprocess(ds.images[idx], pipeline, stats, distortion,
                                   rng, &ctx));
      labels.push_back(ds.labels[idx]);
    }
    auto logits =
        predict(params, mcfg,
                make_batch(samples, mcfg.channels, pipeline.crop_side), false);
    const std::size_t c = mcfg.classes;
    for (std::size_t i = 0; i < n; ++i) {
      const float* row = logits.data().data() + i * c;
      const std::size_t arg =
          std::max_element(row, row + c) - row;
      if (arg == labels[i]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(ds.size());
}

namespace train_detail {

// One generic loop drives all four procedures. Degenerate settings
// (ST alpha=0, DA p=0, AT mu=1) skip the perturbed branch entirely so the
// parameter trajectory, including batch-norm statistics, is bit-identical
// to baseline fine-tuning under the same seed.
inline RunResult run_training(const TrainConfig& cfg, const TrainData& data,
                              const ModelParams<float>& start,
                              const std::string& run_dir) {
  ModelParams<float> params = start.clone();
  cfg.validate();
  data.model.validate();
  data.train.validate();
  data.val.validate();
  if (data.train.classes != data.model.classes)
    throw DataError("train: dataset has " +
                    std::to_string(data.train.classes) +
                    " classes, model expects " +
                    std::to_string(data.model.classes));

  if (!run_dir.empty()) std::filesystem::create_directories(run_dir);

  // clean preprocessed training set, reused every epoch
  std::vector<std::vector<float>> clean(data.train.size());
  {
    RngStream dummy(0);
    for (std::size_t i = 0; i < data.train.size(); ++i)
      clean[i] = preprocess(data.train.images[i], data.pipeline, data.stats,
                            nullptr, dummy);
  }

  OptimizerState<float> opt = OptimizerState<float>::make(
      params, static_cast<float>(cfg.learning_rate),
      static_cast<float>(cfg.momentum));

  RunResult result;
  result.record.config = cfg;
  RngStream shuffle_root = RngStream(cfg.seed).split(1);
  RngStream distort_root = RngStream(cfg.seed).split(2);

  const bool st = cfg.method == TrainMethod::stability ||
                  cfg.method == TrainMethod::stability_sym;
  const bool st_active = st && cfg.alpha > 0;
  const bool da_active = cfg.method == TrainMethod::augment && cfg.p > 0;
  const bool at_active = cfg.method == TrainMethod::adversarial && cfg.mu < 1;

  double best_acc = -1;
  std::size_t best_epoch = 0;
  std::size_t augment_applied = 0, augment_seen = 0;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<std::size_t> order(data.train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    RngStream shuffle = shuffle_root.split(epoch);
    for (std::size_t i = order.size() - 1; i > 0; --i)
      std::swap(order[i], order[shuffle.uniform_int(0, static_cast<long>(i))]);

    double loss_sum = 0;
    std::size_t steps = 0;
    for (std::size_t start = 0; start < order.size();
         start += cfg.batch_size) {
      const std::size_t n = std::min(cfg.batch_size, order.size() - start);
      std::vector<std::vector<float>> xs;
      std::vector<std::size_t> labels;
      for (std::size_t i = 0; i < n; ++i) {
        xs.push_back(clean[order[start + i]]);
        labels.push_back(data.train.labels[order[start + i]]);
      }

      // perturbed copies, fresh each step, one independent stream per
      // sample per epoch
      auto perturbed_sample = [&](std::size_t pos) {
        const std::size_t idx = order[start + pos];
        RngStream rng = distort_root.split(epoch).split(idx);
        DistortionContext ctx = make_distortion_context(
            params, data.model, data.stats, data.train.labels[idx]);
        return preprocess(data.train.images[idx], data.pipeline, data.stats,
                          &*cfg.distortion, rng, &ctx);
      };

      TensorF loss;
      if (st_active) {
        std::vector<std::vector<float>> xps(n);
        for (std::size_t i = 0; i < n; ++i) xps[i] = perturbed_sample(i);
        auto logits = predict(
            params, data.model,
            make_batch(xs, data.model.channels, data.pipeline.crop_side),
            true);
        auto logits_p = predict(
            params, data.model,
            make_batch(xps, data.model.channels, data.pipeline.crop_side),
            true, /*update_stats=*/false);
        // L0 only on the unperturbed samples
        auto l0 = cross_entropy_logits(logits, labels);
        auto lstab = stability_loss_logits(
            logits, logits_p, cfg.method == TrainMethod::stability_sym,
            cfg.block_reference_grad);
        loss = add(l0, scale(lstab, static_cast<float>(cfg.alpha)));
      } else if (da_active) {
        RngStream bern =
            distort_root.split(epoch).split(0x5eedULL + start);
        bool batch_on = cfg.per_batch_bernoulli
                            ? bern.next_double() < cfg.p
                            : false;
        for (std::size_t i = 0; i < n; ++i) {
          const bool on = cfg.per_batch_bernoulli
                              ? batch_on
                              : bern.next_double() < cfg.p;
          if (on) {
            xs[i] = perturbed_sample(i);
            ++augment_applied;
          }
          ++augment_seen;
        }
        auto logits = predict(
            params, data.model,
            make_batch(xs, data.model.channels, data.pipeline.crop_side),
            true);
        loss = cross_entropy_logits(logits, labels);
      } else if (at_active) {
        std::vector<std::vector<float>> xps(n);
        for (std::size_t i = 0; i < n; ++i) xps[i] = perturbed_sample(i);
        auto logits = predict(
            params, data.model,
            make_batch(xs, data.model.channels, data.pipeline.crop_side),
            true);
        auto logits_p = predict(
            params, data.model,
            make_batch(xps, data.model.channels, data.pipeline.crop_side),
            true, /*update_stats=*/false);
        auto l0 = cross_entropy_logits(logits, labels);
        auto ladv = cross_entropy_logits(logits_p, labels);
        loss = add(scale(l0, static_cast<float>(cfg.mu)),
                   scale(ladv, static_cast<float>(1.0 - cfg.mu)));
      } else {
        auto logits = predict(
            params, data.model,
            make_batch(xs, data.model.channels, data.pipeline.crop_side),
            true);
        loss = cross_entropy_logits(logits, labels);
      }

      if (!std::isfinite(loss.data()[0]))
        throw NumericError("train: non-finite loss at epoch " +
                           std::to_string(epoch) + ", step " +
                           std::to_string(steps));
      params.zero_grad();
      loss.backward();
      sgd_nesterov_step(params, opt);
      loss_sum += loss.data()[0];
      ++steps;
    }

    // early stopping signal: undistorted validation accuracy only
    const double val_acc = evaluate_accuracy(
        params, data.model, data.val, data.pipeline, data.stats, nullptr, 0);
    const double wall =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
            .count();
    result.record.epochs.push_back(
        {loss_sum / static_cast<double>(steps), val_acc, wall});

    Checkpoint ckpt;
    ckpt.config = data.model;
    ckpt.params = params.clone();
    ckpt.opt = opt;
    ckpt.has_opt = true;
    ckpt.epoch = static_cast<std::uint32_t>(epoch);
    ckpt.val_score = val_acc;
    if (!run_dir.empty()) {
      char name[32];
      std::snprintf(name, sizeof name, "epoch_%03zu.stbl", epoch);
      save_checkpoint(ckpt, run_dir + "/" + name);
    }
    if (val_acc > best_acc) {
      best_acc = val_acc;
      best_epoch = epoch;
      result.best = std::move(ckpt);
    }
  }

  result.record.selected_epoch = best_epoch;
  if (augment_seen > 0)
    result.record.augment_fraction =
        static_cast<double>(augment_applied) / augment_seen;
  if (!run_dir.empty()) {
    result.record.checkpoint_path = run_dir + "/best.stbl";
    save_checkpoint(result.best, result.record.checkpoint_path);
  }
  return result;
}

}  // namespace train_detail

// Baseline: task loss only, on undistorted data, from fresh He-initialized
// weights.
inline RunResult train_baseline(const TrainConfig& cfg, const TrainData& data,
                                const std::string& run_dir = "") {
  if (cfg.method != TrainMethod::baseline)
    throw ConfigError("train_baseline: method must be 'baseline'");
  return train_detail::run_training(
      cfg, data, build_model<float>(data.model, cfg.seed), run_dir);
}

// Baseline fine-tuning from given weights; the reference trajectory for the
// degenerate-equivalence properties.
inline RunResult train_finetune(const TrainConfig& cfg, const TrainData& data,
                                const ModelParams<float>& start,
                                const std::string& run_dir = "") {
  return train_detail::run_training(cfg, data, start, run_dir);
}

inline RunResult train_stability(const TrainConfig& cfg, const TrainData& data,
                                 const ModelParams<float>& baseline,
                                 const std::string& run_dir = "") {
  if (cfg.method != TrainMethod::stability &&
      cfg.method != TrainMethod::stability_sym)
    throw ConfigError("train_stability: method must be stability[_sym]");
  return train_detail::run_training(cfg, data, baseline, run_dir);
}

inline RunResult train_augment(const TrainConfig& cfg, const TrainData& data,
                               const ModelParams<float>& baseline,
                               const std::string& run_dir = "") {
  if (cfg.method != TrainMethod::augment)
    throw ConfigError("train_augment: method must be 'augment'");
  return train_detail::run_training(cfg, data, baseline, run_dir);
}

inline RunResult train_adversarial(const TrainConfig& cfg,
                                   const TrainData& data,
                                   const ModelParams<float>& baseline,
                                   const std::string& run_dir = "") {
  if (cfg.method != TrainMethod::adversarial)
    throw ConfigError("train_adversarial: method must be 'adversarial'");
  if (!cfg.distortion || cfg.distortion->kind != DistortionKind::fgsm)
    throw ConfigError("train_adversarial: distortion must be fgsm");
  return train_detail::run_training(cfg, data, baseline, run_dir);
}

}  // namespace stabletrain
