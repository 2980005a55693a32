#include <catch2/catch_amalgamated.hpp>
#include <filesystem>

#include "stabletrain/train.hpp"

using namespace stabletrain;

namespace {

struct Toy {
  TrainData data;
  TrainConfig cfg;
};

Toy make_toy(std::uint64_t seed = 11) {
  SyntheticSpec spec;
  spec.classes = 3;
  spec.per_class = 12;
  spec.height = spec.width = 12;
  spec.jitter = 0;  // keep the tiny task linearly separable
  auto full = load_synthetic(spec, seed);
  Toy t;
  auto [train, val] = split_per_class(full, 9, 3, seed + 1);
  t.data.train = std::move(train);
  t.data.val = std::move(val);
  t.data.pipeline.resize_short = 12;
  t.data.pipeline.crop_side = 10;
  t.data.stats = compute_channel_stats(t.data.train, t.data.pipeline);
  t.data.model.height = t.data.model.width = 10;
  t.data.model.channels = 3;
  t.data.model.classes = 3;
  t.data.model.stem_channels = 4;
  t.data.model.blocks_per_stage = {1};
  t.cfg.epochs = 12;
  t.cfg.batch_size = 16;
  t.cfg.learning_rate = 0.1;
  t.cfg.seed = seed;
  return t;
}

}  // namespace

TEST_CASE("nesterov step matches hand computation") {
  ModelParams<float> p;
  p.tensors.emplace("w", TensorF({1}, std::vector<float>{1.f}, true));
  auto opt = OptimizerState<float>::make(p, 0.1f, 0.9f);
  p.at("w").grad() = {1.f};
  sgd_nesterov_step(p, opt);
  // v1 = 0.9*0 + 1 = 1; w1 = 1 - 0.1*(1 + 0.9*1) = 0.81
  CHECK_THAT(opt.velocity.at("w")[0], Catch::Matchers::WithinAbs(1.0, 1e-7));
  CHECK_THAT(p.at("w").data()[0], Catch::Matchers::WithinAbs(0.81, 1e-7));
  // second step with the same gradient: v2 = 1.9, w2 = 0.81 - 0.1*(1+1.71)
  sgd_nesterov_step(p, opt);
  CHECK_THAT(opt.velocity.at("w")[0], Catch::Matchers::WithinAbs(1.9, 1e-6));
  CHECK_THAT(p.at("w").data()[0],
             Catch::Matchers::WithinAbs(0.81 - 0.1 * 2.71, 1e-6));
}

TEST_CASE("zero learning rate leaves weights unchanged") {
  ModelParams<float> p;
  p.tensors.emplace("w", TensorF({2}, std::vector<float>{0.5f, -0.25f}, true));
  auto opt = OptimizerState<float>::make(p, 0.f, 0.9f);
  p.at("w").grad() = {3.f, -7.f};
  sgd_nesterov_step(p, opt);
  CHECK(p.at("w").data() == std::vector<float>{0.5f, -0.25f});
}

TEST_CASE("optimizer rejects non-finite gradients, naming the tensor") {
  ModelParams<float> p;
  p.tensors.emplace("bad", TensorF({1}, std::vector<float>{0.f}, true));
  auto opt = OptimizerState<float>::make(p, 0.1f, 0.9f);
  p.at("bad").grad() = {std::numeric_limits<float>::quiet_NaN()};
  CHECK_THROWS_WITH(sgd_nesterov_step(p, opt),
                    Catch::Matchers::ContainsSubstring("bad"));
}

TEST_CASE("train config validation") {
  TrainConfig cfg;
  cfg.method = TrainMethod::stability;
  cfg.alpha = 0.5;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);  // distortion required
  cfg.distortion = DistortionSpec::single(DistortionKind::gaussian, 0.05);
  CHECK_NOTHROW(cfg.validate());
  cfg.alpha = -1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.alpha = 0.5;
  cfg.p = 1.5;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("baseline training learns the toy task") {
  Toy toy = make_toy();
  auto result = train_baseline(toy.cfg, toy.data);
  REQUIRE(result.record.epochs.size() == toy.cfg.epochs);
  double best = 0;
  for (const auto& e : result.record.epochs) best = std::max(best, e.val_acc);
  CHECK(best >= 0.85);
  CHECK(result.best.val_score == best);
  CHECK(result.record.selected_epoch ==
        static_cast<std::size_t>(result.best.epoch));
  // selection provenance
  CHECK(result.record.selection_metric == "accuracy");
  CHECK(result.record.selection_split == "val");
  CHECK(result.record.selection_distortion == "none");
}

TEST_CASE("training is deterministic in the seed") {
  Toy toy = make_toy();
  toy.cfg.epochs = 3;
  auto a = train_baseline(toy.cfg, toy.data);
  auto b = train_baseline(toy.cfg, toy.data);
  for (const auto& [name, t] : a.best.params.tensors)
    CHECK(b.best.params.tensors.at(name).data() == t.data());
  for (const auto& [name, v] : a.best.params.state)
    CHECK(b.best.params.state.at(name) == v);
  for (std::size_t e = 0; e < a.record.epochs.size(); ++e) {
    CHECK(a.record.epochs[e].train_loss == b.record.epochs[e].train_loss);
    CHECK(a.record.epochs[e].val_acc == b.record.epochs[e].val_acc);
  }
}

TEST_CASE("degenerate objectives reproduce baseline fine-tuning exactly") {
  Toy toy = make_toy(23);
  toy.cfg.epochs = 3;
  auto init = build_model<float>(toy.data.model, 99);

  TrainConfig ref = toy.cfg;
  ref.method = TrainMethod::baseline;
  auto base = train_finetune(ref, toy.data, init);

  auto check_same = [&](const RunResult& r) {
    for (const auto& [name, t] : base.best.params.tensors)
      CHECK(r.best.params.tensors.at(name).data() == t.data());
    for (const auto& [name, v] : base.best.params.state)
      CHECK(r.best.params.state.at(name) == v);
    for (std::size_t e = 0; e < base.record.epochs.size(); ++e)
      CHECK(r.record.epochs[e].train_loss == base.record.epochs[e].train_loss);
  };

  TrainConfig st = toy.cfg;
  st.method = TrainMethod::stability;
  st.alpha = 0;
  st.distortion = DistortionSpec::single(DistortionKind::gaussian, 0.1);
  check_same(train_stability(st, toy.data, init));

  TrainConfig da = toy.cfg;
  da.method = TrainMethod::augment;
  da.p = 0;
  da.distortion = DistortionSpec::single(DistortionKind::rotation, 30);
  check_same(train_augment(da, toy.data, init));

  TrainConfig at = toy.cfg;
  at.method = TrainMethod::adversarial;
  at.mu = 1;
  at.distortion = DistortionSpec::single(DistortionKind::fgsm, 0.01);
  check_same(train_adversarial(at, toy.data, init));
}

TEST_CASE("augmentation fraction tracks p") {
  Toy toy = make_toy(31);
  toy.cfg.method = TrainMethod::augment;
  toy.cfg.p = 0.7;
  toy.cfg.epochs = 20;
  toy.cfg.distortion = DistortionSpec::single(DistortionKind::gaussian, 0.05);
  auto init = build_model<float>(toy.data.model, 7);
  auto r = train_augment(toy.cfg, toy.data, init);
  // 27 samples x 20 epochs = 540 Bernoulli draws
  CHECK_THAT(r.record.augment_fraction, Catch::Matchers::WithinAbs(0.7, 0.06));
}

TEST_CASE("stability training runs and stays finite") {
  Toy toy = make_toy(41);
  toy.cfg.method = TrainMethod::stability;
  toy.cfg.alpha = 0.3;
  toy.cfg.epochs = 3;
  toy.cfg.distortion = DistortionSpec::single(DistortionKind::gaussian, 0.05);
  auto init = build_model<float>(toy.data.model, 5);
  auto r = train_stability(toy.cfg, toy.data, init);
  for (const auto& e : r.record.epochs) CHECK(std::isfinite(e.train_loss));

  // symmetric variant diverges from the forward-KL trajectory
  toy.cfg.method = TrainMethod::stability_sym;
  auto rs = train_stability(toy.cfg, toy.data, init);
  bool differs = false;
  for (const auto& [name, t] : r.best.params.tensors)
    if (rs.best.params.tensors.at(name).data() != t.data()) differs = true;
  CHECK(differs);
}

TEST_CASE("adversarial training with fgsm runs; non-fgsm rejected") {
  Toy toy = make_toy(47);
  toy.cfg.method = TrainMethod::adversarial;
  toy.cfg.mu = 0.5;
  toy.cfg.epochs = 2;
  toy.cfg.distortion = DistortionSpec::single(DistortionKind::fgsm, 0.01);
  auto init = build_model<float>(toy.data.model, 5);
  auto r = train_adversarial(toy.cfg, toy.data, init);
  for (const auto& e : r.record.epochs) CHECK(std::isfinite(e.train_loss));

  toy.cfg.distortion = DistortionSpec::single(DistortionKind::gaussian, 0.05);
  CHECK_THROWS_AS(train_adversarial(toy.cfg, toy.data, init), ConfigError);
}

TEST_CASE("training starting point is not mutated") {
  Toy toy = make_toy(53);
  toy.cfg.epochs = 2;
  auto init = build_model<float>(toy.data.model, 5);
  auto before = init.clone();
  TrainConfig cfg = toy.cfg;
  cfg.method = TrainMethod::baseline;
  train_finetune(cfg, toy.data, init);
  for (const auto& [name, t] : before.tensors)
    CHECK(init.tensors.at(name).data() == t.data());
  for (const auto& [name, v] : before.state)
    CHECK(init.state.at(name) == v);
}

TEST_CASE("checkpoints are written per epoch plus a best copy") {
  Toy toy = make_toy(59);
  toy.cfg.epochs = 3;
  auto dir = (std::filesystem::temp_directory_path() / "stabletrain_tests" /
              "run_ckpt")
                 .string();
  std::filesystem::remove_all(dir);
  auto r = train_baseline(toy.cfg, toy.data, dir);
  for (int e = 0; e < 3; ++e) {
    char name[32];
    std::snprintf(name, sizeof name, "epoch_%03d.stbl", e);
    CHECK(std::filesystem::exists(std::filesystem::path(dir) / name));
  }
  CHECK(std::filesystem::exists(std::filesystem::path(dir) / "best.stbl"));
  Checkpoint best = load_checkpoint(r.record.checkpoint_path);
  CHECK(best.epoch == r.best.epoch);
  CHECK(best.val_score == r.best.val_score);
  for (const auto& [name, t] : r.best.params.tensors)
    CHECK(best.params.tensors.at(name).data() == t.data());
}

TEST_CASE("evaluation under a distortion is deterministic in the seed") {
  Toy toy = make_toy(61);
  auto params = build_model<float>(toy.data.model, 5);
  auto spec = DistortionSpec::single(DistortionKind::gaussian, 0.2);
  const double a =
      evaluate_accuracy(params, toy.data.model, toy.data.val, toy.data.pipeline,
                        toy.data.stats, &spec, 123);
  const double b =
      evaluate_accuracy(params, toy.data.model, toy.data.val, toy.data.pipeline,
                        toy.data.stats, &spec, 123);
  CHECK(a == b);
  // batch size must not change the distorted set
  const double c =
      evaluate_accuracy(params, toy.data.model, toy.data.val, toy.data.pipeline,
                        toy.data.stats, &spec, 123, 2);
  CHECK(a == c);
}
