#include <catch2/catch_amalgamated.hpp>
#include <cmath>

#include "finite_diff.hpp"
#include "stabletrain/nn.hpp"
#include "stabletrain/objectives.hpp"

using namespace stabletrain;

namespace {

TensorF random_batch(const ModelConfig& cfg, std::size_t n, std::uint64_t seed) {
  RngStream rng(seed);
  std::vector<float> v(n * cfg.channels * cfg.height * cfg.width);
  for (auto& x : v) x = static_cast<float>(rng.next_double());
  return TensorF({n, cfg.channels, cfg.height, cfg.width}, std::move(v));
}

ModelConfig tiny_cfg() {
  ModelConfig cfg;
  cfg.height = cfg.width = 8;
  cfg.channels = 2;
  cfg.classes = 3;
  cfg.stem_channels = 4;
  cfg.blocks_per_stage = {1, 1};
  return cfg;
}

}  // namespace

TEST_CASE("build_model is deterministic in (cfg, seed)") {
  ModelConfig cfg = tiny_cfg();
  auto a = build_model<float>(cfg, 7);
  auto b = build_model<float>(cfg, 7);
  REQUIRE(a.tensors.size() == b.tensors.size());
  for (const auto& [name, t] : a.tensors)
    CHECK(t.data() == b.tensors.at(name).data());
  auto c = build_model<float>(cfg, 8);
  CHECK(a.tensors.at("stem.conv.w").data() !=
        c.tensors.at("stem.conv.w").data());
}

TEST_CASE("degenerate configs are rejected") {
  ModelConfig cfg = tiny_cfg();
  cfg.classes = 1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = tiny_cfg();
  cfg.height = cfg.width = 2;
  cfg.blocks_per_stage = {1, 1, 1, 1};  // would shrink below 1x1
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("head output shape is (batch, classes)") {
  ModelConfig cfg = tiny_cfg();
  auto params = build_model<float>(cfg, 1);
  auto logits = predict(params, cfg, random_batch(cfg, 5, 2), false);
  CHECK(logits.shape() == Shape{5, 3});
  CHECK_THROWS_AS(predict(params, cfg, TensorF({5, 2, 4, 4}), false),
                  ShapeError);
}

TEST_CASE("initializer variance is about 2/fan_in") {
  ModelConfig cfg;
  cfg.stem_channels = 16;
  cfg.blocks_per_stage = {2, 2, 2};
  auto params = build_model<double>(cfg, 3);
  // stage2 conv: 64x64x3x3 = 36864 samples, fan_in = 64*9
  const auto& w = params.at("stage2.block1.conv1.w").data();
  REQUIRE(w.size() >= 10000);
  double s = 0, s2 = 0;
  for (double v : w) {
    s += v;
    s2 += v * v;
  }
  const double n = static_cast<double>(w.size());
  const double var = s2 / n - (s / n) * (s / n);
  const double expect = 2.0 / (64.0 * 9.0);
  CHECK(var > 0.8 * expect);
  CHECK(var < 1.2 * expect);
}

TEST_CASE("zero-initialized head gives uniform probabilities") {
  ModelConfig cfg = tiny_cfg();
  auto params = build_model<float>(cfg, 5);
  std::fill(params.at("head.w").data().begin(),
            params.at("head.w").data().end(), 0.f);
  auto probs = predict_proba(params, cfg, random_batch(cfg, 2, 4));
  for (float p : probs.data())
    CHECK_THAT(p, Catch::Matchers::WithinAbs(1.0 / 3.0, 1e-6));
}

TEST_CASE("probability rows sum to one") {
  ModelConfig cfg = tiny_cfg();
  auto params = build_model<float>(cfg, 6);
  auto probs = predict_proba(params, cfg, random_batch(cfg, 4, 9));
  for (std::size_t i = 0; i < 4; ++i) {
    float s = 0;
    for (std::size_t j = 0; j < 3; ++j) s += probs.data()[i * 3 + j];
    CHECK_THAT(s, Catch::Matchers::WithinAbs(1.0, 1e-6));
  }
}

TEST_CASE("eval-mode predict is pure") {
  ModelConfig cfg = tiny_cfg();
  auto params = build_model<float>(cfg, 11);
  auto batch = random_batch(cfg, 3, 12);
  auto rm_before = params.state_at("stem.bn.running_mean");
  auto y1 = predict(params, cfg, batch, false);
  auto y2 = predict(params, cfg, batch, false);
  CHECK(y1.data() == y2.data());
  CHECK(params.state_at("stem.bn.running_mean") == rm_before);
}

TEST_CASE("training-mode forward updates running statistics") {
  ModelConfig cfg = tiny_cfg();
  auto params = build_model<float>(cfg, 13);
  auto rm_before = params.state_at("stem.bn.running_mean");
  predict(params, cfg, random_batch(cfg, 4, 14), true);
  CHECK(params.state_at("stem.bn.running_mean") != rm_before);
}

TEST_CASE("zeroed residual branch reproduces the skip path") {
  ModelConfig cfg = tiny_cfg();
  auto batch = random_batch(cfg, 2, 15);
  auto live = build_model<float>(cfg, 20);
  auto dead_a = build_model<float>(cfg, 20);
  auto dead_b = build_model<float>(cfg, 21);  // different residual weights
  for (auto* p : {&dead_a, &dead_b})
    for (auto& [name, t] : p->tensors)
      if (name.find(".bn2.") != std::string::npos)
        std::fill(t.data().begin(), t.data().end(), 0.f);
  // with bn2 zeroed the residual branch is dead: its conv weights no longer
  // matter, and the block reduces to the skip path
  for (auto& [name, t] : dead_b.tensors)
    if (name.find("conv1.w") == std::string::npos &&
        name.find("conv2.w") == std::string::npos &&
        name.find("bn1") == std::string::npos)
      t.data() = dead_a.tensors.at(name).data();
  auto ya = predict(dead_a, cfg, batch, false);
  auto yb = predict(dead_b, cfg, batch, false);
  CHECK(ya.data() == yb.data());
  // a live residual branch changes the output
  auto yl = predict(live, cfg, batch, false);
  CHECK(yl.data() != ya.data());
}

TEST_CASE("end-to-end gradient check on a 2-block model") {
  ModelConfig cfg;
  cfg.height = cfg.width = 6;
  cfg.channels = 1;
  cfg.classes = 3;
  cfg.stem_channels = 2;
  cfg.blocks_per_stage = {1, 1};
  const std::vector<std::size_t> labels{0, 2};

  auto params = build_model<double>(cfg, 31);
  RngStream rng(32);
  std::vector<double> batch_data(2 * 1 * 6 * 6);
  for (auto& v : batch_data) v = rng.next_double();

  auto run_loss = [&](ModelParams<double>& p) {
    // fresh running stats each call so batch-norm state cannot leak between
    // finite-difference evaluations
    auto state_backup = p.state;
    TensorD batch({2, 1, 6, 6}, batch_data);
    auto loss = cross_entropy_logits(predict(p, cfg, batch, true), labels);
    p.state = state_backup;
    return loss;
  };

  auto loss = run_loss(params);
  loss.backward();

  for (auto& [name, t] : params.tensors) {
    auto fd = testutil::finite_diff_grad<double>(
        [&]() { return run_loss(params).data()[0]; }, t.data());
    INFO("parameter " << name);
    CHECK(testutil::max_rel_error(t.grad(), fd) < 1e-3);
  }
}
