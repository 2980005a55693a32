// stabletrain: batch robustness experiments for small convolutional
// classifiers. Workflow: train-baseline -> run (hyperparameter grid) ->
// evaluate (robustness curves) -> report (CSV/SVG/summary). `distort` dumps
// distorted images for inspection.
//
// Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric error,
// 5 partial grid failure.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <string>

#include <CLI11.hpp>

#include "stabletrain/checkpoint.hpp"
#include "stabletrain/config.hpp"
#include "stabletrain/harness.hpp"
#include "stabletrain/train.hpp"

namespace st = stabletrain;

namespace {

struct CommonArgs {
  std::string config_path;
  std::optional<long> seed;
  std::string out;
  std::size_t jobs = 0;  // 0 = hardware concurrency
};

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config_path, "Experiment config file")
      ->required();
  cmd->add_option("--seed", args.seed,
                  "Training seed (overrides the config value)");
  cmd->add_option(
      "--out", args.out,
      "Output directory (overrides config; falls back to $STABLETRAIN_OUT)");
  cmd->add_option("--jobs", args.jobs,
                  "Worker parallelism bound (default: available cores)");
}

// Precedence: flag > config file > STABLETRAIN_OUT.
st::ExperimentConfig resolve(const CommonArgs& args) {
  st::ExperimentConfig cfg = st::load_experiment_config(args.config_path);
  if (args.seed) cfg.seed = static_cast<std::uint64_t>(*args.seed);
  cfg.train.seed = cfg.seed;
  if (!args.out.empty()) {
    cfg.out = args.out;
  } else if (cfg.out.empty()) {
    if (const char* env = std::getenv("STABLETRAIN_OUT")) cfg.out = env;
  }
  if (cfg.out.empty())
    throw st::ConfigError(
        "no output directory: set --out, [experiment] out, or "
        "$STABLETRAIN_OUT");
  return cfg;
}

std::size_t effective_jobs(const CommonArgs& args) {
  if (args.jobs > 0) return args.jobs;
  const unsigned hc = std::thread::hardware_concurrency();
  return hc > 0 ? hc : 1;
}

int cmd_train_baseline(const CommonArgs& args) {
  st::ExperimentConfig cfg = resolve(args);
  st::TrainData data = st::assemble_train_data(cfg);
  st::TrainConfig tc = cfg.train;
  tc.method = st::TrainMethod::baseline;
  tc.distortion.reset();
  auto result = st::train_baseline(tc, data, cfg.out + "/baseline");
  std::cout << "baseline: selected epoch " << result.record.selected_epoch
            << ", val accuracy " << result.best.val_score << "\n"
            << "checkpoint: " << result.record.checkpoint_path << "\n";
  return 0;
}

int cmd_run(const CommonArgs& args, bool dry_run) {
  st::ExperimentConfig cfg = resolve(args);
  if (cfg.grid.empty())
    throw st::ConfigError("run: config has no [grid] axes");
  if (cfg.train.method == st::TrainMethod::baseline)
    throw st::ConfigError(
        "run: [train] method must be stability, stability_sym, augment, or "
        "adversarial (baseline is trained via train-baseline)");
  const auto points = st::grid_cartesian(cfg.grid);
  if (dry_run) {
    std::cout << "grid: " << points.size() << " points\n";
    for (std::size_t i = 0; i < points.size(); ++i)
      std::cout << "  run " << i << ": "
                << st::describe_point(cfg.grid, points[i]) << "\n";
    return 0;
  }
  const std::string baseline_path = cfg.out + "/baseline/best.stbl";
  if (!std::filesystem::exists(baseline_path))
    throw st::DataError("run: baseline checkpoint missing at " +
                        baseline_path + " (run train-baseline first)");
  st::Checkpoint baseline = st::load_checkpoint(baseline_path);
  st::TrainData data = st::assemble_train_data(cfg);

  auto result = st::run_grid(cfg.train, cfg.grid, data, baseline.params,
                             cfg.out, cfg.id, effective_jobs(args));
  const std::size_t skipped =
      result.runs.size() - result.executed - result.failed;
  std::cout << result.executed << " runs executed, " << result.failed
            << " failed, " << skipped << " skipped\n";
  for (const auto& r : result.runs)
    if (r.status == st::RunStatus::failed)
      std::cerr << "run " << r.run_id << " (" << r.hyperparams
                << ") failed: " << r.error << "\n";
  if (result.failed == 0) return 0;
  if (result.failed == result.runs.size()) {
    for (const auto& r : result.runs)
      if (r.error_code != 0) return r.error_code;
    return 4;
  }
  return 5;
}

int cmd_evaluate(const CommonArgs& args) {
  st::ExperimentConfig cfg = resolve(args);
  if (cfg.evaluate.intensities.empty())
    throw st::ConfigError("evaluate: [evaluate] intensities not set");
  st::TrainData data = st::assemble_train_data(cfg);
  const std::string test_name = st::to_string(cfg.evaluate.test_distortion);

  std::vector<st::CurveRow> rows;
  auto add_curve = [&](st::ModelParams<float>& params, std::size_t run_id,
                       const std::string& method,
                       const std::string& train_distortion,
                       const std::string& hyperparams) {
    auto curve = st::evaluate_curve(
        params, data.model, cfg.evaluate.test_distortion,
        cfg.evaluate.intensities, data.val, data.pipeline, data.stats,
        cfg.evaluate.eval_seed, run_id);
    for (std::size_t i = 0; i < curve.intensities.size(); ++i)
      rows.push_back({run_id, method, train_distortion, hyperparams,
                      test_name, curve.intensities[i], curve.accuracies[i]});
  };

  const std::string baseline_path = cfg.out + "/baseline/best.stbl";
  if (!std::filesystem::exists(baseline_path))
    throw st::DataError("evaluate: baseline checkpoint missing at " +
                        baseline_path);
  st::Checkpoint baseline = st::load_checkpoint(baseline_path);
  add_curve(baseline.params, 0, "baseline", "none", "none");

  if (!cfg.grid.empty()) {
    const auto points = st::grid_cartesian(cfg.grid);
    const auto statuses =
        st::read_manifest_statuses(cfg.out + "/manifest.txt");
    std::size_t evaluated = 0;
    for (std::size_t id = 0; id < points.size(); ++id) {
      const std::string hp = st::describe_point(cfg.grid, points[id]);
      auto it = statuses.find({id, hp});
      if (it == statuses.end() || it->second != st::RunStatus::done) continue;
      const std::string ckpt_path = cfg.out + "/runs/" +
                                    st::harness_detail::run_dir_name(id) +
                                    "/best.stbl";
      if (!std::filesystem::exists(ckpt_path)) continue;
      st::Checkpoint ckpt = st::load_checkpoint(ckpt_path);
      st::TrainConfig rc = st::bind_grid_point(cfg.train, cfg.grid,
                                               points[id]);
      add_curve(ckpt.params, id, st::to_string(rc.method),
                rc.distortion ? rc.distortion->describe() : "none", hp);
      ++evaluated;
    }
    std::cout << "evaluated baseline + " << evaluated << " runs at "
              << cfg.evaluate.intensities.size() << " intensities\n";
  } else {
    std::cout << "evaluated baseline at "
              << cfg.evaluate.intensities.size() << " intensities\n";
  }

  st::write_curves_csv(cfg.out + "/curves.csv", rows);
  std::cout << "wrote " << cfg.out << "/curves.csv (" << rows.size()
            << " rows)\n";
  return 0;
}

int cmd_report(const CommonArgs& args) {
  st::ExperimentConfig cfg = resolve(args);
  const std::string csv_path = cfg.out + "/curves.csv";
  auto rows = st::read_curves_csv(csv_path);

  std::set<std::string> methods, tests;
  for (const auto& r : rows)
    if (r.method != "baseline") {
      methods.insert(r.method);
      tests.insert(r.test_distortion);
    }
  if (methods.empty())
    throw st::DataError("report: no runs in " + csv_path +
                        " (only baseline rows); run `run` and `evaluate` "
                        "first");

  std::filesystem::create_directories(cfg.out + "/plots");
  const double practical = cfg.evaluate.practical;
  std::ofstream summary(cfg.out + "/summary.txt", std::ios::trunc);
  if (!summary)
    throw st::DataError("report: cannot write " + cfg.out + "/summary.txt");
  summary << "experiment " << cfg.id << "\n";
  summary << "practical intensity " << practical << "\n\n";
  summary << "method           runs  best@prac  worst@prac  best_clean\n";

  for (const std::string& test : tests) {
    auto baseline_curves = st::curves_from_rows(rows, "baseline", test);
    std::vector<st::PlotSeries> series;
    if (!baseline_curves.empty())
      series.push_back({"baseline", "#000000", 2.0, "", baseline_curves[0]});
    std::optional<st::Envelope> st_band;
    static const std::map<std::string, std::string> colors = {
        {"stability", "#d62728"},     {"stability_sym", "#9467bd"},
        {"augment", "#2ca02c"},       {"adversarial", "#ff7f0e"},
    };
    for (const std::string& method : methods) {
      auto curves = st::curves_from_rows(rows, method, test);
      if (curves.empty()) continue;
      auto [best, worst] = st::select_best_worst(curves, practical);
      const std::string color =
          colors.count(method) ? colors.at(method) : "#1f77b4";
      series.push_back({method + " best (run " +
                            std::to_string(curves[best].run_id) + ")",
                        color, 1.5, "", curves[best]});
      if (worst != best)
        series.push_back({method + " worst (run " +
                              std::to_string(curves[worst].run_id) + ")",
                          color, 1.0, "4 3", curves[worst]});
      if (method == "stability" || method == "stability_sym")
        st_band = st_band ? *st_band : st::envelope(curves);

      double best_clean = 0;
      for (const auto& c : curves)
        best_clean = std::max(best_clean, c.accuracies.front());
      char line[128];
      std::snprintf(line, sizeof line, "%-16s %4zu  %9.4f  %10.4f  %10.4f\n",
                    method.c_str(), curves.size(),
                    curves[best].accuracy_at(practical),
                    curves[worst].accuracy_at(practical), best_clean);
      summary << line;
    }
    const std::string svg = st::render_svg(
        "robustness vs " + test, series,
        st_band ? &*st_band : nullptr, practical, cfg.evaluate.log_x);
    const std::string svg_path = cfg.out + "/plots/" + test + ".svg";
    std::ofstream out(svg_path, std::ios::trunc);
    if (!out) throw st::DataError("report: cannot write " + svg_path);
    out << svg;
    if (!out) throw st::DataError("report: write failure on " + svg_path);
    std::cout << "wrote " << svg_path << "\n";
  }
  if (!summary)
    throw st::DataError("report: write failure on " + cfg.out +
                        "/summary.txt");
  std::cout << "wrote " << cfg.out << "/summary.txt\n";
  return 0;
}

int cmd_distort(const CommonArgs& args, const std::string& distortion,
                std::size_t index, const std::string& output) {
  st::ExperimentConfig cfg = resolve(args);
  st::TrainData data = st::assemble_train_data(cfg);
  if (index >= data.train.size())
    throw st::DataError("distort: index " + std::to_string(index) +
                        " outside training split of " +
                        std::to_string(data.train.size()));
  st::DistortionSpec spec = st::config_detail::parse_distortion(distortion, 0);

  st::Image img = st::preprocess_geometry(data.train.images[index],
                                          data.pipeline);
  st::RngStream rng(cfg.evaluate.eval_seed);
  std::optional<st::Checkpoint> baseline;
  st::DistortionContext ctx;
  ctx.rotation_fill = data.stats.mean;
  if (spec.contains(st::DistortionKind::fgsm)) {
    const std::string baseline_path = cfg.out + "/baseline/best.stbl";
    if (!std::filesystem::exists(baseline_path))
      throw st::DataError(
          "distort: fgsm needs the baseline checkpoint at " + baseline_path);
    baseline = st::load_checkpoint(baseline_path);
    ctx = st::make_distortion_context(baseline->params, baseline->config,
                                      data.stats,
                                      data.train.labels[index]);
  }
  if (spec.contains(st::DistortionKind::crop)) {
    std::vector<float> px = st::preprocess(
        data.train.images[index], data.pipeline,
        st::ChannelStats{std::vector<float>(img.channels, 0.f),
                         std::vector<float>(img.channels, 1.f)},
        &spec, rng, &ctx);
    const std::size_t side = data.pipeline.crop_side;
    img = st::Image(side, side, img.channels);
    const std::size_t hw = side * side;
    for (std::size_t i = 0; i < hw; ++i)
      for (std::size_t c = 0; c < img.channels; ++c)
        img.px[i * img.channels + c] = px[c * hw + i];
  } else {
    img = st::apply(spec, img, rng, &ctx);
  }

  std::ofstream out(output, std::ios::binary | std::ios::trunc);
  if (!out) throw st::DataError("distort: cannot write " + output);
  out << "P6\n" << img.width << " " << img.height << "\n255\n";
  for (std::size_t i = 0; i < img.height * img.width; ++i)
    for (std::size_t c = 0; c < 3; ++c) {
      const float v = img.px[i * img.channels + (img.channels == 3 ? c : 0)];
      out.put(static_cast<char>(
          std::clamp(static_cast<int>(v * 255.f + 0.5f), 0, 255)));
    }
  if (!out) throw st::DataError("distort: write failure on " + output);
  std::cout << "wrote " << output << " (" << spec.describe() << ")\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "stabletrain: robustness-objective training and grid evaluation for "
      "small convolutional classifiers"};
  app.require_subcommand(1);

  CommonArgs base_args, run_args, eval_args, report_args, distort_args;
  bool dry_run = false;
  std::string distortion = "gaussian:0.05", output = "distorted.ppm";
  std::size_t index = 0;

  auto* train_cmd = app.add_subcommand(
      "train-baseline", "Train the baseline model for an experiment");
  add_common(train_cmd, base_args);

  auto* run_cmd =
      app.add_subcommand("run", "Execute the hyperparameter grid");
  add_common(run_cmd, run_args);
  run_cmd->add_flag("--dry-run", dry_run,
                    "Print the resolved grid without training");

  auto* eval_cmd = app.add_subcommand(
      "evaluate", "Compute robustness curves for all completed runs");
  add_common(eval_cmd, eval_args);

  auto* report_cmd = app.add_subcommand(
      "report", "Render CSV curves into SVG plots and a summary table");
  add_common(report_cmd, report_args);

  auto* distort_cmd = app.add_subcommand(
      "distort", "Apply a distortion to a training image and dump a PPM");
  add_common(distort_cmd, distort_args);
  distort_cmd->add_option("--distortion", distortion,
                          "kind:parameter, e.g. gaussian:0.05");
  distort_cmd->add_option("--index", index, "Training-sample index");
  distort_cmd->add_option("--output", output, "Output PPM path");

  CLI11_PARSE(app, argc, argv);

  try {
    if (train_cmd->parsed()) return cmd_train_baseline(base_args);
    if (run_cmd->parsed()) return cmd_run(run_args, dry_run);
    if (eval_cmd->parsed()) return cmd_evaluate(eval_args);
    if (report_cmd->parsed()) return cmd_report(report_args);
    if (distort_cmd->parsed())
      return cmd_distort(distort_args, distortion, index, output);
  } catch (const st::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const st::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const st::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  }
  return 0;
}
