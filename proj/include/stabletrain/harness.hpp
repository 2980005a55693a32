#pragma once

// Grid execution and robustness-curve machinery: Cartesian hyperparameter
// grids over the training objectives, per-run persistence with a resumable
// manifest, accuracy-vs-intensity curves, best/worst selection at the
// practical intensity, envelopes, and CSV/SVG/summary report emission.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "stabletrain/common.hpp"
#include "stabletrain/train.hpp"

namespace stabletrain {

// ---- grids ----

enum class GridScale { linear, log };

inline std::string to_string(GridScale s) {
  return s == GridScale::linear ? "linear" : "log";
}

inline GridScale grid_scale_from(const std::string& s) {
  if (s == "linear") return GridScale::linear;
  if (s == "log") return GridScale::log;
  throw ConfigError("unknown grid scale '" + s + "' (linear|log)");
}

// Inclusive progression: arithmetic for linear, geometric for log. n=1
// yields just the start point.
inline std::vector<double> grid_points(double start, double end, std::size_t n,
                                       GridScale scale) {
  if (n == 0) throw ConfigError("grid_points: need at least one point");
  if (scale == GridScale::log && (start <= 0 || end <= 0))
    throw ConfigError("grid_points: log scale requires positive endpoints");
  if (n == 1) return {start};
  std::vector<double> out(n);
  if (scale == GridScale::linear) {
    const double step = (end - start) / static_cast<double>(n - 1);
    for (std::size_t i = 0; i < n; ++i) out[i] = start + step * i;
  } else {
    const double lstep =
        (std::log(end) - std::log(start)) / static_cast<double>(n - 1);
    for (std::size_t i = 0; i < n; ++i)
      out[i] = std::exp(std::log(start) + lstep * i);
  }
  out.front() = start;
  out.back() = end;
  return out;
}

// One hyperparameter axis. Objective axes are named alpha|p|mu; any other
// name must be a distortion kind and sweeps that distortion's parameter.
struct GridAxis {
  std::string name;
  double start = 0;
  double end = 0;
  std::size_t points = 1;
  GridScale scale = GridScale::linear;

  std::vector<double> values() const {
    return grid_points(start, end, points, scale);
  }
};

using GridSpec = std::vector<GridAxis>;

inline std::size_t grid_size(const GridSpec& grid) {
  std::size_t n = 1;
  for (const auto& axis : grid) n *= axis.values().size();
  return n;
}

// All Cartesian points, last axis fastest; point order defines run ids.
inline std::vector<std::vector<double>> grid_cartesian(const GridSpec& grid) {
  if (grid.empty()) throw ConfigError("grid: no axes");
  std::vector<std::vector<double>> axes;
  for (const auto& a : grid) axes.push_back(a.values());
  std::vector<std::vector<double>> out;
  std::vector<std::size_t> idx(axes.size(), 0);
  while (true) {
    std::vector<double> point(axes.size());
    for (std::size_t i = 0; i < axes.size(); ++i) point[i] = axes[i][idx[i]];
    out.push_back(std::move(point));
    std::size_t i = axes.size();
    while (i > 0) {
      --i;
      if (++idx[i] < axes[i].size()) break;
      idx[i] = 0;
      if (i == 0) return out;
    }
  }
}

namespace harness_detail {

inline std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

inline bool is_objective_axis(const std::string& name) {
  return name == "alpha" || name == "p" || name == "mu";
}

}  // namespace harness_detail

// "alpha=0.316228;gaussian=0.05" — stable textual identity of a grid point.
inline std::string describe_point(const GridSpec& grid,
                                  const std::vector<double>& point) {
  std::string s;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    if (i) s += ";";
    s += grid[i].name + "=" + harness_detail::fmt_double(point[i]);
  }
  return s;
}

// Bind a grid point to a concrete TrainConfig: objective axes set their
// fields, distortion axes assemble the training distortion (composed in
// axis order when there are several).
inline TrainConfig bind_grid_point(const TrainConfig& base,
                                   const GridSpec& grid,
                                   const std::vector<double>& point) {
  if (grid.size() != point.size())
    throw ConfigError("grid: point arity mismatch");
  TrainConfig cfg = base;
  std::vector<DistortionSpec> parts;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const std::string& name = grid[i].name;
    if (name == "alpha") cfg.alpha = point[i];
    else if (name == "p") cfg.p = point[i];
    else if (name == "mu") cfg.mu = point[i];
    else
      parts.push_back(
          DistortionSpec::single(distortion_kind_from(name), point[i]));
  }
  if (!parts.empty())
    cfg.distortion = parts.size() == 1 ? parts[0]
                                       : DistortionSpec::compose_of(parts);
  cfg.validate();
  return cfg;
}

// ---- grid execution with resume ----

enum class RunStatus { pending, done, failed };

struct GridRun {
  std::size_t run_id = 0;
  std::string hyperparams;  // describe_point output
  RunStatus status = RunStatus::pending;
  std::string error;   // failed only
  int error_code = 0;  // failed only: 2 config, 3 data, 4 numeric
  RunRecord record;    // done only
};

struct GridResult {
  std::vector<GridRun> runs;
  std::size_t executed = 0;  // runs actually trained this invocation
  std::size_t failed = 0;
};

namespace harness_detail {

inline std::string run_dir_name(std::size_t run_id) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "run_%03zu", run_id);
  return buf;
}

inline void write_record(const RunRecord& rec, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("record: cannot write " + path);
  out << "method = " << to_string(rec.config.method) << "\n";
  out << "alpha = " << fmt_double(rec.config.alpha) << "\n";
  out << "p = " << fmt_double(rec.config.p) << "\n";
  out << "mu = " << fmt_double(rec.config.mu) << "\n";
  out << "seed = " << rec.config.seed << "\n";
  if (rec.config.distortion)
    out << "distortion = " << rec.config.distortion->describe() << "\n";
  out << "selected_epoch = " << rec.selected_epoch << "\n";
  out << "selection = " << rec.selection_metric << "/" << rec.selection_split
      << "/" << rec.selection_distortion << "\n";
  out << "checkpoint = " << rec.checkpoint_path << "\n";
  out << "augment_fraction = " << fmt_double(rec.augment_fraction) << "\n";
  for (std::size_t e = 0; e < rec.epochs.size(); ++e)
    out << "epoch " << e << " loss " << fmt_double(rec.epochs[e].train_loss)
        << " val_acc " << fmt_double(rec.epochs[e].val_acc) << "\n";
  if (!out) throw DataError("record: write failure on " + path);
}

}  // namespace harness_detail

// Manifest: one line per run, "run <id> <done|failed> <hyperparams>
// [message]". Rewritten after every run so an interrupted grid resumes.
inline void write_manifest(const std::string& path, const std::string& exp_id,
                           const GridSpec& grid,
                           const std::vector<GridRun>& runs) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("manifest: cannot write " + path);
  out << "experiment " << exp_id << "\n";
  for (const auto& a : grid)
    out << "axis " << a.name << " " << to_string(a.scale) << " "
        << harness_detail::fmt_double(a.start) << " "
        << harness_detail::fmt_double(a.end) << " " << a.points << "\n";
  for (const auto& r : runs) {
    out << "run " << r.run_id << " "
        << (r.status == RunStatus::done
                ? "done"
                : r.status == RunStatus::failed ? "failed" : "pending")
        << " " << r.hyperparams;
    if (!r.error.empty()) out << " " << r.error;
    out << "\n";
  }
  if (!out) throw DataError("manifest: write failure on " + path);
}

// Previously recorded statuses keyed by "run_id hyperparams" so a changed
// grid never reuses stale results.
inline std::map<std::pair<std::size_t, std::string>, RunStatus>
read_manifest_statuses(const std::string& path) {
  std::map<std::pair<std::size_t, std::string>, RunStatus> out;
  std::ifstream in(path);
  if (!in) return out;
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream ss(line);
    std::string tag;
    ss >> tag;
    if (tag != "run") continue;
    std::size_t id;
    std::string status, hp;
    ss >> id >> status >> hp;
    if (status == "done") out[{id, hp}] = RunStatus::done;
    else if (status == "failed") out[{id, hp}] = RunStatus::failed;
  }
  return out;
}

// Executes one training run per Cartesian grid point under
// exp_dir/runs/run_NNN, with at most `jobs` workers. Completed points (per
// the manifest, matched on run id AND hyperparameters) are skipped;
// failures are recorded and the remaining points continue. The manifest is
// rewritten under a mutex after every run so interrupted grids resume.
inline GridResult run_grid(const TrainConfig& base, const GridSpec& grid,
                           const TrainData& data,
                           const ModelParams<float>& start,
                           const std::string& exp_dir,
                           const std::string& exp_id = "experiment",
                           std::size_t jobs = 1) {
  const auto points = grid_cartesian(grid);
  std::filesystem::create_directories(exp_dir + "/runs");
  const std::string manifest = exp_dir + "/manifest.txt";
  auto prior = read_manifest_statuses(manifest);

  GridResult result;
  for (std::size_t id = 0; id < points.size(); ++id) {
    GridRun run;
    run.run_id = id;
    run.hyperparams = describe_point(grid, points[id]);
    result.runs.push_back(run);
  }

  std::mutex mtx;
  std::atomic<std::size_t> next{0};
  std::atomic<std::size_t> executed{0}, failed{0};
  auto worker = [&] {
    for (;;) {
      const std::size_t id = next.fetch_add(1);
      if (id >= points.size()) return;
      GridRun& run = result.runs[id];
      const std::string run_dir =
          exp_dir + "/runs/" + harness_detail::run_dir_name(id);
      auto it = prior.find({id, run.hyperparams});
      if (it != prior.end() && it->second == RunStatus::done &&
          std::filesystem::exists(run_dir + "/best.stbl")) {
        std::lock_guard<std::mutex> lock(mtx);
        run.status = RunStatus::done;
        run.record.checkpoint_path = run_dir + "/best.stbl";
        continue;
      }
      // outcome staged locally; the shared run table and the manifest are
      // only touched under the mutex
      RunStatus status;
      RunRecord record;
      std::string error;
      int error_code = 0;
      try {
        TrainConfig cfg = bind_grid_point(base, grid, points[id]);
        RunResult rr = train_detail::run_training(cfg, data, start, run_dir);
        record = rr.record;
        status = RunStatus::done;
        harness_detail::write_record(record, run_dir + "/record.txt");
        ++executed;
      } catch (const ConfigError& e) {
        status = RunStatus::failed;
        error = e.what();
        error_code = 2;
        ++failed;
      } catch (const DataError& e) {
        status = RunStatus::failed;
        error = e.what();
        error_code = 3;
        ++failed;
      } catch (const std::exception& e) {
        status = RunStatus::failed;
        error = e.what();
        error_code = 4;
        ++failed;
      }
      std::lock_guard<std::mutex> lock(mtx);
      run.status = status;
      run.record = std::move(record);
      run.error = std::move(error);
      run.error_code = error_code;
      write_manifest(manifest, exp_id, grid, result.runs);
    }
  };

  if (jobs <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t j = 0; j < std::min(jobs, points.size()); ++j)
      pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  result.executed = executed;
  result.failed = failed;
  write_manifest(manifest, exp_id, grid, result.runs);
  return result;
}

// ---- robustness curves ----

struct RobustnessCurve {
  std::size_t run_id = 0;
  DistortionKind test_kind = DistortionKind::gaussian;
  std::vector<double> intensities;  // strictly monotone
  std::vector<double> accuracies;   // in [0,1]

  void validate() const {
    if (intensities.size() != accuracies.size() || intensities.empty())
      throw DataError("curve: intensity/accuracy arity mismatch");
    bool inc = true, dec = true;
    for (std::size_t i = 1; i < intensities.size(); ++i) {
      inc = inc && intensities[i] > intensities[i - 1];
      dec = dec && intensities[i] < intensities[i - 1];
    }
    if (intensities.size() > 1 && !inc && !dec)
      throw DataError("curve: intensities must be strictly monotone");
    for (double a : accuracies)
      if (a < 0 || a > 1)
        throw DataError("curve: accuracy outside [0,1]");
  }

  double accuracy_at(double intensity) const {
    for (std::size_t i = 0; i < intensities.size(); ++i)
      if (std::abs(intensities[i] - intensity) <= 1e-12)
        return accuracies[i];
    throw DataError("curve: intensity " +
                    harness_detail::fmt_double(intensity) + " not sampled");
  }
};

// Accuracy vs distortion intensity with a fixed evaluation seed, so every
// model is scored against the same distorted test set. Intensity 0 means
// the identity point (undistorted data) for every distortion kind.
inline RobustnessCurve evaluate_curve(ModelParams<float>& params,
                                      const ModelConfig& mcfg,
                                      DistortionKind test_kind,
                                      const std::vector<double>& intensities,
                                      const Dataset& test,
                                      const PipelineConfig& pipeline,
                                      const ChannelStats& stats,
                                      std::uint64_t eval_seed,
                                      std::size_t run_id = 0) {
  RobustnessCurve curve;
  curve.run_id = run_id;
  curve.test_kind = test_kind;
  for (double level : intensities) {
    curve.intensities.push_back(level);
    if (level == 0) {
      curve.accuracies.push_back(evaluate_accuracy(
          params, mcfg, test, pipeline, stats, nullptr, eval_seed));
    } else {
      DistortionSpec spec = DistortionSpec::single(test_kind, level);
      curve.accuracies.push_back(evaluate_accuracy(
          params, mcfg, test, pipeline, stats, &spec, eval_seed));
    }
  }
  curve.validate();
  return curve;
}

// Argmax/argmin of accuracy at the practical intensity; ties break to the
// lower run id. Returns indices into `curves`. No other intensity
// influences the selection.
inline std::pair<std::size_t, std::size_t> select_best_worst(
    const std::vector<RobustnessCurve>& curves, double practical) {
  if (curves.empty()) throw DataError("select_best_worst: no curves");
  std::size_t best = 0, worst = 0;
  double best_acc = curves[0].accuracy_at(practical);
  double worst_acc = best_acc;
  for (std::size_t i = 1; i < curves.size(); ++i) {
    const double a = curves[i].accuracy_at(practical);
    const bool lower_id = curves[i].run_id < curves[best].run_id;
    if (a > best_acc || (a == best_acc && lower_id)) {
      best = i;
      best_acc = a;
    }
    if (a < worst_acc ||
        (a == worst_acc && curves[i].run_id < curves[worst].run_id)) {
      worst = i;
      worst_acc = a;
    }
  }
  return {best, worst};
}

// Pointwise accuracy range over a set of curves sharing an intensity list.
struct Envelope {
  std::vector<double> intensities;
  std::vector<double> lo;
  std::vector<double> hi;
};

inline Envelope envelope(const std::vector<RobustnessCurve>& curves) {
  if (curves.empty()) throw DataError("envelope: no curves");
  Envelope env;
  env.intensities = curves[0].intensities;
  env.lo = curves[0].accuracies;
  env.hi = curves[0].accuracies;
  for (std::size_t c = 1; c < curves.size(); ++c) {
    if (curves[c].intensities != env.intensities)
      throw DataError("envelope: curve " + std::to_string(curves[c].run_id) +
                      " has a mismatched intensity list");
    for (std::size_t i = 0; i < env.lo.size(); ++i) {
      env.lo[i] = std::min(env.lo[i], curves[c].accuracies[i]);
      env.hi[i] = std::max(env.hi[i], curves[c].accuracies[i]);
    }
  }
  return env;
}

// ---- curve persistence (CSV) ----

struct CurveRow {
  std::size_t run_id = 0;
  std::string method;
  std::string train_distortion;  // "none" for baseline
  std::string hyperparams;       // "none" for baseline
  std::string test_distortion;
  double intensity = 0;
  double accuracy = 0;
};

inline void write_curves_csv(const std::string& path,
                             const std::vector<CurveRow>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("csv: cannot write " + path);
  out << "run_id,method,train_distortion,hyperparams,test_distortion,"
         "intensity,accuracy\n";
  for (const auto& r : rows)
    out << r.run_id << "," << r.method << "," << r.train_distortion << ","
        << r.hyperparams << "," << r.test_distortion << ","
        << harness_detail::fmt_double(r.intensity) << ","
        << harness_detail::fmt_double(r.accuracy) << "\n";
  if (!out) throw DataError("csv: write failure on " + path);
}

inline std::vector<CurveRow> read_curves_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("csv: cannot open " + path);
  std::string line;
  if (!std::getline(in, line))
    throw DataError("csv: " + path + " is empty");
  if (line != "run_id,method,train_distortion,hyperparams,test_distortion,"
              "intensity,accuracy")
    throw DataError("csv: " + path + ": unexpected header '" + line + "'");
  std::vector<CurveRow> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> cols;
    std::string cur;
    for (char ch : line) {
      if (ch == ',') {
        cols.push_back(cur);
        cur.clear();
      } else {
        cur += ch;
      }
    }
    cols.push_back(cur);
    if (cols.size() != 7)
      throw DataError("csv: " + path + ": line " + std::to_string(lineno) +
                      " has " + std::to_string(cols.size()) + " columns");
    CurveRow r;
    r.run_id = std::stoul(cols[0]);
    r.method = cols[1];
    r.train_distortion = cols[2];
    r.hyperparams = cols[3];
    r.test_distortion = cols[4];
    r.intensity = std::stod(cols[5]);
    r.accuracy = std::stod(cols[6]);
    rows.push_back(std::move(r));
  }
  return rows;
}

// Reassemble curves from CSV rows, grouped by (run_id, method, test kind),
// preserving row order within a group.
inline std::vector<RobustnessCurve> curves_from_rows(
    const std::vector<CurveRow>& rows, const std::string& method,
    const std::string& test_distortion) {
  std::vector<RobustnessCurve> curves;
  std::map<std::size_t, std::size_t> index;
  for (const auto& r : rows) {
    if (r.method != method || r.test_distortion != test_distortion) continue;
    auto it = index.find(r.run_id);
    if (it == index.end()) {
      RobustnessCurve c;
      c.run_id = r.run_id;
      c.test_kind = distortion_kind_from(test_distortion);
      index.emplace(r.run_id, curves.size());
      curves.push_back(std::move(c));
      it = index.find(r.run_id);
    }
    curves[it->second].intensities.push_back(r.intensity);
    curves[it->second].accuracies.push_back(r.accuracy);
  }
  for (auto& c : curves) c.validate();
  return curves;
}

// ---- SVG plotting ----

namespace harness_detail {

struct PlotGeom {
  double x0 = 70, y0 = 40, w = 480, h = 320;  // plot area
  double xmin = 0, xmax = 1;
  bool log_x = false;

  double tx(double v) const {
    double t;
    if (log_x) {
      t = (std::log(v) - std::log(xmin)) / (std::log(xmax) - std::log(xmin));
    } else {
      t = (v - xmin) / (xmax - xmin);
    }
    return x0 + t * w;
  }
  double ty(double acc) const { return y0 + (1.0 - acc) * h; }
};

inline std::string svg_poly(const PlotGeom& g, const RobustnessCurve& c,
                            const std::string& color, double width,
                            const std::string& dash = "") {
  std::string pts;
  for (std::size_t i = 0; i < c.intensities.size(); ++i) {
    if (i) pts += " ";
    pts += fmt_double(g.tx(c.intensities[i])) + "," +
           fmt_double(g.ty(c.accuracies[i]));
  }
  std::string s = "  <polyline fill=\"none\" stroke=\"" + color +
                  "\" stroke-width=\"" + fmt_double(width) + "\"";
  if (!dash.empty()) s += " stroke-dasharray=\"" + dash + "\"";
  return s + " points=\"" + pts + "\"/>\n";
}

inline std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '&') out += "&amp;";
    else if (c == '<') out += "&lt;";
    else if (c == '>') out += "&gt;";
    else if (c == '"') out += "&quot;";
    else out += c;
  }
  return out;
}

}  // namespace harness_detail

// One robustness plot: baseline line, per-method best/worst curves, ST
// envelope band, practical-intensity marker. Intensity 0 cannot sit on a
// log axis, so log-x plots substitute the smallest positive intensity / 10
// for the identity point.
struct PlotSeries {
  std::string label;
  std::string color;
  double width = 1.5;
  std::string dash;
  RobustnessCurve curve;
};

inline std::string render_svg(const std::string& title,
                              const std::vector<PlotSeries>& series,
                              const Envelope* band, double practical,
                              bool log_x) {
  if (series.empty()) throw DataError("svg: nothing to plot");
  harness_detail::PlotGeom g;
  g.log_x = log_x;
  double xmin = 1e300, xmax = -1e300;
  auto consider = [&](double v) {
    if (log_x && v <= 0) return;
    xmin = std::min(xmin, v);
    xmax = std::max(xmax, v);
  };
  for (const auto& s : series)
    for (double v : s.curve.intensities) consider(v);
  if (band)
    for (double v : band->intensities) consider(v);
  consider(practical);
  if (xmin >= xmax) {
    xmin -= 0.5;
    xmax += 0.5;
  }
  g.xmin = xmin;
  g.xmax = xmax;

  auto clamp_x = [&](RobustnessCurve c) {
    if (log_x)
      for (double& v : c.intensities)
        if (v <= 0) v = xmin / 10 > 0 ? xmin / 10 : 1e-6;
    if (log_x) g.xmin = std::min(g.xmin, c.intensities.front());
    return c;
  };
  std::vector<PlotSeries> drawn = series;
  for (auto& s : drawn) s.curve = clamp_x(s.curve);

  std::string svg;
  svg += "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  svg += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" "
         "height=\"460\" viewBox=\"0 0 640 460\">\n";
  svg += "  <rect x=\"0\" y=\"0\" width=\"640\" height=\"460\" "
         "fill=\"white\"/>\n";
  svg += "  <text x=\"320\" y=\"24\" text-anchor=\"middle\" "
         "font-family=\"sans-serif\" font-size=\"15\">" +
         harness_detail::xml_escape(title) + "</text>\n";
  // axes
  svg += "  <rect x=\"" + harness_detail::fmt_double(g.x0) + "\" y=\"" +
         harness_detail::fmt_double(g.y0) + "\" width=\"" +
         harness_detail::fmt_double(g.w) + "\" height=\"" +
         harness_detail::fmt_double(g.h) +
         "\" fill=\"none\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double acc = i / 4.0;
    svg += "  <text x=\"" + harness_detail::fmt_double(g.x0 - 8) + "\" y=\"" +
           harness_detail::fmt_double(g.ty(acc) + 4) +
           "\" text-anchor=\"end\" font-family=\"sans-serif\" "
           "font-size=\"11\">" +
           harness_detail::fmt_double(acc) + "</text>\n";
  }

  if (band) {
    Envelope b = *band;
    if (log_x)
      for (double& v : b.intensities)
        if (v <= 0) v = g.xmin;
    std::string pts;
    for (std::size_t i = 0; i < b.intensities.size(); ++i)
      pts += harness_detail::fmt_double(g.tx(b.intensities[i])) + "," +
             harness_detail::fmt_double(g.ty(b.hi[i])) + " ";
    for (std::size_t i = b.intensities.size(); i > 0; --i)
      pts += harness_detail::fmt_double(g.tx(b.intensities[i - 1])) + "," +
             harness_detail::fmt_double(g.ty(b.lo[i - 1])) + " ";
    svg += "  <polygon fill=\"#9ecae1\" fill-opacity=\"0.45\" "
           "stroke=\"none\" points=\"" +
           pts + "\"/>\n";
  }

  const double px = g.tx(log_x && practical <= 0 ? g.xmin : practical);
  svg += "  <line x1=\"" + harness_detail::fmt_double(px) + "\" y1=\"" +
         harness_detail::fmt_double(g.y0) + "\" x2=\"" +
         harness_detail::fmt_double(px) + "\" y2=\"" +
         harness_detail::fmt_double(g.y0 + g.h) +
         "\" stroke=\"#888888\" stroke-dasharray=\"3 3\"/>\n";

  double ly = g.y0 + 14;
  for (const auto& s : drawn) {
    svg += harness_detail::svg_poly(g, s.curve, s.color, s.width, s.dash);
    svg += "  <line x1=\"" + harness_detail::fmt_double(g.x0 + g.w + 8) +
           "\" y1=\"" + harness_detail::fmt_double(ly - 4) + "\" x2=\"" +
           harness_detail::fmt_double(g.x0 + g.w + 28) + "\" y2=\"" +
           harness_detail::fmt_double(ly - 4) + "\" stroke=\"" + s.color +
           "\"" + (s.dash.empty() ? "" : " stroke-dasharray=\"" + s.dash + "\"") +
           "/>\n";
    svg += "  <text x=\"" + harness_detail::fmt_double(g.x0 + g.w + 32) +
           "\" y=\"" + harness_detail::fmt_double(ly) +
           "\" font-family=\"sans-serif\" font-size=\"10\">" +
           harness_detail::xml_escape(s.label) + "</text>\n";
    ly += 14;
  }
  svg += "  <text x=\"320\" y=\"440\" text-anchor=\"middle\" "
         "font-family=\"sans-serif\" font-size=\"12\">distortion "
         "intensity</text>\n";
  svg += "</svg>\n";
  return svg;
}

}  // namespace stabletrain
