#pragma once

// Experiment configuration: flat "key = value" text with [sections].
// The schema is closed — unknown sections or keys are rejected before any
// work starts — and repeated keys are only allowed where the schema says so
// (grid axes). Parsed into ExperimentConfig, the single source of truth the
// CLI commands run from.

#include <cctype>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "stabletrain/common.hpp"
#include "stabletrain/dataset.hpp"
#include "stabletrain/harness.hpp"
#include "stabletrain/nn.hpp"
#include "stabletrain/train.hpp"

namespace stabletrain {

namespace config_detail {

inline std::string trim(const std::string& s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

struct Entry {
  std::string section;
  std::string key;
  std::string value;
  std::size_t line = 0;
};

inline std::vector<Entry> parse_entries(std::istream& in,
                                        const std::string& name) {
  std::vector<Entry> entries;
  std::string line, section;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    if (t.front() == '[') {
      if (t.back() != ']')
        throw ConfigError(name + ":" + std::to_string(lineno) +
                          ": malformed section header '" + t + "'");
      section = trim(t.substr(1, t.size() - 2));
      if (section.empty())
        throw ConfigError(name + ":" + std::to_string(lineno) +
                          ": empty section name");
      continue;
    }
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError(name + ":" + std::to_string(lineno) +
                        ": expected 'key = value', got '" + t + "'");
    Entry e;
    e.section = section;
    e.key = trim(t.substr(0, eq));
    e.value = trim(t.substr(eq + 1));
    e.line = lineno;
    if (e.key.empty())
      throw ConfigError(name + ":" + std::to_string(lineno) + ": empty key");
    entries.push_back(std::move(e));
  }
  return entries;
}

inline double to_double(const Entry& e) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(e.value, &pos);
    if (pos != e.value.size()) throw std::invalid_argument("");
    return v;
  } catch (...) {
    throw ConfigError("config line " + std::to_string(e.line) + ": [" +
                      e.section + "] " + e.key + " = '" + e.value +
                      "' is not a number");
  }
}

inline long to_long(const Entry& e) {
  try {
    std::size_t pos = 0;
    const long v = std::stol(e.value, &pos);
    if (pos != e.value.size()) throw std::invalid_argument("");
    return v;
  } catch (...) {
    throw ConfigError("config line " + std::to_string(e.line) + ": [" +
                      e.section + "] " + e.key + " = '" + e.value +
                      "' is not an integer");
  }
}

inline std::size_t to_size(const Entry& e) {
  const long v = to_long(e);
  if (v < 0)
    throw ConfigError("config line " + std::to_string(e.line) + ": [" +
                      e.section + "] " + e.key + " must be non-negative");
  return static_cast<std::size_t>(v);
}

inline bool to_bool(const Entry& e) {
  if (e.value == "true" || e.value == "1") return true;
  if (e.value == "false" || e.value == "0") return false;
  throw ConfigError("config line " + std::to_string(e.line) + ": [" +
                    e.section + "] " + e.key + " = '" + e.value +
                    "' is not a boolean (true|false)");
}

inline std::vector<std::string> split_list(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      out.push_back(trim(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(trim(cur));
  return out;
}

// "gaussian:0.05" or "compose:gaussian:0.05+rotation:30"
inline DistortionSpec parse_distortion(const std::string& s,
                                       std::size_t line) {
  auto single = [&](const std::string& part) {
    const auto colon = part.find(':');
    if (colon == std::string::npos)
      throw ConfigError("config line " + std::to_string(line) +
                        ": distortion '" + part +
                        "' must be kind:parameter");
    const std::string kind = trim(part.substr(0, colon));
    const std::string val = trim(part.substr(colon + 1));
    try {
      return DistortionSpec::single(distortion_kind_from(kind),
                                    std::stod(val));
    } catch (const ConfigError&) {
      throw;
    } catch (...) {
      throw ConfigError("config line " + std::to_string(line) +
                        ": bad distortion parameter '" + val + "'");
    }
  };
  if (s.rfind("compose:", 0) == 0) {
    std::vector<DistortionSpec> parts;
    for (const auto& part : split_list(s.substr(8), '+'))
      parts.push_back(single(part));
    return DistortionSpec::compose_of(std::move(parts));
  }
  return single(s);
}

// "name scale start end points"
inline GridAxis parse_axis(const Entry& e) {
  std::istringstream ss(e.value);
  GridAxis axis;
  std::string scale;
  if (!(ss >> axis.name >> scale >> axis.start >> axis.end >> axis.points))
    throw ConfigError("config line " + std::to_string(e.line) +
                      ": axis must be 'name linear|log start end points', "
                      "got '" + e.value + "'");
  std::string extra;
  if (ss >> extra)
    throw ConfigError("config line " + std::to_string(e.line) +
                      ": trailing token '" + extra + "' in axis");
  axis.scale = grid_scale_from(scale);
  if (!harness_detail::is_objective_axis(axis.name))
    distortion_kind_from(axis.name);  // throws on unknown names
  return axis;
}

}  // namespace config_detail

struct DataConfig {
  std::string source = "synthetic";  // synthetic | idx
  SyntheticSpec synthetic;
  std::string images_path;
  std::string labels_path;
  std::size_t train_per_class = 0;  // 0 = derive 90/10 from class size
  std::size_t val_per_class = 0;
  std::uint64_t data_seed = 100;
  std::uint64_t split_seed = 200;
};

struct EvaluateConfig {
  DistortionKind test_distortion = DistortionKind::gaussian;
  std::vector<double> intensities;  // 0 = identity point
  double practical = 0;
  std::uint64_t eval_seed = 1234;
  bool log_x = false;
};

struct ExperimentConfig {
  std::string id = "experiment";
  std::string out;
  std::uint64_t seed = 0;
  DataConfig data;
  PipelineConfig pipeline;
  ModelConfig model;
  TrainConfig train;
  GridSpec grid;
  EvaluateConfig evaluate;
};

inline ExperimentConfig parse_experiment_config(std::istream& in,
                                                const std::string& name) {
  using namespace config_detail;
  static const std::map<std::string, std::set<std::string>> schema = {
      {"experiment", {"id", "out", "seed"}},
      {"data",
       {"source", "images", "labels", "classes", "per_class", "height",
        "width", "channels", "white_amp", "smooth_amp", "jitter",
        "sample_noise", "train_per_class", "val_per_class", "data_seed",
        "split_seed"}},
      {"pipeline", {"resize_short", "crop_side", "thumbnail_downsample"}},
      {"model", {"stem", "blocks", "batch_norm"}},
      {"train",
       {"method", "epochs", "batch_size", "learning_rate", "momentum",
        "alpha", "p", "mu", "distortion", "per_batch_bernoulli",
        "block_reference_grad"}},
      {"grid", {"axis"}},
      {"evaluate",
       {"test_distortion", "intensities", "practical", "eval_seed", "log_x"}},
  };

  ExperimentConfig cfg;
  std::set<std::pair<std::string, std::string>> seen;
  for (const Entry& e : parse_entries(in, name)) {
    auto sit = schema.find(e.section);
    if (sit == schema.end())
      throw ConfigError("config line " + std::to_string(e.line) +
                        ": unknown section [" + e.section + "]");
    if (!sit->second.count(e.key))
      throw ConfigError("config line " + std::to_string(e.line) +
                        ": unknown key '" + e.key + "' in [" + e.section +
                        "]");
    const bool repeatable = e.section == "grid" && e.key == "axis";
    if (!repeatable && !seen.insert({e.section, e.key}).second)
      throw ConfigError("config line " + std::to_string(e.line) +
                        ": duplicate key '" + e.key + "' in [" + e.section +
                        "]");

    if (e.section == "experiment") {
      if (e.key == "id") cfg.id = e.value;
      else if (e.key == "out") cfg.out = e.value;
      else cfg.seed = static_cast<std::uint64_t>(to_long(e));
    } else if (e.section == "data") {
      if (e.key == "source") {
        if (e.value != "synthetic" && e.value != "idx")
          throw ConfigError("config line " + std::to_string(e.line) +
                            ": source must be synthetic|idx");
        cfg.data.source = e.value;
      } else if (e.key == "images") cfg.data.images_path = e.value;
      else if (e.key == "labels") cfg.data.labels_path = e.value;
      else if (e.key == "classes") cfg.data.synthetic.classes = to_size(e);
      else if (e.key == "per_class") cfg.data.synthetic.per_class = to_size(e);
      else if (e.key == "height") cfg.data.synthetic.height = to_size(e);
      else if (e.key == "width") cfg.data.synthetic.width = to_size(e);
      else if (e.key == "channels") cfg.data.synthetic.channels = to_size(e);
      else if (e.key == "white_amp") cfg.data.synthetic.white_amp = to_double(e);
      else if (e.key == "smooth_amp")
        cfg.data.synthetic.smooth_amp = to_double(e);
      else if (e.key == "jitter") cfg.data.synthetic.jitter = to_long(e);
      else if (e.key == "sample_noise")
        cfg.data.synthetic.sample_noise = to_double(e);
      else if (e.key == "train_per_class")
        cfg.data.train_per_class = to_size(e);
      else if (e.key == "val_per_class") cfg.data.val_per_class = to_size(e);
      else if (e.key == "data_seed")
        cfg.data.data_seed = static_cast<std::uint64_t>(to_long(e));
      else cfg.data.split_seed = static_cast<std::uint64_t>(to_long(e));
    } else if (e.section == "pipeline") {
      if (e.key == "resize_short") cfg.pipeline.resize_short = to_size(e);
      else if (e.key == "crop_side") cfg.pipeline.crop_side = to_size(e);
      else cfg.pipeline.thumbnail_downsample_variant = to_bool(e);
    } else if (e.section == "model") {
      if (e.key == "stem") cfg.model.stem_channels = to_size(e);
      else if (e.key == "batch_norm") cfg.model.batch_norm = to_bool(e);
      else {
        cfg.model.blocks_per_stage.clear();
        for (const auto& part : split_list(e.value, ',')) {
          try {
            cfg.model.blocks_per_stage.push_back(std::stoul(part));
          } catch (...) {
            throw ConfigError("config line " + std::to_string(e.line) +
                              ": bad blocks entry '" + part + "'");
          }
        }
      }
    } else if (e.section == "train") {
      if (e.key == "method") cfg.train.method = train_method_from(e.value);
      else if (e.key == "epochs") cfg.train.epochs = to_size(e);
      else if (e.key == "batch_size") cfg.train.batch_size = to_size(e);
      else if (e.key == "learning_rate")
        cfg.train.learning_rate = to_double(e);
      else if (e.key == "momentum") cfg.train.momentum = to_double(e);
      else if (e.key == "alpha") cfg.train.alpha = to_double(e);
      else if (e.key == "p") cfg.train.p = to_double(e);
      else if (e.key == "mu") cfg.train.mu = to_double(e);
      else if (e.key == "distortion")
        cfg.train.distortion = parse_distortion(e.value, e.line);
      else if (e.key == "per_batch_bernoulli")
        cfg.train.per_batch_bernoulli = to_bool(e);
      else cfg.train.block_reference_grad = to_bool(e);
    } else if (e.section == "grid") {
      cfg.grid.push_back(parse_axis(e));
    } else {  // evaluate
      if (e.key == "test_distortion")
        cfg.evaluate.test_distortion = distortion_kind_from(e.value);
      else if (e.key == "intensities") {
        cfg.evaluate.intensities.clear();
        for (const auto& part : split_list(e.value, ',')) {
          try {
            cfg.evaluate.intensities.push_back(std::stod(part));
          } catch (...) {
            throw ConfigError("config line " + std::to_string(e.line) +
                              ": bad intensity '" + part + "'");
          }
        }
      } else if (e.key == "practical") cfg.evaluate.practical = to_double(e);
      else if (e.key == "eval_seed")
        cfg.evaluate.eval_seed = static_cast<std::uint64_t>(to_long(e));
      else cfg.evaluate.log_x = to_bool(e);
    }
  }
  return cfg;
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path);
  return parse_experiment_config(in, path);
}

// Builds the dataset, split, statistics and model geometry an experiment
// uses; shared by every CLI command so they all see identical data.
inline TrainData assemble_train_data(const ExperimentConfig& cfg) {
  Dataset full;
  if (cfg.data.source == "synthetic") {
    full = load_synthetic(cfg.data.synthetic, cfg.data.data_seed);
  } else {
    if (cfg.data.images_path.empty() || cfg.data.labels_path.empty())
      throw ConfigError("config: idx source requires images and labels paths");
    full = load_idx(cfg.data.images_path, cfg.data.labels_path);
  }
  std::size_t per_class = full.size() / full.classes;
  std::size_t train_n = cfg.data.train_per_class;
  std::size_t val_n = cfg.data.val_per_class;
  if (train_n == 0 && val_n == 0) {
    val_n = std::max<std::size_t>(1, per_class / 10);
    train_n = per_class - val_n;
  }
  TrainData data;
  auto [train, val] = split_per_class(full, train_n, val_n,
                                      cfg.data.split_seed);
  data.train = std::move(train);
  data.val = std::move(val);
  data.pipeline = cfg.pipeline;
  data.stats = compute_channel_stats(data.train, data.pipeline);
  data.model = cfg.model;
  data.model.height = data.model.width = cfg.pipeline.crop_side;
  data.model.channels = data.train.images[0].channels;
  data.model.classes = data.train.classes;
  data.model.validate();
  return data;
}

}  // namespace stabletrain
