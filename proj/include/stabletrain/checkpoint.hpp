#pragma once

// Checkpoint persistence. Little-endian binary, magic "STBL", version u32,
// length-prefixed names, explicit shape headers. Save -> load -> save is
// bit-identical, which the determinism tests rely on.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "stabletrain/common.hpp"
#include "stabletrain/nn.hpp"
#include "stabletrain/optim.hpp"

namespace stabletrain {

struct Checkpoint {
  ModelConfig config;
  ModelParams<float> params;
  OptimizerState<float> opt;
  bool has_opt = false;
  std::uint32_t epoch = 0;
  double val_score = 0.0;
};

namespace ckpt_detail {

constexpr std::uint32_t kMagic = 0x4c425453u;  // "STBL"
constexpr std::uint32_t kVersion = 1;

template <typename T>
void write_pod(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T read_pod(std::istream& in, const char* field) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v))
    throw DataError(std::string("checkpoint: truncated while reading ") +
                    field);
  return v;
}

inline void write_string(std::ostream& out, const std::string& s) {
  write_pod(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& in, const char* field) {
  const auto len = read_pod<std::uint32_t>(in, field);
  if (len > (1u << 20))
    throw DataError(std::string("checkpoint: implausible length for ") +
                    field);
  std::string s(len, '\0');
  if (!in.read(s.data(), len))
    throw DataError(std::string("checkpoint: truncated string for ") + field);
  return s;
}

inline void write_floats(std::ostream& out, const std::vector<float>& v) {
  write_pod(out, static_cast<std::uint64_t>(v.size()));
  out.write(reinterpret_cast<const char*>(v.data()),
            static_cast<std::streamsize>(v.size() * sizeof(float)));
}

inline std::vector<float> read_floats(std::istream& in, const char* field) {
  const auto n = read_pod<std::uint64_t>(in, field);
  std::vector<float> v(n);
  if (!in.read(reinterpret_cast<char*>(v.data()),
               static_cast<std::streamsize>(n * sizeof(float))))
    throw DataError(std::string("checkpoint: truncated payload for ") + field);
  return v;
}

}  // namespace ckpt_detail

inline void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("checkpoint: cannot write " + path);
  using namespace ckpt_detail;
  write_pod(out, kMagic);
  write_pod(out, kVersion);

  const ModelConfig& c = ckpt.config;
  write_pod(out, static_cast<std::uint64_t>(c.height));
  write_pod(out, static_cast<std::uint64_t>(c.width));
  write_pod(out, static_cast<std::uint64_t>(c.channels));
  write_pod(out, static_cast<std::uint64_t>(c.classes));
  write_pod(out, static_cast<std::uint64_t>(c.stem_channels));
  write_pod(out, static_cast<std::uint32_t>(c.blocks_per_stage.size()));
  for (auto b : c.blocks_per_stage)
    write_pod(out, static_cast<std::uint64_t>(b));
  write_pod(out, static_cast<std::uint8_t>(c.batch_norm ? 1 : 0));

  write_pod(out, static_cast<std::uint32_t>(ckpt.params.tensors.size()));
  for (const auto& [name, t] : ckpt.params.tensors) {
    write_string(out, name);
    write_pod(out, static_cast<std::uint32_t>(t.shape().size()));
    for (auto d : t.shape()) write_pod(out, static_cast<std::uint64_t>(d));
    write_floats(out, t.data());
  }
  write_pod(out, static_cast<std::uint32_t>(ckpt.params.state.size()));
  for (const auto& [name, v] : ckpt.params.state) {
    write_string(out, name);
    write_floats(out, v);
  }

  write_pod(out, static_cast<std::uint8_t>(ckpt.has_opt ? 1 : 0));
  if (ckpt.has_opt) {
    write_pod(out, ckpt.opt.learning_rate);
    write_pod(out, ckpt.opt.momentum);
    write_pod(out, static_cast<std::uint32_t>(ckpt.opt.velocity.size()));
    for (const auto& [name, v] : ckpt.opt.velocity) {
      write_string(out, name);
      write_floats(out, v);
    }
  }

  write_pod(out, ckpt.epoch);
  write_pod(out, ckpt.val_score);
  if (!out) throw DataError("checkpoint: write failure on " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("checkpoint: cannot open " + path);
  using namespace ckpt_detail;
  if (read_pod<std::uint32_t>(in, "magic") != kMagic)
    throw DataError("checkpoint: " + path + ": bad magic (expected 'STBL')");
  const auto version = read_pod<std::uint32_t>(in, "version");
  if (version != kVersion)
    throw DataError("checkpoint: " + path + ": unsupported version " +
                    std::to_string(version));

  Checkpoint ckpt;
  ModelConfig& c = ckpt.config;
  c.height = read_pod<std::uint64_t>(in, "config.height");
  c.width = read_pod<std::uint64_t>(in, "config.width");
  c.channels = read_pod<std::uint64_t>(in, "config.channels");
  c.classes = read_pod<std::uint64_t>(in, "config.classes");
  c.stem_channels = read_pod<std::uint64_t>(in, "config.stem_channels");
  const auto nstages = read_pod<std::uint32_t>(in, "config.stages");
  c.blocks_per_stage.clear();
  for (std::uint32_t i = 0; i < nstages; ++i)
    c.blocks_per_stage.push_back(read_pod<std::uint64_t>(in, "config.blocks"));
  c.batch_norm = read_pod<std::uint8_t>(in, "config.batch_norm") != 0;

  const auto ntensors = read_pod<std::uint32_t>(in, "tensor count");
  for (std::uint32_t i = 0; i < ntensors; ++i) {
    const std::string name = read_string(in, "tensor name");
    const auto ndim = read_pod<std::uint32_t>(in, "tensor rank");
    Shape shape(ndim);
    for (auto& d : shape) d = read_pod<std::uint64_t>(in, "tensor dim");
    auto data = read_floats(in, name.c_str());
    if (numel(shape) != data.size())
      throw DataError("checkpoint: tensor '" + name + "' shape " +
                      shape_str(shape) + " disagrees with payload of " +
                      std::to_string(data.size()));
    ckpt.params.tensors.emplace(
        name, TensorF(std::move(shape), std::move(data), true));
  }
  const auto nstate = read_pod<std::uint32_t>(in, "state count");
  for (std::uint32_t i = 0; i < nstate; ++i) {
    const std::string name = read_string(in, "state name");
    ckpt.params.state.emplace(name, read_floats(in, name.c_str()));
  }

  ckpt.has_opt = read_pod<std::uint8_t>(in, "optimizer flag") != 0;
  if (ckpt.has_opt) {
    ckpt.opt.learning_rate = read_pod<float>(in, "learning rate");
    ckpt.opt.momentum = read_pod<float>(in, "momentum");
    const auto nvel = read_pod<std::uint32_t>(in, "velocity count");
    for (std::uint32_t i = 0; i < nvel; ++i) {
      const std::string name = read_string(in, "velocity name");
      ckpt.opt.velocity.emplace(name, read_floats(in, name.c_str()));
    }
  }

  ckpt.epoch = read_pod<std::uint32_t>(in, "epoch");
  ckpt.val_score = read_pod<double>(in, "validation score");
  return ckpt;
}

}  // namespace stabletrain
