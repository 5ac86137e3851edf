#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "ordmoe/common.hpp"
#include "ordmoe/training.hpp"

namespace ordmoe {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

namespace ckpt {

inline constexpr char magic[9] = "ORDMOECK";
inline constexpr std::uint32_t version = 1;

inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

/// Digest of everything that must match for a state blob to be loadable.
inline std::uint64_t config_digest(const ModelConfig& c) {
  std::string s = std::to_string(c.vocab_size) + "|" + std::to_string(c.hidden) + "|" +
                  std::to_string(c.num_layers) + "|" + std::to_string(c.heads) + "|" +
                  std::to_string(c.expert_hidden) + "|" + std::to_string(c.num_experts) +
                  "|" + std::to_string(c.top_k) + "|" + std::to_string(c.max_seq_len) + "|" +
                  std::to_string(static_cast<int>(c.precision)) + "|" +
                  std::to_string(c.router_bias ? 1 : 0);
  return fnv1a(s);
}

template <class T>
void write_pod(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw config_error("checkpoint: truncated file");
  return v;
}

template <class Real>
void write_reals(std::ostream& os, const std::vector<Real>& v) {
  write_pod<std::uint64_t>(os, v.size());
  os.write(reinterpret_cast<const char*>(v.data()),
           static_cast<std::streamsize>(v.size() * sizeof(Real)));
}

template <class Real>
std::vector<Real> read_reals(std::istream& is) {
  const auto len = read_pod<std::uint64_t>(is);
  std::vector<Real> v(len);
  is.read(reinterpret_cast<char*>(v.data()),
          static_cast<std::streamsize>(len * sizeof(Real)));
  if (!is) throw config_error("checkpoint: truncated value block");
  return v;
}

inline void write_string(std::ostream& os, const std::string& s) {
  write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& is) {
  const auto len = read_pod<std::uint32_t>(is);
  std::string s(len, '\0');
  is.read(s.data(), static_cast<std::streamsize>(len));
  if (!is) throw config_error("checkpoint: truncated string");
  return s;
}

inline void write_rng(std::ostream& os, const Rng& rng) {
  const auto st = rng.state();
  for (auto w : st.words) write_pod<std::uint64_t>(os, w);
  write_pod<std::uint8_t>(os, st.has_spare ? 1 : 0);
  write_pod<double>(os, st.spare);
}

inline Rng::State read_rng(std::istream& is) {
  Rng::State st;
  for (auto& w : st.words) w = read_pod<std::uint64_t>(is);
  st.has_spare = read_pod<std::uint8_t>(is) != 0;
  st.spare = read_pod<double>(is);
  return st;
}

}  // namespace ckpt

/// Serialize the full training state: parameters in canonical order with
/// shape metadata, both optimizer moments, step counter, generator states,
/// and the static-grouping window.
template <class Real>
void save_checkpoint(const std::string& path, const TrainState<Real>& st) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw config_error("checkpoint: cannot open for writing: " + path);
  os.write(ckpt::magic, 8);
  ckpt::write_pod<std::uint32_t>(os, ckpt::version);
  ckpt::write_pod<std::uint8_t>(os, sizeof(Real) == 8 ? 0 : 1);
  ckpt::write_pod<std::uint64_t>(os, ckpt::config_digest(st.params.config));
  ckpt::write_pod<std::uint64_t>(os, st.step);
  ckpt::write_rng(os, st.train_rng);
  ckpt::write_rng(os, st.rollout_rng);
  ckpt::write_pod<std::uint8_t>(os, st.plain_baseline ? 1 : 0);

  const auto named = st.params.named();
  ckpt::write_pod<std::uint64_t>(os, named.size());
  for (const auto& [name, t] : named) {
    ckpt::write_string(os, name);
    ckpt::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(t.shape().size()));
    for (auto d : t.shape()) ckpt::write_pod<std::uint64_t>(os, d);
    ckpt::write_reals(os, t.value());
  }
  for (const auto& mi : st.m) ckpt::write_reals(os, mi);
  for (const auto& vi : st.v) ckpt::write_reals(os, vi);

  ckpt::write_pod<std::uint64_t>(os, st.static_means.size());
  for (const auto& rm : st.static_means) {
    ckpt::write_pod<std::uint64_t>(os, rm.window);
    ckpt::write_pod<std::uint64_t>(os, rm.history.size());
    for (const auto& h : rm.history) ckpt::write_reals(os, h);
  }
  os.write("ORDMOEEND", 9);
  if (!os) throw config_error("checkpoint: write failed: " + path);
}

/// Restore into a state whose model was built from the same configuration;
/// every field that affects subsequent steps is reproduced bit for bit.
template <class Real>
void load_checkpoint(const std::string& path, TrainState<Real>& st) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw config_error("checkpoint: cannot open: " + path);
  char magic[9] = {};
  is.read(magic, 8);
  if (!is || std::string(magic, 8) != std::string(ckpt::magic, 8))
    throw config_error("checkpoint: bad magic in " + path);
  if (ckpt::read_pod<std::uint32_t>(is) != ckpt::version)
    throw config_error("checkpoint: unsupported format version");
  const auto prec = ckpt::read_pod<std::uint8_t>(is);
  if (prec != (sizeof(Real) == 8 ? 0 : 1))
    throw config_error("checkpoint: precision mismatch");
  if (ckpt::read_pod<std::uint64_t>(is) != ckpt::config_digest(st.params.config))
    throw config_error("checkpoint: model configuration digest mismatch");
  st.step = ckpt::read_pod<std::uint64_t>(is);
  st.train_rng.restore(ckpt::read_rng(is));
  st.rollout_rng.restore(ckpt::read_rng(is));
  st.plain_baseline = ckpt::read_pod<std::uint8_t>(is) != 0;

  auto named = st.params.named();
  const auto count = ckpt::read_pod<std::uint64_t>(is);
  if (count != named.size())
    throw config_error("checkpoint: expected " + std::to_string(named.size()) +
                       " parameters, found " + std::to_string(count));
  for (auto& [name, t] : named) {
    const auto fname = ckpt::read_string(is);
    if (fname != name)
      throw config_error("checkpoint: parameter order mismatch at " + fname +
                         " (expected " + name + ")");
    const auto ndim = ckpt::read_pod<std::uint32_t>(is);
    Shape shape(ndim);
    for (auto& d : shape) d = ckpt::read_pod<std::uint64_t>(is);
    if (shape != t.shape())
      throw config_error("checkpoint: shape mismatch for " + name);
    auto vals = ckpt::read_reals<Real>(is);
    if (vals.size() != t.numel())
      throw config_error("checkpoint: value count mismatch for " + name);
    Tensor<Real> dst = t;
    dst.value() = std::move(vals);
  }
  for (auto& mi : st.m) mi = ckpt::read_reals<Real>(is);
  for (auto& vi : st.v) vi = ckpt::read_reals<Real>(is);

  const auto layers = ckpt::read_pod<std::uint64_t>(is);
  st.static_means.resize(layers);
  for (auto& rm : st.static_means) {
    rm.window = ckpt::read_pod<std::uint64_t>(is);
    const auto n = ckpt::read_pod<std::uint64_t>(is);
    rm.history.clear();
    for (std::uint64_t i = 0; i < n; ++i) rm.history.push_back(ckpt::read_reals<Real>(is));
  }
  char trailer[10] = {};
  is.read(trailer, 9);
  if (!is || std::string(trailer, 9) != "ORDMOEEND")
    throw config_error("checkpoint: missing end marker");
}

}  // namespace ordmoe
