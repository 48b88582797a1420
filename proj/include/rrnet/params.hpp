#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "rrnet/errors.hpp"
#include "rrnet/tensor.hpp"

namespace rrnet::netops {

static_assert(std::endian::native == std::endian::little,
              "checkpoint and raster files are written in host order");

/// One trainable tensor plus its gradient and Adam moments.
struct ParamEntry {
  Tensor value;
  Tensor grad;
  Tensor m;
  Tensor v;
  bool has_grad = false;
};

/// Named parameters in deterministic (lexicographic) order.
class ParamStore {
 public:
  Tensor& add(const std::string& name, Tensor init) {
    if (entries_.count(name)) throw ConfigError("duplicate parameter name '" + name + "'");
    ParamEntry e;
    e.grad = Tensor(init.shape);
    e.m = Tensor(init.shape);
    e.v = Tensor(init.shape);
    e.value = std::move(init);
    return entries_.emplace(name, std::move(e)).first->second.value;
  }

  bool contains(const std::string& name) const { return entries_.count(name) != 0; }

  ParamEntry& entry(const std::string& name) {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ConfigError("unknown parameter '" + name + "'");
    return it->second;
  }
  const ParamEntry& entry(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ConfigError("unknown parameter '" + name + "'");
    return it->second;
  }

  Tensor& value(const std::string& name) { return entry(name).value; }
  const Tensor& value(const std::string& name) const { return entry(name).value; }
  const Tensor& grad(const std::string& name) const { return entry(name).grad; }

  std::map<std::string, ParamEntry>& entries() { return entries_; }
  const std::map<std::string, ParamEntry>& entries() const { return entries_; }

  std::size_t size() const { return entries_.size(); }
  std::size_t num_scalars() const {
    std::size_t n = 0;
    for (const auto& [_, e] : entries_) n += e.value.numel();
    return n;
  }

  std::int64_t step() const { return step_; }
  void set_step(std::int64_t s) { step_ = s; }

  void zero_grad() {
    for (auto& [_, e] : entries_) {
      std::fill(e.grad.data.begin(), e.grad.data.end(), 0.0);
      e.has_grad = false;
    }
  }

  bool operator==(const ParamStore& o) const {
    if (step_ != o.step_ || entries_.size() != o.entries_.size()) return false;
    for (auto a = entries_.begin(), b = o.entries_.begin(); a != entries_.end(); ++a, ++b) {
      if (a->first != b->first || a->second.value != b->second.value ||
          a->second.m != b->second.m || a->second.v != b->second.v) {
        return false;
      }
    }
    return true;
  }

 private:
  std::map<std::string, ParamEntry> entries_;
  std::int64_t step_ = 0;
};

/// Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
inline Tensor uniform_init(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (double& v : t.data) v = dist(rng);
  return t;
}

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Bias-corrected Adam update of every parameter; clears gradients.
inline void adam_step(ParamStore& store, double lr, const AdamHyper& hp = {}) {
  for (const auto& [name, e] : store.entries()) {
    if (!e.has_grad) throw UpdateError("parameter '" + name + "' has no gradient");
  }
  const std::int64_t t = store.step() + 1;
  const double c1 = 1.0 - std::pow(hp.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(hp.beta2, static_cast<double>(t));
  for (auto& [name, e] : store.entries()) {
    for (std::size_t i = 0; i < e.value.numel(); ++i) {
      const double g = e.grad[i];
      e.m[i] = hp.beta1 * e.m[i] + (1.0 - hp.beta1) * g;
      e.v[i] = hp.beta2 * e.v[i] + (1.0 - hp.beta2) * g * g;
      const double mhat = e.m[i] / c1;
      const double vhat = e.v[i] / c2;
      e.value[i] -= lr * mhat / (std::sqrt(vhat) + hp.eps);
    }
  }
  store.set_step(t);
  store.zero_grad();
}

// Checkpoint container:
//   "RRNCKPT1" | u64 adam_step | u64 count
//   count x { u32 name_len | name | u8 dtype(1 = f64) | u32 rank | u64 dims[rank] }
//   raw little-endian f64 data of every listed tensor, in listed order.
// Adam moments are listed as "<param>:adam_m" and "<param>:adam_v".

namespace detail {

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw IoError("truncated checkpoint");
  return v;
}

inline constexpr char kCheckpointMagic[8] = {'R', 'R', 'N', 'C', 'K', 'P', 'T', '1'};

}  // namespace detail

inline void save_checkpoint(const ParamStore& store, const std::filesystem::path& path) {
  std::vector<std::pair<std::string, const Tensor*>> listed;
  for (const auto& [name, e] : store.entries()) {
    listed.emplace_back(name, &e.value);
    listed.emplace_back(name + ":adam_m", &e.m);
    listed.emplace_back(name + ":adam_v", &e.v);
  }
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open " + tmp.string() + " for writing");
    os.write(detail::kCheckpointMagic, sizeof(detail::kCheckpointMagic));
    detail::put<std::uint64_t>(os, static_cast<std::uint64_t>(store.step()));
    detail::put<std::uint64_t>(os, listed.size());
    for (const auto& [name, t] : listed) {
      detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
      os.write(name.data(), static_cast<std::streamsize>(name.size()));
      detail::put<std::uint8_t>(os, 1);
      detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(t->rank()));
      for (auto d : t->shape) detail::put<std::uint64_t>(os, d);
    }
    for (const auto& [_, t] : listed) {
      os.write(reinterpret_cast<const char*>(t->data.data()),
               static_cast<std::streamsize>(t->numel() * sizeof(double)));
    }
    if (!os) throw IoError("write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place at " + path.string() + ": " + ec.message());
}

inline ParamStore load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint " + path.string());
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, detail::kCheckpointMagic, sizeof(magic)) != 0) {
    throw FormatVersionError("not a checkpoint file: " + path.string());
  }
  const auto step = detail::get<std::uint64_t>(is);
  const auto count = detail::get<std::uint64_t>(is);
  std::vector<std::pair<std::string, Shape>> header;
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto len = detail::get<std::uint32_t>(is);
    std::string name(len, '\0');
    is.read(name.data(), len);
    if (detail::get<std::uint8_t>(is) != 1) throw FormatVersionError("unsupported dtype for " + name);
    const auto rank = detail::get<std::uint32_t>(is);
    Shape shape(rank);
    for (auto& d : shape) d = detail::get<std::uint64_t>(is);
    header.emplace_back(std::move(name), std::move(shape));
  }
  std::map<std::string, Tensor> tensors;
  for (auto& [name, shape] : header) {
    Tensor t(shape);
    is.read(reinterpret_cast<char*>(t.data.data()),
            static_cast<std::streamsize>(t.numel() * sizeof(double)));
    if (!is) throw IoError("truncated checkpoint data for " + name);
    tensors.emplace(name, std::move(t));
  }
  ParamStore store;
  for (auto& [name, t] : tensors) {
    if (name.find(':') != std::string::npos) continue;
    store.add(name, t);
    auto& e = store.entry(name);
    auto m = tensors.find(name + ":adam_m");
    auto v = tensors.find(name + ":adam_v");
    if (m == tensors.end() || v == tensors.end()) throw FormatVersionError("missing Adam moments for " + name);
    e.m = m->second;
    e.v = v->second;
  }
  store.set_step(static_cast<std::int64_t>(step));
  return store;
}

}  // namespace rrnet::netops
