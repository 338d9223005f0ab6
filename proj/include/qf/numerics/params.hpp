#pragma once

#include <cmath>
#include <map>
#include <stdexcept>
#include <string>

#include "qf/numerics/kernels.hpp"
#include "qf/numerics/rng.hpp"

namespace qf {

/// Named trainable tensors keyed by dot-path. Node-based storage keeps
/// references stable for the lifetime of the store.
class ParamStore {
 public:
  ParamStore() = default;
  ParamStore(const ParamStore&) = delete;
  ParamStore& operator=(const ParamStore&) = delete;

  DualTensor& add(const std::string& name, Shape shape) {
    auto [it, inserted] = tensors_.try_emplace(name, std::move(shape));
    if (!inserted) throw std::invalid_argument("ParamStore: duplicate parameter " + name);
    return it->second;
  }

  DualTensor& get(const std::string& name) {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw std::out_of_range("ParamStore: no parameter " + name);
    return it->second;
  }
  const DualTensor& get(const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw std::out_of_range("ParamStore: no parameter " + name);
    return it->second;
  }
  bool contains(const std::string& name) const { return tensors_.count(name) != 0; }

  std::map<std::string, DualTensor>& all() { return tensors_; }
  const std::map<std::string, DualTensor>& all() const { return tensors_; }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : tensors_) n += t.size();
    return n;
  }

  void zero_grad() {
    for (auto& [_, t] : tensors_) t.zero_grad();
  }

 private:
  std::map<std::string, DualTensor> tensors_;
};

namespace init {

inline void xavier_uniform(DualTensor& w, RngStream& rng, double gain = 1.0) {
  const double fan_in = static_cast<double>(w.rows()), fan_out = static_cast<double>(w.cols());
  const double a = gain * std::sqrt(6.0 / (fan_in + fan_out));
  for (auto& v : w.values()) v = rng.uniform(-a, a);
}

inline void normal(DualTensor& w, RngStream& rng, double stddev) {
  for (auto& v : w.values()) v = rng.normal(0.0, stddev);
}

inline void uniform(DualTensor& w, RngStream& rng, double lo, double hi) {
  for (auto& v : w.values()) v = rng.uniform(lo, hi);
}

inline void fill(DualTensor& w, double value) {
  for (auto& v : w.values()) v = value;
}

}  // namespace init

/// Affine layer x * W + b with W stored [in x out].
struct LinearParams {
  DualTensor* weight = nullptr;
  DualTensor* bias = nullptr;

  static LinearParams create(ParamStore& store, const std::string& prefix, std::size_t in, std::size_t out, RngStream& rng,
                             double gain = 1.0) {
    LinearParams p;
    p.weight = &store.add(prefix + ".weight", {in, out});
    p.bias = &store.add(prefix + ".bias", {out});
    init::xavier_uniform(*p.weight, rng, gain);
    return p;
  }

  std::size_t in() const { return weight->rows(); }
  std::size_t out() const { return weight->cols(); }

  Var operator()(Tape& t, const Var& x) const { return linear(x, t.param(*weight), t.param(*bias)); }
};

struct LayerNormParams {
  DualTensor* gamma = nullptr;
  DualTensor* beta = nullptr;

  static LayerNormParams create(ParamStore& store, const std::string& prefix, std::size_t width) {
    LayerNormParams p;
    p.gamma = &store.add(prefix + ".gamma", {width});
    p.beta = &store.add(prefix + ".beta", {width});
    init::fill(*p.gamma, 1.0);
    return p;
  }

  Var operator()(Tape& t, const Var& x) const { return layer_norm_rows(x, t.param(*gamma), t.param(*beta)); }
};

/// Stack of linear layers with relu between them (none after the last).
struct MlpParams {
  std::vector<LinearParams> layers;

  static MlpParams create(ParamStore& store, const std::string& prefix, const std::vector<std::size_t>& widths, RngStream& rng) {
    MlpParams p;
    for (std::size_t i = 0; i + 1 < widths.size(); ++i)
      p.layers.push_back(LinearParams::create(store, prefix + ".layers." + std::to_string(i), widths[i], widths[i + 1], rng));
    return p;
  }

  Var operator()(Tape& t, Var x) const {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      x = layers[i](t, x);
      if (i + 1 < layers.size()) x = relu(x);
    }
    return x;
  }
};

}  // namespace qf
