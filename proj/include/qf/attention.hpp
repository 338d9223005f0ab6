#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <utility>

#include "qf/numerics/params.hpp"

namespace qf::attn {

/// Multi-head attention projections. Logits are scaled by 1/sqrt(d/heads).
struct MhaParams {
  LinearParams q, k, v, out;
  std::size_t heads = 1;
  std::size_t d = 0;
  /// false: positional terms are added to the inputs of the Q/K projections.
  /// true: they are added to the projected queries/keys.
  bool pos_after_projection = false;

  static MhaParams create(ParamStore& store, const std::string& prefix, std::size_t d, std::size_t heads, RngStream& rng,
                          bool pos_after_projection = false) {
    if (heads == 0 || d % heads != 0)
      throw std::invalid_argument("MhaParams: width " + std::to_string(d) + " not divisible by heads " + std::to_string(heads));
    MhaParams p;
    p.q = LinearParams::create(store, prefix + ".q", d, d, rng);
    p.k = LinearParams::create(store, prefix + ".k", d, d, rng);
    p.v = LinearParams::create(store, prefix + ".v", d, d, rng);
    p.out = LinearParams::create(store, prefix + ".out", d, d, rng);
    p.heads = heads;
    p.d = d;
    p.pos_after_projection = pos_after_projection;
    return p;
  }

  std::size_t head_width() const { return d / heads; }
  double logit_scale() const { return 1.0 / std::sqrt(static_cast<double>(head_width())); }
};

/// Post-softmax weights actually used, head-stacked: row h*nq + q, one column per key.
struct AttentionRecord {
  Var weights;
  std::size_t heads = 0;
  std::size_t queries = 0;
  std::size_t keys = 0;

  double weight(std::size_t head, std::size_t query, std::size_t key) const {
    return weights.value()[(head * queries + query) * keys + key];
  }
};

struct AttentionOptions {
  /// Applied to the head-stacked logits before the softmax; tests use it to inject offsets.
  std::function<Var(const Var&)> logit_hook;
};

namespace detail {
inline void require_width(const Var& x, std::size_t d, const char* what) {
  if (x.shape().size() != 2 || x.cols() != d)
    throw ShapeError(std::string("attention: ") + what + " " + to_string(x.shape()) + " does not have width " + std::to_string(d));
}
}  // namespace detail

inline Var project_queries(Tape& t, const MhaParams& p, const Var& content, const Var& pos) {
  detail::require_width(content, p.d, "query content");
  detail::require_width(pos, p.d, "query position");
  if (p.pos_after_projection) return add(p.q(t, content), pos);
  return p.q(t, add(content, pos));
}

inline Var project_keys(Tape& t, const MhaParams& p, const Var& keys, const Var& pos) {
  detail::require_width(keys, p.d, "keys");
  detail::require_width(pos, p.d, "key position");
  if (p.pos_after_projection) return add(p.k(t, keys), pos);
  return p.k(t, add(keys, pos));
}

inline Var project_values(Tape& t, const MhaParams& p, const Var& values) {
  detail::require_width(values, p.d, "values");
  return p.v(t, values);
}

/// Softmax over keys, weighted sum of projected values, output projection.
inline std::pair<Var, AttentionRecord> attend(Tape& t, const MhaParams& p, const Var& logits, const Var& values_proj) {
  Var weights = softmax_rows(logits);
  Var mixed = multihead_mix(weights, values_proj, p.heads);
  AttentionRecord rec{weights, p.heads, logits.rows() / p.heads, logits.cols()};
  return {p.out(t, mixed), rec};
}

inline std::pair<Var, AttentionRecord> cross_attention(const Var& q_content, const Var& q_pos, const Var& keys, const Var& key_pos,
                                                       const Var& values, const MhaParams& p, const AttentionOptions& opt = {}) {
  Tape& t = q_content.tape();
  if (keys.rows() != values.rows() || keys.rows() != key_pos.rows())
    throw ShapeError("cross_attention: keys " + to_string(keys.shape()) + ", key positions " + to_string(key_pos.shape()) +
                     " and values " + to_string(values.shape()) + " disagree");
  if (q_content.rows() != q_pos.rows()) throw ShapeError("cross_attention: query content and position row counts differ");
  Var q = project_queries(t, p, q_content, q_pos);
  Var k = project_keys(t, p, keys, key_pos);
  Var v = project_values(t, p, values);
  Var logits = multihead_logits(q, k, p.heads, p.logit_scale());
  if (opt.logit_hook) logits = opt.logit_hook(logits);
  return attend(t, p, logits, v);
}

inline Var self_attention(const Var& x, const Var& pos, const MhaParams& p, const AttentionOptions& opt = {}) {
  return cross_attention(x, pos, x, pos, x, p, opt).first;
}

}  // namespace qf::attn
