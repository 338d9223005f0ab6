#pragma once

#include <optional>
#include <string>
#include <vector>

#include "qf/attention.hpp"
#include "qf/posenc.hpp"

namespace qf::sia {

struct GridLevel {
  std::size_t h = 0;
  std::size_t w = 0;
  Var features;  // [(h*w) x d]

  std::size_t cells() const { return h * w; }
};

/// Pyramid levels stitched along the key axis in the order small, low, high.
struct FeaturePyramid {
  static constexpr std::size_t kSmall = 0;
  static constexpr std::size_t kLow = 1;
  static constexpr std::size_t kHigh = 2;

  std::vector<GridLevel> levels;
  Var stitched;
  std::vector<std::size_t> offsets;

  std::size_t total_cells() const { return stitched.rows(); }
  const GridLevel& low() const { return levels.at(kLow); }
  const GridLevel& high() const { return levels.at(kHigh); }

  /// Throws unless the offsets describe a contiguous small, low, high layout.
  void check_layout(const char* who) const {
    if (levels.size() != 3 || offsets.size() != 3) throw ShapeError(std::string(who) + ": pyramid needs 3 levels");
    std::size_t expect = 0;
    for (std::size_t i = 0; i < 3; ++i) {
      if (offsets[i] != expect) throw ShapeError(std::string(who) + ": level offsets do not match level sizes");
      expect += levels[i].cells();
    }
    if (expect != stitched.rows())
      throw ShapeError(std::string(who) + ": stitched layout has " + std::to_string(stitched.rows()) + " rows, levels sum to " +
                       std::to_string(expect));
  }

  /// Concatenates already-built levels and records their offsets.
  static FeaturePyramid stitch(std::vector<GridLevel> levels) {
    if (levels.size() != 3) throw ShapeError("FeaturePyramid: expected 3 levels, got " + std::to_string(levels.size()));
    FeaturePyramid p;
    std::vector<Var> parts;
    std::size_t at = 0;
    const std::size_t d = levels.front().features.cols();
    for (const auto& l : levels) {
      if (l.h == 0 || l.w == 0 || l.features.rows() != l.cells() || l.features.cols() != d)
        throw ShapeError("FeaturePyramid: level " + std::to_string(l.h) + "x" + std::to_string(l.w) + " has features " +
                         to_string(l.features.shape()));
      p.offsets.push_back(at);
      at += l.cells();
      parts.push_back(l.features);
    }
    p.stitched = concat_rows(parts);
    p.levels = std::move(levels);
    return p;
  }
};

/// Lateral projections of the top-down fusion pass.
struct FusionParams {
  LinearParams small_to_low;
  LinearParams low_to_high;

  static FusionParams create(ParamStore& store, const std::string& prefix, std::size_t d, RngStream& rng) {
    return {LinearParams::create(store, prefix + ".small_to_low", d, d, rng),
            LinearParams::create(store, prefix + ".low_to_high", d, d, rng)};
  }
};

/// Bilinear resize of a feature grid stored [(h*w) x c].
inline Var resize_features(const Var& x, std::size_t h, std::size_t w, std::size_t oh, std::size_t ow) {
  return transpose(bilinear_resize_rows(transpose(x), h, w, oh, ow));
}

/// Builds F_s by 2x2 average pooling of F_l and, when `fusion` is given,
/// adds upsampled lateral projections of coarser levels into finer ones.
inline FeaturePyramid build_pyramid(const GridLevel& high, const GridLevel& low, const FusionParams* fusion) {
  if (high.features.rows() != high.cells() || low.features.rows() != low.cells())
    throw ShapeError("build_pyramid: level features do not match their grids");
  if (high.features.cols() != low.features.cols()) throw ShapeError("build_pyramid: level widths differ");
  if (low.h > high.h || low.w > high.w)
    throw ShapeError("build_pyramid: low level " + std::to_string(low.h) + "x" + std::to_string(low.w) + " is finer than high level");
  Tape& t = high.features.tape();
  GridLevel small{(low.h + 1) / 2, (low.w + 1) / 2, avg_pool2x2(low.features, low.h, low.w)};
  GridLevel l = low, h = high;
  if (fusion) {
    l.features = add(low.features, resize_features(fusion->small_to_low(t, small.features), small.h, small.w, low.h, low.w));
    h.features = add(high.features, resize_features(fusion->low_to_high(t, l.features), low.h, low.w, high.h, high.w));
  }
  return FeaturePyramid::stitch({small, l, h});
}

/// Stitched key positional encodings, one encode_grid block per level.
inline DualTensor pyramid_key_positions(const FeaturePyramid& p, std::size_t d, double temperature = 10000.0, double scale = 1.0) {
  p.check_layout("pyramid_key_positions");
  DualTensor out({p.total_cells(), d});
  for (std::size_t i = 0; i < p.levels.size(); ++i) {
    const auto enc = posenc::encode_grid(p.levels[i].h, p.levels[i].w, d, temperature, scale);
    std::copy(enc.values().begin(), enc.values().end(), out.values().begin() + static_cast<std::ptrdiff_t>(p.offsets[i] * d));
  }
  return out;
}

/// Adds row l of level_embed[levels x d] to every key of level l.
inline Var add_level_embedding(const Var& key_pos, const FeaturePyramid& p, const Var& level_embed) {
  p.check_layout("add_level_embedding");
  std::vector<std::size_t> level_of_row;
  level_of_row.reserve(p.total_cells());
  for (std::size_t l = 0; l < p.levels.size(); ++l) level_of_row.insert(level_of_row.end(), p.levels[l].cells(), l);
  return add(key_pos, gather_rows(level_embed, level_of_row));
}

struct AttentionBundle {
  Var logits_stitched;  // A_lh before the prior, head-stacked [(heads*nq) x cells]
  Var logits_low;       // A_l, [(heads*nq) x cells(F_l)]
  Var prior_high;       // bilinear(A_l) on F_h's grid, [(heads*nq) x cells(F_h)]
  std::optional<Var> beta;  // [nq x heads] or [nq x 1]; absent when the prior is disabled
  Var logits_used;      // what the softmax saw
  attn::AttentionRecord record;
};

struct SiaOptions {
  bool enable_prior = true;
};

/// Stitched multi-scale cross-attention with the low-resolution logit prior.
inline std::pair<Var, AttentionBundle> sia_cross_attention(const Var& q_content, const Var& q_pos, const FeaturePyramid& pyramid,
                                                            const Var& key_pos, const attn::MhaParams& params,
                                                            const LinearParams& gate, const SiaOptions& opt = {}) {
  Tape& t = q_content.tape();
  pyramid.check_layout("sia_cross_attention");
  if (key_pos.rows() != pyramid.total_cells())
    throw ShapeError("sia_cross_attention: " + std::to_string(key_pos.rows()) + " key positions for " + std::to_string(pyramid.total_cells()) + " keys");

  Var q = attn::project_queries(t, params, q_content, q_pos);
  Var k = attn::project_keys(t, params, pyramid.stitched, key_pos);
  Var v = attn::project_values(t, params, pyramid.stitched);

  AttentionBundle b;
  b.logits_stitched = multihead_logits(q, k, params.heads, params.logit_scale());
  const auto& low = pyramid.low();
  const auto& high = pyramid.high();
  b.logits_low = slice_cols(b.logits_stitched, pyramid.offsets[FeaturePyramid::kLow], low.cells());
  b.prior_high = bilinear_resize_rows(b.logits_low, low.h, low.w, high.h, high.w);
  b.logits_used = b.logits_stitched;
  if (opt.enable_prior) {
    if (gate.out() != 1 && gate.out() != params.heads)
      throw ShapeError("sia_cross_attention: gate width " + std::to_string(gate.out()) + " is neither 1 nor heads");
    b.beta = gate(t, add(q_content, q_pos));
    b.logits_used = add_gated_prior(b.logits_stitched, b.prior_high, *b.beta, pyramid.offsets[FeaturePyramid::kHigh]);
  }
  auto [out, rec] = attn::attend(t, params, b.logits_used, v);
  b.record = rec;
  return {out, b};
}

}  // namespace qf::sia
