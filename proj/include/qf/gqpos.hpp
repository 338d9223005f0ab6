#pragma once

#include <optional>
#include <string>
#include <string_view>

#include "qf/attention.hpp"
#include "qf/posenc.hpp"
#include "qf/sia.hpp"

namespace qf::gqpos {

/// How the query position of the next decoder layer is produced.
///   gqpos:    FC(PE(boxes predicted by the latest queries)), every layer
///   fixed:    the learned initial embedding, unchanged
///   parallel: FC(PE(boxes predicted after the first layer)), reused by all later layers
///   no_pe:    raw box 4-vector through a linear lift to d
///   no_fc:    PE(boxes) used directly (needs d == d_model)
enum class GuideMode { gqpos, fixed, parallel, no_pe, no_fc };

inline std::string_view to_string(GuideMode m) {
  switch (m) {
    case GuideMode::gqpos: return "gqpos";
    case GuideMode::fixed: return "fixed";
    case GuideMode::parallel: return "parallel";
    case GuideMode::no_pe: return "no_pe";
    case GuideMode::no_fc: return "no_fc";
  }
  return "?";
}

inline GuideMode parse_guide_mode(std::string_view s) {
  for (auto m : {GuideMode::gqpos, GuideMode::fixed, GuideMode::parallel, GuideMode::no_pe, GuideMode::no_fc})
    if (s == to_string(m)) return m;
  throw std::invalid_argument("unknown query-position mode '" + std::string(s) + "' (expected gqpos|fixed|parallel|no_pe|no_fc)");
}

struct GuideConfig {
  GuideMode mode = GuideMode::gqpos;
  posenc::BoxEncodingConfig encoding{};
  bool detach_guide = false;
  bool separate_guide_mlp = false;

  void validate(std::size_t d) const {
    encoding.validate();
    if (mode == GuideMode::no_fc && encoding.d_model != d)
      throw std::invalid_argument("mode no_fc uses the encoding as query position directly and needs d_model (" +
                                  std::to_string(encoding.d_model) + ") == d (" + std::to_string(d) + ")");
  }
};

struct QueryState {
  Var q_content;  // [nq x d]
  Var q_pos;      // [nq x d]
  Var boxes;      // [nq x 4], (x, y, h, w) in (0, 1)
  Var reference;  // [nq x 2], centre anchor for the next box prediction
  std::size_t layer_index = 0;
};

/// Box MLP on the queries, offset in logit space by the reference centre when given.
inline Var predict_positions(Tape& t, const Var& q_content, const MlpParams& box_mlp, const Var* reference = nullptr) {
  if (box_mlp.layers.empty() || box_mlp.layers.back().out() != 4) throw ShapeError("predict_positions: box MLP must end in width 4");
  Var raw = box_mlp(t, q_content);
  if (reference) {
    if (reference->rows() != q_content.rows() || reference->cols() != 2)
      throw ShapeError("predict_positions: reference " + qf::to_string(reference->shape()) + " does not fit " + std::to_string(q_content.rows()) + " queries");
    raw = add(raw, pad_cols(logit(*reference), 4, 0));
  }
  return sigmoid(raw);
}

inline Var guide_query_position(const Var& boxes, const posenc::BoxEncodingConfig& cfg, const LinearParams& proj) {
  if (proj.in() != cfg.d_model) throw ShapeError("guide_query_position: projection input width differs from d_model");
  return proj(boxes.tape(), posenc::encode_boxes(boxes, cfg));
}

struct DecoderLayerParams {
  attn::MhaParams self_attn;
  attn::MhaParams cross_attn;
  LinearParams gate;  // prior gate; unused for single-scale memory
  LayerNormParams norm1, norm2, norm3;
  LinearParams ffn1, ffn2;

  static DecoderLayerParams create(ParamStore& store, const std::string& prefix, std::size_t d, std::size_t heads,
                                   std::size_t ffn_width, std::size_t gate_width, bool pos_after_projection, RngStream& rng) {
    DecoderLayerParams p;
    p.self_attn = attn::MhaParams::create(store, prefix + ".self_attn", d, heads, rng, pos_after_projection);
    p.cross_attn = attn::MhaParams::create(store, prefix + ".cross_attn", d, heads, rng, pos_after_projection);
    p.gate = LinearParams::create(store, prefix + ".gate", d, gate_width, rng);
    init::fill(*p.gate.weight, 0.0);
    p.norm1 = LayerNormParams::create(store, prefix + ".norm1", d);
    p.norm2 = LayerNormParams::create(store, prefix + ".norm2", d);
    p.norm3 = LayerNormParams::create(store, prefix + ".norm3", d);
    p.ffn1 = LinearParams::create(store, prefix + ".ffn1", d, ffn_width, rng);
    p.ffn2 = LinearParams::create(store, prefix + ".ffn2", ffn_width, d, rng);
    return p;
  }
};

/// Parameters of the query-position update that are shared across layers.
struct GuideParams {
  const MlpParams* box_mlp = nullptr;    // also the prediction head
  const MlpParams* guide_mlp = nullptr;  // only with separate_guide_mlp
  LinearParams pe_proj;                  // d_model -> d
  LinearParams lift;                     // 4 -> d, mode no_pe
};

/// Keys the cross-attention reads: a flat single-scale grid, or a stitched pyramid.
struct Memory {
  Var keys;     // flat: [n x d], also the values
  Var key_pos;  // [n x d] (stitched order for a pyramid)
  const sia::FeaturePyramid* pyramid = nullptr;
  bool enable_prior = false;
};

struct StepOptions {
  /// Replaces the boxes that guide the next query position.
  std::optional<Var> guide_override;
  attn::AttentionOptions attention;
};

struct LayerResult {
  QueryState next;
  attn::AttentionRecord record;
  std::optional<sia::AttentionBundle> bundle;
};

/// Next query position from guide boxes, per mode.
inline Var next_query_position(const QueryState& state, const Var& guide_boxes, const GuideParams& gp, const GuideConfig& cfg) {
  Tape& t = guide_boxes.tape();
  switch (cfg.mode) {
    case GuideMode::fixed: return state.q_pos;
    case GuideMode::parallel:
      if (state.layer_index > 0) return state.q_pos;
      return guide_query_position(guide_boxes, cfg.encoding, gp.pe_proj);
    case GuideMode::gqpos: return guide_query_position(guide_boxes, cfg.encoding, gp.pe_proj);
    case GuideMode::no_pe: return gp.lift(t, guide_boxes);
    case GuideMode::no_fc: return posenc::encode_boxes(guide_boxes, cfg.encoding);
  }
  throw std::logic_error("unhandled guide mode");
}

/// One decoder layer: query self-attention, cross-attention, feed-forward
/// (each with residual and post-norm), box prediction, then the query
/// position handed to the next layer.
inline LayerResult decoder_layer_step(const QueryState& state, const Memory& memory, const DecoderLayerParams& lp, const GuideParams& gp,
                                      const GuideConfig& cfg, const StepOptions& opt = {}) {
  Tape& t = state.q_content.tape();
  cfg.validate(state.q_content.cols());
  if (!gp.box_mlp) throw std::invalid_argument("decoder_layer_step: missing box MLP");

  Var q = state.q_content;
  q = lp.norm1(t, add(q, attn::self_attention(q, state.q_pos, lp.self_attn, opt.attention)));

  LayerResult r;
  Var attended;
  if (memory.pyramid) {
    auto [out, bundle] = sia::sia_cross_attention(q, state.q_pos, *memory.pyramid, memory.key_pos, lp.cross_attn, lp.gate,
                                                  {.enable_prior = memory.enable_prior});
    attended = out;
    r.record = bundle.record;
    r.bundle = std::move(bundle);
  } else {
    auto [out, rec] = attn::cross_attention(q, state.q_pos, memory.keys, memory.key_pos, memory.keys, lp.cross_attn, opt.attention);
    attended = out;
    r.record = rec;
  }
  q = lp.norm2(t, add(q, attended));
  q = lp.norm3(t, add(q, lp.ffn2(t, relu(lp.ffn1(t, q)))));

  Var boxes = predict_positions(t, q, *gp.box_mlp, &state.reference);

  Var guide = boxes;
  if (opt.guide_override) {
    guide = *opt.guide_override;
  } else if (cfg.separate_guide_mlp) {
    if (!gp.guide_mlp) throw std::invalid_argument("decoder_layer_step: separate_guide_mlp without a guide MLP");
    guide = predict_positions(t, q, *gp.guide_mlp, &state.reference);
  }
  if (cfg.detach_guide) guide = detach(guide);

  r.next.q_content = q;
  r.next.boxes = boxes;
  r.next.reference = slice_cols(boxes, 0, 2);
  r.next.q_pos = next_query_position(state, guide, gp, cfg);
  r.next.layer_index = state.layer_index + 1;
  return r;
}

}  // namespace qf::gqpos
