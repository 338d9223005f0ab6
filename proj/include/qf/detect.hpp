#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "qf/gqpos.hpp"
#include "qf/sia.hpp"

namespace qf::detect {

struct HeadConfig {
  std::size_t num_queries = 12;
  std::size_t num_layers = 3;
  std::size_t d = 64;
  std::size_t heads = 4;
  std::size_t d_model = 64;
  std::size_t num_classes = 3;
  std::size_t ffn_mult = 4;
  double pe_temperature = 10000.0;
  double pe_scale = 1.0;  // shared by box and grid encodings

  gqpos::GuideMode mode = gqpos::GuideMode::gqpos;
  bool detach_guide = false;
  bool separate_guide_mlp = false;
  bool pos_after_projection = false;

  bool multiscale = false;
  bool feature_fusion = false;
  bool attention_prior = false;
  bool level_embed = false;
  bool beta_shared_heads = false;

  bool encoder_layer = true;
  bool aux_loss = true;

  gqpos::GuideConfig guide() const {
    return {mode, {d_model, pe_temperature, pe_scale}, detach_guide, separate_guide_mlp};
  }

  void validate() const {
    auto fail = [](const std::string& field, const std::string& why) { throw std::invalid_argument(field + ": " + why); };
    if (num_queries == 0) fail("num_queries", "must be at least 1");
    if (num_layers == 0) fail("num_layers", "must be at least 1");
    if (num_classes == 0) fail("num_classes", "must be at least 1");
    if (heads == 0 || d % heads != 0) fail("heads", "must divide d=" + std::to_string(d));
    if (d % 4 != 0) fail("d", "must be divisible by 4 for the grid encoding");
    if (d_model == 0 || d_model % 8 != 0) fail("d_model", "must be a positive multiple of 8");
    if (ffn_mult == 0) fail("ffn_mult", "must be at least 1");
    if (!(pe_temperature > 0.0)) fail("pe_temperature", "must be positive");
    if (!(pe_scale > 0.0)) fail("pe_scale", "must be positive");
    if (mode == gqpos::GuideMode::no_fc && d != d_model) fail("mode", "no_fc requires d_model == d");
    if (feature_fusion && !multiscale) fail("feature_fusion", "requires multiscale = true");
    if (attention_prior && !multiscale) fail("attention_prior", "requires multiscale = true");
    if (level_embed && !multiscale) fail("level_embed", "requires multiscale = true");
    if (beta_shared_heads && !attention_prior) fail("beta_shared_heads", "requires attention_prior = true");
  }
};

struct HeadParams {
  DualTensor* query_embed = nullptr;  // [nq x d], object queries entering layer 0
  DualTensor* query_pos = nullptr;    // [nq x d], learned initial query position
  DualTensor* reference = nullptr;    // [nq x 2], logits of the layer-0 reference centres
  DualTensor* level_embed = nullptr;  // [3 x d]

  std::optional<attn::MhaParams> encoder_attn;
  LayerNormParams encoder_norm1, encoder_norm2;
  LinearParams encoder_ffn1, encoder_ffn2;

  std::vector<gqpos::DecoderLayerParams> layers;
  MlpParams box_mlp;
  std::optional<MlpParams> guide_mlp;
  LinearParams class_head;
  LinearParams pe_proj;
  LinearParams lift;
  std::optional<sia::FusionParams> fusion;

  static HeadParams create(ParamStore& store, const HeadConfig& cfg, RngStream& rng) {
    cfg.validate();
    const std::size_t d = cfg.d;
    HeadParams p;
    p.query_embed = &store.add("head.query_embed", {cfg.num_queries, d});
    init::normal(*p.query_embed, rng, 1.0);
    p.query_pos = &store.add("head.query_pos", {cfg.num_queries, d});
    init::normal(*p.query_pos, rng, 1.0);
    p.reference = &store.add("head.reference", {cfg.num_queries, 2});
    init::uniform(*p.reference, rng, -1.5, 1.5);
    if (cfg.level_embed) {
      p.level_embed = &store.add("head.level_embed", {3, d});
      init::normal(*p.level_embed, rng, 0.1);
    }
    if (cfg.encoder_layer) {
      p.encoder_attn = attn::MhaParams::create(store, "head.encoder.attn", d, cfg.heads, rng, cfg.pos_after_projection);
      p.encoder_norm1 = LayerNormParams::create(store, "head.encoder.norm1", d);
      p.encoder_norm2 = LayerNormParams::create(store, "head.encoder.norm2", d);
      p.encoder_ffn1 = LinearParams::create(store, "head.encoder.ffn1", d, cfg.ffn_mult * d, rng);
      p.encoder_ffn2 = LinearParams::create(store, "head.encoder.ffn2", cfg.ffn_mult * d, d, rng);
    }
    const std::size_t gate_width = cfg.beta_shared_heads ? 1 : cfg.heads;
    for (std::size_t i = 0; i < cfg.num_layers; ++i)
      p.layers.push_back(gqpos::DecoderLayerParams::create(store, "head.decoder." + std::to_string(i), d, cfg.heads,
                                                           cfg.ffn_mult * d, gate_width, cfg.pos_after_projection, rng));
    p.box_mlp = MlpParams::create(store, "head.box_mlp", {d, d, d, 4}, rng);
    init::fill(*p.box_mlp.layers.back().weight, 0.0);
    if (cfg.separate_guide_mlp) {
      p.guide_mlp = MlpParams::create(store, "head.guide_mlp", {d, d, d, 4}, rng);
      init::fill(*p.guide_mlp->layers.back().weight, 0.0);
    }
    p.class_head = LinearParams::create(store, "head.class", d, cfg.num_classes, rng);
    init::fill(*p.class_head.bias, -std::log((1.0 - 0.01) / 0.01));
    p.pe_proj = LinearParams::create(store, "head.pe_proj", cfg.d_model, d, rng);
    p.lift = LinearParams::create(store, "head.lift", 4, d, rng);
    if (cfg.feature_fusion) p.fusion = sia::FusionParams::create(store, "head.fusion", d, rng);
    return p;
  }

  gqpos::GuideParams guide() const {
    return {&box_mlp, guide_mlp ? &*guide_mlp : nullptr, pe_proj, lift};
  }
};

/// Backbone-side input of the head: the fine grid and the 2x-strided grid.
struct SceneFeatures {
  sia::GridLevel high;
  sia::GridLevel low;
};

struct LevelLayout {
  std::size_t h = 0, w = 0, offset = 0;
};

struct LayerPrediction {
  Var logits;  // [nq x num_classes]
  Var boxes;   // [nq x 4]
};

struct HeadOutput {
  std::vector<LayerPrediction> layers;
  std::vector<gqpos::QueryState> inputs;  // state entering each layer
  std::vector<gqpos::LayerResult> steps;
  std::vector<LevelLayout> levels;        // key-axis layout of the attention records
  std::optional<sia::FeaturePyramid> pyramid;
  Var memory;
};

struct ForwardOptions {
  /// Per-layer overrides of the guide boxes, indexed by layer.
  std::vector<std::optional<Var>> guide_overrides;
};

/// Single optional encoder layer over the low-resolution grid.
inline Var encode_low(Tape& t, const sia::GridLevel& low, const HeadConfig& cfg, const HeadParams& p) {
  if (!p.encoder_attn) return low.features;
  Var pos = t.constant(posenc::encode_grid(low.h, low.w, low.features.cols(), cfg.pe_temperature, cfg.pe_scale));
  Var x = p.encoder_norm1(t, add(low.features, attn::self_attention(low.features, pos, *p.encoder_attn)));
  return p.encoder_norm2(t, add(x, p.encoder_ffn2(t, relu(p.encoder_ffn1(t, x)))));
}

inline HeadOutput forward(Tape& t, const SceneFeatures& features, const HeadConfig& cfg, const HeadParams& p, const ForwardOptions& opt = {}) {
  cfg.validate();
  if (features.high.features.cols() != cfg.d || features.low.features.cols() != cfg.d)
    throw ShapeError("detect::forward: feature width differs from d=" + std::to_string(cfg.d));
  if (features.high.features.rows() != features.high.cells() || features.low.features.rows() != features.low.cells())
    throw ShapeError("detect::forward: feature rows do not match the configured grids");
  if (p.layers.size() != cfg.num_layers) throw std::invalid_argument("detect::forward: parameters built for a different layer count");

  HeadOutput out;
  sia::GridLevel low = features.low;
  low.features = encode_low(t, low, cfg, p);

  gqpos::Memory memory;
  if (cfg.multiscale) {
    out.pyramid = sia::build_pyramid(features.high, low, p.fusion ? &*p.fusion : nullptr);
    Var key_pos = t.constant(sia::pyramid_key_positions(*out.pyramid, cfg.d, cfg.pe_temperature, cfg.pe_scale));
    if (p.level_embed) key_pos = sia::add_level_embedding(key_pos, *out.pyramid, t.param(*p.level_embed));
    memory = {out.pyramid->stitched, key_pos, &*out.pyramid, cfg.attention_prior};
    for (std::size_t i = 0; i < 3; ++i)
      out.levels.push_back({out.pyramid->levels[i].h, out.pyramid->levels[i].w, out.pyramid->offsets[i]});
    out.memory = out.pyramid->stitched;
  } else {
    memory = {low.features, t.constant(posenc::encode_grid(low.h, low.w, cfg.d, cfg.pe_temperature, cfg.pe_scale)), nullptr, false};
    out.levels.push_back({low.h, low.w, 0});
    out.memory = low.features;
  }

  gqpos::QueryState state;
  state.q_content = t.param(*p.query_embed);
  state.q_pos = t.param(*p.query_pos);
  Var ref_logits = t.param(*p.reference);
  state.reference = sigmoid(ref_logits);
  state.boxes = sigmoid(pad_cols(ref_logits, 4, 0));
  state.layer_index = 0;

  const auto guide_cfg = cfg.guide();
  const auto guide = p.guide();
  for (std::size_t i = 0; i < cfg.num_layers; ++i) {
    gqpos::StepOptions so;
    if (i < opt.guide_overrides.size()) so.guide_override = opt.guide_overrides[i];
    out.inputs.push_back(state);
    auto r = gqpos::decoder_layer_step(state, memory, p.layers[i], guide, guide_cfg, so);
    out.layers.push_back({p.class_head(t, r.next.q_content), r.next.boxes});
    state = r.next;
    out.steps.push_back(std::move(r));
  }
  return out;
}

/// Grayscale map of one pyramid level, row-major, values in [0, 1].
struct GrayMap {
  std::size_t h = 0, w = 0;
  std::vector<double> pixels;
};

/// Head-averaged attention of one query over each level's grid.
inline std::vector<std::vector<double>> head_averaged_attention(const HeadOutput& out, std::size_t layer, std::size_t query) {
  if (layer >= out.steps.size()) throw std::out_of_range("layer " + std::to_string(layer) + " out of range [0, " + std::to_string(out.steps.size()) + ")");
  const auto& rec = out.steps[layer].record;
  if (query >= rec.queries) throw std::out_of_range("query " + std::to_string(query) + " out of range [0, " + std::to_string(rec.queries) + ")");
  std::vector<std::vector<double>> maps;
  for (const auto& lv : out.levels) {
    std::vector<double> m(lv.h * lv.w, 0.0);
    for (std::size_t h = 0; h < rec.heads; ++h)
      for (std::size_t c = 0; c < m.size(); ++c) m[c] += rec.weight(h, query, lv.offset + c) / static_cast<double>(rec.heads);
    maps.push_back(std::move(m));
  }
  return maps;
}

/// Per-level maps scaled so each level's maximum is 1.
inline std::vector<GrayMap> export_attention_maps(const HeadOutput& out, std::size_t layer, std::size_t query) {
  auto raw = head_averaged_attention(out, layer, query);
  std::vector<GrayMap> maps;
  for (std::size_t l = 0; l < raw.size(); ++l) {
    GrayMap g{out.levels[l].h, out.levels[l].w, std::move(raw[l])};
    const double mx = g.pixels.empty() ? 0.0 : *std::max_element(g.pixels.begin(), g.pixels.end());
    if (mx > 0.0)
      for (auto& v : g.pixels) v /= mx;
    maps.push_back(std::move(g));
  }
  return maps;
}

/// Head-averaged attention mass of one query on cells whose centres fall inside `box`, summed over levels.
inline double attention_mass_in_box(const HeadOutput& out, std::size_t layer, std::size_t query, const posenc::Box& box) {
  const auto maps = head_averaged_attention(out, layer, query);
  const double x0 = box[0] - box[3] / 2, x1 = box[0] + box[3] / 2;
  const double y0 = box[1] - box[2] / 2, y1 = box[1] + box[2] / 2;
  double mass = 0.0;
  for (std::size_t l = 0; l < maps.size(); ++l) {
    const auto& lv = out.levels[l];
    for (std::size_t r = 0; r < lv.h; ++r)
      for (std::size_t c = 0; c < lv.w; ++c) {
        const double cy = (static_cast<double>(r) + 0.5) / static_cast<double>(lv.h);
        const double cx = (static_cast<double>(c) + 0.5) / static_cast<double>(lv.w);
        if (cx >= x0 && cx <= x1 && cy >= y0 && cy <= y1) mass += maps[l][r * lv.w + c];
      }
  }
  return mass;
}

}  // namespace qf::detect
