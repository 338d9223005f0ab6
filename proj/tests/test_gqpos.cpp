#include <gtest/gtest.h>

#include "qf/detect.hpp"
#include "support.hpp"

using namespace qf;
using namespace qf::gqpos;
using qf::testing::probe;
using qf::testing::random_tensor;

namespace {

detect::HeadConfig small_config(GuideMode mode, std::size_t layers = 2) {
  detect::HeadConfig c;
  c.num_queries = 3;
  c.num_layers = layers;
  c.d = 8;
  c.heads = 2;
  c.d_model = 8;
  c.num_classes = 2;
  c.ffn_mult = 2;
  c.mode = mode;
  c.encoder_layer = false;
  return c;
}

struct Model {
  detect::HeadConfig cfg;
  ParamStore store;
  detect::HeadParams params;
  DualTensor high, low;

  explicit Model(const detect::HeadConfig& c, std::uint64_t seed = 5) : cfg(c) {
    RngStream rng(seed);
    params = detect::HeadParams::create(store, cfg, rng);
    // Non-zero box head so predicted boxes move with the queries.
    init::uniform(*params.box_mlp.layers.back().weight, rng, -0.5, 0.5);
    high = random_tensor({64, cfg.d}, rng);
    low = random_tensor({16, cfg.d}, rng);
  }

  detect::HeadOutput run(Tape& t, const detect::ForwardOptions& opt = {}) const {
    detect::SceneFeatures f{{8, 8, t.constant(high)}, {4, 4, t.constant(low)}};
    return detect::forward(t, f, cfg, params, opt);
  }
};

}  // namespace

TEST(PredictPositions, ZeroMlpGivesCentredHalfBoxes) {
  ParamStore s;
  RngStream rng(1);
  auto mlp = MlpParams::create(s, "box", {8, 8, 8, 4}, rng);
  for (auto& [_, t] : s.all()) init::fill(t, 0.0);
  Tape t;
  auto b = predict_positions(t, t.constant(random_tensor({3, 8}, rng)), mlp);
  for (double v : b.value()) EXPECT_EQ(v, 0.5);
}

TEST(PredictPositions, IdenticalQueriesGiveIdenticalBoxes) {
  ParamStore s;
  RngStream rng(2);
  auto mlp = MlpParams::create(s, "box", {8, 8, 8, 4}, rng);
  auto row = random_tensor({1, 8}, rng);
  DualTensor q({2, 8});
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t k = 0; k < 8; ++k) q.at(r, k) = row[k];
  Tape t;
  auto b = predict_positions(t, t.constant(q), mlp);
  for (std::size_t k = 0; k < 4; ++k) EXPECT_EQ(b.value()[k], b.value()[4 + k]);
}

TEST(PredictPositions, GradientsToMlpParams) {
  ParamStore s;
  RngStream rng(3);
  auto mlp = MlpParams::create(s, "box", {8, 8, 8, 4}, rng);
  auto q = random_tensor({2, 8}, rng);
  auto ref = random_tensor({2, 2}, rng, 0.1, 0.9);
  std::vector<NamedTensor> checked;
  for (auto& [name, t] : s.all()) checked.push_back({name, &t});
  auto r = grad_check([&](Tape& t) {
    Var rv = t.constant(ref);
    return probe(predict_positions(t, t.constant(q), mlp, &rv));
  }, checked);
  EXPECT_TRUE(r.passed(1e-4)) << r.worst.name << " " << r.max_rel_err;
}

TEST(GuideQueryPosition, IdentityProjectionReturnsEncoding) {
  ParamStore s;
  RngStream rng(4);
  auto proj = LinearParams::create(s, "proj", 16, 16, rng);
  init::fill(*proj.weight, 0.0);
  for (std::size_t i = 0; i < 16; ++i) proj.weight->at(i, i) = 1.0;
  const posenc::BoxEncodingConfig cfg{16, 10000};
  DualTensor boxes = DualTensor::matrix(2, 4, {0.3, 0.6, 0.2, 0.1, 0.3, 0.6, 0.2, 0.1});
  Tape t;
  auto qp = guide_query_position(t.constant(boxes), cfg, proj);
  auto enc = posenc::encode_box({0.3, 0.6, 0.2, 0.1}, cfg);
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t k = 0; k < 16; ++k) EXPECT_EQ(qp.value()[r * 16 + k], enc[k]);
}

TEST(GuideQueryPosition, ComposesPredictAndEncodeOracles) {
  ParamStore s;
  RngStream rng(5);
  auto mlp = MlpParams::create(s, "box", {8, 8, 8, 4}, rng);
  auto proj = LinearParams::create(s, "proj", 8, 8, rng);
  init::uniform(*proj.bias, rng, -1, 1);
  auto q = random_tensor({3, 8}, rng);
  const posenc::BoxEncodingConfig cfg{8, 10000};
  Tape t;
  auto boxes = predict_positions(t, t.constant(q), mlp);
  auto qp = guide_query_position(boxes, cfg, proj);
  for (std::size_t r = 0; r < 3; ++r) {
    auto enc = posenc::encode_box({boxes.value()[4 * r], boxes.value()[4 * r + 1], boxes.value()[4 * r + 2], boxes.value()[4 * r + 3]}, cfg);
    for (std::size_t c = 0; c < 8; ++c) {
      double acc = (*proj.bias)[c];
      for (std::size_t k = 0; k < 8; ++k) acc += enc[k] * proj.weight->at(k, c);
      EXPECT_NEAR(qp.value()[r * 8 + c], acc, 1e-14);
    }
  }
}

TEST(GuideQueryPosition, OutOfRangeBoxRejected) {
  ParamStore s;
  RngStream rng(6);
  auto proj = LinearParams::create(s, "proj", 8, 8, rng);
  Tape t;
  EXPECT_THROW(guide_query_position(t.constant(DualTensor::matrix(1, 4, {0.5, 1.5, 0.1, 0.1})), {8, 10000}, proj), std::out_of_range);
}

TEST(DecoderStep, FixedModeKeepsQueryPositionBitwise) {
  Model m(small_config(GuideMode::fixed, 3));
  Tape t;
  auto out = m.run(t);
  for (const auto& in : out.inputs) EXPECT_EQ(in.q_pos.value(), m.params.query_pos->values());
  EXPECT_EQ(out.steps.back().next.q_pos.value(), m.params.query_pos->values());
}

TEST(DecoderStep, GqposRecomputesFromPreviousQueries) {
  Model m(small_config(GuideMode::gqpos, 3));
  Tape t;
  auto out = m.run(t);
  for (std::size_t i = 1; i < out.inputs.size(); ++i) {
    const auto& prev = out.steps[i - 1].next;
    Var ref = out.inputs[i - 1].reference;
    Var boxes = predict_positions(t, prev.q_content, m.params.box_mlp, &ref);
    Var qp = guide_query_position(boxes, m.cfg.guide().encoding, m.params.pe_proj);
    for (std::size_t k = 0; k < qp.size(); ++k) EXPECT_NEAR(qp.value()[k], out.inputs[i].q_pos.value()[k], 1e-12);
  }
}

TEST(DecoderStep, GqposWithLayerZeroBoxesEqualsParallel) {
  Model g(small_config(GuideMode::gqpos, 3), 9);
  Model p(small_config(GuideMode::parallel, 3), 9);
  Tape t;
  auto ref = p.run(t);
  detect::ForwardOptions opt;
  opt.guide_overrides = {std::nullopt, ref.layers[0].boxes, ref.layers[0].boxes};
  auto forced = g.run(t, opt);
  for (std::size_t l = 0; l < 3; ++l) {
    EXPECT_EQ(forced.layers[l].logits.value(), ref.layers[l].logits.value());
    EXPECT_EQ(forced.layers[l].boxes.value(), ref.layers[l].boxes.value());
  }
}

TEST(DecoderStep, ParallelReusesLayerZeroGuide) {
  Model m(small_config(GuideMode::parallel, 3));
  Tape t;
  auto out = m.run(t);
  EXPECT_EQ(out.inputs[1].q_pos.value(), out.inputs[2].q_pos.value());
  EXPECT_NE(out.inputs[0].q_pos.value(), out.inputs[1].q_pos.value());
}

TEST(DecoderStep, NoPeLiftsRawBoxesAndNoFcUsesEncodingDirectly) {
  {
    Model m(small_config(GuideMode::no_pe));
    Tape t;
    auto out = m.run(t);
    auto lifted = m.params.lift(t, out.layers[0].boxes);
    EXPECT_EQ(out.inputs[1].q_pos.value(), lifted.value());
  }
  {
    Model m(small_config(GuideMode::no_fc));
    Tape t;
    auto out = m.run(t);
    EXPECT_EQ(out.inputs[1].q_pos.value(), posenc::encode_boxes(out.layers[0].boxes, m.cfg.guide().encoding).value());
  }
}

TEST(DecoderStep, NoFcRequiresMatchingWidths) {
  auto c = small_config(GuideMode::no_fc);
  c.d_model = 16;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  GuideConfig g{GuideMode::no_fc, {16, 10000}, false, false};
  EXPECT_THROW(g.validate(8), std::invalid_argument);
}

TEST(DecoderStep, BoxesStayInUnitInterval) {
  Model m(small_config(GuideMode::gqpos, 3));
  Tape t;
  auto out = m.run(t);
  for (const auto& l : out.layers)
    for (double v : l.boxes.value()) {
      EXPECT_GT(v, 0.0);
      EXPECT_LT(v, 1.0);
      EXPECT_EQ(std::clamp(v, 0.0, 1.0), v);
    }
}

TEST(DecoderStep, LogitDecompositionAtEveryLayer) {
  auto c = small_config(GuideMode::gqpos, 3);
  c.pos_after_projection = true;
  Model m(c);
  Tape t;
  auto out = m.run(t);
  for (std::size_t i = 0; i < c.num_layers; ++i) {
    const auto& mha = m.params.layers[i].cross_attn;
    Var k = attn::project_keys(t, mha, out.memory, t.constant(posenc::encode_grid(4, 4, 8)));
    // Query content as seen by cross-attention: output of the self-attention sub-block.
    const auto& st = out.inputs[i];
    Var qo = m.params.layers[i].norm1(t, add(st.q_content, attn::self_attention(st.q_content, st.q_pos, m.params.layers[i].self_attn)));
    Var qproj = mha.q(t, qo);
    auto lhs = multihead_logits(add(qproj, st.q_pos), k, 2, mha.logit_scale());
    auto rhs = add(multihead_logits(qproj, k, 2, mha.logit_scale()), multihead_logits(st.q_pos, k, 2, mha.logit_scale()));
    for (std::size_t e = 0; e < lhs.size(); ++e) EXPECT_NEAR(lhs.value()[e], rhs.value()[e], 1e-12);
    auto used = softmax_rows(lhs);
    for (std::size_t e = 0; e < used.size(); ++e) EXPECT_NEAR(used.value()[e], out.steps[i].record.weights.value()[e], 1e-12);
  }
}

TEST(DecoderStep, EndToEndGradients) {
  Model m(small_config(GuideMode::gqpos, 2));
  std::vector<NamedTensor> checked;
  for (auto& [name, t] : m.store.all()) checked.push_back({name, &t});
  auto r = grad_check(
      [&](Tape& t) {
        auto out = m.run(t);
        return add(probe(out.layers.back().boxes, 1), probe(out.layers.back().logits, 2));
      },
      checked, {.max_entries_per_tensor = 6, .sample_seed = 3});
  EXPECT_TRUE(r.passed(1e-4)) << r.worst.name << "[" << r.worst.index << "] " << r.max_rel_err;
}

TEST(DecoderStep, DetachGuideStopsGradientThroughQueryPosition) {
  auto c = small_config(GuideMode::gqpos, 2);
  auto grad_of_pe_path = [](const detect::HeadConfig& cfg) {
    Model m(cfg);
    m.store.zero_grad();
    Tape t;
    auto out = m.run(t);
    // Loss that only sees layer 1's attention, which depends on layer 0's boxes through q_pos.
    t.backward(probe(out.steps[1].record.weights));
    t.accumulate_param_grads();
    double g = 0;
    for (double v : m.params.box_mlp.layers.back().weight->grad()) g += std::abs(v);
    return g;
  };
  EXPECT_GT(grad_of_pe_path(c), 0.0);
  c.detach_guide = true;
  EXPECT_EQ(grad_of_pe_path(c), 0.0);
}

TEST(DecoderStep, SeparateGuideMlpDrivesQueryPosition) {
  auto c = small_config(GuideMode::gqpos, 2);
  c.separate_guide_mlp = true;
  Model m(c);
  init::uniform(*m.params.guide_mlp->layers.back().weight, *std::make_unique<RngStream>(4), -0.5, 0.5);
  Tape t;
  auto out = m.run(t);
  Var ref = out.inputs[0].reference;
  Var guide = predict_positions(t, out.steps[0].next.q_content, *m.params.guide_mlp, &ref);
  auto qp = guide_query_position(guide, c.guide().encoding, m.params.pe_proj);
  EXPECT_EQ(qp.value(), out.inputs[1].q_pos.value());
}

TEST(GuideMode, NamesRoundTrip) {
  for (auto mode : {GuideMode::gqpos, GuideMode::fixed, GuideMode::parallel, GuideMode::no_pe, GuideMode::no_fc})
    EXPECT_EQ(parse_guide_mode(to_string(mode)), mode);
  EXPECT_THROW(parse_guide_mode("iterative"), std::invalid_argument);
}
