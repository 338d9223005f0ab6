#include <gtest/gtest.h>

#include <cmath>

#include "qf/numerics/params.hpp"
#include "support.hpp"

using namespace qf;
using qf::testing::probe;
using qf::testing::random_tensor;

namespace {

constexpr double kGradTol = 1e-6;

GradCheckReport check_unary(const std::function<Var(const Var&)>& op, DualTensor x) {
  return grad_check([&](Tape& t) { return probe(op(t.param(x))); }, {{"x", &x}});
}

}  // namespace

TEST(Matmul, IdentityLeavesOperandUnchanged) {
  Tape t;
  RngStream rng(1);
  auto b = random_tensor({3, 3}, rng);
  DualTensor eye({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  auto out = matmul(t.constant(eye), t.constant(b));
  EXPECT_EQ(out.value(), b.values());
}

TEST(Matmul, HandArithmetic) {
  Tape t;
  auto out = matmul(t.constant(DualTensor::matrix(2, 2, {1, 2, 3, 4})), t.constant(DualTensor::matrix(2, 1, {0, 1})));
  EXPECT_EQ(out.value(), (std::vector<double>{2, 4}));
}

TEST(Matmul, RejectsInnerMismatchWithShapes) {
  Tape t;
  try {
    matmul(t.constant(DualTensor({2, 3})), t.constant(DualTensor({2, 3})));
    FAIL();
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("[2x3]"), std::string::npos) << e.what();
  }
}

TEST(Matmul, GradientsMatchFiniteDifferences) {
  RngStream rng(2);
  auto a = random_tensor({5, 4}, rng);
  auto b = random_tensor({4, 3}, rng);
  auto r = grad_check([&](Tape& t) { return probe(matmul(t.param(a), t.param(b))); }, {{"a", &a}, {"b", &b}});
  EXPECT_TRUE(r.passed(kGradTol)) << r.worst.name << " " << r.max_rel_err;
}

TEST(Matmul, TransposedVariantAgreesWithExplicitTranspose) {
  RngStream rng(3);
  auto a = random_tensor({3, 4}, rng);
  auto b = random_tensor({5, 4}, rng);
  Tape t;
  EXPECT_EQ(matmul_nt(t.constant(a), t.constant(b)).value(), matmul(t.constant(a), transpose(t.constant(b))).value());
  auto r = grad_check([&](Tape& tp) { return probe(matmul_nt(tp.param(a), tp.param(b))); }, {{"a", &a}, {"b", &b}});
  EXPECT_TRUE(r.passed(kGradTol));
}

TEST(Softmax, EqualLogitsAreUniform) {
  Tape t;
  auto s = softmax_rows(t.constant(DualTensor::matrix(1, 4, {0.3, 0.3, 0.3, 0.3})));
  for (double v : s.value()) EXPECT_EQ(v, 0.25);
}

TEST(Softmax, ShiftInvariantBitwise) {
  // Dyadic inputs keep x + c exact, so the max-shifted rows coincide bit for bit.
  RngStream rng(4);
  DualTensor x({3, 6});
  for (auto& v : x.values()) v = static_cast<double>(rng.below(384)) / 64.0 - 3.0;
  auto y = x;
  for (auto& v : y.values()) v += 8.0;
  Tape t;
  EXPECT_EQ(softmax_rows(t.constant(x)).value(), softmax_rows(t.constant(y)).value());
}

TEST(Softmax, RowsSumToOneAndStayInUnitInterval) {
  RngStream rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    auto x = random_tensor({4, 9}, rng, -30, 30);
    Tape t;
    auto s = softmax_rows(t.constant(x));
    for (std::size_t r = 0; r < 4; ++r) {
      double total = 0;
      for (std::size_t c = 0; c < 9; ++c) {
        const double v = s.value()[r * 9 + c];
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
        total += v;
      }
      EXPECT_NEAR(total, 1.0, 1e-12);
    }
  }
}

TEST(Softmax, LargeLogitsStayFinite) {
  Tape t;
  auto s = softmax_rows(t.constant(DualTensor::matrix(1, 3, {1000, 999, -1000})));
  EXPECT_TRUE(s.tensor().all_finite());
}

TEST(Softmax, GradientsMatchFiniteDifferences) {
  RngStream rng(6);
  auto r = check_unary(softmax_rows, random_tensor({3, 6}, rng, -2, 2));
  EXPECT_TRUE(r.passed(kGradTol)) << r.max_rel_err;
}

TEST(Bilinear, ConstantFieldIsPreserved) {
  Tape t;
  DualTensor c({3, 5}, 1.75);
  for (auto [oh, ow] : {std::pair{1, 1}, {3, 5}, {7, 2}, {11, 13}}) {
    auto out = bilinear_resize(t.constant(c), oh, ow);
    for (double v : out.value()) EXPECT_NEAR(v, 1.75, 1e-12);
  }
}

TEST(Bilinear, SameSizeIsIdentity) {
  Tape t;
  auto src = DualTensor::matrix(2, 2, {1, 2, 3, 4});
  EXPECT_EQ(bilinear_resize(t.constant(src), 2, 2).value(), src.values());
}

TEST(Bilinear, AffineFieldMatchesClampedOracle) {
  // Oracle: source sample (i, j) sits at pixel centre, f = 2x + 3y with x the
  // column and y the row coordinate; output centres map back through the
  // half-pixel rule and clamp to the source's outer centres.
  const std::size_t n = 4, m = 7;
  DualTensor src({n, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) src.at(i, j) = 2.0 * static_cast<double>(j) + 3.0 * static_cast<double>(i);
  Tape t;
  auto out = bilinear_resize(t.constant(src), m, m);
  auto back = [&](std::size_t o) {
    const double s = (static_cast<double>(o) + 0.5) * static_cast<double>(n) / static_cast<double>(m) - 0.5;
    return std::clamp(s, 0.0, static_cast<double>(n - 1));
  };
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < m; ++j) EXPECT_NEAR(out.value()[i * m + j], 2.0 * back(j) + 3.0 * back(i), 1e-12);
}

TEST(Bilinear, ZeroSizeOutputIsRejected) {
  Tape t;
  EXPECT_THROW(bilinear_resize(t.constant(DualTensor({2, 2})), 0, 3), ShapeError);
}

TEST(Bilinear, GradientsMatchFiniteDifferences) {
  RngStream rng(7);
  auto r = check_unary([](const Var& x) { return bilinear_resize(x, 5, 7); }, random_tensor({3, 4}, rng));
  EXPECT_TRUE(r.passed(kGradTol)) << r.max_rel_err;
  auto rows = check_unary([](const Var& x) { return bilinear_resize_rows(x, 2, 3, 4, 5); }, random_tensor({3, 6}, rng));
  EXPECT_TRUE(rows.passed(kGradTol)) << rows.max_rel_err;
}

TEST(Linear, ZeroWeightGivesBiasRows) {
  Tape t;
  auto out = linear(t.constant(DualTensor({3, 2}, 5.0)), t.constant(DualTensor({2, 4})), t.constant(DualTensor({4}, {1, 2, 3, 4})));
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(out.value()[r * 4 + c], c + 1.0);
}

TEST(Linear, IdentityWeightLeavesInputUnchanged) {
  RngStream rng(8);
  auto x = random_tensor({4, 3}, rng);
  Tape t;
  auto out = linear(t.constant(x), t.constant(DualTensor({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1})), t.constant(DualTensor({3})));
  EXPECT_EQ(out.value(), x.values());
}

TEST(Linear, GradientsMatchFiniteDifferences) {
  RngStream rng(9);
  auto x = random_tensor({4, 3}, rng);
  auto w = random_tensor({3, 2}, rng);
  auto b = random_tensor({2}, rng);
  auto r = grad_check([&](Tape& t) { return probe(linear(t.param(x), t.param(w), t.param(b))); }, {{"x", &x}, {"w", &w}, {"b", &b}});
  EXPECT_TRUE(r.passed(kGradTol)) << r.worst.name << " " << r.max_rel_err;
}

TEST(Linear, ShapeMismatchIsRejected) {
  Tape t;
  EXPECT_THROW(linear(t.constant(DualTensor({4, 3})), t.constant(DualTensor({3, 2})), t.constant(DualTensor({3}))), ShapeError);
}

TEST(Elementwise, ScalarValues) {
  Tape t;
  EXPECT_EQ(relu(t.constant(DualTensor({2}, {-1, 2}))).value(), (std::vector<double>{0, 2}));
  EXPECT_EQ(sigmoid(t.constant(DualTensor({1}, {0.0}))).item(), 0.5);
  EXPECT_EQ(sigmoid(0.0), 0.5);
}

TEST(Elementwise, SigmoidIsOpenUnitInterval) {
  Tape t;
  auto s = sigmoid(t.constant(DualTensor({5}, {-30, -1, 0, 1, 30})));
  for (double v : s.value()) {
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
}

TEST(Elementwise, AddRejectsShapeMismatch) {
  Tape t;
  EXPECT_THROW(add(t.constant(DualTensor({2, 2})), t.constant(DualTensor({2, 3}))), ShapeError);
}

TEST(Elementwise, CompositeChainGradients) {
  RngStream rng(10);
  auto a = random_tensor({3, 4}, rng);
  auto b = random_tensor({3, 4}, rng);
  auto r = grad_check(
      [&](Tape& t) {
        Var x = t.param(a), y = t.param(b);
        return probe(scale(add(sigmoid(mul(x, y)), relu(sub(x, scale(y, 0.3)))), 1.7));
      },
      {{"a", &a}, {"b", &b}});
  EXPECT_TRUE(r.passed(kGradTol)) << r.max_rel_err;
}

TEST(Kernels, LayoutAndNormGradients) {
  RngStream rng(11);
  auto x = random_tensor({6, 4}, rng);
  auto g = random_tensor({4}, rng, 0.5, 1.5);
  auto b = random_tensor({4}, rng);
  auto ln = grad_check([&](Tape& t) { return probe(layer_norm_rows(t.param(x), t.param(g), t.param(b))); },
                       {{"x", &x}, {"g", &g}, {"b", &b}});
  EXPECT_TRUE(ln.passed(1e-4)) << ln.max_rel_err;
  const std::vector<std::size_t> idx{4, 0, 4, 2};
  auto lay = grad_check(
      [&](Tape& t) {
        Var v = t.param(x);
        Var parts = concat_rows({slice_rows(v, 1, 2), gather_rows(v, idx)});
        return probe(add(pad_cols(slice_cols(parts, 1, 2), 4, 1), transpose(transpose(parts))));
      },
      {{"x", &x}});
  EXPECT_TRUE(lay.passed(kGradTol)) << lay.max_rel_err;
  auto pool = check_unary([](const Var& v) { return avg_pool2x2(v, 3, 2); }, x);
  EXPECT_TRUE(pool.passed(kGradTol)) << pool.max_rel_err;
  auto lg = check_unary([](const Var& v) { return logit(v); }, random_tensor({2, 3}, rng, 0.1, 0.9));
  EXPECT_TRUE(lg.passed(kGradTol)) << lg.max_rel_err;
  auto ab = check_unary([](const Var& v) { return abs(v); }, random_tensor({2, 3}, rng, 0.1, 0.9));
  EXPECT_TRUE(ab.passed(kGradTol));
}

TEST(Kernels, MultiheadGradients) {
  RngStream rng(12);
  auto q = random_tensor({3, 8}, rng);
  auto k = random_tensor({5, 8}, rng);
  auto v = random_tensor({5, 8}, rng);
  auto prior = random_tensor({6, 2}, rng);
  auto beta = random_tensor({3, 2}, rng);
  auto r = grad_check(
      [&](Tape& t) {
        Var l = multihead_logits(t.param(q), t.param(k), 2, 0.5);
        l = add_gated_prior(l, t.param(prior), t.param(beta), 3);
        return probe(multihead_mix(softmax_rows(l), t.param(v), 2));
      },
      {{"q", &q}, {"k", &k}, {"v", &v}, {"prior", &prior}, {"beta", &beta}});
  EXPECT_TRUE(r.passed(kGradTol)) << r.worst.name << " " << r.max_rel_err;
}

TEST(Kernels, MultiheadLogitsMatchPerHeadProducts) {
  RngStream rng(13);
  auto q = random_tensor({2, 4}, rng);
  auto k = random_tensor({3, 4}, rng);
  Tape t;
  auto l = multihead_logits(t.constant(q), t.constant(k), 2, 1.0);
  for (std::size_t h = 0; h < 2; ++h) {
    auto qh = slice_cols(t.constant(q), 2 * h, 2);
    auto kh = slice_cols(t.constant(k), 2 * h, 2);
    auto ref = matmul_nt(qh, kh);
    for (std::size_t i = 0; i < 2; ++i)
      for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(l.value()[(h * 2 + i) * 3 + j], ref.value()[i * 3 + j], 1e-15);
  }
}

TEST(AvgPool, FourByFourOfOneToSixteen) {
  DualTensor x({16, 1});
  for (std::size_t i = 0; i < 16; ++i) x[i] = static_cast<double>(i + 1);
  Tape t;
  EXPECT_EQ(avg_pool2x2(t.constant(x), 4, 4).value(), (std::vector<double>{3.5, 5.5, 11.5, 13.5}));
}

TEST(Kernels, DeterministicBitwise) {
  RngStream rng(14);
  auto x = random_tensor({4, 6}, rng);
  auto run = [&] {
    Tape t;
    return softmax_rows(bilinear_resize(matmul(t.constant(x), transpose(t.constant(x))), 7, 3)).value();
  };
  EXPECT_EQ(run(), run());
}

TEST(GradCheck, SquareAtThree) {
  DualTensor th({1}, {3.0});
  auto r = grad_check([&](Tape& t) {
    Var v = t.param(th);
    return sum(mul(v, v));
  }, {{"theta", &th}});
  EXPECT_NEAR(r.worst.analytic, 6.0, 0.0);
  EXPECT_NEAR(r.worst.numeric, 6.0, 1e-8);
}

TEST(GradCheck, SoftmaxOfLinearComposite) {
  RngStream rng(15);
  auto x = random_tensor({3, 4}, rng);
  auto w = random_tensor({4, 5}, rng);
  auto b = random_tensor({5}, rng);
  auto r = grad_check([&](Tape& t) { return probe(softmax_rows(linear(t.param(x), t.param(w), t.param(b)))); },
                      {{"x", &x}, {"w", &w}, {"b", &b}});
  EXPECT_TRUE(r.passed(1e-5)) << r.max_rel_err;
}

TEST(GradCheck, NonFiniteObjectiveIsReportedNotThrown) {
  DualTensor th({1}, {0.0});
  auto r = grad_check([&](Tape& t) { return scale(t.param(th), std::numeric_limits<double>::infinity()); }, {{"theta", &th}});
  EXPECT_FALSE(r.finite);
  EXPECT_FALSE(r.diagnostic.empty());
}

TEST(GradCheck, DetectsAWrongGradient) {
  DualTensor th({2}, {0.4, -0.2});
  auto r = grad_check(
      [&](Tape& t) {
        Var v = t.param(th);
        Var out = t.emit({1}, true);
        out.tensor()[0] = std::sin(v.value()[0]) + v.value()[1];
        t.record([v, out] { v.grad()[0] += out.grad()[0]; });  // deliberately wrong
        return out;
      },
      {{"theta", &th}});
  EXPECT_FALSE(r.passed(1e-4));
  EXPECT_EQ(r.worst.name, "theta");
}

TEST(Tape, ParamGradsAccumulateAcrossTapes) {
  DualTensor p({2}, {1.0, 2.0});
  p.zero_grad();
  for (int i = 0; i < 2; ++i) {
    Tape t;
    t.backward(sum(scale(t.param(p), 3.0)));
    t.accumulate_param_grads();
  }
  EXPECT_EQ(p.grad(), (std::vector<double>{6.0, 6.0}));
}

TEST(Tape, NoGradModeRecordsNothing) {
  DualTensor p({2}, {1.0, 2.0});
  Tape t(false);
  Var v = sum(mul(t.param(p), t.param(p)));
  EXPECT_FALSE(v.needs_grad());
  EXPECT_EQ(v.item(), 5.0);
}

TEST(Rng, SameSeedSameStream) {
  RngStream a(42), b(42), c(43);
  bool differs = false;
  for (int i = 0; i < 100; ++i) {
    const auto x = a.next_u64();
    EXPECT_EQ(x, b.next_u64());
    differs |= x != c.next_u64();
  }
  EXPECT_TRUE(differs);
}

TEST(Rng, UniformAndNormalMoments) {
  RngStream r(7);
  double s = 0, s2 = 0, n = 0, n2 = 0;
  const int N = 200000;
  for (int i = 0; i < N; ++i) {
    const double u = r.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    s += u;
    s2 += u * u;
    const double z = r.normal();
    n += z;
    n2 += z * z;
  }
  EXPECT_NEAR(s / N, 0.5, 0.005);
  EXPECT_NEAR(s2 / N - 0.25, 1.0 / 12.0, 0.005);
  EXPECT_NEAR(n / N, 0.0, 0.01);
  EXPECT_NEAR(n2 / N, 1.0, 0.02);
}

TEST(Params, StoreRejectsDuplicatesAndNamesLinearLayers) {
  ParamStore s;
  RngStream rng(1);
  auto lin = LinearParams::create(s, "proj", 3, 2, rng);
  EXPECT_TRUE(s.contains("proj.weight"));
  EXPECT_TRUE(s.contains("proj.bias"));
  EXPECT_EQ(s.scalar_count(), 8u);
  EXPECT_THROW(s.add("proj.weight", {1}), std::invalid_argument);
  EXPECT_THROW(s.get("missing"), std::out_of_range);
  Tape t;
  EXPECT_EQ(lin(t, t.constant(DualTensor({4, 3}))).shape(), (Shape{4, 2}));
}
