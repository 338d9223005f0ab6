#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "qf/numerics/kernels.hpp"
#include "qf/posenc.hpp"

namespace qf::loss {

using posenc::Box;

struct CostWeights {
  double match_class = 2.0;
  double match_l1 = 5.0;
  double match_giou = 2.0;
  double loss_class = 2.0;
  double loss_l1 = 5.0;
  double loss_giou = 2.0;
  double focal_alpha = 0.25;
  double focal_gamma = 2.0;

  void validate() const {
    for (double v : {match_class, match_l1, match_giou, loss_class, loss_l1, loss_giou, focal_alpha, focal_gamma})
      if (!(v >= 0.0)) throw std::invalid_argument("CostWeights: weights must be nonnegative");
  }
};

/// query_of_truth[g] is the query assigned to ground truth g.
struct MatchAssignment {
  std::vector<std::size_t> query_of_truth;
  double total_cost = 0.0;
};

/// Minimum-cost injective assignment of the g rows of cost[g x q] to columns (g <= q).
///
/// Shortest augmenting path with potentials, O(g^2 q). Column scans keep the
/// first strictly smaller candidate, so among equal reduced costs the lowest
/// query index is taken; the result is a deterministic function of the matrix.
/// The total is summed from the original entries in truth order.
inline MatchAssignment hungarian_match(const std::vector<std::vector<double>>& cost) {
  const std::size_t g = cost.size();
  MatchAssignment result;
  if (g == 0) return result;
  const std::size_t q = cost.front().size();
  if (g > q) throw std::invalid_argument("hungarian_match: " + std::to_string(g) + " truths but only " + std::to_string(q) + " queries");
  for (const auto& row : cost) {
    if (row.size() != q) throw std::invalid_argument("hungarian_match: ragged cost matrix");
    for (double c : row)
      if (!std::isfinite(c)) throw std::invalid_argument("hungarian_match: non-finite cost");
  }
  constexpr double inf = std::numeric_limits<double>::infinity();
  // 1-based potentials; column 0 is the virtual source.
  std::vector<double> u(g + 1, 0.0), v(q + 1, 0.0);
  std::vector<std::size_t> row_of_col(q + 1, 0), way(q + 1, 0);
  for (std::size_t i = 1; i <= g; ++i) {
    row_of_col[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(q + 1, inf);
    std::vector<char> used(q + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = row_of_col[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= q; ++j) {
        if (used[j]) continue;
        const double cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= q; ++j) {
        if (used[j]) {
          u[row_of_col[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (row_of_col[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      row_of_col[j0] = row_of_col[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  result.query_of_truth.assign(g, 0);
  for (std::size_t j = 1; j <= q; ++j)
    if (row_of_col[j] != 0) result.query_of_truth[row_of_col[j] - 1] = j - 1;
  for (std::size_t i = 0; i < g; ++i) result.total_cost += cost[i][result.query_of_truth[i]];
  return result;
}

// ---------------------------------------------------------------------------
// Generalized IoU on (x, y, h, w) boxes

struct Corners {
  double x0, y0, x1, y1;
};

inline Corners corners(const Box& b) { return {b[0] - b[3] / 2, b[1] - b[2] / 2, b[0] + b[3] / 2, b[1] + b[2] / 2}; }

inline double giou(const Corners& a, const Corners& b) {
  if (!(a.x1 > a.x0 && a.y1 > a.y0 && b.x1 > b.x0 && b.y1 > b.y0)) throw std::invalid_argument("giou: nonpositive box extent");
  const double iw = std::max(0.0, std::min(a.x1, b.x1) - std::max(a.x0, b.x0));
  const double ih = std::max(0.0, std::min(a.y1, b.y1) - std::max(a.y0, b.y0));
  const double inter = iw * ih;
  const double uni = (a.x1 - a.x0) * (a.y1 - a.y0) + (b.x1 - b.x0) * (b.y1 - b.y0) - inter;
  const double encl = (std::max(a.x1, b.x1) - std::min(a.x0, b.x0)) * (std::max(a.y1, b.y1) - std::min(a.y0, b.y0));
  return inter / uni - (encl - uni) / encl;
}

inline double giou(const Box& a, const Box& b) { return giou(corners(a), corners(b)); }

inline double iou(const Box& a, const Box& b) {
  const auto p = corners(a), t = corners(b);
  const double iw = std::max(0.0, std::min(p.x1, t.x1) - std::max(p.x0, t.x0));
  const double ih = std::max(0.0, std::min(p.y1, t.y1) - std::max(p.y0, t.y0));
  const double inter = iw * ih;
  const double uni = a[2] * a[3] + b[2] * b[3] - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

/// 1 - GIoU and its gradient with respect to the predicted box.
inline double giou_loss_with_grad(const Box& pred, const Box& truth, Box* grad) {
  const auto p = corners(pred), t = corners(truth);
  if (!(pred[2] > 0.0 && pred[3] > 0.0 && truth[2] > 0.0 && truth[3] > 0.0))
    throw std::invalid_argument("giou: nonpositive box extent");
  const double ix0 = std::max(p.x0, t.x0), ix1 = std::min(p.x1, t.x1);
  const double iy0 = std::max(p.y0, t.y0), iy1 = std::min(p.y1, t.y1);
  const double iw = std::max(0.0, ix1 - ix0), ih = std::max(0.0, iy1 - iy0);
  const double inter = iw * ih;
  const double ap = pred[2] * pred[3], at = truth[2] * truth[3];
  const double uni = ap + at - inter;
  const double ex0 = std::min(p.x0, t.x0), ex1 = std::max(p.x1, t.x1);
  const double ey0 = std::min(p.y0, t.y0), ey1 = std::max(p.y1, t.y1);
  const double ew = ex1 - ex0, eh = ey1 - ey0;
  const double encl = ew * eh;
  const double loss = 2.0 - inter / uni - uni / encl;
  if (grad) {
    // loss = 2 - inter/U - U/E with U = ap + at - inter
    const double d_inter = -(uni + inter) / (uni * uni) + 1.0 / encl;
    const double d_ap = inter / (uni * uni) - 1.0 / encl;
    const double d_encl = uni / (encl * encl);
    double gx0 = 0, gx1 = 0, gy0 = 0, gy1 = 0;
    if (iw > 0.0 && ih > 0.0) {
      if (p.x1 < t.x1) gx1 += d_inter * ih;
      if (p.x0 > t.x0) gx0 -= d_inter * ih;
      if (p.y1 < t.y1) gy1 += d_inter * iw;
      if (p.y0 > t.y0) gy0 -= d_inter * iw;
    }
    if (p.x1 > t.x1) gx1 += d_encl * eh;
    if (p.x0 < t.x0) gx0 -= d_encl * eh;
    if (p.y1 > t.y1) gy1 += d_encl * ew;
    if (p.y0 < t.y0) gy0 -= d_encl * ew;
    // x0 = cx - w/2, x1 = cx + w/2; area = h * w
    (*grad)[0] = gx0 + gx1;
    (*grad)[1] = gy0 + gy1;
    (*grad)[2] = 0.5 * (gy1 - gy0) + d_ap * pred[3];
    (*grad)[3] = 0.5 * (gx1 - gx0) + d_ap * pred[2];
  }
  return loss;
}

/// Sum over rows of 1 - GIoU(pred[i], truth[i]); pred is [k x 4].
inline Var giou_loss(const Var& pred, const std::vector<Box>& truth) {
  if (pred.shape().size() != 2 || pred.cols() != 4 || pred.rows() != truth.size())
    throw ShapeError("giou_loss: predictions " + to_string(pred.shape()) + " vs " + std::to_string(truth.size()) + " truths");
  Tape& t = pred.tape();
  Var out = t.emit({1}, pred.needs_grad());
  std::vector<double> grads(pred.size());
  double total = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const auto& v = pred.value();
    Box g{};
    total += giou_loss_with_grad({v[4 * i], v[4 * i + 1], v[4 * i + 2], v[4 * i + 3]}, truth[i], &g);
    std::copy(g.begin(), g.end(), grads.begin() + static_cast<std::ptrdiff_t>(4 * i));
  }
  out.tensor()[0] = total;
  if (out.needs_grad())
    t.record([pred, out, grads = std::move(grads)] {
      const double s = out.grad()[0];
      for (std::size_t i = 0; i < grads.size(); ++i) pred.grad()[i] += s * grads[i];
    });
  return out;
}

// ---------------------------------------------------------------------------
// Focal loss

inline double softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

/// Focal loss of one logit against a binary target, and its derivative.
inline double focal_term(double x, bool positive, double alpha, double gamma, double* dx) {
  const double p = sigmoid(x);
  const double pt = positive ? p : 1.0 - p;
  const double log_pt = positive ? -softplus(-x) : -softplus(x);
  const double at = positive ? alpha : 1.0 - alpha;
  const double q = 1.0 - pt;
  const double qg = std::pow(q, gamma);
  if (dx) {
    const double s = positive ? 1.0 : -1.0;
    *dx = at * s * (gamma * qg * pt * log_pt - qg * q);
  }
  return -at * qg * log_pt;
}

/// Sum of the sigmoid focal loss over logits[n x c] with 0/1 targets of the same shape.
inline Var sigmoid_focal_loss(const Var& logits, const std::vector<char>& targets, double alpha, double gamma) {
  if (targets.size() != logits.size()) throw ShapeError("sigmoid_focal_loss: target count differs from logits");
  Tape& t = logits.tape();
  Var out = t.emit({1}, logits.needs_grad());
  std::vector<double> grads(logits.size());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) total += focal_term(logits.value()[i], targets[i] != 0, alpha, gamma, &grads[i]);
  out.tensor()[0] = total;
  if (out.needs_grad())
    t.record([logits, out, grads = std::move(grads)] {
      const double s = out.grad()[0];
      for (std::size_t i = 0; i < grads.size(); ++i) logits.grad()[i] += s * grads[i];
    });
  return out;
}

/// Focal-style matching cost of assigning class c to a query with logit x.
inline double focal_class_cost(double x, double alpha, double gamma) {
  return focal_term(x, true, alpha, gamma, nullptr) - focal_term(x, false, alpha, gamma, nullptr);
}

// ---------------------------------------------------------------------------
// Composite detection loss

struct Truth {
  std::size_t cls;
  Box box;
};

inline void validate_truth(const std::vector<Truth>& truth, std::size_t num_classes) {
  for (const auto& t : truth) {
    if (!(t.box[2] > 0.0 && t.box[3] > 0.0)) throw std::invalid_argument("detection_loss: degenerate truth box (h or w <= 0)");
    if (t.cls >= num_classes) throw std::invalid_argument("detection_loss: truth class " + std::to_string(t.cls) + " out of range");
  }
}

struct Prediction {
  Var logits;  // [nq x C]
  Var boxes;   // [nq x 4]
};

struct LayerLoss {
  Var total;
  double focal = 0.0, l1 = 0.0, giou = 0.0;
  MatchAssignment match;
};

inline std::vector<std::vector<double>> matching_cost(const Prediction& pred, const std::vector<Truth>& truth, const CostWeights& w) {
  const std::size_t nq = pred.logits.rows(), nc = pred.logits.cols();
  std::vector<std::vector<double>> cost(truth.size(), std::vector<double>(nq));
  const auto& lv = pred.logits.value();
  const auto& bv = pred.boxes.value();
  for (std::size_t g = 0; g < truth.size(); ++g)
    for (std::size_t q = 0; q < nq; ++q) {
      const Box b{bv[4 * q], bv[4 * q + 1], bv[4 * q + 2], bv[4 * q + 3]};
      double l1 = 0.0;
      for (std::size_t k = 0; k < 4; ++k) l1 += std::abs(b[k] - truth[g].box[k]);
      cost[g][q] = w.match_class * focal_class_cost(lv[q * nc + truth[g].cls], w.focal_alpha, w.focal_gamma) + w.match_l1 * l1 +
                   w.match_giou * (1.0 - giou(b, truth[g].box));
    }
  return cost;
}

/// Matched loss of one prediction set, terms normalized by the truth count.
inline LayerLoss layer_loss(const Prediction& pred, const std::vector<Truth>& truth, const CostWeights& w,
                            const MatchAssignment* fixed_match = nullptr) {
  const std::size_t nq = pred.logits.rows(), nc = pred.logits.cols();
  LayerLoss out;
  out.match = fixed_match ? *fixed_match : hungarian_match(matching_cost(pred, truth, w));
  const double norm = 1.0 / static_cast<double>(std::max<std::size_t>(truth.size(), 1));
  std::vector<char> targets(nq * nc, 0);
  for (std::size_t g = 0; g < truth.size(); ++g) targets[out.match.query_of_truth[g] * nc + truth[g].cls] = 1;
  Var focal = scale(sigmoid_focal_loss(pred.logits, targets, w.focal_alpha, w.focal_gamma), norm);
  Var total = scale(focal, w.loss_class);
  out.focal = focal.item();
  if (!truth.empty()) {
    Var matched = gather_rows(pred.boxes, out.match.query_of_truth);
    DualTensor target({truth.size(), 4});
    std::vector<Box> tb;
    for (std::size_t g = 0; g < truth.size(); ++g) {
      std::copy(truth[g].box.begin(), truth[g].box.end(), target.values().begin() + static_cast<std::ptrdiff_t>(4 * g));
      tb.push_back(truth[g].box);
    }
    Var l1 = scale(sum(abs(sub(matched, pred.boxes.tape().constant(std::move(target))))), norm);
    Var gl = scale(giou_loss(matched, tb), norm);
    out.l1 = l1.item();
    out.giou = gl.item();
    total = add(total, add(scale(l1, w.loss_l1), scale(gl, w.loss_giou)));
  }
  out.total = total;
  return out;
}

struct DetectionLoss {
  Var total;  // mean over supervised layers
  double focal = 0.0, l1 = 0.0, giou = 0.0;  // unweighted, averaged over supervised layers
  std::vector<double> per_layer;              // weighted total of each layer
  std::vector<MatchAssignment> matches;
};

/// Loss over every layer's predictions (only the last when aux is false).
inline DetectionLoss detection_loss(const std::vector<Prediction>& layers, const std::vector<Truth>& truth, const CostWeights& w,
                                    bool aux = true) {
  if (layers.empty()) throw std::invalid_argument("detection_loss: no predictions");
  w.validate();
  validate_truth(truth, layers.front().logits.cols());
  if (truth.size() > layers.front().logits.rows())
    throw std::invalid_argument("detection_loss: more truths than queries");
  DetectionLoss out;
  const std::size_t first = aux ? 0 : layers.size() - 1;
  std::vector<Var> totals;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    auto ll = layer_loss(layers[i], truth, w);
    out.per_layer.push_back(ll.total.item());
    out.matches.push_back(ll.match);
    if (i < first) continue;
    totals.push_back(ll.total);
    out.focal += ll.focal;
    out.l1 += ll.l1;
    out.giou += ll.giou;
  }
  const double n = static_cast<double>(totals.size());
  Var acc = totals.front();
  for (std::size_t i = 1; i < totals.size(); ++i) acc = add(acc, totals[i]);
  out.total = scale(acc, 1.0 / n);
  out.focal /= n;
  out.l1 /= n;
  out.giou /= n;
  return out;
}

}  // namespace qf::loss
