#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "qf/numerics/tape.hpp"

namespace qf {

namespace detail {

inline Tape& tape_of(const Var& a) { return a.tape(); }

inline Tape& tape_of(const Var& a, const Var& b) {
  if (&a.tape() != &b.tape()) throw std::invalid_argument("operands recorded on different tapes");
  return a.tape();
}

inline void require_matrix(const Var& a, const char* op) {
  if (a.shape().size() != 2) throw ShapeError(std::string(op) + ": expected a matrix, got " + to_string(a.shape()));
}

inline void require_same(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
}

// Dense accumulating products, all with a contiguous innermost loop.

/// C[m x n] += A[m x k] * B[k x n]
inline void gemm_nn(const double* A, const double* B, double* C, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = C + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = A[i * k + p];
      const double* brow = B + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
}

/// C[k x n] += A[m x k]^T * B[m x n]
inline void gemm_tn(const double* A, const double* B, double* C, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* brow = B + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = A[i * k + p];
      double* crow = C + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
}

/// C[m x n] += A[m x k] * B[n x k]^T, via a transposed copy of B.
inline void gemm_nt(const double* A, const double* B, double* C, std::size_t m, std::size_t k, std::size_t n) {
  std::vector<double> bt(k * n);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = B[j * k + p];
  gemm_nn(A, bt.data(), C, m, k, n);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Products

/// a[m x k] * b[k x n].
inline Var matmul(const Var& a, const Var& b) {
  detail::require_matrix(a, "matmul");
  detail::require_matrix(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) throw ShapeError("matmul: inner dimensions differ, " + to_string(a.shape()) + " * " + to_string(b.shape()));
  Tape& t = detail::tape_of(a, b);
  Var out = t.emit({m, n}, a.needs_grad() || b.needs_grad());
  detail::gemm_nn(a.value().data(), b.value().data(), out.tensor().values().data(), m, k, n);
  if (out.needs_grad())
    t.record([a, b, out, m, k, n] {
      const double* dC = out.grad().data();
      if (a.needs_grad()) detail::gemm_nt(dC, b.value().data(), a.grad().data(), m, n, k);
      if (b.needs_grad()) detail::gemm_tn(a.value().data(), dC, b.grad().data(), m, k, n);
    });
  return out;
}

/// a[m x k] * b[n x k]^T.
inline Var matmul_nt(const Var& a, const Var& b) {
  detail::require_matrix(a, "matmul_nt");
  detail::require_matrix(b, "matmul_nt");
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  if (b.cols() != k) throw ShapeError("matmul_nt: inner dimensions differ, " + to_string(a.shape()) + " * " + to_string(b.shape()) + "^T");
  Tape& t = detail::tape_of(a, b);
  Var out = t.emit({m, n}, a.needs_grad() || b.needs_grad());
  detail::gemm_nt(a.value().data(), b.value().data(), out.tensor().values().data(), m, k, n);
  if (out.needs_grad())
    t.record([a, b, out, m, k, n] {
      const double* dC = out.grad().data();
      if (a.needs_grad()) detail::gemm_nn(dC, b.value().data(), a.grad().data(), m, n, k);
      if (b.needs_grad()) detail::gemm_tn(dC, a.value().data(), b.grad().data(), m, n, k);
    });
  return out;
}

inline Var transpose(const Var& a) {
  detail::require_matrix(a, "transpose");
  const std::size_t m = a.rows(), n = a.cols();
  Tape& t = detail::tape_of(a);
  Var out = t.emit({n, m}, a.needs_grad());
  auto& o = out.tensor().values();
  const auto& x = a.value();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) o[j * m + i] = x[i * n + j];
  if (out.needs_grad())
    t.record([a, out, m, n] {
      auto& da = a.grad();
      const auto& d = out.grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) da[i * n + j] += d[j * m + i];
    });
  return out;
}

/// Adds a length-n vector to every row of x[m x n].
inline Var add_row(const Var& x, const Var& v) {
  detail::require_matrix(x, "add_row");
  const std::size_t m = x.rows(), n = x.cols();
  if (v.size() != n) throw ShapeError("add_row: vector " + to_string(v.shape()) + " vs rows of " + to_string(x.shape()));
  Tape& t = detail::tape_of(x, v);
  Var out = t.emit({m, n}, x.needs_grad() || v.needs_grad());
  auto& o = out.tensor().values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) o[i * n + j] = x.value()[i * n + j] + v.value()[j];
  if (out.needs_grad())
    t.record([x, v, out, m, n] {
      const auto& d = out.grad();
      if (x.needs_grad())
        for (std::size_t i = 0; i < m * n; ++i) x.grad()[i] += d[i];
      if (v.needs_grad())
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) v.grad()[j] += d[i * n + j];
    });
  return out;
}

/// x[m x k] * weight[k x n] + bias[n].
inline Var linear(const Var& x, const Var& weight, const Var& bias) {
  detail::require_matrix(x, "linear");
  detail::require_matrix(weight, "linear");
  if (x.cols() != weight.rows())
    throw ShapeError("linear: input " + to_string(x.shape()) + " does not fit weight " + to_string(weight.shape()));
  if (bias.size() != weight.cols())
    throw ShapeError("linear: bias " + to_string(bias.shape()) + " does not fit weight " + to_string(weight.shape()));
  return add_row(matmul(x, weight), bias);
}

inline Var linear(const Var& x, const Var& weight) { return matmul(x, weight); }

// ---------------------------------------------------------------------------
// Elementwise

inline Var add(const Var& a, const Var& b) {
  detail::require_same(a, b, "add");
  Tape& t = detail::tape_of(a, b);
  Var out = t.emit(a.shape(), a.needs_grad() || b.needs_grad());
  auto& o = out.tensor().values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a.value()[i] + b.value()[i];
  if (out.needs_grad())
    t.record([a, b, out] {
      const auto& d = out.grad();
      if (a.needs_grad())
        for (std::size_t i = 0; i < d.size(); ++i) a.grad()[i] += d[i];
      if (b.needs_grad())
        for (std::size_t i = 0; i < d.size(); ++i) b.grad()[i] += d[i];
    });
  return out;
}

inline Var sub(const Var& a, const Var& b) {
  detail::require_same(a, b, "sub");
  Tape& t = detail::tape_of(a, b);
  Var out = t.emit(a.shape(), a.needs_grad() || b.needs_grad());
  auto& o = out.tensor().values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a.value()[i] - b.value()[i];
  if (out.needs_grad())
    t.record([a, b, out] {
      const auto& d = out.grad();
      if (a.needs_grad())
        for (std::size_t i = 0; i < d.size(); ++i) a.grad()[i] += d[i];
      if (b.needs_grad())
        for (std::size_t i = 0; i < d.size(); ++i) b.grad()[i] -= d[i];
    });
  return out;
}

inline Var mul(const Var& a, const Var& b) {
  detail::require_same(a, b, "mul");
  Tape& t = detail::tape_of(a, b);
  Var out = t.emit(a.shape(), a.needs_grad() || b.needs_grad());
  auto& o = out.tensor().values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a.value()[i] * b.value()[i];
  if (out.needs_grad())
    t.record([a, b, out] {
      const auto& d = out.grad();
      if (a.needs_grad())
        for (std::size_t i = 0; i < d.size(); ++i) a.grad()[i] += d[i] * b.value()[i];
      if (b.needs_grad())
        for (std::size_t i = 0; i < d.size(); ++i) b.grad()[i] += d[i] * a.value()[i];
    });
  return out;
}

inline Var scale(const Var& a, double s) {
  Tape& t = detail::tape_of(a);
  Var out = t.emit(a.shape(), a.needs_grad());
  auto& o = out.tensor().values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = s * a.value()[i];
  if (out.needs_grad())
    t.record([a, out, s] {
      for (std::size_t i = 0; i < out.size(); ++i) a.grad()[i] += s * out.grad()[i];
    });
  return out;
}

inline Var relu(const Var& a) {
  Tape& t = detail::tape_of(a);
  Var out = t.emit(a.shape(), a.needs_grad());
  auto& o = out.tensor().values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a.value()[i] > 0.0 ? a.value()[i] : 0.0;
  if (out.needs_grad())
    t.record([a, out] {
      for (std::size_t i = 0; i < out.size(); ++i)
        if (a.value()[i] > 0.0) a.grad()[i] += out.grad()[i];
    });
  return out;
}

inline Var abs(const Var& a) {
  Tape& t = detail::tape_of(a);
  Var out = t.emit(a.shape(), a.needs_grad());
  auto& o = out.tensor().values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = std::abs(a.value()[i]);
  if (out.needs_grad())
    t.record([a, out] {
      for (std::size_t i = 0; i < out.size(); ++i) {
        const double x = a.value()[i];
        a.grad()[i] += x > 0.0 ? out.grad()[i] : (x < 0.0 ? -out.grad()[i] : 0.0);
      }
    });
  return out;
}

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline Var sigmoid(const Var& a) {
  Tape& t = detail::tape_of(a);
  Var out = t.emit(a.shape(), a.needs_grad());
  auto& o = out.tensor().values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = sigmoid(a.value()[i]);
  if (out.needs_grad())
    t.record([a, out] {
      for (std::size_t i = 0; i < out.size(); ++i) {
        const double s = out.value()[i];
        a.grad()[i] += out.grad()[i] * s * (1.0 - s);
      }
    });
  return out;
}

/// Inverse sigmoid with the argument clamped to [eps, 1 - eps].
inline Var logit(const Var& a, double eps = 1e-5) {
  Tape& t = detail::tape_of(a);
  Var out = t.emit(a.shape(), a.needs_grad());
  auto& o = out.tensor().values();
  for (std::size_t i = 0; i < o.size(); ++i) {
    const double p = std::clamp(a.value()[i], eps, 1.0 - eps);
    o[i] = std::log(p / (1.0 - p));
  }
  if (out.needs_grad())
    t.record([a, out, eps] {
      for (std::size_t i = 0; i < out.size(); ++i) {
        const double p = a.value()[i];
        if (p <= eps || p >= 1.0 - eps) continue;
        a.grad()[i] += out.grad()[i] / (p * (1.0 - p));
      }
    });
  return out;
}

/// Value copy that blocks gradient flow.
inline Var detach(const Var& a) {
  DualTensor copy(a.shape(), a.value());
  return a.tape().constant(std::move(copy));
}

// ---------------------------------------------------------------------------
// Reductions and normalization

inline Var sum(const Var& a) {
  Tape& t = detail::tape_of(a);
  Var out = t.emit({1}, a.needs_grad());
  double s = 0.0;
  for (double v : a.value()) s += v;
  out.tensor()[0] = s;
  if (out.needs_grad())
    t.record([a, out] {
      const double g = out.grad()[0];
      for (auto& d : a.grad()) d += g;
    });
  return out;
}

inline Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

/// Row-wise softmax with per-row max subtraction.
inline Var softmax_rows(const Var& x) {
  detail::require_matrix(x, "softmax_rows");
  const std::size_t m = x.rows(), n = x.cols();
  Tape& t = detail::tape_of(x);
  Var out = t.emit({m, n}, x.needs_grad());
  auto& o = out.tensor().values();
  const auto& v = x.value();
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = v.data() + i * n;
    double* orow = o.data() + i * n;
    const double mx = *std::max_element(row, row + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      orow[j] = std::exp(row[j] - mx);
      z += orow[j];
    }
    const double inv = 1.0 / z;
    for (std::size_t j = 0; j < n; ++j) orow[j] *= inv;
  }
  if (out.needs_grad())
    t.record([x, out, m, n] {
      const auto& y = out.value();
      const auto& dy = out.grad();
      auto& dx = x.grad();
      for (std::size_t i = 0; i < m; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += dy[i * n + j] * y[i * n + j];
        for (std::size_t j = 0; j < n; ++j) dx[i * n + j] += y[i * n + j] * (dy[i * n + j] - dot);
      }
    });
  return out;
}

/// Per-row normalization to zero mean and unit variance, then gamma * xhat + beta.
inline Var layer_norm_rows(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5) {
  detail::require_matrix(x, "layer_norm_rows");
  const std::size_t m = x.rows(), n = x.cols();
  if (gamma.size() != n || beta.size() != n) throw ShapeError("layer_norm_rows: affine params do not fit " + to_string(x.shape()));
  Tape& t = detail::tape_of(x, gamma);
  Var out = t.emit({m, n}, x.needs_grad() || gamma.needs_grad() || beta.needs_grad());
  std::vector<double> xhat(m * n), inv_std(m);
  const auto& v = x.value();
  auto& o = out.tensor().values();
  for (std::size_t i = 0; i < m; ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += v[i * n + j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (v[i * n + j] - mu) * (v[i * n + j] - mu);
    var /= static_cast<double>(n);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[i * n + j] = (v[i * n + j] - mu) * inv_std[i];
      o[i * n + j] = gamma.value()[j] * xhat[i * n + j] + beta.value()[j];
    }
  }
  if (out.needs_grad())
    t.record([x, gamma, beta, out, m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)] {
      const auto& dy = out.grad();
      for (std::size_t i = 0; i < m; ++i) {
        double mean_dxh = 0.0, mean_dxh_xh = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
          const double g = dy[i * n + j];
          if (gamma.needs_grad()) gamma.grad()[j] += g * xhat[i * n + j];
          if (beta.needs_grad()) beta.grad()[j] += g;
          const double dxh = g * gamma.value()[j];
          mean_dxh += dxh;
          mean_dxh_xh += dxh * xhat[i * n + j];
        }
        if (!x.needs_grad()) continue;
        mean_dxh /= static_cast<double>(n);
        mean_dxh_xh /= static_cast<double>(n);
        for (std::size_t j = 0; j < n; ++j) {
          const double dxh = dy[i * n + j] * gamma.value()[j];
          x.grad()[i * n + j] += inv_std[i] * (dxh - mean_dxh - xhat[i * n + j] * mean_dxh_xh);
        }
      }
    });
  return out;
}

// ---------------------------------------------------------------------------
// Layout

inline Var slice_rows(const Var& x, std::size_t offset, std::size_t count) {
  detail::require_matrix(x, "slice_rows");
  if (offset + count > x.rows()) throw ShapeError("slice_rows: range past " + to_string(x.shape()));
  const std::size_t n = x.cols();
  Tape& t = detail::tape_of(x);
  Var out = t.emit({count, n}, x.needs_grad());
  std::copy_n(x.value().begin() + static_cast<std::ptrdiff_t>(offset * n), count * n, out.tensor().values().begin());
  if (out.needs_grad())
    t.record([x, out, offset, count, n] {
      for (std::size_t i = 0; i < count * n; ++i) x.grad()[offset * n + i] += out.grad()[i];
    });
  return out;
}

inline Var slice_cols(const Var& x, std::size_t offset, std::size_t count) {
  detail::require_matrix(x, "slice_cols");
  if (offset + count > x.cols()) throw ShapeError("slice_cols: range past " + to_string(x.shape()));
  const std::size_t m = x.rows(), n = x.cols();
  Tape& t = detail::tape_of(x);
  Var out = t.emit({m, count}, x.needs_grad());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < count; ++j) out.tensor().values()[i * count + j] = x.value()[i * n + offset + j];
  if (out.needs_grad())
    t.record([x, out, offset, count, m, n] {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < count; ++j) x.grad()[i * n + offset + j] += out.grad()[i * count + j];
    });
  return out;
}

/// Places x[m x k] at columns [offset, offset+k) of a zero m x total matrix.
inline Var pad_cols(const Var& x, std::size_t total, std::size_t offset) {
  detail::require_matrix(x, "pad_cols");
  const std::size_t m = x.rows(), k = x.cols();
  if (offset + k > total) throw ShapeError("pad_cols: " + to_string(x.shape()) + " does not fit " + std::to_string(total) + " columns");
  Tape& t = detail::tape_of(x);
  Var out = t.emit({m, total}, x.needs_grad());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < k; ++j) out.tensor().values()[i * total + offset + j] = x.value()[i * k + j];
  if (out.needs_grad())
    t.record([x, out, total, offset, m, k] {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < k; ++j) x.grad()[i * k + j] += out.grad()[i * total + offset + j];
    });
  return out;
}

inline Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no parts");
  const std::size_t n = parts.front().cols();
  std::size_t m = 0;
  bool needs = false;
  for (const auto& p : parts) {
    detail::require_matrix(p, "concat_rows");
    if (p.cols() != n) throw ShapeError("concat_rows: column mismatch " + to_string(p.shape()));
    m += p.rows();
    needs = needs || p.needs_grad();
  }
  Tape& t = detail::tape_of(parts.front());
  Var out = t.emit({m, n}, needs);
  std::size_t at = 0;
  for (const auto& p : parts) {
    std::copy(p.value().begin(), p.value().end(), out.tensor().values().begin() + static_cast<std::ptrdiff_t>(at));
    at += p.size();
  }
  if (needs)
    t.record([ps = std::vector<Var>(parts.begin(), parts.end()), out] {
      std::size_t at = 0;
      for (const auto& p : ps) {
        if (p.needs_grad())
          for (std::size_t i = 0; i < p.size(); ++i) p.grad()[i] += out.grad()[at + i];
        at += p.size();
      }
    });
  return out;
}

inline Var concat_rows(std::initializer_list<Var> parts) {
  return concat_rows(std::span<const Var>(parts.begin(), parts.size()));
}

inline Var gather_rows(const Var& x, std::span<const std::size_t> index) {
  detail::require_matrix(x, "gather_rows");
  const std::size_t n = x.cols();
  for (auto r : index)
    if (r >= x.rows()) throw ShapeError("gather_rows: row " + std::to_string(r) + " out of " + to_string(x.shape()));
  Tape& t = detail::tape_of(x);
  Var out = t.emit({index.size(), n}, x.needs_grad());
  for (std::size_t i = 0; i < index.size(); ++i)
    for (std::size_t j = 0; j < n; ++j) out.tensor().values()[i * n + j] = x.value()[index[i] * n + j];
  if (out.needs_grad())
    t.record([x, out, idx = std::vector<std::size_t>(index.begin(), index.end()), n] {
      for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::size_t j = 0; j < n; ++j) x.grad()[idx[i] * n + j] += out.grad()[i * n + j];
    });
  return out;
}

// ---------------------------------------------------------------------------
// Spatial resampling

/// Bilinear sample taps for one axis under the half-pixel-centre convention.
struct ResampleTap {
  std::size_t lo, hi;
  double w_hi;
};

inline std::vector<ResampleTap> half_pixel_taps(std::size_t in, std::size_t out) {
  std::vector<ResampleTap> taps(out);
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    double s = (static_cast<double>(o) + 0.5) * ratio - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(in - 1));
    const auto lo = static_cast<std::size_t>(std::floor(s));
    const std::size_t hi = std::min(lo + 1, in - 1);
    taps[o] = {lo, hi, s - static_cast<double>(lo)};
  }
  return taps;
}

/// Resizes every row of x[r x (h*w)], each read as an h x w grid, to oh x ow.
inline Var bilinear_resize_rows(const Var& x, std::size_t h, std::size_t w, std::size_t oh, std::size_t ow) {
  detail::require_matrix(x, "bilinear_resize_rows");
  if (h == 0 || w == 0) throw ShapeError("bilinear_resize: empty source grid");
  if (oh == 0 || ow == 0) throw ShapeError("bilinear_resize: zero-size output " + std::to_string(oh) + "x" + std::to_string(ow));
  if (x.cols() != h * w) throw ShapeError("bilinear_resize: row width " + std::to_string(x.cols()) + " is not " + std::to_string(h) + "x" + std::to_string(w));
  const std::size_t r = x.rows();
  Tape& t = detail::tape_of(x);
  Var out = t.emit({r, oh * ow}, x.needs_grad());
  auto ty = half_pixel_taps(h, oh);
  auto tx = half_pixel_taps(w, ow);
  const auto& v = x.value();
  auto& o = out.tensor().values();
  for (std::size_t k = 0; k < r; ++k) {
    const double* src = v.data() + k * h * w;
    double* dst = o.data() + k * oh * ow;
    for (std::size_t i = 0; i < oh; ++i) {
      const auto& a = ty[i];
      for (std::size_t j = 0; j < ow; ++j) {
        const auto& b = tx[j];
        const double top = src[a.lo * w + b.lo] * (1.0 - b.w_hi) + src[a.lo * w + b.hi] * b.w_hi;
        const double bot = src[a.hi * w + b.lo] * (1.0 - b.w_hi) + src[a.hi * w + b.hi] * b.w_hi;
        dst[i * ow + j] = top * (1.0 - a.w_hi) + bot * a.w_hi;
      }
    }
  }
  if (out.needs_grad())
    t.record([x, out, r, h, w, oh, ow, ty = std::move(ty), tx = std::move(tx)] {
      for (std::size_t k = 0; k < r; ++k) {
        double* dsrc = x.grad().data() + k * h * w;
        const double* d = out.grad().data() + k * oh * ow;
        for (std::size_t i = 0; i < oh; ++i) {
          const auto& a = ty[i];
          for (std::size_t j = 0; j < ow; ++j) {
            const auto& b = tx[j];
            const double g = d[i * ow + j];
            dsrc[a.lo * w + b.lo] += g * (1.0 - a.w_hi) * (1.0 - b.w_hi);
            dsrc[a.lo * w + b.hi] += g * (1.0 - a.w_hi) * b.w_hi;
            dsrc[a.hi * w + b.lo] += g * a.w_hi * (1.0 - b.w_hi);
            dsrc[a.hi * w + b.hi] += g * a.w_hi * b.w_hi;
          }
        }
      }
    });
  return out;
}

/// Resizes a single h x w map.
inline Var bilinear_resize(const Var& src, std::size_t out_h, std::size_t out_w) {
  detail::require_matrix(src, "bilinear_resize");
  const std::size_t h = src.rows(), w = src.cols();
  if (h == 0 || w == 0) throw ShapeError("bilinear_resize: empty source grid");
  Tape& t = detail::tape_of(src);
  // Single-row view of the same values, then back to a grid.
  Var flat = t.emit({1, h * w}, src.needs_grad());
  flat.tensor().values() = src.value();
  if (flat.needs_grad())
    t.record([src, flat] {
      for (std::size_t i = 0; i < flat.size(); ++i) src.grad()[i] += flat.grad()[i];
    });
  Var resized = bilinear_resize_rows(flat, h, w, out_h, out_w);
  resized.tensor().reshape({out_h, out_w});
  return resized;
}

/// 2x2 average pooling over a grid stored as x[(h*w) x c]; odd edges average the cells present.
inline Var avg_pool2x2(const Var& x, std::size_t h, std::size_t w) {
  detail::require_matrix(x, "avg_pool2x2");
  if (x.rows() != h * w) throw ShapeError("avg_pool2x2: " + to_string(x.shape()) + " is not a " + std::to_string(h) + "x" + std::to_string(w) + " grid");
  const std::size_t c = x.cols(), ph = (h + 1) / 2, pw = (w + 1) / 2;
  Tape& t = detail::tape_of(x);
  Var out = t.emit({ph * pw, c}, x.needs_grad());
  auto& o = out.tensor().values();
  for (std::size_t i = 0; i < ph; ++i)
    for (std::size_t j = 0; j < pw; ++j) {
      const std::size_t i1 = std::min(2 * i + 2, h), j1 = std::min(2 * j + 2, w);
      const double inv = 1.0 / static_cast<double>((i1 - 2 * i) * (j1 - 2 * j));
      for (std::size_t a = 2 * i; a < i1; ++a)
        for (std::size_t b = 2 * j; b < j1; ++b)
          for (std::size_t k = 0; k < c; ++k) o[(i * pw + j) * c + k] += x.value()[(a * w + b) * c + k];
      for (std::size_t k = 0; k < c; ++k) o[(i * pw + j) * c + k] *= inv;
    }
  if (out.needs_grad())
    t.record([x, out, h, w, c, ph, pw] {
      for (std::size_t i = 0; i < ph; ++i)
        for (std::size_t j = 0; j < pw; ++j) {
          const std::size_t i1 = std::min(2 * i + 2, h), j1 = std::min(2 * j + 2, w);
          const double inv = 1.0 / static_cast<double>((i1 - 2 * i) * (j1 - 2 * j));
          for (std::size_t a = 2 * i; a < i1; ++a)
            for (std::size_t b = 2 * j; b < j1; ++b)
              for (std::size_t k = 0; k < c; ++k) x.grad()[(a * w + b) * c + k] += inv * out.grad()[(i * pw + j) * c + k];
        }
    });
  return out;
}

// ---------------------------------------------------------------------------
// Multi-head attention primitives. Head-stacked logits use row index h*nq + q.

/// scale * per-head Q_h K_h^T, stacked by head: [(heads*nq) x nk].
inline Var multihead_logits(const Var& q, const Var& k, std::size_t heads, double scale) {
  detail::require_matrix(q, "multihead_logits");
  detail::require_matrix(k, "multihead_logits");
  const std::size_t nq = q.rows(), nk = k.rows(), d = q.cols();
  if (k.cols() != d) throw ShapeError("multihead_logits: width mismatch " + to_string(q.shape()) + " vs " + to_string(k.shape()));
  if (heads == 0 || d % heads != 0) throw ShapeError("multihead_logits: width " + std::to_string(d) + " not divisible by heads " + std::to_string(heads));
  const std::size_t dh = d / heads;
  Tape& t = detail::tape_of(q, k);
  Var out = t.emit({heads * nq, nk}, q.needs_grad() || k.needs_grad());
  const double* Q = q.value().data();
  const double* K = k.value().data();
  double* L = out.tensor().values().data();
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < nq; ++i) {
      const double* qi = Q + i * d + h * dh;
      double* row = L + (h * nq + i) * nk;
      for (std::size_t j = 0; j < nk; ++j) {
        const double* kj = K + j * d + h * dh;
        double s = 0.0;
        for (std::size_t p = 0; p < dh; ++p) s += qi[p] * kj[p];
        row[j] = scale * s;
      }
    }
  if (out.needs_grad())
    t.record([q, k, out, heads, nq, nk, d, dh, scale] {
      const double* Q = q.value().data();
      const double* K = k.value().data();
      const double* dL = out.grad().data();
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t i = 0; i < nq; ++i) {
          const double* row = dL + (h * nq + i) * nk;
          for (std::size_t j = 0; j < nk; ++j) {
            const double g = scale * row[j];
            if (g == 0.0) continue;
            if (q.needs_grad()) {
              double* dq = q.grad().data() + i * d + h * dh;
              const double* kj = K + j * d + h * dh;
              for (std::size_t p = 0; p < dh; ++p) dq[p] += g * kj[p];
            }
            if (k.needs_grad()) {
              double* dk = k.grad().data() + j * d + h * dh;
              const double* qi = Q + i * d + h * dh;
              for (std::size_t p = 0; p < dh; ++p) dk[p] += g * qi[p];
            }
          }
        }
    });
  return out;
}

/// Per-head weights[(heads*nq) x nk] applied to the matching column block of v[nk x d].
inline Var multihead_mix(const Var& weights, const Var& v, std::size_t heads) {
  detail::require_matrix(weights, "multihead_mix");
  detail::require_matrix(v, "multihead_mix");
  const std::size_t nk = v.rows(), d = v.cols();
  if (heads == 0 || d % heads != 0) throw ShapeError("multihead_mix: width " + std::to_string(d) + " not divisible by heads");
  if (weights.cols() != nk || weights.rows() % heads != 0)
    throw ShapeError("multihead_mix: weights " + to_string(weights.shape()) + " do not fit values " + to_string(v.shape()));
  const std::size_t nq = weights.rows() / heads, dh = d / heads;
  Tape& t = detail::tape_of(weights, v);
  Var out = t.emit({nq, d}, weights.needs_grad() || v.needs_grad());
  const double* W = weights.value().data();
  const double* V = v.value().data();
  double* O = out.tensor().values().data();
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < nq; ++i) {
      const double* wrow = W + (h * nq + i) * nk;
      double* orow = O + i * d + h * dh;
      for (std::size_t j = 0; j < nk; ++j) {
        const double a = wrow[j];
        const double* vj = V + j * d + h * dh;
        for (std::size_t p = 0; p < dh; ++p) orow[p] += a * vj[p];
      }
    }
  if (out.needs_grad())
    t.record([weights, v, out, heads, nq, nk, d, dh] {
      const double* W = weights.value().data();
      const double* V = v.value().data();
      const double* dO = out.grad().data();
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t i = 0; i < nq; ++i) {
          const double* go = dO + i * d + h * dh;
          for (std::size_t j = 0; j < nk; ++j) {
            const double* vj = V + j * d + h * dh;
            if (weights.needs_grad()) {
              double s = 0.0;
              for (std::size_t p = 0; p < dh; ++p) s += go[p] * vj[p];
              weights.grad()[(h * nq + i) * nk + j] += s;
            }
            if (v.needs_grad()) {
              const double a = W[(h * nq + i) * nk + j];
              double* dv = v.grad().data() + j * d + h * dh;
              for (std::size_t p = 0; p < dh; ++p) dv[p] += a * go[p];
            }
          }
        }
    });
  return out;
}

/// logits[(heads*nq) x N] with beta[q, h] * prior[(h*nq+q), m] added at column offset + m.
/// A beta of width 1 is shared by all heads.
inline Var add_gated_prior(const Var& logits, const Var& prior, const Var& beta, std::size_t offset) {
  detail::require_matrix(logits, "add_gated_prior");
  detail::require_matrix(prior, "add_gated_prior");
  detail::require_matrix(beta, "add_gated_prior");
  const std::size_t rows = logits.rows(), n = logits.cols(), m = prior.cols();
  const std::size_t nq = beta.rows(), bw = beta.cols();
  if (prior.rows() != rows || offset + m > n) throw ShapeError("add_gated_prior: prior " + to_string(prior.shape()) + " does not fit logits " + to_string(logits.shape()));
  if (nq == 0 || rows % nq != 0) throw ShapeError("add_gated_prior: beta " + to_string(beta.shape()) + " does not fit logits");
  const std::size_t heads = rows / nq;
  if (bw != 1 && bw != heads) throw ShapeError("add_gated_prior: beta width " + std::to_string(bw) + " is neither 1 nor heads");
  Tape& t = detail::tape_of(logits, prior);
  Var out = t.emit({rows, n}, logits.needs_grad() || prior.needs_grad() || beta.needs_grad());
  auto& o = out.tensor().values();
  o = logits.value();
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < nq; ++i) {
      const double b = beta.value()[i * bw + (bw == 1 ? 0 : h)];
      const std::size_t r = h * nq + i;
      for (std::size_t j = 0; j < m; ++j) o[r * n + offset + j] += b * prior.value()[r * m + j];
    }
  if (out.needs_grad())
    t.record([logits, prior, beta, out, heads, nq, bw, n, m, offset] {
      const auto& d = out.grad();
      if (logits.needs_grad())
        for (std::size_t i = 0; i < d.size(); ++i) logits.grad()[i] += d[i];
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t i = 0; i < nq; ++i) {
          const std::size_t bi = i * bw + (bw == 1 ? 0 : h);
          const double b = beta.value()[bi];
          const std::size_t r = h * nq + i;
          double db = 0.0;
          for (std::size_t j = 0; j < m; ++j) {
            const double g = d[r * n + offset + j];
            if (prior.needs_grad()) prior.grad()[r * m + j] += b * g;
            db += g * prior.value()[r * m + j];
          }
          if (beta.needs_grad()) beta.grad()[bi] += db;
        }
    });
  return out;
}

}  // namespace qf
