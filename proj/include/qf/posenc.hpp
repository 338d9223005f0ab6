#pragma once

#include <array>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "qf/numerics/kernels.hpp"

namespace qf::posenc {

/// Normalized box: centre x, centre y, height, width, all in [0, 1].
using Box = std::array<double, 4>;

struct BoxEncodingConfig {
  std::size_t d_model = 64;
  double temperature = 10000.0;
  /// Multiplies pos inside the sinusoid. 1 is the plain ladder; 2*pi is the
  /// common alternative that spreads [0, 1] over a full period.
  double scale = 1.0;

  void validate() const {
    if (d_model == 0 || d_model % 8 != 0)
      throw std::invalid_argument("BoxEncodingConfig: d_model " + std::to_string(d_model) + " must be a positive multiple of 8");
    if (!(temperature > 0.0)) throw std::invalid_argument("BoxEncodingConfig: temperature must be positive");
    if (!(scale > 0.0)) throw std::invalid_argument("BoxEncodingConfig: scale must be positive");
  }
  std::size_t segment() const { return d_model / 4; }
};

/// Angular frequency of sin/cos pair j in a ladder of `dims` entries.
inline double frequency(std::size_t j, std::size_t dims, double temperature) {
  return 1.0 / std::pow(temperature, static_cast<double>(2 * j) / static_cast<double>(dims));
}

/// Writes the interleaved ladder [sin(s p f_0), cos(s p f_0), sin(s p f_1), ...] into out.
inline void encode_scalar_into(double pos, std::size_t dims, double temperature, double* out, double scale = 1.0) {
  for (std::size_t j = 0; j < dims / 2; ++j) {
    const double a = scale * pos * frequency(j, dims, temperature);
    out[2 * j] = std::sin(a);
    out[2 * j + 1] = std::cos(a);
  }
}

inline std::vector<double> encode_scalar(double pos, std::size_t dims, double temperature = 10000.0, double scale = 1.0) {
  if (dims == 0 || dims % 2 != 0) throw std::invalid_argument("encode_scalar: dims " + std::to_string(dims) + " must be even");
  std::vector<double> out(dims);
  encode_scalar_into(pos, dims, temperature, out.data(), scale);
  return out;
}

inline void check_box(const Box& b) {
  for (double v : b)
    if (!(v >= 0.0 && v <= 1.0))
      throw std::out_of_range("encode_box: coordinate " + std::to_string(v) + " outside [0, 1]; normalize first");
}

/// [enc(x) | enc(y) | enc(h) | enc(w)], each d_model/4 wide.
inline std::vector<double> encode_box(const Box& box, const BoxEncodingConfig& cfg) {
  cfg.validate();
  check_box(box);
  std::vector<double> out(cfg.d_model);
  const std::size_t seg = cfg.segment();
  for (std::size_t c = 0; c < 4; ++c) encode_scalar_into(box[c], seg, cfg.temperature, out.data() + c * seg, cfg.scale);
  return out;
}

/// Recorded encode_box over every row of boxes[n x 4]; gradients flow back to the coordinates.
inline Var encode_boxes(const Var& boxes, const BoxEncodingConfig& cfg) {
  cfg.validate();
  if (boxes.shape().size() != 2 || boxes.cols() != 4) throw ShapeError("encode_boxes: expected [n x 4], got " + to_string(boxes.shape()));
  const std::size_t n = boxes.rows(), seg = cfg.segment(), d = cfg.d_model;
  for (std::size_t i = 0; i < n; ++i)
    check_box({boxes.value()[i * 4], boxes.value()[i * 4 + 1], boxes.value()[i * 4 + 2], boxes.value()[i * 4 + 3]});
  Tape& t = boxes.tape();
  Var out = t.emit({n, d}, boxes.needs_grad());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < 4; ++c)
      encode_scalar_into(boxes.value()[i * 4 + c], seg, cfg.temperature, out.tensor().values().data() + i * d + c * seg, cfg.scale);
  if (out.needs_grad())
    t.record([boxes, out, n, seg, d, temp = cfg.temperature, sc = cfg.scale] {
      const auto& y = out.value();
      const auto& dy = out.grad();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < 4; ++c) {
          double g = 0.0;
          const std::size_t base = i * d + c * seg;
          for (std::size_t j = 0; j < seg / 2; ++j) {
            const double f = sc * frequency(j, seg, temp);
            // d sin(pf)/dp = f cos(pf); d cos(pf)/dp = -f sin(pf)
            g += dy[base + 2 * j] * f * y[base + 2 * j + 1] - dy[base + 2 * j + 1] * f * y[base + 2 * j];
          }
          boxes.grad()[i * 4 + c] += g;
        }
    });
  return out;
}

/// Feature-side encoding of an h x w grid: row r*w+c holds
/// [enc((r+0.5)/h) | enc((c+0.5)/w)], each dims/2 wide.
inline DualTensor encode_grid(std::size_t h, std::size_t w, std::size_t dims, double temperature = 10000.0, double scale = 1.0) {
  if (dims == 0 || dims % 4 != 0) throw std::invalid_argument("encode_grid: dims " + std::to_string(dims) + " must be divisible by 4");
  if (h == 0 || w == 0) throw std::invalid_argument("encode_grid: empty grid");
  DualTensor out({h * w, dims});
  const std::size_t half = dims / 2;
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c) {
      double* row = out.values().data() + (r * w + c) * dims;
      encode_scalar_into((static_cast<double>(r) + 0.5) / static_cast<double>(h), half, temperature, row, scale);
      encode_scalar_into((static_cast<double>(c) + 0.5) / static_cast<double>(w), half, temperature, row + half, scale);
    }
  return out;
}

}  // namespace qf::posenc
