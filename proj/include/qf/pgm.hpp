#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <stdexcept>
#include <string>

#include "qf/detect.hpp"

namespace qf::pgm {

/// Binary (P5) 8-bit greyscale; values are clamped to [0, 1] and scaled by 255.
inline std::string encode(const detect::GrayMap& m) {
  if (m.pixels.size() != m.h * m.w) throw std::invalid_argument("pgm: map size does not match h*w");
  std::string out = "P5\n" + std::to_string(m.w) + " " + std::to_string(m.h) + "\n255\n";
  for (double v : m.pixels) {
    const double c = std::isfinite(v) ? std::clamp(v, 0.0, 1.0) : 0.0;
    out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(255.0 * c))));
  }
  return out;
}

inline void write(const std::string& path, const detect::GrayMap& m) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write '" + path + "'");
  const std::string bytes = encode(m);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

struct Image {
  std::size_t w = 0, h = 0, maxval = 0;
  std::string pixels;
};

/// Strict reader for the files encode() produces (no comments).
inline Image decode(const std::string& bytes) {
  Image im;
  std::size_t pos = 0;
  auto token = [&]() {
    while (pos < bytes.size() && std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    std::size_t b = pos;
    while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    return bytes.substr(b, pos - b);
  };
  if (token() != "P5") throw std::runtime_error("pgm: missing P5 magic");
  im.w = std::stoul(token());
  im.h = std::stoul(token());
  im.maxval = std::stoul(token());
  if (pos >= bytes.size()) throw std::runtime_error("pgm: header not terminated");
  ++pos;
  im.pixels = bytes.substr(pos);
  if (im.pixels.size() != im.w * im.h) throw std::runtime_error("pgm: pixel count does not match header");
  return im;
}

}  // namespace qf::pgm
