#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "qf/numerics/params.hpp"

namespace qf::ckpt {

// Layout, all integers little-endian:
//   "QFCK" | u32 version | u64 config bytes | config text
//   u32 tensor count, then per tensor:
//   u32 name bytes | name | u32 rank | u64 dims[rank] | f64 values[prod(dims)]

inline constexpr char kMagic[4] = {'Q', 'F', 'C', 'K'};
inline constexpr std::uint32_t kVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

struct Checkpoint {
  std::string config_text;
  std::vector<std::pair<std::string, DualTensor>> tensors;
};

namespace detail {

template <class T>
void put(std::string& out, T v) {
  char b[sizeof(T)];
  std::memcpy(b, &v, sizeof(T));
  out.append(b, sizeof(T));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : b_(bytes) {}

  template <class T>
  T get(const char* what) {
    need(sizeof(T), what);
    T v;
    std::memcpy(&v, b_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::string bytes(std::size_t n, const char* what) {
    need(n, what);
    std::string s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == b_.size(); }

 private:
  void need(std::size_t n, const char* what) const {
    if (b_.size() - pos_ < n)
      throw CheckpointError(std::string("checkpoint truncated while reading ") + what + " at byte " + std::to_string(pos_));
  }
  const std::string& b_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode(const std::string& config_text, const ParamStore& store) {
  std::string out(kMagic, 4);
  detail::put<std::uint32_t>(out, kVersion);
  detail::put<std::uint64_t>(out, config_text.size());
  out += config_text;
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(store.all().size()));
  for (const auto& [name, t] : store.all()) {
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) detail::put<std::uint64_t>(out, d);
    for (double v : t.values()) detail::put<double>(out, v);
  }
  return out;
}

inline Checkpoint decode(const std::string& bytes) {
  detail::Reader r(bytes);
  if (r.bytes(4, "magic") != std::string(kMagic, 4)) throw CheckpointError("not a checkpoint file (bad magic)");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kVersion)
    throw CheckpointError("checkpoint version mismatch: expected " + std::to_string(kVersion) + ", found " + std::to_string(version));
  Checkpoint c;
  const auto cfg_len = r.get<std::uint64_t>("config length");
  c.config_text = r.bytes(cfg_len, "config text");
  const auto count = r.get<std::uint32_t>("tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto nlen = r.get<std::uint32_t>("name length");
    std::string name = r.bytes(nlen, "tensor name");
    const auto rank = r.get<std::uint32_t>("rank");
    Shape shape;
    for (std::uint32_t k = 0; k < rank; ++k) shape.push_back(static_cast<std::size_t>(r.get<std::uint64_t>("dims")));
    std::vector<double> values(element_count(shape));
    for (auto& v : values) v = r.get<double>("values");
    c.tensors.emplace_back(std::move(name), DualTensor(shape, std::move(values)));
  }
  if (!r.done()) throw CheckpointError("checkpoint has trailing bytes");
  return c;
}

/// Copies checkpoint values into a store with exactly the same names and shapes.
inline void load_into(const Checkpoint& c, ParamStore& store) {
  if (c.tensors.size() != store.all().size())
    throw CheckpointError("checkpoint holds " + std::to_string(c.tensors.size()) + " tensors, model expects " +
                          std::to_string(store.all().size()));
  for (const auto& [name, t] : c.tensors) {
    if (!store.contains(name)) throw CheckpointError("checkpoint tensor '" + name + "' is not a model parameter");
    auto& dst = store.get(name);
    if (dst.shape() != t.shape())
      throw CheckpointError("checkpoint tensor '" + name + "' has shape " + to_string(t.shape()) + ", model expects " + to_string(dst.shape()));
    dst.values() = t.values();
  }
}

inline void save_file(const std::string& path, const std::string& config_text, const ParamStore& store) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot write checkpoint '" + path + "'");
  const std::string bytes = encode(config_text, store);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("short write to checkpoint '" + path + "'");
}

inline Checkpoint load_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot read checkpoint '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode(ss.str());
}

}  // namespace qf::ckpt
