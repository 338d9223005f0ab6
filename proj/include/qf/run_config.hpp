#pragma once

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <system_error>
#include <vector>

#include "qf/detect.hpp"
#include "qf/matchloss.hpp"
#include "qf/toybench.hpp"

namespace qf {

/// Config problem tied to one field (or line) of the input.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Everything one experiment needs. The text form is flat `key = value`
/// lines with `#` comments; serialize() emits every key in a fixed order.
struct RunConfig {
  detect::HeadConfig head;
  bench::SceneConfig scene;
  bench::TrainConfig train;
  loss::CostWeights weights;
  std::size_t eval_scenes = 200;
  std::uint64_t eval_seed = 1;
  std::string out_dir;
  std::string checkpoint;

  void validate() const;
  std::string serialize() const;
  static RunConfig parse(const std::string& text);
  static RunConfig load(const std::string& path);
};

namespace config_detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::string format_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

inline double parse_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  auto [end, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || end != v.data() + v.size()) throw ConfigError(key + ": expected a number, got '" + v + "'");
  return out;
}

inline std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  auto [end, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || end != v.data() + v.size()) throw ConfigError(key + ": expected a nonnegative integer, got '" + v + "'");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true") return true;
  if (v == "false") return false;
  throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

struct Field {
  const char* key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

template <class T>
Field size_field(const char* key, T RunConfig::*group, std::size_t T::*member) {
  return {key, [=](const RunConfig& c) { return std::to_string(c.*group.*member); },
          [=](RunConfig& c, const std::string& v) { c.*group.*member = static_cast<std::size_t>(parse_uint(key, v)); }};
}

template <class T>
Field double_field(const char* key, T RunConfig::*group, double T::*member) {
  return {key, [=](const RunConfig& c) { return format_double(c.*group.*member); },
          [=](RunConfig& c, const std::string& v) { c.*group.*member = parse_double(key, v); }};
}

template <class T>
Field bool_field(const char* key, T RunConfig::*group, bool T::*member) {
  return {key, [=](const RunConfig& c) { return std::string(c.*group.*member ? "true" : "false"); },
          [=](RunConfig& c, const std::string& v) { c.*group.*member = parse_bool(key, v); }};
}

inline const std::vector<Field>& fields() {
  using detect::HeadConfig;
  using bench::SceneConfig;
  using bench::TrainConfig;
  using loss::CostWeights;
  static const std::vector<Field> f = {
      size_field("num_queries", &RunConfig::head, &HeadConfig::num_queries),
      size_field("num_layers", &RunConfig::head, &HeadConfig::num_layers),
      size_field("d", &RunConfig::head, &HeadConfig::d),
      size_field("heads", &RunConfig::head, &HeadConfig::heads),
      size_field("d_model", &RunConfig::head, &HeadConfig::d_model),
      {"num_classes", [](const RunConfig& c) { return std::to_string(c.head.num_classes); },
       [](RunConfig& c, const std::string& v) { c.head.num_classes = c.scene.num_classes = static_cast<std::size_t>(parse_uint("num_classes", v)); }},
      size_field("ffn_mult", &RunConfig::head, &HeadConfig::ffn_mult),
      double_field("pe_temperature", &RunConfig::head, &HeadConfig::pe_temperature),
      double_field("pe_scale", &RunConfig::head, &HeadConfig::pe_scale),
      {"mode", [](const RunConfig& c) { return std::string(gqpos::to_string(c.head.mode)); },
       [](RunConfig& c, const std::string& v) {
         try {
           c.head.mode = gqpos::parse_guide_mode(v);
         } catch (const std::invalid_argument& e) {
           throw ConfigError(std::string("mode: ") + e.what());
         }
       }},
      bool_field("detach_guide", &RunConfig::head, &HeadConfig::detach_guide),
      bool_field("separate_guide_mlp", &RunConfig::head, &HeadConfig::separate_guide_mlp),
      bool_field("pos_after_projection", &RunConfig::head, &HeadConfig::pos_after_projection),
      bool_field("multiscale", &RunConfig::head, &HeadConfig::multiscale),
      bool_field("feature_fusion", &RunConfig::head, &HeadConfig::feature_fusion),
      bool_field("attention_prior", &RunConfig::head, &HeadConfig::attention_prior),
      bool_field("level_embed", &RunConfig::head, &HeadConfig::level_embed),
      bool_field("beta_shared_heads", &RunConfig::head, &HeadConfig::beta_shared_heads),
      bool_field("encoder_layer", &RunConfig::head, &HeadConfig::encoder_layer),
      bool_field("aux_loss", &RunConfig::head, &HeadConfig::aux_loss),
      size_field("grid_h", &RunConfig::scene, &SceneConfig::height),
      size_field("grid_w", &RunConfig::scene, &SceneConfig::width),
      size_field("max_objects", &RunConfig::scene, &SceneConfig::max_objects),
      double_field("noise_sigma", &RunConfig::scene, &SceneConfig::noise_sigma),
      double_field("min_size", &RunConfig::scene, &SceneConfig::min_size),
      double_field("max_size", &RunConfig::scene, &SceneConfig::max_size),
      size_field("steps", &RunConfig::train, &TrainConfig::steps),
      double_field("lr", &RunConfig::train, &TrainConfig::lr),
      size_field("lr_drop_step", &RunConfig::train, &TrainConfig::lr_drop_step),
      double_field("lr_drop_factor", &RunConfig::train, &TrainConfig::lr_drop_factor),
      size_field("batch_size", &RunConfig::train, &TrainConfig::batch_size),
      {"seed", [](const RunConfig& c) { return std::to_string(c.train.seed); },
       [](RunConfig& c, const std::string& v) { c.train.seed = parse_uint("seed", v); }},
      double_field("weight_decay", &RunConfig::train, &TrainConfig::weight_decay),
      double_field("beta1", &RunConfig::train, &TrainConfig::beta1),
      double_field("beta2", &RunConfig::train, &TrainConfig::beta2),
      double_field("adam_eps", &RunConfig::train, &TrainConfig::adam_eps),
      double_field("grad_clip", &RunConfig::train, &TrainConfig::grad_clip),
      double_field("focal_alpha", &RunConfig::weights, &CostWeights::focal_alpha),
      double_field("focal_gamma", &RunConfig::weights, &CostWeights::focal_gamma),
      double_field("cost_class", &RunConfig::weights, &CostWeights::match_class),
      double_field("cost_l1", &RunConfig::weights, &CostWeights::match_l1),
      double_field("cost_giou", &RunConfig::weights, &CostWeights::match_giou),
      double_field("loss_class", &RunConfig::weights, &CostWeights::loss_class),
      double_field("loss_l1", &RunConfig::weights, &CostWeights::loss_l1),
      double_field("loss_giou", &RunConfig::weights, &CostWeights::loss_giou),
      {"eval_scenes", [](const RunConfig& c) { return std::to_string(c.eval_scenes); },
       [](RunConfig& c, const std::string& v) { c.eval_scenes = static_cast<std::size_t>(parse_uint("eval_scenes", v)); }},
      {"eval_seed", [](const RunConfig& c) { return std::to_string(c.eval_seed); },
       [](RunConfig& c, const std::string& v) { c.eval_seed = parse_uint("eval_seed", v); }},
      {"out_dir", [](const RunConfig& c) { return c.out_dir; }, [](RunConfig& c, const std::string& v) { c.out_dir = v; }},
      {"checkpoint", [](const RunConfig& c) { return c.checkpoint; }, [](RunConfig& c, const std::string& v) { c.checkpoint = v; }},
  };
  return f;
}

}  // namespace config_detail

inline void RunConfig::validate() const {
  try {
    head.validate();
    scene.validate();
    train.validate();
    weights.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (scene.num_classes != head.num_classes) throw ConfigError("num_classes: scene and head disagree");
  if (scene.max_objects > head.num_queries) throw ConfigError("num_queries: must be at least max_objects (" + std::to_string(scene.max_objects) + ")");
  if (eval_scenes == 0) throw ConfigError("eval_scenes: must be at least 1");
}

inline std::string RunConfig::serialize() const {
  std::string out;
  for (const auto& f : config_detail::fields()) out += std::string(f.key) + " = " + f.get(*this) + "\n";
  return out;
}

inline RunConfig RunConfig::parse(const std::string& text) {
  RunConfig c;
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  std::vector<std::string> seen;
  while (std::getline(is, line)) {
    ++lineno;
    if (auto h = line.find('#'); h != std::string::npos) line.resize(h);
    line = config_detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected 'key = value'");
    const std::string key = config_detail::trim(line.substr(0, eq));
    const std::string value = config_detail::trim(line.substr(eq + 1));
    const auto& fs = config_detail::fields();
    auto it = std::find_if(fs.begin(), fs.end(), [&](const auto& f) { return key == f.key; });
    if (it == fs.end()) throw ConfigError("line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    if (std::find(seen.begin(), seen.end(), key) != seen.end())
      throw ConfigError("line " + std::to_string(lineno) + ": duplicate key '" + key + "'");
    seen.push_back(key);
    it->set(c, value);
  }
  c.validate();
  return c;
}

inline RunConfig RunConfig::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config file '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

}  // namespace qf
