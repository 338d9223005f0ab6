#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "qf/detect.hpp"
#include "qf/matchloss.hpp"
#include "qf/numerics/rng.hpp"

namespace qf::bench {

using posenc::Box;

// ---------------------------------------------------------------------------
// Scenes

struct SceneConfig {
  std::size_t height = 16;
  std::size_t width = 16;
  std::size_t num_classes = 3;
  std::size_t max_objects = 4;
  double noise_sigma = 0.05;
  double min_size = 0.15;
  double max_size = 0.6;

  void validate() const {
    if (height == 0 || width == 0 || height % 2 || width % 2) throw std::invalid_argument("grid_h/grid_w: must be positive and even");
    if (num_classes == 0) throw std::invalid_argument("num_classes: must be at least 1");
    if (max_objects == 0) throw std::invalid_argument("max_objects: must be at least 1");
    if (!(min_size > 0.0 && min_size <= max_size && max_size <= 1.0)) throw std::invalid_argument("object size range must satisfy 0 < min <= max <= 1");
    if (!(noise_sigma >= 0.0)) throw std::invalid_argument("noise_sigma: must be nonnegative");
  }
};

struct SceneObject {
  std::size_t cls = 0;
  Box box{};  // x, y, h, w
};

/// Boxes plus the rendered class-indicator field, laid out [class][row][col].
struct SceneSpec {
  std::size_t height = 0, width = 0, num_classes = 0;
  std::vector<SceneObject> objects;
  std::vector<double> render;

  double pixel(std::size_t cls, std::size_t r, std::size_t c) const { return render[(cls * height + r) * width + c]; }
  std::vector<loss::Truth> truth() const {
    std::vector<loss::Truth> t;
    for (const auto& o : objects) t.push_back({o.cls, o.box});
    return t;
  }
};

/// Namespaces of scene seeds: the top bit separates training from evaluation.
enum class SeedSpace : std::uint64_t { train = 0, eval = 1 };

inline std::uint64_t scene_seed(SeedSpace space, std::uint64_t run_seed, std::uint64_t index) {
  const std::uint64_t h = mix64(mix64(run_seed) ^ mix64(index + 0x632be59bd9b4e019ULL));
  return (h >> 1) | (static_cast<std::uint64_t>(space) << 63);
}

inline SeedSpace seed_space(std::uint64_t scene_seed) { return static_cast<SeedSpace>(scene_seed >> 63); }

inline void render_scene(SceneSpec& s, RngStream& rng, double noise_sigma) {
  s.render.assign(s.num_classes * s.height * s.width, 0.0);
  for (const auto& o : s.objects) {
    const double x0 = o.box[0] - o.box[3] / 2, x1 = o.box[0] + o.box[3] / 2;
    const double y0 = o.box[1] - o.box[2] / 2, y1 = o.box[1] + o.box[2] / 2;
    for (std::size_t r = 0; r < s.height; ++r)
      for (std::size_t c = 0; c < s.width; ++c) {
        const double py = (static_cast<double>(r) + 0.5) / static_cast<double>(s.height);
        const double px = (static_cast<double>(c) + 0.5) / static_cast<double>(s.width);
        if (px >= x0 && px <= x1 && py >= y0 && py <= y1) s.render[(o.cls * s.height + r) * s.width + c] = 1.0;
      }
  }
  if (noise_sigma > 0.0)
    for (auto& v : s.render) v += rng.normal(0.0, noise_sigma);
}

/// 1..max_objects axis-aligned rectangles; a candidate overlapping an earlier
/// one at IoU > 0.7 is redrawn, at most 20 times, and then kept.
inline SceneSpec generate_scene(RngStream& rng, const SceneConfig& cfg = {}) {
  cfg.validate();
  SceneSpec s;
  s.height = cfg.height;
  s.width = cfg.width;
  s.num_classes = cfg.num_classes;
  const std::size_t count = 1 + rng.below(cfg.max_objects);
  for (std::size_t i = 0; i < count; ++i) {
    SceneObject o;
    for (int attempt = 0; attempt <= 20; ++attempt) {
      o.cls = rng.below(cfg.num_classes);
      const double h = rng.uniform(cfg.min_size, cfg.max_size);
      const double w = rng.uniform(cfg.min_size, cfg.max_size);
      o.box = {rng.uniform(w / 2, 1.0 - w / 2), rng.uniform(h / 2, 1.0 - h / 2), h, w};
      const bool clash = std::any_of(s.objects.begin(), s.objects.end(), [&](const SceneObject& e) { return loss::iou(e.box, o.box) > 0.7; });
      if (!clash) break;
    }
    s.objects.push_back(o);
  }
  render_scene(s, rng, cfg.noise_sigma);
  return s;
}

inline SceneSpec scene_at(SeedSpace space, std::uint64_t run_seed, std::uint64_t index, const SceneConfig& cfg) {
  RngStream rng(scene_seed(space, run_seed, index));
  return generate_scene(rng, cfg);
}

/// One scene per line: "H W" then "class x y h w" per object.
inline std::string serialize_scene(const SceneSpec& s) {
  std::ostringstream os;
  os.precision(17);
  os << s.height << ' ' << s.width;
  for (const auto& o : s.objects) os << ' ' << o.cls << ' ' << o.box[0] << ' ' << o.box[1] << ' ' << o.box[2] << ' ' << o.box[3];
  return os.str();
}

/// Parses the boxes of a serialized scene; the render is not part of the line.
inline SceneSpec parse_scene(const std::string& line, std::size_t num_classes = 3) {
  std::istringstream is(line);
  SceneSpec s;
  s.num_classes = num_classes;
  if (!(is >> s.height >> s.width)) throw std::invalid_argument("scene line: missing resolution");
  SceneObject o;
  while (is >> o.cls) {
    if (!(is >> o.box[0] >> o.box[1] >> o.box[2] >> o.box[3])) throw std::invalid_argument("scene line: truncated object tuple");
    s.objects.push_back(o);
  }
  if (!is.eof()) throw std::invalid_argument("scene line: unparsable token");
  return s;
}

// ---------------------------------------------------------------------------
// Featurizer

struct FeaturizerParams {
  LinearParams high;  // 3x3 neighbourhood of every fine cell
  LinearParams low;   // 2x2 block, stride 2

  static FeaturizerParams create(ParamStore& store, std::size_t num_classes, std::size_t d, RngStream& rng) {
    return {LinearParams::create(store, "featurizer.high", 9 * num_classes, d, rng),
            LinearParams::create(store, "featurizer.low", 4 * num_classes, d, rng)};
  }
};

inline DualTensor high_patches(const SceneSpec& s) {
  const std::size_t H = s.height, W = s.width, C = s.num_classes;
  DualTensor p({H * W, 9 * C});
  for (std::size_t r = 0; r < H; ++r)
    for (std::size_t c = 0; c < W; ++c) {
      double* row = p.values().data() + (r * W + c) * 9 * C;
      for (std::size_t k = 0; k < C; ++k)
        for (int dr = -1; dr <= 1; ++dr)
          for (int dc = -1; dc <= 1; ++dc) {
            const long rr = static_cast<long>(r) + dr, cc = static_cast<long>(c) + dc;
            if (rr < 0 || cc < 0 || rr >= static_cast<long>(H) || cc >= static_cast<long>(W)) continue;
            row[k * 9 + static_cast<std::size_t>((dr + 1) * 3 + (dc + 1))] = s.pixel(k, static_cast<std::size_t>(rr), static_cast<std::size_t>(cc));
          }
    }
  return p;
}

inline DualTensor low_patches(const SceneSpec& s) {
  const std::size_t H = s.height / 2, W = s.width / 2, C = s.num_classes;
  DualTensor p({H * W, 4 * C});
  for (std::size_t r = 0; r < H; ++r)
    for (std::size_t c = 0; c < W; ++c) {
      double* row = p.values().data() + (r * W + c) * 4 * C;
      for (std::size_t k = 0; k < C; ++k)
        for (std::size_t a = 0; a < 2; ++a)
          for (std::size_t b = 0; b < 2; ++b) row[k * 4 + a * 2 + b] = s.pixel(k, 2 * r + a, 2 * c + b);
    }
  return p;
}

/// Fine grid H x W and coarse grid H/2 x W/2 of width-d features.
inline detect::SceneFeatures featurize(Tape& t, const SceneSpec& s, const FeaturizerParams& p, const SceneConfig& cfg) {
  if (s.height != cfg.height || s.width != cfg.width || s.num_classes != cfg.num_classes)
    throw std::invalid_argument("featurize: scene " + std::to_string(s.height) + "x" + std::to_string(s.width) + "x" + std::to_string(s.num_classes) +
                                " does not match configured " + std::to_string(cfg.height) + "x" + std::to_string(cfg.width) + "x" +
                                std::to_string(cfg.num_classes));
  if (s.render.size() != s.num_classes * s.height * s.width) throw std::invalid_argument("featurize: scene has no render");
  detect::SceneFeatures f;
  f.high = {s.height, s.width, p.high(t, t.constant(high_patches(s)))};
  f.low = {s.height / 2, s.width / 2, p.low(t, t.constant(low_patches(s)))};
  return f;
}

// ---------------------------------------------------------------------------
// Model

/// Featurizer plus detection head sharing one parameter store.
class Detector {
 public:
  Detector(const detect::HeadConfig& head, const SceneConfig& scene, std::uint64_t init_seed) : head_(head), scene_(scene) {
    head_.validate();
    scene_.validate();
    if (scene_.num_classes != head_.num_classes) throw std::invalid_argument("num_classes: scene and head disagree");
    if (scene_.max_objects > head_.num_queries) throw std::invalid_argument("num_queries: must be at least max_objects");
    RngStream rng(mix64(init_seed ^ 0x5eed1e55ULL));
    featurizer_ = FeaturizerParams::create(store_, scene_.num_classes, head_.d, rng);
    params_ = detect::HeadParams::create(store_, head_, rng);
  }
  Detector(const Detector&) = delete;
  Detector& operator=(const Detector&) = delete;

  detect::HeadOutput forward(Tape& t, const SceneSpec& s, const detect::ForwardOptions& opt = {}) const {
    return detect::forward(t, featurize(t, s, featurizer_, scene_), head_, params_, opt);
  }

  ParamStore& params() { return store_; }
  const ParamStore& params() const { return store_; }
  const detect::HeadConfig& head_config() const { return head_; }
  const SceneConfig& scene_config() const { return scene_; }
  const detect::HeadParams& head_params() const { return params_; }
  const FeaturizerParams& featurizer() const { return featurizer_; }

 private:
  detect::HeadConfig head_;
  SceneConfig scene_;
  ParamStore store_;
  FeaturizerParams featurizer_;
  detect::HeadParams params_;
};

inline std::vector<loss::Prediction> predictions(const detect::HeadOutput& out) {
  std::vector<loss::Prediction> p;
  for (const auto& l : out.layers) p.push_back({l.logits, l.boxes});
  return p;
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  std::size_t steps = 3000;
  double lr = 1e-3;
  std::size_t lr_drop_step = 0;  // 0: at 80% of steps
  double lr_drop_factor = 0.1;
  std::size_t batch_size = 2;
  std::uint64_t seed = 0;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double grad_clip = 1.0;  // global-norm clip; 0 disables
  std::size_t threads = 1;

  std::size_t drop_step() const { return lr_drop_step ? lr_drop_step : std::max<std::size_t>(1, (steps * 4) / 5); }

  void validate() const {
    if (steps < 1) throw std::invalid_argument("steps: must be at least 1");
    if (!(lr > 0.0)) throw std::invalid_argument("lr: must be positive");
    if (batch_size < 1) throw std::invalid_argument("batch_size: must be at least 1");
    if (!(lr_drop_factor > 0.0)) throw std::invalid_argument("lr_drop_factor: must be positive");
    if (!(weight_decay >= 0.0)) throw std::invalid_argument("weight_decay: must be nonnegative");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw std::invalid_argument("beta1/beta2: must lie in [0, 1)");
    if (!(adam_eps > 0.0)) throw std::invalid_argument("adam_eps: must be positive");
    if (!(grad_clip >= 0.0)) throw std::invalid_argument("grad_clip: must be nonnegative");
  }
};

/// Decoupled weight decay Adam over every tensor of a store.
class AdamW {
 public:
  AdamW(ParamStore& store, const TrainConfig& cfg) : store_(store), cfg_(cfg) {
    for (auto& [name, t] : store_.all()) {
      m_.emplace_back(t.size(), 0.0);
      v_.emplace_back(t.size(), 0.0);
    }
  }

  void step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    std::size_t k = 0;
    for (auto& [name, p] : store_.all()) {
      auto& m = m_[k];
      auto& v = v_[k];
      ++k;
      auto& x = p.values();
      const auto& g = p.grad();
      for (std::size_t i = 0; i < x.size(); ++i) {
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
        x[i] -= lr * cfg_.weight_decay * x[i];
        x[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg_.adam_eps);
      }
    }
  }

 private:
  ParamStore& store_;
  TrainConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

inline double clip_grad_norm(ParamStore& store, double max_norm) {
  double sq = 0.0;
  for (const auto& [_, t] : store.all())
    for (double g : t.grad()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / (norm + 1e-12);
    for (auto& [_, t] : store.all())
      for (auto& g : t.grad()) g *= s;
  }
  return norm;
}

struct StepRecord {
  std::size_t step = 0;
  double lr = 0.0;
  double loss_total = 0.0, loss_class = 0.0, loss_l1 = 0.0, loss_giou = 0.0;
  std::vector<double> per_layer;
};

struct TrainHooks {
  std::function<void(const StepRecord&)> on_step;
  std::function<void(const Detector&, std::size_t step)> on_lr_drop;
};

struct TrainResult {
  std::vector<StepRecord> history;
  bool diverged = false;
  std::string diagnostic;
};

struct SceneLoss {
  double total = 0.0, focal = 0.0, l1 = 0.0, giou = 0.0;
  std::vector<double> per_layer;
};

/// Forward and backward of one scene on its own tape; grads stay on the tape
/// until accumulate_param_grads.
inline SceneLoss scene_pass(const Detector& model, const SceneSpec& s, const loss::CostWeights& w, double weight, Tape& tape) {
  auto out = model.forward(tape, s);
  for (const auto& l : out.layers)
    for (const auto* v : {&l.logits.value(), &l.boxes.value()})
      if (!std::all_of(v->begin(), v->end(), [](double x) { return std::isfinite(x); })) {
        const double nan = std::nan("");
        return {nan, nan, nan, nan, std::vector<double>(out.layers.size(), nan)};
      }
  auto dl = loss::detection_loss(predictions(out), s.truth(), w, model.head_config().aux_loss);
  SceneLoss r{dl.total.item(), dl.focal, dl.l1, dl.giou, dl.per_layer};
  if (std::isfinite(r.total)) tape.backward(scale(dl.total, weight));
  return r;
}

/// Minibatch training on freshly generated scenes from the training seed space.
/// Scene gradients are folded into the parameters in batch order, so results
/// do not depend on the thread count.
inline TrainResult train(Detector& model, const TrainConfig& run, const loss::CostWeights& weights = {}, const TrainHooks& hooks = {}) {
  run.validate();
  weights.validate();
  TrainResult result;
  AdamW opt(model.params(), run);
  const std::size_t B = run.batch_size;
  const std::size_t threads = std::max<std::size_t>(1, std::min(run.threads, B));
  for (std::size_t step = 1; step <= run.steps; ++step) {
    const double lr = step > run.drop_step() ? run.lr * run.lr_drop_factor : run.lr;
    std::vector<SceneSpec> scenes;
    for (std::size_t b = 0; b < B; ++b)
      scenes.push_back(scene_at(SeedSpace::train, run.seed, (step - 1) * B + b, model.scene_config()));
    std::vector<std::unique_ptr<Tape>> tapes(B);
    std::vector<SceneLoss> losses(B);
    auto work = [&](std::size_t b) {
      tapes[b] = std::make_unique<Tape>();
      losses[b] = scene_pass(model, scenes[b], weights, 1.0 / static_cast<double>(B), *tapes[b]);
    };
    if (threads == 1) {
      for (std::size_t b = 0; b < B; ++b) work(b);
    } else {
      std::vector<std::thread> pool;
      for (std::size_t k = 0; k < threads; ++k)
        pool.emplace_back([&, k] {
          for (std::size_t b = k; b < B; b += threads) work(b);
        });
      for (auto& th : pool) th.join();
    }
    StepRecord rec;
    rec.step = step;
    rec.lr = lr;
    rec.per_layer.assign(losses.front().per_layer.size(), 0.0);
    for (const auto& l : losses) {
      rec.loss_total += l.total / static_cast<double>(B);
      rec.loss_class += l.focal / static_cast<double>(B);
      rec.loss_l1 += l.l1 / static_cast<double>(B);
      rec.loss_giou += l.giou / static_cast<double>(B);
      for (std::size_t i = 0; i < rec.per_layer.size(); ++i) rec.per_layer[i] += l.per_layer[i] / static_cast<double>(B);
    }
    if (!std::isfinite(rec.loss_total)) {
      result.diverged = true;
      result.diagnostic = "non-finite loss at step " + std::to_string(step);
      result.history.push_back(rec);
      if (hooks.on_step) hooks.on_step(rec);
      return result;
    }
    model.params().zero_grad();
    for (const auto& t : tapes) t->accumulate_param_grads();
    clip_grad_norm(model.params(), run.grad_clip);
    opt.step(lr);
    result.history.push_back(rec);
    if (hooks.on_step) hooks.on_step(rec);
    if (step == run.drop_step() && hooks.on_lr_drop && step < run.steps) hooks.on_lr_drop(model, step);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Toy AP

struct ScoredBox {
  std::size_t cls = 0;
  double score = 0.0;
  Box box{};
};

struct ApResult {
  double mean_ap = 0.0;
  std::vector<double> per_class;  // NaN for classes without truth
};

/// Per-class average precision at an IoU threshold, averaged over classes that have truth.
///
/// Detections are ranked by score (ties keep input order); each one claims the
/// unmatched same-class truth of its image with the highest IoU, if that IoU
/// reaches the threshold. AP is the area under the precision envelope.
inline ApResult toy_ap(const std::vector<std::vector<ScoredBox>>& dets, const std::vector<std::vector<SceneObject>>& truth,
                       std::size_t num_classes, double iou_threshold = 0.5) {
  if (dets.size() != truth.size()) throw std::invalid_argument("toy_ap: detection and truth image counts differ");
  if (truth.empty()) throw std::invalid_argument("toy_ap: empty eval set");
  ApResult r;
  r.per_class.assign(num_classes, std::nan(""));
  double total = 0.0;
  std::size_t counted = 0;
  for (std::size_t c = 0; c < num_classes; ++c) {
    std::size_t npos = 0;
    for (const auto& img : truth)
      for (const auto& o : img) npos += o.cls == c;
    if (npos == 0) continue;
    struct Item {
      double score;
      std::size_t image;
      Box box;
    };
    std::vector<Item> items;
    for (std::size_t i = 0; i < dets.size(); ++i)
      for (const auto& d : dets[i])
        if (d.cls == c) items.push_back({d.score, i, d.box});
    std::stable_sort(items.begin(), items.end(), [](const Item& a, const Item& b) { return a.score > b.score; });
    std::vector<std::vector<char>> used(truth.size());
    for (std::size_t i = 0; i < truth.size(); ++i) used[i].assign(truth[i].size(), 0);
    std::vector<double> precision, recall;
    std::size_t tp = 0, fp = 0;
    for (const auto& it : items) {
      double best = iou_threshold;
      std::ptrdiff_t hit = -1;
      const auto& objs = truth[it.image];
      for (std::size_t k = 0; k < objs.size(); ++k) {
        if (objs[k].cls != c || used[it.image][k]) continue;
        const double v = loss::iou(it.box, objs[k].box);
        if (v >= best) {
          best = v;
          hit = static_cast<std::ptrdiff_t>(k);
        }
      }
      if (hit >= 0) {
        used[it.image][static_cast<std::size_t>(hit)] = 1;
        ++tp;
      } else {
        ++fp;
      }
      precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
      recall.push_back(static_cast<double>(tp) / static_cast<double>(npos));
    }
    for (std::size_t i = precision.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
    double ap = 0.0, prev_recall = 0.0;
    for (std::size_t i = 0; i < precision.size(); ++i) {
      ap += (recall[i] - prev_recall) * precision[i];
      prev_recall = recall[i];
    }
    r.per_class[c] = ap;
    total += ap;
    ++counted;
  }
  if (counted == 0) throw std::invalid_argument("toy_ap: eval set has no ground truth");
  r.mean_ap = total / static_cast<double>(counted);
  return r;
}

/// Every (query, class) pair of the final layer as a scored box.
inline std::vector<ScoredBox> final_detections(const detect::HeadOutput& out) {
  const auto& last = out.layers.back();
  const std::size_t nq = last.logits.rows(), nc = last.logits.cols();
  std::vector<ScoredBox> d;
  for (std::size_t q = 0; q < nq; ++q) {
    const Box b{last.boxes.value()[4 * q], last.boxes.value()[4 * q + 1], last.boxes.value()[4 * q + 2], last.boxes.value()[4 * q + 3]};
    for (std::size_t c = 0; c < nc; ++c) d.push_back({c, sigmoid(last.logits.value()[q * nc + c]), b});
  }
  return d;
}

inline std::vector<SceneSpec> eval_scenes(std::uint64_t eval_seed, std::size_t count, const SceneConfig& cfg) {
  std::vector<SceneSpec> s;
  for (std::size_t i = 0; i < count; ++i) s.push_back(scene_at(SeedSpace::eval, eval_seed, i, cfg));
  return s;
}

inline ApResult evaluate(const Detector& model, std::uint64_t eval_seed, std::size_t count = 200) {
  if (count == 0) throw std::invalid_argument("evaluate: empty eval set");
  std::vector<std::vector<ScoredBox>> dets;
  std::vector<std::vector<SceneObject>> truth;
  for (const auto& s : eval_scenes(eval_seed, count, model.scene_config())) {
    Tape t(false);
    dets.push_back(final_detections(model.forward(t, s)));
    truth.push_back(s.objects);
  }
  return toy_ap(dets, truth, model.scene_config().num_classes);
}

}  // namespace qf::bench
