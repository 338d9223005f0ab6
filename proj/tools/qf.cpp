// qf: train, evaluate and inspect the toy detection head.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "qf/checkpoint.hpp"
#include "qf/pgm.hpp"
#include "qf/run_config.hpp"
#include "qf/toybench.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace qf;

namespace {

enum Exit : int { kOk = 0, kUsage = 2, kConfig = 3, kCheckpoint = 4, kDiverged = 5, kIo = 6 };

struct Failure {
  int code;
  std::string message;
};

std::size_t threads_from_env() {
  const char* v = std::getenv("QF_THREADS");
  if (!v || !*v) return 1;
  char* end = nullptr;
  const long n = std::strtol(v, &end, 10);
  if (*end != '\0' || n < 1) throw Failure{kUsage, std::string("QF_THREADS: expected a positive integer, got '") + v + "'"};
  return static_cast<std::size_t>(n);
}

json loss_record(const bench::StepRecord& r) {
  json j;
  j["step"] = r.step;
  j["lr"] = r.lr;
  j["loss_total"] = r.loss_total;
  j["loss_class"] = r.loss_class;
  j["loss_l1"] = r.loss_l1;
  j["loss_giou"] = r.loss_giou;
  j["per_layer_losses"] = r.per_layer;
  return j;
}

// The model a checkpoint was trained as, with its weights loaded.
struct Loaded {
  RunConfig config;
  std::unique_ptr<bench::Detector> model;
};

Loaded load_checkpoint(const std::string& path) {
  if (!fs::exists(path)) throw Failure{kCheckpoint, "checkpoint not found: " + path};
  Loaded l;
  try {
    auto c = ckpt::load_file(path);
    l.config = RunConfig::parse(c.config_text);
    l.model = std::make_unique<bench::Detector>(l.config.head, l.config.scene, l.config.train.seed);
    ckpt::load_into(c, l.model->params());
  } catch (const ckpt::CheckpointError& e) {
    throw Failure{kCheckpoint, path + ": " + e.what()};
  } catch (const ConfigError& e) {
    throw Failure{kCheckpoint, path + ": embedded config: " + e.what()};
  }
  return l;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Failure{kIo, "cannot write " + path.string()};
  out << text;
}

int cmd_train(const std::string& config_path, std::optional<std::uint64_t> seed, std::optional<std::string> out_override) {
  RunConfig cfg;
  try {
    cfg = RunConfig::load(config_path);
  } catch (const ConfigError& e) {
    throw Failure{kConfig, config_path + ": " + e.what()};
  }
  if (seed) cfg.train.seed = *seed;
  if (out_override) cfg.out_dir = *out_override;
  if (cfg.out_dir.empty()) cfg.out_dir = ".";
  cfg.train.threads = threads_from_env();

  const fs::path out_dir(cfg.out_dir);
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw Failure{kIo, "cannot create output directory " + out_dir.string() + ": " + ec.message()};
  // Paths stay out of the recorded config so reruns elsewhere are byte-identical.
  RunConfig recorded = cfg;
  recorded.out_dir.clear();
  recorded.checkpoint.clear();
  const std::string config_text = recorded.serialize();
  const fs::path final_ckpt = cfg.checkpoint.empty() ? out_dir / "checkpoint.qfck" : fs::path(cfg.checkpoint);

  std::ofstream metrics(out_dir / "metrics.jsonl", std::ios::binary | std::ios::trunc);
  if (!metrics) throw Failure{kIo, "cannot write " + (out_dir / "metrics.jsonl").string()};
  json header;
  header["format"] = "qf-metrics";
  header["version"] = 1;
  header["config"] = config_text;
  metrics << header.dump() << '\n' << std::flush;

  bench::Detector model(cfg.head, cfg.scene, cfg.train.seed);
  bench::TrainHooks hooks;
  hooks.on_step = [&](const bench::StepRecord& r) { metrics << loss_record(r).dump() << '\n' << std::flush; };
  hooks.on_lr_drop = [&](const bench::Detector& m, std::size_t step) {
    ckpt::save_file((out_dir / ("checkpoint_step" + std::to_string(step) + ".qfck")).string(), config_text, m.params());
  };
  auto result = bench::train(model, cfg.train, cfg.weights, hooks);
  if (result.diverged) {
    json d;
    d["diverged"] = true;
    d["message"] = result.diagnostic;
    metrics << d.dump() << '\n' << std::flush;
    throw Failure{kDiverged, "training diverged: " + result.diagnostic};
  }
  ckpt::save_file(final_ckpt.string(), config_text, model.params());
  const auto& last = result.history.back();
  std::cout << "trained " << last.step << " steps, final loss " << last.loss_total << "\n"
            << "metrics: " << (out_dir / "metrics.jsonl").string() << "\ncheckpoint: " << final_ckpt.string() << "\n";
  return kOk;
}

int cmd_eval(const std::string& path, std::uint64_t eval_seed, std::optional<std::size_t> scenes, std::optional<std::string> out) {
  auto l = load_checkpoint(path);
  const std::size_t count = scenes.value_or(l.config.eval_scenes);
  auto ap = bench::evaluate(*l.model, eval_seed, count);
  json rec;
  rec["checkpoint"] = path;
  rec["eval_seed"] = eval_seed;
  rec["scenes"] = count;
  rec["ap"] = ap.mean_ap;
  json per = json::array();
  for (double v : ap.per_class) per.push_back(std::isnan(v) ? json(nullptr) : json(v));
  rec["per_class_ap"] = per;

  std::cout << "toy AP@0.5: " << ap.mean_ap << "\n";
  for (std::size_t c = 0; c < ap.per_class.size(); ++c) std::cout << "  class " << c << ": " << ap.per_class[c] << "\n";
  const fs::path dst = out ? fs::path(*out) : fs::path(path).parent_path() / ("eval_seed" + std::to_string(eval_seed) + ".json");
  write_text(dst, rec.dump(2) + "\n");
  std::cout << "results: " << dst.string() << "\n";
  return kOk;
}

int cmd_visualize(const std::string& path, std::uint64_t scene_seed, std::size_t layer, std::size_t query, const std::string& out) {
  auto l = load_checkpoint(path);
  const auto& head = l.config.head;
  if (layer >= head.num_layers)
    throw Failure{kUsage, "--layer " + std::to_string(layer) + " out of range [0, " + std::to_string(head.num_layers) + ")"};
  if (query >= head.num_queries)
    throw Failure{kUsage, "--query " + std::to_string(query) + " out of range [0, " + std::to_string(head.num_queries) + ")"};

  const auto scene = bench::scene_at(bench::SeedSpace::eval, scene_seed, 0, l.config.scene);
  Tape t(false);
  auto fwd = l.model->forward(t, scene);
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw Failure{kIo, "cannot create output directory " + out + ": " + ec.message()};
  const auto maps = detect::export_attention_maps(fwd, layer, query);
  for (std::size_t s = 0; s < maps.size(); ++s) {
    const fs::path f = fs::path(out) / ("attn_L" + std::to_string(layer) + "_Q" + std::to_string(query) + "_S" + std::to_string(s) + ".pgm");
    write_text(f, pgm::encode(maps[s]));
    std::cout << f.string() << " " << maps[s].w << "x" << maps[s].h << "\n";
  }

  // Mass inside the ground-truth box this query is matched to at this layer, if any.
  const auto preds = bench::predictions(fwd);
  const auto match = loss::hungarian_match(loss::matching_cost(preds[layer], scene.truth(), l.config.weights));
  for (std::size_t g = 0; g < match.query_of_truth.size(); ++g)
    if (match.query_of_truth[g] == query) {
      std::cout << "matched truth " << g << " (class " << scene.objects[g].cls << "), attention mass in box: "
                << detect::attention_mass_in_box(fwd, layer, query, scene.objects[g].box) << "\n";
      return kOk;
    }
  std::cout << "query " << query << " is unmatched at layer " << layer << "\n";
  return kOk;
}

int cmd_dump_scenes(std::uint64_t eval_seed, std::size_t count, const std::optional<std::string>& config_path) {
  bench::SceneConfig sc;
  if (config_path) {
    try {
      sc = RunConfig::load(*config_path).scene;
    } catch (const ConfigError& e) {
      throw Failure{kConfig, *config_path + ": " + e.what()};
    }
  }
  for (const auto& s : bench::eval_scenes(eval_seed, count, sc)) std::cout << bench::serialize_scene(s) << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Toy detection head: train, evaluate, visualize attention"};
  app.require_subcommand(1);

  std::string config_path, checkpoint, out_dir;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out_opt;
  std::optional<std::size_t> scenes;
  std::optional<std::string> dump_config;
  std::uint64_t eval_seed = 1, scene_seed = 0;
  std::size_t layer = 0, query = 0, count = 200;

  auto* train = app.add_subcommand("train", "Train from a config file; writes metrics.jsonl and checkpoints");
  train->add_option("--config", config_path, "Config file (key = value lines)")->required();
  train->add_option("--seed", seed, "Override the config seed");
  train->add_option("--out", out_opt, "Override the output directory");

  auto* eval = app.add_subcommand("eval", "Toy AP of a checkpoint on held-out scenes");
  eval->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  eval->add_option("--eval-seed", eval_seed, "Held-out scene seed")->required();
  eval->add_option("--scenes", scenes, "Number of eval scenes (default from config)");
  eval->add_option("--out", out_opt, "Results JSON path");

  auto* vis = app.add_subcommand("visualize", "Write per-level attention maps as PGM files");
  vis->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  vis->add_option("--scene-seed", scene_seed, "Held-out scene seed")->required();
  vis->add_option("--layer", layer, "Decoder layer")->required();
  vis->add_option("--query", query, "Query index")->required();
  vis->add_option("--out", out_dir, "Output directory")->required();

  auto* dump = app.add_subcommand("dump-scenes", "Print held-out scenes, one per line");
  dump->add_option("--eval-seed", eval_seed, "Held-out scene seed")->required();
  dump->add_option("--count", count, "Number of scenes");
  dump->add_option("--config", dump_config, "Take the scene settings from this config");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kUsage;
  }

  try {
    if (*train) return cmd_train(config_path, seed, out_opt);
    if (*eval) return cmd_eval(checkpoint, eval_seed, scenes, out_opt);
    if (*vis) return cmd_visualize(checkpoint, scene_seed, layer, query, out_dir);
    if (*dump) return cmd_dump_scenes(eval_seed, count, dump_config);
  } catch (const Failure& f) {
    std::cerr << "error: " << f.message << "\n";
    return f.code;
  } catch (const ckpt::CheckpointError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kCheckpoint;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return kUsage;
}
