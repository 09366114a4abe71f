// Command-line front end: train, eval, match, bench, gen-data.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "hcpm/bench.hpp"
#include "hcpm/pipeline.hpp"

namespace fs = std::filesystem;
using namespace hcpm;

namespace {

PipelineConfig load_config(const std::string& path) {
  if (path.empty()) return PipelineConfig{};
  return PipelineConfig::from_json_file(path);
}

ModelParams make_model(const PipelineConfig& cfg, const std::string& checkpoint) {
  ModelParams params(cfg, cfg.seed);
  if (!checkpoint.empty()) load_checkpoint(checkpoint, &params);
  return params;
}

std::vector<double> parse_list(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(std::stod(item));
  }
  return out;
}

int run_train(const PipelineConfig& cfg, const std::string& out_dir) {
  fs::create_directories(out_dir);
  std::ofstream cfg_out(out_dir + "/config.json");
  cfg_out << cfg.to_json_text() << "\n";
  std::ofstream metrics(out_dir + "/metrics.jsonl");

  ModelParams params(cfg, cfg.seed);
  const TrainResult result = train(cfg, &params, &metrics);
  save_checkpoint(out_dir + "/model.ckpt", params);

  nlohmann::json j;
  j["steps_done"] = result.steps_done;
  j["diverged"] = result.diverged;
  j["final_total"] = result.final_total;
  j["checkpoint"] = out_dir + "/model.ckpt";
  std::cout << j.dump() << "\n";
  if (result.diverged) {
    std::cerr << "training diverged after " << result.steps_done
              << " steps; checkpoint holds the last finite parameters\n";
  }
  return 0;
}

int run_eval(const PipelineConfig& cfg, const std::string& checkpoint, int pairs, uint64_t seed,
             const std::string& out_path) {
  const ModelParams params = make_model(cfg, checkpoint);
  std::ofstream per_pair;
  if (!out_path.empty()) per_pair.open(out_path);
  const EvalMetrics m =
      evaluate(cfg, params, pairs, seed, out_path.empty() ? nullptr : &per_pair);

  nlohmann::json j;
  j["pairs"] = m.pairs;
  j["auc3"] = m.auc3;
  j["auc5"] = m.auc5;
  j["auc10"] = m.auc10;
  j["precision3"] = m.precision3;
  j["mean_matches"] = m.mean_matches;
  j["mean_live_a"] = m.mean_live_a;
  j["mean_live_b"] = m.mean_live_b;
  j["degenerate"] = m.degenerate;
  std::cout << j.dump() << "\n";
  return 0;
}

int run_match(const PipelineConfig& cfg, const std::string& checkpoint, const std::string& path_a,
              const std::string& path_b, const std::string& out_path) {
  const ModelParams params = make_model(cfg, checkpoint);
  const Tensor image_a = read_pgm(path_a);
  const Tensor image_b = read_pgm(path_b);
  const MatchSet matches = match_pair(image_a, image_b, params, cfg);

  if (out_path.empty()) {
    write_matches_csv(std::cout, matches);
  } else {
    std::ofstream out(out_path);
    if (!out) throw std::runtime_error("match: cannot open " + out_path);
    write_matches_csv(out, matches);
  }
  if (matches.fine.empty()) {
    std::cerr << "no matches\n";
    return 3;
  }
  return 0;
}

int run_bench(const PipelineConfig& base, const std::string& checkpoint, int repeats,
              const std::string& alphas_text) {
  std::vector<double> alphas = alphas_text.empty() ? std::vector<double>{base.alpha}
                                                   : parse_list(alphas_text);
  const ModelParams params = make_model(base, checkpoint);
  const PairSample sample = generate_pair(base.scene(base.seed));

  for (double alpha : alphas) {
    PipelineConfig cfg = base;
    cfg.alpha = alpha;
    const ForwardResult fwd =
        forward(sample.image_a, sample.image_b, params, cfg, SampleMode::eval, nullptr);
    const CostReport cost = count_flops(cfg, fwd.live);
    const TimingReport timing = time_pipeline(cfg, params, sample.image_a, sample.image_b, repeats);

    nlohmann::json j;
    j["alpha"] = alpha;
    j["variant"] = cfg.variant == PruneVariant::direct ? "direct" : "implicit";
    j["matches"] = fwd.matches.fine.size();
    j["flops"] = nlohmann::json::parse(cost.to_json());
    j["timing"] = nlohmann::json::parse(timing.to_json());
    std::cout << j.dump() << "\n";
  }
  return 0;
}

int run_gen_data(const PipelineConfig& cfg, int count, const std::string& out_dir) {
  fs::create_directories(out_dir);
  for (int i = 0; i < count; ++i) {
    SceneConfig sc = cfg.scene(cfg.seed + static_cast<uint64_t>(i));
    const PairSample s = generate_pair(sc);
    char name[32];
    std::snprintf(name, sizeof(name), "pair_%04d", i);
    write_pair(out_dir + "/" + name, s);
    std::cout << out_dir << "/" << name << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Detector-free feature matching with hierarchical candidate pruning"};
  app.require_subcommand(1);

  std::string config_path, out_path, checkpoint;
  std::string image_a, image_b, alphas;
  uint64_t seed = 0;
  int steps = -1, pairs = 0, repeats = 10, count = 8;
  double alpha = -1.0;

  auto* train_cmd = app.add_subcommand("train", "Train a model and write a checkpoint");
  train_cmd->add_option("--config", config_path, "Config JSON");
  auto* train_seed = train_cmd->add_option("--seed", seed, "Override config seed");
  auto* train_steps = train_cmd->add_option("--steps", steps, "Override config steps");
  auto* train_alpha = train_cmd->add_option("--alpha", alpha, "Override config alpha");
  train_cmd->add_option("--out", out_path, "Output directory")->required();

  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a model on rendered pairs");
  eval_cmd->add_option("--config", config_path, "Config JSON");
  eval_cmd->add_option("--checkpoint", checkpoint, "Model checkpoint");
  auto* eval_seed = eval_cmd->add_option("--seed", seed, "Eval scene seed");
  eval_cmd->add_option("--pairs", pairs, "Number of pairs (default: config eval_pairs)");
  eval_cmd->add_option("--out", out_path, "Per-pair JSONL path");

  auto* match_cmd = app.add_subcommand("match", "Match two PGM images");
  match_cmd->add_option("--config", config_path, "Config JSON");
  match_cmd->add_option("--checkpoint", checkpoint, "Model checkpoint");
  match_cmd->add_option("--image-a", image_a, "First image (PGM)")->required();
  match_cmd->add_option("--image-b", image_b, "Second image (PGM)")->required();
  match_cmd->add_option("--out", out_path, "CSV path (default: stdout)");

  auto* bench_cmd = app.add_subcommand("bench", "FLOP counts and stage timings");
  bench_cmd->add_option("--config", config_path, "Config JSON");
  bench_cmd->add_option("--checkpoint", checkpoint, "Model checkpoint");
  bench_cmd->add_option("--repeats", repeats, "Timed repetitions per point");
  bench_cmd->add_option("--alphas", alphas, "Comma-separated keep ratios to sweep");

  auto* gen_cmd = app.add_subcommand("gen-data", "Render image pairs to disk");
  gen_cmd->add_option("--config", config_path, "Config JSON");
  auto* gen_seed = gen_cmd->add_option("--seed", seed, "Override config seed");
  gen_cmd->add_option("--count", count, "Number of pairs");
  gen_cmd->add_option("--out", out_path, "Output directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    PipelineConfig cfg = load_config(config_path);
    if (app.got_subcommand(train_cmd)) {
      if (train_seed->count() > 0) cfg.seed = seed;
      if (train_steps->count() > 0) cfg.steps = steps;
      if (train_alpha->count() > 0) cfg.alpha = alpha;
      cfg.validate();
      return run_train(cfg, out_path);
    }
    if (app.got_subcommand(eval_cmd)) {
      const uint64_t s = eval_seed->count() > 0 ? seed : cfg.seed + 100000;
      return run_eval(cfg, checkpoint, pairs > 0 ? pairs : cfg.eval_pairs, s, out_path);
    }
    if (app.got_subcommand(match_cmd)) {
      return run_match(cfg, checkpoint, image_a, image_b, out_path);
    }
    if (app.got_subcommand(bench_cmd)) {
      return run_bench(cfg, checkpoint, repeats, alphas);
    }
    if (app.got_subcommand(gen_cmd)) {
      if (gen_seed->count() > 0) cfg.seed = seed;
      return run_gen_data(cfg, count, out_path);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
