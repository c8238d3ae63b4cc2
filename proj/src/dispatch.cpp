#include "amr/dispatch.hpp"

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <numbers>
#include <sstream>

#include <CLI11.hpp>

#include "amr/checkpoint.hpp"
#include "amr/errors.hpp"
#include "amr/eval.hpp"

#ifndef AMR_CODE_VERSION
#define AMR_CODE_VERSION "0.1.0"
#endif
#ifndef AMR_DEFAULT_DATA_ROOT
#define AMR_DEFAULT_DATA_ROOT "data"
#endif
#ifndef AMR_FETCH_SCRIPT
#define AMR_FETCH_SCRIPT "tools/fetch_data.py"
#endif

namespace amr {

namespace fs = std::filesystem;

std::string code_version() { return AMR_CODE_VERSION; }
std::string default_data_root() { return AMR_DEFAULT_DATA_ROOT; }

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

const Split& eval_split(const Dataset& data) {
  if (!data.val.empty()) return data.val;
  if (!data.test.empty()) return data.test;
  return data.train;
}

void record(const ExperimentConfig& cfg, nlohmann::json& results, const std::string& metric, double value) {
  append_result(cfg.output, {metric, value, cfg.digest(), cfg.seed});
  results[metric] = value;
}

fs::path grid_png(const ExperimentConfig& cfg, TrainState& state, const Dataset& data, GridMode mode) {
  const auto& split = eval_split(data);
  Rng rng(cfg.seed + 0x6772696400ULL);
  std::vector<torch::Tensor> rows;
  for (int r = 0; r < cfg.grid_rows; ++r) {
    const auto i = rng.index(split.size());
    const auto j = rng.index(split.size());
    rows.push_back(interpolation_grid(state.nets, mode, split.images[i], split.images[j], cfg.grid_steps,
                                      cfg.seed * 1000 + static_cast<std::uint64_t>(r)));
  }
  const auto path = fs::path(cfg.output) / "grids" / (mode == GridMode::Convex ? "convex.png" : "bernoulli.png");
  fs::create_directories(path.parent_path());
  write_grid_png(path, stack_rows(rows));
  return path;
}

torch::Tensor spiral_reference(std::int64_t n) {
  auto out = torch::empty({n, 2}, torch::kFloat64);
  auto acc = out.accessor<double, 2>();
  for (std::int64_t i = 0; i < n; ++i) {
    const double theta = 2.0 * std::numbers::pi * kSpiralTurns * static_cast<double>(i) / (n - 1);
    const auto [x, y] = spiral_point(theta);
    acc[i][0] = x;
    acc[i][1] = y;
  }
  return out;
}

}  // namespace

nlohmann::json evaluate_run(const ExperimentConfig& cfg, TrainState& state, const Dataset& data) {
  nlohmann::json results = nlohmann::json::object();
  const bool points = state.nets->spec().family() == NetFamily::Mlp;
  if (cfg.eval_probe && state.nets->has_probe()) {
    if (state.best_val_acc >= 0.0) record(cfg, results, "probe_best_val_acc", state.best_val_acc);
    if (!data.test.empty() && data.test.labels.defined()) {
      record(cfg, results, "probe_test_acc", probe_accuracy(state.nets, data.test));
    }
  }
  if (cfg.eval_disentanglement) {
    if (!data.factors) throw UsageError("config key 'eval_disentanglement': dataset '" + cfg.dataset +
                                        "' has no ground-truth factors");
    DisentanglementConfig dc;
    dc.n_votes = cfg.dis_votes;
    dc.vote_batch = cfg.dis_batch;
    Rng rng(cfg.seed + 0x6469730000ULL);
    const auto res = disentanglement_score(dsprites_code_fn(state.nets), *data.factors, dc, rng);
    record(cfg, results, "disentanglement", res.accuracy);
  }
  if (cfg.eval_grids) {
    if (points) {
      std::cerr << "note: interpolation grids are skipped for point data\n";
    } else {
      results["grids"] = {grid_png(cfg, state, data, GridMode::Convex).string(),
                          grid_png(cfg, state, data, GridMode::Bernoulli).string()};
    }
  }
  if (cfg.eval_spiral) {
    if (!points) throw UsageError("config key 'eval_spiral': needs the spiral dataset");
    Rng rng(cfg.seed + 0x7370690000ULL);
    const auto mixes = decoded_mix_points(state.nets, data.train, cfg.spiral_mixes, rng);
    write_points_table(fs::path(cfg.output) / "spiral_mixes.txt", mixes);
    const auto reference = spiral_reference(20000);
    record(cfg, results, "spiral_coverage", spiral_coverage(mixes, reference, 3.0 * cfg.noise_sd));
  }
  return results;
}

void write_manifest(const fs::path& dir, const std::string& name, const ExperimentConfig& cfg,
                    const std::string& subcommand, double wall_seconds, const nlohmann::json& extra) {
  nlohmann::json m = {{"subcommand", subcommand},
                      {"config_digest", cfg.digest()},
                      {"seed", cfg.seed},
                      {"dataset", cfg.dataset},
                      {"code_version", code_version()},
                      {"torch_version", TORCH_VERSION},
                      {"threads", at::get_num_threads()},
                      {"wall_seconds", wall_seconds}};
  if (!extra.is_null()) m["results"] = extra;
  fs::create_directories(dir);
  std::ofstream out(dir / name, std::ios::trunc);
  out << m.dump(2) << '\n';
}

nlohmann::json train_and_evaluate(const ExperimentConfig& cfg) {
  const auto t0 = Clock::now();
  auto run = run_experiment(cfg);
  const auto results = evaluate_run(cfg, run.state, run.data);
  write_manifest(cfg.output, "manifest.json", cfg, "train", seconds_since(t0), results);
  return results;
}

std::pair<double, double> mean_std(const std::vector<double>& values) {
  if (values.empty()) throw std::invalid_argument("mean_std: no values");
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= static_cast<double>(values.size());
  double var = 0.0;
  for (double v : values) var += (v - mean) * (v - mean);
  return {mean, std::sqrt(var / static_cast<double>(values.size()))};
}

std::vector<SweepGroup> run_sweep(const ExperimentConfig& cfg, int n_seeds, const std::vector<double>& lambdas) {
  if (n_seeds < 1) throw UsageError("sweep: --seeds must be >= 1");
  const auto t0 = Clock::now();
  std::vector<double> grid = lambdas.empty() ? std::vector<double>{cfg.lambda} : lambdas;
  std::vector<SweepGroup> groups;
  nlohmann::json summary = nlohmann::json::array();
  for (double lambda : grid) {
    SweepGroup g;
    g.lambda = lambda;
    for (int s = 0; s < n_seeds; ++s) {
      ExperimentConfig run = cfg;
      run.lambda = lambda;
      run.seed = cfg.seed + static_cast<std::uint64_t>(s);
      fs::path dir = cfg.output;
      if (!lambdas.empty()) dir /= "lambda_" + get_config_value(run, "lambda");
      dir /= "seed_" + std::to_string(run.seed);
      run.output = dir.string();
      run.eval_probe = true;
      const auto res = train_and_evaluate(run);
      if (!res.contains("probe_best_val_acc")) {
        throw UsageError("sweep: dataset '" + cfg.dataset + "' has no labelled validation split to summarise");
      }
      g.seeds.push_back(run.seed);
      g.best_val_acc.push_back(res["probe_best_val_acc"].get<double>());
    }
    std::tie(g.mean, g.std) = mean_std(g.best_val_acc);
    summary.push_back({{"lambda", g.lambda},
                       {"seeds", g.seeds},
                       {"best_val_acc", g.best_val_acc},
                       {"mean", g.mean},
                       {"std", g.std}});
    std::cout << "lambda " << g.lambda << ": best_val_acc " << g.mean << " +/- " << g.std << " over " << n_seeds
              << " seeds\n";
    groups.push_back(std::move(g));
  }
  fs::create_directories(cfg.output);
  std::ofstream(fs::path(cfg.output) / "summary.json", std::ios::trunc) << summary.dump(2) << '\n';
  write_manifest(cfg.output, "manifest.json", cfg, "sweep", seconds_since(t0), summary);
  return groups;
}

// --- CLI ------------------------------------------------------------------------

namespace {

std::string kebab(std::string key) {
  for (auto& c : key) {
    if (c == '_') c = '-';
  }
  return key;
}

struct ConfigFlags {
  std::string file;
  std::string preset;
  std::map<std::string, std::string> values;
  std::vector<std::pair<std::string, CLI::Option*>> options;

  void attach(CLI::App* app) {
    app->add_option("--config", file, "Key/value config file");
    app->add_option("--preset", preset, "Named reference preset");
    values.clear();
    for (const auto& key : config_keys()) {
      options.emplace_back(key, app->add_option("--" + kebab(key), values[key], "config key '" + key + "'"));
    }
  }

  ExperimentConfig resolve() const {
    std::map<std::string, std::string> given;
    for (const auto& [key, opt] : options) {
      if (opt->count() > 0) given[key] = values.at(key);
    }
    return parse_config(file, given, preset, default_data_root());
  }
};

fs::path pick_checkpoint(const ExperimentConfig& cfg, const std::string& explicit_path) {
  if (!explicit_path.empty()) return explicit_path;
  const auto best = fs::path(cfg.output) / "checkpoints" / "best.ckpt";
  if (fs::exists(best)) return best;
  return fs::path(cfg.output) / "checkpoints" / "latest.ckpt";
}

void echo_config(const ExperimentConfig& cfg) {
  fs::create_directories(cfg.output);
  std::ofstream(fs::path(cfg.output) / "config.txt", std::ios::trunc) << cfg.to_text();
}

int fetch_data(const std::string& root, const std::vector<std::string>& datasets) {
  std::string cmd = "python3 '" + std::string(AMR_FETCH_SCRIPT) + "' --root '" + root + "'";
  for (const auto& d : datasets) cmd += " --dataset '" + d + "'";
  const int rc = std::system(cmd.c_str());
  if (rc != 0) throw DataError("fetch-data failed (exit " + std::to_string(rc) + ")");
  return kExitOk;
}

}  // namespace

int run_cli(int argc, char** argv) {
  CLI::App app{"Adversarial mixup resynthesis: training and evaluation"};
  app.require_subcommand(1);

  ConfigFlags train_flags, eval_flags, grid_flags, sweep_flags;
  auto* train = app.add_subcommand("train", "Train one run, then run the toggled evaluations");
  train_flags.attach(train);

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval_flags.attach(eval);
  std::string eval_ckpt;
  eval->add_option("--checkpoint", eval_ckpt, "Checkpoint (default: <output>/checkpoints/best.ckpt)");

  auto* grid = app.add_subcommand("grid", "Write interpolation grids from a checkpoint");
  grid_flags.attach(grid);
  std::string grid_ckpt, grid_mode = "both";
  grid->add_option("--checkpoint", grid_ckpt, "Checkpoint (default: <output>/checkpoints/best.ckpt)");
  grid->add_option("--mode", grid_mode, "convex, bernoulli or both")
      ->check(CLI::IsMember({"convex", "bernoulli", "both"}));

  auto* sweep = app.add_subcommand("sweep", "Several seeds (optionally x the lambda preset), mean +/- std");
  sweep_flags.attach(sweep);
  int n_seeds = 3;
  bool use_lambda_sweep = false;
  sweep->add_option("--seeds", n_seeds, "Number of consecutive seeds");
  sweep->add_flag("--lambda-sweep", use_lambda_sweep, "Sweep lambda over 2, 5, 10, 20, 50");

  auto* fetch = app.add_subcommand("fetch-data", "Download datasets into the data root (network)");
  std::string fetch_root;
  std::vector<std::string> fetch_sets;
  fetch->add_option("--root", fetch_root, "Data root (default: $AMR_DATA_ROOT or the build default)");
  fetch->add_option("--dataset", fetch_sets, "Dataset to fetch (repeatable; default mnist)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  const auto t0 = Clock::now();
  try {
    if (*train) {
      const auto cfg = train_flags.resolve();
      train_and_evaluate(cfg);
    } else if (*eval || *grid) {
      const bool is_grid = grid->parsed();
      auto cfg = (is_grid ? grid_flags : eval_flags).resolve();
      if (is_grid) {
        cfg.eval_probe = cfg.eval_disentanglement = cfg.eval_spiral = false;
        cfg.eval_grids = true;
      }
      const auto data = load_for(cfg);
      const auto spec = spec_for(cfg, data);
      auto state = load_state(pick_checkpoint(cfg, is_grid ? grid_ckpt : eval_ckpt), cfg, spec);
      nlohmann::json results;
      if (is_grid) {
        if (spec.family() == NetFamily::Mlp) throw UsageError("grid: interpolation grids need image data");
        results = nlohmann::json::array();
        if (grid_mode != "bernoulli") results.push_back(grid_png(cfg, state, data, GridMode::Convex).string());
        if (grid_mode != "convex") results.push_back(grid_png(cfg, state, data, GridMode::Bernoulli).string());
      } else {
        results = evaluate_run(cfg, state, data);
      }
      std::cout << results.dump(2) << '\n';
      write_manifest(cfg.output, is_grid ? "manifest-grid.json" : "manifest-eval.json", cfg,
                     is_grid ? "grid" : "eval", seconds_since(t0), results);
    } else if (*sweep) {
      const auto cfg = sweep_flags.resolve();
      echo_config(cfg);
      run_sweep(cfg, n_seeds, use_lambda_sweep ? lambda_sweep() : std::vector<double>{});
    } else if (*fetch) {
      std::string root = fetch_root;
      if (root.empty()) {
        const char* env = std::getenv("AMR_DATA_ROOT");
        root = env != nullptr && *env != '\0' ? env : default_data_root();
      }
      return fetch_data(root, fetch_sets.empty() ? std::vector<std::string>{"mnist"} : fetch_sets);
    }
  } catch (const UsageError& e) {
    std::cerr << "error[usage]: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ConfigError& e) {
    std::cerr << "error[config]: " << e.what() << '\n';
    return kExitUsage;
  } catch (const DataError& e) {
    std::cerr << "error[data]: " << e.what() << '\n';
    return kExitData;
  } catch (const NumericError& e) {
    std::cerr << "error[numeric]: term=" << e.term() << ": " << e.what() << '\n';
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error[internal]: " << e.what() << '\n';
    return kExitInternal;
  }
  return kExitOk;
}

}  // namespace amr
