// Acceptance runner: `amr_acceptance --criterion N` runs one criterion and
// prints a single "criterion N: PASS|FAIL" line; the exit status is nonzero on
// failure.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <iterator>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <torch/torch.h>

#include "amr/config.hpp"
#include "amr/data.hpp"
#include "amr/dispatch.hpp"
#include "amr/eval.hpp"
#include "amr/mixing.hpp"
#include "amr/nets.hpp"
#include "amr/trainer.hpp"
#include "properties.hpp"

using namespace amr;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Context {
  fs::path work;
  fs::path data_root;
  fs::path cli;
};

std::string fmt(double v, int precision = 4) {
  std::ostringstream o;
  o << std::fixed << std::setprecision(precision) << v;
  return o.str();
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

fs::path fresh(const fs::path& dir) {
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

// 1 -------------------------------------------------------------------------

Outcome mixing_suite(const Context&) {
  const auto s = props::mixing_algebra(1000, 20240611);
  return {s.failures == 0, std::to_string(s.cases) + " cases, " + std::to_string(s.failures) + " failures" +
                               (s.detail.empty() ? "" : "\n" + s.detail)};
}

// 2 -------------------------------------------------------------------------

Outcome gradient_oracle(const Context&) {
  Outcome out{true, ""};
  for (const auto& gc : props::gradient_cases()) {
    const auto r = props::gradient_check(gc);
    const bool ok = r.parameters <= 1000 && r.max_rel_err <= 1e-4;
    out.pass = out.pass && ok;
    out.detail += gc.name + " params=" + std::to_string(r.parameters) + " max_rel_err=" + fmt(r.max_rel_err, 8) +
                  (ok ? "" : " [" + r.worst + "]") + "; ";
  }
  return out;
}

// 3 -------------------------------------------------------------------------

Outcome spectral_bound(const Context&) {
  auto image = [](std::int64_t side, std::int64_t channels, std::int64_t d_h) {
    AutoencoderSpec s;
    s.channels = channels;
    s.height = s.width = side;
    s.code_channels = d_h / 16;
    s.code_size = 4;
    return s;
  };
  AutoencoderSpec points;
  points.channels = 2;
  points.height = points.width = 1;
  points.code_channels = 2;
  points.code_size = 4;
  points.squash = OutputSquash::None;
  const std::vector<std::pair<std::string, AutoencoderSpec>> geometries = {
      {"mnist_dh32", image(28, 1, 32)},   {"svhn_dh256", image(32, 3, 256)},
      {"dsprites_dh32", image(64, 1, 32)}, {"spiral_mlp", points}};
  Outcome out{true, ""};
  for (const auto& [name, spec] : geometries) {
    const auto r = props::spectral_check(spec, 20, 7);
    const bool ok = r.min_sigma >= 0.98 && r.max_sigma <= 1.02;
    out.pass = out.pass && ok;
    out.detail += name + " sigma in [" + fmt(r.min_sigma) + ", " + fmt(r.max_sigma) + "] over " +
                  std::to_string(r.sigmas.size()) + " weights; ";
  }
  return out;
}

// 4 -------------------------------------------------------------------------

Outcome isolation(const Context&) {
  AutoencoderSpec spec;
  spec.channels = 1;
  spec.height = spec.width = 16;
  spec.code_channels = 2;
  spec.code_size = 4;
  spec.width_base = 4;
  spec.num_classes = 3;
  spec.num_attributes = 2;
  spec.embed_hidden = 8;

  torch::manual_seed(5);
  Batch batch;
  batch.x = torch::tanh(torch::randn({8, 1, 16, 16}));
  batch.labels = torch::randint(3, {8}, torch::kInt64);
  batch.attributes = torch::randint(2, {8, 2}).to(torch::kFloat32);

  auto owned_by = [](const std::string& key, std::initializer_list<const char*> prefixes) {
    for (const auto* p : prefixes) {
      if (key.rfind(p, 0) == 0) return true;
    }
    return false;
  };
  Outcome out{true, ""};
  for (const auto* mix : {"none", "mixup", "bern", "mixup_k", "bern_k", "sup_bern", "acai"}) {
    ExperimentConfig cfg;
    cfg.dataset = "toy";
    set_config_value(cfg, "mix", mix);
    cfg.k = std::string(mix).find("_k") != std::string::npos ? 3 : 2;
    cfg.beta = 0.5;
    cfg.validate();
    auto state = TrainState::create(cfg, spec, 11, Rng(12));
    const auto draw = draw_mix(state, batch.size());
    std::vector<std::string> bad;
    int moved = 0;
    auto phase = [&](const std::string& label, const std::function<void()>& run,
                     std::initializer_list<const char*> prefixes) {
      const auto before = snapshot(state.nets);
      run();
      const auto after = snapshot(state.nets);
      bool any = false;
      for (const auto& [k, v] : before) {
        if (torch::equal(v, after.at(k))) continue;
        any = true;
        if (!owned_by(k, prefixes)) bad.push_back(label + " changed " + k);
      }
      if (any) ++moved;
      else bad.push_back(label + " changed nothing");
    };
    phase("D", [&] { discriminator_step(state, batch, draw); }, {"discriminator."});
    phase("G", [&] { generator_step(state, batch, draw); }, {"encoder.", "decoder.", "embedder."});
    phase("probe", [&] { probe_step(state, batch); }, {"probe."});
    const bool ok = bad.empty() && moved == 3;
    out.pass = out.pass && ok;
    out.detail += std::string(mix) + (ok ? " ok" : " [" + bad.front() + "]") + "; ";
  }
  return out;
}

// 5 -------------------------------------------------------------------------

Outcome disentanglement(const Context&) {
  const auto r = props::disentanglement_oracles(31, 800);
  const bool ok = r.identity == 1.0 && r.permuted == 1.0 && std::abs(r.noise - 1.0 / 6.0) <= 0.07;
  return {ok, "identity=" + fmt(r.identity) + " permuted=" + fmt(r.permuted) + " noise=" + fmt(r.noise) +
                  " (chance " + fmt(1.0 / 6.0) + ")"};
}

// 6 -------------------------------------------------------------------------

Outcome spiral_sweep(const Context& ctx) {
  Outcome out{true, ""};
  for (std::uint64_t seed : {1, 2, 3}) {
    std::map<double, double> cov;
    for (double beta : {0.0, 100.0}) {
      ExperimentConfig cfg;
      cfg.dataset = "spiral";
      cfg.mix = MixMode::Mixup;
      cfg.lambda = 10.0;
      cfg.beta = beta;
      cfg.epochs = 100;
      cfg.seed = seed;
      cfg.eval_probe = false;
      cfg.eval_spiral = true;
      cfg.output = (ctx.work / "spiral" / ("beta_" + fmt(beta, 0)) / ("seed_" + std::to_string(seed))).string();
      cfg.validate();
      fresh(cfg.output);
      auto run = run_experiment(cfg);
      cov[beta] = evaluate_run(cfg, run.state, run.data).at("spiral_coverage").get<double>();
    }
    const bool ok = cov[0.0] > cov[100.0];
    out.pass = out.pass && ok;
    out.detail += "seed " + std::to_string(seed) + ": beta0=" + fmt(cov[0.0]) + " beta100=" + fmt(cov[100.0]) + "; ";
  }
  return out;
}

// 7 -------------------------------------------------------------------------

ExperimentConfig mnist_smoke(const Context& ctx, const std::string& mix, std::uint64_t seed) {
  ExperimentConfig cfg;
  cfg.dataset = "mnist";
  cfg.data_root = ctx.data_root.string();
  set_config_value(cfg, "mix", mix);
  cfg.d_h = 32;
  cfg.lambda = 10.0;
  cfg.n_keep = 5000;
  cfg.epochs = 30;
  cfg.probe_lr = 1e-3;
  cfg.seed = seed;
  cfg.output = (ctx.work / "mnist" / mix / ("seed_" + std::to_string(seed))).string();
  cfg.validate();
  return cfg;
}

Outcome mnist_smoke_run(const Context& ctx) {
  int ordered = 0;
  bool all_above = true;
  std::string detail;
  for (std::uint64_t seed : {1, 2, 3}) {
    std::map<std::string, double> best;
    for (const auto* mix : {"mixup", "none"}) {
      const auto cfg = mnist_smoke(ctx, mix, seed);
      fresh(cfg.output);
      best[mix] = run_experiment(cfg).state.best_val_acc;
    }
    all_above = all_above && best["mixup"] >= 0.85;
    if (best["mixup"] >= best["none"] - 0.02) ++ordered;
    detail += "seed " + std::to_string(seed) + ": amr_mixup=" + fmt(best["mixup"]) + " ae_gan=" + fmt(best["none"]) +
              "; ";
  }
  detail += "amr >= ae_gan - 0.02 on " + std::to_string(ordered) + "/3 seeds";
  return {all_above && ordered >= 2, detail};
}

// 8 -------------------------------------------------------------------------

// Small CNN trained on real images to read the two attributes off a decode.
struct AttributeClassifierImpl : torch::nn::Module {
  AttributeClassifierImpl() {
    net = register_module("net", torch::nn::Sequential(
                                     torch::nn::Conv2d(torch::nn::Conv2dOptions(1, 16, 4).stride(2).padding(1)),
                                     torch::nn::ReLU(),
                                     torch::nn::Conv2d(torch::nn::Conv2dOptions(16, 32, 4).stride(2).padding(1)),
                                     torch::nn::ReLU(), torch::nn::Flatten(), torch::nn::Linear(32 * 7 * 7, 64),
                                     torch::nn::ReLU(), torch::nn::Linear(64, 2)));
  }
  torch::Tensor forward(const torch::Tensor& x) { return net->forward(x); }
  torch::nn::Sequential net{nullptr};
};
TORCH_MODULE(AttributeClassifier);

AttributeClassifier train_reference(const Split& train, std::uint64_t seed) {
  torch::manual_seed(seed);
  AttributeClassifier clf;
  torch::optim::Adam opt(clf->parameters(), torch::optim::AdamOptions(1e-3));
  Rng rng(seed);
  const std::int64_t n = train.size(), bs = 64;
  for (int epoch = 0; epoch < 3; ++epoch) {
    const auto order = torch::tensor(rng.permutation(n), torch::kInt64);
    for (std::int64_t i = 0; i + bs <= n; i += bs) {
      const auto idx = order.slice(0, i, i + bs);
      const auto logits = clf->forward(train.images.index_select(0, idx));
      const auto loss =
          torch::binary_cross_entropy_with_logits(logits, train.attributes.index_select(0, idx));
      opt.zero_grad();
      loss.backward();
      opt.step();
    }
  }
  clf->eval();
  return clf;
}

torch::Tensor predict_attributes(AttributeClassifier& clf, const torch::Tensor& x) {
  torch::NoGradGuard ng;
  return (clf->forward(x) > 0).to(torch::kFloat32);
}

Outcome supervised_mixer(const Context& ctx) {
  ExperimentConfig cfg;
  cfg.dataset = "mnist_attr";
  cfg.data_root = ctx.data_root.string();
  cfg.mix = MixMode::SupBern;
  cfg.d_h = 256;
  cfg.lambda = 10.0;
  cfg.n_keep = 5000;
  cfg.epochs = 20;
  cfg.eval_probe = false;
  cfg.seed = 1;
  cfg.output = (ctx.work / "supervised").string();
  cfg.validate();
  fresh(cfg.output);
  auto run = run_experiment(cfg);
  auto& nets = run.state.nets;
  nets->eval();

  auto clf = train_reference(run.data.train, 77);
  const auto& test = run.data.test;
  const double real_acc =
      (predict_attributes(clf, test.images) == test.attributes).all(1).to(torch::kFloat64).mean().item<double>();

  // Pair each test example with one carrying the complementary attributes, so
  // every hard corner is reachable by choosing per attribute which side to take.
  const auto code = test.attributes.select(1, 0) * 2 + test.attributes.select(1, 1);
  std::vector<std::vector<std::int64_t>> by_code(4);
  for (std::int64_t i = 0; i < test.size(); ++i) by_code[code[i].item<std::int64_t>()].push_back(i);
  std::vector<std::int64_t> left, right;
  for (int c : {0, 1}) {
    const auto& a = by_code[c];
    const auto& b = by_code[3 - c];
    for (std::size_t i = 0; i < std::min<std::size_t>({a.size(), b.size(), 250}); ++i) {
      left.push_back(a[i]);
      right.push_back(b[i]);
    }
  }
  const auto i1 = torch::tensor(left, torch::kInt64), i2 = torch::tensor(right, torch::kInt64);
  const auto n = i1.numel();

  Rng rng(cfg.seed + 0x6d6978);
  const LabelEmbedding embed = [&](const torch::Tensor& y) { return nets->embed_attributes(y); };
  torch::NoGradGuard ng;
  const auto h1 = nets->encode(test.images.index_select(0, i1));
  const auto h2 = nets->encode(test.images.index_select(0, i2));
  std::int64_t hits = 0, total = 0;
  std::string per_corner;
  auto per_attribute = torch::zeros({2}, torch::kFloat64);
  for (const auto& corner : std::vector<std::vector<float>>{{0, 0}, {0, 1}, {1, 0}, {1, 1}}) {
    const auto y = torch::tensor(corner).unsqueeze(0).expand({n, 2}).contiguous();
    const auto mixed = mix_supervised(h1, h2, y, embed, rng, MaskSampling{cfg.mask_gradient, cfg.temperature});
    const auto pred = predict_attributes(clf, nets->decode(mixed.mix));
    const auto ok = (pred == y).all(1).sum().item<std::int64_t>();
    per_attribute = per_attribute + (pred == y).to(torch::kFloat64).sum(0);
    hits += ok;
    total += n;
    per_corner += fmt(static_cast<double>(ok) / n, 3) + " ";
  }
  const double acc = static_cast<double>(hits) / total;
  return {acc >= 0.7 && real_acc >= 0.95,
          "corner accuracy " + fmt(acc) + " over " + std::to_string(total) + " mixes (per corner " + per_corner +
              "); per attribute " + fmt(per_attribute[0].item<double>() / total, 3) + " " +
              fmt(per_attribute[1].item<double>() / total, 3) + "; reference classifier on real test " + fmt(real_acc)};
}

// 9 -------------------------------------------------------------------------

Outcome determinism(const Context& ctx) {
  const auto root = fresh(ctx.work / "determinism");
  std::vector<std::string> metrics;
  for (const auto* name : {"a", "b"}) {
    std::ostringstream cmd;
    cmd << ctx.cli << " train --dataset mnist --data-root " << ctx.data_root << " --n-keep 1000 --epochs 10"
        << " --seed 9 --output " << (root / name) << " > " << (root / (std::string(name) + ".log")) << " 2>&1";
    const int rc = std::system(cmd.str().c_str());
    if (rc != 0) return {false, std::string("dispatch ") + name + " exited with " + std::to_string(rc)};
    metrics.push_back(slurp(root / name / "metrics.jsonl"));
  }
  std::int64_t lines = std::count(metrics[0].begin(), metrics[0].end(), '\n');
  const bool ok = lines == 10 && metrics[0] == metrics[1];
  return {ok, std::to_string(lines) + " epochs, " + std::to_string(metrics[0].size()) + " bytes, " +
                  (metrics[0] == metrics[1] ? "identical" : "DIFFERENT")};
}

struct Criterion {
  std::string name;
  double budget_seconds;
  std::function<Outcome(const Context&)> run;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"amr acceptance criteria"};
  int which = 0;
  std::string work = (fs::temp_directory_path() / "amr_acceptance").string();
  std::string data_root;
  if (const char* env = std::getenv("AMR_DATA_ROOT")) data_root = env;
  if (data_root.empty()) data_root = AMR_TEST_DATA_ROOT;
  app.add_option("--criterion", which, "criterion number (1-9)")->required()->check(CLI::Range(1, 9));
  app.add_option("--work-dir", work, "scratch directory for training runs");
  app.add_option("--data-root", data_root, "dataset root");
  CLI11_PARSE(app, argc, argv);

  torch::set_num_threads(1);
  const std::map<int, Criterion> criteria = {
      {1, {"mixing algebra", 10, mixing_suite}},
      {2, {"gradient oracle", 60, gradient_oracle}},
      {3, {"spectral bound", 10, spectral_bound}},
      {4, {"update isolation", 30, isolation}},
      {5, {"disentanglement oracle", 120, disentanglement}},
      {6, {"spiral beta sweep", 15 * 60, spiral_sweep}},
      {7, {"mnist smoke", 2 * 3600, mnist_smoke_run}},
      {8, {"supervised mixer", 30 * 60, supervised_mixer}},
      {9, {"determinism", 10 * 60, determinism}},
  };
  const auto& c = criteria.at(which);
  const Context ctx{fs::path(work), fs::path(data_root), fs::path(AMR_CLI_PATH)};
  fs::create_directories(ctx.work);

  const auto start = std::chrono::steady_clock::now();
  Outcome out;
  try {
    out = c.run(ctx);
  } catch (const std::exception& e) {
    out = {false, std::string("error: ") + e.what()};
  }
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  const bool in_budget = seconds <= c.budget_seconds;
  const bool pass = out.pass && in_budget;
  std::cout << "criterion " << which << ": " << (pass ? "PASS" : "FAIL") << " " << c.name << " (" << fmt(seconds, 1)
            << " s, budget " << fmt(c.budget_seconds, 0) << " s" << (in_budget ? "" : ", OVER BUDGET") << ") "
            << out.detail << std::endl;
  return pass ? 0 : 1;
}
