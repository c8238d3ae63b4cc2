#include "amr/trainer.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include "amr/checkpoint.hpp"
#include "amr/errors.hpp"
#include "amr/eval.hpp"

namespace amr {

namespace fs = std::filesystem;

namespace {

constexpr double kAdamEps = 1e-8;

std::vector<std::pair<std::string, torch::Tensor>> named_group(Networks& nets,
                                                               const std::vector<std::string>& prefixes) {
  std::vector<std::pair<std::string, torch::Tensor>> out;
  for (const auto& item : nets->named_parameters()) {
    for (const auto& p : prefixes) {
      if (item.key().rfind(p, 0) == 0) {
        out.emplace_back(item.key(), item.value());
        break;
      }
    }
  }
  return out;
}

void check_finite(const LossReport& r) {
  const auto bad = r.first_non_finite();
  if (!bad.empty()) {
    throw NumericError(bad, "non-finite loss term '" + bad + "' = " + std::to_string(r.at(bad)) + "; losses: " +
                                r.to_json().dump());
  }
}

std::vector<torch::Tensor> grads_of(const torch::Tensor& total, const std::vector<torch::Tensor>& params) {
  return torch::autograd::grad({total}, params, /*grad_outputs=*/{}, /*retain_graph=*/false,
                               /*create_graph=*/false, /*allow_unused=*/true);
}

}  // namespace

// --- Adam ---------------------------------------------------------------------

Adam::Adam(std::vector<std::pair<std::string, torch::Tensor>> params, OptimizerConfig cfg)
    : params_(std::move(params)), cfg_(cfg) {
  cfg_.validate();
  for (const auto& [name, p] : params_) {
    m_.push_back(torch::zeros_like(p).detach());
    v_.push_back(torch::zeros_like(p).detach());
  }
}

std::vector<torch::Tensor> Adam::tensors() const {
  std::vector<torch::Tensor> out;
  for (const auto& [name, p] : params_) out.push_back(p);
  return out;
}

void Adam::step(const std::vector<torch::Tensor>& grads) {
  if (grads.size() != params_.size()) throw std::invalid_argument("Adam::step: gradient count mismatch");
  torch::NoGradGuard no_grad;
  ++steps_;
  const double bc1 = 1.0 - std::pow(cfg_.b1, static_cast<double>(steps_));
  const double bc2 = 1.0 - std::pow(cfg_.b2, static_cast<double>(steps_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (!grads[i].defined()) continue;
    auto& p = params_[i].second;
    auto g = grads[i];
    if (cfg_.weight_decay > 0.0) g = g + p * cfg_.weight_decay;
    m_[i].mul_(cfg_.b1).add_(g, 1.0 - cfg_.b1);
    v_[i].mul_(cfg_.b2).addcmul_(g, g, 1.0 - cfg_.b2);
    const auto update = (m_[i] / bc1) / ((v_[i] / bc2).sqrt() + kAdamEps);
    p.add_(update, -cfg_.lr);
  }
}

std::map<std::string, torch::Tensor> Adam::state() const {
  std::map<std::string, torch::Tensor> out;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    out[params_[i].first + ".m"] = m_[i];
    out[params_[i].first + ".v"] = v_[i];
  }
  return out;
}

void Adam::load_state(const std::map<std::string, torch::Tensor>& tensors, std::int64_t steps) {
  torch::NoGradGuard no_grad;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    for (auto* buf : {&m_[i], &v_[i]}) {
      const auto key = params_[i].first + (buf == &m_[i] ? ".m" : ".v");
      auto it = tensors.find(key);
      if (it == tensors.end()) throw ConfigError("checkpoint lacks optimizer state '" + key + "'");
      if (it->second.sizes() != buf->sizes()) throw ConfigError("optimizer state '" + key + "' has the wrong shape");
      buf->copy_(it->second);
    }
  }
  steps_ = steps;
}

// --- setup ----------------------------------------------------------------------

AutoencoderSpec spec_for(const ExperimentConfig& cfg, const Dataset& data) {
  AutoencoderSpec s;
  s.channels = data.channels;
  s.height = data.height;
  s.width = data.width;
  s.code_channels = cfg.d_h / 16;
  s.code_size = 4;
  s.width_base = cfg.width;
  s.mlp_layers = cfg.mlp_layers;
  s.squash = s.family() == NetFamily::Mlp ? OutputSquash::None : OutputSquash::Tanh;
  s.sn_iterations = cfg.sn_iters;
  s.num_attributes = cfg.mix == MixMode::SupBern ? static_cast<std::int64_t>(data.attribute_names.size()) : 0;
  s.num_classes = data.num_classes;
  if (cfg.mix == MixMode::SupBern && s.num_attributes == 0) {
    throw UsageError("config key 'mix': sup_bern needs a dataset with attributes (e.g. mnist_attr)");
  }
  return s;
}

ObjectiveConfig objective_for(const ExperimentConfig& cfg) {
  ObjectiveConfig o;
  o.mixer = Mixer(cfg.mix, cfg.k, MaskSampling{cfg.mask_gradient, cfg.temperature});
  o.weights = LossWeights{cfg.lambda, cfg.beta};
  o.acai_gamma = cfg.acai_gamma;
  o.cls_on_real = cfg.cls_on_real;
  return o;
}

TrainState TrainState::create(const ExperimentConfig& cfg, const AutoencoderSpec& spec, std::uint64_t init_seed,
                              Rng rng) {
  TrainState s;
  s.config = cfg;
  torch::manual_seed(init_seed);
  s.nets = Networks(spec);
  s.nets->train();
  s.gen_opt = Adam(named_group(s.nets, {"encoder.", "decoder.", "embedder."}), cfg.optim);
  s.disc_opt = Adam(named_group(s.nets, {"discriminator."}), cfg.optim);
  OptimizerConfig probe_cfg = cfg.optim;
  if (cfg.probe_lr > 0.0) probe_cfg.lr = cfg.probe_lr;
  s.probe_opt = Adam(named_group(s.nets, {"probe."}), probe_cfg);
  s.rng = std::move(rng);
  return s;
}

RunSeeds RunSeeds::from(std::uint64_t seed) {
  Rng root(seed);
  RunSeeds s{};
  s.ablation = root.next_u64();
  s.init = root.next_u64();
  s.train = root.next_u64();
  return s;
}

// --- steps ----------------------------------------------------------------------

std::vector<torch::Tensor> sample_partners(std::int64_t batch, int k, Rng& rng) {
  if (batch < 2) throw std::invalid_argument("sample_partners: batch size must be >= 2");
  if (k < 2) throw std::invalid_argument("sample_partners: k must be >= 2");
  std::vector<torch::Tensor> out;
  out.push_back(torch::arange(batch, torch::kInt64));
  for (int j = 1; j < k; ++j) out.push_back(torch::tensor(rng.permutation(batch), torch::kInt64));
  return out;
}

MixDraw draw_mix(TrainState& state, std::int64_t batch) {
  const auto obj = objective_for(state.config);
  const auto channels = state.nets->spec().code_channels;
  if (!obj.mixer.mixes()) return obj.mixer.identity_draw(batch, channels);
  auto partners = sample_partners(batch, obj.mixer.k(), state.rng);
  partners.erase(partners.begin());
  return obj.mixer.draw(state.rng, std::move(partners), batch, channels);
}

LossReport discriminator_step(TrainState& state, const Batch& batch, const MixDraw& draw) {
  state.nets->train();
  auto res = discriminator_loss(state.nets, batch, draw, objective_for(state.config));
  check_finite(res.report);
  state.disc_opt.step(grads_of(res.total, state.disc_opt.tensors()));
  return res.report;
}

LossReport generator_step(TrainState& state, const Batch& batch, const MixDraw& draw) {
  // Inference-mode D: no power iteration, so D's buffers stay untouched.
  state.nets->eval();
  auto res = generator_loss(state.nets, batch, draw, objective_for(state.config));
  state.nets->train();
  check_finite(res.report);
  state.gen_opt.step(grads_of(res.total, state.gen_opt.tensors()));
  return res.report;
}

std::pair<std::int64_t, std::int64_t> probe_step(TrainState& state, const Batch& batch) {
  if (!state.nets->has_probe() || !batch.labels.defined()) return {0, 0};
  torch::Tensor h;
  {
    torch::NoGradGuard no_grad;
    h = state.nets->encode(batch.x);
  }
  const auto logits = state.nets->probe_predict(h);
  const auto loss = torch::nn::functional::cross_entropy(logits, batch.labels);
  const double v = loss.item<double>();
  if (!std::isfinite(v)) throw NumericError("probe_ce", "non-finite probe loss");
  const auto correct = logits.detach().argmax(1).eq(batch.labels).sum().item<std::int64_t>();
  state.probe_opt.step(grads_of(loss, state.probe_opt.tensors()));
  return {correct, batch.size()};
}

StepResult train_step(TrainState& state, const Batch& batch) {
  StepResult out;
  const auto draw = draw_mix(state, batch.size());
  out.report = discriminator_step(state, batch, draw);
  out.report.merge(generator_step(state, batch, draw));
  std::tie(out.probe_correct, out.probe_total) = probe_step(state, batch);
  ++state.step;
  return out;
}

// --- runs -----------------------------------------------------------------------

Batch make_batch(const Split& split, const torch::Tensor& index) {
  Batch b;
  b.x = split.images.index_select(0, index);
  if (split.labels.defined()) b.labels = split.labels.index_select(0, index);
  if (split.attributes.defined()) b.attributes = split.attributes.index_select(0, index);
  return b;
}

const Split& validation_split(const ExperimentConfig& cfg, const Dataset& data) {
  return cfg.validate_on_test ? data.test : data.val;
}

Dataset load_for(const ExperimentConfig& cfg) {
  LoadOptions opts;
  opts.val_size = cfg.val_size;
  opts.spiral_n = cfg.spiral_n;
  opts.noise_sd = cfg.noise_sd;
  auto data = load_dataset(cfg.dataset, cfg.data_root, opts);
  if (cfg.n_keep > 0) {
    if (cfg.n_keep > data.train.size()) {
      throw UsageError("config key 'n_keep': " + std::to_string(cfg.n_keep) + " exceeds the " +
                       std::to_string(data.train.size()) + " training examples");
    }
    Rng rng(RunSeeds::from(cfg.seed).ablation);
    data = ablate(data, cfg.n_keep, rng);
  }
  return data;
}

namespace {

// Keeps the first `epochs` records of a jsonl log (used when resuming).
std::vector<std::string> head_records(const fs::path& path, std::int64_t epochs) {
  std::vector<std::string> lines;
  std::ifstream in(path);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    if (j.value("epoch", std::int64_t{0}) <= epochs) lines.push_back(line);
  }
  return lines;
}

void write_lines(const fs::path& path, const std::vector<std::string>& lines) {
  std::ofstream out(path, std::ios::trunc);
  for (const auto& l : lines) out << l << '\n';
}

}  // namespace

RunResult run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  const auto seeds = RunSeeds::from(cfg.seed);
  auto data = load_for(cfg);
  const auto spec = spec_for(cfg, data);

  const fs::path out = cfg.output;
  fs::create_directories(out / "checkpoints");
  const auto latest = out / "checkpoints" / "latest.ckpt";
  const auto best = out / "checkpoints" / "best.ckpt";
  const auto metrics_path = out / "metrics.jsonl";
  const auto timing_path = out / "timing.jsonl";

  TrainState state;
  std::vector<nlohmann::json> metrics;
  if (!cfg.resume.empty()) {
    state = load_state(cfg.resume, cfg, spec);
    state.config = cfg;
    const auto kept = head_records(metrics_path, state.epoch);
    for (const auto& l : kept) metrics.push_back(nlohmann::json::parse(l));
    write_lines(metrics_path, kept);
    write_lines(timing_path, head_records(timing_path, state.epoch));
  } else {
    state = TrainState::create(cfg, spec, seeds.init, Rng(seeds.train));
    write_lines(metrics_path, {});
    write_lines(timing_path, {});
    save_state(latest, state);
  }
  {
    std::ofstream c(out / "config.txt", std::ios::trunc);
    c << cfg.to_text();
  }

  const auto& train = data.train;
  const auto& val = validation_split(cfg, data);
  const std::int64_t n = train.size();
  if (n < 2) throw DataError("dataset '" + cfg.dataset + "' has fewer than 2 training examples");
  const std::int64_t bs = std::min(cfg.batch_size, n);
  const std::int64_t batches = n / bs;
  const bool probe_val = state.nets->has_probe() && !val.empty() && val.labels.defined();

  while (state.epoch < cfg.epochs) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto perm = torch::tensor(state.rng.permutation(n), torch::kInt64);
    std::map<std::string, double> sums;
    std::int64_t correct = 0, seen = 0;
    for (std::int64_t b = 0; b < batches; ++b) {
      const auto res = train_step(state, make_batch(train, perm.slice(0, b * bs, (b + 1) * bs)));
      for (const auto& [k, v] : res.report.terms()) sums[k] += v;
      correct += res.probe_correct;
      seen += res.probe_total;
    }
    ++state.epoch;

    nlohmann::json rec = nlohmann::json::object();
    rec["epoch"] = state.epoch;
    for (const auto& [k, v] : sums) rec[k] = v / static_cast<double>(batches);
    rec["probe_train_acc"] = seen > 0 ? nlohmann::json(static_cast<double>(correct) / seen) : nlohmann::json();
    bool improved = false;
    if (probe_val) {
      state.nets->eval();
      const double acc = probe_accuracy(state.nets, val);
      state.nets->train();
      rec["probe_val_acc"] = acc;
      if (acc > state.best_val_acc) {
        state.best_val_acc = acc;
        improved = true;
      }
    } else {
      rec["probe_val_acc"] = nullptr;
    }
    rec["step"] = state.step;
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (cfg.log_wall_time) rec["wall_seconds"] = wall;

    save_state(latest, state);
    if (improved) save_state(best, state);
    {
      std::ofstream m(metrics_path, std::ios::app);
      m << rec.dump() << '\n';
      std::ofstream t(timing_path, std::ios::app);
      t << nlohmann::json{{"epoch", state.epoch}, {"wall_seconds", wall}}.dump() << '\n';
    }
    metrics.push_back(std::move(rec));
  }
  return {std::move(state), std::move(metrics), std::move(data)};
}

}  // namespace amr
