#include "amr/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <stdexcept>

#include "amr/png.hpp"

namespace amr {

namespace fs = std::filesystem;

// --- probe ----------------------------------------------------------------------

double probe_accuracy(const ClassifierFn& classify, const Split& split, std::int64_t batch_size) {
  if (split.empty()) throw std::invalid_argument("probe_accuracy: empty split");
  if (!split.labels.defined()) throw std::invalid_argument("probe_accuracy: split has no labels");
  if (batch_size < 1) throw std::invalid_argument("probe_accuracy: batch_size must be >= 1");
  torch::NoGradGuard no_grad;
  std::int64_t correct = 0;
  const auto n = split.size();
  for (std::int64_t i = 0; i < n; i += batch_size) {
    const auto end = std::min(n, i + batch_size);
    const auto logits = classify(split.images.slice(0, i, end));
    correct += logits.argmax(1).eq(split.labels.slice(0, i, end)).sum().item<std::int64_t>();
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

double probe_accuracy(Networks& nets, const Split& split, std::int64_t batch_size) {
  if (!nets->has_probe()) throw std::invalid_argument("probe_accuracy: networks have no probe");
  return probe_accuracy([&](const torch::Tensor& x) { return nets->probe_predict(nets->encode(x)); }, split,
                        batch_size);
}

ProbeResult ProbeResult::from_metrics(const std::vector<nlohmann::json>& records, std::uint64_t seed) {
  ProbeResult r;
  r.seed = seed;
  for (const auto& rec : records) {
    if (rec.contains("probe_train_acc") && rec["probe_train_acc"].is_number()) {
      r.train_acc.push_back(rec["probe_train_acc"].get<double>());
    }
    if (rec.contains("probe_val_acc") && rec["probe_val_acc"].is_number()) {
      r.val_acc.push_back(rec["probe_val_acc"].get<double>());
    }
  }
  if (!r.val_acc.empty()) r.best_val_acc = *std::max_element(r.val_acc.begin(), r.val_acc.end());
  return r;
}

// --- disentanglement ------------------------------------------------------------

namespace {

torch::Tensor codes_of(const CodeFn& encode, const torch::Tensor& factors) {
  auto z = encode(factors);
  return z.detach().to(torch::kFloat64).reshape({factors.size(0), -1});
}

}  // namespace

DisentanglementResult disentanglement_score(const CodeFn& encode, const FactorSpec& spec,
                                            const DisentanglementConfig& cfg, Rng& rng) {
  const auto varying = spec.varying_factors();
  if (varying.empty()) throw std::invalid_argument("disentanglement_score: no factor varies");
  if (cfg.n_votes < 2 || cfg.vote_batch < 2 || cfg.global_samples < 2) {
    throw std::invalid_argument("disentanglement_score: too few votes or samples");
  }
  const auto n_train = static_cast<std::int64_t>(std::llround(cfg.n_votes * cfg.train_fraction));
  if (n_train < 1 || n_train >= cfg.n_votes) {
    throw std::invalid_argument("disentanglement_score: train_fraction leaves an empty vote split");
  }
  torch::NoGradGuard no_grad;
  const auto n_factors = static_cast<std::int64_t>(spec.num_factors());

  // (1) per-dimension scale over uniform factor rows
  auto rows = torch::empty({cfg.global_samples, n_factors}, torch::kInt64);
  {
    auto acc = rows.accessor<std::int64_t, 2>();
    for (std::int64_t i = 0; i < cfg.global_samples; ++i) {
      for (std::int64_t f = 0; f < n_factors; ++f) acc[i][f] = rng.index(spec.cardinalities[f]);
    }
  }
  std::vector<torch::Tensor> chunks;
  for (std::int64_t i = 0; i < cfg.global_samples; i += 1000) {
    chunks.push_back(codes_of(encode, rows.slice(0, i, std::min(cfg.global_samples, i + 1000))));
  }
  const auto global_std = torch::cat(chunks, 0).std(0, /*unbiased=*/false);
  const auto dims = global_std.size(0);
  const auto collapsed = global_std.lt(cfg.collapse_std);
  const auto safe_std = torch::where(collapsed, torch::ones_like(global_std), global_std);

  DisentanglementResult res;
  for (std::int64_t d = 0; d < dims; ++d) {
    if (collapsed[d].item<bool>()) res.collapsed.push_back(static_cast<int>(d));
  }
  if (static_cast<std::int64_t>(res.collapsed.size()) == dims) {
    throw std::invalid_argument("disentanglement_score: every code dimension is collapsed");
  }

  // (2) votes
  std::vector<std::pair<std::int64_t, int>> votes;  // (argmin dim, fixed factor)
  votes.reserve(static_cast<std::size_t>(cfg.n_votes));
  const auto inf = torch::full({dims}, std::numeric_limits<double>::infinity(), torch::kFloat64);
  for (std::int64_t v = 0; v < cfg.n_votes; ++v) {
    const int f = varying[static_cast<std::size_t>(rng.index(static_cast<std::int64_t>(varying.size())))];
    const auto batch = fixed_factor_batch(spec, f, cfg.vote_batch, rng);
    const auto z = codes_of(encode, batch.factors) / safe_std;
    const auto var = torch::where(collapsed, inf, z.var(0, /*unbiased=*/false));
    // first minimum on ties
    const auto acc = var.accessor<double, 1>();
    std::int64_t best = 0;
    for (std::int64_t d = 1; d < dims; ++d) {
      if (acc[d] < acc[best]) best = d;
    }
    votes.emplace_back(best, f);
  }

  // (3) majority map on the training votes
  res.votes.assign(static_cast<std::size_t>(dims), std::vector<std::int64_t>(static_cast<std::size_t>(n_factors), 0));
  for (std::int64_t i = 0; i < n_train; ++i) ++res.votes[votes[i].first][votes[i].second];
  res.majority.assign(static_cast<std::size_t>(dims), -1);
  for (std::int64_t d = 0; d < dims; ++d) {
    const auto& row = res.votes[d];
    const auto it = std::max_element(row.begin(), row.end());
    if (*it > 0) res.majority[d] = static_cast<int>(it - row.begin());
  }

  // (4) held-out accuracy
  std::int64_t hit = 0;
  for (std::int64_t i = n_train; i < cfg.n_votes; ++i) {
    if (res.majority[votes[i].first] == votes[i].second) ++hit;
  }
  res.train_votes = n_train;
  res.test_votes = cfg.n_votes - n_train;
  res.accuracy = static_cast<double>(hit) / static_cast<double>(res.test_votes);
  return res;
}

CodeFn dsprites_code_fn(Networks& nets) {
  return [nets](const torch::Tensor& factors) mutable {
    torch::NoGradGuard no_grad;
    std::vector<torch::Tensor> out;
    for (std::int64_t i = 0; i < factors.size(0); i += 256) {
      const auto rows = factors.slice(0, i, std::min(factors.size(0), i + 256));
      out.push_back(nets->encode(render_dsprites(rows)).flatten(1));
    }
    return torch::cat(out, 0);
  };
}

// --- grids ----------------------------------------------------------------------

torch::Tensor interpolation_grid(Networks& nets, GridMode mode, const torch::Tensor& x1, const torch::Tensor& x2,
                                 int steps, std::uint64_t row_seed) {
  if (steps < 2) throw std::invalid_argument("interpolation_grid: steps must be >= 2");
  torch::NoGradGuard no_grad;
  nets->eval();
  const auto a = x1.dim() == 3 ? x1.unsqueeze(0) : x1;
  const auto b = x2.dim() == 3 ? x2.unsqueeze(0) : x2;
  const auto h1 = nets->encode(a);
  const auto h2 = nets->encode(b);
  std::vector<double> u;
  if (mode == GridMode::Bernoulli) {
    Rng rng(row_seed);
    for (std::int64_t i = 0; i < h1.size(1); ++i) u.push_back(rng.uniform());
  }
  std::vector<torch::Tensor> tiles;
  for (int j = 0; j < steps; ++j) {
    const double t = static_cast<double>(j) / (steps - 1);
    torch::Tensor h;
    if (mode == GridMode::Convex) {
      // lerp is exact at both endpoints and when h1 == h2
      h = torch::lerp(h1, h2, t);
    } else {
      auto mask = torch::empty({1, h1.size(1), 1, 1}, torch::kBool);
      for (std::size_t i = 0; i < u.size(); ++i) mask[0][static_cast<std::int64_t>(i)] = u[i] < 1.0 - t;
      h = torch::where(mask, h1, h2);
    }
    tiles.push_back(nets->decode(h)[0]);
  }
  nets->train();
  return torch::cat(tiles, 2);
}

torch::Tensor stack_rows(const std::vector<torch::Tensor>& rows) { return torch::cat(rows, 1); }

void write_grid_png(const fs::path& path, const torch::Tensor& image) {
  if (image.dim() != 3) throw std::invalid_argument("write_grid_png: expected (C, H, W)");
  const auto hwc = to_uint8(image).permute({1, 2, 0}).contiguous();
  const auto* data = hwc.data_ptr<std::uint8_t>();
  write_png(path, {data, static_cast<std::size_t>(hwc.numel())}, static_cast<int>(image.size(2)),
            static_cast<int>(image.size(1)), static_cast<int>(image.size(0)));
}

// --- spiral ---------------------------------------------------------------------

double spiral_coverage(const torch::Tensor& points, const torch::Tensor& reference, double epsilon) {
  if (!(epsilon > 0.0)) throw std::invalid_argument("spiral_coverage: epsilon must be > 0");
  if (reference.numel() == 0) throw std::invalid_argument("spiral_coverage: empty reference set");
  if (points.numel() == 0) throw std::invalid_argument("spiral_coverage: no points");
  const auto p = points.detach().to(torch::kFloat64).reshape({-1, 2});
  const auto r = reference.detach().to(torch::kFloat64).reshape({-1, 2});
  const auto rx = r.select(1, 0).unsqueeze(0);
  const auto ry = r.select(1, 1).unsqueeze(0);
  const double eps2 = epsilon * epsilon;
  std::int64_t inside = 0;
  const auto m = p.size(0);
  for (std::int64_t i = 0; i < m; i += 256) {
    const auto c = p.slice(0, i, std::min(m, i + 256));
    const auto dx = c.select(1, 0).unsqueeze(1) - rx;
    const auto dy = c.select(1, 1).unsqueeze(1) - ry;
    const auto d2 = dx * dx + dy * dy;
    inside += std::get<0>(d2.min(1)).le(eps2).sum().item<std::int64_t>();
  }
  return static_cast<double>(inside) / static_cast<double>(m);
}

torch::Tensor decoded_mix_points(Networks& nets, const Split& split, std::int64_t n, Rng& rng) {
  if (split.empty()) throw std::invalid_argument("decoded_mix_points: empty split");
  torch::NoGradGuard no_grad;
  nets->eval();
  std::vector<std::int64_t> i1(n), i2(n);
  std::vector<double> alpha(n);
  for (std::int64_t i = 0; i < n; ++i) {
    i1[i] = rng.index(split.size());
    i2[i] = rng.index(split.size());
    alpha[i] = rng.uniform();
  }
  const auto h1 = nets->encode(split.images.index_select(0, torch::tensor(i1, torch::kInt64)));
  const auto h2 = nets->encode(split.images.index_select(0, torch::tensor(i2, torch::kInt64)));
  const auto a = torch::tensor(alpha, torch::kFloat64).to(h1.dtype()).view({n, 1, 1, 1});
  const auto out = nets->decode(h1 * a + h2 * (1 - a)).reshape({n, 2});
  nets->train();
  return out;
}

// --- records --------------------------------------------------------------------

nlohmann::json ResultRecord::to_json() const {
  return {{"metric", metric}, {"value", value}, {"config_digest", config_digest}, {"seed", seed}};
}

void append_result(const fs::path& dir, const ResultRecord& record) {
  fs::create_directories(dir);
  std::ofstream out(dir / "results.jsonl", std::ios::app);
  out << record.to_json().dump() << '\n';
}

}  // namespace amr
