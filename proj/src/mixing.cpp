#include "amr/mixing.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>

#include "amr/errors.hpp"

namespace amr {

namespace {

void require_same_shape(const torch::Tensor& a, const torch::Tensor& b, std::string_view what) {
  if (a.sizes() != b.sizes()) {
    throw std::invalid_argument(std::string(what) + ": shape mismatch");
  }
}

// Reshapes per-example scalars (N) so they broadcast over (N, c, s, s).
torch::Tensor per_example(const torch::Tensor& v, const torch::Tensor& like) {
  std::vector<std::int64_t> shape(static_cast<std::size_t>(like.dim()), 1);
  shape[0] = v.size(0);
  return v.to(like.dtype()).view(shape);
}

// (c) or (N, c) mask broadcast over the spatial extent of `code`.
torch::Tensor spatial_mask(const torch::Tensor& mask, const torch::Tensor& code) {
  const auto channel_dim = code.dim() - 3;
  if (code.dim() != 3 && code.dim() != 4) throw std::invalid_argument("mix_masked: code must be rank 3 or 4");
  const auto c = code.size(channel_dim);
  if (mask.dim() == 1) {
    if (mask.size(0) != c) throw std::invalid_argument("mix_masked: mask length != channel count");
    return mask.to(code.dtype()).view({c, 1, 1});
  }
  if (mask.dim() == 2 && code.dim() == 4) {
    if (mask.size(0) != code.size(0) || mask.size(1) != c) {
      throw std::invalid_argument("mix_masked: mask shape != (N, c)");
    }
    return mask.to(code.dtype()).view({mask.size(0), c, 1, 1});
  }
  throw std::invalid_argument("mix_masked: mask must be (c) or (N, c)");
}

}  // namespace

MixWeights::MixWeights(std::vector<double> weights) : weights_(std::move(weights)) {
  if (weights_.size() < 2) throw std::invalid_argument("MixWeights: k must be >= 2");
  double sum = 0.0;
  for (double w : weights_) {
    if (!(w >= 0.0 && w <= 1.0)) throw std::invalid_argument("MixWeights: weight outside [0,1]");
    sum += w;
  }
  if (std::abs(sum - 1.0) > 1e-6) throw std::invalid_argument("MixWeights: weights must sum to 1");
}

torch::Tensor FeatureMask::to_tensor(torch::TensorOptions options) const {
  auto t = torch::empty({static_cast<std::int64_t>(mask.size())}, torch::kFloat64);
  auto acc = t.accessor<double, 1>();
  for (std::size_t i = 0; i < mask.size(); ++i) acc[static_cast<std::int64_t>(i)] = mask[i];
  return t.to(options);
}

double sample_convex_weight(Rng& rng) { return rng.uniform(); }

MixWeights sample_simplex_weights(Rng& rng, int k) {
  if (k < 2) throw std::invalid_argument("sample_simplex_weights: k must be >= 2");
  // Dirichlet(1, ..., 1) by normalising Gamma(1, 1) draws.
  std::vector<double> g(static_cast<std::size_t>(k));
  double sum = 0.0;
  do {
    sum = 0.0;
    for (auto& v : g) {
      v = rng.gamma(1.0);
      sum += v;
    }
  } while (sum <= 0.0);
  for (auto& v : g) v /= sum;
  // Normalisation error can leave the last weight a few ulps off; fold it in.
  const double head = std::accumulate(g.begin(), g.end() - 1, 0.0);
  g.back() = std::max(0.0, 1.0 - head);
  return MixWeights(std::move(g));
}

FeatureMask sample_feature_mask(Rng& rng, std::span<const double> probs) {
  FeatureMask out;
  out.probs.assign(probs.begin(), probs.end());
  out.mask.resize(probs.size());
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const double p = probs[i];
    if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("sample_feature_mask: probability outside [0,1]");
    out.mask[i] = rng.uniform() < p ? 1 : 0;
  }
  return out;
}

void check_latent(const torch::Tensor& code, std::string_view what) {
  if (!code.defined() || (code.dim() != 3 && code.dim() != 4)) {
    throw std::invalid_argument(std::string(what) + ": latent code must be (c,s,s) or (N,c,s,s)");
  }
  if (!torch::isfinite(code).all().item<bool>()) {
    throw std::invalid_argument(std::string(what) + ": latent code has non-finite entries");
  }
}

torch::Tensor mix_mixup(const torch::Tensor& h1, const torch::Tensor& h2, double alpha) {
  require_same_shape(h1, h2, "mix_mixup");
  return h1 * alpha + h2 * (1.0 - alpha);
}

torch::Tensor mix_convex(std::span<const torch::Tensor> codes, const MixWeights& w) {
  if (codes.size() != w.size()) throw std::invalid_argument("mix_convex: weight count != code count");
  for (const auto& h : codes) require_same_shape(h, codes[0], "mix_convex");
  auto out = codes[0] * w[0];
  for (std::size_t j = 1; j < codes.size(); ++j) out = out + codes[j] * w[j];
  return out;
}

torch::Tensor mix_convex(std::span<const torch::Tensor> codes, const torch::Tensor& weights) {
  if (codes.empty()) throw std::invalid_argument("mix_convex: no codes");
  for (const auto& h : codes) require_same_shape(h, codes[0], "mix_convex");
  const auto k = static_cast<std::int64_t>(codes.size());
  if (weights.dim() == 1) {
    if (weights.size(0) != k) throw std::invalid_argument("mix_convex: weight count != code count");
    auto w = weights.to(codes[0].dtype());
    auto out = codes[0] * w[0];
    for (std::int64_t j = 1; j < k; ++j) out = out + codes[static_cast<std::size_t>(j)] * w[j];
    return out;
  }
  if (weights.dim() != 2 || weights.size(1) != k || codes[0].dim() != 4 || weights.size(0) != codes[0].size(0)) {
    throw std::invalid_argument("mix_convex: weights must be (k) or (N, k)");
  }
  auto out = codes[0] * per_example(weights.select(1, 0), codes[0]);
  for (std::int64_t j = 1; j < k; ++j) {
    out = out + codes[static_cast<std::size_t>(j)] * per_example(weights.select(1, j), codes[0]);
  }
  return out;
}

torch::Tensor mix_masked(const torch::Tensor& h1, const torch::Tensor& h2, const FeatureMask& mask) {
  return mix_masked(h1, h2, mask.to_tensor(h1.dtype()));
}

torch::Tensor mix_masked(const torch::Tensor& h1, const torch::Tensor& h2, const torch::Tensor& mask) {
  require_same_shape(h1, h2, "mix_masked");
  const auto m = spatial_mask(mask, h1);
  return h1 * m + h2 * (1.0 - m);
}

torch::Tensor mix_categorical(std::span<const torch::Tensor> codes, const torch::Tensor& source) {
  if (codes.size() < 2) throw std::invalid_argument("mix_categorical: need at least two codes");
  for (const auto& h : codes) require_same_shape(h, codes[0], "mix_categorical");
  torch::Tensor out;
  for (std::size_t j = 0; j < codes.size(); ++j) {
    const auto pick = spatial_mask(source.eq(static_cast<std::int64_t>(j)), codes[j]);
    auto term = codes[j] * pick;
    out = j == 0 ? term : out + term;
  }
  return out;
}

torch::Tensor mix_labels(const torch::Tensor& y1, const torch::Tensor& y2, double alpha) {
  require_same_shape(y1, y2, "mix_labels");
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("mix_labels: alpha outside [0,1]");
  return y1 * alpha + y2 * (1.0 - alpha);
}

torch::Tensor mix_labels(const torch::Tensor& y1, const torch::Tensor& y2, const torch::Tensor& alpha) {
  require_same_shape(y1, y2, "mix_labels");
  if (alpha.dim() == 0) return mix_labels(y1, y2, alpha.item<double>());
  if (y1.dim() != 2 || alpha.dim() != 1 || alpha.size(0) != y1.size(0)) {
    throw std::invalid_argument("mix_labels: alpha must be scalar or (N)");
  }
  const auto a = alpha.to(y1.dtype()).unsqueeze(1);
  return y1 * a + y2 * (1.0 - a);
}

SupervisedMix mix_supervised(const torch::Tensor& h1, const torch::Tensor& h2, const torch::Tensor& y_mix,
                             const LabelEmbedding& embedder, const torch::Tensor& noise,
                             const MaskSampling& sampling) {
  require_same_shape(h1, h2, "mix_supervised");
  if (h1.dim() != 4) throw std::invalid_argument("mix_supervised: expects a code batch (N,c,s,s)");
  auto probs = embedder(y_mix);
  if (probs.dim() != 2 || probs.size(1) != h1.size(1)) {
    throw ConfigError("mix_supervised: embedder emits " + std::to_string(probs.size(-1)) +
                      " probabilities but the latent code has " + std::to_string(h1.size(1)) + " feature maps");
  }
  if (noise.sizes() != probs.sizes()) throw std::invalid_argument("mix_supervised: noise shape != (N, c)");
  const auto u = noise.to(probs.dtype());
  torch::Tensor mask;
  if (sampling.gradient == MaskGradient::StraightThrough) {
    const auto hard = u.lt(probs).to(probs.dtype());
    mask = probs + (hard - probs).detach();
  } else {
    constexpr double eps = 1e-6;
    const auto p = probs.clamp(eps, 1.0 - eps);
    const auto un = u.clamp(eps, 1.0 - eps);
    const auto logits = torch::log(p) - torch::log1p(-p) + torch::log(un) - torch::log1p(-un);
    mask = torch::sigmoid(logits / sampling.temperature);
  }
  return {mix_masked(h1, h2, mask), mask, probs};
}

SupervisedMix mix_supervised(const torch::Tensor& h1, const torch::Tensor& h2, const torch::Tensor& y_mix,
                             const LabelEmbedding& embedder, Rng& rng, const MaskSampling& sampling) {
  auto noise = torch::empty({h1.size(0), h1.size(1)}, torch::kFloat64);
  auto acc = noise.accessor<double, 2>();
  for (std::int64_t n = 0; n < noise.size(0); ++n) {
    for (std::int64_t i = 0; i < noise.size(1); ++i) acc[n][i] = rng.uniform();
  }
  return mix_supervised(h1, h2, y_mix, embedder, noise, sampling);
}

// ---------------------------------------------------------------------------

std::string to_string(MixMode mode) {
  switch (mode) {
    case MixMode::None: return "none";
    case MixMode::Mixup: return "mixup";
    case MixMode::Bern: return "bern";
    case MixMode::MixupK: return "mixup_k";
    case MixMode::BernK: return "bern_k";
    case MixMode::SupBern: return "sup_bern";
    case MixMode::Acai: return "acai";
  }
  return "none";
}

MixMode parse_mix_mode(std::string_view text) {
  for (auto m : {MixMode::None, MixMode::Mixup, MixMode::Bern, MixMode::MixupK, MixMode::BernK, MixMode::SupBern,
                 MixMode::Acai}) {
    if (to_string(m) == text) return m;
  }
  throw std::invalid_argument("unknown mix mode '" + std::string(text) + "'");
}

Mixer::Mixer(MixMode mode, int k, MaskSampling sampling) : mode_(mode), k_(k), sampling_(sampling) {
  const bool k_way = mode == MixMode::MixupK || mode == MixMode::BernK;
  if (k_way && k < 2) throw std::invalid_argument("Mixer: k must be >= 2");
  if (!k_way) k_ = 2;
}

MixDraw Mixer::draw(Rng& rng, std::vector<torch::Tensor> partners, std::int64_t batch,
                    std::int64_t channels) const {
  MixDraw d;
  if (mode_ == MixMode::None) return d;
  if (static_cast<int>(partners.size()) != k_ - 1) throw std::invalid_argument("Mixer::draw: expected k-1 partners");
  d.partners = std::move(partners);

  auto fill = [&](std::int64_t rows, std::int64_t cols, auto&& sample) {
    auto t = torch::empty({rows, cols}, torch::kFloat64);
    auto acc = t.accessor<double, 2>();
    for (std::int64_t n = 0; n < rows; ++n) sample(n, acc[n]);
    return t;
  };

  switch (mode_) {
    case MixMode::Mixup:
    case MixMode::Acai: {
      const double hi = mode_ == MixMode::Acai ? 0.5 : 1.0;
      d.weights = fill(batch, 2, [&](std::int64_t, auto row) {
        const double a = mode_ == MixMode::Acai ? rng.uniform(0.0, hi) : sample_convex_weight(rng);
        row[0] = a;
        row[1] = 1.0 - a;
      });
      break;
    }
    case MixMode::MixupK:
      d.weights = fill(batch, k_, [&](std::int64_t, auto row) {
        const auto w = sample_simplex_weights(rng, k_);
        for (int j = 0; j < k_; ++j) row[j] = w[static_cast<std::size_t>(j)];
      });
      break;
    case MixMode::Bern:
    case MixMode::SupBern: {
      d.mask = fill(batch, channels, [&](std::int64_t, auto row) {
        const std::vector<double> probs(static_cast<std::size_t>(channels), rng.uniform());
        const auto m = sample_feature_mask(rng, probs);
        for (std::int64_t i = 0; i < channels; ++i) row[i] = m.mask[static_cast<std::size_t>(i)];
      });
      if (mode_ == MixMode::SupBern) {
        d.label_alpha = fill(batch, 1, [&](std::int64_t, auto row) { row[0] = rng.uniform(); }).view({batch});
        d.mask_noise = fill(batch, channels, [&](std::int64_t, auto row) {
          for (std::int64_t i = 0; i < channels; ++i) row[i] = rng.uniform();
        });
      }
      break;
    }
    case MixMode::BernK: {
      auto src = torch::empty({batch, channels}, torch::kInt64);
      auto acc = src.accessor<std::int64_t, 2>();
      for (std::int64_t n = 0; n < batch; ++n) {
        for (std::int64_t i = 0; i < channels; ++i) acc[n][i] = rng.index(k_);
      }
      d.source = src;
      break;
    }
    case MixMode::None: break;
  }
  return d;
}

torch::Tensor Mixer::apply(const torch::Tensor& codes, const MixDraw& draw) const {
  if (mode_ == MixMode::None) throw std::logic_error("Mixer::apply: mode 'none' has no mix");
  std::vector<torch::Tensor> all{codes};
  for (const auto& idx : draw.partners) all.push_back(codes.index_select(0, idx));
  switch (mode_) {
    case MixMode::Mixup:
    case MixMode::MixupK:
    case MixMode::Acai: return mix_convex(all, draw.weights);
    case MixMode::Bern:
    case MixMode::SupBern: return mix_masked(all[0], all[1], draw.mask);
    case MixMode::BernK: return mix_categorical(all, draw.source);
    case MixMode::None: break;
  }
  return codes;
}

MixDraw Mixer::identity_draw(std::int64_t batch, std::int64_t channels) const {
  MixDraw d;
  if (mode_ == MixMode::None) return d;
  const auto self = torch::arange(batch, torch::kInt64);
  for (int j = 1; j < k_; ++j) d.partners.push_back(self);
  auto w = torch::zeros({batch, k_}, torch::kFloat64);
  w.select(1, 0).fill_(1.0);
  d.weights = w;
  d.mask = torch::ones({batch, channels}, torch::kFloat64);
  d.source = torch::zeros({batch, channels}, torch::kInt64);
  d.label_alpha = torch::ones({batch}, torch::kFloat64);
  d.mask_noise = torch::zeros({batch, channels}, torch::kFloat64);
  return d;
}

}  // namespace amr
