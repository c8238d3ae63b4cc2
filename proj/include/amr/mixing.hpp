#pragma once

// Latent recombination operators and their samplers.
//
// A latent code is a tensor of shape (c, s, s) or a batch (N, c, s, s); c is the
// number of feature maps. Attribute vectors are tensors of shape (a) or (N, a).
// Every operator is a plain tensor expression, so autograd flows through it.

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <torch/torch.h>

#include "amr/rng.hpp"

namespace amr {

/// Convex-combination weights on the (k-1)-simplex.
class MixWeights {
 public:
  /// Throws std::invalid_argument unless k >= 2, every weight is in [0, 1]
  /// and the weights sum to 1 within 1e-6.
  explicit MixWeights(std::vector<double> weights);

  std::size_t size() const { return weights_.size(); }
  double operator[](std::size_t i) const { return weights_[i]; }
  std::span<const double> values() const { return weights_; }

 private:
  std::vector<double> weights_;
};

/// Per-feature-map binary mask and the Bernoulli parameters it was drawn from.
struct FeatureMask {
  std::vector<std::uint8_t> mask;
  std::vector<double> probs;

  std::size_t channels() const { return mask.size(); }
  /// Mask as a float tensor of shape (c).
  torch::Tensor to_tensor(torch::TensorOptions options = torch::kFloat32) const;
};

double sample_convex_weight(Rng& rng);
MixWeights sample_simplex_weights(Rng& rng, int k);
FeatureMask sample_feature_mask(Rng& rng, std::span<const double> probs);

/// Throws std::invalid_argument if `code` is not rank 3/4 or holds NaN/Inf.
void check_latent(const torch::Tensor& code, std::string_view what);

/// alpha * h1 + (1 - alpha) * h2.
torch::Tensor mix_mixup(const torch::Tensor& h1, const torch::Tensor& h2, double alpha);

/// sum_j w_j h_j with one weight vector shared by the whole batch.
torch::Tensor mix_convex(std::span<const torch::Tensor> codes, const MixWeights& w);

/// Batched form: `weights` is (k) or (N, k), row n weighting example n.
torch::Tensor mix_convex(std::span<const torch::Tensor> codes, const torch::Tensor& weights);

/// Feature map i comes from h1 where mask[i] = 1 and from h2 where it is 0.
torch::Tensor mix_masked(const torch::Tensor& h1, const torch::Tensor& h2, const FeatureMask& mask);

/// Tensor form: `mask` is (c) or (N, c), broadcast over the spatial extent.
/// Real-valued masks are accepted so relaxed or straight-through masks pass
/// gradients; a {0,1} mask performs an exact selection.
torch::Tensor mix_masked(const torch::Tensor& h1, const torch::Tensor& h2, const torch::Tensor& mask);

/// k-way masked recombination: feature map i of example n is taken from
/// codes[source[n][i]]. `source` is an int64 tensor of shape (N, c).
torch::Tensor mix_categorical(std::span<const torch::Tensor> codes, const torch::Tensor& source);

/// alpha * y1 + (1 - alpha) * y2. `alpha` is a scalar or an (N) tensor.
torch::Tensor mix_labels(const torch::Tensor& y1, const torch::Tensor& y2, double alpha);
torch::Tensor mix_labels(const torch::Tensor& y1, const torch::Tensor& y2, const torch::Tensor& alpha);

enum class MaskGradient { StraightThrough, Relaxed };

/// Maps an attribute batch (N, a) to Bernoulli parameters (N, c) in [0, 1].
using LabelEmbedding = std::function<torch::Tensor(const torch::Tensor&)>;

struct SupervisedMix {
  torch::Tensor mix;    // (N, c, s, s)
  torch::Tensor mask;   // (N, c); hard {0,1} values in the forward pass
  torch::Tensor probs;  // (N, c) embedder output
};

struct MaskSampling {
  MaskGradient gradient = MaskGradient::StraightThrough;
  /// Temperature of the relaxed (logistic-sigmoid) mask.
  double temperature = 0.5;
};

/// Class-conditioned Bernoulli mixing. `noise` holds Uniform(0,1) draws of
/// shape (N, c) and fixes the sampled mask, which keeps the call a deterministic
/// function of its inputs.
///
/// Straight-through: m = 1[noise < p] forward, dm/dp = 1 backward.
/// Relaxed: m = sigmoid((logit p + logit noise) / T), which is differentiable
/// everywhere; it still selects exactly in the limit T -> 0 only.
SupervisedMix mix_supervised(const torch::Tensor& h1, const torch::Tensor& h2, const torch::Tensor& y_mix,
                             const LabelEmbedding& embedder, const torch::Tensor& noise,
                             const MaskSampling& sampling = {});

/// Draws the noise from `rng` and forwards to the overload above.
SupervisedMix mix_supervised(const torch::Tensor& h1, const torch::Tensor& h2, const torch::Tensor& y_mix,
                             const LabelEmbedding& embedder, Rng& rng, const MaskSampling& sampling = {});

// ---------------------------------------------------------------------------
// Batched random mixing used by the training objectives.

enum class MixMode { None, Mixup, Bern, MixupK, BernK, SupBern, Acai };

std::string to_string(MixMode mode);
MixMode parse_mix_mode(std::string_view text);

/// All randomness consumed by one application of a mixer to a batch. Holding it
/// explicitly makes the objectives deterministic functions of (batch, params,
/// draw), which the finite-difference oracles rely on.
struct MixDraw {
  /// k-1 partner index tensors (int64, N); the batch itself is partner 0.
  std::vector<torch::Tensor> partners;
  /// Convex weights (N, k) for mixup / mixup_k / acai.
  torch::Tensor weights;
  /// Hard mask (N, c) for bern and for the unsupervised term of sup_bern.
  torch::Tensor mask;
  /// Source index (N, c) for bern_k.
  torch::Tensor source;
  /// Label weights (N) and mask noise (N, c) for sup_bern.
  torch::Tensor label_alpha;
  torch::Tensor mask_noise;
};

class Mixer {
 public:
  Mixer(MixMode mode = MixMode::Mixup, int k = 2, MaskSampling sampling = {});

  MixMode mode() const { return mode_; }
  int k() const { return k_; }
  const MaskSampling& sampling() const { return sampling_; }
  bool mixes() const { return mode_ != MixMode::None; }

  /// Samples the per-pair weights / masks for a batch. `partners` must hold
  /// k-1 index tensors (see sample_partners).
  MixDraw draw(Rng& rng, std::vector<torch::Tensor> partners, std::int64_t batch, std::int64_t channels) const;

  /// Unsupervised mix of a code batch (N, c, s, s) under `draw`. For sup_bern
  /// this is the plain Bernoulli term; the class mixer lives in mix_supervised.
  torch::Tensor apply(const torch::Tensor& codes, const MixDraw& draw) const;

  /// Endpoint draw: every weight / mask selects the batch itself, so
  /// apply() returns `codes` unchanged.
  MixDraw identity_draw(std::int64_t batch, std::int64_t channels) const;

 private:
  MixMode mode_;
  int k_;
  MaskSampling sampling_;
};

}  // namespace amr
