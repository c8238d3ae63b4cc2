#pragma once

// Loss computations for AE+GAN, AMR (unsupervised mixes, optional consistency
// term), the supervised class mixer, and the ACAI baseline.
//
// The generator-side and discriminator-side objectives are computed by
// separate calls because training evaluates them against different parameter
// values (D is updated first). Both are deterministic functions of
// (networks, batch, draw): all randomness is carried in the MixDraw.

#include <map>
#include <string>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "amr/mixing.hpp"
#include "amr/nets.hpp"

namespace amr {

struct Batch {
  torch::Tensor x;           // (N, C, H, W)
  torch::Tensor labels;      // (N) int64 class labels, optional
  torch::Tensor attributes;  // (N, a) binary attributes, optional

  std::int64_t size() const { return x.size(0); }
};

struct LossWeights {
  double lambda = 10.0;  // reconstruction
  double beta = 0.0;     // consistency

  /// Throws std::invalid_argument unless both are finite and >= 0.
  void validate() const;
};

/// Named loss scalars. Only terms that were computed are present, so a run
/// with beta = 0 has no "consistency" entry.
class LossReport {
 public:
  void set(const std::string& name, double value) { terms_[name] = value; }
  bool has(const std::string& name) const { return terms_.count(name) != 0; }
  double at(const std::string& name) const;
  const std::map<std::string, double>& terms() const { return terms_; }

  /// Copies every entry of `other` into this report.
  void merge(const LossReport& other);
  /// First non-finite entry, or empty.
  std::string first_non_finite() const;
  nlohmann::json to_json() const;

 private:
  std::map<std::string, double> terms_;
};

struct ObjectiveConfig {
  Mixer mixer{MixMode::Mixup};
  LossWeights weights;
  /// ACAI regulariser interpolation coefficient.
  double acai_gamma = 0.2;
  /// Also train D's attribute branch on real labelled images.
  bool cls_on_real = true;
};

struct LossResult {
  torch::Tensor total;  // scalar, differentiable
  LossReport report;
};

/// Binary cross-entropy of realness against target in {0, 1}; evaluated
/// through the logit so it stays finite near 0 and 1.
double gan_loss(double realness, double target);
/// Mean over the batch of BCE-with-logits against a constant target.
torch::Tensor gan_loss(const torch::Tensor& logits, double target);

/// Mean squared error over batch and elements.
torch::Tensor recon_loss(const torch::Tensor& x, const torch::Tensor& x_hat);
/// Mean squared error between a mixed code and its re-encoding.
torch::Tensor consistency_loss(const torch::Tensor& h_mix, const torch::Tensor& reencoded);
/// Per-attribute BCE-with-logits against (possibly soft) targets, averaged.
torch::Tensor attribute_loss(const torch::Tensor& logits, const torch::Tensor& targets);

/// Generator path objective (encoder, decoder, embedder). Terms:
///   recon, gan_recon                     always (AE+GAN, AMR, supervised)
///   gan_mix                              any unsupervised mixing mode
///   consistency                          beta > 0 and a mix exists
///   gan_sup, cls                         sup_bern
///   acai_fool                            acai (replaces both GAN terms)
///   total_g = lambda*recon + beta*consistency + every other term
LossResult generator_loss(Networks& nets, const Batch& batch, const MixDraw& draw, const ObjectiveConfig& cfg);

/// Discriminator objective on detached generator outputs. Terms:
///   d_real, d_recon, d_mix, d_sup, d_cls (cls_on_real) or, for acai,
///   d_alpha, d_reg. total_d is their sum.
LossResult discriminator_loss(Networks& nets, const Batch& batch, const MixDraw& draw, const ObjectiveConfig& cfg);

/// Both sides at the current parameters, merged into one report.
LossReport aegan_losses(Networks& nets, const Batch& batch, const LossWeights& w);
LossReport amr_losses(Networks& nets, const Batch& batch, const Mixer& mixer, const MixDraw& draw,
                      const LossWeights& w);
LossReport supervised_losses(Networks& nets, const Batch& batch, const MixDraw& draw, const ObjectiveConfig& cfg);
LossReport acai_losses(Networks& nets, const Batch& batch, const MixDraw& draw, const LossWeights& w,
                       double gamma = 0.2);

}  // namespace amr
