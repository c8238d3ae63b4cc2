#pragma once

// Parametric components: encoder f, decoder g, spectrally normalised
// discriminator D (with an optional attribute-classifier branch), the linear
// probe and the attribute embedder. Images are (N, C, H, W); two-dimensional
// point data uses C = 2, H = W = 1 and selects the MLP family.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <torch/torch.h>

namespace amr {

enum class NetFamily { Conv, Mlp };
enum class OutputSquash { Tanh, None };

struct AutoencoderSpec {
  std::int64_t channels = 1;
  std::int64_t height = 28;
  std::int64_t width = 28;
  /// Bottleneck (c, s, s).
  std::int64_t code_channels = 2;
  std::int64_t code_size = 4;
  /// Conv: width of the first block, doubled per block and capped at 4x;
  /// hidden conv layers are group-normalised.
  /// Mlp: hidden layer width.
  std::int64_t width_base = 32;
  /// Hidden layers per MLP (encoder, decoder and discriminator each).
  int mlp_layers = 2;
  OutputSquash squash = OutputSquash::Tanh;
  double leaky_slope = 0.2;
  /// Power iterations per training-mode discriminator forward.
  int sn_iterations = 1;
  /// > 0 adds the attribute head to D and builds the label embedder.
  std::int64_t num_attributes = 0;
  std::int64_t embed_hidden = 64;
  /// Probe output classes; 0 disables the probe.
  std::int64_t num_classes = 0;

  NetFamily family() const { return height == 1 && width == 1 ? NetFamily::Mlp : NetFamily::Conv; }
  std::int64_t code_dim() const { return code_channels * code_size * code_size; }
  /// Throws std::invalid_argument for geometries the builders cannot realise.
  void validate() const;
  /// Spatial sizes visited by the conv encoder, from `height` down to `code_size`.
  std::vector<std::int64_t> conv_sizes() const;
};

// ---------------------------------------------------------------------------
// Spectral normalisation

/// Persistent left/right singular-vector estimates for one weight.
struct PowerIterationState {
  torch::Tensor u;  // (rows)
  torch::Tensor v;  // (cols)
};

/// Largest-singular-value estimate sigma = u^T W v after `n_iters` power
/// iterations on the (rows, cols) reshaping of `weight`, and returns
/// weight / max(sigma, eps). The state vectors are updated in place and carry
/// no gradient; the division does, through W. `n_iters = 0` reuses the stored
/// vectors unchanged, which is how inference-mode forwards run.
torch::Tensor spectral_normalize(const torch::Tensor& weight, PowerIterationState& state, int n_iters);

/// Random unit vectors matching `weight`'s matrix view, refined by
/// kInitIterations power iterations.
inline constexpr int kInitIterations = 100;
PowerIterationState make_power_iteration_state(const torch::Tensor& weight);

class SNLinearImpl : public torch::nn::Module {
 public:
  SNLinearImpl(std::int64_t in, std::int64_t out, int n_iters);
  torch::Tensor forward(const torch::Tensor& x);
  /// W / sigma using the current state (no iteration).
  torch::Tensor normalized_weight();
  void set_iterations(int n) { n_iters_ = n; }

  torch::Tensor weight, bias, u, v;

 private:
  int n_iters_;
};
TORCH_MODULE(SNLinear);

class SNConv2dImpl : public torch::nn::Module {
 public:
  SNConv2dImpl(std::int64_t in, std::int64_t out, std::int64_t kernel, std::int64_t stride, std::int64_t padding,
               int n_iters);
  torch::Tensor forward(const torch::Tensor& x);
  torch::Tensor normalized_weight();
  void set_iterations(int n) { n_iters_ = n; }

  torch::Tensor weight, bias, u, v;

 private:
  std::int64_t stride_, padding_;
  int n_iters_;
};
TORCH_MODULE(SNConv2d);

// ---------------------------------------------------------------------------

class EncoderImpl : public torch::nn::Module {
 public:
  explicit EncoderImpl(const AutoencoderSpec& spec);
  /// (N, C, H, W) -> (N, c, s, s).
  torch::Tensor forward(const torch::Tensor& x);

 private:
  AutoencoderSpec spec_;
  torch::nn::Sequential body_{nullptr};
};
TORCH_MODULE(Encoder);

class DecoderImpl : public torch::nn::Module {
 public:
  explicit DecoderImpl(const AutoencoderSpec& spec);
  /// (N, c, s, s) -> (N, C, H, W), squashed to [-1, 1] unless configured off.
  torch::Tensor forward(const torch::Tensor& h);

 private:
  AutoencoderSpec spec_;
  torch::nn::Sequential body_{nullptr};
};
TORCH_MODULE(Decoder);

struct DiscriminatorOutput {
  /// Pre-sigmoid realness (N). ACAI reads this directly as its critic value.
  torch::Tensor logit;
  /// (N, a) when the attribute branch exists, undefined otherwise.
  torch::Tensor attribute_logits;

  torch::Tensor realness() const { return torch::sigmoid(logit); }
  bool has_attributes() const { return attribute_logits.defined(); }
};

class DiscriminatorImpl : public torch::nn::Module {
 public:
  explicit DiscriminatorImpl(const AutoencoderSpec& spec);
  DiscriminatorOutput forward(const torch::Tensor& x);
  void set_iterations(int n);
  /// Every spectrally normalised weight as (path, W / sigma).
  std::vector<std::pair<std::string, torch::Tensor>> normalized_weights();

 private:
  AutoencoderSpec spec_;
  std::vector<SNConv2d> convs_;
  std::vector<SNLinear> linears_;
  SNLinear realness_{nullptr};
  SNLinear attributes_{nullptr};
};
TORCH_MODULE(Discriminator);

/// Single affine map on a gradient-detached, flattened code.
class LinearProbeImpl : public torch::nn::Module {
 public:
  LinearProbeImpl(std::int64_t code_dim, std::int64_t num_classes);
  torch::Tensor forward(const torch::Tensor& h);

  torch::nn::Linear affine{nullptr};
};
TORCH_MODULE(LinearProbe);

/// MLP a -> hidden -> c with a terminal sigmoid.
class LabelEmbedderImpl : public torch::nn::Module {
 public:
  LabelEmbedderImpl(std::int64_t num_attributes, std::int64_t hidden, std::int64_t channels);
  torch::Tensor forward(const torch::Tensor& y);
  std::int64_t num_attributes() const { return num_attributes_; }

 private:
  std::int64_t num_attributes_;
  torch::nn::Sequential body_{nullptr};
};
TORCH_MODULE(LabelEmbedder);

// ---------------------------------------------------------------------------

/// All trainable components of one model, registered under canonical paths
/// ("encoder.", "decoder.", "discriminator.", "probe.", "embedder.").
class NetworksImpl : public torch::nn::Module {
 public:
  explicit NetworksImpl(const AutoencoderSpec& spec);

  const AutoencoderSpec& spec() const { return spec_; }

  torch::Tensor encode(const torch::Tensor& x);
  torch::Tensor decode(const torch::Tensor& h);
  DiscriminatorOutput discriminate(const torch::Tensor& x);
  torch::Tensor probe_predict(const torch::Tensor& h);
  torch::Tensor embed_attributes(const torch::Tensor& y);

  bool has_probe() const { return !probe.is_empty(); }
  bool has_embedder() const { return !embedder.is_empty(); }

  /// Encoder, decoder and (when present) embedder parameters.
  std::vector<torch::Tensor> generator_parameters();
  std::vector<torch::Tensor> discriminator_parameters();
  std::vector<torch::Tensor> probe_parameters();

  /// Parameters and buffers keyed by canonical path.
  std::map<std::string, torch::Tensor> state();

  Encoder encoder{nullptr};
  Decoder decoder{nullptr};
  Discriminator discriminator{nullptr};
  LinearProbe probe{nullptr};
  LabelEmbedder embedder{nullptr};

 private:
  AutoencoderSpec spec_;
};
TORCH_MODULE(Networks);

/// Deep copy of every tensor in `state()`, for bit-exact isolation checks.
std::map<std::string, torch::Tensor> snapshot(Networks& nets);

}  // namespace amr
