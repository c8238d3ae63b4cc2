#include "amr/nets.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>

namespace amr {

namespace F = torch::nn::functional;

namespace {

constexpr double kSigmaEps = 1e-12;

torch::Tensor unit(const torch::Tensor& x) { return x / x.norm().clamp_min(kSigmaEps); }

std::int64_t block_width(const AutoencoderSpec& spec, std::size_t i) {
  return std::min<std::int64_t>(spec.width_base << i, spec.width_base * 4);
}

// Per-example normalisation keeps the conv autoencoder out of the constant
// "background only" solution without batch statistics or running buffers.
torch::nn::GroupNorm group_norm(std::int64_t channels) {
  return torch::nn::GroupNorm(torch::nn::GroupNormOptions(std::gcd<std::int64_t>(channels, 8), channels));
}

void check_input(const AutoencoderSpec& spec, const torch::Tensor& x, const char* what) {
  if (x.dim() != 4 || x.size(1) != spec.channels || x.size(2) != spec.height || x.size(3) != spec.width) {
    throw std::invalid_argument(std::string(what) + ": expected input of shape (N, " + std::to_string(spec.channels) +
                                ", " + std::to_string(spec.height) + ", " + std::to_string(spec.width) + ")");
  }
}

}  // namespace

void AutoencoderSpec::validate() const {
  if (channels <= 0 || height <= 0 || width <= 0) throw std::invalid_argument("AutoencoderSpec: bad input shape");
  if (code_channels <= 0 || code_size <= 0) throw std::invalid_argument("AutoencoderSpec: bad bottleneck");
  if (width_base <= 0) throw std::invalid_argument("AutoencoderSpec: width_base must be positive");
  if (family() == NetFamily::Conv) {
    if (height != width) throw std::invalid_argument("AutoencoderSpec: conv family needs square inputs");
    (void)conv_sizes();
  } else if (mlp_layers < 1) {
    throw std::invalid_argument("AutoencoderSpec: mlp_layers must be >= 1");
  }
}

std::vector<std::int64_t> AutoencoderSpec::conv_sizes() const {
  std::vector<std::int64_t> sizes{height};
  while (sizes.back() > code_size) sizes.push_back((sizes.back() + 1) / 2);
  if (sizes.back() != code_size || sizes.size() < 2) {
    throw std::invalid_argument("AutoencoderSpec: input size " + std::to_string(height) +
                                " does not halve down to code size " + std::to_string(code_size));
  }
  return sizes;
}

// ---------------------------------------------------------------------------

PowerIterationState make_power_iteration_state(const torch::Tensor& weight) {
  const auto rows = weight.size(0);
  const auto cols = weight.numel() / rows;
  auto opts = weight.options().requires_grad(false);
  PowerIterationState st{unit(torch::randn({rows}, opts)), unit(torch::randn({cols}, opts))};
  // Independent random u, v give u^T W v of either sign; a warm start makes
  // the stored estimate usable before the first training-mode forward.
  spectral_normalize(weight.detach(), st, kInitIterations);
  return st;
}

torch::Tensor spectral_normalize(const torch::Tensor& weight, PowerIterationState& state, int n_iters) {
  if (n_iters < 0) throw std::invalid_argument("spectral_normalize: n_iters must be >= 0");
  const auto mat = weight.reshape({weight.size(0), -1});
  {
    torch::NoGradGuard no_grad;
    const auto w = mat.detach();
    for (int i = 0; i < n_iters; ++i) {
      state.v.copy_(unit(torch::mv(w.t(), state.u)));
      state.u.copy_(unit(torch::mv(w, state.v)));
    }
  }
  const auto sigma = torch::dot(state.u, torch::mv(mat, state.v));
  return weight / sigma.clamp_min(kSigmaEps);
}

SNLinearImpl::SNLinearImpl(std::int64_t in, std::int64_t out, int n_iters) : n_iters_(n_iters) {
  torch::nn::Linear init(in, out);
  weight = register_parameter("weight", init->weight.detach().clone());
  bias = register_parameter("bias", init->bias.detach().clone());
  auto st = make_power_iteration_state(weight);
  u = register_buffer("u", st.u);
  v = register_buffer("v", st.v);
}

torch::Tensor SNLinearImpl::normalized_weight() {
  PowerIterationState st{u, v};
  return spectral_normalize(weight, st, 0);
}

torch::Tensor SNLinearImpl::forward(const torch::Tensor& x) {
  PowerIterationState st{u, v};
  const auto w = spectral_normalize(weight, st, is_training() ? n_iters_ : 0);
  return F::linear(x, w, bias);
}

SNConv2dImpl::SNConv2dImpl(std::int64_t in, std::int64_t out, std::int64_t kernel, std::int64_t stride,
                           std::int64_t padding, int n_iters)
    : stride_(stride), padding_(padding), n_iters_(n_iters) {
  torch::nn::Conv2d init(torch::nn::Conv2dOptions(in, out, kernel).stride(stride).padding(padding));
  weight = register_parameter("weight", init->weight.detach().clone());
  bias = register_parameter("bias", init->bias.detach().clone());
  auto st = make_power_iteration_state(weight);
  u = register_buffer("u", st.u);
  v = register_buffer("v", st.v);
}

torch::Tensor SNConv2dImpl::normalized_weight() {
  PowerIterationState st{u, v};
  return spectral_normalize(weight, st, 0);
}

torch::Tensor SNConv2dImpl::forward(const torch::Tensor& x) {
  PowerIterationState st{u, v};
  const auto w = spectral_normalize(weight, st, is_training() ? n_iters_ : 0);
  return F::conv2d(x, w, F::Conv2dFuncOptions().bias(bias).stride(stride_).padding(padding_));
}

// ---------------------------------------------------------------------------

EncoderImpl::EncoderImpl(const AutoencoderSpec& spec) : spec_(spec) {
  spec_.validate();
  torch::nn::Sequential seq;
  if (spec_.family() == NetFamily::Conv) {
    const auto sizes = spec_.conv_sizes();
    std::int64_t in = spec_.channels;
    for (std::size_t i = 0; i + 1 < sizes.size(); ++i) {
      const auto out = block_width(spec_, i);
      const std::int64_t kernel = sizes[i] % 2 == 0 ? 4 : 3;
      seq->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, kernel).stride(2).padding(1)));
      seq->push_back(group_norm(out));
      seq->push_back(torch::nn::ReLU());
      in = out;
    }
    seq->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(in, spec_.code_channels, 3).padding(1)));
  } else {
    seq->push_back(torch::nn::Flatten());
    std::int64_t in = spec_.channels;
    for (int i = 0; i < spec_.mlp_layers; ++i) {
      seq->push_back(torch::nn::Linear(in, spec_.width_base));
      seq->push_back(torch::nn::ReLU());
      in = spec_.width_base;
    }
    seq->push_back(torch::nn::Linear(in, spec_.code_dim()));
  }
  body_ = register_module("body", seq);
}

torch::Tensor EncoderImpl::forward(const torch::Tensor& x) {
  check_input(spec_, x, "encode");
  auto h = body_->forward(x);
  return h.view({x.size(0), spec_.code_channels, spec_.code_size, spec_.code_size});
}

DecoderImpl::DecoderImpl(const AutoencoderSpec& spec) : spec_(spec) {
  spec_.validate();
  torch::nn::Sequential seq;
  if (spec_.family() == NetFamily::Conv) {
    const auto sizes = spec_.conv_sizes();
    const auto blocks = sizes.size() - 1;
    std::int64_t in = block_width(spec_, blocks - 1);
    seq->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(spec_.code_channels, in, 3).padding(1)));
    seq->push_back(group_norm(in));
    seq->push_back(torch::nn::ReLU());
    for (std::size_t step = blocks; step-- > 0;) {
      // sizes[step + 1] -> sizes[step]; kernel 4 doubles, kernel 3 gives 2n - 1.
      const std::int64_t kernel = sizes[step] % 2 == 0 ? 4 : 3;
      const auto out = block_width(spec_, step == 0 ? 0 : step - 1);
      seq->push_back(torch::nn::ConvTranspose2d(torch::nn::ConvTranspose2dOptions(in, out, kernel).stride(2).padding(1)));
      seq->push_back(group_norm(out));
      seq->push_back(torch::nn::ReLU());
      in = out;
    }
    seq->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(in, spec_.channels, 3).padding(1)));
  } else {
    seq->push_back(torch::nn::Flatten());
    std::int64_t in = spec_.code_dim();
    for (int i = 0; i < spec_.mlp_layers; ++i) {
      seq->push_back(torch::nn::Linear(in, spec_.width_base));
      seq->push_back(torch::nn::ReLU());
      in = spec_.width_base;
    }
    seq->push_back(torch::nn::Linear(in, spec_.channels));
  }
  if (spec_.squash == OutputSquash::Tanh) seq->push_back(torch::nn::Tanh());
  body_ = register_module("body", seq);
}

torch::Tensor DecoderImpl::forward(const torch::Tensor& h) {
  if (h.dim() != 4 || h.size(1) != spec_.code_channels || h.size(2) != spec_.code_size ||
      h.size(3) != spec_.code_size) {
    throw std::invalid_argument("decode: expected codes of shape (N, " + std::to_string(spec_.code_channels) + ", " +
                                std::to_string(spec_.code_size) + ", " + std::to_string(spec_.code_size) + ")");
  }
  return body_->forward(h).view({h.size(0), spec_.channels, spec_.height, spec_.width});
}

DiscriminatorImpl::DiscriminatorImpl(const AutoencoderSpec& spec) : spec_(spec) {
  spec_.validate();
  std::int64_t features = 0;
  if (spec_.family() == NetFamily::Conv) {
    const auto sizes = spec_.conv_sizes();
    std::int64_t in = spec_.channels;
    for (std::size_t i = 0; i + 1 < sizes.size(); ++i) {
      const auto out = block_width(spec_, i);
      const std::int64_t kernel = sizes[i] % 2 == 0 ? 4 : 3;
      convs_.push_back(register_module("conv" + std::to_string(i),
                                       SNConv2d(in, out, kernel, 2, 1, spec_.sn_iterations)));
      in = out;
    }
    features = in * spec_.code_size * spec_.code_size;
  } else {
    std::int64_t in = spec_.channels;
    for (int i = 0; i < spec_.mlp_layers; ++i) {
      linears_.push_back(register_module("fc" + std::to_string(i), SNLinear(in, spec_.width_base, spec_.sn_iterations)));
      in = spec_.width_base;
    }
    features = in;
  }
  realness_ = register_module("realness", SNLinear(features, 1, spec_.sn_iterations));
  if (spec_.num_attributes > 0) {
    attributes_ = register_module("attributes", SNLinear(features, spec_.num_attributes, spec_.sn_iterations));
  }
}

DiscriminatorOutput DiscriminatorImpl::forward(const torch::Tensor& x) {
  check_input(spec_, x, "discriminate");
  auto h = x;
  for (auto& conv : convs_) h = F::leaky_relu(conv->forward(h), F::LeakyReLUFuncOptions().negative_slope(spec_.leaky_slope));
  h = h.flatten(1);
  for (auto& fc : linears_) h = F::leaky_relu(fc->forward(h), F::LeakyReLUFuncOptions().negative_slope(spec_.leaky_slope));
  DiscriminatorOutput out;
  out.logit = realness_->forward(h).view({x.size(0)});
  if (!attributes_.is_empty()) out.attribute_logits = attributes_->forward(h);
  return out;
}

void DiscriminatorImpl::set_iterations(int n) {
  for (auto& c : convs_) c->set_iterations(n);
  for (auto& l : linears_) l->set_iterations(n);
  realness_->set_iterations(n);
  if (!attributes_.is_empty()) attributes_->set_iterations(n);
}

std::vector<std::pair<std::string, torch::Tensor>> DiscriminatorImpl::normalized_weights() {
  std::vector<std::pair<std::string, torch::Tensor>> out;
  for (std::size_t i = 0; i < convs_.size(); ++i) out.emplace_back("conv" + std::to_string(i), convs_[i]->normalized_weight());
  for (std::size_t i = 0; i < linears_.size(); ++i) out.emplace_back("fc" + std::to_string(i), linears_[i]->normalized_weight());
  out.emplace_back("realness", realness_->normalized_weight());
  if (!attributes_.is_empty()) out.emplace_back("attributes", attributes_->normalized_weight());
  return out;
}

LinearProbeImpl::LinearProbeImpl(std::int64_t code_dim, std::int64_t num_classes) {
  affine = register_module("affine", torch::nn::Linear(code_dim, num_classes));
}

torch::Tensor LinearProbeImpl::forward(const torch::Tensor& h) { return affine->forward(h.detach().flatten(1)); }

LabelEmbedderImpl::LabelEmbedderImpl(std::int64_t num_attributes, std::int64_t hidden, std::int64_t channels)
    : num_attributes_(num_attributes) {
  body_ = register_module("body", torch::nn::Sequential(torch::nn::Linear(num_attributes, hidden), torch::nn::ReLU(),
                                                        torch::nn::Linear(hidden, channels), torch::nn::Sigmoid()));
}

torch::Tensor LabelEmbedderImpl::forward(const torch::Tensor& y) {
  if (y.dim() != 2 || y.size(1) != num_attributes_) {
    throw std::invalid_argument("embed_attributes: expected (N, " + std::to_string(num_attributes_) + ") attributes");
  }
  return body_->forward(y);
}

// ---------------------------------------------------------------------------

NetworksImpl::NetworksImpl(const AutoencoderSpec& spec) : spec_(spec) {
  spec_.validate();
  encoder = register_module("encoder", Encoder(spec_));
  decoder = register_module("decoder", Decoder(spec_));
  discriminator = register_module("discriminator", Discriminator(spec_));
  if (spec_.num_classes > 0) probe = register_module("probe", LinearProbe(spec_.code_dim(), spec_.num_classes));
  if (spec_.num_attributes > 0) {
    embedder = register_module("embedder", LabelEmbedder(spec_.num_attributes, spec_.embed_hidden, spec_.code_channels));
  }
}

torch::Tensor NetworksImpl::encode(const torch::Tensor& x) { return encoder->forward(x); }
torch::Tensor NetworksImpl::decode(const torch::Tensor& h) { return decoder->forward(h); }
DiscriminatorOutput NetworksImpl::discriminate(const torch::Tensor& x) { return discriminator->forward(x); }

torch::Tensor NetworksImpl::probe_predict(const torch::Tensor& h) {
  if (!has_probe()) throw std::logic_error("probe_predict: model has no probe (no class labels)");
  return probe->forward(h);
}

torch::Tensor NetworksImpl::embed_attributes(const torch::Tensor& y) {
  if (!has_embedder()) throw std::logic_error("embed_attributes: model has no label embedder");
  return embedder->forward(y);
}

std::vector<torch::Tensor> NetworksImpl::generator_parameters() {
  auto params = encoder->parameters();
  for (auto& p : decoder->parameters()) params.push_back(p);
  if (has_embedder()) {
    for (auto& p : embedder->parameters()) params.push_back(p);
  }
  return params;
}

std::vector<torch::Tensor> NetworksImpl::discriminator_parameters() { return discriminator->parameters(); }

std::vector<torch::Tensor> NetworksImpl::probe_parameters() {
  return has_probe() ? probe->parameters() : std::vector<torch::Tensor>{};
}

std::map<std::string, torch::Tensor> NetworksImpl::state() {
  std::map<std::string, torch::Tensor> out;
  for (const auto& item : named_parameters()) out.emplace(item.key(), item.value());
  for (const auto& item : named_buffers()) out.emplace(item.key(), item.value());
  return out;
}

std::map<std::string, torch::Tensor> snapshot(Networks& nets) {
  std::map<std::string, torch::Tensor> out;
  for (auto& [k, v] : nets->state()) out.emplace(k, v.detach().clone());
  return out;
}

}  // namespace amr
