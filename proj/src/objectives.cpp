#include "amr/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace amr {

namespace F = torch::nn::functional;

void LossWeights::validate() const {
  if (!std::isfinite(lambda) || lambda < 0.0) throw std::invalid_argument("LossWeights: lambda must be finite and >= 0");
  if (!std::isfinite(beta) || beta < 0.0) throw std::invalid_argument("LossWeights: beta must be finite and >= 0");
}

double LossReport::at(const std::string& name) const {
  auto it = terms_.find(name);
  if (it == terms_.end()) throw std::out_of_range("LossReport: no term '" + name + "'");
  return it->second;
}

void LossReport::merge(const LossReport& other) {
  for (const auto& [k, v] : other.terms_) terms_[k] = v;
}

std::string LossReport::first_non_finite() const {
  for (const auto& [k, v] : terms_) {
    if (!std::isfinite(v)) return k;
  }
  return {};
}

nlohmann::json LossReport::to_json() const {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [k, v] : terms_) j[k] = v;
  return j;
}

double gan_loss(double realness, double target) {
  // Saturated inputs are pulled just inside (0, 1) so the loss stays finite.
  const double r = std::clamp(realness, std::numeric_limits<double>::min(), std::nextafter(1.0, 0.0));
  const double z = std::log(r) - std::log1p(-r);
  return std::max(z, 0.0) - z * target + std::log1p(std::exp(-std::abs(z)));
}

torch::Tensor gan_loss(const torch::Tensor& logits, double target) {
  return F::binary_cross_entropy_with_logits(logits, torch::full_like(logits, target));
}

torch::Tensor recon_loss(const torch::Tensor& x, const torch::Tensor& x_hat) {
  if (x.sizes() != x_hat.sizes()) throw std::invalid_argument("recon_loss: shape mismatch");
  return (x - x_hat).pow(2).mean();
}

torch::Tensor consistency_loss(const torch::Tensor& h_mix, const torch::Tensor& reencoded) {
  if (h_mix.sizes() != reencoded.sizes()) throw std::invalid_argument("consistency_loss: shape mismatch");
  return (h_mix - reencoded).pow(2).mean();
}

torch::Tensor attribute_loss(const torch::Tensor& logits, const torch::Tensor& targets) {
  if (logits.sizes() != targets.sizes()) throw std::invalid_argument("attribute_loss: shape mismatch");
  return F::binary_cross_entropy_with_logits(logits, targets.to(logits.dtype()));
}

namespace {

double value(const torch::Tensor& t) { return t.detach().item<double>(); }

bool has_unsupervised_mix(MixMode m) {
  return m == MixMode::Mixup || m == MixMode::Bern || m == MixMode::MixupK || m == MixMode::BernK ||
         m == MixMode::SupBern;
}

void require_attributes(const Batch& batch) {
  if (!batch.attributes.defined()) throw std::invalid_argument("supervised mixing needs attribute labels");
  if (batch.attributes.dim() != 2 || batch.attributes.size(0) != batch.size()) {
    throw std::invalid_argument("attribute labels must be (N, a)");
  }
}

void require_partners(const MixDraw& draw, const Batch& batch) {
  for (const auto& p : draw.partners) {
    if (p.size(0) != batch.size()) throw std::invalid_argument("mix draw does not match batch size");
  }
}

// Decoded mixes shared by the generator and discriminator objectives.
struct Mixes {
  torch::Tensor h_mix, x_mix;      // unsupervised or acai mix
  torch::Tensor y_mix, x_sup;      // supervised mix
};

Mixes build_mixes(Networks& nets, const Batch& batch, const torch::Tensor& h, const MixDraw& draw,
                  const ObjectiveConfig& cfg) {
  Mixes m;
  const auto mode = cfg.mixer.mode();
  if (mode == MixMode::None) return m;
  if (static_cast<std::int64_t>(batch.size()) < cfg.mixer.k()) {
    throw std::invalid_argument("batch of " + std::to_string(batch.size()) + " is too small to mix k=" +
                                std::to_string(cfg.mixer.k()) + " examples");
  }
  require_partners(draw, batch);
  m.h_mix = cfg.mixer.apply(h, draw);
  m.x_mix = nets->decode(m.h_mix);
  if (mode == MixMode::SupBern) {
    require_attributes(batch);
    const auto& partner = draw.partners.at(0);
    m.y_mix = mix_labels(batch.attributes.to(h.dtype()), batch.attributes.to(h.dtype()).index_select(0, partner),
                         draw.label_alpha);
    const auto sup = mix_supervised(h, h.index_select(0, partner), m.y_mix,
                                    [&](const torch::Tensor& y) { return nets->embed_attributes(y); },
                                    draw.mask_noise, cfg.mixer.sampling());
    m.x_sup = nets->decode(sup.mix);
  }
  return m;
}

}  // namespace

LossResult generator_loss(Networks& nets, const Batch& batch, const MixDraw& draw, const ObjectiveConfig& cfg) {
  cfg.weights.validate();
  const auto mode = cfg.mixer.mode();
  LossReport r;
  const auto h = nets->encode(batch.x);
  const auto x_rec = nets->decode(h);
  const auto recon = recon_loss(batch.x, x_rec);
  r.set("recon", value(recon));
  auto total = recon * cfg.weights.lambda;

  const auto mixes = build_mixes(nets, batch, h, draw, cfg);

  if (mode == MixMode::Acai) {
    const auto critic = nets->discriminate(mixes.x_mix).logit;
    const auto fool = critic.pow(2).mean();
    r.set("acai_fool", value(fool));
    total = total + fool;
  } else {
    std::vector<torch::Tensor> fakes{x_rec};
    if (mixes.x_mix.defined()) fakes.push_back(mixes.x_mix);
    if (mixes.x_sup.defined()) fakes.push_back(mixes.x_sup);
    const auto out = nets->discriminate(torch::cat(fakes, 0));
    const auto parts = out.logit.split(batch.size(), 0);
    const auto gan_recon = gan_loss(parts[0], 1.0);
    r.set("gan_recon", value(gan_recon));
    total = total + gan_recon;
    std::size_t next = 1;
    if (mixes.x_mix.defined()) {
      const auto gan_mix = gan_loss(parts[next++], 1.0);
      r.set("gan_mix", value(gan_mix));
      total = total + gan_mix;
    }
    if (mixes.x_sup.defined()) {
      const auto gan_sup = gan_loss(parts[next], 1.0);
      if (!out.has_attributes()) throw std::invalid_argument("supervised mixing needs D's attribute branch");
      const auto cls = attribute_loss(out.attribute_logits.split(batch.size(), 0)[next], mixes.y_mix);
      r.set("gan_sup", value(gan_sup));
      r.set("cls", value(cls));
      total = total + gan_sup + cls;
    }
  }

  if (cfg.weights.beta > 0.0 && mixes.h_mix.defined()) {
    const auto cons = consistency_loss(mixes.h_mix, nets->encode(mixes.x_mix));
    r.set("consistency", value(cons));
    total = total + cons * cfg.weights.beta;
  }
  r.set("total_g", value(total));
  return {total, r};
}

LossResult discriminator_loss(Networks& nets, const Batch& batch, const MixDraw& draw, const ObjectiveConfig& cfg) {
  const auto mode = cfg.mixer.mode();
  torch::Tensor x_rec;
  Mixes mixes;
  {
    torch::NoGradGuard no_grad;
    const auto h = nets->encode(batch.x);
    x_rec = nets->decode(h);
    mixes = build_mixes(nets, batch, h, draw, cfg);
  }
  LossReport r;
  torch::Tensor total;

  if (mode == MixMode::Acai) {
    const double g = cfg.acai_gamma;
    const auto blend = batch.x * g + x_rec * (1.0 - g);
    const auto out = nets->discriminate(torch::cat({mixes.x_mix, blend}, 0)).logit.split(batch.size(), 0);
    const auto alpha = draw.weights.select(1, 0).to(out[0].dtype());
    const auto d_alpha = (out[0] - alpha).pow(2).mean();
    const auto d_reg = out[1].pow(2).mean();
    r.set("d_alpha", value(d_alpha));
    r.set("d_reg", value(d_reg));
    total = d_alpha + d_reg;
  } else {
    std::vector<torch::Tensor> inputs{batch.x, x_rec};
    if (mixes.x_mix.defined()) inputs.push_back(mixes.x_mix);
    if (mixes.x_sup.defined()) inputs.push_back(mixes.x_sup);
    const auto out = nets->discriminate(torch::cat(inputs, 0));
    const auto parts = out.logit.split(batch.size(), 0);
    const auto d_real = gan_loss(parts[0], 1.0);
    const auto d_recon = gan_loss(parts[1], 0.0);
    r.set("d_real", value(d_real));
    r.set("d_recon", value(d_recon));
    total = d_real + d_recon;
    std::size_t next = 2;
    if (mixes.x_mix.defined()) {
      const auto d_mix = gan_loss(parts[next++], 0.0);
      r.set("d_mix", value(d_mix));
      total = total + d_mix;
    }
    if (mixes.x_sup.defined()) {
      const auto d_sup = gan_loss(parts[next], 0.0);
      r.set("d_sup", value(d_sup));
      total = total + d_sup;
      if (cfg.cls_on_real) {
        const auto d_cls = attribute_loss(out.attribute_logits.split(batch.size(), 0)[0], batch.attributes);
        r.set("d_cls", value(d_cls));
        total = total + d_cls;
      }
    }
  }
  r.set("total_d", value(total));
  return {total, r};
}

namespace {

LossReport both_sides(Networks& nets, const Batch& batch, const MixDraw& draw, const ObjectiveConfig& cfg) {
  auto report = generator_loss(nets, batch, draw, cfg).report;
  report.merge(discriminator_loss(nets, batch, draw, cfg).report);
  return report;
}

}  // namespace

LossReport aegan_losses(Networks& nets, const Batch& batch, const LossWeights& w) {
  ObjectiveConfig cfg;
  cfg.mixer = Mixer(MixMode::None);
  cfg.weights = w;
  return both_sides(nets, batch, MixDraw{}, cfg);
}

LossReport amr_losses(Networks& nets, const Batch& batch, const Mixer& mixer, const MixDraw& draw,
                      const LossWeights& w) {
  if (!has_unsupervised_mix(mixer.mode())) throw std::invalid_argument("amr_losses: mixer must be an AMR mode");
  ObjectiveConfig cfg;
  cfg.mixer = mixer;
  cfg.weights = w;
  return both_sides(nets, batch, draw, cfg);
}

LossReport supervised_losses(Networks& nets, const Batch& batch, const MixDraw& draw, const ObjectiveConfig& cfg) {
  if (cfg.mixer.mode() != MixMode::SupBern) throw std::invalid_argument("supervised_losses: mixer must be sup_bern");
  require_attributes(batch);
  return both_sides(nets, batch, draw, cfg);
}

LossReport acai_losses(Networks& nets, const Batch& batch, const MixDraw& draw, const LossWeights& w, double gamma) {
  ObjectiveConfig cfg;
  cfg.mixer = Mixer(MixMode::Acai);
  cfg.weights = w;
  cfg.acai_gamma = gamma;
  return both_sides(nets, batch, draw, cfg);
}

}  // namespace amr
