#include <cmath>
#include <set>

#include <gtest/gtest.h>

#include "amr/objectives.hpp"
#include "amr/trainer.hpp"
#include "helpers.hpp"
#include "properties.hpp"

using namespace amr;
using amr::testing::toy_spec;

namespace {

const auto kF64 = torch::TensorOptions().dtype(torch::kFloat64);

Networks toy_nets(std::int64_t attributes = 0, std::uint64_t seed = 11) {
  torch::manual_seed(seed);
  Networks nets(toy_spec(attributes));
  nets->to(torch::kFloat64);
  nets->eval();
  return nets;
}

Batch toy_batch(std::int64_t n = 6, std::int64_t attributes = 0) {
  Batch b;
  b.x = torch::tanh(torch::randn({n, 1, 8, 8}, kF64));
  if (attributes > 0) b.attributes = torch::randint(2, {n, attributes}, kF64);
  return b;
}

MixDraw draw_for(const Mixer& mixer, std::int64_t n, std::uint64_t seed = 5) {
  Rng rng(seed);
  auto partners = sample_partners(n, mixer.k(), rng);
  partners.erase(partners.begin());
  return mixer.draw(rng, partners, n, 2);
}

void zero_realness_head(Networks& nets) {
  torch::NoGradGuard ng;
  for (auto& item : nets->discriminator->named_parameters()) {
    if (item.key().rfind("realness.", 0) == 0) item.value().zero_();
  }
}

double sum_except(const LossReport& r, const std::set<std::string>& skip) {
  double s = 0.0;
  for (const auto& [k, v] : r.terms()) {
    if (!skip.count(k)) s += v;
  }
  return s;
}

}  // namespace

// --- scalar losses ---------------------------------------------------------------

TEST(GanLoss, AnalyticValues) {
  EXPECT_NEAR(gan_loss(0.5, 1.0), std::log(2.0), 1e-12);
  EXPECT_NEAR(gan_loss(0.9, 0.0), -std::log(0.1), 1e-12);
  EXPECT_LT(gan_loss(1.0 - 1e-9, 1.0), 1e-8);
  EXPECT_LT(gan_loss(1e-9, 0.0), 1e-8);
  EXPECT_TRUE(std::isfinite(gan_loss(1.0, 0.0)));
  EXPECT_TRUE(std::isfinite(gan_loss(0.0, 1.0)));
}

TEST(GanLoss, LogitFormAgreesWithProbabilityForm) {
  for (int i = 0; i <= 200; ++i) {
    const double r = 1e-4 + (1.0 - 2e-4) * i / 200.0;
    const auto logit = torch::tensor({std::log(r / (1.0 - r))}, kF64);
    for (double t : {0.0, 1.0}) {
      const double direct = -(t * std::log(r) + (1 - t) * std::log(1 - r));
      EXPECT_NEAR(gan_loss(logit, t).item<double>(), direct, 1e-6) << r;
      EXPECT_NEAR(gan_loss(r, t), direct, 1e-6) << r;
    }
  }
}

TEST(ReconLoss, ExamplesAndErrors) {
  const auto a = torch::randn({3, 1, 4, 4}, kF64), b = torch::randn({3, 1, 4, 4}, kF64);
  EXPECT_EQ(recon_loss(a, a).item<double>(), 0.0);
  EXPECT_DOUBLE_EQ(recon_loss(torch::zeros({2, 3, 5, 5}), torch::ones({2, 3, 5, 5})).item<double>(), 1.0);
  EXPECT_DOUBLE_EQ(recon_loss(a, b).item<double>(), recon_loss(b, a).item<double>());
  EXPECT_THROW(recon_loss(a, torch::zeros({3, 1, 4, 5}, kF64)), std::invalid_argument);
}

TEST(ConsistencyLoss, ExamplesAndErrors) {
  const auto h = torch::randn({1, 2, 4, 4}, kF64);
  EXPECT_EQ(consistency_loss(h, h).item<double>(), 0.0);
  auto g = h.clone();
  g[0][1][2][3] += 0.3;
  EXPECT_NEAR(consistency_loss(h, g).item<double>(), 0.09 / 32.0, 1e-15);
  for (int i = 0; i < 20; ++i) {
    EXPECT_GE(consistency_loss(torch::randn({2, 2, 4, 4}), torch::randn({2, 2, 4, 4})).item<double>(), 0.0);
  }
  EXPECT_THROW(consistency_loss(h, torch::zeros({1, 2, 4, 3}, kF64)), std::invalid_argument);
}

TEST(AttributeLoss, EntropyFloorOfSoftTargets) {
  const auto p = torch::tensor({{0.2, 0.5, 0.9}, {0.7, 0.1, 0.4}}, kF64);
  const auto entropy = -(p * p.log() + (1 - p) * (1 - p).log()).mean().item<double>();
  EXPECT_NEAR(attribute_loss(torch::logit(p), p).item<double>(), entropy, 1e-12);
  const auto hard = torch::tensor({{1.0, 0.0}}, kF64);
  EXPECT_LT(attribute_loss(torch::tensor({{40.0, -40.0}}, kF64), hard).item<double>(), 1e-12);
}

TEST(LossWeights, Validation) {
  EXPECT_NO_THROW((LossWeights{0.0, 0.0}.validate()));
  EXPECT_THROW((LossWeights{-1.0, 0.0}.validate()), std::invalid_argument);
  EXPECT_THROW((LossWeights{1.0, -0.1}.validate()), std::invalid_argument);
  EXPECT_THROW((LossWeights{std::nan(""), 0.0}.validate()), std::invalid_argument);
  EXPECT_THROW((LossWeights{INFINITY, 0.0}.validate()), std::invalid_argument);
}

// --- composite objectives --------------------------------------------------------

TEST(AeGan, NeutralDiscriminatorGivesLn2PlusWeightedRecon) {
  auto nets = toy_nets();
  zero_realness_head(nets);
  const auto batch = toy_batch();
  for (double lambda : {0.0, 3.0}) {
    const auto r = aegan_losses(nets, batch, LossWeights{lambda, 0.0});
    EXPECT_NEAR(r.at("gan_recon"), std::log(2.0), 1e-12);
    EXPECT_NEAR(r.at("d_real"), std::log(2.0), 1e-12);
    EXPECT_NEAR(r.at("d_recon"), std::log(2.0), 1e-12);
    EXPECT_NEAR(r.at("total_g"), lambda * r.at("recon") + std::log(2.0), 1e-12);
  }
  const auto r0 = aegan_losses(nets, batch, LossWeights{0.0, 0.0});
  EXPECT_NEAR(r0.at("total_g"), r0.at("gan_recon"), 1e-12);
}

TEST(AeGan, TotalsDecompose) {
  auto nets = toy_nets();
  const auto r = aegan_losses(nets, toy_batch(), LossWeights{7.0, 0.0});
  EXPECT_NEAR(r.at("total_g"), 7.0 * r.at("recon") + r.at("gan_recon"), 1e-6);
  EXPECT_NEAR(r.at("total_d"), r.at("d_real") + r.at("d_recon"), 1e-6);
  EXPECT_FALSE(r.has("gan_mix"));
  EXPECT_TRUE(r.first_non_finite().empty());
}

TEST(Amr, EndpointMixEqualsAeGanPlusDuplicatedTerm) {
  auto nets = toy_nets();
  const auto batch = toy_batch();
  const Mixer mixer(MixMode::Mixup);
  auto draw = draw_for(mixer, batch.size());
  draw.weights = torch::cat({torch::ones({batch.size(), 1}, kF64), torch::zeros({batch.size(), 1}, kF64)}, 1);
  const LossWeights w{4.0, 0.0};
  const auto amr = amr_losses(nets, batch, mixer, draw, w);
  const auto base = aegan_losses(nets, batch, w);
  for (const auto& [k, v] : base.terms()) {
    if (k == "total_g" || k == "total_d") continue;
    EXPECT_NEAR(amr.at(k), v, 1e-6) << k;
  }
  EXPECT_NEAR(amr.at("gan_mix"), base.at("gan_recon"), 1e-6);
  EXPECT_NEAR(amr.at("d_mix"), base.at("d_recon"), 1e-6);
  EXPECT_NEAR(amr.at("total_g"), base.at("total_g") + base.at("gan_recon"), 1e-6);
  EXPECT_NEAR(amr.at("total_d"), base.at("total_d") + base.at("d_recon"), 1e-6);
}

TEST(Amr, ConsistencyTermOnlyWhenWeighted) {
  auto nets = toy_nets();
  const auto batch = toy_batch();
  for (auto mode : {MixMode::Mixup, MixMode::Bern, MixMode::MixupK, MixMode::BernK}) {
    const int k = mode == MixMode::MixupK || mode == MixMode::BernK ? 3 : 2;
    const Mixer mixer(mode, k);
    const auto draw = draw_for(mixer, batch.size());
    const auto r0 = amr_losses(nets, batch, mixer, draw, LossWeights{2.0, 0.0});
    EXPECT_FALSE(r0.has("consistency")) << to_string(mode);
    EXPECT_NEAR(r0.at("total_g"), sum_except(r0, {"total_g", "total_d", "recon", "d_real", "d_recon", "d_mix"}) +
                                      2.0 * r0.at("recon"),
                1e-6);
    const auto r1 = amr_losses(nets, batch, mixer, draw, LossWeights{2.0, 0.5});
    ASSERT_TRUE(r1.has("consistency")) << to_string(mode);
    EXPECT_GE(r1.at("consistency"), 0.0);
    EXPECT_NEAR(r1.at("total_g"),
                2.0 * r1.at("recon") + 0.5 * r1.at("consistency") + r1.at("gan_recon") + r1.at("gan_mix"), 1e-6);
    EXPECT_NEAR(r1.at("total_d"), r1.at("d_real") + r1.at("d_recon") + r1.at("d_mix"), 1e-6);
  }
}

TEST(Amr, BatchTooSmallForK) {
  auto nets = toy_nets();
  const auto batch = toy_batch(2);
  const Mixer mixer(MixMode::MixupK, 3);
  Rng rng(1);
  std::vector<torch::Tensor> partners{torch::tensor({1, 0}), torch::tensor({0, 1})};
  const auto draw = mixer.draw(rng, partners, 2, 2);
  EXPECT_THROW(amr_losses(nets, batch, mixer, draw, LossWeights{}), std::invalid_argument);
  EXPECT_THROW(amr_losses(nets, batch, Mixer(MixMode::None), MixDraw{}, LossWeights{}), std::invalid_argument);
}

TEST(Amr, DiscriminatorTermsCarryNoGeneratorGradient) {
  auto nets = toy_nets();
  const auto batch = toy_batch();
  ObjectiveConfig cfg;
  cfg.mixer = Mixer(MixMode::Mixup);
  const auto res = discriminator_loss(nets, batch, draw_for(cfg.mixer, batch.size()), cfg);
  const auto grads = torch::autograd::grad({res.total}, nets->generator_parameters(), {}, false, false, true);
  for (const auto& g : grads) EXPECT_FALSE(g.defined() && g.abs().sum().item<double>() != 0.0);
}

// --- supervised ------------------------------------------------------------------

TEST(Supervised, TermsAndDecomposition) {
  auto nets = toy_nets(2);
  const auto batch = toy_batch(6, 2);
  ObjectiveConfig cfg;
  cfg.mixer = Mixer(MixMode::SupBern, 2, MaskSampling{MaskGradient::Relaxed, 0.5});
  cfg.weights = LossWeights{3.0, 0.0};
  const auto r = supervised_losses(nets, batch, draw_for(cfg.mixer, batch.size()), cfg);
  for (const auto* k : {"recon", "gan_recon", "gan_mix", "gan_sup", "cls", "d_real", "d_recon", "d_mix", "d_sup",
                        "d_cls"}) {
    EXPECT_TRUE(r.has(k)) << k;
  }
  EXPECT_NEAR(r.at("total_g"),
              3.0 * r.at("recon") + r.at("gan_recon") + r.at("gan_mix") + r.at("gan_sup") + r.at("cls"), 1e-6);
  EXPECT_NEAR(r.at("total_d"), r.at("d_real") + r.at("d_recon") + r.at("d_mix") + r.at("d_sup") + r.at("d_cls"),
              1e-6);
  cfg.cls_on_real = false;
  EXPECT_FALSE(supervised_losses(nets, batch, draw_for(cfg.mixer, batch.size()), cfg).has("d_cls"));
}

TEST(Supervised, MissingLabelsRejected) {
  auto nets = toy_nets(2);
  ObjectiveConfig cfg;
  cfg.mixer = Mixer(MixMode::SupBern);
  EXPECT_THROW(supervised_losses(nets, toy_batch(6, 0), draw_for(cfg.mixer, 6), cfg), std::invalid_argument);
}

TEST(Supervised, EmbedderReceivesGradient) {
  for (auto grad_mode : {MaskGradient::Relaxed, MaskGradient::StraightThrough}) {
    auto nets = toy_nets(2);
    const auto batch = toy_batch(6, 2);
    ObjectiveConfig cfg;
    cfg.mixer = Mixer(MixMode::SupBern, 2, MaskSampling{grad_mode, 0.5});
    const auto draw = draw_for(cfg.mixer, batch.size());
    const auto params = nets->embedder->parameters();
    const auto grads =
        torch::autograd::grad({generator_loss(nets, batch, draw, cfg).total}, params, {}, false, false, true);
    double norm = 0.0;
    for (const auto& g : grads) {
      if (g.defined()) norm += g.abs().sum().item<double>();
    }
    EXPECT_GT(norm, 0.0);
    if (grad_mode == MaskGradient::Relaxed) {
      // Finite differences see the same dependence.
      torch::NoGradGuard ng;
      auto w = params[0].view({-1});
      const auto i = grads[0].reshape({-1}).abs().argmax().item<std::int64_t>();
      const double orig = w[i].item<double>();
      w[i] = orig + 1e-6;
      const double lp = generator_loss(nets, batch, draw, cfg).total.item<double>();
      w[i] = orig - 1e-6;
      const double lm = generator_loss(nets, batch, draw, cfg).total.item<double>();
      w[i] = orig;
      EXPECT_NEAR((lp - lm) / 2e-6, grads[0].reshape({-1})[i].item<double>(),
                  1e-4 * std::abs(grads[0].reshape({-1})[i].item<double>()));
    }
  }
}

// --- ACAI ------------------------------------------------------------------------

TEST(Acai, MatchesStraightLineRecomputation) {
  auto nets = toy_nets();
  const auto batch = toy_batch();
  const Mixer mixer(MixMode::Acai);
  const auto draw = draw_for(mixer, batch.size());
  const double lambda = 2.5, gamma = 0.3;
  const auto r = acai_losses(nets, batch, draw, LossWeights{lambda, 0.0}, gamma);

  torch::NoGradGuard ng;
  const auto n = batch.size();
  const auto h = nets->encode(batch.x);
  const auto x_rec = nets->decode(h);
  double recon = 0.0, fool = 0.0, d_alpha = 0.0, d_reg = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    const double a = draw.weights[i][0].item<double>();
    const auto j = draw.partners[0][i].item<std::int64_t>();
    EXPECT_GE(a, 0.0);
    EXPECT_LE(a, 0.5);
    EXPECT_DOUBLE_EQ(a + draw.weights[i][1].item<double>(), 1.0);
    const auto hm = h[i] * a + h[j] * (1.0 - a);
    const double critic = nets->discriminate(nets->decode(hm.unsqueeze(0))).logit.item<double>();
    const auto blend = batch.x[i] * gamma + x_rec[i] * (1.0 - gamma);
    const double reg = nets->discriminate(blend.unsqueeze(0)).logit.item<double>();
    recon += (batch.x[i] - x_rec[i]).pow(2).sum().item<double>();
    fool += critic * critic;
    d_alpha += (critic - a) * (critic - a);
    d_reg += reg * reg;
  }
  recon /= static_cast<double>(batch.x.numel());
  fool /= n;
  d_alpha /= n;
  d_reg /= n;
  EXPECT_NEAR(r.at("recon"), recon, 1e-10);
  EXPECT_NEAR(r.at("acai_fool"), fool, 1e-10);
  EXPECT_NEAR(r.at("d_alpha"), d_alpha, 1e-10);
  EXPECT_NEAR(r.at("d_reg"), d_reg, 1e-10);
  EXPECT_NEAR(r.at("total_g"), lambda * recon + fool, 1e-10);
  EXPECT_NEAR(r.at("total_d"), d_alpha + d_reg, 1e-10);
  EXPECT_FALSE(r.has("gan_recon"));
}

TEST(Acai, ZeroCriticGivesZeroFoolingTerm) {
  auto nets = toy_nets();
  zero_realness_head(nets);
  const auto batch = toy_batch();
  const Mixer mixer(MixMode::Acai);
  auto draw = draw_for(mixer, batch.size());
  const auto r = acai_losses(nets, batch, draw, LossWeights{1.0, 0.0});
  EXPECT_EQ(r.at("acai_fool"), 0.0);
  EXPECT_EQ(r.at("d_reg"), 0.0);
  const auto alpha = draw.weights.select(1, 0);
  EXPECT_NEAR(r.at("d_alpha"), alpha.pow(2).mean().item<double>(), 1e-12);
}

// --- gradients -------------------------------------------------------------------

class GeneratorGradient : public ::testing::TestWithParam<props::GradCase> {};

TEST_P(GeneratorGradient, MatchesCentralFiniteDifferences) {
  const auto r = props::gradient_check(GetParam());
  EXPECT_LE(r.parameters, 1000);
  EXPECT_LE(r.max_rel_err, 1e-4) << r.worst;
}

INSTANTIATE_TEST_SUITE_P(AllObjectives, GeneratorGradient, ::testing::ValuesIn(props::gradient_cases()),
                         [](const auto& info) { return info.param.name; });
