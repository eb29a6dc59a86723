#include <cmath>

#include <gtest/gtest.h>

#include "d3il/baselines.hpp"
#include "d3il/error.hpp"
#include "support/micro.hpp"

using namespace d3il;

namespace {

ArchConfig small_arch() {
    auto a = ArchConfig::micro(16);
    a.frame_channels = kColorChannels;
    a.validate();
    return a;
}

// Zeroes both classifier heads so every logit is 0 and every probability 0.5.
void flatten_heads(TpilModel& m) {
    torch::NoGradGuard ng;
    for (auto& p : m->bd->parameters()) p.zero_();
    for (auto& p : m->dd->parameters()) p.zero_();
}

TpilBatch labeled_batch(int n) {
    TpilBatch b;
    b.obs = torch::rand({n, 12, 16, 16});
    b.domain_label = (torch::arange(n) % 2).to(torch::kFloat32);
    b.behavior_label = (torch::arange(n) % 3 == 0).to(torch::kFloat32);
    return b;
}

}  // namespace

TEST(GradientReversalTest, IdentityForward) {
    auto x = torch::randn({4, 3});
    EXPECT_TRUE(torch::equal(gradient_reversal(x, 0.7), x));
}

TEST(GradientReversalTest, BackwardScalesByMinusLambda) {
    auto x = torch::randn({5}, torch::kFloat64).requires_grad_(true);
    auto w = torch::randn({5}, torch::kFloat64);
    for (double lambda : {0.0, 0.5, 2.0}) {
        auto y = (gradient_reversal(x, lambda) * w).sum();
        auto g = torch::autograd::grad({y}, {x})[0];
        EXPECT_TRUE(torch::allclose(g, -lambda * w, 0.0, 1e-15)) << "lambda " << lambda;
    }
}

TEST(Tpil, LossAtUninformedHeads) {
    auto m = init_tpil(small_arch(), 1);
    flatten_heads(m);
    auto b = labeled_batch(6);
    // Both cross-entropies are ln 2 when every probability is one half.
    EXPECT_NEAR(tpil_loss(m, b, 1.0, 1.0).item<double>(), 2.0 * std::log(2.0), 1e-6);
    EXPECT_NEAR(tpil_loss(m, b, 0.0, 1.0).item<double>(), std::log(2.0), 1e-6);
    EXPECT_NEAR(tpil_loss(m, b, 0.25, 1.0).item<double>(), 1.25 * std::log(2.0), 1e-6);
}

TEST(Tpil, LossMatchesCrossEntropyOracle) {
    auto m = init_tpil(small_arch(), 2);
    auto b = labeled_batch(8);
    torch::NoGradGuard ng;
    auto f = m->behavior(b.obs);
    auto ce = [](const torch::Tensor& logit, const torch::Tensor& y) {
        auto p = torch::sigmoid(logit.reshape(-1).to(torch::kFloat64));
        auto y64 = y.to(torch::kFloat64);
        return -(y64 * torch::log(p) + (1 - y64) * torch::log(1 - p)).mean().item<double>();
    };
    const double expected = ce(m->behavior_logit(f), b.behavior_label) + 0.6 * ce(m->domain_logit(f), b.domain_label);
    EXPECT_NEAR(tpil_loss(m, b, 0.6, 1.0).item<double>(), expected, 1e-5);
}

TEST(Tpil, EncoderSeesReversedDomainGradient) {
    // the two-channel micro encoder can be entirely dead, so this one uses the full width
    auto arch = ArchConfig::table3(16);
    arch.frame_channels = kColorChannels;
    auto m = init_tpil(arch, 3);
    auto b = labeled_batch(6);
    auto enc = m->be->parameters();
    // With lambda_d scaling the domain term, the encoder gradient of the domain part flips sign with lambda_g.
    auto domain_only = [&](double lambda_g) {
        auto with = tpil_loss(m, b, 1.0, lambda_g);
        auto without = tpil_loss(m, b, 0.0, lambda_g);
        auto g = torch::autograd::grad({with - without}, enc, {}, false, false, true);
        std::vector<torch::Tensor> flat;
        for (std::size_t i = 0; i < g.size(); ++i)
            flat.push_back(g[i].defined() ? g[i].reshape(-1) : torch::zeros({enc[i].numel()}));
        return torch::cat(flat);
    };
    auto plus = domain_only(1.0);
    auto minus = domain_only(-1.0);
    ASSERT_GT(plus.abs().sum().item<double>(), 0.0);
    EXPECT_TRUE(torch::allclose(plus, -minus, 1e-4, 1e-8));
}

TEST(Tpil, RewardInOpenInterval) {
    auto m = init_tpil(small_arch(), 4);
    auto r = tpil_reward(m, torch::rand({10, 12, 16, 16}));
    EXPECT_EQ(r.sizes(), (std::vector<int64_t>{10}));
    EXPECT_GT(r.min().item<float>(), 0.0f);
    EXPECT_LT(r.max().item<float>(), 1.0f);
    flatten_heads(m);
    EXPECT_TRUE(torch::allclose(tpil_reward(m, torch::rand({3, 12, 16, 16})), torch::full({3}, 0.5)));
}

TEST(Tpil, CheckpointRoundTrip) {
    auto dir = testing_support::scratch_dir("tpil_ckpt");
    auto m = init_tpil(small_arch(), 5);
    save_tpil(m, dir / "tpil.pt");
    auto back = load_tpil(dir / "tpil.pt");
    EXPECT_TRUE(back->arch() == m->arch());
    EXPECT_EQ(parameter_checksum(back->parameters()), parameter_checksum(m->parameters()));
    EXPECT_THROW(load_tpil(dir / "missing.pt"), IoError);
}

TEST(Tpil, ShortTrainingIsReproducible) {
    EnvSpec src;
    src.episode_length = 20;
    EnvSpec tgt = src;
    tgt.domain_shift = DomainShift::kRecolor;
    FeatureSets s;
    s.se = collect_set(src, CollectionPolicy::kScriptedExpert, 40, 1, kSE);
    s.sn = collect_set(src, CollectionPolicy::kUniformRandom, 40, 2, kSN);
    s.tn = collect_set(tgt, CollectionPolicy::kUniformRandom, 40, 3, kTN);
    s.tl = init_tl_from_tn(s.tn);
    TpilConfig cfg;
    cfg.n_epoch = 5;
    cfg.log_every = 0;
    auto a = init_tpil(small_arch(), 6), b = init_tpil(small_arch(), 6);
    auto la = train_tpil(a, s, cfg), lb = train_tpil(b, s, cfg);
    ASSERT_EQ(la.size(), 5u);
    EXPECT_EQ(la, lb);
    for (double v : la) EXPECT_TRUE(std::isfinite(v));
    auto reward = tpil_reward_model(a, s);
    ASSERT_TRUE(reward.fixed_reward);
    auto f = reward.encode(torch::rand({2, 12, 16, 16}));
    EXPECT_EQ(reward.fixed_reward(f).sizes(), (std::vector<int64_t>{2}));
}

TEST(Tpil, ConfigValidation) {
    TpilConfig c;
    EXPECT_NO_THROW(c.validate());
    c.lambda_d = -1.0;
    EXPECT_THROW(c.validate(), ConfigError);
    c = TpilConfig{};
    c.n_epoch = 0;
    EXPECT_THROW(c.validate(), ConfigError);
}
