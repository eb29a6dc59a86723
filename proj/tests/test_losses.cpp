#include <cmath>

#include <gtest/gtest.h>

#include "d3il/error.hpp"
#include "d3il/losses.hpp"
#include "d3il/trainer.hpp"
#include "support/micro.hpp"
#include "support/oracle.hpp"

using namespace d3il;
using testing_support::micro_batches;
using testing_support::micro_model;

namespace {

constexpr double kOracleTol = 1e-10;

double v(const torch::Tensor& t) { return t.item<double>(); }

void expect_oracle(double got, double want) {
    EXPECT_NEAR(got, want, kOracleTol * std::max(1.0, std::abs(want)));
}

using testing_support::ConstantWorld;
using testing_support::set_parameter;
using testing_support::zero_parameters;

}  // namespace

class LossOracle : public ::testing::TestWithParam<std::uint64_t> {};

TEST_P(LossOracle, EveryTermMatchesArithmetic) {
    auto model = micro_model(GetParam());
    auto b = micro_batches(model->arch(), 2, GetParam() + 100);
    auto o = oracle::Model::from(model);
    auto sets = oracle::to_sets(b);
    expect_oracle(v(feature_prediction_loss(model, b)), oracle::feature_prediction(o, sets));
    expect_oracle(v(feature_adversarial_loss(model, b)), oracle::feature_adversarial(o, sets));
    expect_oracle(v(image_adversarial_loss(model, b)), oracle::image_adversarial(o, sets));
    expect_oracle(v(image_reconstruction_loss(model, b)), oracle::image_reconstruction(o, sets));
    expect_oracle(v(feature_reconstruction_loss(model, b)), oracle::feature_reconstruction(o, sets));
    expect_oracle(v(image_cycle_loss(model, b)), oracle::image_cycle(o, sets));
    expect_oracle(v(feature_cycle_loss(model, b)), oracle::feature_cycle(o, sets));
    expect_oracle(v(feature_similarity_loss(model, b)), oracle::feature_similarity(o, sets));
    expect_oracle(v(feature_regularization_loss(model, b, 1.0, 20.0)), oracle::feature_regularization(o, sets, 1.0, 20.0));
    expect_oracle(v(feature_regularization_loss(model, b, 0.0, 0.0)), oracle::feature_regularization(o, sets, 0.0, 0.0));
}

INSTANTIATE_TEST_SUITE_P(Seeds, LossOracle, ::testing::Values(1u, 2u, 3u));

TEST(LossOracle, UnequalBatchesZipToShorter) {
    auto model = micro_model(9);
    auto b = micro_batches(model->arch(), 3, 10);
    b.tn = b.tn.narrow(0, 0, 2);
    b.sn = b.sn.narrow(0, 0, 1);
    auto o = oracle::Model::from(model);
    auto sets = oracle::to_sets(b);
    expect_oracle(v(image_adversarial_loss(model, b)), oracle::image_adversarial(o, sets));
    expect_oracle(v(image_cycle_loss(model, b)), oracle::image_cycle(o, sets));
    expect_oracle(v(feature_cycle_loss(model, b)), oracle::feature_cycle(o, sets));
    expect_oracle(v(feature_prediction_loss(model, b)), oracle::feature_prediction(o, sets));
}

TEST(LossOracle, RewardDiscriminatorValue) {
    torch::manual_seed(0);
    RewardDiscriminator d(2, 3);
    init_parameters(*d, 5);
    d->to(torch::kDouble);
    auto e = torch::randn({4, 2}, torch::kDouble), l = torch::randn({4, 2}, torch::kDouble);
    auto mix = torch::tensor({0.1, 0.4, 0.7, 0.95}, torch::kDouble);
    auto r = d_rew_loss(d, e, l, mix, 2.0);
    auto to_rows = [](const torch::Tensor& t) {
        std::vector<oracle::Vec> rows;
        for (int64_t i = 0; i < t.size(0); ++i) rows.push_back({t[i][0].item<double>(), t[i][1].item<double>()});
        return rows;
    };
    oracle::Vec m{0.1, 0.4, 0.7, 0.95};
    auto od = oracle::mlp_from(*d->children()[0]);
    expect_oracle(v(r.value), oracle::d_rew_value(od, to_rows(e), to_rows(l), m, 2.0));
    expect_oracle(v(r.objective), -oracle::d_rew_value(od, to_rows(e), to_rows(l), m, 0.0) + 2.0 * v(r.gradient_penalty));
}

TEST(LossTotals, RecombineWithWeights) {
    auto model = micro_model(4);
    auto b = micro_batches(model->arch(), 2, 44);
    LossWeights w;
    auto t = total_losses(model, b, w);
    const auto& r = t.report;
    const double eg = w.feat_pred * r.feat_pred + w.feat_adv * r.feat_adv + w.img_adv * r.img_adv +
                      w.img_recon * r.img_recon + w.feat_recon * r.feat_recon + w.img_cycle * r.img_cycle +
                      w.feat_cycle * r.feat_cycle + w.feat_sim * r.feat_sim + w.feat_reg * r.feat_reg;
    const double fdid = w.feat_pred * r.feat_pred - w.feat_adv * r.feat_adv - w.img_adv * r.img_adv;
    EXPECT_NEAR(r.eg, eg, 1e-6 * std::abs(eg));
    EXPECT_NEAR(r.fdid, fdid, 1e-6 * std::max(1e-12, std::abs(fdid)));
    EXPECT_DOUBLE_EQ(v(t.eg), r.eg);
}

TEST(LossTotals, ZeroWeightsGiveZero) {
    auto model = micro_model(4);
    auto b = micro_batches(model->arch(), 2, 44);
    LossWeights w{0, 0, 0, 0, 0, 0, 0, 0, 0, 1.0, 20.0};
    auto t = total_losses(model, b, w);
    EXPECT_EQ(t.report.eg, 0.0);
    EXPECT_EQ(t.report.fdid, 0.0);
}

TEST(LossTotals, LinearInEachWeight) {
    auto model = micro_model(4);
    auto b = micro_batches(model->arch(), 2, 44);
    LossWeights w;
    const double base = total_losses(model, b, w).report.eg;
    LossWeights w2 = w;
    w2.feat_cycle *= 2.0;
    const double doubled = total_losses(model, b, w2).report.eg;
    const double term = w.feat_cycle * feature_cycle_loss(model, b).item<double>();
    EXPECT_NEAR(doubled - base, term, 1e-9 * std::abs(base));
}

TEST(LossTotals, AdversarialTermsOpposeOnDiscriminators) {
    auto model = micro_model(4);
    auto b = micro_batches(model->arch(), 2, 44);
    LossWeights w;
    w.feat_pred = 0.0;
    ForwardPass fp(model, b);
    auto t = total_losses(fp, w);
    auto params = model->discriminator_parameters();
    auto g_eg = torch::autograd::grad({t.eg}, params, {}, true, false, true);
    auto g_fdid = torch::autograd::grad({t.fdid}, params, {}, false, false, true);
    double norm = 0.0;
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto a = g_eg[i].defined() ? g_eg[i] : torch::zeros_like(params[i]);
        auto c = g_fdid[i].defined() ? g_fdid[i] : torch::zeros_like(params[i]);
        EXPECT_TRUE(torch::allclose(a, -c, 1e-12, 1e-14)) << i;
        norm += a.pow(2).sum().item<double>();
    }
    EXPECT_GT(norm, 0.0);
}

TEST(LossFixedPoints, ConsistencyTermsVanishOnIdentity) {
    ConstantWorld w;
    EXPECT_EQ(v(image_reconstruction_loss(w.model, w.batches)), 0.0);
    EXPECT_EQ(v(feature_reconstruction_loss(w.model, w.batches)), 0.0);
    EXPECT_EQ(v(image_cycle_loss(w.model, w.batches)), 0.0);
    EXPECT_EQ(v(feature_cycle_loss(w.model, w.batches)), 0.0);
}

TEST(LossFixedPoints, SimilarityVanishesOnEqualFeatures) {
    auto model = micro_model(5);
    {
        torch::NoGradGuard ng;
        auto src = model->be_s->parameters(), dst = model->be_t->parameters();
        for (std::size_t i = 0; i < src.size(); ++i) dst[i].copy_(src[i]);
        auto dsrc = model->de_s->parameters(), ddst = model->de_t->parameters();
        for (std::size_t i = 0; i < dsrc.size(); ++i) ddst[i].copy_(dsrc[i]);
    }
    auto b = micro_batches(model->arch(), 3, 6);
    b.sn = b.se.clone();
    b.tn = b.se.clone();
    b.tl = b.se.clone();
    EXPECT_EQ(v(feature_similarity_loss(model, b)), 0.0);
}

TEST(LossFixedPoints, RegularizationVanishesAtTargetNorm) {
    auto model = micro_model(5);
    for (auto* be : {model->be_s.get(), model->be_t.get()}) {
        zero_parameters(*be);
        set_parameter(*be, "convs.conv5.bias", {3.0, 4.0});
    }
    for (auto* de : {model->de_s.get(), model->de_t.get()}) {
        zero_parameters(*de);
        set_parameter(*de, "head.bias", {1.0, 0.0});
    }
    auto b = micro_batches(model->arch(), 2, 6);
    EXPECT_EQ(v(feature_regularization_loss(model, b, 1.0, 5.0)), 0.0);
    EXPECT_GT(v(feature_regularization_loss(model, b, 1.0, 4.0)), 0.0);
}

TEST(LossFixedPoints, RegularizationZeroTargetIsMeanSquaredNorm) {
    auto model = micro_model(5);
    auto b = micro_batches(model->arch(), 2, 6);
    ForwardPass fp(model, b);
    double expected = 0.0;
    for (auto group : {std::vector<SetId>{SetId::kSE, SetId::kSN}, std::vector<SetId>{SetId::kTN, SetId::kTL}}) {
        std::vector<torch::Tensor> bs, ds;
        for (auto s : group) {
            bs.push_back(fp.behavior(s).pow(2).sum(1));
            ds.push_back(fp.domain(s).pow(2).sum(1));
        }
        expected += torch::cat(bs).mean().item<double>() + torch::cat(ds).mean().item<double>();
    }
    EXPECT_NEAR(v(feature_regularization_loss(fp, 0.0, 0.0)), expected, 1e-12);
}

TEST(LossFixedPoints, ConstantDiscriminatorsCancel) {
    auto model = micro_model(6);
    for (auto* h : {model->bd_b.get(), model->dd_b.get(), model->bd_d.get(), model->dd_d.get()}) {
        zero_parameters(*h);
        set_parameter(*h, "out.bias", {0.7});
    }
    for (auto* id : {model->id_s.get(), model->id_t.get()}) {
        zero_parameters(*id);
        set_parameter(*id, "head.bias", {-1.3});
    }
    auto b = micro_batches(model->arch(), 2, 7);
    EXPECT_EQ(v(feature_prediction_loss(model, b)), 0.0);
    EXPECT_EQ(v(feature_adversarial_loss(model, b)), 0.0);
    EXPECT_EQ(v(image_adversarial_loss(model, b)), 0.0);
}

TEST(LossFixedPoints, ReconstructionOffsetGivesSquaredOffset) {
    ConstantWorld w;
    auto shifted = w.batches;
    shifted.se = shifted.se - 0.1;
    shifted.sn = shifted.sn - 0.1;
    shifted.tn = shifted.tn - 0.1;
    shifted.tl = shifted.tl - 0.1;
    EXPECT_NEAR(v(image_reconstruction_loss(w.model, shifted)), 0.01, 1e-15);
}


TEST(RewardLoss, HalfProbabilityUnitGradient) {
    auto d = testing_support::unit_gradient_discriminator();
    auto e = torch::tensor({{0.0, 1.0}, {0.0, -2.0}}, torch::kDouble);
    auto l = torch::tensor({{0.0, 3.0}, {0.0, 0.5}}, torch::kDouble);
    auto r = d_rew_loss(d, e, l, torch::tensor({0.3, 0.8}, torch::kDouble), 10.0);
    EXPECT_EQ(v(r.gradient_penalty), 0.0);
    EXPECT_NEAR(v(r.value), 2.0 * std::log(0.5), 1e-15);
    EXPECT_NEAR(v(r.value), -1.3863, 5e-5);
    EXPECT_NEAR(v(r.objective), -2.0 * std::log(0.5), 1e-15);
}

TEST(RewardLoss, FeaturesAreDetached) {
    RewardDiscriminator d(2, 3);
    d->to(torch::kDouble);
    auto e = torch::randn({3, 2}, torch::kDouble).requires_grad_(true);
    auto l = torch::randn({3, 2}, torch::kDouble).requires_grad_(true);
    auto gen = make_generator(1);
    auto r = d_rew_loss(d, e, l, 1.0, gen);
    auto g = torch::autograd::grad({r.objective}, {e, l}, {}, false, false, true);
    EXPECT_FALSE(g[0].defined());
    EXPECT_FALSE(g[1].defined());
}

TEST(RewardLoss, RejectsMismatchedBatches) {
    RewardDiscriminator d(2, 3);
    auto e = torch::randn({3, 2}), l = torch::randn({2, 2});
    EXPECT_THROW(d_rew_loss(d, e, l, torch::rand({3}), 1.0), ContractError);
    EXPECT_THROW(d_rew_loss(d, e.narrow(0, 0, 0), l.narrow(0, 0, 0), torch::rand({0}), 1.0), ContractError);
}

TEST(EstimateReward, LogitOfDiscriminator) {
    RewardDiscriminator d(2, 3);
    d->to(torch::kDouble);
    zero_parameters(*d);
    EXPECT_EQ(v(estimate_reward(d, torch::zeros({1, 2}, torch::kDouble))), 0.0);
    set_parameter(*d, "net.out.bias", {std::log(9.0)});  // D = 0.9
    EXPECT_NEAR(v(estimate_reward(d, torch::zeros({1, 2}, torch::kDouble))), 2.1972, 5e-5);
    init_parameters(*d, 3);
    auto f = torch::randn({16, 2}, torch::kDouble);
    auto p = d->forward(f);
    auto r = estimate_reward(d, f);
    EXPECT_TRUE(torch::allclose(r, torch::log(p) - torch::log1p(-p), 1e-10, 1e-10));
}

TEST(EstimateReward, MonotoneInProbability) {
    RewardDiscriminator d(1, 3);
    d->to(torch::kDouble);
    double last = -1e300;
    for (double bias : {-3.0, -1.0, 0.0, 0.5, 2.0}) {
        zero_parameters(*d);
        set_parameter(*d, "net.out.bias", {bias});
        const double r = v(estimate_reward(d, torch::zeros({1, 1}, torch::kDouble)));
        EXPECT_GT(r, last);
        last = r;
    }
}

TEST(SparseReward, Combination) {
    EXPECT_DOUBLE_EQ(combine_sparse_reward(0.2, false, 100.0, 1.0), 20.0);
    EXPECT_DOUBLE_EQ(combine_sparse_reward(0.0, true, 100.0, 1.0), 100.0);
    EXPECT_DOUBLE_EQ(combine_sparse_reward(-0.37, true, 1.0, 0.0), -0.37);
    EXPECT_THROW(combine_sparse_reward(1.0, false, 0.0, 1.0), ConfigError);
    EXPECT_THROW(combine_sparse_reward(1.0, false, -2.0, 1.0), ConfigError);
}

TEST(LossContracts, SameDomainCycleRejected) {
    auto model = micro_model(1);
    auto b = micro_batches(model->arch(), 2, 2);
    EXPECT_THROW(image_cycle_loss(model, CrossPairs{b.se, Domain::kSource, b.sn, Domain::kSource}), ContractError);
    EXPECT_THROW(feature_cycle_loss(model, CrossPairs{b.tn, Domain::kTarget, b.tl, Domain::kTarget}), ContractError);
}

TEST(LossContracts, EmptyBatchRejected) {
    auto model = micro_model(1);
    auto b = micro_batches(model->arch(), 2, 2);
    b.tl = b.tl.narrow(0, 0, 0);
    EXPECT_THROW(feature_prediction_loss(model, b), ContractError);
    EXPECT_THROW(feature_adversarial_loss(model, b), ContractError);
}

TEST(LossContracts, NegativeWeightRejected) {
    LossWeights w;
    w.img_recon = -1.0;
    EXPECT_THROW(w.validate(), ConfigError);
}

TEST(LossContracts, NonFiniteTermNamed) {
    auto model = micro_model(1);
    auto b = micro_batches(model->arch(), 2, 2);
    b.se[0][0][0][0] = std::numeric_limits<double>::quiet_NaN();
    try {
        total_losses(model, b, LossWeights{});
        FAIL() << "expected NumericalFault";
    } catch (const NumericalFault& f) {
        EXPECT_FALSE(f.component().empty());
    }
}

TEST(LossCycle, ExplicitPairsMatchBatchForm) {
    auto model = micro_model(8);
    auto b = micro_batches(model->arch(), 2, 9);
    // Batch form averages the pairs (SE,TN) and (SN,TL); explicit form takes one pair batch.
    auto a = image_cycle_loss(model, CrossPairs{b.se, Domain::kSource, b.tn, Domain::kTarget});
    auto c = image_cycle_loss(model, CrossPairs{b.sn, Domain::kSource, b.tl, Domain::kTarget});
    EXPECT_NEAR(v(image_cycle_loss(model, b)), 0.5 * (v(a) + v(c)), 1e-12);
    auto fa = feature_cycle_loss(model, CrossPairs{b.se, Domain::kSource, b.tn, Domain::kTarget});
    auto fc = feature_cycle_loss(model, CrossPairs{b.sn, Domain::kSource, b.tl, Domain::kTarget});
    EXPECT_NEAR(v(feature_cycle_loss(model, b)), 0.5 * (v(fa) + v(fc)), 1e-12);
}

TEST(LossCriticPenalty, FiniteAndOnlyTouchesCritics) {
    auto model = micro_model(8);
    auto b = micro_batches(model->arch(), 2, 9);
    ForwardPass fp(model, b);
    auto gen = make_generator(3);
    auto gp = critic_gradient_penalty(fp, gen);
    EXPECT_TRUE(std::isfinite(v(gp)));
    EXPECT_GE(v(gp), 0.0);
    auto eg = model->encoder_generator_parameters();
    auto g = torch::autograd::grad({gp}, eg, {}, false, false, true);
    for (const auto& t : g) EXPECT_TRUE(!t.defined() || t.abs().max().item<double>() == 0.0);
}

TEST(LossGradients, MicroFiniteDifferences) {
    auto model = micro_model(11);
    auto b = micro_batches(model->arch(), 2, 12);
    RewardDiscriminator d(model->arch().behavior_dim(), 3);
    init_parameters(*d, 13);
    d->to(torch::kDouble);
    auto e = torch::randn({3, model->arch().behavior_dim()}, torch::kDouble);
    auto l = torch::randn({3, model->arch().behavior_dim()}, torch::kDouble);
    auto mix = torch::tensor({0.2, 0.5, 0.9}, torch::kDouble);
    for (auto& loss : testing_support::micro_loss_suite(model, b, d, e, l, mix)) {
        if (loss.name != "feat_sim" && loss.name != "d_rew") continue;  // the full suite runs in acceptance
        auto r = testing_support::check_gradient(loss.eval, loss.params);
        EXPECT_LT(r.relative_error, 1e-4) << loss.name;
        EXPECT_GT(r.analytic_norm, 0.0) << loss.name;
    }
}
