#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "d3il/error.hpp"
#include "d3il/trainer.hpp"
#include "support/micro.hpp"

using namespace d3il;
namespace fs = std::filesystem;

namespace {

// Micro widths on real 16x16 colour observations.
ArchConfig small_arch() {
    auto a = ArchConfig::micro(16);
    a.frame_channels = kColorChannels;
    a.validate();
    return a;
}

const FeatureSets& small_sets() {
    static const FeatureSets sets = [] {
        EnvSpec src;
        src.episode_length = 20;
        EnvSpec tgt = src;
        tgt.domain_shift = DomainShift::kRecolor;
        tgt.shift_params.hue_degrees = 120.0;
        FeatureSets s;
        s.se = collect_set(src, CollectionPolicy::kScriptedExpert, 40, 1, kSE);
        s.sn = collect_set(src, CollectionPolicy::kUniformRandom, 40, 2, kSN);
        s.tn = collect_set(tgt, CollectionPolicy::kUniformRandom, 40, 3, kTN);
        s.tl = init_tl_from_tn(s.tn);
        return s;
    }();
    return sets;
}

Phase1Config short_phase1(int epochs) {
    Phase1Config c;
    c.n_epoch_it = epochs;
    c.batch_per_set = 4;
    c.seed = 5;
    c.log_every = 0;
    return c;
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

}  // namespace

TEST(Trainer, Phase1StepMovesOnlyItsOwnGroup) {
    auto model = testing_support::micro_model(3);
    auto b = testing_support::micro_batches(model->arch(), 4, 4);
    auto eg_params = model->encoder_generator_parameters();
    auto d_params = model->discriminator_parameters();
    // A zero learning rate freezes one group; Adam with lr 0 leaves parameters untouched.
    auto eg_opt = torch::optim::Adam(eg_params, torch::optim::AdamOptions(1e-2));
    auto d_opt = torch::optim::Adam(d_params, torch::optim::AdamOptions(0.0));
    const auto eg_before = parameter_checksum(eg_params), d_before = parameter_checksum(d_params);
    phase1_step(model, b, LossWeights{}, eg_opt, d_opt);
    EXPECT_NE(parameter_checksum(eg_params), eg_before);
    EXPECT_EQ(parameter_checksum(d_params), d_before);

    auto eg_frozen = torch::optim::Adam(eg_params, torch::optim::AdamOptions(0.0));
    auto d_live = torch::optim::Adam(d_params, torch::optim::AdamOptions(1e-2));
    const auto eg_mid = parameter_checksum(eg_params), d_mid = parameter_checksum(d_params);
    phase1_step(model, b, LossWeights{}, eg_frozen, d_live);
    EXPECT_EQ(parameter_checksum(eg_params), eg_mid);
    EXPECT_NE(parameter_checksum(d_params), d_mid);
}

TEST(Trainer, DiscriminatorClipBoundsWeights) {
    auto model = testing_support::micro_model(6);
    auto b = testing_support::micro_batches(model->arch(), 4, 7);
    auto eg_opt = make_adam(model->encoder_generator_parameters(), {});
    auto d_opt = make_adam(model->discriminator_parameters(), {0.5, 0.9, 0.999});
    phase1_step(model, b, LossWeights{}, eg_opt, d_opt, CriticConstraint{0.01, 0.0});
    for (const auto& p : model->discriminator_parameters()) EXPECT_LE(p.abs().max().item<double>(), 0.01 + 1e-15);
}

TEST(Trainer, CriticPenaltyIsReported) {
    auto model = testing_support::micro_model(8);
    auto b = testing_support::micro_batches(model->arch(), 4, 9);
    auto eg_opt = make_adam(model->encoder_generator_parameters(), {});
    auto d_opt = make_adam(model->discriminator_parameters(), {});
    auto gen = make_generator(1);
    auto r = phase1_step(model, b, LossWeights{}, eg_opt, d_opt, CriticConstraint{0.0, 10.0}, &gen);
    EXPECT_GT(r.critic_gp, 0.0);
    auto plain = phase1_step(model, b, LossWeights{}, eg_opt, d_opt);
    EXPECT_EQ(plain.critic_gp, 0.0);
}

TEST(Trainer, SampleBatchesShapes) {
    Rng rng(0);
    auto b = sample_batches(small_sets(), 5, rng);
    for (auto s : kAllSets) EXPECT_EQ(b[s].sizes(), (std::vector<int64_t>{5, 12, 16, 16}));
    EXPECT_EQ(b.se.scalar_type(), torch::kFloat32);
}

TEST(Trainer, TrainingIsReproducible) {
    auto dir = testing_support::scratch_dir("trainer_repro");
    auto a = init_model(small_arch(), 2);
    auto b = init_model(small_arch(), 2);
    train_feature_model(a, small_sets(), short_phase1(4), dir / "a");
    train_feature_model(b, small_sets(), short_phase1(4), dir / "b");
    EXPECT_EQ(parameter_checksum(a->parameters()), parameter_checksum(b->parameters()));
    const auto csv = slurp(dir / "a" / "losses.csv");
    EXPECT_EQ(csv, slurp(dir / "b" / "losses.csv"));
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 5);
}

TEST(Trainer, ResumeMatchesUninterruptedRun) {
    auto dir = testing_support::scratch_dir("trainer_resume");
    auto full = init_model(small_arch(), 3);
    auto full_history = train_feature_model(full, small_sets(), short_phase1(6), dir / "full");

    auto part = init_model(small_arch(), 3);
    train_feature_model(part, small_sets(), short_phase1(3), dir / "part");
    // A fresh model with different weights: everything must come from the saved state.
    auto resumed = init_model(small_arch(), 99);
    auto history = train_feature_model(resumed, small_sets(), short_phase1(6), dir / "part", true);

    EXPECT_EQ(parameter_checksum(resumed->parameters()), parameter_checksum(full->parameters()));
    ASSERT_EQ(history.epochs.size(), full_history.epochs.size());
    EXPECT_EQ(slurp(dir / "part" / "losses.csv"), slurp(dir / "full" / "losses.csv"));
    EXPECT_THROW(train_feature_model(resumed, small_sets(), short_phase1(6), dir / "none", true), IoError);
}

TEST(Trainer, FeatureModelCheckpointRoundTrip) {
    auto dir = testing_support::scratch_dir("trainer_ckpt");
    auto model = init_model(small_arch(), 4);
    save_feature_model(model, dir / "m.pt");
    auto back = load_feature_model(dir / "m.pt");
    EXPECT_TRUE(back->arch() == model->arch());
    EXPECT_EQ(parameter_checksum(back->parameters()), parameter_checksum(model->parameters()));
    EXPECT_FALSE(fs::exists(dir / "m.pt.tmp"));
    EXPECT_THROW(load_feature_model(dir / "missing.pt"), IoError);
    std::ofstream(dir / "junk.pt") << "not a checkpoint";
    EXPECT_THROW(load_feature_model(dir / "junk.pt"), IoError);
}

TEST(Trainer, GeneratedTargetExpert) {
    auto model = init_model(small_arch(), 5);
    const auto& s = small_sets();
    auto a = generate_target_expert(model, s.tn.at(3), s.se.at(7));
    auto b = generate_target_expert(model, s.tn.at(3), s.se.at(7));
    EXPECT_EQ(a.height, 16);
    EXPECT_EQ(a.pixels.size(), s.tn.at(3).pixels.size());
    EXPECT_EQ(a.pixels, b.pixels);
    EXPECT_THROW(generate_target_expert(model, torch::rand({2, 12, 16, 16}), torch::rand({3, 12, 16, 16})),
                 ContractError);
}

TEST(Trainer, LossHistoryMean) {
    LossHistory h;
    for (int i = 1; i <= 4; ++i) {
        LossReport r;
        r.img_recon = i;
        h.epochs.push_back(r);
    }
    EXPECT_DOUBLE_EQ(h.mean("img_recon", 0, 4), 2.5);
    EXPECT_DOUBLE_EQ(h.mean("img_recon", 2, 100), 3.5);
    EXPECT_THROW(h.mean("nope", 0, 4), ContractError);
    EXPECT_THROW(h.mean("img_recon", 4, 4), ContractError);
}

TEST(Trainer, LossReportValuesRoundTrip) {
    std::vector<double> v(LossReport::column_names().size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = 0.5 + static_cast<double>(i);
    EXPECT_EQ(LossReport::from_values(v).values(), v);
}

TEST(Trainer, ConfigValidation) {
    auto c = short_phase1(1);
    EXPECT_NO_THROW(c.validate());
    c.n_epoch_it = 0;
    EXPECT_THROW(c.validate(), ConfigError);
    c = short_phase1(1);
    c.optimizer.lr = -1.0;
    EXPECT_THROW(c.validate(), ConfigError);
    c = short_phase1(1);
    c.optimizer.beta2 = 1.0;
    EXPECT_THROW(c.validate(), ConfigError);

    Phase2Config p;
    EXPECT_NO_THROW(p.validate());
    p.sac.gamma = 1.0;
    EXPECT_THROW(p.validate(), ConfigError);
    p = Phase2Config{};
    p.tn_mix_fraction = 1.5;
    EXPECT_THROW(p.validate(), ConfigError);
    EXPECT_THROW(parse_reward_source("D"), ConfigError);
    EXPECT_EQ(parse_expert_feature_source(to_string(ExpertFeatureSource::kSourceSE)), ExpertFeatureSource::kSourceSE);
}

TEST(Trainer, Phase1RejectsMislabeledSets) {
    auto sets = small_sets();
    std::swap(sets.se, sets.sn);
    auto model = init_model(small_arch(), 0);
    EXPECT_THROW(train_feature_model(model, sets, short_phase1(1)), ContractError);
}

TEST(Sac, UpdateIsFiniteAndMovesTargetsSlowly) {
    SacConfig cfg;
    cfg.hidden = 16;
    Phase2Config p;
    p.sac = cfg;
    auto ac = init_policy(3, 1, p);
    auto actor_opt = make_adam(ac->actor_parameters(), cfg.optimizer);
    auto critic_opt = make_adam(ac->critic_parameters(), cfg.optimizer);
    SacBatch b{torch::randn({32, 3}), torch::rand({32, 1}) * 2 - 1, torch::zeros({32}), torch::randn({32, 3}),
               torch::zeros({32})};
    auto gen = make_generator(0);
    const auto target_before = parameter_checksum(ac->q1_target->parameters());
    const auto actor_before = parameter_checksum(ac->actor->parameters());
    auto stats = sac_update(ac, actor_opt, critic_opt, b, cfg, gen);
    EXPECT_TRUE(std::isfinite(stats.critic_loss));
    EXPECT_TRUE(std::isfinite(stats.actor_loss));
    EXPECT_NE(parameter_checksum(ac->actor->parameters()), actor_before);
    EXPECT_NE(parameter_checksum(ac->q1_target->parameters()), target_before);
}

TEST(Sac, InitPolicyIsSeeded) {
    Phase2Config p;
    p.sac.hidden = 8;
    auto a = init_policy(4, 2, p);
    auto b = init_policy(4, 2, p);
    EXPECT_EQ(parameter_checksum(a->parameters()), parameter_checksum(b->parameters()));
    auto q = a->q1->parameters(), tq = a->q1_target->parameters();
    for (std::size_t i = 0; i < q.size(); ++i) EXPECT_TRUE(torch::equal(q[i], tq[i]));
}

TEST(Sac, PolicyCheckpointRoundTrip) {
    auto dir = testing_support::scratch_dir("policy_ckpt");
    Phase2Config p;
    p.sac.hidden = 8;
    auto ac = init_policy(4, 2, p);
    save_policy(ac, dir / "policy.pt");
    auto back = load_policy(dir / "policy.pt");
    EXPECT_EQ(parameter_checksum(back->parameters()), parameter_checksum(ac->parameters()));
    RewardDiscriminator d(6, 5);
    init_parameters(*d, 2);
    save_reward_discriminator(d, 6, 5, dir / "d.pt");
    EXPECT_EQ(parameter_checksum(load_reward_discriminator(dir / "d.pt")->parameters()),
              parameter_checksum(d->parameters()));
}

TEST(Phase2, ShortRunAgainstFixedReward) {
    EnvSpec target;
    target.episode_length = 20;
    target.domain_shift = DomainShift::kRecolor;
    Phase2Config cfg;
    cfg.n_epoch_pol = 2;
    cfg.steps_per_epoch = 40;
    cfg.n_update_theta = 2;
    cfg.start_steps = 20;
    cfg.n_eval = 2;
    cfg.sac.batch_size = 8;
    cfg.sac.hidden = 8;
    RewardModel r;
    r.encode = [](const torch::Tensor& x) { return x.mean({2, 3}); };
    r.fixed_reward = [](const torch::Tensor& f) { return f.sum(1); };
    auto a = train_policy(r, target, cfg);
    auto b = train_policy(r, target, cfg);
    ASSERT_EQ(a.history.epochs.size(), 2u);
    EXPECT_EQ(a.history.epochs.back().env_steps, 80);
    EXPECT_FALSE(a.reward);
    EXPECT_EQ(parameter_checksum(a.policy->parameters()), parameter_checksum(b.policy->parameters()));
    EXPECT_EQ(a.history.epochs.back().mean_return, b.history.epochs.back().mean_return);
}

TEST(Phase2, BaselinesAreOrdered) {
    EnvSpec target;
    target.domain_shift = DomainShift::kRecolor;
    auto random = evaluate_random(target, 10, 0);
    auto expert = evaluate_expert(target, 10, 0);
    EXPECT_EQ(random.returns.size(), 10u);
    EXPECT_GT(expert.mean, 3.0 * random.mean);
}
