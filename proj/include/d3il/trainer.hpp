#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "d3il/data.hpp"
#include "d3il/envs.hpp"
#include "d3il/losses.hpp"
#include "d3il/model.hpp"

namespace d3il {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    void validate(const char* what) const;
};

torch::optim::Adam make_adam(const std::vector<torch::Tensor>& params, const AdamConfig& cfg);
at::Generator make_generator(std::uint64_t seed);

/// The four observation sets of phase 1. `tl` starts as a copy of `tn`.
struct FeatureSets {
    ObservationSet se, sn, tn, tl;
};

struct Phase1Config {
    int n_epoch_it = 5000;
    int batch_per_set = 8;
    LossWeights weights;
    AdamConfig optimizer;
    std::uint64_t seed = 0;
    int checkpoint_every = 0;  // 0 = only at the end
    // Optional constraints on the feature and image discriminators; 0 = off.
    double discriminator_clip = 0.0;
    double critic_gp_weight = 0.0;
    int log_every = 250;

    void validate() const;
};

struct LossHistory {
    std::vector<LossReport> epochs;

    void write_csv(const std::filesystem::path& path) const;
    /// Mean of one column over epochs [first, last).
    double mean(const std::string& column, std::size_t first, std::size_t last) const;
};

/// One phase-1 update: both objectives from a single forward pass, encoder/generator parameters
/// stepped with grad(L_EG) and discriminator parameters with grad(L_FDID).
/// With `critic_gp_weight > 0` the discriminators minimize L_FDID + weight * critic GP, drawing the
/// interpolation coefficients from `gen`; with `discriminator_clip > 0` their weights are clamped
/// to [-clip, clip] after the step.
struct CriticConstraint {
    double clip = 0.0;
    double gp_weight = 0.0;
};

LossReport phase1_step(FeatureModel& model, const Batches& batches, const LossWeights& w,
                       torch::optim::Optimizer& eg_opt, torch::optim::Optimizer& d_opt,
                       const CriticConstraint& critic = {}, at::Generator* gen = nullptr);

Batches sample_batches(const FeatureSets& sets, int batch_per_set, Rng& rng, torch::Dtype dtype = torch::kFloat32);

/// Algorithm-1 loop. With a non-empty `out_dir`, writes losses.csv, feature_model.pt and the
/// resumable phase1_state.pt there; on a numerical fault the last checkpoint is left untouched and
/// the fault is rethrown. With `resume`, training continues from out_dir/phase1_state.pt and the
/// result matches an uninterrupted run bit for bit.
LossHistory train_feature_model(FeatureModel& model, const FeatureSets& sets, const Phase1Config& cfg,
                                const std::filesystem::path& out_dir = {}, bool resume = false);

/// ô_TE = G_T(DE_T(o_TN), BE_S(o_SE)), raw (unclamped).
torch::Tensor generate_target_expert(FeatureModel& model, const torch::Tensor& o_tn, const torch::Tensor& o_se);
Observation generate_target_expert(FeatureModel& model, const Observation& o_tn, const Observation& o_se);

/// Versioned archive helpers shared by every checkpoint writer. save_checkpoint goes through a
/// temporary file so an interrupted write never leaves a truncated checkpoint behind.
torch::serialize::OutputArchive new_checkpoint();
torch::serialize::InputArchive open_checkpoint(const std::filesystem::path& path);
void save_checkpoint(torch::serialize::OutputArchive& a, const std::filesystem::path& path);
void write_arch(torch::serialize::OutputArchive& a, const ArchConfig& arch);
ArchConfig read_arch(torch::serialize::InputArchive& a);

void save_feature_model(FeatureModel& model, const std::filesystem::path& path);
FeatureModel load_feature_model(const std::filesystem::path& path);

struct SacConfig {
    double gamma = 0.99;
    double rho = 0.995;
    double alpha = 0.1;
    AdamConfig optimizer{3e-4, 0.9, 0.999};
    int batch_size = 256;
    int hidden = 256;
    void validate() const;
};

enum class ExpertFeatureSource { kGeneratedTE, kSourceSE };
std::string to_string(ExpertFeatureSource s);
ExpertFeatureSource parse_expert_feature_source(const std::string& s);

/// Where the imitation reward comes from during phase 2.
enum class RewardSource { kRewardDiscriminator, kBehaviorDiscriminator };
std::string to_string(RewardSource s);
RewardSource parse_reward_source(const std::string& s);

struct SparseGoal {
    double c = 100.0;
    double r_goal = 1.0;
};

struct Phase2Config {
    int n_epoch_pol = 30;
    int steps_per_epoch = 1000;
    int n_update_d = 2;
    int n_update_theta = 100;
    std::size_t buffer_capacity = 100000;
    SacConfig sac;
    AdamConfig d_optimizer;
    int d_batch = 128;
    int d_hidden = 100;
    double gp_weight = 1.0;
    // Share of the learner side of each D_rew batch drawn from O_TN while the buffer is small;
    // decays linearly to zero at tn_mix_horizon * d_batch buffered transitions.
    double tn_mix_fraction = 0.5;
    int tn_mix_horizon = 10;
    int expert_pool = 2000;
    int start_steps = 1000;
    int n_eval = 10;
    ExpertFeatureSource expert_feature_source = ExpertFeatureSource::kGeneratedTE;
    RewardSource reward_source = RewardSource::kRewardDiscriminator;
    std::optional<SparseGoal> sparse_goal;
    std::uint64_t seed = 0;
    int checkpoint_every = 0;

    void validate() const;
};

struct EvalResult {
    double mean = 0.0;
    double stddev = 0.0;
    std::vector<double> returns;
};

struct Phase2Epoch {
    int epoch = 0;
    long env_steps = 0;
    double mean_return = 0.0;
    double std_return = 0.0;
    double d_rew_loss = 0.0;
    double critic_loss = 0.0;
    double actor_loss = 0.0;
    double mean_reward = 0.0;
};

struct PolicyHistory {
    std::vector<Phase2Epoch> epochs;
    void write_csv(const std::filesystem::path& path) const;
};

/// Frozen pieces phase 2 needs from whichever feature learner produced them.
struct RewardModel {
    /// Observation batch -> behavior features; never trained in phase 2.
    std::function<torch::Tensor(const torch::Tensor&)> encode;
    /// Fixed feature -> reward map; when empty a reward discriminator is trained on `expert_pool`
    /// vs learner features and its logit is the reward.
    std::function<torch::Tensor(const torch::Tensor&)> fixed_reward;
    torch::Tensor expert_pool;
    torch::Tensor nonexpert_pool;
};

RewardModel d3il_reward_model(FeatureModel& model, const FeatureSets& sets, const Phase2Config& cfg);

struct PolicyResult {
    ActorCritic policy{nullptr};
    RewardDiscriminator reward{nullptr};  // null when the reward is fixed
    PolicyHistory history;
    ReplayBuffer buffer{1};
};

/// Actor and critics seeded from cfg.seed; targets start equal to the critics.
ActorCritic init_policy(int state_dim, int action_dim, const Phase2Config& cfg);

/// Algorithm-2 loop against a frozen reward model.
PolicyResult train_policy(const RewardModel& reward, const EnvSpec& target, const Phase2Config& cfg,
                          const std::filesystem::path& out_dir = {});
PolicyResult train_policy(FeatureModel& model, const EnvSpec& target, const FeatureSets& sets,
                          const Phase2Config& cfg, const std::filesystem::path& out_dir = {});

struct SacBatch {
    torch::Tensor state, action, reward, next_state, done;
};

struct SacStats {
    double critic_loss = 0.0;
    double actor_loss = 0.0;
};

SacStats sac_update(ActorCritic& ac, torch::optim::Optimizer& actor_opt, torch::optim::Optimizer& critic_opt,
                    const SacBatch& batch, const SacConfig& cfg, at::Generator& gen);

/// Deterministic (mean-action) rollouts scored with the true target reward.
EvalResult evaluate_policy(ActorCritic& ac, const EnvSpec& spec, int n_episodes, std::uint64_t seed);
EvalResult evaluate_random(const EnvSpec& spec, int n_episodes, std::uint64_t seed);
EvalResult evaluate_expert(const EnvSpec& spec, int n_episodes, std::uint64_t seed);

void save_policy(ActorCritic& ac, const std::filesystem::path& path);
void save_reward_discriminator(RewardDiscriminator& d, int behavior_dim, int hidden, const std::filesystem::path& path);
RewardDiscriminator load_reward_discriminator(const std::filesystem::path& path);
ActorCritic load_policy(const std::filesystem::path& path);

}  // namespace d3il
