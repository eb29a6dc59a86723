#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <torch/torch.h>

#include "d3il/baselines.hpp"
#include "d3il/config.hpp"
#include "d3il/model.hpp"
#include "d3il/trainer.hpp"

namespace d3il {

/// Row labels of a dump: the four phase-1 sets plus "TE" for generated target-expert observations.
inline constexpr const char* kGeneratedTE = "TE";

/// Behavior and domain features of labeled observations, row-aligned. `domain` has zero columns
/// when the model has no domain encoders.
struct FeatureDump {
    std::vector<std::string> labels;
    Eigen::MatrixXf behavior;
    Eigen::MatrixXf domain;
    std::string model_id;

    std::size_t rows() const { return labels.size(); }
    /// Row indices carrying `label`, in dump order.
    std::vector<std::size_t> rows_with(const std::string& label) const;
    void validate() const;

    /// manifest.json + behavior.f32 + domain.f32 (row-major little-endian float32).
    void write(const std::filesystem::path& dir) const;
    static FeatureDump read(const std::filesystem::path& dir);
};

/// Encodes the first n_per_set observations of SE, SN, TN (source sets through BE_S/DE_S,
/// target sets through BE_T/DE_T) and TL, plus n_per_set generated ô_TE built from random
/// (TN, SE) pairs drawn from `seed`.
FeatureDump dump_features(FeatureModel& model, const FeatureSets& sets, int n_per_set, std::uint64_t seed,
                          const std::string& model_id = {});
/// TPIL has one shared encoder and no generator: SE, SN, TN and TL only.
FeatureDump dump_features(TpilModel& model, const FeatureSets& sets, int n_per_set, const std::string& model_id = {});

struct SeparabilityReport {
    double behavior_probe_accuracy = 0.0;
    double domain_probe_accuracy = 0.0;
    double cluster_distance_ratio = 0.0;
};

inline constexpr double kProbeRidge = 1e-3;
inline constexpr int kProbeFolds = 5;

/// k-fold cross-validated accuracy of a ridge classifier on +-1 targets with an unpenalized
/// intercept. Folds come from a seeded shuffle.
double probe_accuracy(const Eigen::MatrixXd& x, const std::vector<int>& y, double ridge = kProbeRidge,
                      int folds = kProbeFolds, std::uint64_t seed = 0);

/// Behavior probe: SE vs an equal number of SN and TN rows. Domain probe: SN vs TN. Both on
/// behavior features. A probe whose classes are missing from the dump reports NaN.
SeparabilityReport separability(const FeatureDump& dump, std::uint64_t seed = 0);

/// ‖mean(a) - mean(b)‖ over the average RMS distance of each group to its own mean.
double cluster_distance_ratio(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b);

struct Embedding {
    Eigen::MatrixXd coords;          // (rows, 2)
    Eigen::MatrixXd axes;            // (dim, 2), orthonormal
    Eigen::Vector2d explained_ratio; // share of total variance per axis
};

/// Top-2 principal components of the behavior features. Each axis is signed so its largest-magnitude
/// entry is positive.
Embedding embed_2d(const FeatureDump& dump);

void write_embedding_csv(const FeatureDump& dump, const Embedding& e, const std::filesystem::path& path);
/// Scatter plot, one colour per label.
void write_scatter_png(const FeatureDump& dump, const Embedding& e, const std::filesystem::path& path, int size = 512);

struct RewardRow {
    std::string label;
    int episode = -1;
    int step = -1;
    double reward = 0.0;
};

struct RewardInspection {
    std::vector<RewardRow> rows;
    std::map<std::string, double> mean_by_label;

    /// Columns label, episode, step, reward.
    void write_csv(const std::filesystem::path& path) const;
};

using ObservationReward = std::function<torch::Tensor(const torch::Tensor&)>;

RewardInspection reward_inspection(const ObservationReward& reward,
                                   const std::vector<std::pair<std::string, std::vector<Observation>>>& labeled,
                                   int batch = 256);

/// r̂ = logit D_rew(BE_T(o)).
ObservationReward d3il_observation_reward(FeatureModel& model, RewardDiscriminator& d);

/// TN observations and ô_TE generated from random (TN, SE) pairs, n of each.
std::vector<std::pair<std::string, std::vector<Observation>>> reward_probe_sets(FeatureModel& model,
                                                                                const FeatureSets& sets, int n,
                                                                                std::uint64_t seed);

/// Ablation cells. The loss ladder is cumulative: basic, +recon, +image_cycle, +similarity,
/// +feature_cycle (the full model). "reward=bd_b" and "no_domain_encoders" apply to the full model.
const std::vector<std::string>& ablation_cell_names();
/// The base config with `cell` applied; unknown names throw ConfigError.
ExperimentConfig ablation_cell(const ExperimentConfig& base, const std::string& cell);

struct AblationGrid {
    ExperimentConfig base;
    std::vector<std::string> cells;
    std::vector<std::uint64_t> seeds;
};

struct AblationRow {
    std::string cell;
    std::vector<double> returns;  // final evaluation mean per seed
    double mean = 0.0;
    double stddev = 0.0;
    bool numerical_fault = false;
    std::string fault;
};

struct AblationTable {
    std::vector<AblationRow> rows;
    /// Columns cell, mean_return, std_return, n_seeds, returns, fault.
    void write_csv(const std::filesystem::path& path) const;
};

/// Every cell over every seed through the same pipeline as a single experiment. Per-cell outputs
/// go to out_dir/<cell>/seed<k>/ when out_dir is non-empty.
AblationTable run_ablation(const AblationGrid& grid, const std::filesystem::path& out_dir = {});

}  // namespace d3il
