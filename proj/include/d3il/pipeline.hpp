#pragma once

#include <filesystem>

#include "d3il/baselines.hpp"
#include "d3il/config.hpp"
#include "d3il/trainer.hpp"

namespace d3il {

/// Directory layout of one experiment under its output root.
struct RunLayout {
    std::filesystem::path root;

    std::filesystem::path data() const { return root / "data"; }
    std::filesystem::path features() const { return root / "features"; }
    std::filesystem::path policy() const { return root / "policy"; }
    std::filesystem::path analysis() const { return root / "analysis"; }
    std::filesystem::path feature_checkpoint(Method m) const;
};

/// O_SE, O_SN, O_TN from the config's policies and seeds; O_TL starts as a copy of O_TN.
FeatureSets collect_sets(const ExperimentConfig& c);
void write_sets(const FeatureSets& sets, const std::filesystem::path& data_dir);
FeatureSets load_sets(const std::filesystem::path& data_dir);

FeatureModel run_phase1(const ExperimentConfig& c, const FeatureSets& sets, const std::filesystem::path& out_dir = {},
                        bool resume = false);
TpilModel run_tpil(const ExperimentConfig& c, const FeatureSets& sets, const std::filesystem::path& out_dir = {});

struct PolicyRun {
    PolicyResult result;
    EvalResult final_eval;
};

PolicyRun run_phase2(const ExperimentConfig& c, FeatureModel& model, const FeatureSets& sets,
                     const std::filesystem::path& out_dir = {});
PolicyRun run_phase2(const ExperimentConfig& c, TpilModel& model, const FeatureSets& sets,
                     const std::filesystem::path& out_dir = {});

/// n_eval deterministic episodes on the target task from the config's evaluation stream.
EvalResult final_evaluation(const ExperimentConfig& c, ActorCritic& policy);

}  // namespace d3il
