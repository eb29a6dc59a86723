#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "d3il/baselines.hpp"
#include "d3il/data.hpp"
#include "d3il/envs.hpp"
#include "d3il/trainer.hpp"

namespace d3il {

enum class Method { kD3il, kTpil };
std::string to_string(Method m);
Method parse_method(const std::string& s);

struct DataConfig {
    int n_demo = 2000;
    CollectionPolicy expert_policy = CollectionPolicy::kScriptedExpert;
    CollectionPolicy nonexpert_policy = CollectionPolicy::kUniformRandom;
};

/// Everything one experiment needs. Component seeds are not stored: they are derived from `seed`
/// by named streams (see seeds()).
struct ExperimentConfig {
    std::string profile = "desk";
    Method method = Method::kD3il;
    EnvSpec source;
    EnvSpec target;
    DataConfig data;
    bool use_domain_encoders = true;
    Phase1Config phase1;
    Phase2Config phase2;
    TpilConfig tpil;
    std::uint64_t seed = 0;
    std::filesystem::path output_dir = "runs/default";
    int threads = 1;

    void validate() const;
    ArchConfig arch() const;
    /// Copies of the phase configs with their seeds filled from the root seed.
    Phase1Config phase1_resolved() const;
    Phase2Config phase2_resolved() const;
    TpilConfig tpil_resolved() const;
    std::uint64_t data_seed(const SetLabel& label) const;
    std::uint64_t model_seed() const;
};

/// Desk-scale preset: 16x16 pendulum recolor, 2000 observations per set, 5000 phase-1 epochs,
/// 30 x 1000 target steps.
ExperimentConfig desk_profile();
/// Published hyperparameters: 32x32 frames, 1000-step episodes, 10000 observations per set,
/// 50000 phase-1 epochs, 20 x 10000 target steps.
ExperimentConfig paper_profile();
ExperimentConfig profile_by_name(const std::string& name);

void to_json(nlohmann::json& j, const ExperimentConfig& c);
/// Fields absent from `j` keep the values already in `c`, so a partial file overlays a profile.
void merge_json(const nlohmann::json& j, ExperimentConfig& c);

/// "phase1.n_epoch_it=100" style override; the value is parsed as JSON, falling back to a string.
void apply_override(ExperimentConfig& c, const std::string& assignment);

/// Starts from a profile (the flag if given, else the one named in the file, else desk), overlays
/// the file, then the key=value overrides.
ExperimentConfig load_config(const std::filesystem::path& path, const std::optional<std::string>& profile_flag,
                             const std::vector<std::string>& overrides);

void write_resolved_config(const ExperimentConfig& c, const std::filesystem::path& dir,
                           const std::string& file_name = "resolved_config.json");

}  // namespace d3il
