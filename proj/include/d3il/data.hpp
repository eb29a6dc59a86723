#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "d3il/envs.hpp"
#include "d3il/observation.hpp"
#include "d3il/rng.hpp"

namespace d3il {

enum class Domain { kSource, kTarget };
enum class Behavior { kExpert, kNonexpert, kLearner };

struct SetLabel {
    Domain domain = Domain::kSource;
    Behavior behavior = Behavior::kExpert;

    bool operator==(const SetLabel&) const = default;
    /// "SE", "SN", "TN", "TL" (and "SL"/"TE" for completeness).
    std::string code() const;
    static SetLabel parse(const std::string& code);
};

inline constexpr SetLabel kSE{Domain::kSource, Behavior::kExpert};
inline constexpr SetLabel kSN{Domain::kSource, Behavior::kNonexpert};
inline constexpr SetLabel kTN{Domain::kTarget, Behavior::kNonexpert};
inline constexpr SetLabel kTL{Domain::kTarget, Behavior::kLearner};

enum class CollectionPolicy {
    kScriptedExpert,
    kUniformRandom,
    // epsilon-greedy mixture of the two (epsilon = 0.5); not used by default
    kMedium,
};

std::string to_string(CollectionPolicy p);
CollectionPolicy parse_collection_policy(const std::string& s);

/// Labeled set of stacked observations. Stored as per-episode frame sequences; observations are
/// the stride-1 sliding windows over each episode (one per timestep, never spanning episodes).
class ObservationSet {
public:
    ObservationSet() = default;
    ObservationSet(SetLabel label, EnvSpec spec, CollectionPolicy policy, std::uint64_t seed);

    const SetLabel& label() const { return label_; }
    void relabel(SetLabel label) { label_ = label; }
    const EnvSpec& spec() const { return spec_; }
    CollectionPolicy policy() const { return policy_; }
    std::uint64_t seed() const { return seed_; }

    /// Appends one episode: episode_length + 1 frames (the reset frame first).
    void add_episode(std::vector<PackedFrame> frames);

    std::size_t size() const;
    std::size_t episode_count() const { return episodes_.size(); }
    const std::vector<PackedFrame>& episode_frames(std::size_t e) const { return episodes_.at(e); }

    Observation at(std::size_t index) const;

    /// FNV-1a over every frame byte in episode order, as 16 hex digits.
    std::string checksum() const;

    bool operator==(const ObservationSet& other) const;

private:
    SetLabel label_;
    EnvSpec spec_;
    CollectionPolicy policy_ = CollectionPolicy::kUniformRandom;
    std::uint64_t seed_ = 0;
    std::vector<std::vector<PackedFrame>> episodes_;
};

ObservationSet collect_set(const EnvSpec& spec, CollectionPolicy policy, int n_demo, std::uint64_t seed,
                           SetLabel label);

/// Deep copy of a (target, nonexpert) set relabeled (target, learner).
ObservationSet init_tl_from_tn(const ObservationSet& tn);

/// Uniform draw without replacement within the call.
std::vector<Observation> sample_minibatch(const ObservationSet& set, std::size_t n, Rng& rng);
std::vector<std::size_t> sample_indices(std::size_t population, std::size_t n, Rng& rng);

void write_set(const ObservationSet& set, const std::filesystem::path& dir);
ObservationSet read_set(const std::filesystem::path& dir);

struct Transition {
    std::vector<float> state;
    std::vector<float> action;
    std::vector<float> next_state;
    Observation observation;  // observation after the action
    // Behavior feature of `observation` under the frozen target behavior encoder, cached at push time.
    std::vector<float> behavior_feature;
    double true_reward = 0.0;
    bool reached_goal = false;
};

/// Fixed-capacity ring of transitions; oldest entries are evicted first.
class ReplayBuffer {
public:
    explicit ReplayBuffer(std::size_t capacity);

    void push(Transition t);
    /// Uniform with replacement.
    std::vector<const Transition*> sample(std::size_t n, Rng& rng) const;

    std::size_t size() const { return entries_.size(); }
    std::size_t capacity() const { return capacity_; }
    bool empty() const { return entries_.empty(); }
    /// i-th entry in insertion order (0 = oldest retained).
    const Transition& at(std::size_t i) const;

private:
    std::size_t capacity_;
    std::size_t head_ = 0;  // next slot to overwrite once full
    std::vector<Transition> entries_;
};

}  // namespace d3il
