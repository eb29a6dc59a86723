#pragma once

#include <array>
#include <cstdint>
#include <deque>
#include <optional>
#include <string>
#include <vector>

#include "d3il/observation.hpp"
#include "d3il/rng.hpp"

namespace d3il {

enum class TaskFamily { kPendulumBalance, kDotReacher };
enum class DomainShift { kNone, kRecolor, kCameraTilt, kLinkCount };

std::string to_string(TaskFamily f);
std::string to_string(DomainShift s);
TaskFamily parse_task_family(const std::string& s);
DomainShift parse_domain_shift(const std::string& s);

struct ShiftParams {
    double hue_degrees = 0.0;   // recolor
    double tilt_degrees = 0.0;  // camera_tilt
    int link_count = 1;         // link_count, in {1, 2, 3}

    bool operator==(const ShiftParams&) const = default;
};

struct EnvSpec {
    TaskFamily task_family = TaskFamily::kPendulumBalance;
    int image_size = 16;
    int episode_length = 100;
    DomainShift domain_shift = DomainShift::kNone;
    ShiftParams shift_params;
    std::uint64_t seed = 0;

    bool operator==(const EnvSpec&) const = default;

    /// Throws ConfigError on an invalid spec.
    void validate() const;

    /// Number of links rendered and simulated. Families default to 1 (pendulum) and 2 (reacher)
    /// unless the spec carries a link_count shift.
    int links() const;
    /// Length of the learner's state vector (see SynthEnv::policy_state).
    int state_dim() const;
    int action_dim() const;
};

struct EnvState {
    // pendulum: [angle_1..angle_n, velocity_1..velocity_n]; reacher: [angle_1..angle_n]
    std::vector<double> physical_state;
    int step_index = 0;
    std::optional<std::array<double, 2>> goal;
    // Last four quantized frames, oldest first. Maintained by reset/step.
    std::deque<PackedFrame> frames;
};

struct StepResult {
    EnvState state;
    Observation observation;
    double true_reward = 0.0;
    bool done = false;
    bool reached_goal = false;
};

inline constexpr double kPendulumMaxVelocity = 8.0;
inline constexpr double kUprightAngle = 0.35;
inline constexpr double kReachRadius = 0.1;

/// The 16 goal candidates of dot_reacher.
const std::array<std::array<double, 2>, 16>& reacher_goal_candidates();

/// Analytic source/target visual environment. All methods are const; state is explicit.
class SynthEnv {
public:
    explicit SynthEnv(EnvSpec spec);

    const EnvSpec& spec() const { return spec_; }

    std::pair<EnvState, Observation> reset(std::uint64_t seed) const;
    StepResult step(const EnvState& state, const std::vector<double>& action) const;
    std::vector<double> scripted_expert(const EnvState& state) const;
    Frame render(const EnvState& state) const;

    /// Vector fed to the learner policy: per link (cos, sin, velocity) for the pendulum,
    /// per link (cos, sin) plus the goal for the reacher.
    std::vector<float> policy_state(const EnvState& state) const;

    /// Return of a full episode under the best possible behavior (pendulum: every step upright).
    double optimal_return() const;

private:
    std::vector<std::array<double, 2>> joint_positions(const EnvState& state) const;
    double true_reward(const EnvState& state, bool* reached) const;
    Observation observe(const EnvState& state) const;

    EnvSpec spec_;
};

// Free-function forms of the environment operations.
std::pair<EnvState, Observation> reset(const EnvSpec& spec, std::uint64_t seed);
StepResult step(const EnvSpec& spec, const EnvState& state, const std::vector<double>& action);
std::vector<double> scripted_expert(const EnvState& state, const EnvSpec& spec);
Frame render(const EnvState& state, const EnvSpec& spec);

std::vector<double> uniform_random_action(int dim, Rng& rng);

double wrap_angle(double a);

}  // namespace d3il
