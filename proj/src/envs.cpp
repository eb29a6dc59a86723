#include "d3il/envs.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "d3il/error.hpp"

namespace d3il {

namespace {

constexpr double kPi = std::numbers::pi;
constexpr double kDt = 0.05;
constexpr double kGravity = 9.81;
constexpr double kDamping = 0.5;
constexpr double kTorqueGain = 5.0;
constexpr double kPoleLength = 1.0;
constexpr double kReacherStep = 0.25;
constexpr double kViewHalfExtent = 1.25;
constexpr int kSubsamples = 4;

using Rgb = std::array<float, 3>;

constexpr Rgb kBackground{0.10f, 0.10f, 0.12f};
constexpr Rgb kLinkColor{0.95f, 0.60f, 0.15f};
constexpr Rgb kBaseColor{0.20f, 0.50f, 0.95f};
constexpr Rgb kGoalColor{0.90f, 0.15f, 0.25f};

Rgb rotate_hue(const Rgb& c, double degrees) {
    if (degrees == 0.0) return c;
    const float r = c[0], g = c[1], b = c[2];
    const float mx = std::max({r, g, b});
    const float mn = std::min({r, g, b});
    const float delta = mx - mn;
    double h = 0.0;
    if (delta > 0.0f) {
        if (mx == r) {
            h = 60.0 * std::fmod((g - b) / delta, 6.0f);
        } else if (mx == g) {
            h = 60.0 * ((b - r) / delta + 2.0);
        } else {
            h = 60.0 * ((r - g) / delta + 4.0);
        }
    }
    const double s = mx > 0.0f ? delta / mx : 0.0;
    const double v = mx;
    h = std::fmod(h + degrees, 360.0);
    if (h < 0.0) h += 360.0;
    const double cc = v * s;
    const double x = cc * (1.0 - std::fabs(std::fmod(h / 60.0, 2.0) - 1.0));
    const double m = v - cc;
    double rr = 0, gg = 0, bb = 0;
    switch (static_cast<int>(h / 60.0) % 6) {
        case 0: rr = cc; gg = x; break;
        case 1: rr = x; gg = cc; break;
        case 2: gg = cc; bb = x; break;
        case 3: gg = x; bb = cc; break;
        case 4: rr = x; bb = cc; break;
        default: rr = cc; bb = x; break;
    }
    return {static_cast<float>(rr + m), static_cast<float>(gg + m), static_cast<float>(bb + m)};
}

struct Primitive {
    enum Kind { kCapsule, kRect, kDisc } kind;
    std::array<double, 2> a;
    std::array<double, 2> b;  // capsule end / rect half-size
    double radius;
    Rgb color;

    bool contains(double x, double y) const {
        switch (kind) {
            case kDisc: {
                const double dx = x - a[0], dy = y - a[1];
                return dx * dx + dy * dy <= radius * radius;
            }
            case kRect:
                return std::fabs(x - a[0]) <= b[0] && std::fabs(y - a[1]) <= b[1];
            case kCapsule: {
                const double vx = b[0] - a[0], vy = b[1] - a[1];
                const double wx = x - a[0], wy = y - a[1];
                const double len2 = vx * vx + vy * vy;
                double t = len2 > 0.0 ? (wx * vx + wy * vy) / len2 : 0.0;
                t = std::clamp(t, 0.0, 1.0);
                const double dx = wx - t * vx, dy = wy - t * vy;
                return dx * dx + dy * dy <= radius * radius;
            }
        }
        return false;
    }
};

std::uint64_t reset_seed(std::uint64_t seed) { return stream_seed(seed, "env.reset"); }

}  // namespace

std::string to_string(TaskFamily f) {
    return f == TaskFamily::kPendulumBalance ? "pendulum_balance" : "dot_reacher";
}

std::string to_string(DomainShift s) {
    switch (s) {
        case DomainShift::kNone: return "none";
        case DomainShift::kRecolor: return "recolor";
        case DomainShift::kCameraTilt: return "camera_tilt";
        case DomainShift::kLinkCount: return "link_count";
    }
    return "none";
}

TaskFamily parse_task_family(const std::string& s) {
    if (s == "pendulum_balance") return TaskFamily::kPendulumBalance;
    if (s == "dot_reacher") return TaskFamily::kDotReacher;
    throw ConfigError("unknown task family '" + s + "'");
}

DomainShift parse_domain_shift(const std::string& s) {
    if (s == "none") return DomainShift::kNone;
    if (s == "recolor") return DomainShift::kRecolor;
    if (s == "camera_tilt") return DomainShift::kCameraTilt;
    if (s == "link_count") return DomainShift::kLinkCount;
    throw ConfigError("unknown domain shift '" + s + "'");
}

void EnvSpec::validate() const {
    if (image_size != 16 && image_size != 32 && image_size != 48) {
        throw ConfigError("image_size must be one of 16/32/48, got " + std::to_string(image_size));
    }
    if (episode_length < 1) throw ConfigError("episode_length must be positive");
    if (domain_shift == DomainShift::kLinkCount &&
        (shift_params.link_count < 1 || shift_params.link_count > 3)) {
        throw ConfigError("link_count must be in {1,2,3}");
    }
    if (!std::isfinite(shift_params.hue_degrees) || !std::isfinite(shift_params.tilt_degrees)) {
        throw ConfigError("shift parameters must be finite");
    }
}

int EnvSpec::links() const {
    if (domain_shift == DomainShift::kLinkCount) return shift_params.link_count;
    return task_family == TaskFamily::kPendulumBalance ? 1 : 2;
}

int EnvSpec::state_dim() const {
    return task_family == TaskFamily::kPendulumBalance ? 3 * links() : 2 * links() + 2;
}

int EnvSpec::action_dim() const { return links(); }

const std::array<std::array<double, 2>, 16>& reacher_goal_candidates() {
    static const auto candidates = [] {
        std::array<std::array<double, 2>, 16> out{};
        for (int i = 0; i < 16; ++i) {
            const double radius = (i % 2 == 0) ? 0.8 : 0.45;
            const double angle = 2.0 * kPi * i / 16.0;
            out[i] = {radius * std::cos(angle), radius * std::sin(angle)};
        }
        return out;
    }();
    return candidates;
}

double wrap_angle(double a) {
    a = std::fmod(a + kPi, 2.0 * kPi);
    if (a < 0.0) a += 2.0 * kPi;
    return a - kPi;
}

std::vector<double> uniform_random_action(int dim, Rng& rng) {
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    std::vector<double> a(dim);
    for (auto& v : a) v = u(rng);
    return a;
}

SynthEnv::SynthEnv(EnvSpec spec) : spec_(std::move(spec)) { spec_.validate(); }

std::vector<std::array<double, 2>> SynthEnv::joint_positions(const EnvState& state) const {
    const int n = spec_.links();
    std::vector<std::array<double, 2>> pts;
    pts.reserve(n + 1);
    pts.push_back({0.0, 0.0});
    const double seg = kPoleLength / n;
    double cumulative = 0.0;
    for (int i = 0; i < n; ++i) {
        const auto& p = pts.back();
        if (spec_.task_family == TaskFamily::kPendulumBalance) {
            // absolute angle, 0 = upright
            const double phi = state.physical_state[i];
            pts.push_back({p[0] + seg * std::sin(phi), p[1] + seg * std::cos(phi)});
        } else {
            cumulative += state.physical_state[i];
            pts.push_back({p[0] + seg * std::cos(cumulative), p[1] + seg * std::sin(cumulative)});
        }
    }
    return pts;
}

double SynthEnv::true_reward(const EnvState& state, bool* reached) const {
    const auto pts = joint_positions(state);
    const auto& tip = pts.back();
    if (spec_.task_family == TaskFamily::kPendulumBalance) {
        if (reached) *reached = false;
        return tip[1] >= kPoleLength * std::cos(kUprightAngle) ? 1.0 : 0.0;
    }
    const auto& g = *state.goal;
    const double d = std::hypot(tip[0] - g[0], tip[1] - g[1]);
    if (reached) *reached = d < kReachRadius;
    return -d;
}

double SynthEnv::optimal_return() const {
    // Reacher optimum depends on the start pose; only the pendulum has a closed form.
    return spec_.task_family == TaskFamily::kPendulumBalance ? spec_.episode_length : 0.0;
}

Frame SynthEnv::render(const EnvState& state) const {
    const auto pts = joint_positions(state);
    const double hue = spec_.domain_shift == DomainShift::kRecolor ? spec_.shift_params.hue_degrees : 0.0;
    const Rgb link_color = rotate_hue(kLinkColor, hue);
    const Rgb base_color = rotate_hue(kBaseColor, hue);
    const Rgb goal_color = rotate_hue(kGoalColor, hue);

    // bottom to top
    std::vector<Primitive> scene;
    if (spec_.task_family == TaskFamily::kPendulumBalance) {
        scene.push_back({Primitive::kRect, {0.0, 0.0}, {0.30, 0.10}, 0.0, base_color});
        for (std::size_t i = 0; i + 1 < pts.size(); ++i) {
            scene.push_back({Primitive::kCapsule, pts[i], pts[i + 1], 0.11, link_color});
        }
    } else {
        const auto& g = *state.goal;
        scene.push_back({Primitive::kDisc, {g[0], g[1]}, {0.0, 0.0}, 0.12, goal_color});
        scene.push_back({Primitive::kDisc, {0.0, 0.0}, {0.0, 0.0}, 0.12, base_color});
        for (std::size_t i = 0; i + 1 < pts.size(); ++i) {
            scene.push_back({Primitive::kCapsule, pts[i], pts[i + 1], 0.07, link_color});
        }
    }

    const double tilt = spec_.domain_shift == DomainShift::kCameraTilt
                            ? spec_.shift_params.tilt_degrees * kPi / 180.0
                            : 0.0;
    const double ct = std::cos(-tilt), st = std::sin(-tilt);

    const int size = spec_.image_size;
    Frame frame{size, size, std::vector<float>(static_cast<std::size_t>(size) * size * 3)};
    const double pixel = 2.0 * kViewHalfExtent / size;
    for (int row = 0; row < size; ++row) {
        for (int col = 0; col < size; ++col) {
            std::array<float, 3> acc{0.0f, 0.0f, 0.0f};
            for (int sy = 0; sy < kSubsamples; ++sy) {
                for (int sx = 0; sx < kSubsamples; ++sx) {
                    const double vx = -kViewHalfExtent + (col + (sx + 0.5) / kSubsamples) * pixel;
                    const double vy = kViewHalfExtent - (row + (sy + 0.5) / kSubsamples) * pixel;
                    // rotating the scene by +tilt == sampling at the point rotated by -tilt
                    const double x = tilt == 0.0 ? vx : ct * vx - st * vy;
                    const double y = tilt == 0.0 ? vy : st * vx + ct * vy;
                    Rgb c = kBackground;
                    for (auto it = scene.rbegin(); it != scene.rend(); ++it) {
                        if (it->contains(x, y)) {
                            c = it->color;
                            break;
                        }
                    }
                    for (int k = 0; k < 3; ++k) acc[k] += c[k];
                }
            }
            constexpr float inv = 1.0f / (kSubsamples * kSubsamples);
            for (int k = 0; k < 3; ++k) {
                frame.rgb[(static_cast<std::size_t>(row) * size + col) * 3 + k] =
                    std::clamp(acc[k] * inv, 0.0f, 1.0f);
            }
        }
    }
    return frame;
}

Observation SynthEnv::observe(const EnvState& state) const {
    Observation o = stack_frames(state.frames[0], state.frames[1], state.frames[2], state.frames[3]);
    o.step = state.step_index;
    return o;
}

std::pair<EnvState, Observation> SynthEnv::reset(std::uint64_t seed) const {
    Rng rng(reset_seed(seed));
    EnvState state;
    const int n = spec_.links();
    if (spec_.task_family == TaskFamily::kPendulumBalance) {
        std::uniform_real_distribution<double> angle(-0.2, 0.2);
        std::uniform_real_distribution<double> vel(-0.2, 0.2);
        state.physical_state.resize(2 * n);
        for (int i = 0; i < n; ++i) state.physical_state[i] = angle(rng);
        for (int i = 0; i < n; ++i) state.physical_state[n + i] = vel(rng);
    } else {
        std::uniform_real_distribution<double> angle(-kPi, kPi);
        state.physical_state.resize(n);
        for (auto& q : state.physical_state) q = wrap_angle(angle(rng));
        std::uniform_int_distribution<int> pick(0, 15);
        state.goal = reacher_goal_candidates()[pick(rng)];
    }
    const PackedFrame first = quantize(render(state));
    state.frames.assign(kStackFrames, first);
    Observation obs = observe(state);
    return {std::move(state), std::move(obs)};
}

StepResult SynthEnv::step(const EnvState& state, const std::vector<double>& action) const {
    const int n = spec_.links();
    require(static_cast<int>(action.size()) == spec_.action_dim(),
            "action dimension " + std::to_string(action.size()) + " != " +
                std::to_string(spec_.action_dim()));
    for (double a : action) {
        require(std::isfinite(a) && std::fabs(a) <= 1.0 + 1e-6, "action components must lie in [-1, 1]");
    }
    require(state.step_index < spec_.episode_length, "step called on a finished episode");

    StepResult out;
    out.state = state;
    auto& s = out.state.physical_state;
    if (spec_.task_family == TaskFamily::kPendulumBalance) {
        for (int i = 0; i < n; ++i) {
            double& phi = s[i];
            double& omega = s[n + i];
            // semi-implicit Euler; decoupled links
            omega += kDt * (kGravity / kPoleLength * std::sin(phi) - kDamping * omega + kTorqueGain * action[i]);
            omega = std::clamp(omega, -kPendulumMaxVelocity, kPendulumMaxVelocity);
            phi = wrap_angle(phi + kDt * omega);
        }
    } else {
        for (int i = 0; i < n; ++i) s[i] = wrap_angle(s[i] + kReacherStep * action[i]);
    }
    out.state.step_index = state.step_index + 1;
    out.state.frames.pop_front();
    out.state.frames.push_back(quantize(render(out.state)));
    out.true_reward = true_reward(out.state, &out.reached_goal);
    out.done = out.state.step_index == spec_.episode_length;
    out.observation = observe(out.state);
    return out;
}

std::vector<double> SynthEnv::scripted_expert(const EnvState& state) const {
    const int n = spec_.links();
    std::vector<double> u(n, 0.0);
    if (spec_.task_family == TaskFamily::kPendulumBalance) {
        constexpr double kp = 4.0, kd = 0.6;
        for (int i = 0; i < n; ++i) {
            u[i] = std::clamp(-kp * state.physical_state[i] - kd * state.physical_state[n + i], -1.0, 1.0);
        }
        return u;
    }
    // damped least-squares step of the planar chain toward the goal
    const auto pts = joint_positions(state);
    const auto& tip = pts.back();
    const double ex = (*state.goal)[0] - tip[0];
    const double ey = (*state.goal)[1] - tip[1];
    std::vector<std::array<double, 2>> jac(n);
    for (int j = 0; j < n; ++j) {
        jac[j] = {-(tip[1] - pts[j][1]), tip[0] - pts[j][0]};
    }
    double a = 0, b = 0, d = 0;
    for (const auto& c : jac) {
        a += c[0] * c[0];
        b += c[0] * c[1];
        d += c[1] * c[1];
    }
    constexpr double kLambda2 = 0.05 * 0.05;
    a += kLambda2;
    d += kLambda2;
    const double det = a * d - b * b;
    const double yx = (d * ex - b * ey) / det;
    const double yy = (-b * ex + a * ey) / det;
    double peak = 0.0;
    for (int j = 0; j < n; ++j) {
        u[j] = (jac[j][0] * yx + jac[j][1] * yy) / kReacherStep;
        peak = std::max(peak, std::fabs(u[j]));
    }
    if (peak > 1.0) {
        for (auto& v : u) v /= peak;
    }
    return u;
}

std::vector<float> SynthEnv::policy_state(const EnvState& state) const {
    const int n = spec_.links();
    std::vector<float> out;
    out.reserve(spec_.state_dim());
    for (int i = 0; i < n; ++i) {
        out.push_back(static_cast<float>(std::cos(state.physical_state[i])));
        out.push_back(static_cast<float>(std::sin(state.physical_state[i])));
        if (spec_.task_family == TaskFamily::kPendulumBalance) {
            out.push_back(static_cast<float>(state.physical_state[n + i] / kPendulumMaxVelocity));
        }
    }
    if (spec_.task_family == TaskFamily::kDotReacher) {
        out.push_back(static_cast<float>((*state.goal)[0]));
        out.push_back(static_cast<float>((*state.goal)[1]));
    }
    return out;
}

std::pair<EnvState, Observation> reset(const EnvSpec& spec, std::uint64_t seed) {
    return SynthEnv(spec).reset(seed);
}

StepResult step(const EnvSpec& spec, const EnvState& state, const std::vector<double>& action) {
    return SynthEnv(spec).step(state, action);
}

std::vector<double> scripted_expert(const EnvState& state, const EnvSpec& spec) {
    return SynthEnv(spec).scripted_expert(state);
}

Frame render(const EnvState& state, const EnvSpec& spec) { return SynthEnv(spec).render(state); }

}  // namespace d3il
