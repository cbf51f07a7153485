#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "shiftlab/common.hpp"
#include "shiftlab/linalg.hpp"
#include "shiftlab/rng.hpp"

namespace shiftlab {

// Physical parameters of the simulated plant. Defaults are the nominal
// values; the shipped config overrides the tuned constants.
struct EnvParams {
    double mass = 1.0;
    double gravity = 1.0;
    double gear = 1.0;
    double friction = 0.1;
    double damping = 0.05;
    double dt = 0.05;
    int horizon = 200;
    int obs_dim = 32;
    double obs_noise_std = 0.01;

    void validate() const {
        if (mass <= 0 || gravity <= 0 || gear <= 0 || friction <= 0 || damping <= 0)
            throw ConfigError("EnvParams: dynamics scalars must be strictly positive");
        if (horizon < 1) throw ConfigError("EnvParams: horizon must be >= 1");
        if (!(dt > 0.0 && dt < 1.0)) throw ConfigError("EnvParams: dt must lie in (0, 1)");
        if (obs_dim < 1) throw ConfigError("EnvParams: obs_dim must be >= 1");
        if (obs_noise_std < 0) throw ConfigError("EnvParams: obs_noise_std must be >= 0");
    }
};

enum class ShiftFamily { id, torso_mass, gravity, gear, friction, damping };

inline const char* to_string(ShiftFamily f) {
    switch (f) {
        case ShiftFamily::id: return "id";
        case ShiftFamily::torso_mass: return "torso_mass";
        case ShiftFamily::gravity: return "gravity";
        case ShiftFamily::gear: return "gear";
        case ShiftFamily::friction: return "friction";
        case ShiftFamily::damping: return "damping";
    }
    throw ConfigError("unknown shift family value");
}

inline ShiftFamily shift_family_from_string(std::string_view s) {
    if (s == "id") return ShiftFamily::id;
    if (s == "torso_mass") return ShiftFamily::torso_mass;
    if (s == "gravity") return ShiftFamily::gravity;
    if (s == "gear") return ShiftFamily::gear;
    if (s == "friction") return ShiftFamily::friction;
    if (s == "damping") return ShiftFamily::damping;
    throw ConfigError("unknown shift family: " + std::string(s));
}

// One multiplicative perturbation of a single plant parameter.
struct ShiftSpec {
    ShiftFamily family = ShiftFamily::id;
    double factor = 1.0;

    void validate() const {
        if (factor <= 0) throw ConfigError("ShiftSpec: factor must be > 0");
        if (family == ShiftFamily::id && factor != 1.0)
            throw ConfigError("ShiftSpec: the id shift must have factor 1");
    }

    std::string label() const {
        if (family == ShiftFamily::id) return "id";
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%g", factor);
        return std::string(to_string(family)) + "_" + buf + "x";
    }

    bool operator==(const ShiftSpec& other) const = default;
};

// Scales exactly the named parameter; everything else is copied bitwise.
inline EnvParams apply_shift(const EnvParams& base, const ShiftSpec& spec) {
    base.validate();
    spec.validate();
    EnvParams out = base;
    switch (spec.family) {
        case ShiftFamily::id: break;
        case ShiftFamily::torso_mass: out.mass *= spec.factor; break;
        case ShiftFamily::gravity: out.gravity *= spec.factor; break;
        case ShiftFamily::gear: out.gear *= spec.factor; break;
        case ShiftFamily::friction: out.friction *= spec.factor; break;
        case ShiftFamily::damping: out.damping *= spec.factor; break;
        default: throw ConfigError("apply_shift: unknown shift family");
    }
    return out;
}

struct EnvState {
    double x = 0.0;
    double v = 0.0;
    int t = 0;
};

// Episodes start at rest at the origin.
inline EnvState initial_state(const struct TargetProfile& profile);

// Piecewise-constant velocity reference; t past the end holds the last value.
struct TargetProfile {
    int segment_len = 50;
    Vec targets = {0.3, 0.6, 0.3, 0.5};

    double value(int t) const {
        if (t < 0) t = 0;
        std::size_t i = static_cast<std::size_t>(t / segment_len);
        if (i >= targets.size()) i = targets.size() - 1;
        return targets[i];
    }

    void validate() const {
        if (segment_len < 1) throw ConfigError("TargetProfile: segment_len must be >= 1");
        if (targets.empty()) throw ConfigError("TargetProfile: needs at least one segment");
    }
};

inline EnvState initial_state(const TargetProfile& profile) {
    profile.validate();
    return EnvState{0.0, 0.0, 0};
}

struct Observation {
    Vec values;
};

struct StepResult {
    EnvState state;
    double reward = 0.0;
    bool action_clipped = false;
};

// One Euler step of the plant. The action is clamped into [-1, 1]; out of
// bounds input sets the flag instead of raising.
inline StepResult step(const EnvState& s, double action, const EnvParams& p, const TargetProfile& profile) {
    if (s.t >= p.horizon) throw std::invalid_argument("step: episode already at horizon");
    StepResult out;
    out.action_clipped = !(action >= -1.0 && action <= 1.0);
    double a = std::isnan(action) ? 0.0 : std::clamp(action, -1.0, 1.0);
    double force = p.gear * a - p.friction * s.v - p.gravity * std::sin(s.x) - p.damping * s.v;
    double v_next = s.v + p.dt * force / p.mass;
    double x_next = s.x + p.dt * v_next;
    out.state = EnvState{x_next, v_next, s.t + 1};
    out.reward = std::clamp(1.0 - std::fabs(v_next - profile.value(s.t)), 0.0, 1.0);
    return out;
}

// Random-Fourier observation head: values = sin(W [x v 1]^T + b) + noise.
// W and b are frozen constants shipped as a versioned asset.
struct ObservationModel {
    Matrix w;  // obs_dim x 3
    Vec b;

    static ObservationModel generate(int obs_dim, std::uint64_t seed) {
        ObservationModel m;
        m.w = Matrix(static_cast<std::size_t>(obs_dim), 3);
        m.b.resize(static_cast<std::size_t>(obs_dim));
        RngStream rng = RngStream::derive(seed, "obs_head");
        // Column scales: position, velocity, constant offset.
        const double scales[3] = {1.0, 2.0, 0.5};
        for (std::size_t i = 0; i < m.w.rows; ++i)
            for (std::size_t j = 0; j < 3; ++j) m.w(i, j) = rng.normal(0.0, scales[j]);
        for (double& bi : m.b) bi = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
        return m;
    }

    Observation observe(const EnvState& s, double noise_std, RngStream& rng) const {
        Observation obs;
        obs.values.resize(w.rows);
        for (std::size_t i = 0; i < w.rows; ++i) {
            double z = w(i, 0) * s.x + w(i, 1) * s.v + w(i, 2) + b[i];
            obs.values[i] = std::sin(z);
        }
        if (noise_std > 0.0)
            for (double& v : obs.values) v += rng.normal(0.0, noise_std);
        return obs;
    }
};

struct Trajectory {
    std::vector<Observation> observations;  // one per step, recorded before the action
    std::vector<EnvState> states;           // pre-action state per step (for model fitting)
    Vec actions;
    Vec rewards;
    double episode_return = 0.0;
    std::uint64_t seed = 0;
    ShiftSpec shift;
    int clipped_steps = 0;

    void validate() const {
        if (observations.size() != actions.size() || states.size() != actions.size() ||
            rewards.size() != actions.size())
            throw std::runtime_error("Trajectory: per-step records have mismatched lengths");
        double sum = 0.0;
        for (double r : rewards) {
            if (!(r >= 0.0 && r <= 1.0)) throw std::runtime_error("Trajectory: reward out of [0,1]");
            sum += r;
        }
        if (std::fabs(sum - episode_return) > 1e-9)
            throw std::runtime_error("Trajectory: episode_return does not match reward sum");
    }
};

// Policy interface used by run_episode. `history` is a view of the
// observations recorded so far, including the current step's.
class Controller {
public:
    virtual ~Controller() = default;
    virtual void on_episode_start() {}
    virtual double act(const EnvState& state, std::span<const Observation> history, RngStream& rng) = 0;
};

// Runs one full episode. All randomness comes from streams derived from
// (seed, tag), so the result is a pure function of (controller, params,
// seed) regardless of scheduling.
inline Trajectory run_episode(Controller& controller, const EnvParams& params, const TargetProfile& profile,
                              const ObservationModel& obs_model, std::uint64_t seed,
                              const ShiftSpec& shift = {}) {
    params.validate();
    profile.validate();
    RngStream obs_rng = RngStream::derive(seed, "episode_obs");
    RngStream plan_rng = RngStream::derive(seed, "episode_plan");

    Trajectory traj;
    traj.seed = seed;
    traj.shift = shift;
    traj.observations.reserve(params.horizon);
    traj.states.reserve(params.horizon);
    traj.actions.reserve(params.horizon);
    traj.rewards.reserve(params.horizon);

    controller.on_episode_start();
    EnvState state = initial_state(profile);
    for (int t = 0; t < params.horizon; ++t) {
        traj.observations.push_back(obs_model.observe(state, params.obs_noise_std, obs_rng));
        traj.states.push_back(state);
        double action = controller.act(state, std::span<const Observation>(traj.observations), plan_rng);
        if (!std::isfinite(action))
            throw StageError("episode", "controller returned a non-finite action at step " + std::to_string(t) +
                                            " (seed " + std::to_string(seed) + ")");
        StepResult r = step(state, action, params, profile);
        if (r.action_clipped) ++traj.clipped_steps;
        traj.actions.push_back(std::clamp(action, -1.0, 1.0));
        traj.rewards.push_back(r.reward);
        traj.episode_return += r.reward;
        state = r.state;
    }
    return traj;
}

}  // namespace shiftlab
