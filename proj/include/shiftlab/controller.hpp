#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "shiftlab/env.hpp"
#include "shiftlab/linalg.hpp"
#include "shiftlab/rng.hpp"

namespace shiftlab {

// Internal dynamics estimate used by the planner. Identified from data; the
// plant is observed only through (state, action, next state) triples.
struct NominalModel {
    double mass_hat = 1.0;
    double gravity_hat = 1.0;
    double gear_hat = 1.0;
    double friction_hat = 0.1;
    double damping_hat = 0.05;

    void validate() const {
        for (double v : {mass_hat, gravity_hat, gear_hat, friction_hat, damping_hat})
            if (!(v > 0.0) || !std::isfinite(v))
                throw std::runtime_error("NominalModel: parameters must be positive and finite");
    }

    EnvParams as_env_params(const EnvParams& base) const {
        EnvParams p = base;
        p.mass = mass_hat;
        p.gravity = gravity_hat;
        p.gear = gear_hat;
        p.friction = friction_hat;
        p.damping = damping_hat;
        return p;
    }
};

struct PlannerConfig {
    int n_candidates = 128;
    int plan_horizon = 12;
    double action_smoothing = 0.5;
    std::uint64_t seed_offset = 0;

    void validate() const {
        if (n_candidates < 1) throw ConfigError("PlannerConfig: n_candidates must be >= 1");
        if (plan_horizon < 1) throw ConfigError("PlannerConfig: plan_horizon must be >= 1");
        if (!(action_smoothing >= 0.0 && action_smoothing < 1.0))
            throw ConfigError("PlannerConfig: action_smoothing must lie in [0, 1)");
    }
};

namespace detail {

// Velocity dynamics are linear in three lumped coefficients:
//   dv/dt = (gear/m) a - ((friction+damping)/m) v - (gravity/m) sin(x).
// Rows of the regression are built from consecutive states.
struct VelocityRegression {
    Matrix xtx{3, 3};
    Vec xty = Vec(3, 0.0);
    std::size_t n = 0;

    void add(double v, double x, double a, double dv_dt) {
        const double reg[3] = {a, -v, -std::sin(x)};
        for (int i = 0; i < 3; ++i) {
            for (int j = 0; j < 3; ++j) xtx(i, j) += reg[i] * reg[j];
            xty[i] += reg[i] * dv_dt;
        }
        ++n;
    }
};

inline const char* kCoefficientNames[3] = {"gear/mass", "(friction+damping)/mass", "gravity/mass"};

}  // namespace detail

// Least-squares identification of the lumped coefficients, de-lumped with
// the actuator gain of `base` as the gauge (friction/damping split keeps the
// base ratio: the two terms multiply the same regressor and cannot be told
// apart from data).
inline NominalModel fit_nominal_model(const std::vector<Trajectory>& trajectories, const EnvParams& base) {
    detail::VelocityRegression reg;
    for (const Trajectory& traj : trajectories) {
        for (std::size_t t = 0; t + 1 < traj.states.size(); ++t) {
            const EnvState& s = traj.states[t];
            const EnvState& s_next = traj.states[t + 1];
            reg.add(s.v, s.x, traj.actions[t], (s_next.v - s.v) / base.dt);
        }
    }
    if (reg.n < 3) throw std::runtime_error("fit_nominal_model: need at least 3 transitions (>= 1 trajectory with >= 2 steps)");

    EigenDecomposition eig = jacobi_eigen_symmetric(reg.xtx);
    if (eig.values.front() <= 0.0 || eig.values.back() / eig.values.front() < 1e-10) {
        // Name the coefficient that the data cannot pin down: the dominant
        // component of the null-space eigenvector.
        const Vec& null_vec = eig.vectors.row(2);
        int worst = 0;
        for (int i = 1; i < 3; ++i)
            if (std::fabs(null_vec[i]) > std::fabs(null_vec[worst])) worst = i;
        throw std::runtime_error(std::string("fit_nominal_model: rank-deficient regression, coefficient '") +
                                 detail::kCoefficientNames[worst] + "' is unidentifiable from this data");
    }

    Vec c = solve_linear(reg.xtx, reg.xty);  // {gear/m, (friction+damping)/m, gravity/m}
    if (c[0] <= 0.0) throw std::runtime_error("fit_nominal_model: non-positive actuator coefficient");

    NominalModel m;
    m.gear_hat = base.gear;
    m.mass_hat = base.gear / c[0];
    m.gravity_hat = c[2] * m.mass_hat;
    double vel_sum = c[1] * m.mass_hat;
    double ratio = base.friction / (base.friction + base.damping);
    m.friction_hat = vel_sum * ratio;
    m.damping_hat = vel_sum * (1.0 - ratio);
    m.validate();
    return m;
}

// Deterministic rollout of an action sequence under the model; returns the
// predicted cumulative reward starting at `state`.
inline double predict_return(const NominalModel& model, const EnvParams& base, EnvState state,
                             std::span<const double> actions, const TargetProfile& profile) {
    EnvParams p = model.as_env_params(base);
    double total = 0.0;
    for (double a : actions) {
        double force = p.gear * a - p.friction * state.v - p.gravity * std::sin(state.x) - p.damping * state.v;
        double v_next = state.v + p.dt * force / p.mass;
        double x_next = state.x + p.dt * v_next;
        total += std::clamp(1.0 - std::fabs(v_next - profile.value(state.t)), 0.0, 1.0);
        state = EnvState{x_next, v_next, state.t + 1};
    }
    return total;
}

// Random-shooting MPC: i.i.d. uniform action sequences passed through an
// exponential smoothing filter, scored by predicted return under the model;
// the first action of the argmax sequence is returned. Ties keep the earliest
// candidate.
inline double plan_action(const NominalModel& model, const EnvParams& base, const EnvState& state,
                          const PlannerConfig& cfg, const TargetProfile& profile, RngStream& rng) {
    cfg.validate();
    model.validate();
    double best_score = -1.0;
    double best_action = 0.0;
    Vec seq(static_cast<std::size_t>(cfg.plan_horizon));
    for (int c = 0; c < cfg.n_candidates; ++c) {
        double prev = 0.0;
        for (int j = 0; j < cfg.plan_horizon; ++j) {
            double u = rng.uniform(-1.0, 1.0);
            prev = (j == 0) ? u : cfg.action_smoothing * prev + (1.0 - cfg.action_smoothing) * u;
            seq[static_cast<std::size_t>(j)] = prev;
        }
        double score = predict_return(model, base, state, seq, profile);
        if (score > best_score) {
            best_score = score;
            best_action = seq[0];
        }
    }
    return std::clamp(best_action, -1.0, 1.0);
}

// Plain gradient descent on the mean squared one-step velocity prediction
// error, with respect to all five raw parameters. Used by the forgetting
// ablation; lr = 0 or steps = 0 leaves the model untouched.
inline NominalModel finetune_nominal_model(NominalModel model, const std::vector<Trajectory>& trajectories,
                                           int steps, double lr, const EnvParams& base) {
    if (steps < 0) throw std::invalid_argument("finetune_nominal_model: steps must be >= 0");
    std::size_t n = 0;
    for (const Trajectory& t : trajectories) n += t.states.size() > 0 ? t.states.size() - 1 : 0;
    if (n == 0) throw std::runtime_error("finetune_nominal_model: no transitions in data");

    for (int it = 0; it < steps; ++it) {
        double g_mass = 0, g_gravity = 0, g_gear = 0, g_friction = 0, g_damping = 0;
        double loss = 0.0;
        for (const Trajectory& traj : trajectories) {
            for (std::size_t t = 0; t + 1 < traj.states.size(); ++t) {
                const EnvState& s = traj.states[t];
                double a = traj.actions[t];
                double force = model.gear_hat * a - model.friction_hat * s.v -
                               model.gravity_hat * std::sin(s.x) - model.damping_hat * s.v;
                double pred = s.v + base.dt * force / model.mass_hat;
                double err = pred - traj.states[t + 1].v;
                loss += err * err;
                double common = 2.0 * err * base.dt / model.mass_hat;
                g_gear += common * a;
                g_friction += common * -s.v;
                g_damping += common * -s.v;
                g_gravity += common * -std::sin(s.x);
                g_mass += 2.0 * err * -base.dt * force / (model.mass_hat * model.mass_hat);
            }
        }
        double inv_n = 1.0 / static_cast<double>(n);
        loss *= inv_n;
        if (!std::isfinite(loss))
            throw std::runtime_error("finetune_nominal_model: loss diverged at step " + std::to_string(it));
        model.mass_hat -= lr * g_mass * inv_n;
        model.gravity_hat -= lr * g_gravity * inv_n;
        model.gear_hat -= lr * g_gear * inv_n;
        model.friction_hat -= lr * g_friction * inv_n;
        model.damping_hat -= lr * g_damping * inv_n;
    }
    return model;
}

// Mean squared one-step velocity prediction error of a model on data.
inline double one_step_error(const NominalModel& model, const std::vector<Trajectory>& trajectories,
                             const EnvParams& base) {
    double loss = 0.0;
    std::size_t n = 0;
    for (const Trajectory& traj : trajectories) {
        for (std::size_t t = 0; t + 1 < traj.states.size(); ++t) {
            const EnvState& s = traj.states[t];
            double force = model.gear_hat * traj.actions[t] - model.friction_hat * s.v -
                           model.gravity_hat * std::sin(s.x) - model.damping_hat * s.v;
            double pred = s.v + base.dt * force / model.mass_hat;
            double err = pred - traj.states[t + 1].v;
            loss += err * err;
            ++n;
        }
    }
    return n > 0 ? loss / static_cast<double>(n) : 0.0;
}

// Baseline policy: random-shooting MPC around the identified model.
class PlannerController : public Controller {
public:
    PlannerController(NominalModel model, EnvParams base, PlannerConfig cfg, TargetProfile profile)
        : model_(model), base_(base), cfg_(cfg), profile_(std::move(profile)) {}

    double act(const EnvState& state, std::span<const Observation>, RngStream& rng) override {
        return plan_action(model_, base_, state, cfg_, profile_, rng);
    }

    const NominalModel& model() const { return model_; }

private:
    NominalModel model_;
    EnvParams base_;
    PlannerConfig cfg_;
    TargetProfile profile_;
};

// Smoothed uniform excitation; used to generate identification data.
class ExcitationController : public Controller {
public:
    explicit ExcitationController(double smoothing = 0.8) : smoothing_(smoothing) {}

    void on_episode_start() override { prev_ = 0.0; first_ = true; }

    double act(const EnvState&, std::span<const Observation>, RngStream& rng) override {
        double u = rng.uniform(-1.0, 1.0);
        prev_ = first_ ? u : smoothing_ * prev_ + (1.0 - smoothing_) * u;
        first_ = false;
        return prev_;
    }

private:
    double smoothing_;
    double prev_ = 0.0;
    bool first_ = true;
};

// Holds the commanded action at zero; handy as a reference point.
class ZeroController : public Controller {
public:
    double act(const EnvState&, std::span<const Observation>, RngStream&) override { return 0.0; }
};

}  // namespace shiftlab
