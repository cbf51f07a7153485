#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "shiftlab/controller.hpp"
#include "shiftlab/encoder.hpp"
#include "shiftlab/indexer.hpp"

namespace shiftlab {

// One mined training tuple. The context is the embedding concatenated with
// the base action (the base action is the trailing component).
struct PreferencePair {
    Vec context;
    double a_plus = 0.0;
    double a_minus = 0.0;
    double contrast = 0.0;

    double base_action() const { return context.back(); }
};

// Residual expert: 2-layer perceptron (tanh hidden, linear output) whose
// output is squashed into [-delta_max, delta_max].
struct ExpertParams {
    Matrix w1;  // hidden x input
    Vec b1;
    Vec w2;  // hidden
    double b2 = 0.0;
    double delta_max = 0.5;
    std::string cluster_id;

    int input_dim() const { return static_cast<int>(w1.cols); }
    int hidden_dim() const { return static_cast<int>(w1.rows); }

    double raw_output(const Vec& context) const {
        double z = b2;
        for (std::size_t i = 0; i < w1.rows; ++i) {
            double s = b1[i];
            const double* row = &w1.data[i * w1.cols];
            for (std::size_t j = 0; j < w1.cols; ++j) s += row[j] * context[j];
            z += w2[i] * std::tanh(s);
        }
        return z;
    }

    double delta(const Vec& context) const { return delta_max * std::tanh(raw_output(context)); }

    static ExpertParams init(int input_dim, int hidden, double delta_max, const std::string& cluster_id,
                             RngStream& rng) {
        ExpertParams e;
        e.delta_max = delta_max;
        e.cluster_id = cluster_id;
        e.w1 = Matrix(static_cast<std::size_t>(hidden), static_cast<std::size_t>(input_dim));
        e.b1.assign(static_cast<std::size_t>(hidden), 0.0);
        e.w2.assign(static_cast<std::size_t>(hidden), 0.0);
        double s1 = 1.0 / std::sqrt(static_cast<double>(input_dim));
        double s2 = 1.0 / std::sqrt(static_cast<double>(hidden));
        for (double& w : e.w1.data) w = rng.uniform(-s1, s1);
        for (double& w : e.w2) w = rng.uniform(-s2, s2);
        return e;
    }
};

struct TrainConfig {
    double margin = 0.2;
    double lr = 1e-2;
    double momentum = 0.9;
    int epochs = 200;
    int batch = 64;
    int hidden = 32;
    double delta_max = 0.5;
    std::uint64_t seed = 0;

    void validate() const {
        if (margin <= 0) throw ConfigError("TrainConfig: margin must be > 0");
        if (lr <= 0) throw ConfigError("TrainConfig: lr must be > 0");
        if (momentum < 0 || momentum >= 1) throw ConfigError("TrainConfig: momentum must lie in [0, 1)");
        if (epochs < 0 || batch < 1 || hidden < 1) throw ConfigError("TrainConfig: bad epochs/batch/hidden");
        if (delta_max <= 0) throw ConfigError("TrainConfig: delta_max must be > 0");
    }
};

// Hinge preference loss: max(0, m + d(a~, a+) - d(a~, a-)) with the
// corrected action a~ = a_base + delta(context) and Euclidean d.
inline double pref_loss(const ExpertParams& expert, const PreferencePair& pair, double margin) {
    double corrected = pair.base_action() + expert.delta(pair.context);
    double d_plus = std::fabs(corrected - pair.a_plus);
    double d_minus = std::fabs(corrected - pair.a_minus);
    return std::max(0.0, margin + d_plus - d_minus);
}

struct ExpertGradient {
    Matrix w1;
    Vec b1;
    Vec w2;
    double b2 = 0.0;

    static ExpertGradient zeros_like(const ExpertParams& e) {
        ExpertGradient g;
        g.w1 = Matrix(e.w1.rows, e.w1.cols);
        g.b1.assign(e.b1.size(), 0.0);
        g.w2.assign(e.w2.size(), 0.0);
        return g;
    }

    void scale(double f) {
        for (double& v : w1.data) v *= f;
        for (double& v : b1) v *= f;
        for (double& v : w2) v *= f;
        b2 *= f;
    }
};

// Analytic gradient of pref_loss. Subgradient 0 at the hinge kink and at
// the absolute-value kinks (sign(0) = 0).
inline ExpertGradient pref_loss_grad(const ExpertParams& expert, const PreferencePair& pair, double margin,
                                     double* loss_out = nullptr) {
    ExpertGradient g = ExpertGradient::zeros_like(expert);

    // Forward pass, keeping the hidden activations.
    std::size_t hidden = expert.w1.rows;
    Vec h(hidden);
    double z = expert.b2;
    for (std::size_t i = 0; i < hidden; ++i) {
        double s = expert.b1[i];
        const double* row = &expert.w1.data[i * expert.w1.cols];
        for (std::size_t j = 0; j < expert.w1.cols; ++j) s += row[j] * pair.context[j];
        h[i] = std::tanh(s);
        z += expert.w2[i] * h[i];
    }
    double tz = std::tanh(z);
    double corrected = pair.base_action() + expert.delta_max * tz;
    double d_plus = std::fabs(corrected - pair.a_plus);
    double d_minus = std::fabs(corrected - pair.a_minus);
    double loss = std::max(0.0, margin + d_plus - d_minus);
    if (loss_out) *loss_out = loss;
    if (loss <= 0.0) return g;

    auto sgn = [](double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); };
    double dl_da = sgn(corrected - pair.a_plus) - sgn(corrected - pair.a_minus);
    double dl_dz = dl_da * expert.delta_max * (1.0 - tz * tz);

    g.b2 = dl_dz;
    for (std::size_t i = 0; i < hidden; ++i) {
        g.w2[i] = dl_dz * h[i];
        double dl_ds = dl_dz * expert.w2[i] * (1.0 - h[i] * h[i]);
        g.b1[i] = dl_ds;
        for (std::size_t j = 0; j < expert.w1.cols; ++j) g.w1(i, j) = dl_ds * pair.context[j];
    }
    return g;
}

struct TrainResult {
    ExpertParams expert;
    Vec loss_curve;  // mean pair loss per epoch, evaluated as batches stream
};

// Minibatch gradient descent with momentum; fully deterministic given the
// config seed (init stream and shuffle stream are both derived from it).
inline TrainResult train_expert(std::span<const PreferencePair> pairs, const TrainConfig& cfg,
                                const std::string& cluster_id) {
    cfg.validate();
    if (pairs.empty()) throw std::invalid_argument("train_expert: no preference pairs");
    int input_dim = static_cast<int>(pairs.front().context.size());
    RngStream init_rng = RngStream::derive(cfg.seed, "expert_init");
    RngStream shuffle_rng = RngStream::derive(cfg.seed, "expert_shuffle");

    TrainResult out;
    out.expert = ExpertParams::init(input_dim, cfg.hidden, cfg.delta_max, cluster_id, init_rng);
    ExpertGradient velocity = ExpertGradient::zeros_like(out.expert);

    std::vector<std::size_t> order(pairs.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[shuffle_rng.uniform_int(i)]);

        double epoch_loss = 0.0;
        std::size_t done = 0;
        while (done < order.size()) {
            std::size_t take = std::min<std::size_t>(static_cast<std::size_t>(cfg.batch), order.size() - done);
            ExpertGradient batch_grad = ExpertGradient::zeros_like(out.expert);
            for (std::size_t k = 0; k < take; ++k) {
                double loss = 0.0;
                ExpertGradient g = pref_loss_grad(out.expert, pairs[order[done + k]], cfg.margin, &loss);
                epoch_loss += loss;
                for (std::size_t idx = 0; idx < g.w1.data.size(); ++idx) batch_grad.w1.data[idx] += g.w1.data[idx];
                for (std::size_t idx = 0; idx < g.b1.size(); ++idx) batch_grad.b1[idx] += g.b1[idx];
                for (std::size_t idx = 0; idx < g.w2.size(); ++idx) batch_grad.w2[idx] += g.w2[idx];
                batch_grad.b2 += g.b2;
            }
            batch_grad.scale(1.0 / static_cast<double>(take));

            auto update = [&](double& w, double& vel, double grad) {
                vel = cfg.momentum * vel - cfg.lr * grad;
                w += vel;
            };
            for (std::size_t idx = 0; idx < out.expert.w1.data.size(); ++idx)
                update(out.expert.w1.data[idx], velocity.w1.data[idx], batch_grad.w1.data[idx]);
            for (std::size_t idx = 0; idx < out.expert.b1.size(); ++idx)
                update(out.expert.b1[idx], velocity.b1[idx], batch_grad.b1[idx]);
            for (std::size_t idx = 0; idx < out.expert.w2.size(); ++idx)
                update(out.expert.w2[idx], velocity.w2[idx], batch_grad.w2[idx]);
            update(out.expert.b2, velocity.b2, batch_grad.b2);
            done += take;
        }
        epoch_loss /= static_cast<double>(pairs.size());
        if (!std::isfinite(epoch_loss))
            throw std::runtime_error("train_expert: non-finite loss at epoch " + std::to_string(epoch));
        out.loss_curve.push_back(epoch_loss);
    }
    return out;
}

// Fraction of pairs where the corrected action lands strictly closer to
// a+ than to a-; ties count as 0.
inline double preference_accuracy(const ExpertParams& expert, std::span<const PreferencePair> pairs) {
    if (pairs.empty()) throw std::invalid_argument("preference_accuracy: empty set");
    double hits = 0.0;
    for (const PreferencePair& p : pairs) {
        double corrected = p.base_action() + expert.delta(p.context);
        if (std::fabs(corrected - p.a_plus) < std::fabs(corrected - p.a_minus)) hits += 1.0;
    }
    return hits / static_cast<double>(pairs.size());
}

// ---------------------------------------------------------------------------
// Pair mining

// Trajectory plus its per-step embeddings (computed with the frozen encoder).
struct EmbeddedEpisode {
    const Trajectory* traj = nullptr;
    std::vector<Embedding> h;
};

namespace detail {

struct MiningState {
    std::size_t episode;
    std::size_t step;
    double score;  // episode or segment return
};

inline Vec make_context(const Embedding& h, double a_base) {
    Vec ctx = h.values;
    ctx.push_back(a_base);
    return ctx;
}

}  // namespace detail

// Naive mining: split episodes at the median return; every state of a
// below-median episode is matched to its nearest-embedding state across all
// above-median episodes. Contrast is the episode-return gap. Pairs with
// identical actions are dropped (a+ must differ from a-).
inline std::vector<PreferencePair> mine_pairs_naive(std::span<const EmbeddedEpisode> episodes) {
    if (episodes.size() < 2) throw std::invalid_argument("mine_pairs_naive: need at least 2 trajectories");
    Vec returns;
    for (const EmbeddedEpisode& e : episodes) returns.push_back(e.traj->episode_return);
    Vec sorted = returns;
    std::sort(sorted.begin(), sorted.end());
    double median = quantile_sorted(sorted, 0.5);

    std::vector<PreferencePair> pairs;
    for (std::size_t lo = 0; lo < episodes.size(); ++lo) {
        if (!(returns[lo] < median)) continue;
        for (std::size_t t = 0; t < episodes[lo].h.size(); ++t) {
            const Embedding& h = episodes[lo].h[t];
            double best_dist = 0.0;
            std::size_t best_ep = 0, best_t = 0;
            bool found = false;
            for (std::size_t hi = 0; hi < episodes.size(); ++hi) {
                if (!(returns[hi] > median)) continue;
                for (std::size_t u = 0; u < episodes[hi].h.size(); ++u) {
                    double d = distance(h.values, episodes[hi].h[u].values);
                    if (!found || d < best_dist) {
                        found = true;
                        best_dist = d;
                        best_ep = hi;
                        best_t = u;
                    }
                }
            }
            if (!found) continue;
            double a_minus = episodes[lo].traj->actions[t];
            double a_plus = episodes[best_ep].traj->actions[best_t];
            if (a_plus == a_minus) continue;
            PreferencePair p;
            p.context = detail::make_context(h, a_minus);
            p.a_plus = a_plus;
            p.a_minus = a_minus;
            p.contrast = returns[best_ep] - returns[lo];
            pairs.push_back(std::move(p));
        }
    }
    return pairs;
}

// Harder mining: the same matching, but at segment granularity. Episodes are
// cut into aligned H-step segments; each aligned group (same step range
// across episodes) is median-split on segment return, so the contrast always
// compares the same phase of the task. Only pairs whose segment-return gap
// reaches the q-th quantile of all candidate gaps are kept.
inline std::vector<PreferencePair> mine_pairs_harder(std::span<const EmbeddedEpisode> episodes,
                                                     double contrast_quantile, int segment_len) {
    if (episodes.size() < 2) throw std::invalid_argument("mine_pairs_harder: need at least 2 trajectories");
    if (!(contrast_quantile >= 0.0 && contrast_quantile < 1.0))
        throw std::invalid_argument("mine_pairs_harder: quantile must lie in [0, 1)");
    if (segment_len < 1) throw std::invalid_argument("mine_pairs_harder: segment_len must be >= 1");

    std::size_t max_len = 0;
    for (const EmbeddedEpisode& e : episodes) max_len = std::max(max_len, e.traj->rewards.size());

    std::vector<PreferencePair> candidates;
    for (std::size_t block = 0; block * static_cast<std::size_t>(segment_len) < max_len; ++block) {
        std::size_t begin = block * static_cast<std::size_t>(segment_len);
        struct Segment {
            std::size_t episode;
            std::size_t begin, end;  // [begin, end)
            double ret;
        };
        std::vector<Segment> group;
        for (std::size_t e = 0; e < episodes.size(); ++e) {
            const Trajectory& traj = *episodes[e].traj;
            if (begin >= traj.rewards.size()) continue;
            std::size_t end = std::min(traj.rewards.size(), begin + static_cast<std::size_t>(segment_len));
            double r = 0.0;
            for (std::size_t t = begin; t < end; ++t) r += traj.rewards[t];
            group.push_back(Segment{e, begin, end, r});
        }
        if (group.size() < 2) continue;
        Vec sorted;
        for (const Segment& s : group) sorted.push_back(s.ret);
        std::sort(sorted.begin(), sorted.end());
        double median = quantile_sorted(sorted, 0.5);

        for (const Segment& lo : group) {
            if (!(lo.ret < median)) continue;
            for (std::size_t t = lo.begin; t < lo.end; ++t) {
                const Embedding& h = episodes[lo.episode].h[t];
                double best_dist = 0.0;
                const Segment* best_seg = nullptr;
                std::size_t best_t = 0;
                for (const Segment& hi : group) {
                    if (!(hi.ret > median)) continue;
                    for (std::size_t u = hi.begin; u < hi.end; ++u) {
                        double d = distance(h.values, episodes[hi.episode].h[u].values);
                        if (!best_seg || d < best_dist) {
                            best_seg = &hi;
                            best_dist = d;
                            best_t = u;
                        }
                    }
                }
                if (!best_seg) continue;
                double a_minus = episodes[lo.episode].traj->actions[t];
                double a_plus = episodes[best_seg->episode].traj->actions[best_t];
                if (a_plus == a_minus) continue;
                PreferencePair p;
                p.context = detail::make_context(h, a_minus);
                p.a_plus = a_plus;
                p.a_minus = a_minus;
                p.contrast = best_seg->ret - lo.ret;
                candidates.push_back(std::move(p));
            }
        }
    }
    if (candidates.empty()) return {};

    Vec gaps;
    for (const PreferencePair& p : candidates) gaps.push_back(p.contrast);
    std::sort(gaps.begin(), gaps.end());
    double threshold = quantile_sorted(gaps, contrast_quantile);

    std::vector<PreferencePair> kept;
    for (PreferencePair& p : candidates)
        if (p.contrast >= threshold) kept.push_back(std::move(p));
    return kept;
}

// ---------------------------------------------------------------------------
// Gating and action composition

enum class GateMode { centroid, none, global, coarse, random };

inline const char* to_string(GateMode m) {
    switch (m) {
        case GateMode::centroid: return "centroid";
        case GateMode::none: return "none";
        case GateMode::global: return "global";
        case GateMode::coarse: return "coarse";
        case GateMode::random: return "random";
    }
    throw ConfigError("unknown gate mode value");
}

inline GateMode gate_mode_from_string(std::string_view s) {
    if (s == "centroid") return GateMode::centroid;
    if (s == "none") return GateMode::none;
    if (s == "global") return GateMode::global;
    if (s == "coarse") return GateMode::coarse;
    if (s == "random") return GateMode::random;
    throw ConfigError("unknown gate mode: " + std::string(s));
}

// Routing policy selector for the ablations. `designated` names the single
// expert used by global/coarse; random picks uniformly among the non-id
// cluster entries each call.
inline RoutingDecision gate(GateMode mode, const Embedding& h, const ClusterSet& clusters,
                            const std::string& designated, RngStream& rng) {
    switch (mode) {
        case GateMode::centroid:
            return route(h, clusters);
        case GateMode::none:
            return RoutingDecision{kIdLabel, {}};
        case GateMode::global:
            if (designated.empty() || !clusters.find(designated))
                throw ConfigError("gate: global mode needs a designated expert present in the cluster set");
            return RoutingDecision{designated, {}};
        case GateMode::coarse: {
            if (designated.empty() || !clusters.find(designated))
                throw ConfigError("gate: coarse mode needs a designated expert present in the cluster set");
            RoutingDecision dec = route(h, clusters);
            if (dec.assigned != kIdLabel) dec.assigned = designated;
            return dec;
        }
        case GateMode::random: {
            std::vector<std::string> options;
            for (const ClusterSet::Entry& e : clusters.entries)
                if (e.label != kIdLabel) options.push_back(e.label);
            if (options.empty()) throw ConfigError("gate: random mode needs at least one non-id cluster");
            return RoutingDecision{options[rng.uniform_int(options.size())], {}};
        }
    }
    throw ConfigError("gate: unknown mode");
}

// id keeps the base action untouched (bit-for-bit); otherwise the expert's
// residual is added and the result clamped to the action bounds.
inline double compose_action(double a_base, const RoutingDecision& decision,
                             const std::map<std::string, ExpertParams>& experts, const Vec& context) {
    if (decision.assigned == kIdLabel) return a_base;
    auto it = experts.find(decision.assigned);
    if (it == experts.end())
        throw std::runtime_error("compose_action: routed to '" + decision.assigned + "' but no such expert exists");
    return std::clamp(a_base + it->second.delta(context), -1.0, 1.0);
}

// Full evaluation-time policy: baseline planner + frozen encoder + routing +
// residual experts. Keeps a per-episode route log for activation reports.
class RoutedController : public Controller {
public:
    RoutedController(PlannerController base, const Featurizer* featurizer, const PcaModel* pca,
                     ClusterSet clusters, std::map<std::string, ExpertParams> experts, GateMode mode,
                     std::string designated = "", bool latch = false)
        : base_(std::move(base)),
          featurizer_(featurizer),
          pca_(pca),
          clusters_(std::move(clusters)),
          experts_(std::move(experts)),
          mode_(mode),
          designated_(std::move(designated)),
          latch_(latch) {}

    void on_episode_start() override {
        base_.on_episode_start();
        route_log_.clear();
        latched_.reset();
    }

    double act(const EnvState& state, std::span<const Observation> history, RngStream& rng) override {
        double a_base = base_.act(state, history, rng);
        Embedding h = embed(*pca_, featurizer_->featurize(make_window(history, history.size() - 1,
                                                                      featurizer_->window)));
        RoutingDecision dec;
        if (latch_ && latched_) {
            dec.assigned = *latched_;
        } else {
            dec = gate(mode_, h, clusters_, designated_, rng);
            if (latch_ && dec.assigned != kIdLabel) latched_ = dec.assigned;
        }
        route_log_.push_back(dec.assigned);
        return compose_action(a_base, dec, experts_, detail::make_context(h, a_base));
    }

    const std::vector<std::string>& route_log() const { return route_log_; }

private:
    PlannerController base_;
    const Featurizer* featurizer_;
    const PcaModel* pca_;
    ClusterSet clusters_;
    std::map<std::string, ExpertParams> experts_;
    GateMode mode_;
    std::string designated_;
    bool latch_;
    std::vector<std::string> route_log_;
    std::optional<std::string> latched_;
};

}  // namespace shiftlab
