#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "core.hpp"
#include "erm.hpp"
#include "json_io.hpp"
#include "planner.hpp"

namespace cmdp {

/// Per (h,s,a) hypothesis class for the reward, taking the context vector.
using RewardClassFn = std::function<FunctionClass(std::size_t h, std::size_t s, std::size_t a)>;

struct CfConfig {
    double eps = 0.25;
    double delta = 0.1;
    Loss loss = Loss::L2;
    /// Accuracy-schedule constant; 6 for KCFD and 24 for UCFD when unset.
    std::optional<double> B;
    /// Reachability threshold; eps/(6|S|) for KCFD, eps/(24|S|H) for UCFD when unset.
    std::optional<double> beta;
    /// UCFD dynamics accuracy; eps/(48|S|H^2) when unset.
    std::optional<double> gamma;
    double constant_scale = 1.0;
    RewardClassFn reward_class;
    /// Keep the collected datasets (and context ids) in the learned model.
    bool keep_samples = false;
    /// UCFD: also count transitions of pairs other than the one being
    /// sampled. They are stored separately and never used for P-hat.
    bool record_off_target = false;

    nlohmann::json to_json() const {
        nlohmann::json j{{"eps", eps}, {"delta", delta}, {"loss", loss_name(loss)}, {"constant_scale", constant_scale}};
        if (B) j["B"] = *B;
        if (beta) j["beta"] = *beta;
        if (gamma) j["gamma"] = *gamma;
        return j;
    }
};

/**
Accuracy demanded of the reward estimate at a state visited with
probability p:
  1                       if p < eps/(B|S|)
  eps/(B H |S| |A|)       if p > 1/|S|
  eps/(B p |S| |A|)       otherwise
squared under L2.
*/
inline double accuracy_per_state(double p, double eps, double B, std::size_t S, std::size_t A, std::size_t H,
                                 Loss loss) {
    if (!(p >= 0.0 && p <= 1.0 + kProbTol)) throw InvalidParameter("visit probability outside [0,1]");
    if (!(eps > 0.0 && eps < 1.0) || !(B > 0.0) || S == 0 || A == 0 || H == 0)
        throw InvalidParameter("accuracy_per_state needs 0<eps<1, B>0 and nonempty sizes");
    const double s = static_cast<double>(S), a = static_cast<double>(A), h = static_cast<double>(H);
    double v;
    if (p < eps / (B * s))
        v = 1.0;
    else if (p > 1.0 / s)
        v = eps / (B * h * s * a);
    else
        v = eps / (B * p * s * a);
    return loss == Loss::L2 ? v * v : v;
}

/// n(s,a) and n(s'|s,a) for every decision pair of a layout.
struct TransitionCounters {
    std::vector<std::vector<std::vector<std::size_t>>> n;                // [h][s][a]
    std::vector<std::vector<std::vector<std::vector<std::size_t>>>> next;  // [h][s][a][s']

    TransitionCounters() = default;
    explicit TransitionCounters(const Layout& L) {
        n.resize(L.horizon());
        next.resize(L.horizon());
        for (std::size_t h = 0; h < L.horizon(); ++h) {
            n[h].assign(L.layer_size(h), std::vector<std::size_t>(L.num_actions(), 0));
            next[h].assign(L.layer_size(h), std::vector<std::vector<std::size_t>>(
                                                 L.num_actions(), std::vector<std::size_t>(L.layer_size(h + 1), 0)));
        }
    }

    void record(std::size_t h, std::size_t s, std::size_t a, std::size_t s_next) {
        ++n[h][s][a];
        ++next[h][s][a][s_next];
    }
};

/**
Tabular row over S_{h+1} followed by the sink: n(s'|s,a)/n(s,a) when
n(s,a) >= threshold, otherwise all mass on the sink.
*/
inline std::vector<double> tabular_estimate(const std::vector<std::size_t>& next_counts, std::size_t n,
                                            std::size_t threshold) {
    std::size_t total = 0;
    for (std::size_t c : next_counts) total += c;
    if (total != n)
        throw InconsistentCounters("next-state counts sum to " + std::to_string(total) + " but n(s,a) = " +
                                   std::to_string(n));
    std::vector<double> row(next_counts.size() + 1, 0.0);
    if (n == 0 || n < threshold) {
        row.back() = 1.0;
        return row;
    }
    double sum = 0.0;
    std::size_t largest = 0;
    for (std::size_t i = 0; i < next_counts.size(); ++i) {
        row[i] = static_cast<double>(next_counts[i]) / static_cast<double>(n);
        sum += row[i];
        if (next_counts[i] > next_counts[largest]) largest = i;
    }
    row[largest] += 1.0 - sum;
    return row;
}

/// Sink-augmented model from counters, with a per-layer threshold.
inline LayeredMdp tabular_model(const Layout& layout, const TransitionCounters& counters,
                                const std::vector<std::size_t>& thresholds) {
    const Layout aug = layout.with_sink();
    LayeredMdp m(aug);
    for (std::size_t h = 0; h < aug.horizon(); ++h) {
        for (std::size_t s = 0; s < aug.layer_size(h); ++s) {
            for (std::size_t a = 0; a < aug.num_actions(); ++a) {
                std::vector<double> row;
                if (aug.sink(h) && s == *aug.sink(h)) {
                    row.assign(aug.layer_size(h + 1), 0.0);
                    row.back() = 1.0;
                } else {
                    row = tabular_estimate(counters.next[h][s][a], counters.n[h][s][a], thresholds[h]);
                }
                m.set_transition(h, s, a, row);
            }
        }
    }
    return m;
}

/// One issued episode budget, kept for auditing.
struct BudgetEntry {
    std::string where;
    std::uint64_t episodes = 0;
    std::size_t required = 0;
    std::size_t collected = 0;
};

struct CfLearnedModel {
    std::string algorithm;
    Layout layout;
    CfConfig config;
    /// f_{s,a} indexed [h][s][a]; zero predictors for states below beta.
    std::vector<std::vector<std::vector<Predictor>>> predictors;
    /// KCFD: the known kernel. UCFD: P-hat on the sink-augmented layout.
    LayeredMdp dynamics;
    TransitionCounters counters;
    TransitionCounters off_target;
    std::vector<std::size_t> np_thresholds;
    /// p_s (KCFD) or p-hat_s (UCFD), [h][s].
    std::vector<std::vector<double>> reach;
    std::vector<std::vector<Policy>> reach_policies;
    std::vector<BudgetEntry> budgets;
    std::uint64_t episodes_used = 0;
    /// Filled when config.keep_samples is set: datasets and the context id
    /// of every sample, [h][s][a].
    std::vector<std::vector<std::vector<LabeledDataset>>> samples;
    std::vector<std::vector<std::vector<std::vector<std::size_t>>>> sample_context_ids;
    double beta = 0.0;
    double gamma = 0.0;
    double delta1 = 0.0;
};

namespace detail {

inline void init_cf_model(CfLearnedModel& m, const Layout& L) {
    m.layout = L;
    m.predictors.resize(L.horizon());
    m.reach.resize(L.horizon());
    m.reach_policies.resize(L.horizon());
    m.samples.resize(L.horizon());
    m.sample_context_ids.resize(L.horizon());
    for (std::size_t h = 0; h < L.horizon(); ++h) {
        m.predictors[h].assign(L.layer_size(h), std::vector<Predictor>(L.num_actions()));
        m.reach[h].assign(L.layer_size(h), 0.0);
        m.reach_policies[h].assign(L.layer_size(h), Policy(L));
        m.samples[h].resize(L.layer_size(h), std::vector<LabeledDataset>(L.num_actions()));
        m.sample_context_ids[h].resize(L.layer_size(h), std::vector<std::vector<std::size_t>>(L.num_actions()));
    }
}

inline void require_reward_class(const RewardClassFn& fn) {
    if (!fn) throw InvalidParameter("learner config has no reward function class");
}

}  // namespace detail

/**
Known context-free dynamics. PaP on the known kernel gives (p_s, pi_s);
for every s with p_s >= beta and every a, pi_s is played with its action
at s replaced by a, rewards observed at (s,a) are collected, and f_{s,a}
is fitted by ERM. States below beta get zero predictors.
*/
inline CfLearnedModel explore_kcfd(EpisodeSource& env, const DynamicsOracle& oracle, const CfConfig& cfg, Rng& rng) {
    detail::require_reward_class(cfg.reward_class);
    if (!oracle.context_free()) throw InvalidParameter("KCFD needs context-free dynamics");
    const Layout& L = env.layout();
    const std::size_t S = L.num_states(), A = L.num_actions(), H = L.horizon();
    const double B = cfg.B.value_or(6.0);
    CfLearnedModel model;
    model.algorithm = "kcfd";
    model.config = cfg;
    detail::init_cf_model(model, L);
    model.delta1 = cfg.delta / (4.0 * static_cast<double>(S * A));
    model.beta = cfg.beta.value_or(cfg.eps / (6.0 * static_cast<double>(S)));

    const auto kernel = oracle.shared_dynamics();
    model.dynamics = kernel->skeleton();
    const auto reach = pap(model.dynamics);
    const std::uint64_t start = env.episodes();

    for (std::size_t h = 0; h < H; ++h) {
        for (std::size_t s = 0; s < L.layer_size(h); ++s) {
            const double p = reach[h][s].prob;
            model.reach[h][s] = p;
            model.reach_policies[h][s] = reach[h][s].policy;
            if (p < model.beta) continue;
            const double eps_star = accuracy_per_state(p, cfg.eps, B, S, A, H, cfg.loss);
            for (std::size_t a = 0; a < A; ++a) {
                Policy pi = reach[h][s].policy;
                pi.set_action(h, s, a);
                const FunctionClass cls = cfg.reward_class(h, s, a);
                const std::size_t need = n_rewards(cls, eps_star, model.delta1, cfg.constant_scale);
                const std::uint64_t T = episodes_for_visits(std::min(1.0, p), model.delta1, static_cast<double>(need));
                LabeledDataset sample(cls.input_arity());
                std::vector<std::size_t> ids;
                for (std::uint64_t t = 0; t < T; ++t) {
                    const Context c = env.begin_episode(rng);
                    const Trajectory tau = env.play(pi, rng);
                    if (tau.states[h] == s && tau.actions[h] == a) {
                        sample.add(c.x, tau.rewards[h]);
                        ids.push_back(c.id);
                    }
                }
                model.budgets.push_back({where_hsa(h, s, a), T, need, sample.size()});
                model.episodes_used += T;
                if (sample.size() < need) throw ExplorationFailed(where_hsa(h, s, a), sample.size(), need);
                model.predictors[h][s][a] = erm_fit(cls, sample, cfg.loss);
                if (cfg.keep_samples) {
                    model.samples[h][s][a] = std::move(sample);
                    model.sample_context_ids[h][s][a] = std::move(ids);
                }
            }
        }
    }
    if (env.episodes() - start != model.episodes_used)
        throw InconsistentCounters("episode accounting differs from the environment counter");
    return model;
}

/**
Unknown context-free dynamics, learned layer by layer. Before layer h the
tabular P-hat (with sink) is rebuilt from the counters; FFP on it gives
(pi-hat_s, p-hat_s). Only the pair being sampled updates the counters.
*/
inline CfLearnedModel explore_ucfd(EpisodeSource& env, const CfConfig& cfg, Rng& rng) {
    detail::require_reward_class(cfg.reward_class);
    const Layout& L = env.layout();
    const std::size_t S = L.num_states(), A = L.num_actions(), H = L.horizon();
    const double Sd = static_cast<double>(S), Hd = static_cast<double>(H);
    const double B = cfg.B.value_or(24.0);
    CfLearnedModel model;
    model.algorithm = "ucfd";
    model.config = cfg;
    detail::init_cf_model(model, L);
    model.delta1 = cfg.delta / (6.0 * static_cast<double>(S * A * H));
    model.beta = cfg.beta.value_or(cfg.eps / (24.0 * Sd * Hd));
    model.gamma = cfg.gamma.value_or(cfg.eps / (48.0 * Sd * Hd * Hd));
    const double upper = cfg.eps / (24.0 * Sd);
    if (!(model.beta <= upper * (1.0 + 1e-12) && model.beta >= 2.0 * model.gamma * Hd * (1.0 - 1e-12)) ||
        !(model.gamma > 0.0))
        throw InvalidParameter("UCFD needs eps/(24|S|) >= beta >= 2 gamma H > 0");

    model.counters = TransitionCounters(L);
    model.off_target = TransitionCounters(L);
    for (std::size_t h = 0; h < H; ++h)
        model.np_thresholds.push_back(
            n_dynamics_tabular(model.gamma, model.delta1, L.layer_size(h + 1), cfg.constant_scale));
    const std::uint64_t start = env.episodes();

    for (std::size_t h = 0; h < H; ++h) {
        const LayeredMdp phat = tabular_model(L, model.counters, model.np_thresholds);
        for (std::size_t s = 0; s < L.layer_size(h); ++s) {
            const auto r = ffp(phat, h, s);
            const double p = r.prob;
            model.reach[h][s] = p;
            model.reach_policies[h][s] = r.policy.restricted_to(L);
            if (p < model.beta) continue;
            const double margin = p - model.gamma * static_cast<double>(h);
            if (!(margin > 0.0)) throw InvalidParameter("p-hat - gamma h is not positive at " + where_hsa(h, s, 0));
            const double eps_star = accuracy_per_state(std::min(p, 1.0), cfg.eps, B, S, A, H, cfg.loss);
            for (std::size_t a = 0; a < A; ++a) {
                Policy pi = model.reach_policies[h][s];
                pi.set_action(h, s, a);
                const FunctionClass cls = cfg.reward_class(h, s, a);
                const std::size_t n_r = n_rewards(cls, eps_star, model.delta1, cfg.constant_scale);
                const std::size_t need = std::max(n_r, model.np_thresholds[h]);
                const std::uint64_t T =
                    episodes_for_visits(std::min(1.0, margin), model.delta1, static_cast<double>(need));
                LabeledDataset sample(cls.input_arity());
                std::vector<std::size_t> ids;
                for (std::uint64_t t = 0; t < T; ++t) {
                    const Context c = env.begin_episode(rng);
                    const Trajectory tau = env.play(pi, rng);
                    if (tau.states[h] == s && tau.actions[h] == a) {
                        sample.add(c.x, tau.rewards[h]);
                        ids.push_back(c.id);
                        model.counters.record(h, s, a, tau.states[h + 1]);
                    }
                    if (cfg.record_off_target)
                        for (std::size_t k = 0; k < H; ++k)
                            if (k != h || tau.states[k] != s)
                                model.off_target.record(k, tau.states[k], tau.actions[k], tau.states[k + 1]);
                }
                model.budgets.push_back({where_hsa(h, s, a), T, need, sample.size()});
                model.episodes_used += T;
                if (sample.size() < need) throw ExplorationFailed(where_hsa(h, s, a), sample.size(), need);
                model.predictors[h][s][a] = erm_fit(cls, sample, cfg.loss);
                if (cfg.keep_samples) {
                    model.samples[h][s][a] = std::move(sample);
                    model.sample_context_ids[h][s][a] = std::move(ids);
                }
            }
        }
    }
    model.dynamics = tabular_model(L, model.counters, model.np_thresholds);
    if (env.episodes() - start != model.episodes_used)
        throw InconsistentCounters("episode accounting differs from the environment counter");
    return model;
}

/// M-hat(c): the model's dynamics with r-hat(s,a) = f_{s,a}(c) and zero
/// reward on the sink.
inline LayeredMdp approximate_model(const Context& c, const CfLearnedModel& model) {
    LayeredMdp m = model.dynamics.skeleton();
    const Layout& L = model.layout;
    for (std::size_t h = 0; h < L.horizon(); ++h)
        for (std::size_t s = 0; s < L.layer_size(h); ++s)
            for (std::size_t a = 0; a < L.num_actions(); ++a) m.set_reward(h, s, a, model.predictors[h][s][a](c.x));
    return m;
}

/// Planning on M-hat(c); the returned policy lives on the true layout.
inline Policy exploit_context_free(const Context& c, const CfLearnedModel& model) {
    return plan(approximate_model(c, model)).policy.restricted_to(model.layout);
}

inline PolicyMap policy_map(const CfLearnedModel& model) {
    return PolicyMap([&model](const Context& c) { return exploit_context_free(c, model); });
}

/// {predictors:{"h,s,a":...}, dynamics:{"h,s,a":[probs incl. sink]}, meta:{...}}
inline nlohmann::json model_to_json(const CfLearnedModel& model, std::uint64_t seed) {
    nlohmann::json j;
    nlohmann::json preds = nlohmann::json::object();
    const Layout& L = model.layout;
    for (std::size_t h = 0; h < L.horizon(); ++h)
        for (std::size_t s = 0; s < L.layer_size(h); ++s)
            for (std::size_t a = 0; a < L.num_actions(); ++a) preds[hsa_key(h, s, a)] = model.predictors[h][s][a].to_json();
    j["predictors"] = preds;
    j["dynamics"] = detail::transitions_json(model.dynamics);
    j["meta"] = {{"algorithm", model.algorithm},
                 {"config", model.config.to_json()},
                 {"seed", seed},
                 {"episodes_used", model.episodes_used},
                 {"layers", L.layer_sizes()},
                 {"actions", L.num_actions()},
                 {"sink", model.dynamics.layout().has_sink()}};
    return j;
}

}  // namespace cmdp
