#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include <json.hpp>

#include "context_free.hpp"
#include "core.hpp"
#include "erm.hpp"
#include "json_io.hpp"
#include "planner.hpp"

namespace cmdp {

/// Per-layer hypothesis class; inputs are (c, s, a) for rewards and
/// (c, s, a, s') for dynamics.
using LayerClassFn = std::function<FunctionClass(std::size_t h)>;

struct CdConfig {
    double eps = 0.25;
    double delta = 0.1;
    Loss loss = Loss::L2;
    /// Extended reachability. KCDD: beta = eps/(8|S|), gamma = eps/(8|S|H).
    /// UCDD: beta = gamma = eps/(20|S|H).
    std::optional<double> beta;
    std::optional<double> gamma;
    /// KCDD per-pair accuracy.
    std::optional<double> eps1;
    /// UCDD per-layer accuracies and TV slack.
    std::optional<double> eps_p;
    std::optional<double> eps_r;
    std::optional<double> rho;
    /// AGC accuracy; gamma/2 (KCDD) or gamma/4 (UCDD) when unset.
    std::optional<double> eps2;
    double constant_scale = 1.0;
    RewardClassFn reward_class;
    LayerClassFn layer_reward_class;
    LayerClassFn layer_dynamics_class;
    /// KCDD: throw ExplorationFailed on a short dataset instead of using a
    /// zero predictor for the pair.
    bool fail_on_shortfall = false;
    bool keep_samples = false;

    nlohmann::json to_json() const {
        nlohmann::json j{{"eps", eps},
                         {"delta", delta},
                         {"loss", loss_name(loss)},
                         {"constant_scale", constant_scale},
                         {"fail_on_shortfall", fail_on_shortfall}};
        const std::pair<const char*, const std::optional<double>*> opt[] = {
            {"beta", &beta}, {"gamma", &gamma}, {"eps1", &eps1}, {"eps_p", &eps_p},
            {"eps_r", &eps_r}, {"rho", &rho},   {"eps2", &eps2}};
        for (const auto& [name, v] : opt)
            if (*v) j[name] = **v;
        return j;
    }
};

/// Parameters after defaults are filled in.
struct CdParams {
    double beta = 0.0, gamma = 0.0, eps1 = 0.0, eps_p = 0.0, eps_r = 0.0, rho = 0.0;
    double eps2 = 0.0, delta1 = 0.0, delta2 = 0.0;

    nlohmann::json to_json() const {
        return {{"beta", beta},   {"gamma", gamma}, {"eps1", eps1},     {"eps_p", eps_p}, {"eps_r", eps_r},
                {"rho", rho},     {"eps2", eps2},   {"delta1", delta1}, {"delta2", delta2}};
    }
};

namespace detail {

inline void require_unit(double v, const char* name) {
    if (!(v > 0.0 && v <= 1.0)) throw InvalidParameter(std::string(name) + " must lie in (0,1], got " + std::to_string(v));
}

inline void check_common(const CdConfig& cfg) {
    if (!(cfg.eps > 0.0 && cfg.eps < 1.0)) throw InvalidParameter("eps must lie in (0,1)");
    if (!(cfg.delta > 0.0 && cfg.delta < 1.0)) throw InvalidParameter("delta must lie in (0,1)");
    if (!(cfg.constant_scale > 0.0)) throw InvalidParameter("constant_scale must be positive");
}

}  // namespace detail

inline CdParams kcdd_params(const CdConfig& cfg, const Layout& L) {
    detail::check_common(cfg);
    const double S = static_cast<double>(L.num_states()), A = static_cast<double>(L.num_actions()),
                 H = static_cast<double>(L.horizon()), e = cfg.eps;
    CdParams p;
    p.delta1 = cfg.delta / (6.0 * S * A);
    p.delta2 = cfg.delta / (6.0 * S);
    p.gamma = cfg.gamma.value_or(e / (8.0 * S * H));
    p.beta = cfg.beta.value_or(e / (8.0 * S));
    p.eps2 = cfg.eps2.value_or(p.gamma / 2.0);
    p.eps1 = cfg.eps1.value_or(cfg.loss == Loss::L1 ? e * e / (64.0 * S * A * H * H)
                                                    : e * e * e / (512.0 * S * A * H * H * H));
    detail::require_unit(p.beta, "beta");
    detail::require_unit(p.gamma, "gamma");
    detail::require_unit(p.eps1, "eps1");
    if (!(p.eps2 > 0.0 && p.eps2 <= p.gamma)) throw InvalidParameter("AGC needs 0 < eps2 <= gamma");
    return p;
}

/// SP1 (L1) or SP2 (L2) defaults, each entry overridable.
inline CdParams ucdd_params(const CdConfig& cfg, const Layout& L) {
    detail::check_common(cfg);
    const double S = static_cast<double>(L.num_states()), A = static_cast<double>(L.num_actions()),
                 H = static_cast<double>(L.horizon()), e = cfg.eps;
    CdParams p;
    p.delta1 = cfg.delta / (8.0 * H);
    p.delta2 = cfg.delta / (8.0 * S);
    p.gamma = cfg.gamma.value_or(e / (20.0 * S * H));
    p.beta = cfg.beta.value_or(e / (20.0 * S * H));
    p.rho = cfg.rho.value_or(p.beta / (16.0 * S * H));
    p.eps2 = cfg.eps2.value_or(p.gamma / 4.0);
    if (cfg.loss == Loss::L1) {
        p.eps_p = cfg.eps_p.value_or(e * e / (10.0 * 16.0 * 20.0 * A * std::pow(S, 4) * std::pow(H, 3)));
        p.eps_r = cfg.eps_r.value_or(e * e / (400.0 * S * A * H * H));
    } else {
        p.eps_p = cfg.eps_p.value_or(e * e * e / (10.0 * 256.0 * 400.0 * A * std::pow(S, 6) * std::pow(H, 5)));
        p.eps_r = cfg.eps_r.value_or(e * e * e / (8000.0 * S * A * H * H * H));
    }
    detail::require_unit(p.beta, "beta");
    detail::require_unit(p.gamma, "gamma");
    detail::require_unit(p.eps_p, "eps_p");
    detail::require_unit(p.eps_r, "eps_r");
    if (!(p.eps2 > 0.0 && p.eps2 <= p.gamma)) throw InvalidParameter("AGC needs 0 < eps2 <= gamma");
    return p;
}

/// p-hat_beta(s) and the approximately good sets, both indexed [h][s].
struct GoodSets {
    std::vector<std::vector<double>> p_beta;
    std::vector<std::vector<bool>> good;

    GoodSets() = default;
    explicit GoodSets(const Layout& L) {
        for (std::size_t h = 0; h < L.horizon(); ++h) {
            p_beta.emplace_back(L.layer_size(h), 0.0);
            good.emplace_back(L.layer_size(h), false);
        }
    }

    std::vector<std::size_t> members(std::size_t h) const {
        std::vector<std::size_t> out;
        for (std::size_t s = 0; s < good[h].size(); ++s)
            if (good[h][s]) out.push_back(s);
        return out;
    }
};

struct AgcResult {
    bool good = false;
    double p_hat = 0.0;
    std::size_t draws = 0;
};

inline std::size_t agc_draws(double eps2, double delta2) {
    if (!(eps2 > 0.0)) throw InvalidParameter("eps2 must be positive");
    detail::require_unit(delta2, "delta2");
    return std::max<std::size_t>(1, detail::ceil_count(std::log(2.0 / delta2) / (2.0 * eps2 * eps2)));
}

/// Draws m contexts and counts those for which `member` holds; good when
/// the frequency is at least gamma - eps2.
inline AgcResult agc(const std::function<bool(const Context&)>& member, double gamma, double eps2, double delta2,
                     const std::function<Context(Rng&)>& draw, Rng& rng) {
    if (!(eps2 > 0.0 && eps2 <= gamma)) throw InvalidParameter("AGC needs 0 < eps2 <= gamma");
    const std::size_t m = agc_draws(eps2, delta2);
    std::size_t counter = 0;
    for (std::size_t t = 0; t < m; ++t)
        if (member(draw(rng))) ++counter;
    AgcResult r;
    r.draws = m;
    r.p_hat = static_cast<double>(counter) / static_cast<double>(m);
    r.good = r.p_hat >= gamma - eps2;
    return r;
}

/// AGC with membership c in C^beta(s) decided by FFP on dyn(c).
inline AgcResult agc(const std::function<std::shared_ptr<const LayeredMdp>(const Context&)>& dyn, std::size_t h,
                     std::size_t s, double gamma, double beta, double eps2, double delta2,
                     const std::function<Context(Rng&)>& draw, Rng& rng) {
    return agc([&](const Context& c) { return ffp(*dyn(c), h, s).prob >= beta; }, gamma, eps2, delta2, draw, rng);
}

/// P-hat^c for one context together with everything derived from it.
struct AcddInstance {
    /// Sink-augmented model; rows of layers >= h all lead to the sink.
    LayeredMdp model;
    /// FFP on `model` for every state of layers 0..min(h, H-1): [k][s].
    std::vector<std::vector<ReachResult>> reach;
    /// c in C-hat^beta(s), same indexing as reach.
    std::vector<std::vector<bool>> member;
    std::size_t degenerate_rows = 0;
};

/**
Context-dependent dynamics built from the first h learned layers. For
k < h and s in S-tilde_k the row is f^P_k(c,s,a,.) normalized over S_{k+1}
when c is in C-hat^beta(s) (FFP on the already built layers reaches s with
probability >= beta), and the sink otherwise. A row whose predictions sum
to zero also goes to the sink and is counted.
*/
class Acdd {
public:
    Acdd(Layout layout, std::size_t h, double beta, std::vector<Predictor> dynamics, GoodSets sets)
        : layout_(std::move(layout)), h_(h), beta_(beta), fp_(std::move(dynamics)), sets_(std::move(sets)) {
        if (layout_.has_sink()) throw InvalidParameter("ACDD takes the layout without the sink");
        if (h_ > layout_.horizon()) throw InvalidParameter("ACDD layer beyond the horizon");
        if (fp_.size() < h_) throw LengthMismatch("ACDD needs a dynamics predictor for every layer below h");
    }

    std::size_t layer() const { return h_; }
    const Layout& layout() const { return layout_; }

    AcddInstance build(const Context& c) const {
        const Layout aug = layout_.with_sink();
        AcddInstance out{LayeredMdp(aug), {}, {}, 0};
        LayeredMdp& m = out.model;
        for (std::size_t k = 0; k < aug.horizon(); ++k)
            for (std::size_t s = 0; s < aug.layer_size(k); ++s)
                for (std::size_t a = 0; a < aug.num_actions(); ++a) set_sink_row(m, k, s, a);

        const std::size_t last = std::min(h_, layout_.horizon() - 1);
        std::vector<double> x(c.x);
        x.resize(c.x.size() + 3);
        for (std::size_t k = 0; k <= last; ++k) {
            // Layer k only depends on rows of layers < k, which are final.
            out.reach.emplace_back();
            out.member.emplace_back();
            for (std::size_t s = 0; s < layout_.layer_size(k); ++s) {
                out.reach[k].push_back(ffp(m, k, s));
                out.member[k].push_back(out.reach[k][s].prob >= beta_);
            }
            if (k >= h_) break;
            const std::size_t next = layout_.layer_size(k + 1);
            for (std::size_t s = 0; s < layout_.layer_size(k); ++s) {
                if (!sets_.good[k][s] || !out.member[k][s]) continue;
                for (std::size_t a = 0; a < layout_.num_actions(); ++a) {
                    std::vector<double> row(next + 1, 0.0);
                    double sum = 0.0;
                    x[c.x.size()] = static_cast<double>(s);
                    x[c.x.size() + 1] = static_cast<double>(a);
                    for (std::size_t n = 0; n < next; ++n) {
                        x[c.x.size() + 2] = static_cast<double>(n);
                        row[n] = fp_[k](x);
                        sum += row[n];
                    }
                    if (!(sum > 0.0)) {
                        ++out.degenerate_rows;
                        continue;
                    }
                    for (std::size_t n = 0; n < next; ++n) row[n] /= sum;
                    m.set_transition(k, s, a, row);
                }
            }
        }
        return out;
    }

private:
    static void set_sink_row(LayeredMdp& m, std::size_t k, std::size_t s, std::size_t a) {
        auto row = m.mutable_row(k, s, a);
        std::fill(row.begin(), row.end(), 0.0);
        row.back() = 1.0;
    }

    Layout layout_;
    std::size_t h_;
    double beta_;
    std::vector<Predictor> fp_;
    GoodSets sets_;
};

/// ACDD instances memoized per context id; contexts without an id are
/// rebuilt on every call and the returned reference lasts until the next.
class AcddMemo {
public:
    explicit AcddMemo(const Acdd& acdd) : acdd_(acdd) {}

    const AcddInstance& get(const Context& c) {
        if (c.id == kNoContextId) {
            scratch_ = std::make_unique<AcddInstance>(acdd_.build(c));
            degenerate_ += scratch_->degenerate_rows;
            return *scratch_;
        }
        auto it = cache_.find(c.id);
        if (it == cache_.end()) {
            it = cache_.emplace(c.id, acdd_.build(c)).first;
            degenerate_ += it->second.degenerate_rows;
        }
        return it->second;
    }

    std::uint64_t degenerate_rows() const { return degenerate_; }
    const Acdd& acdd() const { return acdd_; }

private:
    const Acdd& acdd_;
    std::map<std::size_t, AcddInstance> cache_;
    std::unique_ptr<AcddInstance> scratch_;
    std::uint64_t degenerate_ = 0;
};

struct AgsResult {
    std::vector<bool> good;
    std::vector<double> p_beta;
    std::uint64_t draws = 0;

    std::vector<std::size_t> states() const {
        std::vector<std::size_t> out;
        for (std::size_t s = 0; s < good.size(); ++s)
            if (good[s]) out.push_back(s);
        return out;
    }
};

/// AGC for every state of layer h, with membership taken from the ACDD
/// prefix the memo was built on.
inline AgsResult ags(AcddMemo& instances, std::size_t h, double gamma, double eps2, double delta2,
                     const std::function<Context(Rng&)>& draw, Rng& rng) {
    AgsResult out;
    for (std::size_t s = 0; s < instances.acdd().layout().layer_size(h); ++s) {
        const auto g = agc([&](const Context& c) { return instances.get(c).member.at(h)[s]; }, gamma, eps2, delta2,
                           draw, rng);
        out.good.push_back(g.good);
        out.p_beta.push_back(g.p_hat);
        out.draws += g.draws;
    }
    return out;
}

/// Episodes and dataset sizes of one UCDD layer.
struct LayerAudit {
    std::size_t h = 0;
    std::uint64_t episodes = 0;
    std::uint64_t agc_episodes = 0;
    std::size_t n_p = 0;
    std::size_t n_r = 0;
    std::size_t reward_samples = 0;
    std::size_t dynamics_samples = 0;
    std::size_t hits = 0;
    std::vector<std::size_t> good_states;
};

struct CdLearnedModel {
    std::string algorithm;
    Layout layout;
    CdConfig config;
    CdParams params;
    GoodSets sets;
    /// KCDD: f_{s,a}, [h][s][a].
    std::vector<std::vector<std::vector<Predictor>>> predictors;
    /// KCDD: the known dynamics.
    std::shared_ptr<const DynamicsOracle> known;
    /// UCDD: f^R_h and f^P_h.
    std::vector<Predictor> reward_layers;
    std::vector<Predictor> dynamics_layers;
    std::vector<BudgetEntry> budgets;
    /// KCDD: trajectories that passed through the pair, aligned with budgets.
    std::vector<std::size_t> hits;
    std::vector<LayerAudit> layers;
    std::uint64_t agc_episodes = 0;
    std::uint64_t episodes_used = 0;
    std::uint64_t degenerate_rows = 0;
    /// KCDD: pairs whose dataset fell short and got a zero predictor.
    std::vector<std::string> shortfalls;
    /// Filled when config.keep_samples is set. KCDD: [h][s][a] datasets and
    /// accepted context ids. UCDD: per-layer datasets in reward_samples /
    /// dynamics_samples.
    std::vector<std::vector<std::vector<LabeledDataset>>> samples;
    std::vector<std::vector<std::vector<std::vector<std::size_t>>>> sample_context_ids;
    std::vector<LabeledDataset> reward_samples;
    std::vector<LabeledDataset> dynamics_samples;

    /// UCDD: P-hat^c over the whole horizon.
    Acdd acdd() const { return Acdd(layout, layout.horizon(), params.beta, dynamics_layers, sets); }
};

namespace detail {

/// Memoized FFP results keyed by (context id, h, s); contexts without an id
/// are recomputed.
class ReachCache {
public:
    template <class Fn>
    const ReachResult& get(const Context& c, std::size_t h, std::size_t s, Fn&& compute) {
        if (c.id == kNoContextId) {
            scratch_ = compute();
            return scratch_;
        }
        const auto key = std::make_tuple(c.id, h, s);
        auto it = cache_.find(key);
        if (it == cache_.end()) it = cache_.emplace(key, compute()).first;
        return it->second;
    }

private:
    std::map<std::tuple<std::size_t, std::size_t, std::size_t>, ReachResult> cache_;
    ReachResult scratch_;
};

inline void check_episodes(const EpisodeSource& env, std::uint64_t start, std::uint64_t used) {
    if (env.episodes() - start != used)
        throw InconsistentCounters("episode accounting differs from the environment counter");
}

}  // namespace detail

/**
Known context-dependent dynamics. For every state AGC decides whether the
state is (gamma,beta)-good; for each good state and action, every episode
plans FFP on P^c, overrides the action at s, runs when p^c_s >= beta and
keeps a hit with probability beta/p^c_s, so that accepted contexts follow
D restricted to C^beta(s). Each AGC context draw is one episode.
*/
inline CdLearnedModel explore_kcdd(EpisodeSource& env, std::shared_ptr<const DynamicsOracle> oracle,
                                   const CdConfig& cfg, Rng& rng) {
    detail::require_reward_class(cfg.reward_class);
    if (!oracle) throw InvalidParameter("KCDD needs the dynamics oracle");
    const Layout& L = env.layout();
    const std::size_t H = L.horizon(), A = L.num_actions();
    CdLearnedModel model;
    model.algorithm = "kcdd";
    model.layout = L;
    model.config = cfg;
    model.params = kcdd_params(cfg, L);
    model.known = oracle;
    model.sets = GoodSets(L);
    const CdParams& P = model.params;
    model.predictors.resize(H);
    model.samples.resize(H);
    model.sample_context_ids.resize(H);
    for (std::size_t h = 0; h < H; ++h) {
        model.predictors[h].assign(L.layer_size(h), std::vector<Predictor>(A));
        model.samples[h].resize(L.layer_size(h), std::vector<LabeledDataset>(A));
        model.sample_context_ids[h].resize(L.layer_size(h), std::vector<std::vector<std::size_t>>(A));
    }

    detail::ReachCache cache;
    auto reach = [&](const Context& c, std::size_t h, std::size_t s) -> const ReachResult& {
        return cache.get(c, h, s, [&] { return ffp(*oracle->dynamics(c), h, s); });
    };
    const std::uint64_t start = env.episodes();
    auto draw = [&](Rng& r) { return env.begin_episode(r); };

    for (std::size_t h = 0; h < H; ++h) {
        for (std::size_t s = 0; s < L.layer_size(h); ++s) {
            const auto g = agc([&](const Context& c) { return reach(c, h, s).prob >= P.beta; }, P.gamma, P.eps2,
                               P.delta2, draw, rng);
            model.agc_episodes += g.draws;
            model.episodes_used += g.draws;
            model.sets.p_beta[h][s] = g.p_hat;
            model.sets.good[h][s] = g.good;
            if (!g.good) continue;
            for (std::size_t a = 0; a < A; ++a) {
                const FunctionClass cls = cfg.reward_class(h, s, a);
                const std::size_t need = n_rewards(cls, P.eps1, P.delta1, cfg.constant_scale);
                const std::uint64_t T = episodes_for_visits(P.beta * P.gamma, P.delta1, static_cast<double>(need));
                LabeledDataset sample(cls.input_arity());
                std::vector<std::size_t> ids;
                std::size_t hits = 0;
                for (std::uint64_t t = 0; t < T; ++t) {
                    const Context c = env.begin_episode(rng);
                    const ReachResult& r = reach(c, h, s);
                    if (!(r.prob >= P.beta)) continue;
                    Policy pi = r.policy;
                    pi.set_action(h, s, a);
                    const Trajectory tau = env.play(pi, rng);
                    if (tau.states[h] != s || tau.actions[h] != a) continue;
                    ++hits;
                    if (bernoulli(rng, P.beta / r.prob)) {
                        sample.add(c.x, tau.rewards[h]);
                        ids.push_back(c.id);
                    }
                }
                model.budgets.push_back({where_hsa(h, s, a), T, need, sample.size()});
                model.hits.push_back(hits);
                model.episodes_used += T;
                if (sample.size() >= need) {
                    model.predictors[h][s][a] = erm_fit(cls, sample, cfg.loss);
                } else if (cfg.fail_on_shortfall) {
                    throw ExplorationFailed(where_hsa(h, s, a), sample.size(), need);
                } else {
                    model.shortfalls.push_back(where_hsa(h, s, a));
                }
                if (cfg.keep_samples) {
                    model.samples[h][s][a] = std::move(sample);
                    model.sample_context_ids[h][s][a] = std::move(ids);
                }
            }
        }
    }
    detail::check_episodes(env, start, model.episodes_used);
    return model;
}

/// ceil(8|S|/(beta gamma) (ln(1/delta1) + 2 max{N_P, N_R})).
inline std::uint64_t ucdd_layer_episodes(std::size_t S, double beta, double gamma, double delta1, std::size_t n_p,
                                         std::size_t n_r) {
    const double body = std::log(1.0 / delta1) + 2.0 * static_cast<double>(std::max(n_p, n_r));
    return detail::ceil_count(8.0 * static_cast<double>(S) / (beta * gamma) * body);
}

/**
Unknown context-dependent dynamics, learned layer by layer. Layer h: AGS
over the ACDD prefix gives S-tilde_h; then T_h episodes each pick (s,a)
uniformly from S-tilde_h x A, plan FFP on P-hat^c, override the action,
run when p-hat^c_s >= beta, and on a hit add ((c,s,a),r) to the reward
data and one record per s' in S_{h+1} with label 1[s_{h+1}=s'] to the
dynamics data. Quotas are 2 N_R(eps_R, delta1/2) and 2 N_P(eps_P, delta1/2).
*/
inline CdLearnedModel explore_ucdd(EpisodeSource& env, const CdConfig& cfg, Rng& rng) {
    if (!cfg.layer_reward_class || !cfg.layer_dynamics_class)
        throw InvalidParameter("UCDD needs per-layer reward and dynamics classes");
    const Layout& L = env.layout();
    const std::size_t H = L.horizon(), A = L.num_actions(), S = L.num_states();
    CdLearnedModel model;
    model.algorithm = "ucdd";
    model.layout = L;
    model.config = cfg;
    model.params = ucdd_params(cfg, L);
    model.sets = GoodSets(L);
    const CdParams& P = model.params;
    model.reward_layers.assign(H, Predictor());
    model.dynamics_layers.assign(H, Predictor());
    const std::uint64_t start = env.episodes();
    auto draw = [&](Rng& r) { return env.begin_episode(r); };

    for (std::size_t h = 0; h < H; ++h) {
        LayerAudit audit;
        audit.h = h;
        const FunctionClass cls_r = cfg.layer_reward_class(h);
        const FunctionClass cls_p = cfg.layer_dynamics_class(h);
        audit.n_r = n_rewards(cls_r, P.eps_r, P.delta1 / 2.0, cfg.constant_scale);
        audit.n_p = n_rewards(cls_p, P.eps_p, P.delta1 / 2.0, cfg.constant_scale);

        const Acdd acdd(L, h, P.beta, model.dynamics_layers, model.sets);
        AcddMemo instances(acdd);
        const AgsResult good = ags(instances, h, P.gamma, P.eps2, P.delta2, draw, rng);
        audit.agc_episodes = good.draws;
        model.sets.p_beta[h] = good.p_beta;
        model.sets.good[h] = good.good;
        audit.good_states = model.sets.members(h);
        model.agc_episodes += audit.agc_episodes;
        model.episodes_used += audit.agc_episodes;

        LabeledDataset data_r(cls_r.input_arity()), data_p(cls_p.input_arity());
        if (!audit.good_states.empty()) {
            audit.episodes = ucdd_layer_episodes(S, P.beta, P.gamma, P.delta1, audit.n_p, audit.n_r);
            const std::size_t next = L.layer_size(h + 1);
            const std::size_t choices = audit.good_states.size() * A;
            for (std::uint64_t t = 0; t < audit.episodes; ++t) {
                const std::size_t pick = uniform_index(rng, choices);
                const std::size_t s = audit.good_states[pick / A], a = pick % A;
                const Context c = env.begin_episode(rng);
                const AcddInstance& inst = instances.get(c);
                const ReachResult& r = inst.reach[h][s];
                if (!(r.prob >= P.beta)) continue;
                Policy pi = r.policy.restricted_to(L);
                pi.set_action(h, s, a);
                const Trajectory tau = env.play(pi, rng);
                if (tau.states[h] != s || tau.actions[h] != a) continue;
                ++audit.hits;
                std::vector<double> x(c.x);
                x.push_back(static_cast<double>(s));
                x.push_back(static_cast<double>(a));
                data_r.add(x, tau.rewards[h]);
                x.push_back(0.0);
                for (std::size_t n = 0; n < next; ++n) {
                    x.back() = static_cast<double>(n);
                    data_p.add(x, tau.states[h + 1] == n ? 1.0 : 0.0);
                }
            }
            audit.reward_samples = data_r.size();
            audit.dynamics_samples = data_p.size();
            model.episodes_used += audit.episodes;
            model.budgets.push_back({"layer " + std::to_string(h) + " rewards", audit.episodes, 2 * audit.n_r,
                                     data_r.size()});
            model.budgets.push_back({"layer " + std::to_string(h) + " dynamics", audit.episodes, 2 * audit.n_p,
                                     data_p.size()});
            if (data_r.size() < 2 * audit.n_r)
                throw ExplorationFailed("layer " + std::to_string(h) + " rewards", data_r.size(), 2 * audit.n_r);
            if (data_p.size() < 2 * audit.n_p)
                throw ExplorationFailed("layer " + std::to_string(h) + " dynamics", data_p.size(), 2 * audit.n_p);
            model.reward_layers[h] = erm_fit(cls_r, data_r, cfg.loss);
            model.dynamics_layers[h] = erm_fit(cls_p, data_p, cfg.loss);
        }
        model.degenerate_rows += instances.degenerate_rows();
        if (cfg.keep_samples) {
            model.reward_samples.push_back(std::move(data_r));
            model.dynamics_samples.push_back(std::move(data_p));
        }
        model.layers.push_back(std::move(audit));
    }
    detail::check_episodes(env, start, model.episodes_used);
    return model;
}

/**
M-hat(c). KCDD: the known P^c with r-hat = f_{s,a}(c) on good states whose
context set contains c. UCDD: P-hat^c from ACDD over all layers with
r-hat = f^R_h(c,s,a) on the same condition. Zero reward elsewhere.
*/
inline LayeredMdp approximate_model(const Context& c, const CdLearnedModel& model) {
    const Layout& L = model.layout;
    if (model.algorithm == "kcdd") {
        if (!model.known) throw InvalidParameter("KCDD model has no dynamics oracle");
        LayeredMdp m = model.known->dynamics(c)->skeleton();
        for (std::size_t h = 0; h < L.horizon(); ++h)
            for (std::size_t s = 0; s < L.layer_size(h); ++s) {
                if (!model.sets.good[h][s]) continue;
                if (!(ffp(m, h, s).prob >= model.params.beta)) continue;
                for (std::size_t a = 0; a < L.num_actions(); ++a) m.set_reward(h, s, a, model.predictors[h][s][a](c.x));
            }
        return m;
    }
    AcddInstance inst = model.acdd().build(c);
    std::vector<double> x(c.x);
    x.resize(c.x.size() + 2);
    for (std::size_t h = 0; h < L.horizon(); ++h)
        for (std::size_t s = 0; s < L.layer_size(h); ++s) {
            if (!model.sets.good[h][s] || !inst.member[h][s]) continue;
            x[c.x.size()] = static_cast<double>(s);
            for (std::size_t a = 0; a < L.num_actions(); ++a) {
                x[c.x.size() + 1] = static_cast<double>(a);
                inst.model.set_reward(h, s, a, model.reward_layers[h](x));
            }
        }
    return std::move(inst.model);
}

inline Policy exploit_context_dep(const Context& c, const CdLearnedModel& model) {
    return plan(approximate_model(c, model)).policy.restricted_to(model.layout);
}

inline PolicyMap policy_map(const CdLearnedModel& model) {
    return PolicyMap([&model](const Context& c) { return exploit_context_dep(c, model); });
}

/// {good_sets, predictors (KCDD) or layer_predictors (UCDD), meta}
inline nlohmann::json model_to_json(const CdLearnedModel& model, std::uint64_t seed) {
    const Layout& L = model.layout;
    nlohmann::json j;
    nlohmann::json sets = nlohmann::json::array();
    for (std::size_t h = 0; h < L.horizon(); ++h)
        sets.push_back({{"layer", h}, {"states", model.sets.members(h)}, {"p_beta", model.sets.p_beta[h]}});
    j["good_sets"] = sets;
    if (model.algorithm == "kcdd") {
        nlohmann::json preds = nlohmann::json::object();
        for (std::size_t h = 0; h < L.horizon(); ++h)
            for (std::size_t s = 0; s < L.layer_size(h); ++s)
                for (std::size_t a = 0; a < L.num_actions(); ++a)
                    preds[hsa_key(h, s, a)] = model.predictors[h][s][a].to_json();
        j["predictors"] = preds;
    } else {
        nlohmann::json layers = nlohmann::json::array();
        for (std::size_t h = 0; h < L.horizon(); ++h)
            layers.push_back({{"layer", h},
                              {"reward", model.reward_layers[h].to_json()},
                              {"dynamics", model.dynamics_layers[h].to_json()}});
        j["layer_predictors"] = layers;
    }
    j["meta"] = {{"algorithm", model.algorithm},
                 {"config", model.config.to_json()},
                 {"params", model.params.to_json()},
                 {"seed", seed},
                 {"episodes_used", model.episodes_used},
                 {"agc_episodes", model.agc_episodes},
                 {"degenerate_rows", model.degenerate_rows},
                 {"layers", L.layer_sizes()},
                 {"actions", L.num_actions()},
                 {"sink", model.algorithm == "ucdd"}};
    return j;
}

}  // namespace cmdp
