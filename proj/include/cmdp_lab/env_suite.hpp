#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "core.hpp"
#include "erm.hpp"
#include "planner.hpp"

namespace cmdp {

enum class RewardFamily { LinearClipped, FiniteTable };
enum class DynamicsFamily { ContextFreeRandom, ContextLinearMixture };

struct GenSpec {
    std::uint64_t seed = 0;
    std::vector<std::size_t> layer_sizes{1, 2, 2, 1};
    std::size_t num_actions = 2;
    /// 0 selects a continuous context space (sampler only).
    std::size_t num_contexts = 4;
    std::size_t context_dim = 2;
    RewardFamily reward_family = RewardFamily::LinearClipped;
    DynamicsFamily dynamics_family = DynamicsFamily::ContextLinearMixture;
    /// Every state must be reachable with probability >= floor under every
    /// context (for continuous spaces: under every probe context).
    double reachability_floor = 0.0;
    RewardNoise noise;
    /// Expose the dynamics to learners (KCFD/KCDD).
    bool known_dynamics = false;
    /// Members per (s,a) in the finite-table reward family.
    std::size_t finite_class_size = 8;
    /// Place contexts 0 and 1 at +e_1 and -e_1 with mixing direction e_1,
    /// so lambda is exactly 1 and 0 there.
    bool planted_endpoints = false;
    /// Explicit context probabilities; uniform when empty.
    std::vector<double> context_probs;

    std::size_t horizon() const { return layer_sizes.empty() ? 0 : layer_sizes.size() - 1; }

    void validate() const {
        if (layer_sizes.size() < 2 || layer_sizes[0] != 1) throw InvalidParameter("layer sizes must start with 1 and have H >= 1");
        for (std::size_t n : layer_sizes)
            if (n < 1) throw InvalidParameter("layer sizes must be >= 1");
        if (num_actions < 1 || context_dim < 1) throw InvalidParameter("|A| and d' must be >= 1");
        if (!(reachability_floor >= 0.0 && reachability_floor <= 1.0))
            throw InvalidParameter("reachability floor outside [0,1]");
        if (planted_endpoints && num_contexts < 2) throw InvalidParameter("planted endpoints need two contexts");
        if (!context_probs.empty() && context_probs.size() != num_contexts)
            throw InvalidParameter("context_probs has the wrong length");
        if (reward_family == RewardFamily::FiniteTable && finite_class_size < 1)
            throw InvalidParameter("finite class size must be >= 1");
    }

    nlohmann::json to_json() const {
        return {{"seed", seed},
                {"layers", layer_sizes},
                {"actions", num_actions},
                {"horizon", horizon()},
                {"contexts", num_contexts},
                {"context_dim", context_dim},
                {"reward_family", reward_family == RewardFamily::LinearClipped ? "linear-clipped" : "finite-table"},
                {"dynamics_family",
                 dynamics_family == DynamicsFamily::ContextFreeRandom ? "context-free-random" : "context-linear-mixture"},
                {"reachability_floor", reachability_floor},
                {"noise", noise.name()},
                {"known_dynamics", known_dynamics},
                {"finite_class_size", finite_class_size},
                {"planted_endpoints", planted_endpoints},
                {"context_probs", context_probs}};
    }

    static GenSpec from_json(const nlohmann::json& j) {
        GenSpec g;
        try {
            g.seed = j.value("seed", g.seed);
            g.layer_sizes = j.value("layers", g.layer_sizes);
            g.num_actions = j.value("actions", g.num_actions);
            g.num_contexts = j.value("contexts", g.num_contexts);
            g.context_dim = j.value("context_dim", g.context_dim);
            const auto rf = j.value("reward_family", std::string("linear-clipped"));
            if (rf == "linear-clipped")
                g.reward_family = RewardFamily::LinearClipped;
            else if (rf == "finite-table")
                g.reward_family = RewardFamily::FiniteTable;
            else
                throw ConfigError("unknown reward_family '" + rf + "'");
            const auto df = j.value("dynamics_family", std::string("context-linear-mixture"));
            if (df == "context-free-random")
                g.dynamics_family = DynamicsFamily::ContextFreeRandom;
            else if (df == "context-linear-mixture")
                g.dynamics_family = DynamicsFamily::ContextLinearMixture;
            else
                throw ConfigError("unknown dynamics_family '" + df + "'");
            g.reachability_floor = j.value("reachability_floor", g.reachability_floor);
            g.noise = RewardNoise::parse(j.value("noise", std::string("bernoulli")));
            g.known_dynamics = j.value("known_dynamics", g.known_dynamics);
            g.finite_class_size = j.value("finite_class_size", g.finite_class_size);
            g.planted_endpoints = j.value("planted_endpoints", g.planted_endpoints);
            g.context_probs = j.value("context_probs", g.context_probs);
            if (j.contains("horizon") && j.at("horizon").get<std::size_t>() != g.horizon())
                throw ConfigError("horizon does not match the layer list");
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError(std::string("malformed generator spec: ") + e.what());
        } catch (const InvalidParameter& e) {
            throw ConfigError(e.what());
        }
        return g;
    }
};

namespace detail {

inline std::vector<double> unit_vector(Rng& rng, std::size_t d) {
    std::normal_distribution<double> gauss;
    std::vector<double> v(d);
    double n2 = 0.0;
    do {
        n2 = 0.0;
        for (auto& x : v) {
            x = gauss(rng);
            n2 += x * x;
        }
    } while (n2 < 1e-24);
    const double n = std::sqrt(n2);
    for (auto& x : v) x /= n;
    return v;
}

inline std::vector<double> dirichlet_row(Rng& rng, std::size_t n) {
    std::vector<double> v(n);
    double sum = 0.0;
    for (auto& x : v) sum += (x = -std::log(1.0 - uniform01(rng)));
    for (auto& x : v) x /= sum;
    return v;
}

/// b + <w,c> with |c| = 1, kept inside [0,1] by |w| <= min(b, 1-b).
struct AffineReward {
    double b = 0.5;
    std::vector<double> w;

    double operator()(std::span<const double> c) const {
        double v = b;
        for (std::size_t j = 0; j < w.size(); ++j) v += w[j] * c[j];
        return v;
    }

    static AffineReward draw(Rng& rng, std::size_t d) {
        AffineReward r;
        r.b = 0.1 + 0.8 * uniform01(rng);
        const double mag = std::min(r.b, 1.0 - r.b) * uniform01(rng);
        r.w = unit_vector(rng, d);
        for (auto& x : r.w) x *= mag;
        return r;
    }
};

}  // namespace detail

/**
A generated CMDP together with the hypothesis classes that contain its
truth. Reward truths are affine in the context. Mixture dynamics
    P^c = eta U + (1 - eta)(lambda(c) P0 + (1 - lambda(c)) P1),
    lambda(c) = (1 + <v_h, c>) / 2,
are affine in c as well, so the per-layer dynamics classes realize them.
*/
class EnvHandle {
public:
    static std::shared_ptr<const EnvHandle> generate(const GenSpec& spec);

    const GenSpec& spec() const { return spec_; }
    const Cmdp& cmdp() const { return cmdp_; }
    const Layout& layout() const { return layout_; }
    double eta() const { return eta_; }

    /// F^R_{s,a}: functions of the context vector.
    FunctionClass reward_class(std::size_t h, std::size_t s, std::size_t a) const {
        if (spec_.reward_family == RewardFamily::FiniteTable) return finite_classes_.at(cell(h, s, a));
        return FunctionClass::linear_clipped(FeatureMap{spec_.context_dim, {}}, 2.0);
    }

    /// F^R_h over inputs (c, s, a).
    FunctionClass layer_reward_class(std::size_t h) const {
        return FunctionClass::linear_clipped(FeatureMap{spec_.context_dim, {layout_.layer_size(h), layout_.num_actions()}}, 2.0);
    }

    /// F^P_h over inputs (c, s, a, s').
    FunctionClass layer_dynamics_class(std::size_t h) const {
        return FunctionClass::linear_clipped(
            FeatureMap{spec_.context_dim, {layout_.layer_size(h), layout_.num_actions(), layout_.layer_size(h + 1)}}, 2.0);
    }

    /// Truth f_{s,a} as an affine predictor of the context vector.
    Predictor reward_truth(std::size_t h, std::size_t s, std::size_t a) const {
        const auto& r = rewards_[cell(h, s, a)];
        std::vector<double> w{r.b};
        w.insert(w.end(), r.w.begin(), r.w.end());
        return Predictor::linear(FeatureMap{spec_.context_dim, {}}, std::move(w));
    }

    /// The member of layer_reward_class(h) equal to the truth.
    Predictor layer_reward_truth(std::size_t h) const {
        const FeatureMap fm = layer_reward_class(h).features();
        std::vector<double> w(fm.dim(), 0.0);
        const std::size_t k = fm.block_width();
        for (std::size_t s = 0; s < layout_.layer_size(h); ++s)
            for (std::size_t a = 0; a < layout_.num_actions(); ++a) {
                const auto& r = rewards_[cell(h, s, a)];
                const std::size_t off = (s * layout_.num_actions() + a) * k;
                w[off] = r.b;
                for (std::size_t j = 0; j < r.w.size(); ++j) w[off + 1 + j] = r.w[j];
            }
        return Predictor::linear(fm, std::move(w));
    }

    /// The member of layer_dynamics_class(h) equal to the truth.
    Predictor layer_dynamics_truth(std::size_t h) const {
        const FeatureMap fm = layer_dynamics_class(h).features();
        std::vector<double> w(fm.dim(), 0.0);
        const std::size_t k = fm.block_width();
        const std::size_t next = layout_.layer_size(h + 1);
        for (std::size_t s = 0; s < layout_.layer_size(h); ++s)
            for (std::size_t a = 0; a < layout_.num_actions(); ++a) {
                const std::size_t c = cell(h, s, a);
                for (std::size_t n = 0; n < next; ++n) {
                    const std::size_t off = ((s * layout_.num_actions() + a) * next + n) * k;
                    const double u = eta_ / static_cast<double>(next);
                    if (spec_.dynamics_family == DynamicsFamily::ContextFreeRandom) {
                        w[off] = u + (1.0 - eta_) * p0_[c][n];
                        continue;
                    }
                    const double mid = 0.5 * (p0_[c][n] + p1_[c][n]);
                    const double half_gap = 0.5 * (p0_[c][n] - p1_[c][n]);
                    w[off] = u + (1.0 - eta_) * mid;
                    for (std::size_t j = 0; j < spec_.context_dim; ++j) w[off + 1 + j] = (1.0 - eta_) * half_gap * v_[h][j];
                }
            }
        return Predictor::linear(fm, std::move(w));
    }

    /// Truth f_{s,a} as a function of the context vector.
    double true_reward(std::size_t h, std::size_t s, std::size_t a, std::span<const double> c) const {
        return rewards_[cell(h, s, a)](c);
    }

    /// The two mixture endpoints (P0, P1) of a row, before uniform mixing.
    std::pair<std::vector<double>, std::vector<double>> endpoints(std::size_t h, std::size_t s, std::size_t a) const {
        return {p0_.at(cell(h, s, a)), p1_.at(cell(h, s, a))};
    }

    /// Model for an arbitrary context vector on the unit sphere.
    LayeredMdp build(std::span<const double> c) const { return build_with_eta(c, eta_); }

private:
    EnvHandle() = default;

    std::size_t cell(std::size_t h, std::size_t s, std::size_t a) const {
        return (offsets_.at(h) + s) * layout_.num_actions() + a;
    }

    double lambda(std::size_t h, std::span<const double> c) const {
        double dot = 0.0;
        for (std::size_t j = 0; j < spec_.context_dim; ++j) dot += v_[h][j] * c[j];
        return 0.5 + 0.5 * dot;
    }

    LayeredMdp build_with_eta(std::span<const double> c, double eta) const {
        LayeredMdp m(layout_);
        for (std::size_t h = 0; h < layout_.horizon(); ++h) {
            const std::size_t next = layout_.layer_size(h + 1);
            const double lam = spec_.dynamics_family == DynamicsFamily::ContextFreeRandom ? 1.0 : lambda(h, c);
            std::vector<double> row(next);
            for (std::size_t s = 0; s < layout_.layer_size(h); ++s)
                for (std::size_t a = 0; a < layout_.num_actions(); ++a) {
                    const std::size_t k = cell(h, s, a);
                    for (std::size_t n = 0; n < next; ++n) {
                        const double mix = spec_.dynamics_family == DynamicsFamily::ContextFreeRandom
                                               ? p0_[k][n]
                                               : lam * p0_[k][n] + (1.0 - lam) * p1_[k][n];
                        row[n] = eta / static_cast<double>(next) + (1.0 - eta) * mix;
                    }
                    m.set_transition(h, s, a, row);
                    m.set_reward(h, s, a, clip01(rewards_[k](c)));
                }
        }
        return m;
    }

    double min_reach(const std::vector<std::vector<double>>& probes, double eta) const {
        double worst = 1.0;
        for (const auto& c : probes) {
            const LayeredMdp m = build_with_eta(c, eta);
            for (std::size_t h = 1; h <= layout_.horizon(); ++h)
                for (std::size_t s = 0; s < layout_.layer_size(h); ++s) worst = std::min(worst, ffp(m, h, s).prob);
        }
        return worst;
    }

    GenSpec spec_;
    Layout layout_;
    std::vector<std::size_t> offsets_;
    std::vector<detail::AffineReward> rewards_;
    std::vector<FunctionClass> finite_classes_;
    std::vector<std::vector<double>> p0_, p1_;
    std::vector<std::vector<double>> v_;
    double eta_ = 0.0;
    Cmdp cmdp_;
};

inline std::shared_ptr<const EnvHandle> EnvHandle::generate(const GenSpec& spec) {
    spec.validate();
    std::shared_ptr<EnvHandle> env(new EnvHandle());
    env->spec_ = spec;
    env->layout_ = Layout(spec.layer_sizes, spec.num_actions);
    const Layout& L = env->layout_;
    const std::size_t d = spec.context_dim;
    Rng rng(derive_seed(spec.seed, 0, 0x67656e));

    std::size_t rows = 0;
    for (std::size_t h = 0; h < L.horizon(); ++h) {
        env->offsets_.push_back(rows);
        rows += L.layer_size(h);
    }
    const std::size_t cells = rows * L.num_actions();

    for (std::size_t h = 0; h < L.horizon(); ++h) {
        for (std::size_t s = 0; s < L.layer_size(h); ++s)
            for (std::size_t a = 0; a < L.num_actions(); ++a) {
                env->p0_.push_back(detail::dirichlet_row(rng, L.layer_size(h + 1)));
                env->p1_.push_back(detail::dirichlet_row(rng, L.layer_size(h + 1)));
            }
        if (spec.planted_endpoints) {
            std::vector<double> e1(d, 0.0);
            e1[0] = 1.0;
            env->v_.push_back(e1);
        } else {
            auto v = detail::unit_vector(rng, d);
            const double scale = uniform01(rng);
            for (auto& x : v) x *= scale;
            env->v_.push_back(v);
        }
    }

    if (spec.reward_family == RewardFamily::LinearClipped) {
        for (std::size_t k = 0; k < cells; ++k) env->rewards_.push_back(detail::AffineReward::draw(rng, d));
    } else {
        for (std::size_t k = 0; k < cells; ++k) {
            std::vector<detail::AffineReward> members;
            std::vector<FunctionClass::Member> fns;
            for (std::size_t i = 0; i < spec.finite_class_size; ++i) members.push_back(detail::AffineReward::draw(rng, d));
            const std::size_t truth = uniform_index(rng, members.size());
            env->rewards_.push_back(members[truth]);
            for (const auto& m : members) fns.push_back([m](std::span<const double> c) { return m(c); });
            env->finite_classes_.push_back(FunctionClass::finite(std::move(fns), d));
        }
    }

    std::vector<Context> contexts;
    for (std::size_t i = 0; i < spec.num_contexts; ++i) contexts.push_back({i, detail::unit_vector(rng, d)});
    if (spec.planted_endpoints) {
        contexts[0].x.assign(d, 0.0);
        contexts[0].x[0] = 1.0;
        contexts[1].x.assign(d, 0.0);
        contexts[1].x[0] = -1.0;
    }

    // Probe set for the reachability floor: the contexts themselves, or for a
    // continuous space a fixed sample of the sphere.
    std::vector<std::vector<double>> probes;
    if (spec.num_contexts > 0) {
        for (const auto& c : contexts) probes.push_back(c.x);
    } else {
        Rng probe_rng(derive_seed(spec.seed, 1, 0x67656e));
        for (int i = 0; i < 64; ++i) probes.push_back(detail::unit_vector(probe_rng, d));
    }
    if (spec.dynamics_family == DynamicsFamily::ContextFreeRandom) probes.resize(1);

    if (spec.reachability_floor > 0.0) {
        const double floor = spec.reachability_floor;
        if (env->min_reach(probes, 1.0) < floor - 1e-12)
            throw InfeasibleSpec("reachability floor " + std::to_string(floor) + " is unattainable even with uniform rows");
        if (env->min_reach(probes, 0.0) >= floor) {
            env->eta_ = 0.0;
        } else {
            double lo = 0.0, hi = 1.0;
            for (int it = 0; it < 50; ++it) {
                const double mid = 0.5 * (lo + hi);
                (env->min_reach(probes, mid) >= floor ? hi : lo) = mid;
            }
            env->eta_ = hi;
        }
    }

    std::shared_ptr<const EnvHandle> self = env;
    const bool context_free = spec.dynamics_family == DynamicsFamily::ContextFreeRandom;
    if (spec.num_contexts > 0) {
        std::vector<double> probs = spec.context_probs;
        if (probs.empty()) probs.assign(spec.num_contexts, 1.0 / static_cast<double>(spec.num_contexts));
        std::vector<std::shared_ptr<const LayeredMdp>> mdps;
        for (const auto& c : contexts) mdps.push_back(std::make_shared<const LayeredMdp>(env->build(c.x)));
        env->cmdp_ = Cmdp(L, contexts, probs, mdps, context_free, spec.noise);
    } else {
        const EnvHandle* raw = env.get();
        env->cmdp_ = Cmdp(
            L, d, [d](Rng& r) { return Context{kNoContextId, detail::unit_vector(r, d)}; },
            [raw](const Context& c) { return std::make_shared<const LayeredMdp>(raw->build(c.x)); }, context_free,
            spec.noise);
    }
    return self;
}

/**
The learner's view of an environment. Counts episodes; each episode
reveals its context and may be played once.
*/
class EnvSession : public EpisodeSource {
public:
    explicit EnvSession(std::shared_ptr<const EnvHandle> env) : env_(std::move(env)) {}

    const Layout& layout() const override { return env_->layout(); }

    Context begin_episode(Rng& rng) override {
        current_ = env_->cmdp().sample_context(rng);
        played_ = false;
        ++episodes_;
        return current_;
    }

    Trajectory play(const Policy& pi, Rng& rng) override {
        if (episodes_ == 0 || played_) throw InvalidParameter("play() needs a fresh episode");
        played_ = true;
        ++played_count_;
        return sample_trajectory(env_->cmdp(), current_, pi, rng);
    }

    std::uint64_t episodes() const override { return episodes_; }
    std::uint64_t played() const { return played_count_; }

private:
    std::shared_ptr<const EnvHandle> env_;
    Context current_;
    bool played_ = true;
    std::uint64_t episodes_ = 0;
    std::uint64_t played_count_ = 0;
};

/// Known-dynamics capability of an environment: reward-free skeletons.
class EnvDynamicsOracle : public DynamicsOracle {
public:
    explicit EnvDynamicsOracle(std::shared_ptr<const EnvHandle> env) : env_(std::move(env)) {
        const Cmdp& c = env_->cmdp();
        if (c.is_finite())
            for (const auto& ctx : c.contexts()) cache_.push_back(std::make_shared<const LayeredMdp>(c.mdp_of(ctx)->skeleton()));
    }

    std::shared_ptr<const LayeredMdp> dynamics(const Context& c) const override {
        if (c.id != kNoContextId && c.id < cache_.size()) return cache_[c.id];
        return std::make_shared<const LayeredMdp>(env_->cmdp().mdp_of(c)->skeleton());
    }

    bool context_free() const override { return env_->cmdp().context_free_dynamics(); }

    std::shared_ptr<const LayeredMdp> shared_dynamics() const override {
        if (!context_free()) throw InvalidParameter("dynamics depend on the context");
        if (!cache_.empty()) return cache_.front();
        const std::vector<double> probe(env_->spec().context_dim, 0.0);
        return std::make_shared<const LayeredMdp>(env_->build(probe).skeleton());
    }

private:
    std::shared_ptr<const EnvHandle> env_;
    std::vector<std::shared_ptr<const LayeredMdp>> cache_;
};

/// The dynamics capability, present only when the spec declares known dynamics.
inline std::unique_ptr<DynamicsOracle> dynamics_oracle(const std::shared_ptr<const EnvHandle>& env) {
    if (!env->spec().known_dynamics) return nullptr;
    return std::make_unique<EnvDynamicsOracle>(env);
}

inline std::shared_ptr<const EnvHandle> generate(const GenSpec& spec) { return EnvHandle::generate(spec); }

/// Draw c ~ D and run pi on M(c).
inline std::pair<Context, Trajectory> episode(const EnvHandle& env, const Policy& pi, Rng& rng) {
    Context c = env.cmdp().sample_context(rng);
    Trajectory t = sample_trajectory(env.cmdp(), c, pi, rng);
    return {std::move(c), std::move(t)};
}

}  // namespace cmdp
