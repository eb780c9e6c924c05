#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "errors.hpp"
#include "rng.hpp"

namespace cmdp {

/// Tolerance for validating probability rows and occupancy sums.
inline constexpr double kProbTol = 1e-9;
/// Tolerance used when renormalizing rows built internally.
inline constexpr double kRenormTol = 1e-12;

/**
Shape shared by every MDP of a CMDP: the sizes of layers S_0..S_H and the
number of actions. States are addressed as (layer, index within layer).

An approximated model adds a sink. The sink is stored as one extra state at
the end of every layer h >= 1, chained sink_h -> sink_{h+1} with probability
one, which keeps the augmented model layered.
*/
class Layout {
public:
    Layout() = default;

    Layout(std::vector<std::size_t> layer_sizes, std::size_t num_actions, bool has_sink = false)
        : sizes_(std::move(layer_sizes)), actions_(num_actions), sink_(has_sink) {
        if (sizes_.size() < 2) throw LayerViolation("a layered MDP needs at least two layers (H >= 1)");
        if (sizes_[0] != 1) throw LayerViolation("layer 0 must contain exactly the start state");
        if (actions_ == 0) throw LayerViolation("the action set is empty");
        for (std::size_t h = 1; h < sizes_.size(); ++h)
            if (sizes_[h] == 0) throw LayerViolation("layer " + std::to_string(h) + " is empty");
    }

    std::size_t horizon() const { return sizes_.size() - 1; }
    std::size_t num_actions() const { return actions_; }
    std::size_t layer_size(std::size_t h) const { return sizes_.at(h); }
    const std::vector<std::size_t>& layer_sizes() const { return sizes_; }
    bool has_sink() const { return sink_; }

    std::size_t num_states() const { return std::accumulate(sizes_.begin(), sizes_.end(), std::size_t{0}); }

    /// Index of the sink in layer h, if the layout has one there.
    std::optional<std::size_t> sink(std::size_t h) const {
        if (!sink_ || h == 0) return std::nullopt;
        return sizes_.at(h) - 1;
    }

    /// Size of layer h without the sink.
    std::size_t true_layer_size(std::size_t h) const { return sink(h) ? sizes_.at(h) - 1 : sizes_.at(h); }

    /// The layout of the underlying model (sink removed).
    Layout without_sink() const {
        if (!sink_) return *this;
        std::vector<std::size_t> sizes(sizes_);
        for (std::size_t h = 1; h < sizes.size(); ++h) --sizes[h];
        return Layout(std::move(sizes), actions_, false);
    }

    Layout with_sink() const {
        if (sink_) return *this;
        std::vector<std::size_t> sizes(sizes_);
        for (std::size_t h = 1; h < sizes.size(); ++h) ++sizes[h];
        return Layout(std::move(sizes), actions_, true);
    }

    bool operator==(const Layout&) const = default;

private:
    std::vector<std::size_t> sizes_;
    std::size_t actions_ = 0;
    bool sink_ = false;
};

/**
A finite-horizon layered MDP: transition rows P(.|s,a) from layer h to
layer h+1 and expected rewards r(s,a) for h = 0..H-1. Layer H carries no
reward table, so r(s_H, a) = 0 holds by construction.

A freshly constructed model sends every row to state 0 of the next layer
and has zero rewards.
*/
class LayeredMdp {
public:
    LayeredMdp() = default;

    explicit LayeredMdp(Layout layout) : layout_(std::move(layout)) {
        const std::size_t H = layout_.horizon();
        const std::size_t A = layout_.num_actions();
        row_offset_.resize(H + 1, 0);
        reward_offset_.resize(H + 1, 0);
        std::size_t rows = 0;
        std::size_t cells = 0;
        for (std::size_t h = 0; h < H; ++h) {
            row_offset_[h] = cells;
            reward_offset_[h] = rows;
            rows += layout_.layer_size(h) * A;
            cells += layout_.layer_size(h) * A * layout_.layer_size(h + 1);
        }
        row_offset_[H] = cells;
        reward_offset_[H] = rows;
        transitions_.assign(cells, 0.0);
        rewards_.assign(rows, 0.0);
        for (std::size_t h = 0; h < H; ++h)
            for (std::size_t s = 0; s < layout_.layer_size(h); ++s)
                for (std::size_t a = 0; a < A; ++a) mutable_row(h, s, a)[0] = 1.0;
    }

    const Layout& layout() const { return layout_; }
    std::size_t horizon() const { return layout_.horizon(); }
    std::size_t num_actions() const { return layout_.num_actions(); }
    std::size_t layer_size(std::size_t h) const { return layout_.layer_size(h); }

    std::span<const double> transition(std::size_t h, std::size_t s, std::size_t a) const {
        check(h, s, a);
        return {transitions_.data() + cell(h, s, a), layout_.layer_size(h + 1)};
    }

    double transition(std::size_t h, std::size_t s, std::size_t a, std::size_t next) const {
        return transition(h, s, a)[next];
    }

    double reward(std::size_t h, std::size_t s, std::size_t a) const {
        check(h, s, a);
        return rewards_[reward_offset_[h] + s * layout_.num_actions() + a];
    }

    /// Replaces a transition row. The row must cover exactly layer h+1.
    void set_transition(std::size_t h, std::size_t s, std::size_t a, std::span<const double> row) {
        check(h, s, a);
        if (row.size() != layout_.layer_size(h + 1))
            throw LayerViolation("row for " + where_hsa(h, s, a) + " has " + std::to_string(row.size()) +
                                 " entries, layer " + std::to_string(h + 1) + " has " +
                                 std::to_string(layout_.layer_size(h + 1)) + " states");
        std::copy(row.begin(), row.end(), mutable_row(h, s, a).begin());
    }

    void set_reward(std::size_t h, std::size_t s, std::size_t a, double r) {
        check(h, s, a);
        rewards_[reward_offset_[h] + s * layout_.num_actions() + a] = r;
    }

    std::span<double> mutable_row(std::size_t h, std::size_t s, std::size_t a) {
        check(h, s, a);
        return {transitions_.data() + cell(h, s, a), layout_.layer_size(h + 1)};
    }

    /// Same dynamics, all rewards zero. This is what a known-dynamics oracle
    /// hands to a learner.
    LayeredMdp skeleton() const {
        LayeredMdp copy(*this);
        std::fill(copy.rewards_.begin(), copy.rewards_.end(), 0.0);
        return copy;
    }

    bool same_dynamics(const LayeredMdp& other, double tol = 0.0) const {
        if (!(layout_ == other.layout_)) return false;
        for (std::size_t i = 0; i < transitions_.size(); ++i)
            if (std::abs(transitions_[i] - other.transitions_[i]) > tol) return false;
        return true;
    }

private:
    void check(std::size_t h, std::size_t s, std::size_t a) const {
        if (h >= layout_.horizon() || s >= layout_.layer_size(h) || a >= layout_.num_actions())
            throw LayerViolation("no decision state-action " + where_hsa(h, s, a));
    }

    std::size_t cell(std::size_t h, std::size_t s, std::size_t a) const {
        return row_offset_[h] + (s * layout_.num_actions() + a) * layout_.layer_size(h + 1);
    }

    Layout layout_;
    std::vector<std::size_t> row_offset_;
    std::vector<std::size_t> reward_offset_;
    std::vector<double> transitions_;
    std::vector<double> rewards_;
};

/// Checks the LayeredMdp invariants. Returns the model unchanged when they hold.
inline const LayeredMdp& validate_mdp(const LayeredMdp& m) {
    const Layout& L = m.layout();
    for (std::size_t h = 0; h < L.horizon(); ++h) {
        for (std::size_t s = 0; s < L.layer_size(h); ++s) {
            for (std::size_t a = 0; a < L.num_actions(); ++a) {
                const auto row = m.transition(h, s, a);
                if (row.size() != L.layer_size(h + 1))
                    throw LayerViolation("row length mismatch at " + where_hsa(h, s, a));
                double sum = 0.0;
                for (double p : row) {
                    if (!(p >= -kProbTol) || !std::isfinite(p))
                        throw RowNotStochastic("negative or non-finite probability at " + where_hsa(h, s, a));
                    sum += p;
                }
                if (std::abs(sum - 1.0) > kProbTol)
                    throw RowNotStochastic("row " + where_hsa(h, s, a) + " sums to " + std::to_string(sum));
                const double r = m.reward(h, s, a);
                if (!(r >= 0.0 && r <= 1.0))
                    throw RewardOutOfRange("reward " + std::to_string(r) + " at " + where_hsa(h, s, a));
            }
        }
    }
    return m;
}

/**
Map (layer, state) -> distribution over actions, defined on layers
0..H-1. Deterministic policies are rows with a single 1.
*/
class Policy {
public:
    Policy() = default;

    /// Deterministic policy playing action 0 everywhere.
    explicit Policy(const Layout& layout) : sizes_(layout.layer_sizes()), actions_(layout.num_actions()) {
        offsets_.resize(sizes_.size(), 0);
        std::size_t n = 0;
        for (std::size_t h = 0; h + 1 < sizes_.size(); ++h) {
            offsets_[h] = n;
            n += sizes_[h] * actions_;
        }
        offsets_.back() = n;
        probs_.assign(n, 0.0);
        for (std::size_t h = 0; h + 1 < sizes_.size(); ++h)
            for (std::size_t s = 0; s < sizes_[h]; ++s) probs_[offsets_[h] + s * actions_] = 1.0;
    }

    static Policy uniform(const Layout& layout) {
        Policy p(layout);
        std::fill(p.probs_.begin(), p.probs_.end(), 1.0 / static_cast<double>(layout.num_actions()));
        return p;
    }

    std::size_t horizon() const { return sizes_.size() - 1; }
    std::size_t num_actions() const { return actions_; }
    std::size_t layer_size(std::size_t h) const { return sizes_.at(h); }

    std::span<const double> row(std::size_t h, std::size_t s) const {
        check(h, s);
        return {probs_.data() + offsets_[h] + s * actions_, actions_};
    }

    double prob(std::size_t h, std::size_t s, std::size_t a) const { return row(h, s)[a]; }

    void set_action(std::size_t h, std::size_t s, std::size_t a) {
        check(h, s);
        if (a >= actions_) throw InvalidParameter("action index out of range");
        double* r = probs_.data() + offsets_[h] + s * actions_;
        std::fill(r, r + actions_, 0.0);
        r[a] = 1.0;
    }

    void set_row(std::size_t h, std::size_t s, std::span<const double> dist) {
        check(h, s);
        if (dist.size() != actions_) throw LengthMismatch("policy row has wrong length");
        double sum = 0.0;
        for (double p : dist) {
            if (p < 0.0) throw RowNotStochastic("negative action probability");
            sum += p;
        }
        if (std::abs(sum - 1.0) > kProbTol) throw RowNotStochastic("policy row does not sum to 1");
        std::copy(dist.begin(), dist.end(), probs_.begin() + static_cast<std::ptrdiff_t>(offsets_[h] + s * actions_));
    }

    /// The action of a deterministic row, nullopt for a mixed row.
    std::optional<std::size_t> action(std::size_t h, std::size_t s) const {
        const auto r = row(h, s);
        for (std::size_t a = 0; a < actions_; ++a)
            if (r[a] == 1.0) return a;
        return std::nullopt;
    }

    std::size_t sample(std::size_t h, std::size_t s, Rng& rng) const {
        if (auto a = action(h, s)) return *a;
        return sample_categorical(row(h, s), rng);
    }

    /// Drops rows for states outside `layout` (the sink of an augmented model).
    Policy restricted_to(const Layout& layout) const {
        if (layout.horizon() != horizon() || layout.num_actions() != actions_)
            throw LengthMismatch("cannot restrict a policy to a layout of a different shape");
        Policy out(layout);
        for (std::size_t h = 0; h < horizon(); ++h)
            for (std::size_t s = 0; s < layout.layer_size(h); ++s) out.set_row(h, s, row(h, s));
        return out;
    }

    /// Extends to a sink-augmented layout; sink rows play action 0.
    Policy extended_to(const Layout& layout) const {
        Policy out(layout);
        for (std::size_t h = 0; h < horizon(); ++h)
            for (std::size_t s = 0; s < std::min(layout.layer_size(h), sizes_[h]); ++s) out.set_row(h, s, row(h, s));
        return out;
    }

    bool operator==(const Policy&) const = default;

private:
    void check(std::size_t h, std::size_t s) const {
        if (h + 1 >= sizes_.size() || s >= sizes_[h])
            throw UnknownState("policy has no row for (h=" + std::to_string(h) + ",s=" + std::to_string(s) + ")");
    }

    std::vector<std::size_t> sizes_;
    std::size_t actions_ = 0;
    std::vector<std::size_t> offsets_;
    std::vector<double> probs_;
};

/// Identifier used for contexts drawn from a continuous space.
inline constexpr std::size_t kNoContextId = std::numeric_limits<std::size_t>::max();

struct Context {
    std::size_t id = kNoContextId;
    std::vector<double> x;

    bool operator==(const Context&) const = default;
};

/// Per-layer visit probabilities q_h(.) for h = 0..H.
struct OccupancyTable {
    std::vector<std::vector<double>> layers;

    std::span<const double> layer(std::size_t h) const { return layers.at(h); }
    double at(std::size_t h, std::size_t s) const { return layers.at(h).at(s); }
};

/// Exact forward recursion q_{h+1}(s') = sum_{s,a} q_h(s) pi(a|s) P(s'|s,a).
inline OccupancyTable occupancy(const LayeredMdp& m, const Policy& pi) {
    const Layout& L = m.layout();
    OccupancyTable q;
    q.layers.resize(L.horizon() + 1);
    q.layers[0].assign(L.layer_size(0), 0.0);
    q.layers[0][0] = 1.0;
    for (std::size_t h = 0; h < L.horizon(); ++h) {
        auto& next = q.layers[h + 1];
        next.assign(L.layer_size(h + 1), 0.0);
        for (std::size_t s = 0; s < L.layer_size(h); ++s) {
            const double qs = q.layers[h][s];
            if (qs == 0.0) continue;
            const auto act = pi.row(h, s);
            for (std::size_t a = 0; a < L.num_actions(); ++a) {
                const double w = qs * act[a];
                if (w == 0.0) continue;
                const auto row = m.transition(h, s, a);
                for (std::size_t n = 0; n < row.size(); ++n) next[n] += w * row[n];
            }
        }
    }
    return q;
}

/// V^pi(s_0) as sum_h sum_{s,a} q_h(s) pi(a|s) r(s,a).
inline double policy_value(const LayeredMdp& m, const Policy& pi) {
    const auto q = occupancy(m, pi);
    double v = 0.0;
    for (std::size_t h = 0; h < m.horizon(); ++h)
        for (std::size_t s = 0; s < m.layer_size(h); ++s) {
            const auto act = pi.row(h, s);
            for (std::size_t a = 0; a < m.num_actions(); ++a) v += q.layers[h][s] * act[a] * m.reward(h, s, a);
        }
    return v;
}

/// Sum_i |p_i - q_i|. Not halved.
inline double tv_distance(std::span<const double> p, std::span<const double> q) {
    if (p.size() != q.size())
        throw LengthMismatch("tv_distance on vectors of length " + std::to_string(p.size()) + " and " +
                             std::to_string(q.size()));
    double d = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) d += std::abs(p[i] - q[i]);
    return d;
}

/**
Realized-reward model. Every kind returns values in [0,1] with mean r.
  - bernoulli: R ~ Bernoulli(r)
  - none: R = r
  - uniform: R ~ U[r - w, r + w] with w = min(r, 1 - r)
*/
struct RewardNoise {
    enum class Kind { Bernoulli, None, Uniform };
    Kind kind = Kind::Bernoulli;

    double sample(double mean, Rng& rng) const {
        switch (kind) {
            case Kind::None: return mean;
            case Kind::Uniform: {
                const double w = std::min(mean, 1.0 - mean);
                return mean + w * (2.0 * uniform01(rng) - 1.0);
            }
            case Kind::Bernoulli:
            default: return bernoulli(rng, mean) ? 1.0 : 0.0;
        }
    }

    static RewardNoise parse(const std::string& name) {
        if (name == "bernoulli") return {Kind::Bernoulli};
        if (name == "none") return {Kind::None};
        if (name == "uniform") return {Kind::Uniform};
        throw InvalidParameter("unknown reward noise model '" + name + "'");
    }

    std::string name() const {
        switch (kind) {
            case Kind::None: return "none";
            case Kind::Uniform: return "uniform";
            case Kind::Bernoulli:
            default: return "bernoulli";
        }
    }
};

/// (s_0,a_0,r_0,...,s_{H-1},a_{H-1},r_{H-1},s_H) together with its context.
struct Trajectory {
    Context context;
    std::vector<std::size_t> states;   // H+1 entries
    std::vector<std::size_t> actions;  // H entries
    std::vector<double> rewards;       // H entries

    std::size_t horizon() const { return actions.size(); }

    /// True when the trajectory passes through state s of layer h.
    bool visits(std::size_t h, std::size_t s) const { return h < states.size() && states[h] == s; }
};

/// Simulates one episode on a single MDP.
inline Trajectory simulate(const LayeredMdp& m, const Policy& pi, const RewardNoise& noise, Rng& rng) {
    Trajectory t;
    const std::size_t H = m.horizon();
    t.states.reserve(H + 1);
    t.actions.reserve(H);
    t.rewards.reserve(H);
    std::size_t s = 0;
    t.states.push_back(s);
    for (std::size_t h = 0; h < H; ++h) {
        const std::size_t a = pi.sample(h, s, rng);
        t.actions.push_back(a);
        t.rewards.push_back(noise.sample(m.reward(h, s, a), rng));
        s = sample_categorical(m.transition(h, s, a), rng);
        t.states.push_back(s);
    }
    return t;
}

/**
Contextual MDP: a context space with distribution D and the map
c -> M(c). All per-context MDPs share one Layout.

Finite context spaces are stored explicitly (contexts, probabilities, one
MDP each). Continuous spaces are given by a sampler and a model function
evaluated on demand.
*/
class Cmdp {
public:
    using Sampler = std::function<Context(Rng&)>;
    using ModelFn = std::function<std::shared_ptr<const LayeredMdp>(const Context&)>;

    Cmdp() = default;

    Cmdp(Layout layout, std::vector<Context> contexts, std::vector<double> probs,
         std::vector<std::shared_ptr<const LayeredMdp>> mdps, bool context_free_dynamics,
         RewardNoise noise = {})
        : layout_(std::move(layout)), contexts_(std::move(contexts)), probs_(std::move(probs)),
          mdps_(std::move(mdps)), context_free_(context_free_dynamics), noise_(noise) {
        if (contexts_.empty()) throw InvalidParameter("a finite CMDP needs at least one context");
        if (contexts_.size() != probs_.size() || contexts_.size() != mdps_.size())
            throw LengthMismatch("contexts, probabilities and models differ in length");
        dim_ = contexts_.front().x.size();
        double sum = 0.0;
        for (std::size_t i = 0; i < contexts_.size(); ++i) {
            contexts_[i].id = i;
            if (contexts_[i].x.size() != dim_) throw LengthMismatch("context dimension differs from d'");
            if (probs_[i] < 0.0) throw RowNotStochastic("negative context probability");
            sum += probs_[i];
            if (!(mdps_[i]->layout() == layout_)) throw LayerViolation("context model has a different layout");
            validate_mdp(*mdps_[i]);
        }
        if (std::abs(sum - 1.0) > kProbTol) throw RowNotStochastic("context distribution does not sum to 1");
        cumulative_.resize(probs_.size());
        std::partial_sum(probs_.begin(), probs_.end(), cumulative_.begin());
        if (context_free_)
            for (const auto& m : mdps_)
                if (!m->same_dynamics(*mdps_.front(), kProbTol))
                    throw InvalidParameter("context_free_dynamics set but kernels differ between contexts");
    }

    Cmdp(Layout layout, std::size_t context_dim, Sampler sampler, ModelFn model, bool context_free_dynamics,
         RewardNoise noise = {})
        : layout_(std::move(layout)), dim_(context_dim), sampler_(std::move(sampler)), model_(std::move(model)),
          context_free_(context_free_dynamics), noise_(noise) {}

    const Layout& layout() const { return layout_; }
    std::size_t context_dim() const { return dim_; }
    bool is_finite() const { return !contexts_.empty(); }
    bool context_free_dynamics() const { return context_free_; }
    const RewardNoise& noise() const { return noise_; }
    const std::vector<Context>& contexts() const { return contexts_; }
    const std::vector<double>& probabilities() const { return probs_; }

    std::shared_ptr<const LayeredMdp> mdp_of(const Context& c) const {
        if (c.x.size() != dim_) throw UnknownContext("context has dimension " + std::to_string(c.x.size()));
        if (is_finite()) {
            if (c.id >= contexts_.size() || contexts_[c.id].x != c.x)
                throw UnknownContext("context is not in the finite context space");
            return mdps_[c.id];
        }
        return model_(c);
    }

    Context sample_context(Rng& rng) const {
        if (!is_finite()) return sampler_(rng);
        const double u = uniform01(rng) * cumulative_.back();
        auto it = std::upper_bound(cumulative_.begin(), cumulative_.end(), u);
        std::size_t i = static_cast<std::size_t>(it - cumulative_.begin());
        if (i >= contexts_.size()) i = contexts_.size() - 1;
        while (probs_[i] == 0.0 && i > 0) --i;
        return contexts_[i];
    }

private:
    Layout layout_;
    std::size_t dim_ = 0;
    std::vector<Context> contexts_;
    std::vector<double> probs_;
    std::vector<double> cumulative_;
    std::vector<std::shared_ptr<const LayeredMdp>> mdps_;
    Sampler sampler_;
    ModelFn model_;
    bool context_free_ = false;
    RewardNoise noise_;
};

/// One episode of M(c) under pi: a_h ~ pi, r_h ~ R^c, s_{h+1} ~ P^c.
inline Trajectory sample_trajectory(const Cmdp& cmdp, const Context& c, const Policy& pi, Rng& rng) {
    const auto m = cmdp.mdp_of(c);
    Trajectory t = simulate(*m, pi, cmdp.noise(), rng);
    t.context = c;
    return t;
}

/// Context-dependent policy, computed lazily from a context.
class PolicyMap {
public:
    using Fn = std::function<Policy(const Context&)>;

    PolicyMap() = default;
    explicit PolicyMap(Fn fn) : fn_(std::move(fn)) {}

    Policy operator()(const Context& c) const { return fn_(c); }

private:
    Fn fn_;
};

/**
What a learner sees of an environment: it can start an episode (which
reveals the context drawn from D) and then run a policy of its choice in
that episode. Nothing else about the environment is reachable through it.
*/
class EpisodeSource {
public:
    virtual ~EpisodeSource() = default;

    virtual const Layout& layout() const = 0;
    /// Starts an episode and reveals its context.
    virtual Context begin_episode(Rng& rng) = 0;
    /// Plays `pi` in the current episode. At most once per episode.
    virtual Trajectory play(const Policy& pi, Rng& rng) = 0;
    /// Episodes started so far.
    virtual std::uint64_t episodes() const = 0;
};

/// Known-dynamics capability: context -> dynamics with all rewards zeroed.
class DynamicsOracle {
public:
    virtual ~DynamicsOracle() = default;
    virtual std::shared_ptr<const LayeredMdp> dynamics(const Context& c) const = 0;
    virtual bool context_free() const = 0;
    /// The common kernel when dynamics do not depend on the context.
    virtual std::shared_ptr<const LayeredMdp> shared_dynamics() const = 0;
};

}  // namespace cmdp
