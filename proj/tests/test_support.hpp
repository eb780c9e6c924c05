#pragma once

#include <cstddef>
#include <memory>
#include <vector>

#include "cmdp_lab/core.hpp"

namespace cmdp::testing {

inline std::vector<double> random_simplex(Rng& rng, std::size_t n) {
    std::vector<double> v(n);
    double sum = 0.0;
    for (auto& x : v) {
        x = -std::log(1.0 - uniform01(rng));
        sum += x;
    }
    for (auto& x : v) x /= sum;
    return v;
}

inline LayeredMdp random_mdp(Rng& rng, const std::vector<std::size_t>& sizes, std::size_t actions) {
    LayeredMdp m(Layout(sizes, actions));
    for (std::size_t h = 0; h + 1 < sizes.size(); ++h)
        for (std::size_t s = 0; s < sizes[h]; ++s)
            for (std::size_t a = 0; a < actions; ++a) {
                m.set_transition(h, s, a, random_simplex(rng, sizes[h + 1]));
                m.set_reward(h, s, a, uniform01(rng));
            }
    return m;
}

/// Random layer sizes with |S_0| = 1 and 1 <= |S_h| <= max_size.
inline std::vector<std::size_t> random_sizes(Rng& rng, std::size_t horizon, std::size_t max_size) {
    std::vector<std::size_t> sizes{1};
    for (std::size_t h = 1; h <= horizon; ++h) sizes.push_back(1 + uniform_index(rng, max_size));
    return sizes;
}

inline Policy random_policy(Rng& rng, const Layout& L, bool deterministic = false) {
    Policy pi(L);
    for (std::size_t h = 0; h < L.horizon(); ++h)
        for (std::size_t s = 0; s < L.layer_size(h); ++s) {
            if (deterministic)
                pi.set_action(h, s, uniform_index(rng, L.num_actions()));
            else
                pi.set_row(h, s, random_simplex(rng, L.num_actions()));
        }
    return pi;
}

/// Copy of `m` whose rows are moved by at most `gamma` in L1 each.
inline LayeredMdp perturb(Rng& rng, const LayeredMdp& m, double gamma) {
    LayeredMdp out(m);
    const Layout& L = m.layout();
    for (std::size_t h = 0; h < L.horizon(); ++h)
        for (std::size_t s = 0; s < L.layer_size(h); ++s)
            for (std::size_t a = 0; a < L.num_actions(); ++a) {
                const auto row = m.transition(h, s, a);
                const auto other = random_simplex(rng, row.size());
                // (1-t) row + t other moves at most 2t in L1.
                const double t = 0.5 * gamma * uniform01(rng);
                auto dst = out.mutable_row(h, s, a);
                for (std::size_t n = 0; n < row.size(); ++n) dst[n] = (1.0 - t) * row[n] + t * other[n];
            }
    return out;
}

/// Finite CMDP with the given per-context models and uniform distribution.
inline Cmdp finite_cmdp(std::vector<LayeredMdp> models, std::vector<std::vector<double>> xs, bool context_free,
                        RewardNoise noise = {}) {
    std::vector<Context> contexts;
    std::vector<double> probs;
    std::vector<std::shared_ptr<const LayeredMdp>> mdps;
    for (std::size_t i = 0; i < models.size(); ++i) {
        contexts.push_back({i, xs[i]});
        probs.push_back(1.0 / static_cast<double>(models.size()));
        mdps.push_back(std::make_shared<const LayeredMdp>(models[i]));
    }
    const Layout L = models.front().layout();
    return Cmdp(L, contexts, probs, mdps, context_free, noise);
}

}  // namespace cmdp::testing

namespace cmdp::testing {

/// EpisodeSource and DynamicsOracle over an explicit finite CMDP.
class CmdpSession : public EpisodeSource, public DynamicsOracle {
public:
    explicit CmdpSession(const Cmdp& cmdp) : cmdp_(cmdp) {}

    const Layout& layout() const override { return cmdp_.layout(); }
    Context begin_episode(Rng& rng) override {
        current_ = cmdp_.sample_context(rng);
        ++episodes_;
        return current_;
    }
    Trajectory play(const Policy& pi, Rng& rng) override { return sample_trajectory(cmdp_, current_, pi, rng); }
    std::uint64_t episodes() const override { return episodes_; }

    std::shared_ptr<const LayeredMdp> dynamics(const Context& c) const override {
        return std::make_shared<const LayeredMdp>(cmdp_.mdp_of(c)->skeleton());
    }
    bool context_free() const override { return cmdp_.context_free_dynamics(); }
    std::shared_ptr<const LayeredMdp> shared_dynamics() const override { return dynamics(cmdp_.contexts().front()); }

private:
    const Cmdp& cmdp_;
    Context current_;
    std::uint64_t episodes_ = 0;
};

}  // namespace cmdp::testing
