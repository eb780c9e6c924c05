#pragma once

#include <cstddef>
#include <vector>

#include "core.hpp"

namespace cmdp {

struct PlanResult {
    Policy policy;
    /// V*(s_0).
    double value = 0.0;
    /// V*_h(s) for h = 0..H.
    std::vector<std::vector<double>> values;
};

namespace detail {

/**
Backward induction from layer `last` down to 0, with V_last given by
`terminal`. Rows in layers >= last keep action 0. Ties go to the lowest
action index.
*/
template <class RewardFn>
PlanResult backward_induction(const LayeredMdp& m, std::size_t last, std::vector<double> terminal,
                              RewardFn&& reward) {
    const Layout& L = m.layout();
    PlanResult out;
    out.policy = Policy(L);
    out.values.resize(L.horizon() + 1);
    for (std::size_t h = last + 1; h <= L.horizon(); ++h) out.values[h].assign(L.layer_size(h), 0.0);
    out.values[last] = std::move(terminal);
    for (std::size_t h = last; h-- > 0;) {
        const auto& next = out.values[h + 1];
        auto& cur = out.values[h];
        cur.assign(L.layer_size(h), 0.0);
        for (std::size_t s = 0; s < L.layer_size(h); ++s) {
            double best = 0.0;
            std::size_t best_a = 0;
            for (std::size_t a = 0; a < L.num_actions(); ++a) {
                const auto row = m.transition(h, s, a);
                double q = reward(h, s, a);
                for (std::size_t n = 0; n < row.size(); ++n) q += row[n] * next[n];
                if (a == 0 || q > best) {
                    best = q;
                    best_a = a;
                }
            }
            cur[s] = best;
            out.policy.set_action(h, s, best_a);
        }
    }
    out.value = out.values[0][0];
    return out;
}

}  // namespace detail

/// Optimal deterministic policy of a layered MDP by backward induction.
inline PlanResult plan(const LayeredMdp& m) {
    const Layout& L = m.layout();
    return detail::backward_induction(m, L.horizon(), std::vector<double>(L.layer_size(L.horizon()), 0.0),
                                      [&m](std::size_t h, std::size_t s, std::size_t a) { return m.reward(h, s, a); });
}

struct ReachResult {
    Policy policy;
    /// max over policies of q_h(target).
    double prob = 0.0;
};

/**
Fastest policy to a target: plan with reward 1 at the target (any action)
and 0 elsewhere, so the value is the largest visit probability. Rewards
of the input model are ignored. Layers after the target layer carry zero
reward and keep action 0.
*/
inline ReachResult ffp(const LayeredMdp& skeleton, std::size_t h, std::size_t target) {
    const Layout& L = skeleton.layout();
    if (h > L.horizon() || target >= L.layer_size(h))
        throw UnknownState("no state " + std::to_string(target) + " in layer " + std::to_string(h));
    if (h == 0) return {Policy(L), 1.0};
    std::vector<double> terminal(L.layer_size(h), 0.0);
    terminal[target] = 1.0;
    auto r = detail::backward_induction(skeleton, h, std::move(terminal),
                                        [](std::size_t, std::size_t, std::size_t) { return 0.0; });
    return {std::move(r.policy), r.value};
}

/// FFP for every state of layers 0..H-1: result[h][s].
inline std::vector<std::vector<ReachResult>> pap(const LayeredMdp& skeleton) {
    const Layout& L = skeleton.layout();
    std::vector<std::vector<ReachResult>> out(L.horizon());
    for (std::size_t h = 0; h < L.horizon(); ++h)
        for (std::size_t s = 0; s < L.layer_size(h); ++s) out[h].push_back(ffp(skeleton, h, s));
    return out;
}

}  // namespace cmdp
