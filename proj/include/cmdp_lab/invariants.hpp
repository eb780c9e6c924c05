#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "context_dep.hpp"
#include "context_free.hpp"
#include "core.hpp"
#include "planner.hpp"
#include "verify.hpp"

// Self-contained property suites shared by `cmdp-lab verify` and the
// acceptance binary. Each returns a pass flag and a one-line summary.

namespace cmdp {

struct CheckResult {
    std::string name;
    bool passed = false;
    std::string detail;
    double seconds = 0.0;
};

namespace detail {

inline std::vector<double> random_row(Rng& rng, std::size_t n) {
    std::vector<double> v(n);
    double sum = 0.0;
    for (auto& x : v) sum += (x = -std::log(1.0 - uniform01(rng)));
    for (auto& x : v) x /= sum;
    return v;
}

inline LayeredMdp random_layered(Rng& rng, const std::vector<std::size_t>& sizes, std::size_t actions) {
    LayeredMdp m(Layout(sizes, actions));
    for (std::size_t h = 0; h + 1 < sizes.size(); ++h)
        for (std::size_t s = 0; s < sizes[h]; ++s)
            for (std::size_t a = 0; a < actions; ++a) {
                m.set_transition(h, s, a, random_row(rng, sizes[h + 1]));
                m.set_reward(h, s, a, uniform01(rng));
            }
    return m;
}

inline std::vector<std::size_t> random_layers(Rng& rng, std::size_t max_h, std::size_t max_size) {
    std::vector<std::size_t> sizes{1};
    const std::size_t H = 1 + uniform_index(rng, max_h);
    for (std::size_t h = 1; h <= H; ++h) sizes.push_back(1 + uniform_index(rng, max_size));
    return sizes;
}

template <class Fn>
CheckResult timed(const std::string& name, Fn&& body) {
    const auto start = std::chrono::steady_clock::now();
    CheckResult r = body();
    r.name = name;
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return r;
}

}  // namespace detail

/// plan() against exhaustive enumeration on random small instances.
inline CheckResult check_planner_equivalence(std::size_t instances, double tol, std::uint64_t seed) {
    return detail::timed("planner_equivalence", [&] {
        Rng rng(seed);
        double worst = 0.0;
        for (std::size_t i = 0; i < instances; ++i) {
            const auto m = detail::random_layered(rng, detail::random_layers(rng, 3, 4), 1 + uniform_index(rng, 3));
            worst = std::max(worst, std::abs(plan(m).value - brute_force_plan(m).value));
        }
        std::ostringstream d;
        d << instances << " instances, max |plan - brute force| = " << worst;
        return CheckResult{"", worst <= tol, d.str(), 0.0};
    });
}

/**
Rows of P-tilde moved by at most gamma in L1 from P; the per-layer L1 gap
of occupancies under any policy must stay within gamma*h.
*/
inline CheckResult check_occupancy_distance(std::size_t instances, const std::vector<double>& gammas, double tol,
                                         std::uint64_t seed) {
    return detail::timed("occupancy_distance", [&] {
        Rng rng(seed);
        double worst_slack = -1e300;
        std::size_t checks = 0;
        for (double gamma : gammas)
            for (std::size_t i = 0; i < instances; ++i) {
                const auto P = detail::random_layered(rng, detail::random_layers(rng, 4, 4), 1 + uniform_index(rng, 3));
                const Layout& L = P.layout();
                LayeredMdp Q(P);
                for (std::size_t h = 0; h < L.horizon(); ++h)
                    for (std::size_t s = 0; s < L.layer_size(h); ++s)
                        for (std::size_t a = 0; a < L.num_actions(); ++a) {
                            const auto row = P.transition(h, s, a);
                            const auto other = detail::random_row(rng, row.size());
                            const double t = 0.5 * gamma * uniform01(rng);
                            auto dst = Q.mutable_row(h, s, a);
                            for (std::size_t n = 0; n < row.size(); ++n) dst[n] = (1.0 - t) * row[n] + t * other[n];
                        }
                Policy pi(L);
                for (std::size_t h = 0; h < L.horizon(); ++h)
                    for (std::size_t s = 0; s < L.layer_size(h); ++s) pi.set_row(h, s, detail::random_row(rng, L.num_actions()));
                const auto q = occupancy(P, pi), qt = occupancy(Q, pi);
                for (std::size_t h = 0; h <= L.horizon(); ++h) {
                    double gap = 0.0;
                    for (std::size_t s = 0; s < L.layer_size(h); ++s) gap += std::abs(q.at(h, s) - qt.at(h, s));
                    worst_slack = std::max(worst_slack, gap - gamma * static_cast<double>(h));
                    ++checks;
                }
            }
        std::ostringstream d;
        d << checks << " layer checks, max (gap - gamma*h) = " << worst_slack;
        return CheckResult{"", worst_slack <= tol, d.str(), 0.0};
    });
}

/// Learned tabular rows from N_P(gamma, delta) samples of a random row over
/// `outcomes` next states; counts trials with L1 error <= gamma.
inline CheckResult check_tabular_guarantee(std::size_t trials, double gamma, double delta, std::size_t outcomes,
                                           double min_frequency, double min_wilson_lower, std::uint64_t seed) {
    return detail::timed("ucfd_tabular_guarantee", [&] {
        const std::size_t n = n_dynamics_tabular(gamma, delta, outcomes);
        const Layout L({1, outcomes}, 1);
        std::size_t good = 0;
        for (std::size_t t = 0; t < trials; ++t) {
            Rng rng(derive_seed(seed, t));
            const auto truth = detail::random_row(rng, outcomes);
            TransitionCounters counters(L);
            for (std::size_t i = 0; i < n; ++i) counters.record(0, 0, 0, sample_categorical(truth, rng));
            const auto model = tabular_model(L, counters, {n});
            if (tv_distance(model.transition(0, 0, 0).first(outcomes), truth) <= gamma) ++good;
        }
        const auto w = wilson_interval(good, trials);
        const double freq = static_cast<double>(good) / static_cast<double>(trials);
        std::ostringstream d;
        d << "N_P = " << n << ", " << good << "/" << trials << " rows within gamma, Wilson lower " << w.lower;
        return CheckResult{"", freq >= min_frequency && w.lower >= min_wilson_lower, d.str(), 0.0};
    });
}

/**
KCDD on a four-context instance with a non-uniform prior where one context
cannot reach the target with probability beta: the accepted contexts must
follow the prior restricted to the other three.
*/
inline CheckResult check_importance_sampling(std::size_t accepted, double min_p_value, std::uint64_t seed) {
    return detail::timed("kcdd_importance_sampling", [&] {
        const std::vector<double> reach{0.4, 0.8, 0.6, 0.1};
        const std::vector<double> prior{0.1, 0.2, 0.3, 0.4};
        const Layout L({1, 2, 1}, 2);
        std::vector<Context> contexts;
        std::vector<std::shared_ptr<const LayeredMdp>> mdps;
        for (std::size_t i = 0; i < reach.size(); ++i) {
            LayeredMdp m(L);
            for (std::size_t a = 0; a < 2; ++a) {
                m.set_transition(0, 0, a, std::vector<double>{reach[i], 1.0 - reach[i]});
                for (std::size_t s = 0; s < 2; ++s) m.set_reward(1, s, a, 0.3 + 0.4 * a);
            }
            contexts.push_back({i, {static_cast<double>(i) / 3.0}});
            mdps.push_back(std::make_shared<const LayeredMdp>(m));
        }
        const Cmdp cmdp(L, contexts, prior, mdps, false, RewardNoise{RewardNoise::Kind::Bernoulli});

        struct Session : EpisodeSource, DynamicsOracle {
            explicit Session(const Cmdp& c) : cmdp(c) {}
            const Layout& layout() const override { return cmdp.layout(); }
            Context begin_episode(Rng& rng) override {
                ++count;
                return current = cmdp.sample_context(rng);
            }
            Trajectory play(const Policy& pi, Rng& rng) override { return sample_trajectory(cmdp, current, pi, rng); }
            std::uint64_t episodes() const override { return count; }
            std::shared_ptr<const LayeredMdp> dynamics(const Context& c) const override { return cmdp.mdp_of(c); }
            bool context_free() const override { return false; }
            std::shared_ptr<const LayeredMdp> shared_dynamics() const override { return nullptr; }
            const Cmdp& cmdp;
            Context current;
            std::uint64_t count = 0;
        };
        auto session = std::make_shared<Session>(cmdp);

        CdConfig cfg;
        cfg.beta = 0.2;
        cfg.gamma = 0.2;
        cfg.eps1 = 0.1;
        cfg.keep_samples = true;
        cfg.reward_class = [](std::size_t, std::size_t, std::size_t) { return FunctionClass::linear_clipped(FeatureMap{1, {}}); };
        const auto params = kcdd_params(cfg, L);
        const double unit = static_cast<double>(n_rewards(cfg.reward_class(1, 0, 0), params.eps1, params.delta1, 1.0));
        cfg.constant_scale = static_cast<double>(accepted) / unit;
        Rng rng(seed);
        const auto model = explore_kcdd(*session, session, cfg, rng);
        // Every accepted episode is kept, so the run overshoots; test the
        // first `accepted` of them (a prefix of iid accepts).
        const auto& ids = model.sample_context_ids[1][0][0];
        const std::size_t used = std::min(ids.size(), accepted);
        std::vector<double> counts(reach.size(), 0.0);
        for (std::size_t i = 0; i < used; ++i) counts[ids[i]] += 1.0;
        const double good_mass = prior[0] + prior[1] + prior[2];
        const auto chi = chi_square_gof({counts[0], counts[1], counts[2]},
                                        {prior[0] / good_mass, prior[1] / good_mass, prior[2] / good_mass});
        std::ostringstream d;
        d << used << " of " << ids.size() << " accepted, counts (" << counts[0] << ", " << counts[1] << ", " << counts[2] << ", "
          << counts[3] << "), chi-square p = " << chi.p_value;
        return CheckResult{"", ids.size() >= accepted && counts[3] == 0.0 && chi.p_value > min_p_value, d.str(), 0.0};
    });
}

/**
Random ACDD predictors (some rows summing to zero) queried at random
contexts; every row must sum to 1 and every degenerate row must be a sink
row.
*/
inline CheckResult check_acdd_stochasticity(std::size_t queries, double tol, std::uint64_t seed) {
    return detail::timed("acdd_stochasticity", [&] {
        Rng rng(seed);
        std::size_t done = 0, degenerate = 0, sink_rows = 0;
        double worst = 0.0;
        bool degenerate_routed = true;
        while (done < queries) {
            const std::size_t dim = 1 + uniform_index(rng, 2);
            const Layout L(detail::random_layers(rng, 3, 3), 1 + uniform_index(rng, 2));
            std::vector<Predictor> fp;
            for (std::size_t h = 0; h < L.horizon(); ++h) {
                const FeatureMap fm{dim, {L.layer_size(h), L.num_actions(), L.layer_size(h + 1)}};
                std::vector<double> w(fm.dim());
                for (auto& v : w) v = 2.0 * uniform01(rng) - 0.8;
                fp.push_back(Predictor::linear(fm, w));
            }
            GoodSets sets(L);
            for (std::size_t h = 0; h < L.horizon(); ++h)
                for (std::size_t s = 0; s < L.layer_size(h); ++s) sets.good[h][s] = bernoulli(rng, 0.8);
            const Acdd acdd(L, L.horizon(), 0.05, fp, sets);
            Context c{kNoContextId, std::vector<double>(dim)};
            for (auto& x : c.x) x = uniform01(rng);
            const auto inst = acdd.build(c);
            degenerate += inst.degenerate_rows;
            const Layout& aug = inst.model.layout();
            std::vector<double> x(c.x);
            x.resize(dim + 3);
            for (std::size_t h = 0; h < aug.horizon() && done < queries; ++h)
                for (std::size_t s = 0; s < aug.layer_size(h) && done < queries; ++s)
                    for (std::size_t a = 0; a < aug.num_actions() && done < queries; ++a, ++done) {
                        const auto row = inst.model.transition(h, s, a);
                        double sum = 0.0;
                        for (double v : row) sum += v;
                        worst = std::max(worst, std::abs(sum - 1.0));
                        if (row.back() == 1.0) ++sink_rows;
                        // Recompute the predictions for a member row to confirm
                        // degenerate rows went to the sink.
                        if (s < L.layer_size(h) && sets.good[h][s] && inst.member[h][s]) {
                            double fsum = 0.0;
                            x[dim] = static_cast<double>(s);
                            x[dim + 1] = static_cast<double>(a);
                            for (std::size_t n = 0; n < L.layer_size(h + 1); ++n) {
                                x[dim + 2] = static_cast<double>(n);
                                fsum += fp[h](x);
                            }
                            if (!(fsum > 0.0) && row.back() != 1.0) degenerate_routed = false;
                        }
                    }
        }
        std::ostringstream d;
        d << done << " rows, max |sum - 1| = " << worst << ", " << degenerate << " degenerate rows routed to the sink, "
          << sink_rows << " sink rows";
        return CheckResult{"", worst <= tol && degenerate > 0 && degenerate_routed, d.str(), 0.0};
    });
}

}  // namespace cmdp
