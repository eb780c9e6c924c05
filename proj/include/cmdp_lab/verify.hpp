#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <vector>

#include <boost/math/distributions/chi_squared.hpp>

#include "core.hpp"
#include "planner.hpp"

namespace cmdp {

inline constexpr double kMaxEnumeratedPolicies = 1e6;

struct BruteForceResult {
    Policy policy;
    double value = 0.0;
    std::uint64_t policies_evaluated = 0;
};

/**
Evaluates every deterministic layered policy with policy_value and keeps
the best. Policies are enumerated as mixed-radix counters with (h=0,s=0)
as the most significant digit, so ties resolve to the lexicographically
smallest action assignment.
*/
inline BruteForceResult brute_force_plan(const LayeredMdp& m) {
    const Layout& L = m.layout();
    std::vector<std::pair<std::size_t, std::size_t>> cells;
    for (std::size_t h = 0; h < L.horizon(); ++h)
        for (std::size_t s = 0; s < L.layer_size(h); ++s) cells.emplace_back(h, s);
    const double count = std::pow(static_cast<double>(L.num_actions()), static_cast<double>(cells.size()));
    if (count > kMaxEnumeratedPolicies)
        throw TooLarge("brute force would enumerate " + std::to_string(count) + " policies (cap 1e6)");

    std::vector<std::size_t> digits(cells.size(), 0);
    BruteForceResult best;
    Policy pi(L);
    bool first = true;
    while (true) {
        for (std::size_t i = 0; i < cells.size(); ++i) pi.set_action(cells[i].first, cells[i].second, digits[i]);
        const double v = policy_value(m, pi);
        ++best.policies_evaluated;
        if (first || v > best.value) {
            best.value = v;
            best.policy = pi;
            first = false;
        }
        std::size_t i = cells.size();
        while (i > 0) {
            --i;
            if (++digits[i] < L.num_actions()) break;
            digits[i] = 0;
            if (i == 0) return best;
        }
        if (cells.empty()) return best;
    }
}

/// E_{c~D}[V*_{M(c)}(s_0) - V^{pi_c}_{M(c)}(s_0)] over a finite context space.
inline double exact_suboptimality(const Cmdp& cmdp, const PolicyMap& learned) {
    if (!cmdp.is_finite()) throw InfiniteContextSpace("exact suboptimality needs a finite context space");
    double gap = 0.0;
    for (std::size_t i = 0; i < cmdp.contexts().size(); ++i) {
        const double w = cmdp.probabilities()[i];
        if (w == 0.0) continue;
        const Context& c = cmdp.contexts()[i];
        const auto m = cmdp.mdp_of(c);
        gap += w * (plan(*m).value - policy_value(*m, learned(c)));
    }
    return gap;
}

struct WilsonInterval {
    double lower = 0.0;
    double upper = 1.0;
};

inline WilsonInterval wilson_interval(std::size_t successes, std::size_t n, double z = 1.959963984540054) {
    if (n == 0) return {};
    const double nn = static_cast<double>(n);
    const double p = static_cast<double>(successes) / nn;
    const double z2 = z * z;
    const double centre = (p + z2 / (2.0 * nn)) / (1.0 + z2 / nn);
    const double half = z * std::sqrt(p * (1.0 - p) / nn + z2 / (4.0 * nn * nn)) / (1.0 + z2 / nn);
    return {std::max(0.0, centre - half), std::min(1.0, centre + half)};
}

struct EventFrequency {
    std::size_t successes = 0;
    std::size_t trials = 0;
    double frequency = 0.0;
    WilsonInterval interval;
};

/// Runs predicate(seed) for seed = first_seed .. first_seed + n_seeds - 1.
inline EventFrequency empirical_event_frequency(const std::function<bool(std::uint64_t)>& predicate,
                                                std::size_t n_seeds, std::uint64_t first_seed = 0) {
    if (n_seeds < 20) throw InvalidParameter("event frequencies need at least 20 seeds");
    EventFrequency out;
    out.trials = n_seeds;
    for (std::size_t i = 0; i < n_seeds; ++i)
        if (predicate(first_seed + i)) ++out.successes;
    out.frequency = static_cast<double>(out.successes) / static_cast<double>(n_seeds);
    out.interval = wilson_interval(out.successes, n_seeds);
    return out;
}

struct ChiSquareResult {
    double statistic = 0.0;
    std::size_t dof = 0;
    double p_value = 1.0;
};

/// Pearson goodness of fit of counts against probabilities. Cells with zero
/// expected probability must have zero counts.
inline ChiSquareResult chi_square_gof(const std::vector<double>& counts, const std::vector<double>& probs) {
    if (counts.size() != probs.size()) throw LengthMismatch("counts and probabilities differ in length");
    double n = 0.0, mass = 0.0;
    for (double c : counts) n += c;
    for (double p : probs) mass += p;
    ChiSquareResult r;
    std::size_t cells = 0;
    for (std::size_t i = 0; i < counts.size(); ++i) {
        const double p = probs[i] / mass;
        if (p == 0.0) {
            if (counts[i] > 0.0) return {std::numeric_limits<double>::infinity(), 0, 0.0};
            continue;
        }
        const double e = n * p;
        r.statistic += (counts[i] - e) * (counts[i] - e) / e;
        ++cells;
    }
    if (cells < 2) return r;
    r.dof = cells - 1;
    boost::math::chi_squared dist(static_cast<double>(r.dof));
    r.p_value = boost::math::cdf(boost::math::complement(dist, r.statistic));
    return r;
}

}  // namespace cmdp
