#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "cmdp_lab/core.hpp"
#include "test_support.hpp"

using namespace cmdp;
using cmdp::testing::random_mdp;
using cmdp::testing::random_policy;
using cmdp::testing::random_sizes;

namespace {

LayeredMdp chain(std::size_t H, std::size_t actions = 2) {
    return LayeredMdp(Layout(std::vector<std::size_t>(H + 1, 1), actions));
}

// Policy evaluation by backward induction, written independently of
// occupancy().
double backward_value(const LayeredMdp& m, const Policy& pi) {
    const Layout& L = m.layout();
    std::vector<double> next(L.layer_size(L.horizon()), 0.0);
    for (std::size_t h = L.horizon(); h-- > 0;) {
        std::vector<double> cur(L.layer_size(h), 0.0);
        for (std::size_t s = 0; s < L.layer_size(h); ++s)
            for (std::size_t a = 0; a < L.num_actions(); ++a) {
                double q = m.reward(h, s, a);
                const auto row = m.transition(h, s, a);
                for (std::size_t n = 0; n < row.size(); ++n) q += row[n] * next[n];
                cur[s] += pi.prob(h, s, a) * q;
            }
        next = cur;
    }
    return next[0];
}

}  // namespace

TEST(Validate, DeterministicChainAccepted) {
    const auto m = chain(2);
    EXPECT_NO_THROW(validate_mdp(m));
}

TEST(Validate, RowSummingToPointNineRejected) {
    LayeredMdp m(Layout({1, 2}, 1));
    const std::vector<double> row{0.5, 0.4};
    m.set_transition(0, 0, 0, row);
    try {
        validate_mdp(m);
        FAIL() << "expected RowNotStochastic";
    } catch (const RowNotStochastic& e) {
        EXPECT_NE(std::string(e.what()).find("(h=0,s=0,a=0)"), std::string::npos);
    }
}

TEST(Validate, RewardAboveOneRejected) {
    auto m = chain(1);
    m.set_reward(0, 0, 1, 1.2);
    try {
        validate_mdp(m);
        FAIL() << "expected RewardOutOfRange";
    } catch (const RewardOutOfRange& e) {
        EXPECT_NE(std::string(e.what()).find("(h=0,s=0,a=1)"), std::string::npos);
    }
}

TEST(Validate, RowCrossingLayersRejected) {
    LayeredMdp m(Layout({1, 2, 3}, 1));
    const std::vector<double> row{0.2, 0.3, 0.5};
    EXPECT_THROW(m.set_transition(0, 0, 0, row), LayerViolation);
    EXPECT_THROW(Layout({2, 1}, 1), LayerViolation);
}

TEST(Occupancy, DeterministicChainIsOneEverywhere) {
    Rng rng(1);
    const auto m = chain(4, 3);
    const auto q = occupancy(m, random_policy(rng, m.layout()));
    for (std::size_t h = 0; h <= 4; ++h) EXPECT_DOUBLE_EQ(q.at(h, 0), 1.0);
}

TEST(Occupancy, SingleActionCopiesTheRow) {
    LayeredMdp m(Layout({1, 2}, 1));
    const std::vector<double> row{0.3, 0.7};
    m.set_transition(0, 0, 0, row);
    const auto q = occupancy(m, Policy(m.layout()));
    EXPECT_DOUBLE_EQ(q.at(1, 0), 0.3);
    EXPECT_DOUBLE_EQ(q.at(1, 1), 0.7);
}

TEST(Occupancy, MatchesMonteCarloVisitFrequencies) {
    Rng rng(7);
    const auto m = random_mdp(rng, {1, 3, 4, 2}, 2);
    const auto pi = random_policy(rng, m.layout());
    const auto q = occupancy(m, pi);
    const std::size_t N = 100000;
    std::vector<std::vector<double>> counts(4);
    for (std::size_t h = 0; h < 4; ++h) counts[h].assign(m.layer_size(h), 0.0);
    RewardNoise noise{RewardNoise::Kind::None};
    for (std::size_t i = 0; i < N; ++i) {
        const auto t = simulate(m, pi, noise, rng);
        for (std::size_t h = 0; h < 4; ++h) counts[h][t.states[h]] += 1.0;
    }
    for (std::size_t h = 0; h < 4; ++h)
        for (std::size_t s = 0; s < m.layer_size(h); ++s) {
            const double p = q.at(h, s);
            const double se = std::sqrt(p * (1.0 - p) / N);
            EXPECT_NEAR(counts[h][s] / N, p, 3.0 * se + 1e-12) << "h=" << h << " s=" << s;
        }
}

TEST(Occupancy, LayersSumToOne) {
    Rng rng(11);
    for (int i = 0; i < 100; ++i) {
        const auto m = random_mdp(rng, random_sizes(rng, 1 + uniform_index(rng, 5), 6), 1 + uniform_index(rng, 3));
        const auto q = occupancy(m, random_policy(rng, m.layout()));
        for (const auto& layer : q.layers) {
            double sum = 0.0;
            for (double v : layer) {
                EXPECT_GE(v, 0.0);
                sum += v;
            }
            EXPECT_NEAR(sum, 1.0, 1e-9);
        }
    }
}

TEST(PolicyValue, ZeroRewardsGiveZero) {
    Rng rng(3);
    auto m = random_mdp(rng, {1, 2, 2}, 2);
    m = m.skeleton();
    EXPECT_EQ(policy_value(m, random_policy(rng, m.layout())), 0.0);
}

TEST(PolicyValue, OneStep) {
    LayeredMdp m(Layout({1, 1}, 2));
    m.set_reward(0, 0, 1, 0.4);
    Policy pi(m.layout());
    pi.set_action(0, 0, 1);
    EXPECT_DOUBLE_EQ(policy_value(m, pi), 0.4);
}

TEST(PolicyValue, MatchesMonteCarloReturns) {
    Rng rng(21);
    const auto m = random_mdp(rng, {1, 3, 3, 2}, 3);
    const auto pi = random_policy(rng, m.layout());
    const double v = policy_value(m, pi);
    const std::size_t N = 100000;
    double sum = 0.0, sq = 0.0;
    RewardNoise noise;
    for (std::size_t i = 0; i < N; ++i) {
        const auto t = simulate(m, pi, noise, rng);
        double g = 0.0;
        for (double r : t.rewards) g += r;
        sum += g;
        sq += g * g;
    }
    const double mean = sum / N;
    const double se = std::sqrt((sq / N - mean * mean) / N);
    EXPECT_NEAR(mean, v, 3.0 * se);
}

TEST(PolicyValue, ForwardEqualsBackwardOnRandomInstances) {
    Rng rng(5);
    for (int i = 0; i < 100; ++i) {
        const std::size_t H = 1 + uniform_index(rng, 5);
        const auto m = random_mdp(rng, random_sizes(rng, H, 6), 1 + uniform_index(rng, 3));
        const auto pi = random_policy(rng, m.layout());
        const double v = policy_value(m, pi);
        EXPECT_NEAR(v, backward_value(m, pi), 1e-9);
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, static_cast<double>(H));
    }
}

TEST(TvDistance, Examples) {
    const std::vector<double> p{0.3, 0.7}, q{0.5, 0.5}, e0{1.0, 0.0}, e1{0.0, 1.0};
    EXPECT_EQ(tv_distance(p, p), 0.0);
    EXPECT_DOUBLE_EQ(tv_distance(e0, e1), 2.0);
    EXPECT_NEAR(tv_distance(p, q), 0.4, 1e-15);
    const std::vector<double> three{0.2, 0.3, 0.5};
    EXPECT_THROW(tv_distance(p, three), LengthMismatch);
}

TEST(SampleTrajectory, DeterministicModelGivesTheUniqueTrajectory) {
    LayeredMdp m(Layout({1, 2, 2}, 2));
    const std::vector<double> to0{1.0, 0.0}, to1{0.0, 1.0};
    m.set_transition(0, 0, 0, to0);
    m.set_transition(0, 0, 1, to1);
    m.set_transition(1, 1, 1, to0);
    m.set_reward(0, 0, 1, 1.0);
    auto cmdp = cmdp::testing::finite_cmdp({m}, {{0.0}}, true);
    Policy pi(m.layout());
    pi.set_action(0, 0, 1);
    pi.set_action(1, 1, 1);
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(seed);
        const auto t = sample_trajectory(cmdp, cmdp.contexts()[0], pi, rng);
        EXPECT_EQ(t.states, (std::vector<std::size_t>{0, 1, 0}));
        EXPECT_EQ(t.actions, (std::vector<std::size_t>{1, 1}));
        EXPECT_EQ(t.rewards, (std::vector<double>{1.0, 0.0}));
    }
}

TEST(SampleTrajectory, BernoulliRewardMean) {
    LayeredMdp m(Layout({1, 1}, 1));
    m.set_reward(0, 0, 0, 0.5);
    auto cmdp = cmdp::testing::finite_cmdp({m}, {{0.0}}, true);
    const Policy pi(m.layout());
    double sum = 0.0;
    for (std::uint64_t seed = 0; seed < 10000; ++seed) {
        Rng rng(seed);
        const double r = sample_trajectory(cmdp, cmdp.contexts()[0], pi, rng).rewards[0];
        EXPECT_TRUE(r == 0.0 || r == 1.0);
        sum += r;
    }
    EXPECT_NEAR(sum / 10000.0, 0.5, 0.02);
}

TEST(SampleTrajectory, FixedSeedIsReproducible) {
    Rng g(9);
    const auto m = random_mdp(g, {1, 3, 3, 3}, 2);
    auto cmdp = cmdp::testing::finite_cmdp({m}, {{0.0}}, true);
    const auto pi = random_policy(g, m.layout());
    Rng a(123), b(123);
    const auto ta = sample_trajectory(cmdp, cmdp.contexts()[0], pi, a);
    const auto tb = sample_trajectory(cmdp, cmdp.contexts()[0], pi, b);
    EXPECT_EQ(ta.states, tb.states);
    EXPECT_EQ(ta.actions, tb.actions);
    EXPECT_EQ(ta.rewards, tb.rewards);
}

TEST(SampleTrajectory, UnknownContextRejected) {
    const auto m = chain(1);
    auto cmdp = cmdp::testing::finite_cmdp({m}, {{0.0}}, true);
    Rng rng(0);
    EXPECT_THROW(sample_trajectory(cmdp, Context{0, {0.5}}, Policy(m.layout()), rng), UnknownContext);
    EXPECT_THROW(sample_trajectory(cmdp, Context{0, {0.0, 1.0}}, Policy(m.layout()), rng), UnknownContext);
}

TEST(Cmdp, ContextFreeFlagRequiresIdenticalKernels) {
    Rng rng(4);
    const auto a = random_mdp(rng, {1, 2}, 2);
    const auto b = random_mdp(rng, {1, 2}, 2);
    EXPECT_THROW(cmdp::testing::finite_cmdp({a, b}, {{0.0}, {1.0}}, true), InvalidParameter);
    EXPECT_NO_THROW(cmdp::testing::finite_cmdp({a, b}, {{0.0}, {1.0}}, false));
}

TEST(Bounds, OccupancyDistanceGrowsAtMostLinearly) {
    Rng rng(17);
    for (double gamma : {0.01, 0.1}) {
        for (int i = 0; i < 50; ++i) {
            const auto m = random_mdp(rng, random_sizes(rng, 1 + uniform_index(rng, 5), 5), 1 + uniform_index(rng, 3));
            const auto mt = cmdp::testing::perturb(rng, m, gamma);
            const auto pi = random_policy(rng, m.layout());
            const auto q = occupancy(m, pi);
            const auto qt = occupancy(mt, pi);
            for (std::size_t h = 0; h <= m.horizon(); ++h)
                EXPECT_LE(tv_distance(q.layer(h), qt.layer(h)), gamma * static_cast<double>(h) + 1e-9);
        }
    }
}

TEST(Bounds, ValueDifferenceBoundedBySummedOccupancyDistance) {
    Rng rng(19);
    for (int i = 0; i < 100; ++i) {
        const auto m = random_mdp(rng, random_sizes(rng, 1 + uniform_index(rng, 4), 5), 2);
        const auto mt = cmdp::testing::perturb(rng, m, 0.2);
        const auto pi = random_policy(rng, m.layout());
        const auto q = occupancy(m, pi);
        const auto qt = occupancy(mt, pi);
        double bound = 0.0;
        for (std::size_t h = 0; h < m.horizon(); ++h) bound += tv_distance(q.layer(h), qt.layer(h));
        EXPECT_LE(std::abs(policy_value(m, pi) - policy_value(mt, pi)), bound + 1e-9);
    }
}
