#include <gtest/gtest.h>

#include <vector>

#include "cmdp_lab/env_suite.hpp"
#include "cmdp_lab/json_io.hpp"
#include "cmdp_lab/verify.hpp"

using namespace cmdp;

namespace {

GenSpec base_spec(std::uint64_t seed) {
    GenSpec g;
    g.seed = seed;
    g.layer_sizes = {1, 2, 3, 2};
    g.num_actions = 2;
    g.num_contexts = 4;
    g.context_dim = 2;
    return g;
}

}  // namespace

TEST(Generate, DeterministicInSeed) {
    const auto a = generate(base_spec(5));
    const auto b = generate(base_spec(5));
    const auto c = generate(base_spec(6));
    EXPECT_EQ(cmdp_to_string(a->cmdp()), cmdp_to_string(b->cmdp()));
    EXPECT_NE(cmdp_to_string(a->cmdp()), cmdp_to_string(c->cmdp()));
}

TEST(Generate, SingleContextIsAPlainMdp) {
    for (auto family : {DynamicsFamily::ContextFreeRandom, DynamicsFamily::ContextLinearMixture}) {
        auto spec = base_spec(1);
        spec.num_contexts = 1;
        spec.dynamics_family = family;
        const auto env = generate(spec);
        ASSERT_EQ(env->cmdp().contexts().size(), 1u);
        const auto m = env->cmdp().mdp_of(env->cmdp().contexts()[0]);
        EXPECT_NO_THROW(validate_mdp(*m));
        // With one context the kernel trivially does not depend on it.
        EXPECT_NO_THROW(Cmdp(m->layout(), env->cmdp().contexts(), {1.0}, {m}, true));
    }
}

TEST(Generate, ContextFreeFamilySharesTheKernel) {
    auto spec = base_spec(2);
    spec.dynamics_family = DynamicsFamily::ContextFreeRandom;
    const auto env = generate(spec);
    EXPECT_TRUE(env->cmdp().context_free_dynamics());
    const auto first = env->cmdp().mdp_of(env->cmdp().contexts()[0]);
    for (const auto& c : env->cmdp().contexts()) EXPECT_TRUE(env->cmdp().mdp_of(c)->same_dynamics(*first));
}

TEST(Generate, PlantedEndpointsGiveP0AndP1Exactly) {
    auto spec = base_spec(3);
    spec.planted_endpoints = true;
    const auto env = generate(spec);
    ASSERT_EQ(env->eta(), 0.0);
    const auto m0 = env->cmdp().mdp_of(env->cmdp().contexts()[0]);
    const auto m1 = env->cmdp().mdp_of(env->cmdp().contexts()[1]);
    const Layout& L = env->layout();
    for (std::size_t h = 0; h < L.horizon(); ++h)
        for (std::size_t s = 0; s < L.layer_size(h); ++s)
            for (std::size_t a = 0; a < L.num_actions(); ++a) {
                const auto [p0, p1] = env->endpoints(h, s, a);
                const auto r0 = m0->transition(h, s, a);
                const auto r1 = m1->transition(h, s, a);
                EXPECT_EQ(std::vector<double>(r0.begin(), r0.end()), p0);
                EXPECT_EQ(std::vector<double>(r1.begin(), r1.end()), p1);
            }
}

TEST(Generate, KernelsValidateAndMeetTheFloor) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        auto spec = base_spec(seed);
        spec.reachability_floor = 0.25;
        const auto env = generate(spec);
        for (const auto& c : env->cmdp().contexts()) {
            const auto m = env->cmdp().mdp_of(c);
            EXPECT_NO_THROW(validate_mdp(*m));
            for (std::size_t h = 1; h <= m->horizon(); ++h)
                for (std::size_t s = 0; s < m->layer_size(h); ++s) EXPECT_GE(ffp(*m, h, s).prob, 0.25 - 1e-12);
        }
    }
}

TEST(Generate, UnattainableFloorRejected) {
    auto spec = base_spec(4);
    spec.reachability_floor = 0.6;  // a layer of 2 states caps the floor at 1/2
    EXPECT_THROW(generate(spec), InfeasibleSpec);
}

TEST(Generate, RealizabilityAudit) {
    for (auto rf : {RewardFamily::LinearClipped, RewardFamily::FiniteTable}) {
        auto spec = base_spec(8);
        spec.reward_family = rf;
        spec.reachability_floor = 0.2;
        const auto env = generate(spec);
        const Layout& L = env->layout();
        const auto& contexts = env->cmdp().contexts();
        for (std::size_t h = 0; h < L.horizon(); ++h) {
            LabeledDataset layer_r(env->layer_reward_class(h).input_arity());
            LabeledDataset layer_p(env->layer_dynamics_class(h).input_arity());
            for (std::size_t s = 0; s < L.layer_size(h); ++s)
                for (std::size_t a = 0; a < L.num_actions(); ++a) {
                    LabeledDataset per_pair(spec.context_dim);
                    for (const auto& c : contexts) {
                        const auto m = env->cmdp().mdp_of(c);
                        per_pair.add(c.x, m->reward(h, s, a));
                        std::vector<double> x = c.x;
                        x.push_back(static_cast<double>(s));
                        x.push_back(static_cast<double>(a));
                        layer_r.add(x, m->reward(h, s, a));
                        x.push_back(0.0);
                        for (std::size_t n = 0; n < L.layer_size(h + 1); ++n) {
                            x.back() = static_cast<double>(n);
                            layer_p.add(x, m->transition(h, s, a, n));
                        }
                    }
                    const auto f = erm_fit(env->reward_class(h, s, a), per_pair, Loss::L2);
                    EXPECT_LE(f.provenance().empirical_loss, 1e-8);
                }
            EXPECT_LE(erm_fit(env->layer_reward_class(h), layer_r, Loss::L2).provenance().empirical_loss, 1e-8);
            EXPECT_LE(erm_fit(env->layer_dynamics_class(h), layer_p, Loss::L2).provenance().empirical_loss, 1e-8);
            EXPECT_LE(empirical_loss(env->layer_reward_truth(h), layer_r, Loss::L2), 1e-20);
            EXPECT_LE(empirical_loss(env->layer_dynamics_truth(h), layer_p, Loss::L2), 1e-20);
        }
    }
}

TEST(Episode, UniformContextsPassGoodnessOfFit) {
    const auto env = generate(base_spec(9));
    Rng rng(1);
    std::vector<double> counts(4, 0.0);
    const Policy pi(env->layout());
    for (int i = 0; i < 10000; ++i) counts[episode(*env, pi, rng).first.id] += 1.0;
    EXPECT_GT(chi_square_gof(counts, {0.25, 0.25, 0.25, 0.25}).p_value, 0.01);
}

TEST(Episode, PointMassDistribution) {
    auto spec = base_spec(10);
    spec.context_probs = {0.0, 0.0, 1.0, 0.0};
    const auto env = generate(spec);
    Rng rng(2);
    const Policy pi(env->layout());
    for (int i = 0; i < 200; ++i) EXPECT_EQ(episode(*env, pi, rng).first.id, 2u);
}

TEST(Episode, FixedSeedReproducible) {
    const auto env = generate(base_spec(11));
    const Policy pi = Policy::uniform(env->layout());
    Rng a(77), b(77);
    for (int i = 0; i < 50; ++i) {
        const auto [ca, ta] = episode(*env, pi, a);
        const auto [cb, tb] = episode(*env, pi, b);
        EXPECT_EQ(ca, cb);
        EXPECT_EQ(ta.states, tb.states);
        EXPECT_EQ(ta.rewards, tb.rewards);
    }
}

TEST(Session, CountsEpisodesAndAllowsOnePlay) {
    const auto env = generate(base_spec(12));
    EnvSession session(env);
    Rng rng(3);
    const Policy pi(env->layout());
    EXPECT_THROW(session.play(pi, rng), InvalidParameter);
    session.begin_episode(rng);
    session.play(pi, rng);
    EXPECT_THROW(session.play(pi, rng), InvalidParameter);
    session.begin_episode(rng);
    EXPECT_EQ(session.episodes(), 2u);
    EXPECT_EQ(session.played(), 1u);
}

TEST(Session, OracleOnlyForKnownDynamics) {
    auto spec = base_spec(13);
    EXPECT_EQ(dynamics_oracle(generate(spec)), nullptr);
    spec.known_dynamics = true;
    const auto env = generate(spec);
    const auto oracle = dynamics_oracle(env);
    ASSERT_NE(oracle, nullptr);
    const auto& c = env->cmdp().contexts()[1];
    const auto skel = oracle->dynamics(c);
    EXPECT_TRUE(skel->same_dynamics(*env->cmdp().mdp_of(c)));
    EXPECT_EQ(plan(*skel).value, 0.0);
}

TEST(Generate, ContinuousContextSpace) {
    auto spec = base_spec(14);
    spec.num_contexts = 0;
    spec.reachability_floor = 0.2;
    const auto env = generate(spec);
    EXPECT_FALSE(env->cmdp().is_finite());
    Rng rng(4);
    const Policy pi(env->layout());
    for (int i = 0; i < 20; ++i) {
        const auto [c, t] = episode(*env, pi, rng);
        EXPECT_EQ(c.id, kNoContextId);
        double n2 = 0.0;
        for (double v : c.x) n2 += v * v;
        EXPECT_NEAR(n2, 1.0, 1e-12);
        EXPECT_EQ(t.states.size(), 4u);
    }
    EXPECT_THROW(exact_suboptimality(env->cmdp(), PolicyMap([&](const Context&) { return pi; })), InfiniteContextSpace);
}
