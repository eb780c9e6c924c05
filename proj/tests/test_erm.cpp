#include <gtest/gtest.h>

#include <cmath>
#include <sstream>
#include <vector>

#include "cmdp_lab/erm.hpp"
#include "cmdp_lab/rng.hpp"

using namespace cmdp;

namespace {

FunctionClass affine_1d() { return FunctionClass::linear_clipped(FeatureMap{1, {}}); }

// Best L1 loss found by projected subgradient descent from 50 random starts.
double best_subgradient_l1(const LabeledDataset& data, const FeatureMap& fm, Rng& rng) {
    double best = std::numeric_limits<double>::infinity();
    const std::size_t n = data.size();
    for (int restart = 0; restart < 50; ++restart) {
        std::vector<double> w(fm.dim());
        for (auto& v : w) v = 2.0 * uniform01(rng) - 1.0;
        for (std::size_t t = 1; t <= 10 * n; ++t) {
            std::vector<double> g(w.size(), 0.0);
            double loss = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                const auto x = data.input(i);
                const double r = fm.linear(w, x) - data.label(i);
                loss += std::abs(r);
                const double sg = r > 0 ? 1.0 : (r < 0 ? -1.0 : 0.0);
                const std::size_t off = fm.block(x) * fm.block_width();
                g[off] += sg;
                for (std::size_t j = 0; j < fm.context_dim; ++j) g[off + 1 + j] += sg * x[j];
            }
            best = std::min(best, loss / static_cast<double>(n));
            const double step = 0.5 / std::sqrt(static_cast<double>(t));
            for (std::size_t k = 0; k < w.size(); ++k) w[k] -= step * g[k] / static_cast<double>(n);
        }
    }
    return best;
}

}  // namespace

TEST(Calculators, RewardSampleSizeExample) {
    EXPECT_EQ(n_rewards(1, ComplexityKind::Pseudo, 0.5, 0.5, 1.0), 6u);
}

TEST(Calculators, RewardSampleSizeScaling) {
    for (double eps : {0.4, 0.2, 0.1, 0.05}) {
        const double big = static_cast<double>(n_rewards(3, ComplexityKind::Pseudo, eps / 2, 0.1, 1.0));
        const double small = static_cast<double>(n_rewards(3, ComplexityKind::Pseudo, eps, 0.1, 1.0));
        EXPECT_GE(big, 4.0 * small - 4.0);
    }
    const double full = static_cast<double>(n_rewards(4, ComplexityKind::Pseudo, 0.01, 0.05, 1.0));
    const double desk = static_cast<double>(n_rewards(4, ComplexityKind::Pseudo, 0.01, 0.05, 0.01));
    EXPECT_NEAR(desk, full * 0.01, 1.0);
    EXPECT_GT(n_rewards(2, ComplexityKind::FatShattering, 0.1, 0.1, 1.0),
              n_rewards(2, ComplexityKind::Pseudo, 0.1, 0.1, 1.0));
    EXPECT_THROW(n_rewards(1, ComplexityKind::Pseudo, 0.0, 0.5, 1.0), InvalidParameter);
    EXPECT_THROW(n_rewards(1, ComplexityKind::Pseudo, 0.5, 1.0, 1.0), InvalidParameter);
    EXPECT_THROW(n_rewards(1, ComplexityKind::Pseudo, 0.5, 0.5, 0.0), InvalidParameter);
}

TEST(Calculators, TabularDynamicsExample) {
    EXPECT_EQ(n_dynamics_tabular(0.1, 0.01, 4), 1615u);
    const auto n = n_dynamics_tabular(0.1, 0.01, 4);
    const auto n2 = n_dynamics_tabular(0.2, 0.01, 4);
    EXPECT_NEAR(static_cast<double>(n2), static_cast<double>(n) / 4.0, 1.0);
    const double floor_count = std::ceil(2.0 / 0.01 * 5.0 * std::log(2.0));
    EXPECT_GE(static_cast<double>(n_dynamics_tabular(0.1, 1.0 - 1e-12, 4)), floor_count);
    EXPECT_THROW(n_dynamics_tabular(1.0, 0.1, 4), InvalidParameter);
}

TEST(Calculators, EpisodesForVisitsExamples) {
    EXPECT_EQ(episodes_for_visits(0.5, 0.1, 100), 410u);
    EXPECT_EQ(episodes_for_visits(1.0, 1.0 - 1e-12, 5), 10u);
    EXPECT_EQ(episodes_for_visits(1.0, 1.0, 5), 10u);
    const auto a = episodes_for_visits(0.4, 0.1, 50);
    const auto b = episodes_for_visits(0.2, 0.1, 50);
    EXPECT_NEAR(static_cast<double>(b), 2.0 * static_cast<double>(a), 1.0);
    EXPECT_THROW(episodes_for_visits(0.0, 0.1, 5), InvalidParameter);
    EXPECT_THROW(episodes_for_visits(0.5, 0.1, 0), InvalidParameter);
}

TEST(Calculators, Monotone) {
    std::size_t prev = 0;
    for (double eps : {0.5, 0.4, 0.3, 0.2, 0.1}) {
        const auto n = n_rewards(3, ComplexityKind::Pseudo, eps, 0.1, 1.0);
        EXPECT_GE(n, prev);
        prev = n;
    }
    EXPECT_GE(n_rewards(3, ComplexityKind::Pseudo, 0.2, 0.01, 1.0), n_rewards(3, ComplexityKind::Pseudo, 0.2, 0.1, 1.0));
    EXPECT_GE(n_rewards(4, ComplexityKind::Pseudo, 0.2, 0.1, 1.0), n_rewards(3, ComplexityKind::Pseudo, 0.2, 0.1, 1.0));
    EXPECT_GE(n_dynamics_tabular(0.1, 0.1, 5), n_dynamics_tabular(0.1, 0.1, 4));
    EXPECT_GE(n_dynamics_tabular(0.1, 0.01, 4), n_dynamics_tabular(0.1, 0.1, 4));
    EXPECT_GE(n_dynamics_tabular(0.05, 0.1, 4), n_dynamics_tabular(0.1, 0.1, 4));
    EXPECT_GE(episodes_for_visits(0.5, 0.1, 11), episodes_for_visits(0.5, 0.1, 10));
    EXPECT_GE(episodes_for_visits(0.5, 0.01, 10), episodes_for_visits(0.5, 0.1, 10));
}

TEST(Erm, FiniteRealizableFitIsExact) {
    std::vector<FunctionClass::Member> members;
    for (int k = 0; k < 5; ++k) members.push_back([k](std::span<const double> x) { return clip01(0.1 * k + 0.05 * x[0]); });
    const auto cls = FunctionClass::finite(members, 1);
    LabeledDataset data(1);
    for (double x : {0.0, 1.0, 2.0, 3.0}) {
        const std::vector<double> in{x};
        data.add(in, members[3](in));
    }
    for (Loss loss : {Loss::L1, Loss::L2}) {
        const auto f = erm_fit(cls, data, loss);
        EXPECT_EQ(f.index(), 3u);
        EXPECT_EQ(empirical_loss(f, data, loss), 0.0);
    }
}

TEST(Erm, LinearInterpolatesTwoPoints) {
    LabeledDataset data(1);
    const std::vector<double> x1{1.0}, x2{2.0};
    data.add(x1, 0.2);
    data.add(x2, 0.4);
    const auto f = erm_fit(affine_1d(), data, Loss::L2);
    const std::vector<double> x3{1.5};
    EXPECT_NEAR(f(x3), 0.3, 1e-12);
    EXPECT_NEAR(f.weights()[0], 0.0, 1e-12);
    EXPECT_NEAR(f.weights()[1], 0.2, 1e-12);
    EXPECT_LE(empirical_loss(f, data, Loss::L2), 1e-20);
}

TEST(Erm, FiniteMatchesExplicitScan) {
    Rng rng(31);
    std::vector<std::vector<double>> tables(50, std::vector<double>(8));
    for (auto& t : tables)
        for (auto& v : t) v = uniform01(rng);
    std::vector<FunctionClass::Member> members;
    for (const auto& t : tables) members.push_back([t](std::span<const double> x) { return t[static_cast<std::size_t>(x[0])]; });
    const auto cls = FunctionClass::finite(members, 1);
    for (int trial = 0; trial < 20; ++trial) {
        LabeledDataset data(1);
        for (int i = 0; i < 30; ++i) {
            const std::vector<double> x{static_cast<double>(uniform_index(rng, 8))};
            data.add(x, uniform01(rng));
        }
        for (Loss loss : {Loss::L1, Loss::L2}) {
            double best = std::numeric_limits<double>::infinity();
            for (const auto& t : tables) {
                double s = 0.0;
                for (std::size_t i = 0; i < data.size(); ++i)
                    s += loss_value(loss, t[static_cast<std::size_t>(data.input(i)[0])], data.label(i));
                best = std::min(best, s / 30.0);
            }
            EXPECT_NEAR(erm_fit(cls, data, loss).provenance().empirical_loss, best, 1e-15);
        }
    }
}

TEST(Erm, LinearRealizableNoiselessIsExact) {
    Rng rng(37);
    const FeatureMap fm{2, {2, 3}};
    std::vector<double> truth(fm.dim());
    for (std::size_t b = 0; b < fm.num_blocks(); ++b) {
        const double bias = 0.3 + 0.4 * uniform01(rng);
        truth[b * 3] = bias;
        truth[b * 3 + 1] = 0.2 * (uniform01(rng) - 0.5);
        truth[b * 3 + 2] = 0.2 * (uniform01(rng) - 0.5);
    }
    const auto cls = FunctionClass::linear_clipped(fm);
    LabeledDataset data(4);
    for (int i = 0; i < 400; ++i) {
        const std::vector<double> x{2 * uniform01(rng) - 1, 2 * uniform01(rng) - 1,
                                    static_cast<double>(uniform_index(rng, 2)), static_cast<double>(uniform_index(rng, 3))};
        data.add(x, fm.linear(truth, x));
    }
    EXPECT_LE(erm_fit(cls, data, Loss::L2).provenance().empirical_loss, 1e-8);
    EXPECT_LE(erm_fit(cls, data, Loss::L1).provenance().empirical_loss, 1e-8);
}

TEST(Erm, EmptyDatasetRejected) {
    EXPECT_THROW(erm_fit(affine_1d(), LabeledDataset(1), Loss::L2), EmptyDataset);
}

TEST(Erm, RankDeficientBlockUsesMinimumNorm) {
    // Every input has the same context value, so slope and bias are not
    // separately identifiable.
    LabeledDataset data(1);
    const std::vector<double> x{1.0};
    for (int i = 0; i < 5; ++i) data.add(x, 0.6);
    const auto f = erm_fit(affine_1d(), data, Loss::L2);
    EXPECT_EQ(f.provenance().rank_deficient_blocks, 1u);
    EXPECT_NEAR(f.weights()[0], 0.3, 1e-12);
    EXPECT_NEAR(f.weights()[1], 0.3, 1e-12);
}

TEST(Erm, L2BeatsRandomProbeOfTheWeightBall) {
    Rng rng(41);
    const FeatureMap fm{2, {}};
    const auto cls = FunctionClass::linear_clipped(fm);
    for (int trial = 0; trial < 10; ++trial) {
        LabeledDataset data(2);
        for (int i = 0; i < 200; ++i) {
            const std::vector<double> x{2 * uniform01(rng) - 1, 2 * uniform01(rng) - 1};
            const double mean = 0.5 + 0.2 * x[0] - 0.1 * x[1];
            data.add(x, bernoulli(rng, mean) ? 1.0 : 0.0);
        }
        const double fitted = erm_fit(cls, data, Loss::L2).provenance().empirical_loss;
        for (int k = 0; k < 2000; ++k) {
            std::vector<double> w(3);
            double norm = 0.0;
            for (auto& v : w) {
                v = 2 * uniform01(rng) - 1;
                norm += v * v;
            }
            if (norm > 1.0) continue;
            const auto probe = Predictor::linear(fm, w);
            EXPECT_LE(fitted, empirical_loss(probe, data, Loss::L2) + 1e-6);
        }
    }
}

TEST(Erm, L1WithinToleranceOfBestSubgradientRestart) {
    Rng rng(43);
    const FeatureMap fm{1, {}};
    const auto cls = FunctionClass::linear_clipped(fm);
    for (int trial = 0; trial < 3; ++trial) {
        LabeledDataset data(1);
        for (int i = 0; i < 40; ++i) {
            const std::vector<double> x{2 * uniform01(rng) - 1};
            data.add(x, clip01(0.5 + 0.3 * x[0] + 0.2 * (uniform01(rng) - 0.5)));
        }
        const double fitted = erm_fit(cls, data, Loss::L1).provenance().empirical_loss;
        EXPECT_LE(fitted, best_subgradient_l1(data, fm, rng) + 1e-6);
    }
}

TEST(GeneralizationError, Examples) {
    const auto truth = [](std::span<const double>) { return 0.0; };
    const auto half = [](std::span<const double>) { return 0.5; };
    const std::vector<std::pair<std::vector<double>, double>> point{{{0.0}, 1.0}};
    EXPECT_EQ(generalization_error(truth, truth, point, Loss::L1), 0.0);
    EXPECT_DOUBLE_EQ(generalization_error(half, truth, point, Loss::L1), 0.5);
}

TEST(GeneralizationError, MatchesMonteCarlo) {
    Rng rng(47);
    std::vector<std::pair<std::vector<double>, double>> dist;
    std::vector<double> w(6);
    double total = 0.0;
    for (auto& v : w) total += (v = uniform01(rng));
    for (std::size_t i = 0; i < 6; ++i) dist.push_back({{static_cast<double>(i)}, w[i] / total});
    const auto f = [](std::span<const double> x) { return 0.1 * x[0]; };
    const auto g = [](std::span<const double> x) { return 0.9 - 0.12 * x[0]; };
    const double exact = generalization_error(f, g, dist, Loss::L2);
    std::vector<double> probs;
    for (const auto& d : dist) probs.push_back(d.second);
    const std::size_t N = 100000;
    double sum = 0.0, sq = 0.0;
    for (std::size_t i = 0; i < N; ++i) {
        const std::vector<double> x{static_cast<double>(sample_categorical(probs, rng))};
        const double l = loss_value(Loss::L2, f(x), g(x));
        sum += l;
        sq += l * l;
    }
    const double mean = sum / N;
    EXPECT_NEAR(mean, exact, 3.0 * std::sqrt((sq / N - mean * mean) / N));
}

TEST(Erm, UniformConvergenceSmoke) {
    Rng rng(53);
    const std::size_t points = 10;
    std::vector<std::vector<double>> tables(20, std::vector<double>(points));
    for (auto& t : tables)
        for (auto& v : t) v = uniform01(rng);
    std::vector<FunctionClass::Member> members;
    for (const auto& t : tables) members.push_back([t](std::span<const double> x) { return t[static_cast<std::size_t>(x[0])]; });
    const auto cls = FunctionClass::finite(members, 1);
    std::vector<std::pair<std::vector<double>, double>> dist;
    for (std::size_t i = 0; i < points; ++i) dist.push_back({{static_cast<double>(i)}, 1.0 / points});
    const double eps = 0.2;
    const std::size_t n = n_rewards(cls, eps, 0.1, 1.0);
    int good = 0;
    for (int trial = 0; trial < 100; ++trial) {
        const auto& truth = members[uniform_index(rng, members.size())];
        LabeledDataset data(1);
        for (std::size_t i = 0; i < n; ++i) {
            const std::vector<double> x{static_cast<double>(uniform_index(rng, points))};
            data.add(x, bernoulli(rng, truth(x)) ? 1.0 : 0.0);
        }
        const auto f = erm_fit(cls, data, Loss::L2);
        if (generalization_error(f, truth, dist, Loss::L2) <= eps + cls.alpha2()) ++good;
    }
    EXPECT_GE(good, 90);
}

TEST(Dataset, JsonLinesRoundTrip) {
    LabeledDataset data(3);
    const std::vector<double> a{0.1, 2.0, 1.0}, b{-0.25, 0.0, 3.0};
    data.add(a, 0.37);
    data.add(b, 1.0);
    std::stringstream buf;
    dump_dataset(data, buf);
    EXPECT_EQ(buf.str().substr(0, buf.str().find('\n')), R"({"x":[0.1,2.0,1.0],"y":0.37})");
    const auto back = load_dataset(buf);
    ASSERT_EQ(back.size(), 2u);
    EXPECT_EQ(back.arity(), 3u);
    EXPECT_EQ(back.label(0), 0.37);
    EXPECT_EQ(back.input(1)[0], -0.25);
}

TEST(Dataset, RejectsBadLabelsAndArity) {
    LabeledDataset data(1);
    const std::vector<double> x{0.0}, xx{0.0, 1.0};
    EXPECT_THROW(data.add(x, 1.5), InvalidParameter);
    EXPECT_THROW(data.add(xx, 0.5), LengthMismatch);
}

TEST(Predictor, JsonRoundTrip) {
    const auto p = Predictor::linear(FeatureMap{1, {2}}, {0.1, 0.2, 0.3, 0.4});
    const auto q = Predictor::from_json(nlohmann::json::parse(p.to_json().dump()));
    const std::vector<double> x{0.5, 1.0};
    EXPECT_EQ(p(x), q(x));
    EXPECT_EQ(Predictor::from_json(Predictor::zero().to_json())(x), 0.0);
}
