// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "monolex/sae.hpp"
#include "monolex/synthdata.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace monolex;

using oracle::naive_loss;
using oracle::random_batch;
using oracle::random_model;

TEST(Sae, InitShapesAndUnitRows) {
    const auto m = init_model(4, 2, 3);
    EXPECT_EQ(m.h, 8u);
    for (std::size_t i = 0; i < m.h; ++i) EXPECT_NEAR(l2_norm(m.W.row(i)), 1.0, 1e-12);
    EXPECT_EQ(init_model(4, 2, 3), m);
    EXPECT_EQ(init_model(2048, 4, 0).h, 8192u);
}

TEST(Sae, FitNormalizerStandardizesAndClamps) {
    auto m = init_model(3, 1, 0);
    Matrix X = random_batch(200, 3, 5);
    for (std::size_t r = 0; r < 200; ++r) X(r, 2) = 7.0;
    fit_normalizer(m, X);
    EXPECT_DOUBLE_EQ(m.sigma[2], 1e-6);
    double mean0 = 0;
    for (std::size_t r = 0; r < 200; ++r) mean0 += normalize_input(m, X.row(r))[0];
    EXPECT_LT(std::abs(mean0 / 200), 1e-10);
    EXPECT_EQ(normalize_input(m, X.row(0))[2], 0.0);
    EXPECT_THROW(fit_normalizer(m, Matrix(1, 3)), ValidationError);
}

TEST(Sae, ForwardHandCase) {
    SaeModel m = init_model(1, 1, 0);
    m.W(0, 0) = 1.0;
    const auto f = forward(m, std::vector<double>{2.0});
    EXPECT_EQ(f.features[0], 2.0);
    EXPECT_EQ(f.reconstruction[0], 2.0);
    EXPECT_THROW(forward(m, std::vector<double>{1.0, 2.0}), ValidationError);
}

TEST(Sae, DeadEncoderReconstructsBias) {
    auto m = random_model(3, 6, 2);
    for (double& b : m.b_enc.values()) b = -1e6;
    const auto f = forward(m, std::vector<double>{0.1, 0.2, 0.3});
    for (double s : f.features) EXPECT_EQ(s, 0.0);
    for (std::size_t j = 0; j < 3; ++j) EXPECT_DOUBLE_EQ(f.reconstruction[j], m.sigma[j] * m.b_dec(0, j) + m.mu[j]);
    const auto g = gradients(m, random_batch(4, 3, 1), 0.1);
    for (double v : g.b_enc.values()) EXPECT_EQ(v, 0.0);
}

TEST(Sae, FusedForwardMatchesSplitPath) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const auto m = random_model(5, 11, seed);
        const auto X = random_batch(3, 5, seed + 50);
        for (std::size_t r = 0; r < 3; ++r) {
            const auto f = forward(m, X.row(r));
            EXPECT_EQ(f.features, encode(m, X.row(r)));
            EXPECT_EQ(f.reconstruction, decode(m, encode(m, X.row(r))));
        }
    }
}

TEST(Sae, LossWorkedExample) {
    // One sample x=[1,0] with x^=[0,0] and ||s||_1 = 3.
    SaeModel m = init_model(2, 1, 0);
    m.h = 1;
    m.W = Matrix(1, 2, std::vector<double>{0.0, 1.0});
    m.b_enc = Matrix(1, 1, 3.0);
    m.b_dec = Matrix(1, 2, std::vector<double>{0.0, -3.0});
    const auto l = loss(m, Matrix(1, 2, std::vector<double>{1.0, 0.0}), 0.1);
    EXPECT_DOUBLE_EQ(l.reconstruction, 1.0);
    EXPECT_DOUBLE_EQ(l.sparsity, 3.0);
    EXPECT_DOUBLE_EQ(l.total, 1.3);
}

TEST(Sae, LossMatchesNaiveEvaluator) {
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        const auto m = random_model(2 + seed % 7, 3 + seed % 13, seed);
        const auto X = random_batch(16, m.d, seed * 7 + 1);
        const double lambda = (seed % 3) * 0.05;
        const auto a = loss(m, X, lambda), b = naive_loss(m, X, lambda);
        EXPECT_NEAR(a.reconstruction, b.reconstruction, 1e-12);
        EXPECT_NEAR(a.sparsity, b.sparsity, 1e-12);
        EXPECT_NEAR(a.total, b.total, 1e-12);
        EXPECT_EQ(a.total, a.reconstruction + lambda * a.sparsity);
    }
    EXPECT_THROW(loss(random_model(2, 2, 0), Matrix(0, 2), 0.0), ValidationError);
}

TEST(Sae, GradientsMatchFiniteDifferences) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const std::size_t d = 2 + seed % 7, h = 3 + seed % 14;
        const auto m = random_model(d, h, seed);
        const auto X = random_batch(1 + seed % 4, d, seed + 99);
        const double lambda = seed % 2 ? 0.1 : 0.0;
        const auto g = gradients(m, X, lambda);
        auto with = [&](auto setter) {
            return [=](const Matrix& p) {
                SaeModel q = m;
                setter(q, p);
                return loss(q, X, lambda).total;
            };
        };
        EXPECT_LE(check_gradient(with([](SaeModel& q, const Matrix& p) { q.W = p; }), m.W, g.W), 1e-4) << seed;
        EXPECT_LE(check_gradient(with([](SaeModel& q, const Matrix& p) { q.b_enc = p; }), m.b_enc, g.b_enc), 1e-4) << seed;
        EXPECT_LE(check_gradient(with([](SaeModel& q, const Matrix& p) { q.b_dec = p; }), m.b_dec, g.b_dec), 1e-4) << seed;
    }
}

TEST(Sae, ZeroResidualLeavesOnlyEncoderPath) {
    // d = h = 1, W = [1], x = 2: perfect reconstruction with s > 0.
    SaeModel m = init_model(1, 1, 0);
    m.W(0, 0) = 1.0;
    const auto g = gradients(m, Matrix(1, 1, std::vector<double>{2.0}), 0.0);
    EXPECT_EQ(g.W(0, 0), 0.0);
    EXPECT_EQ(g.b_dec(0, 0), 0.0);
}

TEST(Sae, TrainStepsScheduleAndUnitRows) {
    auto truth = generate_truth(8, 16, 1, 0);
    auto [batch, coeffs] = sample_activations(truth, 64, 0.2, 0.0, 2);
    auto m = init_model(8, 2, 3);
    TrainConfig cfg;
    cfg.batch_size = 16;
    cfg.log_every = 1;
    const auto rep = train(m, batch.rows, cfg);
    EXPECT_EQ(rep.steps, 4u);
    EXPECT_EQ(rep.history.size(), 4u);
    EXPECT_EQ(rep.sample_count, 64u);
    std::set<std::size_t> seen(rep.schedule.begin(), rep.schedule.end());
    EXPECT_EQ(seen.size(), 64u);
    EXPECT_EQ(rep.schedule.size(), 64u);
    for (std::size_t i = 0; i < m.h; ++i) EXPECT_LT(std::abs(1.0 - l2_norm(m.W.row(i))), 1e-8);

    auto m2 = init_model(8, 2, 3);
    train(m2, batch.rows, cfg);
    EXPECT_EQ(m, m2);

    cfg.single_pass = false;
    cfg.epochs = 3;
    auto m3 = init_model(8, 2, 3);
    EXPECT_EQ(train(m3, batch.rows, cfg).steps, 12u);
    EXPECT_THROW(train(m3, Matrix(4, 5), cfg), ValidationError);
}

TEST(Sae, DefaultProfileHalvesLossOnSyntheticStream) {
    const auto truth = generate_truth(32, 64, 11, 0);
    const auto [batch, coeffs] = sample_activations(truth, 50000, 0.03, 0.0, 12);
    auto m = init_model(32, 4, 13);
    TrainConfig cfg;
    const auto rep = train(m, batch.rows, cfg);
    EXPECT_LT(rep.final.total, 0.5 * rep.initial.total);
}

TEST(Sae, MetricsDeadAndPerfect) {
    auto m = random_model(3, 5, 4);
    for (double& b : m.b_enc.values()) b = -10;
    m.W = Matrix(5, 3, std::vector<double>{1, 0, 0, 0, 1, 0, 0, 0, 1, 1, 0, 0, 0, 1, 0});
    const auto mt = metrics(m, random_batch(10, 3, 1));
    EXPECT_EQ(mt.sparsity_fraction, 0.0);
    EXPECT_EQ(mt.dead_features, 5u);

    SaeModel id = init_model(1, 1, 0);
    id.W(0, 0) = 1.0;
    const auto perfect = metrics(id, Matrix(1, 1, std::vector<double>{2.0}));
    EXPECT_EQ(perfect.mse, 0.0);
    EXPECT_EQ(perfect.dead_features, 0u);
    EXPECT_EQ(perfect.sparsity_fraction, 1.0);
}

TEST(Sae, MetricsMseIsPerCoordinate) {
    const auto m = random_model(4, 6, 8);
    const auto X = random_batch(20, 4, 9);
    const auto mt = metrics(m, X);
    const auto l = naive_loss(m, X, 0.0);
    EXPECT_NEAR(mt.sq_error_per_sample, l.reconstruction, 1e-12);
    EXPECT_NEAR(mt.mse, l.reconstruction / 4.0, 1e-12);
}

TEST(Sae, MmcsCases) {
    const auto truth = generate_truth(6, 4, 3, 30);
    EXPECT_NEAR(mmcs(truth.directions, truth.directions), 1.0, 1e-12);
    Matrix flipped = truth.directions;
    for (double& v : flipped.row(2)) v = -v;
    EXPECT_NEAR(mmcs(flipped, truth.directions), 1.0, 1e-12);
    Matrix a(1, 2, std::vector<double>{1, 0}), b(1, 2, std::vector<double>{0, 1});
    EXPECT_EQ(mmcs(a, b), 0.0);
    EXPECT_EQ(matched_fraction(a, b, 0.9), 0.0);
    EXPECT_EQ(matched_fraction(truth.directions, truth.directions, 0.9), 1.0);
    EXPECT_THROW(mmcs(a, Matrix(1, 3)), ValidationError);
}

TEST(Sae, ModelFileRoundTripAndErrors) {
    testutil::TempDir tmp;
    auto m = random_model(5, 9, 21);
    m.l1_coefficient = 0.02;
    write_model(m, tmp / "m.sae");
    EXPECT_EQ(read_model(tmp / "m.sae"), m);
    auto bytes = testutil::slurp(tmp / "m.sae");
    testutil::spit(tmp / "t.sae", bytes.substr(0, bytes.size() - 3));
    EXPECT_THROW(read_model(tmp / "t.sae"), FormatError);
    bytes[0] = 'X';
    testutil::spit(tmp / "b.sae", bytes);
    EXPECT_THROW(read_model(tmp / "b.sae"), FormatError);
}

TEST(Sae, DictionaryFromModelIsValid) {
    const auto m = random_model(4, 7, 5);
    const auto dict = dictionary_from_model(m);
    EXPECT_NO_THROW(validate(dict));
    EXPECT_EQ(dict.size(), 7u);
    EXPECT_FALSE(dict.at(0).description.has_value());
}
