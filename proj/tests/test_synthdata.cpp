// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "monolex/synthdata.hpp"
#include "test_util.hpp"

using namespace monolex;

TEST(Truth, UnitDirectionsAndRoundRobinLabels) {
    const auto t = generate_truth(8, 12, 4, 0);
    for (std::size_t f = 0; f < 12; ++f) EXPECT_NEAR(l2_norm(t.directions.row(f)), 1.0, 1e-9);
    EXPECT_EQ(t.categories[0], "math");
    EXPECT_EQ(t.categories[5], "math");
    EXPECT_EQ(t.categories[6], "code");
}

TEST(Truth, NearOrthogonalPair) {
    const auto t = generate_truth(2, 2, 1, 89);
    EXPECT_LE(std::abs(dot(t.directions.row(0), t.directions.row(1))), std::cos(89 * M_PI / 180) + 1e-12);
}

TEST(Truth, PairwiseAnglesBruteForce) {
    const auto t = generate_truth(16, 64, 7, 20);
    std::size_t pairs = 0;
    for (std::size_t a = 0; a < 64; ++a)
        for (std::size_t b = a + 1; b < 64; ++b) {
            const double c = std::clamp(dot(t.directions.row(a), t.directions.row(b)), -1.0, 1.0);
            EXPECT_GE(std::acos(c) * 180 / M_PI, 20.0 - 1e-9);
            ++pairs;
        }
    EXPECT_EQ(pairs, 2016u);
}

TEST(Truth, InfeasiblePackingFails) {
    try {
        generate_truth(2, 100, 0, 80, {}, 500);
        FAIL();
    } catch (const ValidationError& e) {
        EXPECT_NE(std::string(e.what()).find("smaller n_features"), std::string::npos);
    }
    EXPECT_THROW(generate_truth(1, 2, 0, 0), ValidationError);
    EXPECT_THROW(generate_truth(4, 2, 0, 90), ValidationError);
}

TEST(Samples, SingleFeatureRowsArePositiveMultiples) {
    const auto t = generate_truth(5, 1, 2, 0);
    const auto [b, g] = sample_activations(t, 50, 1.0, 0.0, 3);
    for (std::size_t r = 0; r < 50; ++r) {
        EXPECT_GT(g(r, 0), 0.0);
        EXPECT_LE(g(r, 0), 1.0);
        for (std::size_t j = 0; j < 5; ++j) EXPECT_NEAR(b.rows(r, j), g(r, 0) * t.directions(0, j), 1e-15);
    }
}

TEST(Samples, NoiselessRowsEqualCoefficientsTimesDirections) {
    const auto t = generate_truth(12, 30, 5, 0);
    const auto [b, g] = sample_activations(t, 500, 0.1, 0.0, 6);
    double worst = 0;
    for (std::size_t r = 0; r < 500; ++r)
        for (std::size_t j = 0; j < 12; ++j) {
            double x = 0;
            for (std::size_t f = 0; f < 30; ++f) x += g(r, f) * t.directions(f, j);
            worst = std::max(worst, std::abs(x - b.rows(r, j)));
        }
    EXPECT_LT(worst, 1e-12);
}

TEST(Samples, NonzeroFractionConcentrates) {
    const auto t = generate_truth(16, 64, 1, 0);
    const auto [b, g] = sample_activations(t, 10000, 0.05, 0.0, 2);
    std::size_t nz = 0;
    for (double v : g.values()) nz += v > 0.0;
    const double frac = double(nz) / g.size();
    EXPECT_GE(frac, 0.045);
    EXPECT_LE(frac, 0.055);
}

TEST(Samples, DeterministicAndPrefixStable) {
    const auto t = generate_truth(6, 10, 1, 0);
    const auto a = sample_activations(t, 100, 0.2, 0.1, 9);
    const auto b = sample_activations(t, 100, 0.2, 0.1, 9);
    EXPECT_EQ(a.first, b.first);
    const auto c = sample_activations(t, 40, 0.2, 0.1, 9);
    for (std::size_t r = 0; r < 40; ++r)
        for (std::size_t j = 0; j < 6; ++j) EXPECT_EQ(c.first.rows(r, j), a.first.rows(r, j));
    EXPECT_THROW(sample_activations(t, 1, 0.0, 0.0, 0), ValidationError);
    EXPECT_THROW(sample_activations(t, 1, 0.5, -1.0, 0), ValidationError);
}

namespace {

WorldFile tiny_world(double noise) {
    const json j = {{"truth", {{"dim", 24}, {"seed", 3}, {"min_angle", 80},
                               {"features", json::array({{{"category", "punctuation"}, {"label", "p"}},
                                                         {{"category", "personal"}, {"label", "q"}},
                                                         {{"category", "math"}, {"label", "m"}}})}}},
                    {"noise", noise},
                    {"tokens", json::array({{{"token", "<"},
                                             {"mixture", json::array({{{"feature", 2}, {"weight", 0.2}},
                                                                      {{"feature", 0}, {"weight", 0.5}},
                                                                      {{"feature", 1}, {"weight", 0.3}}})}},
                                            {{"token", "x"}, {"mixture", json::array({{{"feature", 2}, {"weight", 1.0}}})}}})}};
    return world_from_json(j);
}

} // namespace

TEST(TokenWorld, PureTokenEqualsDirection) {
    const auto w = tiny_world(0.0);
    const auto [b, sc] = token_activations(w.world, w.truth, {"x"}, 0);
    for (std::size_t j = 0; j < 24; ++j) EXPECT_EQ(b.rows(0, j), w.truth.directions(2, j));
    EXPECT_EQ(sc.records[0].token, "x");
}

TEST(TokenWorld, OracleRanksMathThirdForLessThan) {
    const auto w = tiny_world(0.0);
    const auto [b, sc] = token_activations(w.world, w.truth, {"<"}, 0);
    const auto s = encode(oracle_model(w.truth), b.rows.row(0));
    EXPECT_GT(s[0], s[1]);
    EXPECT_GT(s[1], s[2]);
    EXPECT_GT(s[2], 0.0);
    EXPECT_EQ(w.world.mixtures.at("<").front().feature, 0u);
}

TEST(TokenWorld, ProjectionsStayNearWeights) {
    const auto w = tiny_world(0.01);
    std::vector<std::string> toks(2000, "<");
    const auto [b, sc] = token_activations(w.world, w.truth, toks, 4);
    std::size_t within = 0;
    for (std::size_t r = 0; r < toks.size(); ++r) {
        bool ok = true;
        for (const auto& e : w.world.mixtures.at("<")) {
            // Cross-talk from other mixture directions is bounded by cos(80 deg) * weight.
            double leak = 0;
            for (const auto& o : w.world.mixtures.at("<"))
                if (o.feature != e.feature)
                    leak += o.weight * std::abs(dot(w.truth.directions.row(o.feature), w.truth.directions.row(e.feature)));
            ok &= std::abs(dot(b.rows.row(r), w.truth.directions.row(e.feature)) - e.weight) <= leak + 3 * 0.01;
        }
        within += ok;
    }
    EXPECT_GE(double(within) / toks.size(), 0.99);
}

TEST(TokenWorld, ErrorsAndEmpty) {
    const auto w = tiny_world(0.0);
    EXPECT_THROW(token_activations(w.world, w.truth, {"flowed"}, 0), ValidationError);
    EXPECT_EQ(token_activations(w.world, w.truth, {}, 0).first.count(), 0u);
    json bad = {{"truth", {{"dim", 4}, {"seed", 1}, {"features", json::array({{{"category", "a"}, {"label", "b"}}})}}},
                {"tokens", json::array({{{"token", "t"}, {"mixture", json::array({{{"feature", 0}, {"weight", 0.7}}})}}})}};
    EXPECT_THROW(world_from_json(bad), ValidationError);
    bad["tokens"][0]["mixture"][0] = {{"feature", 3}, {"weight", 1.0}};
    EXPECT_THROW(world_from_json(bad), ValidationError);
}
