// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include "monolex/autointerp.hpp"
#include "monolex/oracles.hpp"
#include "monolex/synthdata.hpp"

using namespace monolex;

namespace {

// One-feature model that reads coordinate 0 of a 1-d input.
SaeModel identity_model() {
    SaeModel m = init_model(1, 1, 0);
    m.W(0, 0) = 1.0;
    return m;
}

ActivationBatch column(const std::vector<double>& v) {
    ActivationBatch b;
    b.rows = Matrix(v.size(), 1, v);
    return b;
}

std::vector<ActivationSample> samples(const std::vector<double>& acts) {
    std::vector<ActivationSample> out;
    for (std::size_t i = 0; i < acts.size(); ++i) out.push_back({i, "t" + std::to_string(i), "ctx t" + std::to_string(i), i, acts[i]});
    return out;
}

// Simulator that answers each numbered context from a fixed table.
std::unique_ptr<CallbackClient> table_simulator(std::vector<int> values) {
    return std::make_unique<CallbackClient>("simulator", [values](const ChatRequest&) {
        std::string out;
        for (std::size_t i = 0; i < values.size(); ++i) out += std::to_string(i + 1) + ": " + std::to_string(values[i]) + "\n";
        return out;
    });
}

struct Bench {
    TrueDictionary truth;
    ActivationBatch batch;
    CoeffMatrix coeffs;
    TokenSidecar sidecar;
    SaeModel model;
};

Bench trained_bench() {
    Bench b;
    b.truth = generate_truth(32, 64, 21, 0);
    auto [batch, coeffs] = sample_activations(b.truth, 50000, 0.03, 0.0, 22);
    b.batch = std::move(batch);
    b.coeffs = std::move(coeffs);
    b.sidecar = synthetic_sidecar(b.batch.count());
    b.model = init_model(32, 4, 23);
    TrainConfig cfg;
    cfg.learning_rate = 1e-2;
    cfg.l1_coefficient = 0.02;
    cfg.single_pass = false;
    train(b.model, b.batch.rows, cfg);
    return b;
}

} // namespace

TEST(TopActivating, TiesGoToLowerRowAndZerosExcluded) {
    const auto m = identity_model();
    const auto batch = column({1.0, 0.0, 2.0, 5.0, -1.0, 0.5, 0.0, 5.0});
    const auto top = top_activating(m, batch, synthetic_sidecar(8), 0, 3);
    ASSERT_EQ(top.size(), 3u);
    EXPECT_EQ(top[0].row, 3u);
    EXPECT_EQ(top[1].row, 7u);
    EXPECT_EQ(top[2].row, 2u);
    EXPECT_EQ(top[0].token, "s3");
    EXPECT_EQ(top_activating(m, batch, {}, 0, 100).size(), 5u);
    EXPECT_EQ(top_activating(m, batch, {}, 0, 1)[0].token, "row3");
    EXPECT_THROW(top_activating(m, batch, {}, 1, 3), ValidationError);
    EXPECT_THROW(top_activating(m, batch, {}, 0, 0), ValidationError);
}

TEST(TopActivating, DeadFeatureIsEmpty) {
    auto m = identity_model();
    m.b_enc(0, 0) = -100.0;
    EXPECT_TRUE(top_activating(m, column({1, 2, 3}), {}, 0, 5).empty());
}

TEST(Quantize, ScaleAndClamp) {
    EXPECT_EQ(quantize_activation(5.0, 10.0), 5);
    EXPECT_EQ(quantize_activation(10.0, 10.0), 10);
    EXPECT_EQ(quantize_activation(12.0, 10.0), 10);
    EXPECT_EQ(quantize_activation(0.04, 1.0), 0);
    EXPECT_EQ(quantize_activation(0.05, 1.0), 1);
    EXPECT_EQ(quantize_activation(-1.0, 1.0), 0);
    EXPECT_EQ(quantize_activation(1.0, 0.0), 0);
}

TEST(Prompts, BracketAndExplainLines) {
    ActivationSample s{0, "flowed", "The champagne flowed at the wedding.", 2, 1.0};
    EXPECT_EQ(bracket_token(s), "The champagne [flowed] at the wedding.");
    s.context = "unrelated";
    EXPECT_EQ(bracket_token(s), "unrelated [flowed]");
    const auto p = explain_prompt(samples({4.0, 2.0}));
    EXPECT_NE(p.find("1. ctx [t0] => 10\n2. ctx [t1] => 5"), std::string::npos);
    EXPECT_EQ(p.find("{{"), std::string::npos);
}

TEST(Explain, KeepsFirstLineOnly) {
    ScriptedClient c("explainer", {"\n  numbers in equations  \nsecond line"});
    std::vector<Exchange> log;
    EXPECT_EQ(explain_feature(c, samples({1, 2}), &log), "numbers in equations");
    EXPECT_EQ(log.size(), 1u);
    EXPECT_THROW(explain_feature(c, {}), ValidationError);
    ScriptedClient blank("explainer", {"   \n"});
    EXPECT_THROW(explain_feature(blank, samples({1})), ClientError);
}

TEST(Pearson, KnownValues) {
    EXPECT_NEAR(pearson({1, 2, 3}, {2, 4, 6}), 1.0, 1e-15);
    EXPECT_NEAR(pearson({1, 2, 3}, {3, 2, 1}), -1.0, 1e-15);
    // Hand-computed: means 2.5 and 2, sxy = 1.5 + 0 + 0 + 1.5 = 3, sxx = 5, syy = 2.
    EXPECT_NEAR(pearson({1, 2, 3, 4}, {1, 2, 2, 3}), 3.0 / std::sqrt(10.0), 1e-15);
    EXPECT_TRUE(std::isnan(pearson({1, 1, 1}, {1, 2, 3})));
}

TEST(ParseSimulation, AcceptsVariantsRejectsDefects) {
    EXPECT_EQ(parse_simulation("1: 3\n2: 10\n", 2), (std::vector<int>{3, 10}));
    EXPECT_EQ(parse_simulation("2) 4\n 1 = 0", 2), (std::vector<int>{0, 4}));
    EXPECT_FALSE(parse_simulation("1: 3", 2));
    EXPECT_FALSE(parse_simulation("1: 3\n1: 4", 2));
    EXPECT_FALSE(parse_simulation("1: 11\n2: 0", 2));
    EXPECT_FALSE(parse_simulation("Sure!\n1: 1\n2: 2", 2));
    EXPECT_FALSE(parse_simulation("1: 1\n3: 2", 2));
}

TEST(SimulateAndScore, PerfectAndAntiCorrelated) {
    const auto held = samples({10, 5, 0, 2});
    EXPECT_NEAR(simulate_and_score(*table_simulator({10, 5, 0, 2}), "d", held), 1.0, 1e-12);
    EXPECT_NEAR(simulate_and_score(*table_simulator({0, 5, 10, 8}), "d", held), -1.0, 1e-12);
    EXPECT_EQ(simulate_and_score(*table_simulator({3, 3, 3, 3}), "d", held), 0.0);
}

TEST(SimulateAndScore, UndefinedAndTooFew) {
    auto sim = table_simulator({1, 2, 3});
    try {
        simulate_and_score(*sim, "d", samples({2, 2, 2}));
        FAIL();
    } catch (const ValidationError& e) {
        EXPECT_NE(std::string(e.what()).find("undefined correlation"), std::string::npos);
    }
    EXPECT_THROW(simulate_and_score(*sim, "d", samples({1, 2})), ValidationError);
    EXPECT_EQ(sim->stats().calls, 0u);
}

TEST(SimulateAndScore, OneRepromptThenFail) {
    const auto held = samples({10, 5, 0});
    ScriptedClient fixed("simulator", {"I think these are high.", "1: 10\n2: 5\n3: 0"});
    std::vector<Exchange> log;
    EXPECT_NEAR(simulate_and_score(fixed, "d", held, 0.0, &log), 1.0, 1e-12);
    ASSERT_EQ(log.size(), 2u);
    EXPECT_EQ(log[1].messages.size(), 3u);
    EXPECT_NE(log[1].messages[2].content.find("3"), std::string::npos);

    ScriptedClient broken("simulator", {"nope", "still nope", "1: 10\n2: 5\n3: 0"});
    EXPECT_THROW(simulate_and_score(broken, "d", held), ClientError);
    EXPECT_EQ(broken.stats().calls, 2u);
}

TEST(Oracles, ExplainAndSimulateFromTruth) {
    const auto truth = generate_truth(8, 3, 1, 30);
    CoeffMatrix coeffs(4, 3, std::vector<double>{0.9, 0, 0, 0.5, 0.2, 0, 0, 0.3, 0, 0.1, 0, 0.7});
    auto explainer = truth_explainer("explainer", truth, synthetic_lookup(coeffs));
    std::vector<ActivationSample> top{{0, "s0", "synthetic sample s0", 0, 0.9},
                                      {1, "s1", "synthetic sample s1", 1, 0.5}};
    EXPECT_EQ(explain_feature(*explainer, top), truth.labels[0]);

    auto simulator = truth_simulator("simulator", truth, synthetic_lookup(coeffs));
    std::vector<ActivationSample> held{{0, "s0", "synthetic sample s0", 0, 0.9},
                                       {2, "s2", "synthetic sample s2", 2, 0.0},
                                       {3, "s3", "synthetic sample s3", 3, 0.1}};
    const auto reply = ask(*simulator, {{"user", simulate_prompt(truth.labels[0], held)}});
    EXPECT_EQ(reply, "1: 9\n2: 0\n3: 1\n");
    const auto unknown = ask(*simulator, {{"user", simulate_prompt("something else", held)}});
    EXPECT_EQ(unknown, "1: 0\n2: 0\n3: 0\n");
}

TEST(AnnotateAll, OracleModelValidatesEveryFeature) {
    const auto truth = generate_truth(16, 12, 3, 60);
    const auto [batch, coeffs] = sample_activations(truth, 3000, 0.1, 0.0, 4);
    const auto m = oracle_model(truth);
    auto explainer = truth_explainer("explainer", truth, synthetic_lookup(coeffs));
    auto simulator = truth_simulator("simulator", truth, synthetic_lookup(coeffs));
    AnnotateConfig cfg;
    const auto res = annotate_all(m, batch, synthetic_sidecar(batch.count()), *explainer, *simulator, cfg);
    EXPECT_EQ(res.alive, 12u);
    EXPECT_EQ(res.failed, 0u);
    EXPECT_EQ(res.validated_fraction, 1.0);
    for (std::size_t f = 0; f < 12; ++f) {
        EXPECT_EQ(res.dictionary.at(f).description, truth.labels[f]);
        ASSERT_TRUE(res.dictionary.at(f).interp_score);
        EXPECT_GE(*res.dictionary.at(f).interp_score, 0.7);
    }
}

TEST(AnnotateAll, SplitIsDisjointAndDeterministic) {
    const auto truth = generate_truth(8, 4, 5, 45);
    const auto [batch, coeffs] = sample_activations(truth, 400, 0.2, 0.0, 6);
    const auto m = oracle_model(truth);
    auto explainer = truth_explainer("explainer", truth, synthetic_lookup(coeffs));
    auto simulator = truth_simulator("simulator", truth, synthetic_lookup(coeffs));
    AnnotateConfig cfg;
    cfg.seed = 9;
    const auto sc = synthetic_sidecar(batch.count());
    const auto a = annotate_all(m, batch, sc, *explainer, *simulator, cfg);
    cfg.jobs = 3;
    const auto b = annotate_all(m, batch, sc, *explainer, *simulator, cfg);
    EXPECT_EQ(annotation_report_jsonl(a), annotation_report_jsonl(b));
    for (const auto& r : a.report) {
        EXPECT_EQ(r.explain_rows.size(), 15u);
        EXPECT_EQ(r.score_rows.size(), 5u + cfg.random_holdout);
        std::set<std::size_t> e(r.explain_rows.begin(), r.explain_rows.end());
        for (auto row : r.score_rows) EXPECT_EQ(e.count(row), 0u);
        std::set<std::size_t> s(r.score_rows.begin(), r.score_rows.end());
        EXPECT_EQ(s.size(), r.score_rows.size());
    }
    cfg.seed = 10;
    const auto c = annotate_all(m, batch, sc, *explainer, *simulator, cfg);
    EXPECT_NE(a.report[0].explain_rows, c.report[0].explain_rows);
}

TEST(AnnotateAll, AllDeadGivesZeroFraction) {
    auto m = identity_model();
    m.b_enc(0, 0) = -100.0;
    ScriptedClient e("explainer", {}), s("simulator", {});
    const auto res = annotate_all(m, column({1, 2, 3}), {}, e, s, AnnotateConfig{});
    EXPECT_EQ(res.alive, 0u);
    EXPECT_EQ(res.validated_fraction, 0.0);
    EXPECT_EQ(res.report[0].status, AnnotationStatus::Dead);
    EXPECT_FALSE(res.dictionary.at(0).interp_score);
    EXPECT_EQ(e.stats().calls, 0u);
}

TEST(AnnotateAll, AbortsWhenMostFeaturesFail) {
    const auto truth = generate_truth(8, 4, 5, 45);
    const auto [batch, coeffs] = sample_activations(truth, 400, 0.2, 0.0, 6);
    const auto m = oracle_model(truth);
    CallbackClient explainer("explainer", [](const ChatRequest&) { return "numbers"; });
    CallbackClient garbage("simulator", [](const ChatRequest&) { return "no idea"; });
    try {
        annotate_all(m, batch, synthetic_sidecar(400), explainer, garbage, AnnotateConfig{});
        FAIL();
    } catch (const ClientError& e) {
        EXPECT_NE(std::string(e.what()).find("annotation aborted"), std::string::npos);
    }
}

TEST(AnnotateAll, ValidatedFractionOnTrainedSyntheticBenchmark) {
    const auto b = trained_bench();
    auto explainer = truth_explainer("explainer", b.truth, synthetic_lookup(b.coeffs));
    auto simulator = truth_simulator("simulator", b.truth, synthetic_lookup(b.coeffs));
    AnnotateConfig cfg;
    cfg.jobs = 4;
    const auto res = annotate_all(b.model, b.batch, b.sidecar, *explainer, *simulator, cfg);
    EXPECT_EQ(res.alive, 64u);
    EXPECT_GE(res.validated_fraction, 0.93);
}
