// SPDX-License-Identifier: Apache-2.0
//
// Mock endpoints for the worked examples and the small benchmark sets. Each
// endpoint is a rule-based callback; running the pipelines through recording
// clients freezes every request/reply pair into fixtures/mock/<endpoint>.jsonl.
#pragma once

#include "monolex/evalbench.hpp"

namespace monolex::mock {

inline const std::string kModel = "mock";

inline const std::string kMathQuestion = "If |4x+2|=10 and x<0, what is the value of x?";
inline const std::string kMathRephrased =
    "If the absolute value of 4x+2 equal to 10 and x is less than 0, what is the value of x?";
inline const std::string kMathOriginalAnswer =
    "Let's assume that x is a positive integer. Then, we can write the equation: 4x + 2 = 10 Subtracting 2 from both "
    "sides, we get: 4x = 8 Dividing both sides by 4, we get: x = 2 Therefore, the value of x is 2.";
inline const std::string kMathEnhancedAnswer =
    "Let's assume that x is less than 0. According to the given information, the absolute value of 4x+2 is equal to "
    "10. So, we can write the equation as: |4x+2| = 10 To solve this equation, we can consider two cases:Case 1: "
    "4x+2 = 10 Subtracting 2 from both sides of the equation, we get: 4x = 8 Dividing both sides of the equation by "
    "4, we get: x = 2. Case 2: 4x+2 = -10 Subtracting 2 from both sides of the equation, we get: 4x = -12 Dividing "
    "both sides of the equation by 4, we get: x = -3 Since x is less than 0, the only valid solution is x = -3. "
    "Therefore, the value of x is -3.";

inline const std::string kSentence = "The champagne flowed at the wedding.";
inline const std::string kTarget = "flowed";
inline const std::string kClarification = "'flowed' implies a free and plentiful availability.";
inline const std::string kMetaphorOriginalAnswer =
    "The phrase \"The champagne flowed at the wedding\" is a literal expression. In this context, the word 'flowed' "
    "describes the actual movement of champagne being poured and spilling freely as would be expected of sparkling "
    "wine.";
inline const std::string kMetaphorEnhancedAnswer =
    "In the context of the sentence, \"The champagne flowed at the wedding,\" the term 'flowed' is being used in a "
    "metaphorical sense. Literally, 'flowed' means to move smoothly and continuously like water or another liquid. "
    "Here, it isn't used to describe the actual movement of champagne but rather the abundance and continuous "
    "presence of champagne at the wedding, almost like a flowing water current.";

struct MathCase {
    std::string id, question, answer, rephrased, plain_reply, misread_reply;
};

inline const std::vector<MathCase>& math_cases() {
    static const std::vector<MathCase> c{
        {"plain-sum", "What is 3+4?", "7", "", "3 + 4 = 7.", ""},
        {"abs-linear", kMathQuestion, "-3", kMathRephrased, kMathEnhancedAnswer, kMathOriginalAnswer},
        {"abs-var", "If |x|=5 and x<0, what is x?", "-5",
         "If the absolute value of x is 5 and x is less than 0, what is x?",
         "The absolute value of x is 5, so x = 5 or x = -5. Since x is less than 0, x = -5.",
         "Taking x as positive, x = 5."},
        // The rephraser drops the sign condition every time, so the judge
        // rejects each attempt and the original question is kept.
        {"abs-scaled", "If |2x|=8 and x<0, what is x?", "-4", "If 2x is 8, what is x?", "2x = 8, so x = 4.",
         "Treating the bars as grouping, 2x = 8, so x = 4."},
    };
    return c;
}

struct MetaphorCase {
    std::string id, sentence, target, label, dataset, gloss, clarification, misread_reply, clarified_reply;
};

inline const std::vector<MetaphorCase>& metaphor_cases() {
    static const std::vector<MetaphorCase> c{
        {"champagne", kSentence, kTarget, "metaphorical", "MOH-X", "free and plentiful availability", kClarification, kMetaphorOriginalAnswer,
         kMetaphorEnhancedAnswer},
        {"drain", "Water flowed down the drain.", "flowed", "literal", "MOH-X", "", "",
         "It is a literal expression: water physically moved down the drain.", ""},
        {"prices", "Prices soared after the announcement.", "soared", "metaphorical", "TroFi", "rose quickly and sharply",
         "'soared' means rose quickly and sharply.", "It is a literal expression: the prices went up.",
         "Here 'soared' is metaphorical: prices do not fly, they rose quickly."},
        {"eagle", "The eagle soared above the valley.", "soared", "literal", "TroFi", "", "",
         "It is a literal expression: the eagle flew high above the valley.", ""},
    };
    return c;
}

namespace detail {

inline std::string after(const std::string& text, const std::string& label) {
    const auto at = text.find(label);
    if (at == std::string::npos) return {};
    const auto start = at + label.size();
    return text.substr(start, text.find('\n', start) - start);
}

} // namespace detail

inline std::unique_ptr<ChatClient> rephraser() {
    return std::make_unique<CallbackClient>("rephraser", [](const ChatRequest& r) {
        const auto question = detail::after(r.messages.front().content, "Question: ");
        for (const auto& c : math_cases())
            if (c.question == question) return c.rephrased;
        return std::string("I cannot rewrite this question.");
    }, kModel);
}

inline std::unique_ptr<ChatClient> judge() {
    return std::make_unique<CallbackClient>("judge", [](const ChatRequest& r) {
        const auto candidate = detail::after(r.messages.front().content, "Rewritten: ");
        if (candidate == "If 2x is 8, what is x?") return std::string("NOT_EQUIVALENT: the condition x < 0 was dropped");
        return std::string("EQUIVALENT: same equation, same condition, same unknown");
    }, kModel);
}

inline std::unique_ptr<ChatClient> subject() {
    return std::make_unique<CallbackClient>("subject", [](const ChatRequest& r) {
        const auto& q = r.messages.back().content;
        for (const auto& c : math_cases()) {
            if (q == c.question) return c.misread_reply.empty() ? c.plain_reply : c.misread_reply;
            if (!c.rephrased.empty() && q == c.rephrased) return c.plain_reply;
        }
        for (const auto& c : metaphor_cases()) {
            if (q == metaphor_query(c.sentence, c.target)) return c.misread_reply;
            if (!c.clarification.empty() && q == c.sentence + " " + c.clarification + " " + detection_question(c.target))
                return c.clarified_reply;
        }
        return std::string("I am not sure.");
    }, kModel);
}

inline std::unique_ptr<ChatClient> metaphor_judge() {
    return std::make_unique<CallbackClient>("metaphor_judge", [](const ChatRequest& r) {
        const auto sentence = detail::after(r.messages.front().content, "Sentence: ");
        for (const auto& c : metaphor_cases())
            if (c.sentence == sentence)
                return c.gloss.empty() ? std::string("NO: the literal sense is intended") : "YES: " + c.gloss;
        return std::string("NO: unfamiliar sentence");
    }, kModel);
}

inline std::unique_ptr<ChatClient> clarifier() {
    return std::make_unique<CallbackClient>("clarifier", [](const ChatRequest& r) {
        const auto sentence = detail::after(r.messages.front().content, "Sentence: ");
        for (const auto& c : metaphor_cases())
            if (c.sentence == sentence) return c.clarification;
        return std::string("No clarification available.");
    }, kModel);
}

inline std::vector<std::string> endpoint_names() {
    return {"rephraser", "judge", "subject", "metaphor_judge", "clarifier"};
}

inline json config() {
    json eps = json::object();
    for (const auto& n : endpoint_names()) eps[n] = {{"fixture", n + ".jsonl"}, {"model", kModel}};
    return {{"clients", {{"endpoints", eps}}}, {"reformulate", {{"max_attempts", 3}}}, {"detect", {{"top_k", 3}, {"depth", 1}}}};
}

inline std::string math_jsonl() {
    std::string out;
    for (const auto& c : math_cases())
        out += json{{"id", c.id}, {"problem", c.question}, {"level", "Level 1"}, {"type", "Algebra"},
                    {"solution", "The answer is $\\boxed{" + c.answer + "}$."}}
                   .dump() +
               "\n";
    return out;
}

inline std::string metaphor_tsv() {
    std::string out = "id\tsentence\ttarget\tlabel\tdataset\n";
    for (const auto& c : metaphor_cases())
        out += c.id + "\t" + c.sentence + "\t" + c.target + "\t" + c.label + "\t" + c.dataset + "\n";
    return out;
}

/// Writes config.json, math.jsonl, metaphor.tsv and one fixture file per
/// endpoint into `dir`, recording the worked examples and both benchmark
/// modes. `world` supplies token activations for enhanced mode.
inline void write_fixtures(const fs::path& dir, const fs::path& world) {
    fs::create_directories(dir);
    for (const auto& n : endpoint_names()) fs::remove(dir / (n + ".jsonl"));
    monolex::detail::write_file(dir / "config.json", config().dump(2) + "\n");
    monolex::detail::write_file(dir / "math.jsonl", math_jsonl());
    monolex::detail::write_file(dir / "metaphor.tsv", metaphor_tsv());

    std::vector<std::unique_ptr<ChatClient>> inner;
    inner.push_back(rephraser());
    inner.push_back(judge());
    inner.push_back(subject());
    inner.push_back(metaphor_judge());
    inner.push_back(clarifier());
    ClientSet set{ClientsConfig{}};
    for (auto& c : inner) set.add(record_mode(*c, dir / (c->endpoint() + ".jsonl")));

    const auto wf = load_world(world);
    const auto model = oracle_model(wf.truth);
    const auto dict = truth_dictionary(wf.truth);
    DetectionEnv env;
    env.model = &model;
    env.dictionary = &dict;
    env.source = world_source(wf.world, wf.truth, 0);
    env.categories = load_category_map();
    const ReformulateConfig cfg;

    const auto math = load_math(dir / "math.jsonl").items;
    const auto metaphor = load_metaphor(dir / "metaphor.tsv").items;
    for (auto mode : {BenchMode::Original, BenchMode::Enhanced}) {
        run_math_benchmark(math, mode, set, &env, cfg, kModel);
        run_metaphor_benchmark(metaphor, mode, set, &env, kModel);
    }
}

} // namespace monolex::mock
