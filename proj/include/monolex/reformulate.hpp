// SPDX-License-Identifier: Apache-2.0
//
// Reformulation: rephrase flagged math questions and check them for
// equivalence with a second model, or add a one-sentence gloss to a metaphor
// query, then send the final query to the subject model.
#pragma once

#include <regex>

#include "monolex/ambiguity.hpp"
#include "monolex/assets.hpp"
#include "monolex/llmclient.hpp"

namespace monolex {

enum class ReformulationStatus { Reformulated, FallbackOriginal, NotNeeded };

inline const char* to_string(ReformulationStatus s) {
    switch (s) {
        case ReformulationStatus::Reformulated: return "reformulated";
        case ReformulationStatus::FallbackOriginal: return "fallback_original";
        case ReformulationStatus::NotNeeded: return "not_needed";
    }
    return "?";
}

inline ReformulationStatus status_from_string(const std::string& s) {
    for (auto v : {ReformulationStatus::Reformulated, ReformulationStatus::FallbackOriginal, ReformulationStatus::NotNeeded})
        if (s == to_string(v)) return v;
    throw ValidationError("unknown reformulation status \"" + s + "\"");
}

struct Attempt {
    std::string candidate;
    bool equivalent = false;
    std::string rationale;
};

struct ReformulationOutcome {
    std::string kind;                  // "math" or "metaphor"
    std::string original;              // the query as first posed
    std::string final_query;
    ReformulationStatus status = ReformulationStatus::NotNeeded;
    std::vector<Attempt> attempts;     // math only
    std::vector<AmbiguityReport> reports;  // flagged symbols (math)
    std::string sentence;              // metaphor only
    std::string target;
    std::vector<FeatureActivation> target_features;
    std::optional<MetaphorVerdict> verdict;
    std::optional<std::string> answer;
    std::map<std::string, std::string> endpoints;  // role -> endpoint name
    std::vector<Exchange> exchanges;
};

inline json to_json(const ReformulationOutcome& o) {
    json attempts = json::array(), reports = json::array(), feats = json::array(), ex = json::array();
    for (const auto& a : o.attempts)
        attempts.push_back({{"candidate", a.candidate}, {"equivalent", a.equivalent}, {"rationale", a.rationale}});
    for (const auto& r : o.reports) reports.push_back(to_json(r));
    for (const auto& f : o.target_features) feats.push_back(to_json(f));
    for (const auto& e : o.exchanges) ex.push_back(to_json(e));
    return {{"kind", o.kind},
            {"original", o.original},
            {"final_query", o.final_query},
            {"status", to_string(o.status)},
            {"attempts", attempts},
            {"reports", reports},
            {"sentence", o.sentence},
            {"target", o.target},
            {"target_features", feats},
            {"verdict", o.verdict ? to_json(*o.verdict) : json(nullptr)},
            {"answer", o.answer ? json(*o.answer) : json(nullptr)},
            {"endpoints", o.endpoints},
            {"exchanges", ex}};
}

inline ReformulationOutcome outcome_from_json(const json& j) {
    ReformulationOutcome o;
    try {
        o.kind = j.at("kind").get<std::string>();
        o.original = j.at("original").get<std::string>();
        o.final_query = j.at("final_query").get<std::string>();
        o.status = status_from_string(j.at("status").get<std::string>());
        for (const auto& a : j.at("attempts"))
            o.attempts.push_back({a.at("candidate").get<std::string>(), a.at("equivalent").get<bool>(),
                                  a.at("rationale").get<std::string>()});
        for (const auto& r : j.at("reports")) o.reports.push_back(ambiguity_report_from_json(r));
        o.sentence = j.at("sentence").get<std::string>();
        o.target = j.at("target").get<std::string>();
        for (const auto& f : j.at("target_features")) o.target_features.push_back(feature_activation_from_json(f));
        if (!j.at("verdict").is_null()) o.verdict = metaphor_verdict_from_json(j.at("verdict"));
        o.answer = optional_string(j, "answer");
        o.endpoints = j.at("endpoints").get<std::map<std::string, std::string>>();
        for (const auto& e : j.at("exchanges")) o.exchanges.push_back(exchange_from_json(e));
    } catch (const json::exception& e) {
        throw ValidationError(std::string("outcome record: ") + e.what());
    }
    if (o.kind != "math" && o.kind != "metaphor") throw ValidationError("outcome record: unknown kind \"" + o.kind + "\"");
    return o;
}

/// A client failure part-way through a pipeline; carries what was done so far.
class ReformulationError : public ClientError {
public:
    ReformulationError(const std::string& what, ReformulationOutcome partial)
        : ClientError(what), partial_(std::move(partial)) {}

    const ReformulationOutcome& partial() const noexcept { return partial_; }

private:
    ReformulationOutcome partial_;
};

// ---------------------------------------------------------------------------
// Math
// ---------------------------------------------------------------------------

inline std::string symbols_block(const std::vector<AmbiguityReport>& flagged) {
    std::string out;
    for (const auto& r : flagged) {
        out += "- \"" + r.token + "\" (" + to_string(r.symbol_class) + "):";
        for (std::size_t i = 0; i < r.top.size(); ++i)
            out += " " + std::to_string(i + 1) + ". " + r.top[i].description.value_or("(no description)") + ";";
        out.back() = '\n';
    }
    if (!out.empty()) out.pop_back();
    return out;
}

namespace detail {

inline std::vector<AmbiguityReport> only_flagged(const std::vector<AmbiguityReport>& reports) {
    std::vector<AmbiguityReport> out;
    for (const auto& r : reports)
        if (r.flagged) out.push_back(r);
    return out;
}

} // namespace detail

inline std::string rephrase_prompt(const std::string& question, const std::vector<AmbiguityReport>& reports) {
    const auto flagged = detail::only_flagged(reports);
    if (flagged.empty()) throw ValidationError("rephrase_math: no flagged symbols; nothing to rephrase");
    return render_prompt("rephrase_math", {{"question", question}, {"symbols", symbols_block(flagged)}});
}

/// Candidate rewrite of `question` that verbalizes every flagged symbol.
inline std::string rephrase_math(ChatClient& rephraser, const std::string& question,
                                 const std::vector<AmbiguityReport>& reports, std::vector<Exchange>* transcript = nullptr) {
    return trim(ask(rephraser, {{"user", rephrase_prompt(question, reports)}}, transcript));
}

struct EquivalenceVerdict {
    bool equivalent = false;
    std::string rationale;
};

inline std::optional<EquivalenceVerdict> parse_equivalence(const std::string& reply) {
    static const std::regex re(R"(^\W*(NOT_EQUIVALENT|EQUIVALENT)\W*:\s*(.*)$)");
    std::smatch m;
    const std::string line = first_line(reply);
    if (!std::regex_match(line, m, re)) return std::nullopt;
    return EquivalenceVerdict{m[1].str() == "EQUIVALENT", trim(m[2].str())};
}

inline void require_distinct_judge(const std::string& rephraser_endpoint, const std::string& judge_endpoint,
                                   bool allow_same) {
    if (!allow_same && rephraser_endpoint == judge_endpoint)
        throw ConfigError("equivalence judge must use a different endpoint than the rephraser (both are \"" +
                          judge_endpoint + "\"); pass --allow-same-judge to override");
}

/// Strict EQUIVALENT/NOT_EQUIVALENT verdict, with one reprompt on an unreadable reply.
inline EquivalenceVerdict check_equivalence(ChatClient& judge, const std::string& original, const std::string& candidate,
                                            std::vector<Exchange>* transcript = nullptr) {
    if (original.empty() || candidate.empty())
        throw ValidationError("check_equivalence: original and candidate must be nonempty");
    std::vector<ChatMessage> msgs{{"user", render_prompt("equivalence", {{"original", original}, {"candidate", candidate}})}};
    std::string reply = ask(judge, msgs, transcript);
    if (auto v = parse_equivalence(reply)) return *v;
    msgs.push_back({"assistant", reply});
    msgs.push_back({"user", render_prompt("equivalence_retry", {})});
    reply = ask(judge, msgs, transcript);
    if (auto v = parse_equivalence(reply)) return *v;
    throw ClientError("check_equivalence: judge \"" + judge.endpoint() + "\" reply unreadable after one reprompt: " +
                      first_line(reply));
}

/// Rephrase and judge until a candidate is equivalent or max_attempts is
/// used up; then fall back to the original. No flagged symbol: no calls.
inline ReformulationOutcome reformulate_math(ChatClient& rephraser, ChatClient& judge, const std::string& question,
                                             const std::vector<AmbiguityReport>& reports, const ReformulateConfig& cfg) {
    if (cfg.max_attempts < 1) throw ValidationError("reformulate_math: max_attempts must be >= 1");
    require_distinct_judge(rephraser.endpoint(), judge.endpoint(), cfg.allow_same_judge);
    ReformulationOutcome o;
    o.kind = "math";
    o.original = question;
    o.final_query = question;
    o.reports = detail::only_flagged(reports);
    o.endpoints = {{"rephraser", rephraser.endpoint()}, {"judge", judge.endpoint()}};
    if (o.reports.empty()) return o;

    try {
        std::vector<ChatMessage> convo{{"user", rephrase_prompt(question, o.reports)}};
        for (std::size_t k = 0; k < cfg.max_attempts; ++k) {
            const std::string candidate = trim(ask(rephraser, convo, &o.exchanges));
            Attempt a{candidate, false, ""};
            if (candidate.empty()) {
                a.rationale = "empty rewrite";
            } else {
                const auto v = check_equivalence(judge, question, candidate, &o.exchanges);
                a.equivalent = v.equivalent;
                a.rationale = v.rationale;
            }
            o.attempts.push_back(a);
            if (a.equivalent) {
                o.status = ReformulationStatus::Reformulated;
                o.final_query = candidate;
                return o;
            }
            convo.push_back({"assistant", candidate});
            convo.push_back({"user", render_prompt("rephrase_retry", {{"reason", a.rationale.empty() ? "no reason given" : a.rationale}})});
        }
    } catch (const ClientError& e) {
        throw ReformulationError(std::string("reformulate_math: ") + e.what(), o);
    }
    o.status = ReformulationStatus::FallbackOriginal;
    o.final_query = question;
    return o;
}

// ---------------------------------------------------------------------------
// Metaphor
// ---------------------------------------------------------------------------

inline std::string detection_question(const std::string& target) {
    return "Is the target word '" + target + "' a metaphorical or literal expression?";
}

inline std::string metaphor_query(const std::string& sentence, const std::string& target) {
    return sentence + " " + detection_question(target);
}

/// Original sentence, the clarifier's one-sentence gloss, then the detection
/// question. The sentence itself is never changed.
inline std::string clarify_metaphor(ChatClient& clarifier, const std::string& sentence, const std::string& target,
                                    const MetaphorVerdict& verdict, std::vector<Exchange>* transcript = nullptr) {
    if (!verdict.likely_misread) throw ValidationError("clarify_metaphor: verdict says the target is not likely misread");
    const std::string hint = verdict.gloss.value_or(verdict.reason);
    const std::string reply = ask(clarifier, {{"user", render_prompt("clarify_metaphor", {{"sentence", sentence},
                                                                                         {"target", target},
                                                                                         {"hint", hint}})}},
                                  transcript);
    std::string gloss = first_line(reply);
    if (gloss.empty()) throw ClientError("clarify_metaphor: clarifier \"" + clarifier.endpoint() + "\" returned no gloss");
    if (gloss.find(sentence) != std::string::npos)
        throw ClientError("clarify_metaphor: gloss repeats the sentence instead of explaining the target: " + gloss);
    if (gloss.find(target) == std::string::npos)
        throw ClientError("clarify_metaphor: gloss does not mention the target '" + target + "', looks like a rewrite: " + gloss);
    if (gloss.back() != '.' && gloss.back() != '!' && gloss.back() != '?') gloss += ".";
    std::string augmented = sentence + " " + gloss + " " + detection_question(target);
    if (augmented.compare(0, sentence.size(), sentence) != 0)
        throw ValidationError("clarify_metaphor: augmented query does not start with the sentence");
    return augmented;
}

/// Forwards the query unchanged to the subject model.
inline std::string answer(ChatClient& subject, const std::string& query, std::vector<Exchange>* transcript = nullptr) {
    return ask(subject, {{"user", query}}, transcript);
}

// ---------------------------------------------------------------------------
// Whole pipelines
// ---------------------------------------------------------------------------

/// Detection output in, answered outcome out.
inline ReformulationOutcome run_math(ChatClient& rephraser, ChatClient& judge, ChatClient& subject,
                                     const std::string& question, const std::vector<AmbiguityReport>& reports,
                                     const ReformulateConfig& cfg) {
    ReformulationOutcome o = reformulate_math(rephraser, judge, question, reports, cfg);
    o.endpoints["subject"] = subject.endpoint();
    try {
        o.answer = answer(subject, o.final_query, &o.exchanges);
    } catch (const ClientError& e) {
        throw ReformulationError(std::string("run_math: ") + e.what(), o);
    }
    return o;
}

inline ReformulationOutcome run_metaphor(ChatClient& judge, ChatClient& clarifier, ChatClient& subject,
                                         const std::string& sentence, const std::string& target,
                                         const std::vector<FeatureActivation>& target_features) {
    ReformulationOutcome o;
    o.kind = "metaphor";
    o.sentence = sentence;
    o.target = target;
    o.target_features = target_features;
    o.original = metaphor_query(sentence, target);
    o.final_query = o.original;
    o.endpoints = {{"judge", judge.endpoint()}, {"clarifier", clarifier.endpoint()}, {"subject", subject.endpoint()}};
    try {
        o.verdict = judge_metaphor_ambiguity(judge, sentence, target, target_features, &o.exchanges);
        if (o.verdict->likely_misread) {
            o.final_query = clarify_metaphor(clarifier, sentence, target, *o.verdict, &o.exchanges);
            o.status = ReformulationStatus::Reformulated;
        }
        o.answer = answer(subject, o.final_query, &o.exchanges);
    } catch (const ClientError& e) {
        throw ReformulationError(std::string("run_metaphor: ") + e.what(), o);
    }
    return o;
}

/// Re-runs a recorded outcome against its own transcript. Any divergence in
/// prompts raises ClientError; the returned outcome should equal the record.
inline ReformulationOutcome replay_outcome(const ReformulationOutcome& rec, const ReformulateConfig& cfg) {
    std::map<std::string, std::vector<Exchange>> by_endpoint;
    for (const auto& e : rec.exchanges) by_endpoint[e.endpoint].push_back(e);
    std::map<std::string, std::unique_ptr<TranscriptClient>> clients;
    auto client_for = [&](const std::string& role) -> ChatClient& {
        auto it = rec.endpoints.find(role);
        if (it == rec.endpoints.end()) throw ValidationError("replay: record has no endpoint for role \"" + role + "\"");
        auto& slot = clients[it->second];
        if (!slot) slot = std::make_unique<TranscriptClient>(it->second, by_endpoint[it->second]);
        return *slot;
    };
    if (rec.endpoints.size() == 1 && rec.endpoints.count("subject")) {
        // Unreformulated query sent straight to the subject.
        ReformulationOutcome o = rec;
        o.exchanges.clear();
        o.answer = answer(client_for("subject"), rec.final_query, &o.exchanges);
        return o;
    }
    ReformulateConfig c = cfg;
    if (rec.kind == "math") {
        c.allow_same_judge = c.allow_same_judge || rec.endpoints.at("rephraser") == rec.endpoints.at("judge");
        c.max_attempts = std::max<std::size_t>(1, rec.attempts.size());
        return run_math(client_for("rephraser"), client_for("judge"), client_for("subject"), rec.original, rec.reports, c);
    }
    return run_metaphor(client_for("judge"), client_for("clarifier"), client_for("subject"), rec.sentence, rec.target,
                        rec.target_features);
}

} // namespace monolex
