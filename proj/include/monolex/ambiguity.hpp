// SPDX-License-Identifier: Apache-2.0
//
// Ambiguity detection: classify math tokens, rank the dictionary features
// they activate, flag symbols whose leading features are not mathematical,
// and ask a judge whether a metaphor target is likely to be misread.
#pragma once

#include <algorithm>
#include <functional>
#include <fstream>
#include <regex>
#include <set>

#include "monolex/assets.hpp"
#include "monolex/llmclient.hpp"
#include "monolex/sae.hpp"
#include "monolex/synthdata.hpp"

namespace monolex {

enum class SymbolClass { Function, Operator, Number, Other };

inline const char* to_string(SymbolClass c) {
    switch (c) {
        case SymbolClass::Function: return "function";
        case SymbolClass::Operator: return "operator";
        case SymbolClass::Number: return "number";
        case SymbolClass::Other: return "other";
    }
    return "?";
}

struct SymbolTable {
    std::set<std::string> functions;
    std::set<std::string> operators;
};

inline SymbolTable symbol_table_from_json(const json& j, const std::string& origin) {
    SymbolTable t;
    try {
        for (const auto& f : j.at("functions")) t.functions.insert(f.get<std::string>());
        for (const auto& o : j.at("operators")) t.operators.insert(o.get<std::string>());
    } catch (const json::exception& e) {
        throw ConfigError("symbol table " + origin + ": " + e.what());
    }
    return t;
}

inline const SymbolTable& default_symbol_table() {
    static const SymbolTable t = symbol_table_from_json(json::parse(read_asset("symbols.json")), "assets/symbols.json");
    return t;
}

inline bool is_number_token(const std::string& s) {
    static const std::regex num_re(R"(^[+-]?(\d+(\.\d*)?|\.\d+)$)");
    return std::regex_match(s, num_re);
}

inline SymbolClass classify_symbol(const std::string& token, const SymbolTable& table = default_symbol_table()) {
    const std::string bare = !token.empty() && token[0] == '\\' ? token.substr(1) : token;
    if (!bare.empty() && table.functions.count(bare)) return SymbolClass::Function;
    if (is_number_token(token)) return SymbolClass::Number;
    if (table.operators.count(token) || (!bare.empty() && table.operators.count(bare))) return SymbolClass::Operator;
    return SymbolClass::Other;
}

namespace detail {

inline bool all_alpha(const std::string& s) {
    return !s.empty() && std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isalpha(c) != 0; });
}

inline bool prefixes_function(const std::string& name, const SymbolTable& table) {
    auto it = table.functions.lower_bound(name);
    return it != table.functions.end() && it->compare(0, name.size(), name) == 0;
}

} // namespace detail

/// Joins a backslash and the alphabetic fragments after it while the joined
/// name is still a prefix of a known function: ["\", "d", "frac"] -> ["\dfrac"].
inline std::vector<std::string> merge_backslash_fragments(const std::vector<std::string>& tokens,
                                                          const SymbolTable& table = default_symbol_table()) {
    std::vector<std::string> out;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        const std::string& t = tokens[i];
        if (t.empty() || t[0] != '\\' || (t.size() > 1 && !detail::all_alpha(t.substr(1)))) {
            out.push_back(t);
            continue;
        }
        std::string name = t.substr(1);
        while (i + 1 < tokens.size() && detail::all_alpha(tokens[i + 1]) &&
               detail::prefixes_function(name + tokens[i + 1], table)) {
            name += tokens[++i];
        }
        out.push_back("\\" + name);
    }
    return out;
}

/// Splits a math question into symbol-level tokens. A pair of bars |...| becomes
/// one "||" token at the opening bar; "<=", ">=" and "!=" become single symbols.
inline std::vector<std::string> tokenize_math(const std::string& text) {
    std::vector<std::string> out;
    std::set<std::size_t> closing_bars;
    const auto n = text.size();
    for (std::size_t i = 0; i < n;) {
        const unsigned char c = static_cast<unsigned char>(text[i]);
        if (std::isspace(c)) {
            ++i;
        } else if (std::isdigit(c) || (c == '.' && i + 1 < n && std::isdigit(static_cast<unsigned char>(text[i + 1])))) {
            std::size_t j = i;
            while (j < n && std::isdigit(static_cast<unsigned char>(text[j]))) ++j;
            if (j + 1 < n && text[j] == '.' && std::isdigit(static_cast<unsigned char>(text[j + 1]))) {
                ++j;
                while (j < n && std::isdigit(static_cast<unsigned char>(text[j]))) ++j;
            }
            out.push_back(text.substr(i, j - i));
            i = j;
        } else if (std::isalpha(c) || (c == '\\' && i + 1 < n && std::isalpha(static_cast<unsigned char>(text[i + 1])))) {
            std::size_t j = i + 1;
            while (j < n && std::isalpha(static_cast<unsigned char>(text[j]))) ++j;
            out.push_back(text.substr(i, j - i));
            i = j;
        } else if (c == '|') {
            if (closing_bars.erase(i)) {
                ++i;
                continue;
            }
            const auto close = text.find('|', i + 1);
            if (close != std::string::npos) {
                closing_bars.insert(close);
                out.push_back("||");
            } else {
                out.push_back("|");
            }
            ++i;
        } else if ((c == '<' || c == '>' || c == '!') && i + 1 < n && text[i + 1] == '=') {
            out.push_back(c == '<' ? "≤" : c == '>' ? "≥" : "≠");
            i += 2;
        } else {
            std::size_t len = 1;
            if (c >= 0xF0) len = 4;
            else if (c >= 0xE0) len = 3;
            else if (c >= 0xC0) len = 2;
            len = std::min(len, n - i);
            out.push_back(text.substr(i, len));
            i += len;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Feature ranking
// ---------------------------------------------------------------------------

struct FeatureActivation {
    std::size_t id = 0;
    double value = 0.0;
    std::optional<std::string> description;
    std::optional<std::string> category;
};

inline json to_json(const FeatureActivation& f) {
    return {{"id", f.id},
            {"value", f.value},
            {"description", f.description ? json(*f.description) : json(nullptr)},
            {"category", f.category ? json(*f.category) : json(nullptr)}};
}

inline std::optional<std::string> optional_string(const json& j, const char* key) {
    if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
    return j.at(key).get<std::string>();
}

inline FeatureActivation feature_activation_from_json(const json& j) {
    return {j.at("id").get<std::size_t>(), j.at("value").get<double>(), optional_string(j, "description"),
            optional_string(j, "category")};
}

/// Top-k features for one activation vector, value descending, ties by id.
inline std::vector<FeatureActivation> rank_token_features(const SaeModel& m, const FeatureDictionary& dict,
                                                          std::span<const double> activation, std::size_t k) {
    if (k < 1) throw ValidationError("rank_token_features: k must be >= 1");
    require_dim(m, activation.size(), "rank_token_features");
    if (dict.size() != m.h)
        throw ValidationError("rank_token_features: dictionary has " + std::to_string(dict.size()) +
                              " features, model has " + std::to_string(m.h));
    const auto s = encode(m, activation);
    std::vector<std::size_t> ids(m.h);
    for (std::size_t i = 0; i < m.h; ++i) ids[i] = i;
    k = std::min(k, m.h);
    std::partial_sort(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(k), ids.end(),
                      [&](std::size_t a, std::size_t b) { return s[a] != s[b] ? s[a] > s[b] : a < b; });
    std::vector<FeatureActivation> out;
    for (std::size_t r = 0; r < k; ++r) {
        const auto& rec = dict.at(ids[r]);
        out.push_back({ids[r], s[ids[r]], rec.description, rec.category});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Math ambiguity
// ---------------------------------------------------------------------------

/// Which features count as mathematical: by category label or by id.
struct CategoryMap {
    std::set<std::string> categories;
    std::set<std::size_t> feature_ids;

    bool is_math(const FeatureActivation& f) const {
        return feature_ids.count(f.id) || (f.category && categories.count(*f.category));
    }
};

inline CategoryMap category_map_from_json(const json& j, const std::string& origin) {
    CategoryMap m;
    try {
        for (const auto& c : j.value("categories", json::array())) m.categories.insert(c.get<std::string>());
        for (const auto& id : j.value("feature_ids", json::array())) m.feature_ids.insert(id.get<std::size_t>());
    } catch (const json::exception& e) {
        throw ConfigError("category map " + origin + ": " + e.what());
    }
    for (const auto& [key, _] : j.items())
        if (key != "categories" && key != "feature_ids")
            throw ConfigError("category map " + origin + ": unknown key \"" + key + "\"");
    return m;
}

/// Empty path: the shipped allowlist.
inline CategoryMap load_category_map(const std::string& path = {}) {
    if (path.empty()) return category_map_from_json(json::parse(read_asset("math_categories.json")), "assets/math_categories.json");
    std::ifstream in(path);
    if (!in) throw IoError("category map " + path + ": cannot open");
    try {
        return category_map_from_json(json::parse(in), path);
    } catch (const json::parse_error& e) {
        throw IoError("category map " + path + ": " + e.what());
    }
}

struct AmbiguityReport {
    std::string token;
    std::size_t position = 0;
    SymbolClass symbol_class = SymbolClass::Other;
    std::vector<FeatureActivation> top;
    bool flagged = false;
    std::string rationale;
};

inline json to_json(const AmbiguityReport& r) {
    json top = json::array();
    for (const auto& f : r.top) top.push_back(to_json(f));
    return {{"token", r.token},       {"position", r.position}, {"class", to_string(r.symbol_class)},
            {"top", top},             {"flagged", r.flagged},   {"rationale", r.rationale}};
}

inline SymbolClass symbol_class_from_string(const std::string& s) {
    for (auto c : {SymbolClass::Function, SymbolClass::Operator, SymbolClass::Number, SymbolClass::Other})
        if (s == to_string(c)) return c;
    throw ValidationError("unknown symbol class \"" + s + "\"");
}

inline AmbiguityReport ambiguity_report_from_json(const json& j) {
    AmbiguityReport r;
    r.token = j.at("token").get<std::string>();
    r.position = j.at("position").get<std::size_t>();
    r.symbol_class = symbol_class_from_string(j.at("class").get<std::string>());
    for (const auto& f : j.at("top")) r.top.push_back(feature_activation_from_json(f));
    r.flagged = j.at("flagged").get<bool>();
    r.rationale = j.at("rationale").get<std::string>();
    return r;
}

namespace detail {

inline std::string describe(const FeatureActivation& f) {
    std::string s = "#" + std::to_string(f.id);
    if (f.category) s += " [" + *f.category + "]";
    if (f.description) s += " \"" + *f.description + "\"";
    return s;
}

} // namespace detail

/// Flags the token when none of its top-`depth` features is mathematical.
/// Numbers are left unflagged unless cfg.flag_numbers is set.
inline AmbiguityReport detect_math_ambiguity(const std::string& token, std::size_t position,
                                             const std::vector<FeatureActivation>& ranked, const CategoryMap& map,
                                             const DetectConfig& cfg, const SymbolTable& table = default_symbol_table()) {
    if (ranked.empty()) throw ValidationError("detect_math_ambiguity: empty ranked list for \"" + token + "\"");
    if (cfg.depth < 1 || cfg.depth > ranked.size())
        throw ValidationError("detect_math_ambiguity: depth " + std::to_string(cfg.depth) + " outside 1.." +
                              std::to_string(ranked.size()));
    AmbiguityReport r;
    r.token = token;
    r.position = position;
    r.symbol_class = classify_symbol(token, table);
    r.top = ranked;

    std::optional<std::size_t> math_rank;
    for (std::size_t i = 0; i < ranked.size(); ++i)
        if (map.is_math(ranked[i])) {
            math_rank = i + 1;
            break;
        }
    if (r.symbol_class == SymbolClass::Number && !cfg.flag_numbers) {
        r.rationale = "numbers are not flagged";
        return r;
    }
    if (math_rank && *math_rank <= cfg.depth) {
        r.rationale = "mathematical feature " + detail::describe(ranked[*math_rank - 1]) + " at rank " +
                      std::to_string(*math_rank);
        return r;
    }
    r.flagged = true;
    r.rationale = "top-" + std::to_string(cfg.depth) + " features are not mathematical:";
    for (std::size_t i = 0; i < cfg.depth; ++i) r.rationale += (i ? ", " : " ") + detail::describe(ranked[i]);
    if (math_rank) r.rationale += "; first mathematical feature at rank " + std::to_string(*math_rank);
    return r;
}

/// Activation vector for a token at a position, or nullopt when the source
/// has none for it.
using ActivationSource = std::function<std::optional<std::vector<double>>(const std::string& token, std::size_t position)>;

/// Token-world source. Numbers missing from the vocabulary fall back to "<num>".
inline ActivationSource world_source(const TokenWorld& world, const TrueDictionary& truth, std::uint64_t seed) {
    return [&world, &truth, seed](const std::string& token, std::size_t position) -> std::optional<std::vector<double>> {
        std::string key = token;
        if (!world.contains(key) && is_number_token(key)) key = "<num>";
        if (!world.contains(key)) return std::nullopt;
        auto [batch, sc] = token_activations(world, truth, {key}, RngStream::substream(seed, position).next_u64());
        return std::vector<double>(batch.rows.row(0).begin(), batch.rows.row(0).end());
    };
}

struct DetectResult {
    std::vector<AmbiguityReport> reports;  // one per math-class token with activations, by position
    std::vector<std::string> skipped;      // math-class tokens the source had no activations for

    bool any_flagged() const {
        return std::any_of(reports.begin(), reports.end(), [](const auto& r) { return r.flagged; });
    }
    std::vector<AmbiguityReport> flagged() const {
        std::vector<AmbiguityReport> out;
        for (const auto& r : reports)
            if (r.flagged) out.push_back(r);
        return out;
    }
};

inline DetectResult detect_question(const std::string& question, const ActivationSource& source, const SaeModel& m,
                                    const FeatureDictionary& dict, const CategoryMap& map, const DetectConfig& cfg,
                                    const SymbolTable& table = default_symbol_table()) {
    DetectResult res;
    const auto tokens = merge_backslash_fragments(tokenize_math(question), table);
    for (std::size_t pos = 0; pos < tokens.size(); ++pos) {
        if (classify_symbol(tokens[pos], table) == SymbolClass::Other) continue;
        const auto act = source(tokens[pos], pos);
        if (!act) {
            res.skipped.push_back(tokens[pos]);
            continue;
        }
        const auto ranked = rank_token_features(m, dict, *act, cfg.top_k);
        res.reports.push_back(detect_math_ambiguity(tokens[pos], pos, ranked, map, cfg, table));
    }
    return res;
}

// ---------------------------------------------------------------------------
// Metaphor ambiguity
// ---------------------------------------------------------------------------

struct MetaphorVerdict {
    bool likely_misread = false;
    std::optional<std::string> gloss;  // intended meaning, when likely misread
    std::string reason;                // judge's text after YES:/NO:
};

inline json to_json(const MetaphorVerdict& v) {
    return {{"likely_misread", v.likely_misread},
            {"gloss", v.gloss ? json(*v.gloss) : json(nullptr)},
            {"reason", v.reason}};
}

inline MetaphorVerdict metaphor_verdict_from_json(const json& j) {
    return {j.at("likely_misread").get<bool>(), optional_string(j, "gloss"), j.at("reason").get<std::string>()};
}

inline std::optional<MetaphorVerdict> parse_metaphor_verdict(const std::string& reply) {
    static const std::regex re(R"(^(YES|NO)\s*:\s*(\S.*)$)", std::regex::icase);
    std::smatch m;
    const std::string line = first_line(reply);
    if (!std::regex_match(line, m, re)) return std::nullopt;
    MetaphorVerdict v;
    std::string word = m[1].str();
    std::transform(word.begin(), word.end(), word.begin(), [](unsigned char c) { return std::toupper(c); });
    v.likely_misread = word == "YES";
    v.reason = trim(m[2].str());
    if (v.likely_misread) v.gloss = v.reason;
    return v;
}

inline std::string feature_lines(const std::vector<FeatureActivation>& ranked) {
    std::string out;
    for (std::size_t i = 0; i < ranked.size(); ++i) {
        out += std::to_string(i + 1) + ". " + ranked[i].description.value_or("(no description)");
        if (ranked[i].category) out += " (" + *ranked[i].category + ")";
        out += "\n";
    }
    if (!out.empty()) out.pop_back();
    return out;
}

/// Target must occur in the sentence. Malformed replies get one reprompt.
inline MetaphorVerdict judge_metaphor_ambiguity(ChatClient& judge, const std::string& sentence, const std::string& target,
                                                const std::vector<FeatureActivation>& ranked,
                                                std::vector<Exchange>* transcript = nullptr) {
    if (target.empty() || sentence.find(target) == std::string::npos)
        throw ValidationError("judge_metaphor_ambiguity: target \"" + target + "\" does not occur in the sentence");
    std::vector<ChatMessage> msgs{{"user", render_prompt("judge_metaphor", {{"sentence", sentence},
                                                                             {"target", target},
                                                                             {"features", feature_lines(ranked)}})}};
    std::string reply = ask(judge, msgs, transcript);
    if (auto v = parse_metaphor_verdict(reply)) return *v;
    msgs.push_back({"assistant", reply});
    msgs.push_back({"user", render_prompt("judge_metaphor_retry", {})});
    reply = ask(judge, msgs, transcript);
    if (auto v = parse_metaphor_verdict(reply)) return *v;
    throw ClientError("judge_metaphor_ambiguity: judge \"" + judge.endpoint() +
                      "\" reply unreadable after one reprompt: " + first_line(reply));
}

} // namespace monolex
