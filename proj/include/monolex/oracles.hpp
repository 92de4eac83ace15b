// SPDX-License-Identifier: Apache-2.0
//
// Rule-based explainer and simulator that answer from known ground truth
// instead of a language model. They read the same prompts a model would.
#pragma once

#include <functional>
#include <regex>

#include "monolex/llmclient.hpp"
#include "monolex/synthdata.hpp"

namespace monolex {

/// Ground-truth coefficients (one per true feature) for a bracketed token,
/// or nullopt when the token is unknown.
using CoefficientLookup = std::function<std::optional<std::vector<double>>(const std::string& token)>;

/// Tokens "s<r>" resolve to row r of a synthetic coefficient matrix.
inline CoefficientLookup synthetic_lookup(const CoeffMatrix& coeffs) {
    return [&coeffs](const std::string& token) -> std::optional<std::vector<double>> {
        if (token.size() < 2 || token[0] != 's') return std::nullopt;
        std::size_t row = 0;
        for (std::size_t i = 1; i < token.size(); ++i) {
            if (token[i] < '0' || token[i] > '9') return std::nullopt;
            row = row * 10 + static_cast<std::size_t>(token[i] - '0');
        }
        if (row >= coeffs.rows()) return std::nullopt;
        return std::vector<double>(coeffs.row(row).begin(), coeffs.row(row).end());
    };
}

/// Tokens resolve to their mixture weights in a token world.
inline CoefficientLookup world_lookup(const TokenWorld& world, std::size_t n_features) {
    return [&world, n_features](const std::string& token) -> std::optional<std::vector<double>> {
        auto it = world.mixtures.find(token);
        if (it == world.mixtures.end()) return std::nullopt;
        std::vector<double> w(n_features, 0.0);
        for (const auto& e : it->second) w[e.feature] = e.weight;
        return w;
    };
}

namespace detail {

struct PromptLine {
    std::size_t index = 0;
    std::vector<std::string> bracketed;
    std::optional<int> activation;
};

inline std::vector<PromptLine> numbered_lines(const std::string& prompt) {
    static const std::regex line_re(R"(^(\d+)\. (.*?)(?: => (\d+))?$)");
    static const std::regex bracket_re(R"(\[([^\[\]]+)\])");
    std::vector<PromptLine> out;
    std::size_t at = 0;
    while (at < prompt.size()) {
        auto nl = prompt.find('\n', at);
        if (nl == std::string::npos) nl = prompt.size();
        const std::string line = prompt.substr(at, nl - at);
        at = nl + 1;
        std::smatch m;
        if (!std::regex_match(line, m, line_re)) continue;
        PromptLine pl;
        pl.index = std::stoul(m[1].str());
        const std::string body = m[2].str();
        for (auto it = std::sregex_iterator(body.begin(), body.end(), bracket_re); it != std::sregex_iterator(); ++it)
            pl.bracketed.push_back((*it)[1].str());
        if (m[3].matched) pl.activation = std::stoi(m[3].str());
        out.push_back(std::move(pl));
    }
    return out;
}

inline std::optional<std::vector<double>> resolve(const CoefficientLookup& lookup, const PromptLine& line) {
    for (auto it = line.bracketed.rbegin(); it != line.bracketed.rend(); ++it)
        if (auto c = lookup(*it)) return c;
    return std::nullopt;
}

} // namespace detail

/// Explainer that names the true feature carrying the most activation-weighted
/// coefficient mass across the listed contexts.
inline std::unique_ptr<CallbackClient> truth_explainer(std::string endpoint, const TrueDictionary& truth,
                                                       CoefficientLookup lookup) {
    return std::make_unique<CallbackClient>(std::move(endpoint), [&truth, lookup](const ChatRequest& req) {
        std::vector<double> mass(truth.n_features(), 0.0);
        for (const auto& line : detail::numbered_lines(req.messages.back().content)) {
            const auto c = detail::resolve(lookup, line);
            if (!c) continue;
            const double q = line.activation.value_or(1);
            for (std::size_t t = 0; t < mass.size(); ++t) mass[t] += q * (*c)[t];
        }
        const auto best = std::max_element(mass.begin(), mass.end());
        if (best == mass.end() || *best <= 0.0) return std::string("no recognizable pattern");
        return truth.labels[static_cast<std::size_t>(best - mass.begin())];
    }, "truth-oracle");
}

/// Simulator that looks the description up among the true labels and predicts
/// round(10 * coefficient) for each context; unknown descriptions predict 0.
inline std::unique_ptr<CallbackClient> truth_simulator(std::string endpoint, const TrueDictionary& truth,
                                                       CoefficientLookup lookup) {
    return std::make_unique<CallbackClient>(std::move(endpoint), [&truth, lookup](const ChatRequest& req) {
        const std::string& prompt = req.messages.front().content;
        std::optional<std::size_t> feature;
        for (std::size_t t = 0; t < truth.n_features(); ++t)
            if (prompt.find("\"" + truth.labels[t] + "\"") != std::string::npos) feature = t;
        std::string out;
        for (const auto& line : detail::numbered_lines(prompt)) {
            long v = 0;
            if (feature)
                if (const auto c = detail::resolve(lookup, line)) v = std::clamp<long>(std::lround(10.0 * (*c)[*feature]), 0, 10);
            out += std::to_string(line.index) + ": " + std::to_string(v) + "\n";
        }
        return out;
    }, "truth-oracle");
}

} // namespace monolex
