// SPDX-License-Identifier: Apache-2.0
//
// Auto-interpretability: describe each dictionary feature from its
// top-activating contexts, then score the description by how well a
// simulator predicts the feature on held-out contexts.
#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <regex>
#include <set>
#include <thread>

#include "monolex/assets.hpp"
#include "monolex/llmclient.hpp"
#include "monolex/sae.hpp"

namespace monolex {

struct ActivationSample {
    std::size_t row = 0;
    std::string token;
    std::string context;
    std::size_t position = 0;
    double activation = 0.0;
};

namespace detail {

inline ActivationSample make_sample(const TokenSidecar& sc, std::size_t row, double value) {
    ActivationSample s;
    s.row = row;
    s.activation = value;
    if (const auto* rec = sc.find(row)) {
        s.token = rec->token;
        s.context = rec->context;
        s.position = rec->position;
    } else {
        s.token = "row" + std::to_string(row);
    }
    return s;
}

// Record pointer per batch row (nullptr where the sidecar has none).
inline std::vector<const TokenRecord*> index_sidecar(const TokenSidecar& sc, std::size_t rows) {
    std::vector<const TokenRecord*> by_row(rows, nullptr);
    for (const auto& r : sc.records)
        if (r.row < rows) by_row[r.row] = &r;
    return by_row;
}

// Ranked (activation desc, row asc) list of at most n positive entries.
class TopList {
public:
    explicit TopList(std::size_t n) : n_(n) {}

    // Rows must be offered in increasing order.
    void offer(std::size_t row, double value) {
        if (!(value > 0.0)) return;
        if (items_.size() == n_ && !(value > items_.back().first)) return;
        auto pos = std::upper_bound(items_.begin(), items_.end(), value,
                                    [](double v, const auto& item) { return v > item.first; });
        items_.insert(pos, {value, row});
        if (items_.size() > n_) items_.pop_back();
    }

    const std::vector<std::pair<double, std::size_t>>& items() const { return items_; }

private:
    std::size_t n_;
    std::vector<std::pair<double, std::size_t>> items_;
};

inline std::vector<TopList> top_lists(const SaeModel& m, const Matrix& rows, std::size_t n) {
    std::vector<TopList> lists(m.h, TopList(n));
    for (std::size_t r = 0; r < rows.rows(); ++r) {
        const auto s = encode(m, rows.row(r));
        for (std::size_t f = 0; f < m.h; ++f) lists[f].offer(r, s[f]);
    }
    return lists;
}

} // namespace detail

/// The n rows where `feature_id` responds most strongly, descending, ties to
/// the lower row. Rows with zero activation never appear.
inline std::vector<ActivationSample> top_activating(const SaeModel& m, const ActivationBatch& batch,
                                                    const TokenSidecar& sidecar, std::size_t feature_id,
                                                    std::size_t n) {
    if (feature_id >= m.h) throw ValidationError("top_activating: feature id " + std::to_string(feature_id) + " >= h");
    if (n < 1) throw ValidationError("top_activating: n must be >= 1");
    require_dim(m, batch.dim(), "top_activating");
    detail::TopList list(n);
    for (std::size_t r = 0; r < batch.count(); ++r) list.offer(r, encode(m, batch.rows.row(r))[feature_id]);
    std::vector<ActivationSample> out;
    for (const auto& [v, row] : list.items()) out.push_back(detail::make_sample(sidecar, row, v));
    return out;
}

/// Integer 0..10 relative to `scale` (the feature's maximum).
inline int quantize_activation(double value, double scale) {
    if (!(scale > 0.0) || !(value > 0.0)) return 0;
    return static_cast<int>(std::clamp<long>(std::lround(10.0 * value / scale), 0, 10));
}

/// Context with the sample's token wrapped in brackets.
inline std::string bracket_token(const ActivationSample& s) {
    if (!s.token.empty()) {
        const auto at = s.context.find(s.token);
        if (at != std::string::npos)
            return s.context.substr(0, at) + "[" + s.token + "]" + s.context.substr(at + s.token.size());
    }
    return s.context.empty() ? "[" + s.token + "]" : s.context + " [" + s.token + "]";
}

inline std::string explain_prompt(const std::vector<ActivationSample>& samples) {
    double scale = 0.0;
    for (const auto& s : samples) scale = std::max(scale, s.activation);
    std::string lines;
    for (std::size_t i = 0; i < samples.size(); ++i)
        lines += std::to_string(i + 1) + ". " + bracket_token(samples[i]) + " => " +
                 std::to_string(quantize_activation(samples[i].activation, scale)) + "\n";
    lines.pop_back();
    return render_prompt("explain", {{"samples", lines}});
}

/// First line of the explainer's reply, trimmed.
inline std::string explain_feature(ChatClient& explainer, const std::vector<ActivationSample>& samples,
                                   std::vector<Exchange>* transcript = nullptr) {
    if (samples.empty()) throw ValidationError("explain_feature: samples must be nonempty");
    const std::string reply = ask(explainer, {{"user", explain_prompt(samples)}}, transcript);
    std::string line = first_line(reply);
    if (line.empty()) throw ClientError("explain_feature: explainer \"" + explainer.endpoint() + "\" returned no description");
    return line;
}

inline double pearson(const std::vector<double>& a, const std::vector<double>& b) {
    const double n = static_cast<double>(a.size());
    double ma = 0, mb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= n;
    mb /= n;
    double sab = 0, saa = 0, sbb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    if (saa == 0.0 || sbb == 0.0) return std::numeric_limits<double>::quiet_NaN();
    return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

/// Parses "<i>: <v>" lines for i = 1..count, v in 0..10. Empty on any defect.
inline std::optional<std::vector<int>> parse_simulation(const std::string& reply, std::size_t count) {
    static const std::regex line_re(R"(^\s*(\d{1,6})\s*[:.)=-]\s*(\d{1,3})\s*$)");
    std::vector<int> out(count, -1);
    std::size_t seen = 0;
    std::size_t at = 0;
    while (at <= reply.size()) {
        auto nl = reply.find('\n', at);
        if (nl == std::string::npos) nl = reply.size();
        const std::string line = trim(reply.substr(at, nl - at));
        at = nl + 1;
        if (line.empty()) continue;
        std::smatch m;
        if (!std::regex_match(line, m, line_re)) return std::nullopt;
        const auto idx = std::stoul(m[1].str());
        const auto val = std::stol(m[2].str());
        if (idx < 1 || idx > count || val > 10 || out[idx - 1] != -1) return std::nullopt;
        out[idx - 1] = static_cast<int>(val);
        ++seen;
    }
    if (seen != count) return std::nullopt;
    return out;
}

inline std::string simulate_prompt(const std::string& description, const std::vector<ActivationSample>& samples) {
    std::string lines;
    for (std::size_t i = 0; i < samples.size(); ++i) lines += std::to_string(i + 1) + ". " + bracket_token(samples[i]) + "\n";
    lines.pop_back();
    return render_prompt("simulate", {{"description", description}, {"samples", lines}});
}

/// Pearson correlation between simulated and true quantized activations.
/// `scale` is the activation mapped to 10 (default: the largest held-out value).
/// A constant prediction carries no information and scores 0.
inline double simulate_and_score(ChatClient& simulator, const std::string& description,
                                 const std::vector<ActivationSample>& heldout, double scale = 0.0,
                                 std::vector<Exchange>* transcript = nullptr) {
    if (heldout.size() < 3) throw ValidationError("simulate_and_score: need at least 3 held-out samples");
    if (!(scale > 0.0))
        for (const auto& s : heldout) scale = std::max(scale, s.activation);
    std::vector<double> truth;
    for (const auto& s : heldout) truth.push_back(quantize_activation(s.activation, scale));
    if (std::all_of(truth.begin(), truth.end(), [&](double v) { return v == truth.front(); }))
        throw ValidationError("simulate_and_score: undefined correlation (true activations are constant)");

    std::vector<ChatMessage> msgs{{"user", simulate_prompt(description, heldout)}};
    std::string reply = ask(simulator, msgs, transcript);
    auto parsed = parse_simulation(reply, heldout.size());
    if (!parsed) {
        msgs.push_back({"assistant", reply});
        msgs.push_back({"user", render_prompt("simulate_retry", {{"count", std::to_string(heldout.size())}})});
        reply = ask(simulator, msgs, transcript);
        parsed = parse_simulation(reply, heldout.size());
        if (!parsed)
            throw ClientError("simulate_and_score: simulator \"" + simulator.endpoint() +
                              "\" output malformed after one reprompt: " + first_line(reply));
    }
    const std::vector<double> pred(parsed->begin(), parsed->end());
    const double r = pearson(pred, truth);
    return std::isnan(r) ? 0.0 : r;
}

// ---------------------------------------------------------------------------
// Whole-dictionary annotation
// ---------------------------------------------------------------------------

enum class AnnotationStatus { Annotated, Dead, Failed };

inline const char* to_string(AnnotationStatus s) {
    switch (s) {
        case AnnotationStatus::Annotated: return "annotated";
        case AnnotationStatus::Dead: return "dead";
        case AnnotationStatus::Failed: return "failed";
    }
    return "?";
}

struct FeatureAnnotation {
    std::size_t id = 0;
    AnnotationStatus status = AnnotationStatus::Dead;
    std::optional<std::string> description;
    std::optional<double> score;
    std::vector<std::size_t> explain_rows;
    std::vector<std::size_t> score_rows;
    std::string error;
};

inline json to_json(const FeatureAnnotation& a) {
    return {{"id", a.id},
            {"status", to_string(a.status)},
            {"score", a.score ? json(*a.score) : json(nullptr)},
            {"description", a.description ? json(*a.description) : json(nullptr)},
            {"explain_rows", a.explain_rows},
            {"score_rows", a.score_rows},
            {"error", a.error.empty() ? json(nullptr) : json(a.error)}};
}

struct AnnotationResult {
    FeatureDictionary dictionary;
    double validated_fraction = 0.0;
    std::size_t alive = 0;
    std::size_t validated = 0;
    std::size_t failed = 0;
    std::vector<FeatureAnnotation> report;  // one per feature, id order
};

/// Explain and score every alive feature. The top n_samples rows are split by
/// a per-feature seeded shuffle into explain and score sets; the score set
/// also gets `random_holdout` rows drawn from outside the top list so that
/// weak and zero activations are represented.
inline AnnotationResult annotate_all(const SaeModel& m, const ActivationBatch& batch, const TokenSidecar& sidecar,
                                     ChatClient& explainer, ChatClient& simulator, const AnnotateConfig& cfg,
                                     const FeatureDictionary* base = nullptr) {
    require_dim(m, batch.dim(), "annotate_all");
    if (cfg.n_samples < 1) throw ValidationError("annotate_all: n_samples must be >= 1");
    if (!(cfg.explain_fraction > 0.0 && cfg.explain_fraction < 1.0))
        throw ValidationError("annotate_all: explain_fraction must be in (0, 1)");
    const auto by_row = detail::index_sidecar(sidecar, batch.count());
    auto sample_at = [&](std::size_t row, double value) {
        const TokenRecord* rec = by_row[row];
        ActivationSample s;
        s.row = row;
        s.activation = value;
        s.token = rec ? rec->token : "row" + std::to_string(row);
        if (rec) {
            s.context = rec->context;
            s.position = rec->position;
        }
        return s;
    };

    AnnotationResult res;
    res.dictionary = base ? *base : dictionary_from_model(m);
    if (res.dictionary.size() != m.h)
        throw ValidationError("annotate_all: dictionary has " + std::to_string(res.dictionary.size()) +
                              " features, model has " + std::to_string(m.h));
    res.report.resize(m.h);
    const auto lists = detail::top_lists(m, batch.rows, cfg.n_samples);

    auto annotate_one = [&](std::size_t f) {
        FeatureAnnotation& a = res.report[f];
        a.id = f;
        const auto& items = lists[f].items();
        if (items.empty()) {
            a.status = AnnotationStatus::Dead;
            return;
        }
        std::vector<ActivationSample> top;
        for (const auto& [v, row] : items) top.push_back(sample_at(row, v));
        const double scale = top.front().activation;

        RngStream rng = RngStream::substream(cfg.seed, f);
        const auto order = rng.permutation(top.size());
        const auto n_explain = std::clamp<std::size_t>(
            static_cast<std::size_t>(std::ceil(cfg.explain_fraction * static_cast<double>(top.size()) - 1e-9)), 1,
            top.size());
        std::vector<ActivationSample> explain, score;
        for (std::size_t k = 0; k < top.size(); ++k) (k < n_explain ? explain : score).push_back(top[order[k]]);
        std::sort(explain.begin(), explain.end(), [](const auto& x, const auto& y) {
            return x.activation != y.activation ? x.activation > y.activation : x.row < y.row;
        });

        std::set<std::size_t> taken;
        for (const auto& s : top) taken.insert(s.row);
        const std::size_t available = batch.count() - taken.size();
        const std::size_t want = std::min(cfg.random_holdout, available);
        std::vector<std::size_t> extra;
        while (extra.size() < want) {
            const auto row = static_cast<std::size_t>(rng.below(batch.count()));
            if (taken.insert(row).second) extra.push_back(row);
        }
        for (auto row : extra) score.push_back(sample_at(row, encode(m, batch.rows.row(row))[f]));
        const auto shuffle = rng.permutation(score.size());
        std::vector<ActivationSample> shuffled;
        for (auto k : shuffle) shuffled.push_back(score[k]);
        score = std::move(shuffled);

        for (const auto& s : explain) a.explain_rows.push_back(s.row);
        for (const auto& s : score) a.score_rows.push_back(s.row);
        try {
            a.description = explain_feature(explainer, explain);
            a.score = simulate_and_score(simulator, *a.description, score, scale);
            a.status = AnnotationStatus::Annotated;
        } catch (const std::exception& e) {
            a.status = AnnotationStatus::Failed;
            a.score.reset();
            a.error = e.what();
        }
    };

    const std::size_t jobs = std::max<std::size_t>(1, cfg.jobs);
    if (jobs == 1) {
        for (std::size_t f = 0; f < m.h; ++f) annotate_one(f);
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::thread> pool;
        for (std::size_t t = 0; t < jobs; ++t)
            pool.emplace_back([&] {
                for (std::size_t f = next++; f < m.h; f = next++) annotate_one(f);
            });
        for (auto& t : pool) t.join();
    }

    std::string first_error;
    for (const auto& a : res.report) {
        auto& rec = res.dictionary.at(a.id);
        if (a.status == AnnotationStatus::Dead) {
            rec.interp_score.reset();
            continue;
        }
        ++res.alive;
        if (a.status == AnnotationStatus::Failed) {
            ++res.failed;
            if (first_error.empty()) first_error = "feature " + std::to_string(a.id) + ": " + a.error;
            rec.interp_score.reset();
            continue;
        }
        rec.description = a.description;
        rec.interp_score = a.score;
        if (*a.score >= cfg.threshold) ++res.validated;
    }
    if (res.failed * 2 > res.alive)
        throw ClientError("annotation aborted: " + std::to_string(res.failed) + " of " + std::to_string(res.alive) +
                          " alive features failed; " + first_error);
    res.validated_fraction = res.alive ? static_cast<double>(res.validated) / static_cast<double>(res.alive) : 0.0;
    return res;
}

inline std::string annotation_report_jsonl(const AnnotationResult& r) {
    std::string out;
    for (const auto& a : r.report) out += to_json(a).dump() + "\n";
    return out;
}

} // namespace monolex
