// SPDX-License-Identifier: Apache-2.0
//
// Benchmarks: dataset loaders, answer graders, paired t-tests, caption
// statistics for original-vs-enhanced result tables, and benchmark runs.
#pragma once

#include <atomic>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <regex>
#include <sstream>
#include <thread>

#include "monolex/ambiguity.hpp"
#include "monolex/reformulate.hpp"

namespace monolex {

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

/// Math domains in the column order used by result tables.
inline const std::vector<std::string>& math_domains() {
    static const std::vector<std::string> d{"Intermediate Algebra", "Counting/Probability", "Precalculus",
                                            "Number Theory",        "Algebra",              "Prealgebra",
                                            "Geometry"};
    return d;
}

inline std::string canonical_domain(const std::string& type) {
    std::string key;
    for (char c : type) {
        if (std::isalnum(static_cast<unsigned char>(c))) key += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    }
    for (const auto& d : math_domains()) {
        std::string dk;
        for (char c : d)
            if (std::isalnum(static_cast<unsigned char>(c))) dk += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
        if (key == dk || (key == "countingandprobability" && d == "Counting/Probability")) return d;
    }
    throw ValidationError("unknown math domain \"" + type + "\"");
}

/// Content of the last \boxed{...} (or \fbox{...}) with all whitespace removed.
inline std::optional<std::string> last_boxed(const std::string& text) {
    std::size_t best = std::string::npos;
    std::size_t open = 0;
    for (const char* tag : {"\\boxed{", "\\fbox{"}) {
        const auto at = text.rfind(tag);
        if (at != std::string::npos && (best == std::string::npos || at > best)) {
            best = at;
            open = at + std::char_traits<char>::length(tag);
        }
    }
    if (best == std::string::npos) return std::nullopt;
    int depth = 1;
    std::size_t i = open;
    for (; i < text.size() && depth > 0; ++i) {
        if (text[i] == '{') ++depth;
        else if (text[i] == '}') --depth;
    }
    if (depth != 0) return std::nullopt;
    std::string out;
    for (std::size_t k = open; k + 1 < i; ++k)
        if (!std::isspace(static_cast<unsigned char>(text[k]))) out += text[k];
    if (out.empty()) return std::nullopt;
    return out;
}

struct MathProblem {
    std::string id;
    std::string problem;
    std::string domain;
    std::string level;
    std::string solution;
    std::string answer;
};

template <class Item>
struct Dataset {
    std::vector<Item> items;
    std::size_t skipped = 0;
    std::vector<std::string> warnings;
};

namespace detail {

inline std::optional<MathProblem> math_from_json(const json& j, const std::string& id, Dataset<MathProblem>& ds) {
    MathProblem p;
    p.id = j.contains("id") ? j.at("id").get<std::string>() : id;
    p.problem = j.at("problem").get<std::string>();
    p.domain = canonical_domain(j.at("type").get<std::string>());
    p.level = j.value("level", "");
    p.solution = j.at("solution").get<std::string>();
    const auto boxed = last_boxed(p.solution);
    if (!boxed) {
        ++ds.skipped;
        ds.warnings.push_back(p.id + ": no boxed answer in solution, skipped");
        return std::nullopt;
    }
    p.answer = *boxed;
    return p;
}

} // namespace detail

/// A directory of one-object .json files (sorted by path) or a .jsonl file.
inline Dataset<MathProblem> load_math(const fs::path& path) {
    Dataset<MathProblem> ds;
    if (!fs::exists(path)) throw IoError("math dataset " + path.string() + ": not found");
    if (fs::is_directory(path)) {
        std::vector<fs::path> files;
        for (const auto& e : fs::recursive_directory_iterator(path))
            if (e.is_regular_file() && e.path().extension() == ".json") files.push_back(e.path());
        std::sort(files.begin(), files.end());
        for (const auto& f : files) {
            try {
                const auto j = json::parse(detail::read_file(f));
                if (auto p = detail::math_from_json(j, fs::relative(f, path).replace_extension().generic_string(), ds))
                    ds.items.push_back(std::move(*p));
            } catch (const json::exception& e) {
                throw IoError("math dataset " + f.string() + ": " + e.what());
            } catch (const ValidationError& e) {
                throw IoError("math dataset " + f.string() + ": " + e.what());
            }
        }
    } else {
        std::ifstream in(path);
        if (!in) throw IoError("math dataset " + path.string() + ": cannot open");
        std::string line;
        for (std::size_t n = 1; std::getline(in, line); ++n) {
            if (trim(line).empty()) continue;
            try {
                if (auto p = detail::math_from_json(json::parse(line), "line" + std::to_string(n), ds))
                    ds.items.push_back(std::move(*p));
            } catch (const json::exception& e) {
                throw IoError("math dataset " + path.string() + " line " + std::to_string(n) + ": " + e.what());
            } catch (const ValidationError& e) {
                throw IoError("math dataset " + path.string() + " line " + std::to_string(n) + ": " + e.what());
            }
        }
    }
    if (ds.items.empty()) throw ValidationError("math dataset " + path.string() + ": no valid items");
    return ds;
}

struct MetaphorItem {
    std::string id;
    std::string sentence;
    std::string target;
    std::string label;    // "metaphorical" or "literal"
    std::string dataset;  // "MOH-X" or "TroFi"
};

inline const std::vector<std::string>& metaphor_datasets() {
    static const std::vector<std::string> d{"MOH-X", "TroFi"};
    return d;
}

/// Tab-separated with a header naming sentence, target, label and optionally
/// dataset. Without a dataset column every item gets `dataset`.
inline Dataset<MetaphorItem> load_metaphor(const fs::path& path, const std::string& dataset = "MOH-X") {
    std::ifstream in(path);
    if (!in) throw IoError("metaphor dataset " + path.string() + ": cannot open");
    auto split = [](const std::string& line) {
        std::vector<std::string> cols;
        std::size_t at = 0;
        for (;;) {
            const auto tab = line.find('\t', at);
            cols.push_back(line.substr(at, tab == std::string::npos ? std::string::npos : tab - at));
            if (tab == std::string::npos) break;
            at = tab + 1;
        }
        if (!cols.empty() && !cols.back().empty() && cols.back().back() == '\r') cols.back().pop_back();
        return cols;
    };
    std::string line;
    if (!std::getline(in, line)) throw ValidationError("metaphor dataset " + path.string() + ": empty file");
    const auto header = split(line);
    std::map<std::string, std::size_t> col;
    for (std::size_t i = 0; i < header.size(); ++i) col[header[i]] = i;
    for (const char* need : {"sentence", "target", "label"})
        if (!col.count(need))
            throw IoError("metaphor dataset " + path.string() + " line 1: header lacks \"" + need + "\" column");
    Dataset<MetaphorItem> ds;
    for (std::size_t n = 2; std::getline(in, line); ++n) {
        if (trim(line).empty()) continue;
        const auto cols = split(line);
        const std::string where = "metaphor dataset " + path.string() + " line " + std::to_string(n) + ": ";
        if (cols.size() != header.size())
            throw IoError(where + "expected " + std::to_string(header.size()) + " columns, got " + std::to_string(cols.size()));
        MetaphorItem it;
        it.id = col.count("id") ? cols[col["id"]] : "line" + std::to_string(n);
        it.sentence = cols[col["sentence"]];
        it.target = cols[col["target"]];
        it.label = cols[col["label"]];
        it.dataset = col.count("dataset") ? cols[col["dataset"]] : dataset;
        if (it.label != "metaphorical" && it.label != "literal")
            throw IoError(where + "label must be metaphorical or literal, got \"" + it.label + "\"");
        if (it.target.empty() || it.sentence.find(it.target) == std::string::npos)
            throw IoError(where + "target \"" + it.target + "\" does not occur in the sentence");
        if (std::find(metaphor_datasets().begin(), metaphor_datasets().end(), it.dataset) == metaphor_datasets().end())
            throw IoError(where + "dataset must be MOH-X or TroFi, got \"" + it.dataset + "\"");
        ds.items.push_back(std::move(it));
    }
    if (ds.items.empty()) throw ValidationError("metaphor dataset " + path.string() + ": no valid items");
    return ds;
}

// ---------------------------------------------------------------------------
// Grading
// ---------------------------------------------------------------------------

inline std::string normalize_answer(std::string s) {
    std::string out;
    for (char c : s)
        if (!std::isspace(static_cast<unsigned char>(c))) out += c;
    while (out.size() >= 2 && out.front() == '$' && out.back() == '$') out = out.substr(1, out.size() - 2);
    while (!out.empty() && (out.back() == '.' || out.back() == '$')) out.pop_back();
    while (!out.empty() && out.front() == '$') out.erase(0, 1);
    if (!out.empty() && out.front() == '+') out.erase(0, 1);
    return out;
}

/// Final answer in a model reply: the last boxed expression, else the last
/// number or simple fraction.
inline std::optional<std::string> extract_answer(const std::string& reply) {
    if (auto b = last_boxed(reply)) return normalize_answer(*b);
    static const std::regex num_re(R"([-+]?\d+(?:\.\d+)?(?:\s*/\s*\d+)?)");
    std::optional<std::string> last;
    for (auto it = std::sregex_iterator(reply.begin(), reply.end(), num_re); it != std::sregex_iterator(); ++it)
        last = it->str();
    if (!last) return std::nullopt;
    return normalize_answer(*last);
}

inline bool grade_math(const std::string& reply, const std::string& reference) {
    const auto got = extract_answer(reply);
    return got && !got->empty() && *got == normalize_answer(reference);
}

/// First whole word "metaphorical" or "literal" in the reply, lower-cased.
inline std::optional<std::string> metaphor_label(const std::string& reply) {
    static const std::regex re(R"(\b(metaphorical|literal)\b)", std::regex::icase);
    std::smatch m;
    if (!std::regex_search(reply, m, re)) return std::nullopt;
    std::string w = m[1].str();
    std::transform(w.begin(), w.end(), w.begin(), [](unsigned char c) { return std::tolower(c); });
    return w;
}

inline bool grade_metaphor(const std::string& reply, const std::string& gold) {
    const auto got = metaphor_label(reply);
    return got && *got == gold;
}

// ---------------------------------------------------------------------------
// Statistics
// ---------------------------------------------------------------------------

namespace detail {

// Continued fraction for the incomplete beta (modified Lentz).
inline double betacf(double a, double b, double x) {
    constexpr double tiny = 1e-300, eps = 1e-16;
    const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
    double c = 1.0, d = 1.0 - qab * x / qap;
    if (std::abs(d) < tiny) d = tiny;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= 10000; ++m) {
        const int m2 = 2 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < tiny) d = tiny;
        c = 1.0 + aa / c;
        if (std::abs(c) < tiny) c = tiny;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < tiny) d = tiny;
        c = 1.0 + aa / c;
        if (std::abs(c) < tiny) c = tiny;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::abs(del - 1.0) < eps) return h;
    }
    throw ValidationError("incomplete beta: continued fraction did not converge");
}

} // namespace detail

/// Regularized incomplete beta I_x(a, b).
inline double incomplete_beta(double a, double b, double x) {
    if (!(a > 0.0 && b > 0.0)) throw ValidationError("incomplete_beta: a and b must be > 0");
    if (!(x >= 0.0 && x <= 1.0)) throw ValidationError("incomplete_beta: x must be in [0, 1]");
    if (x == 0.0 || x == 1.0) return x;
    const double ln_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
    const double front = std::exp(ln_front);
    if (x < (a + 1.0) / (a + b + 2.0)) return front * detail::betacf(a, b, x) / a;
    return 1.0 - front * detail::betacf(b, a, 1.0 - x) / b;
}

/// Two-tailed P(|T| >= |t|) for Student's t with df degrees of freedom.
inline double student_t_two_tailed(double t, double df) {
    if (!(df > 0.0)) throw ValidationError("student_t_two_tailed: df must be > 0");
    if (std::isinf(t)) return 0.0;
    return incomplete_beta(df / 2.0, 0.5, df / (df + t * t));
}

struct TTest {
    double t = 0.0;
    std::size_t df = 0;
    double p = 1.0;
    double mean_diff = 0.0;
    double sd_diff = 0.0;
};

/// Paired test on b - a.
inline TTest paired_t_test(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw ValidationError("paired_t_test: lengths differ");
    if (a.size() < 2) throw ValidationError("paired_t_test: need at least 2 pairs");
    const double n = static_cast<double>(a.size());
    std::vector<double> d(a.size());
    double mean = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) mean += (d[i] = b[i] - a[i]);
    mean /= n;
    double ss = 0.0;
    for (double v : d) ss += (v - mean) * (v - mean);
    const double sd = std::sqrt(ss / (n - 1.0));
    if (!(sd > 0.0)) throw ValidationError("paired_t_test: degenerate differences (all equal)");
    TTest r;
    r.mean_diff = mean;
    r.sd_diff = sd;
    r.t = mean / (sd / std::sqrt(n));
    r.df = a.size() - 1;
    r.p = student_t_two_tailed(r.t, static_cast<double>(r.df));
    return r;
}

// ---------------------------------------------------------------------------
// Result tables
// ---------------------------------------------------------------------------

struct ResultsRow {
    std::string model;
    std::string condition;      // "original" or "enhanced"
    std::vector<double> cells;  // percent; NaN where a column had no items
    std::optional<double> total;
};

struct ResultsTable {
    std::string name;
    std::vector<std::string> columns;
    std::vector<ResultsRow> rows;
    json caption;  // reference caption values, if any

    const ResultsRow* find(const std::string& model, const std::string& condition) const {
        for (const auto& r : rows)
            if (r.model == model && r.condition == condition) return &r;
        return nullptr;
    }
    std::vector<std::string> models() const {
        std::vector<std::string> out;
        for (const auto& r : rows)
            if (std::find(out.begin(), out.end(), r.model) == out.end()) out.push_back(r.model);
        return out;
    }
};

inline json to_json(const ResultsTable& t) {
    json rows = json::array();
    for (const auto& r : t.rows) {
        json cells = json::array();
        for (double c : r.cells) cells.push_back(std::isnan(c) ? json(nullptr) : json(c));
        rows.push_back({{"model", r.model},
                        {"condition", r.condition},
                        {"cells", cells},
                        {"total", r.total ? json(*r.total) : json(nullptr)}});
    }
    json j = {{"name", t.name}, {"columns", t.columns}, {"rows", rows}};
    if (!t.caption.is_null()) j["caption"] = t.caption;
    return j;
}

inline ResultsTable results_table_from_json(const json& j) {
    ResultsTable t;
    try {
        t.name = j.value("name", "");
        t.columns = j.at("columns").get<std::vector<std::string>>();
        for (const auto& r : j.at("rows")) {
            ResultsRow row;
            row.model = r.at("model").get<std::string>();
            row.condition = r.at("condition").get<std::string>();
            for (const auto& c : r.at("cells")) row.cells.push_back(c.is_null() ? std::nan("") : c.get<double>());
            if (r.contains("total") && !r.at("total").is_null()) row.total = r.at("total").get<double>();
            if (row.condition != "original" && row.condition != "enhanced")
                throw ValidationError("results table: condition must be original or enhanced, got \"" + row.condition + "\"");
            if (row.cells.size() != t.columns.size())
                throw ValidationError("results table: row " + row.model + "/" + row.condition + " has " +
                                      std::to_string(row.cells.size()) + " cells for " +
                                      std::to_string(t.columns.size()) + " columns");
            for (double c : row.cells)
                if (!std::isnan(c) && !(c >= 0.0 && c <= 100.0))
                    throw ValidationError("results table: accuracy outside [0, 100] in " + row.model);
            t.rows.push_back(std::move(row));
        }
        if (j.contains("caption")) t.caption = j.at("caption");
    } catch (const json::exception& e) {
        throw ValidationError(std::string("results table: ") + e.what());
    }
    return t;
}

inline ResultsTable load_results_table(const fs::path& path) {
    try {
        return results_table_from_json(json::parse(detail::read_file(path)));
    } catch (const json::parse_error& e) {
        throw IoError("results table " + path.string() + ": " + e.what());
    }
}

/// Copy without the columns that have no value in any row (benchmark runs
/// over a subset of domains).
inline ResultsTable drop_empty_columns(const ResultsTable& t) {
    ResultsTable out = t;
    out.columns.clear();
    for (auto& r : out.rows) r.cells.clear();
    for (std::size_t c = 0; c < t.columns.size(); ++c) {
        const bool empty = std::all_of(t.rows.begin(), t.rows.end(), [c](const auto& r) { return std::isnan(r.cells[c]); });
        if (empty) continue;
        out.columns.push_back(t.columns[c]);
        for (std::size_t i = 0; i < t.rows.size(); ++i) out.rows[i].cells.push_back(t.rows[i].cells[c]);
    }
    return out;
}

/// Mean gains of enhanced over original under three averaging conventions.
/// per_cell (the headline figure) averages every model x column cell;
/// per_model averages each model's mean gain; per_total uses the Total column.
struct CaptionStats {
    double absolute = 0.0;  // per-cell
    double relative = 0.0;  // per-cell, percent
    double per_model_absolute = 0.0;
    double per_model_relative = 0.0;
    std::optional<double> per_total_absolute;
    std::optional<double> per_total_relative;
    std::size_t cells = 0;
};

inline CaptionStats caption_stats(const ResultsTable& t) {
    CaptionStats s;
    const auto models = t.models();
    if (models.empty()) throw ValidationError("caption_stats: empty table");
    double tot_abs = 0.0, tot_rel = 0.0;
    bool have_totals = true;
    for (const auto& m : models) {
        const auto* o = t.find(m, "original");
        const auto* e = t.find(m, "enhanced");
        if (!o || !e) throw ValidationError("caption_stats: model \"" + m + "\" lacks an original or enhanced row");
        double m_abs = 0.0, m_rel = 0.0;
        for (std::size_t c = 0; c < t.columns.size(); ++c) {
            if (std::isnan(o->cells[c]) || std::isnan(e->cells[c]))
                throw ValidationError("caption_stats: model \"" + m + "\" has no value for " + t.columns[c]);
            if (o->cells[c] == 0.0)
                throw ValidationError("caption_stats: original accuracy is 0 for " + m + "/" + t.columns[c]);
            const double gain = e->cells[c] - o->cells[c];
            s.absolute += gain;
            s.relative += gain / o->cells[c] * 100.0;
            m_abs += gain;
            m_rel += gain / o->cells[c] * 100.0;
            ++s.cells;
        }
        s.per_model_absolute += m_abs / static_cast<double>(t.columns.size());
        s.per_model_relative += m_rel / static_cast<double>(t.columns.size());
        if (o->total && e->total && *o->total != 0.0) {
            tot_abs += *e->total - *o->total;
            tot_rel += (*e->total - *o->total) / *o->total * 100.0;
        } else {
            have_totals = false;
        }
    }
    const double nm = static_cast<double>(models.size());
    s.absolute /= static_cast<double>(s.cells);
    s.relative /= static_cast<double>(s.cells);
    s.per_model_absolute /= nm;
    s.per_model_relative /= nm;
    if (have_totals) {
        s.per_total_absolute = tot_abs / nm;
        s.per_total_relative = tot_rel / nm;
    }
    return s;
}

inline json to_json(const CaptionStats& s) {
    return {{"absolute", s.absolute},
            {"relative", s.relative},
            {"cells", s.cells},
            {"per_model_absolute", s.per_model_absolute},
            {"per_model_relative", s.per_model_relative},
            {"per_total_absolute", s.per_total_absolute ? json(*s.per_total_absolute) : json(nullptr)},
            {"per_total_relative", s.per_total_relative ? json(*s.per_total_relative) : json(nullptr)}};
}

/// Per-model paired t-test of enhanced vs original over the table's columns.
inline std::vector<std::pair<std::string, TTest>> model_t_tests(const ResultsTable& t) {
    std::vector<std::pair<std::string, TTest>> out;
    for (const auto& m : t.models()) {
        const auto* o = t.find(m, "original");
        const auto* e = t.find(m, "enhanced");
        if (!o || !e) throw ValidationError("model_t_tests: model \"" + m + "\" lacks an original or enhanced row");
        out.emplace_back(m, paired_t_test(o->cells, e->cells));
    }
    return out;
}

struct ModelTTest {
    std::string model;
    std::optional<TTest> test;
    std::string reason;  // why test is missing
};

/// Like model_t_tests, but a model whose test is undefined (too few cells,
/// identical differences) gets a reason instead of aborting the report.
inline std::vector<ModelTTest> model_t_tests_or_reasons(const ResultsTable& t) {
    std::vector<ModelTTest> out;
    for (const auto& m : t.models()) {
        const auto* o = t.find(m, "original");
        const auto* e = t.find(m, "enhanced");
        if (!o || !e) throw ValidationError("model_t_tests: model \"" + m + "\" lacks an original or enhanced row");
        try {
            out.push_back({m, paired_t_test(o->cells, e->cells), {}});
        } catch (const ValidationError& err) {
            out.push_back({m, std::nullopt, err.what()});
        }
    }
    return out;
}

namespace detail {

inline std::string fixed(double v, int prec) {
    if (std::isnan(v)) return "-";
    std::ostringstream os;
    os << std::fixed << std::setprecision(prec) << v;
    return os.str();
}

} // namespace detail

/// Plain-text layout: one line per model and condition.
inline std::string render_table(const ResultsTable& t) {
    std::vector<std::string> head{"Model", "Condition"};
    head.insert(head.end(), t.columns.begin(), t.columns.end());
    const bool totals = std::any_of(t.rows.begin(), t.rows.end(), [](const auto& r) { return r.total.has_value(); });
    if (totals) head.push_back("Total");
    std::vector<std::vector<std::string>> grid{head};
    for (const auto& r : t.rows) {
        std::vector<std::string> line{r.model, r.condition};
        for (double c : r.cells) line.push_back(detail::fixed(c, 1));
        if (totals) line.push_back(r.total ? detail::fixed(*r.total, 1) : "-");
        grid.push_back(line);
    }
    std::vector<std::size_t> width(head.size(), 0);
    for (const auto& line : grid)
        for (std::size_t i = 0; i < line.size(); ++i) width[i] = std::max(width[i], line[i].size());
    std::string out = t.name.empty() ? "" : t.name + "\n";
    for (const auto& line : grid) {
        for (std::size_t i = 0; i < line.size(); ++i) {
            out += line[i];
            if (i + 1 < line.size()) out += std::string(width[i] - line[i].size() + 2, ' ');
        }
        out += "\n";
    }
    return out;
}

/// Caption statistics and per-model t-tests as a readable report.
inline std::string render_stats(const ResultsTable& t) {
    const auto s = caption_stats(t);
    std::string out;
    out += "mean absolute gain (per cell, " + std::to_string(s.cells) + " cells): " + detail::fixed(s.absolute, 4) + "\n";
    out += "mean relative gain % (per cell): " + detail::fixed(s.relative, 4) + "\n";
    out += "per-model averaging: absolute " + detail::fixed(s.per_model_absolute, 4) + ", relative " +
           detail::fixed(s.per_model_relative, 4) + "\n";
    if (s.per_total_absolute)
        out += "total-column averaging: absolute " + detail::fixed(*s.per_total_absolute, 4) + ", relative " +
               detail::fixed(*s.per_total_relative, 4) + "\n";
    else
        out += "total-column averaging: n/a (no Total column)\n";
    if (t.caption.is_object())
        out += "caption values: absolute " + t.caption.value("absolute", json(nullptr)).dump() + ", relative " +
               t.caption.value("relative", json(nullptr)).dump() + "\n";
    for (const auto& m : model_t_tests_or_reasons(t)) {
        if (!m.test) {
            out += "paired t-test " + m.model + ": n/a (" + m.reason + ")\n";
            continue;
        }
        std::ostringstream p;
        p << std::scientific << std::setprecision(3) << m.test->p;
        out += "paired t-test " + m.model + ": t = " + detail::fixed(m.test->t, 4) + ", df = " +
               std::to_string(m.test->df) + ", p (two-tailed) = " + p.str() + "\n";
    }
    return out;
}

// ---------------------------------------------------------------------------
// Benchmark runs
// ---------------------------------------------------------------------------

enum class BenchMode { Original, Enhanced };

inline const char* to_string(BenchMode m) { return m == BenchMode::Original ? "original" : "enhanced"; }

inline BenchMode bench_mode_from_string(const std::string& s) {
    if (s == "original") return BenchMode::Original;
    if (s == "enhanced") return BenchMode::Enhanced;
    throw ValidationError("bench mode must be original or enhanced, got \"" + s + "\"");
}

/// What enhanced mode needs to find ambiguous tokens.
struct DetectionEnv {
    const SaeModel* model = nullptr;
    const FeatureDictionary* dictionary = nullptr;
    ActivationSource source;
    CategoryMap categories;
    DetectConfig detect;
};

struct BenchResult {
    ResultsTable table;                 // one row: the subject model under the run's mode
    std::vector<json> log;              // one record per item, item order
    std::size_t failures = 0;
};

namespace detail {

inline ResultsRow accuracy_row(const std::string& model, BenchMode mode, const std::vector<std::string>& columns,
                               const std::vector<std::pair<std::string, bool>>& graded) {
    ResultsRow row;
    row.model = model;
    row.condition = to_string(mode);
    std::size_t all = 0, all_ok = 0;
    for (const auto& col : columns) {
        std::size_t n = 0, ok = 0;
        for (const auto& [c, correct] : graded)
            if (c == col) {
                ++n;
                ok += correct;
            }
        row.cells.push_back(n ? 100.0 * static_cast<double>(ok) / static_cast<double>(n) : std::nan(""));
        all += n;
        all_ok += ok;
    }
    row.total = all ? 100.0 * static_cast<double>(all_ok) / static_cast<double>(all) : 0.0;
    return row;
}

template <class F>
void for_items(std::size_t n, std::size_t jobs, F&& f) {
    jobs = std::max<std::size_t>(1, std::min(jobs, n));
    if (jobs == 1) {
        for (std::size_t i = 0; i < n; ++i) f(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < jobs; ++t)
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) f(i);
        });
    for (auto& th : pool) th.join();
}

} // namespace detail

/// Original mode sends each problem as-is; enhanced mode detects, reformulates
/// and sends the final query. Item failures are logged and graded incorrect.
inline BenchResult run_math_benchmark(const std::vector<MathProblem>& problems, BenchMode mode, ClientSet& clients,
                                      const DetectionEnv* env, const ReformulateConfig& cfg,
                                      const std::string& model_name, std::size_t jobs = 1) {
    if (problems.empty()) throw ValidationError("run_math_benchmark: empty dataset");
    if (mode == BenchMode::Enhanced && (!env || !env->model || !env->dictionary || !env->source))
        throw ValidationError("run_math_benchmark: enhanced mode needs a model, dictionary and activation source");
    ChatClient& subject = clients.for_role("subject");
    ChatClient* rephraser = mode == BenchMode::Enhanced ? &clients.for_role("rephraser") : nullptr;
    ChatClient* judge = mode == BenchMode::Enhanced ? &clients.for_role("judge") : nullptr;
    if (rephraser) require_distinct_judge(rephraser->endpoint(), judge->endpoint(), cfg.allow_same_judge);

    std::vector<json> log(problems.size());
    std::vector<std::pair<std::string, bool>> graded(problems.size());
    detail::for_items(problems.size(), jobs, [&](std::size_t i) {
        const auto& p = problems[i];
        json rec = {{"id", p.id}, {"domain", p.domain}, {"mode", to_string(mode)}, {"reference", p.answer}};
        bool correct = false;
        try {
            ReformulationOutcome o;
            if (mode == BenchMode::Original) {
                o.kind = "math";
                o.original = o.final_query = p.problem;
                o.endpoints["subject"] = subject.endpoint();
                o.answer = answer(subject, p.problem, &o.exchanges);
            } else {
                const auto det = detect_question(p.problem, env->source, *env->model, *env->dictionary, env->categories,
                                                 env->detect);
                o = run_math(*rephraser, *judge, subject, p.problem, det.reports, cfg);
                if (!det.skipped.empty()) rec["skipped_tokens"] = det.skipped;
            }
            correct = grade_math(*o.answer, p.answer);
            rec["extracted"] = extract_answer(*o.answer) ? json(*extract_answer(*o.answer)) : json(nullptr);
            rec["outcome"] = to_json(o);
        } catch (const ReformulationError& e) {
            rec["error"] = e.what();
            rec["outcome"] = to_json(e.partial());
        } catch (const ClientError& e) {
            rec["error"] = e.what();
        }
        rec["correct"] = correct;
        graded[i] = {p.domain, correct};
        log[i] = std::move(rec);
    });

    BenchResult res;
    res.table.name = "math accuracy (%)";
    res.table.columns = math_domains();
    res.table.rows.push_back(detail::accuracy_row(model_name, mode, res.table.columns, graded));
    for (const auto& r : log) res.failures += r.contains("error");
    res.log = std::move(log);
    return res;
}

inline BenchResult run_metaphor_benchmark(const std::vector<MetaphorItem>& items, BenchMode mode, ClientSet& clients,
                                          const DetectionEnv* env, const std::string& model_name, std::size_t jobs = 1) {
    if (items.empty()) throw ValidationError("run_metaphor_benchmark: empty dataset");
    if (mode == BenchMode::Enhanced && (!env || !env->model || !env->dictionary || !env->source))
        throw ValidationError("run_metaphor_benchmark: enhanced mode needs a model, dictionary and activation source");
    ChatClient& subject = clients.for_role("subject");
    ChatClient* judge = mode == BenchMode::Enhanced ? &clients.for_role("metaphor_judge") : nullptr;
    ChatClient* clarifier = mode == BenchMode::Enhanced ? &clients.for_role("clarifier") : nullptr;

    std::vector<json> log(items.size());
    std::vector<std::pair<std::string, bool>> graded(items.size());
    detail::for_items(items.size(), jobs, [&](std::size_t i) {
        const auto& it = items[i];
        json rec = {{"id", it.id}, {"dataset", it.dataset}, {"mode", to_string(mode)}, {"reference", it.label}};
        bool correct = false;
        try {
            ReformulationOutcome o;
            if (mode == BenchMode::Original) {
                o.kind = "metaphor";
                o.sentence = it.sentence;
                o.target = it.target;
                o.original = o.final_query = metaphor_query(it.sentence, it.target);
                o.endpoints["subject"] = subject.endpoint();
                o.answer = answer(subject, o.final_query, &o.exchanges);
            } else {
                std::vector<FeatureActivation> ranked;
                if (const auto act = env->source(it.target, 0))
                    ranked = rank_token_features(*env->model, *env->dictionary, *act, env->detect.top_k);
                else
                    rec["skipped_tokens"] = json::array({it.target});
                o = run_metaphor(*judge, *clarifier, subject, it.sentence, it.target, ranked);
            }
            const auto label = metaphor_label(*o.answer);
            rec["extracted"] = label ? json(*label) : json(nullptr);
            correct = grade_metaphor(*o.answer, it.label);
            rec["outcome"] = to_json(o);
        } catch (const ReformulationError& e) {
            rec["error"] = e.what();
            rec["outcome"] = to_json(e.partial());
        } catch (const ClientError& e) {
            rec["error"] = e.what();
        }
        rec["correct"] = correct;
        graded[i] = {it.dataset, correct};
        log[i] = std::move(rec);
    });

    BenchResult res;
    res.table.name = "metaphor accuracy (%)";
    res.table.columns = metaphor_datasets();
    res.table.rows.push_back(detail::accuracy_row(model_name, mode, res.table.columns, graded));
    res.table.rows.back().total.reset();
    for (const auto& r : log) res.failures += r.contains("error");
    res.log = std::move(log);
    return res;
}

} // namespace monolex
