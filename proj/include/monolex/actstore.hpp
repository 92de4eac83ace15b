// SPDX-License-Identifier: Apache-2.0
//
// File formats shared by the trainer, the annotation loop and external
// exporters: ACTV activation dumps with a .tokens.jsonl sidecar, feature
// dictionaries (JSON) and run configuration (JSON, strict).
#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "monolex/error.hpp"
#include "monolex/numerics.hpp"

namespace monolex {

namespace fs = std::filesystem;
using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Activation batches
// ---------------------------------------------------------------------------

struct ActivationBatch {
    Matrix rows;  // count x dim
    std::string source;
    std::optional<std::uint32_t> layer;

    std::size_t dim() const noexcept { return rows.cols(); }
    std::size_t count() const noexcept { return rows.rows(); }

    friend bool operator==(const ActivationBatch&, const ActivationBatch&) = default;
};

struct TokenRecord {
    std::size_t row = 0;
    std::string token;
    std::string document;
    std::size_t position = 0;
    std::string context;

    friend bool operator==(const TokenRecord&, const TokenRecord&) = default;
};

struct TokenSidecar {
    std::vector<TokenRecord> records;

    bool empty() const noexcept { return records.empty(); }

    // Record for a batch row, or nullptr.
    const TokenRecord* find(std::size_t row) const {
        for (const auto& r : records)
            if (r.row == row) return &r;
        return nullptr;
    }

    friend bool operator==(const TokenSidecar&, const TokenSidecar&) = default;
};

inline void validate(const ActivationBatch& batch, const TokenSidecar& sidecar) {
    if (batch.dim() == 0) throw ValidationError("ActivationBatch: dim must be > 0");
    batch.rows.require_finite("ActivationBatch");
    std::set<std::size_t> seen;
    for (const auto& r : sidecar.records) {
        if (r.row >= batch.count())
            throw ValidationError("TokenSidecar: row " + std::to_string(r.row) + " >= batch count " +
                                  std::to_string(batch.count()));
        if (!seen.insert(r.row).second)
            throw ValidationError("TokenSidecar: duplicate row index " + std::to_string(r.row));
    }
}

/// "a/b/acts.actv" -> "a/b/acts.tokens.jsonl"
inline fs::path sidecar_path(const fs::path& actv) {
    fs::path p = actv;
    p.replace_extension(".tokens.jsonl");
    return p;
}

namespace detail {

inline constexpr std::array<char, 4> kActvMagic{'A', 'C', 'T', 'V'};
inline constexpr std::uint8_t kActvVersion = 0x01;

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline std::uint32_t get_u32(const std::string& in, std::size_t at) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[at + i])) << (8 * i);
    return v;
}

inline std::uint64_t get_u64(const std::string& in, std::size_t at) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[at + i])) << (8 * i);
    return v;
}

inline void put_f32(std::string& out, double value) { put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(value))); }
inline double get_f32(const std::string& in, std::size_t at) { return std::bit_cast<float>(get_u32(in, at)); }
inline void put_f64(std::string& out, double value) { put_u64(out, std::bit_cast<std::uint64_t>(value)); }
inline double get_f64(const std::string& in, std::size_t at) { return std::bit_cast<double>(get_u64(in, at)); }

inline std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_file(const fs::path& path, const std::string& bytes) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("short write to " + path.string());
}

// Magic + version + u32 header length + JSON header. Returns the header and
// the offset where the payload starts.
inline std::pair<json, std::size_t> read_framed_header(const std::string& bytes, const std::array<char, 4>& magic,
                                                       bool versioned, std::uint8_t version,
                                                       const std::string& label) {
    if (bytes.size() < 4 || std::memcmp(bytes.data(), magic.data(), 4) != 0)
        throw FormatError(label + ": bad magic, expected \"" + std::string(magic.data(), 4) + "\"", 0);
    std::size_t at = 4;
    if (versioned) {
        if (bytes.size() < 5) throw FormatError(label + ": missing version byte", 4);
        if (static_cast<std::uint8_t>(bytes[4]) != version)
            throw FormatError(label + ": unsupported version " + std::to_string(static_cast<unsigned char>(bytes[4])), 4);
        at = 5;
    }
    if (bytes.size() < at + 4) throw FormatError(label + ": missing header length", at);
    const std::uint32_t len = get_u32(bytes, at);
    at += 4;
    if (bytes.size() < at + len)
        throw FormatError(label + ": header declares " + std::to_string(len) + " bytes but only " +
                              std::to_string(bytes.size() - at) + " remain",
                          at - 4);
    json header;
    try {
        header = json::parse(bytes.begin() + static_cast<std::ptrdiff_t>(at),
                             bytes.begin() + static_cast<std::ptrdiff_t>(at + len));
    } catch (const json::exception& e) {
        throw FormatError(label + ": header is not valid JSON: " + e.what(), at);
    }
    if (!header.is_object()) throw FormatError(label + ": header is not a JSON object", at);
    return {std::move(header), at + len};
}

template <typename T>
T header_field(const json& header, const char* key, const std::string& label, std::size_t offset) {
    if (!header.contains(key)) throw FormatError(label + ": header lacks \"" + key + "\"", offset);
    try {
        return header.at(key).get<T>();
    } catch (const json::exception&) {
        throw FormatError(label + ": header field \"" + std::string(key) + "\" has the wrong type", offset);
    }
}

} // namespace detail

inline void write_activations(const ActivationBatch& batch, const TokenSidecar& sidecar, const fs::path& path) {
    validate(batch, sidecar);
    json header = {{"dim", batch.dim()},
                   {"count", batch.count()},
                   {"dtype", "f32"},
                   {"source", batch.source},
                   {"layer", batch.layer ? json(*batch.layer) : json(nullptr)}};
    const std::string hdr = header.dump();

    std::string out;
    out.reserve(9 + hdr.size() + batch.rows.size() * 4);
    out.append(detail::kActvMagic.data(), 4);
    out.push_back(static_cast<char>(detail::kActvVersion));
    detail::put_u32(out, static_cast<std::uint32_t>(hdr.size()));
    out += hdr;
    for (double v : batch.rows.values()) detail::put_f32(out, v);
    detail::write_file(path, out);

    if (!sidecar.empty()) {
        std::string lines;
        for (const auto& r : sidecar.records) {
            json j = {{"row", r.row}, {"token", r.token}, {"doc", r.document}, {"position", r.position},
                      {"context", r.context}};
            lines += j.dump() + "\n";
        }
        detail::write_file(sidecar_path(path), lines);
    }
}

inline TokenSidecar read_sidecar(const fs::path& path) {
    TokenSidecar sc;
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            const json j = json::parse(line);
            TokenRecord r;
            r.row = j.at("row").get<std::size_t>();
            r.token = j.at("token").get<std::string>();
            r.document = j.value("doc", std::string{});
            r.position = j.value("position", std::size_t{0});
            r.context = j.value("context", std::string{});
            sc.records.push_back(std::move(r));
        } catch (const json::exception& e) {
            throw IoError(path.string() + ":" + std::to_string(lineno) + ": malformed sidecar record: " + e.what());
        }
    }
    return sc;
}

/// Reads an ACTV v1 file and, when present, its sidecar.
inline std::pair<ActivationBatch, TokenSidecar> read_activations(const fs::path& path) {
    const std::string bytes = detail::read_file(path);
    const std::string label = "ACTV " + path.string();
    auto [header, payload_at] = detail::read_framed_header(bytes, detail::kActvMagic, true, detail::kActvVersion, label);

    const auto dim = detail::header_field<std::size_t>(header, "dim", label, 9);
    const auto count = detail::header_field<std::size_t>(header, "count", label, 9);
    const auto dtype = detail::header_field<std::string>(header, "dtype", label, 9);
    if (dtype != "f32") throw FormatError(label + ": unsupported dtype \"" + dtype + "\"", 9);
    if (dim == 0) throw FormatError(label + ": dim must be > 0", 9);

    const std::size_t expected = dim * count * 4;
    const std::size_t actual = bytes.size() - payload_at;
    if (actual != expected)
        throw FormatError(label + ": payload " + (actual < expected ? "truncated" : "has trailing bytes") +
                              ": expected " + std::to_string(expected) + " bytes, got " + std::to_string(actual),
                          payload_at);

    std::vector<double> values(dim * count);
    for (std::size_t i = 0; i < values.size(); ++i) values[i] = detail::get_f32(bytes, payload_at + 4 * i);

    ActivationBatch batch;
    batch.rows = Matrix(count, dim, std::move(values));
    batch.source = header.value("source", std::string{});
    if (header.contains("layer") && !header["layer"].is_null()) batch.layer = header["layer"].get<std::uint32_t>();

    TokenSidecar sidecar;
    if (fs::exists(sidecar_path(path))) sidecar = read_sidecar(sidecar_path(path));
    validate(batch, sidecar);
    return {std::move(batch), std::move(sidecar)};
}

// ---------------------------------------------------------------------------
// Feature dictionaries
// ---------------------------------------------------------------------------

struct FeatureRecord {
    std::size_t id = 0;
    std::vector<double> direction;  // empty when not recorded
    std::optional<std::string> description;
    std::optional<std::string> category;
    std::optional<double> interp_score;

    friend bool operator==(const FeatureRecord&, const FeatureRecord&) = default;
};

struct FeatureDictionary {
    std::size_t dim = 0;
    std::vector<FeatureRecord> features;  // sorted by id, ids dense in [0, n)

    std::size_t size() const noexcept { return features.size(); }
    const FeatureRecord& at(std::size_t id) const { return features.at(id); }
    FeatureRecord& at(std::size_t id) { return features.at(id); }

    friend bool operator==(const FeatureDictionary&, const FeatureDictionary&) = default;
};

inline void validate(const FeatureDictionary& dict) {
    std::set<std::size_t> ids;
    for (const auto& f : dict.features) {
        if (!ids.insert(f.id).second) throw ValidationError("dictionary: duplicate feature id " + std::to_string(f.id));
        if (!f.direction.empty()) {
            if (f.direction.size() != dict.dim)
                throw ValidationError("dictionary: feature " + std::to_string(f.id) + " direction has length " +
                                      std::to_string(f.direction.size()) + ", expected " + std::to_string(dict.dim));
            const double n = l2_norm(f.direction);
            if (!(std::abs(n - 1.0) <= 1e-6))
                throw ValidationError("dictionary: feature " + std::to_string(f.id) + " direction is not unit norm (" +
                                      std::to_string(n) + ")");
        }
        if (f.interp_score && !(*f.interp_score >= -1.0 && *f.interp_score <= 1.0))
            throw ValidationError("dictionary: feature " + std::to_string(f.id) + " interp_score outside [-1, 1]");
    }
    for (std::size_t i = 0; i < dict.features.size(); ++i)
        if (dict.features[i].id != i)
            throw ValidationError("dictionary: feature ids must be dense and sorted; position " + std::to_string(i) +
                                  " holds id " + std::to_string(dict.features[i].id));
}

inline json to_json(const FeatureDictionary& dict) {
    json feats = json::array();
    auto opt = [](const auto& o) { return o ? json(*o) : json(nullptr); };
    for (const auto& f : dict.features) {
        feats.push_back({{"id", f.id},
                         {"direction", f.direction.empty() ? json(nullptr) : json(f.direction)},
                         {"description", opt(f.description)},
                         {"category", opt(f.category)},
                         {"interp_score", opt(f.interp_score)}});
    }
    return {{"dim", dict.dim}, {"n_features", dict.features.size()}, {"features", std::move(feats)}};
}

inline FeatureDictionary dictionary_from_json(const json& j) {
    FeatureDictionary dict;
    try {
        dict.dim = j.at("dim").get<std::size_t>();
        for (const auto& f : j.at("features")) {
            FeatureRecord r;
            r.id = f.at("id").get<std::size_t>();
            if (f.contains("direction") && !f["direction"].is_null()) r.direction = f["direction"].get<std::vector<double>>();
            if (f.contains("description") && !f["description"].is_null()) r.description = f["description"].get<std::string>();
            if (f.contains("category") && !f["category"].is_null()) r.category = f["category"].get<std::string>();
            if (f.contains("interp_score") && !f["interp_score"].is_null()) r.interp_score = f["interp_score"].get<double>();
            dict.features.push_back(std::move(r));
        }
        if (j.contains("n_features") && j["n_features"].get<std::size_t>() != dict.features.size())
            throw ValidationError("dictionary: n_features does not match the feature list length");
    } catch (const json::exception& e) {
        throw ValidationError(std::string("dictionary: malformed document: ") + e.what());
    }
    // Duplicates are reported before the density check.
    std::set<std::size_t> ids;
    for (const auto& f : dict.features)
        if (!ids.insert(f.id).second) throw ValidationError("dictionary: duplicate feature id " + std::to_string(f.id));
    std::sort(dict.features.begin(), dict.features.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
    validate(dict);
    return dict;
}

inline void write_dictionary(const FeatureDictionary& dict, const fs::path& path) {
    validate(dict);
    detail::write_file(path, to_json(dict).dump(1) + "\n");
}

inline FeatureDictionary read_dictionary(const fs::path& path) {
    json j;
    try {
        j = json::parse(detail::read_file(path));
    } catch (const json::parse_error& e) {
        throw IoError("dictionary " + path.string() + ": " + e.what());
    }
    return dictionary_from_json(j);
}

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

struct TrainConfig {
    std::size_t expansion = 4;
    double learning_rate = 1e-4;
    std::size_t batch_size = 16;
    std::size_t epochs = 10;       // used only when single_pass is false
    bool single_pass = true;
    double l1_coefficient = 1e-3;
    std::uint64_t seed = 0;
    std::size_t log_every = 100;   // batches between LossBreakdown records
    std::size_t normalizer_samples = 10000;
};

struct DetectConfig {
    std::size_t top_k = 3;
    std::size_t depth = 1;
    std::string category_map;      // empty: shipped assets/math_categories.json
    bool flag_numbers = false;
};

struct AnnotateConfig {
    std::size_t n_samples = 20;
    double explain_fraction = 0.75;
    std::size_t random_holdout = 10;
    double threshold = 0.7;
    std::uint64_t seed = 0;
    std::size_t jobs = 1;
};

struct ReformulateConfig {
    std::size_t max_attempts = 3;
    bool allow_same_judge = false;
};

struct EndpointConfig {
    std::string name;
    std::string base_url;
    std::string fixture;           // resolved path
    std::string model = "default";
    double timeout_s = 60.0;
    std::size_t max_retries = 3;
    double backoff_base_s = 1.0;
    std::size_t concurrency = 4;
    std::string api_key_env = "MONOLEX_API_KEY";
    std::size_t max_tokens = 512;
};

struct ClientsConfig {
    std::map<std::string, EndpointConfig> endpoints;
    // role -> endpoint name; roles absent here default to the endpoint named like the role
    std::map<std::string, std::string> roles;

    std::string endpoint_for(const std::string& role) const {
        auto it = roles.find(role);
        return it == roles.end() ? role : it->second;
    }
};

struct RunConfig {
    TrainConfig train;
    DetectConfig detect;
    AnnotateConfig annotate;
    ReformulateConfig reformulate;
    ClientsConfig clients;
};

inline const std::set<std::string>& known_roles() {
    static const std::set<std::string> roles{"explainer", "simulator", "rephraser", "judge",
                                             "metaphor_judge", "clarifier", "subject"};
    return roles;
}

namespace detail {

class StrictReader {
public:
    StrictReader(const json& obj, std::string path) : obj_(obj), path_(std::move(path)) {
        if (!obj_.is_object()) throw ValidationError("config: " + label() + " must be an object");
        for (auto it = obj_.begin(); it != obj_.end(); ++it) unused_.insert(it.key());
    }

    template <typename T>
    void get(const char* key, T& out) {
        unused_.erase(key);
        if (!obj_.contains(key)) return;
        try {
            out = obj_.at(key).get<T>();
        } catch (const json::exception&) {
            throw ValidationError("config: " + field(key) + " has the wrong type");
        }
    }

    const json* sub(const char* key) {
        unused_.erase(key);
        return obj_.contains(key) ? &obj_.at(key) : nullptr;
    }

    void finish() const {
        if (!unused_.empty()) throw ValidationError("config: unknown key " + field(unused_.begin()->c_str()));
    }

    std::string field(const char* key) const { return path_.empty() ? std::string(key) : path_ + "." + key; }

private:
    std::string label() const { return path_.empty() ? "document" : path_; }

    const json& obj_;
    std::string path_;
    std::set<std::string> unused_;
};

} // namespace detail

inline void validate(const RunConfig& c) {
    if (c.train.expansion < 1) throw ValidationError("config: train.expansion must be >= 1");
    if (c.train.batch_size < 1) throw ValidationError("config: train.batch_size must be >= 1");
    if (!(c.train.learning_rate >= 0.0)) throw ValidationError("config: train.learning_rate must be >= 0");
    if (!(c.train.l1_coefficient >= 0.0)) throw ValidationError("config: train.l1_coefficient must be >= 0");
    if (c.train.epochs < 1) throw ValidationError("config: train.epochs must be >= 1");
    if (c.train.log_every < 1) throw ValidationError("config: train.log_every must be >= 1");
    if (c.detect.depth < 1) throw ValidationError("config: detect.depth must be >= 1");
    if (c.detect.top_k < c.detect.depth) throw ValidationError("config: detect.top_k must be >= detect.depth");
    if (c.annotate.n_samples < 1) throw ValidationError("config: annotate.n_samples must be >= 1");
    if (!(c.annotate.explain_fraction > 0.0 && c.annotate.explain_fraction < 1.0))
        throw ValidationError("config: annotate.explain_fraction must be in (0, 1)");
    if (c.annotate.jobs < 1) throw ValidationError("config: annotate.jobs must be >= 1");
    if (c.reformulate.max_attempts < 1) throw ValidationError("config: reformulate.max_attempts must be >= 1");
    for (const auto& [name, ep] : c.clients.endpoints) {
        if (ep.base_url.empty() == ep.fixture.empty())
            throw ValidationError("config: clients.endpoints." + name + " needs exactly one of base_url / fixture");
        if (ep.concurrency < 1) throw ValidationError("config: clients.endpoints." + name + ".concurrency must be >= 1");
        if (!(ep.timeout_s > 0.0)) throw ValidationError("config: clients.endpoints." + name + ".timeout_s must be > 0");
    }
    for (const auto& [role, name] : c.clients.roles)
        if (!known_roles().count(role)) throw ValidationError("config: unknown client role \"" + role + "\"");
}

/// Parses a config document. Relative fixture paths resolve against `base_dir`.
inline RunConfig config_from_json(const json& doc, const fs::path& base_dir = {}) {
    RunConfig c;
    detail::StrictReader top(doc, "");
    if (const json* t = top.sub("train")) {
        detail::StrictReader r(*t, "train");
        r.get("expansion", c.train.expansion);
        r.get("learning_rate", c.train.learning_rate);
        r.get("batch_size", c.train.batch_size);
        r.get("epochs", c.train.epochs);
        r.get("single_pass", c.train.single_pass);
        r.get("l1_coefficient", c.train.l1_coefficient);
        r.get("seed", c.train.seed);
        r.get("log_every", c.train.log_every);
        r.get("normalizer_samples", c.train.normalizer_samples);
        r.finish();
    }
    if (const json* d = top.sub("detect")) {
        detail::StrictReader r(*d, "detect");
        r.get("top_k", c.detect.top_k);
        r.get("depth", c.detect.depth);
        r.get("category_map", c.detect.category_map);
        r.get("flag_numbers", c.detect.flag_numbers);
        r.finish();
        if (!c.detect.category_map.empty() && fs::path(c.detect.category_map).is_relative() && !base_dir.empty())
            c.detect.category_map = (base_dir / c.detect.category_map).string();
    }
    if (const json* a = top.sub("annotate")) {
        detail::StrictReader r(*a, "annotate");
        r.get("n_samples", c.annotate.n_samples);
        r.get("explain_fraction", c.annotate.explain_fraction);
        r.get("random_holdout", c.annotate.random_holdout);
        r.get("threshold", c.annotate.threshold);
        r.get("seed", c.annotate.seed);
        r.get("jobs", c.annotate.jobs);
        r.finish();
    }
    if (const json* f = top.sub("reformulate")) {
        detail::StrictReader r(*f, "reformulate");
        r.get("max_attempts", c.reformulate.max_attempts);
        r.get("allow_same_judge", c.reformulate.allow_same_judge);
        r.finish();
    }
    if (const json* cl = top.sub("clients")) {
        detail::StrictReader r(*cl, "clients");
        if (const json* eps = r.sub("endpoints")) {
            if (!eps->is_object()) throw ValidationError("config: clients.endpoints must be an object");
            for (auto it = eps->begin(); it != eps->end(); ++it) {
                EndpointConfig ep;
                ep.name = it.key();
                detail::StrictReader e(it.value(), "clients.endpoints." + it.key());
                e.get("base_url", ep.base_url);
                e.get("fixture", ep.fixture);
                e.get("model", ep.model);
                e.get("timeout_s", ep.timeout_s);
                e.get("max_retries", ep.max_retries);
                e.get("backoff_base_s", ep.backoff_base_s);
                e.get("concurrency", ep.concurrency);
                e.get("api_key_env", ep.api_key_env);
                e.get("max_tokens", ep.max_tokens);
                e.finish();
                if (!ep.fixture.empty() && fs::path(ep.fixture).is_relative() && !base_dir.empty())
                    ep.fixture = (base_dir / ep.fixture).string();
                c.clients.endpoints.emplace(ep.name, std::move(ep));
            }
        }
        r.get("roles", c.clients.roles);
        r.finish();
    }
    top.finish();

    if (const char* env = std::getenv("MONOLEX_BASE_URL"); env && *env)
        for (auto& [name, ep] : c.clients.endpoints)
            if (ep.base_url.empty() && ep.fixture.empty()) ep.base_url = env;

    validate(c);
    return c;
}

inline RunConfig load_config(const fs::path& path) {
    json doc;
    try {
        doc = json::parse(detail::read_file(path));
    } catch (const json::parse_error& e) {
        throw ValidationError("config " + path.string() + ": " + e.what());
    }
    return config_from_json(doc, path.parent_path());
}

} // namespace monolex
