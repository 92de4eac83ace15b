// SPDX-License-Identifier: Apache-2.0
//
// Synthetic superposition data with known ground truth: feature directions
// packed into fewer neurons, sparse nonnegative coefficients, and a small
// "token world" that maps token strings to feature mixtures.
#pragma once

#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "monolex/actstore.hpp"
#include "monolex/numerics.hpp"
#include "monolex/sae.hpp"

namespace monolex {

struct FeatureLabel {
    std::string category;
    std::string label;
};

struct TrueDictionary {
    std::size_t dim = 0;
    Matrix directions;                 // n_features x dim, unit rows
    std::vector<std::string> categories;
    std::vector<std::string> labels;

    std::size_t n_features() const noexcept { return directions.rows(); }
};

using CoeffMatrix = Matrix;  // n_samples x n_features, entries >= 0

inline const std::vector<std::string>& default_categories() {
    static const std::vector<std::string> c{"math", "code", "punctuation", "liquid-motion", "celebration"};
    return c;
}

/// Random unit directions, each redrawn until the angle between its line and
/// every earlier one is at least `min_angle_deg` (|cos| <= cos(min_angle)). Categories cycle through `categories`; labels
/// default to "<category> pattern <id>".
inline TrueDictionary generate_truth(std::size_t dim, std::size_t n_features, std::uint64_t seed, double min_angle_deg,
                                     const std::vector<FeatureLabel>& names = {},
                                     std::size_t max_tries_per_feature = 20000) {
    if (n_features < 1) throw ValidationError("generate_truth: n_features must be >= 1");
    if (dim < 2) throw ValidationError("generate_truth: dim must be >= 2");
    if (!(min_angle_deg >= 0.0 && min_angle_deg < 90.0))
        throw ValidationError("generate_truth: min_angle must be in [0, 90)");

    TrueDictionary t;
    t.dim = dim;
    t.directions = Matrix(n_features, dim);
    const double max_cos = std::cos(min_angle_deg * M_PI / 180.0);
    RngStream rng(seed);
    std::vector<double> v(dim);
    for (std::size_t f = 0; f < n_features; ++f) {
        bool placed = false;
        for (std::size_t attempt = 0; attempt < max_tries_per_feature && !placed; ++attempt) {
            for (double& x : v) x = rng.normal();
            const double n = l2_norm(v);
            if (n == 0.0) continue;
            for (double& x : v) x /= n;
            placed = true;
            for (std::size_t g = 0; g < f && placed; ++g)
                if (std::abs(dot(v, t.directions.row(g))) > max_cos) placed = false;
        }
        if (!placed)
            throw ValidationError("generate_truth: could not place feature " + std::to_string(f) + " of " +
                                  std::to_string(n_features) + " with pairwise angle >= " +
                                  std::to_string(min_angle_deg) +
                                  " degrees; try a smaller n_features or min_angle");
        std::copy(v.begin(), v.end(), t.directions.row(f).begin());
    }

    for (std::size_t f = 0; f < n_features; ++f) {
        if (!names.empty()) {
            const auto& n = names[f % names.size()];
            t.categories.push_back(n.category);
            t.labels.push_back(names.size() >= n_features ? n.label : n.label + " #" + std::to_string(f));
        } else {
            const auto& cats = default_categories();
            t.categories.push_back(cats[f % cats.size()]);
            t.labels.push_back(cats[f % cats.size()] + " pattern " + std::to_string(f));
        }
    }
    return t;
}

/// Sparse mixtures x = sum_i g_i * direction_i + N(0, noise_sigma^2 I).
/// Each g_i is nonzero with probability feature_prob and then Uniform(0, 1].
/// Sample r draws from its own substream, so rows do not depend on n_samples.
inline std::pair<ActivationBatch, CoeffMatrix> sample_activations(const TrueDictionary& truth, std::size_t n_samples,
                                                                  double feature_prob, double noise_sigma,
                                                                  std::uint64_t seed) {
    if (!(feature_prob > 0.0 && feature_prob <= 1.0))
        throw ValidationError("sample_activations: feature_prob must be in (0, 1]");
    if (!(noise_sigma >= 0.0)) throw ValidationError("sample_activations: noise_sigma must be >= 0");

    const std::size_t nf = truth.n_features();
    ActivationBatch batch;
    batch.rows = Matrix(n_samples, truth.dim);
    batch.source = "synthetic seed=" + std::to_string(seed);
    CoeffMatrix coeffs(n_samples, nf);
    for (std::size_t r = 0; r < n_samples; ++r) {
        RngStream rng = RngStream::substream(seed, r);
        auto g = coeffs.row(r);
        for (std::size_t f = 0; f < nf; ++f)
            if (rng.uniform() < feature_prob) g[f] = 1.0 - rng.uniform();
        auto x = batch.rows.row(r);
        for (std::size_t f = 0; f < nf; ++f) {
            if (g[f] == 0.0) continue;
            const auto dir = truth.directions.row(f);
            for (std::size_t j = 0; j < truth.dim; ++j) x[j] += g[f] * dir[j];
        }
        if (noise_sigma > 0.0)
            for (double& v : x) v += noise_sigma * rng.normal();
    }
    return {std::move(batch), std::move(coeffs)};
}

/// Sidecar for synthetic samples: row r carries token "s<r>".
inline TokenSidecar synthetic_sidecar(std::size_t n_samples) {
    TokenSidecar sc;
    sc.records.reserve(n_samples);
    for (std::size_t r = 0; r < n_samples; ++r) {
        const std::string tok = "s" + std::to_string(r);
        sc.records.push_back({r, tok, "synthetic", r, "synthetic sample " + tok});
    }
    return sc;
}

// ---------------------------------------------------------------------------
// Token world
// ---------------------------------------------------------------------------

struct MixtureEntry {
    std::size_t feature = 0;
    double weight = 0.0;
};

struct TokenWorld {
    std::vector<std::string> vocabulary;
    std::map<std::string, std::vector<MixtureEntry>> mixtures;  // ranked by weight, descending
    double noise = 0.0;

    bool contains(const std::string& token) const { return mixtures.count(token) != 0; }
};

struct WorldFile {
    TokenWorld world;
    TrueDictionary truth;
    json truth_spec;  // generation parameters as written in the file
};

inline void validate(const TokenWorld& w, const TrueDictionary& truth) {
    if (!(w.noise >= 0.0)) throw ValidationError("token world: noise must be >= 0");
    for (const auto& tok : w.vocabulary) {
        const auto& mix = w.mixtures.at(tok);
        if (mix.empty()) throw ValidationError("token world: token \"" + tok + "\" has an empty mixture");
        double sum = 0.0;
        for (const auto& e : mix) {
            if (e.feature >= truth.n_features())
                throw ValidationError("token world: token \"" + tok + "\" references unknown feature " +
                                      std::to_string(e.feature));
            if (!(e.weight > 0.0)) throw ValidationError("token world: token \"" + tok + "\" has a non-positive weight");
            sum += e.weight;
        }
        if (std::abs(sum - 1.0) > 1e-9)
            throw ValidationError("token world: weights of \"" + tok + "\" sum to " + std::to_string(sum) + ", not 1");
    }
}

inline WorldFile world_from_json(const json& j) {
    WorldFile wf;
    try {
        wf.truth_spec = j.at("truth");
        const auto& t = wf.truth_spec;
        std::vector<FeatureLabel> names;
        for (const auto& f : t.at("features")) names.push_back({f.at("category").get<std::string>(), f.at("label").get<std::string>()});
        wf.truth = generate_truth(t.at("dim").get<std::size_t>(), names.size(), t.at("seed").get<std::uint64_t>(),
                                  t.value("min_angle", 0.0), names);
        wf.world.noise = j.value("noise", 0.0);
        for (const auto& tok : j.at("tokens")) {
            const auto name = tok.at("token").get<std::string>();
            if (wf.world.contains(name)) throw ValidationError("token world: duplicate token \"" + name + "\"");
            std::vector<MixtureEntry> mix;
            for (const auto& e : tok.at("mixture")) mix.push_back({e.at("feature").get<std::size_t>(), e.at("weight").get<double>()});
            std::stable_sort(mix.begin(), mix.end(), [](const auto& a, const auto& b) { return a.weight > b.weight; });
            wf.world.vocabulary.push_back(name);
            wf.world.mixtures.emplace(name, std::move(mix));
        }
    } catch (const json::exception& e) {
        throw ValidationError(std::string("token world: malformed document: ") + e.what());
    }
    validate(wf.world, wf.truth);
    return wf;
}

inline WorldFile load_world(const fs::path& path) {
    json j;
    try {
        j = json::parse(detail::read_file(path));
    } catch (const json::parse_error& e) {
        throw IoError("token world " + path.string() + ": " + e.what());
    }
    return world_from_json(j);
}

/// One activation row per token: the weighted sum of its mixture directions
/// plus N(0, noise^2) per coordinate (token i uses substream (seed, i)).
inline std::pair<ActivationBatch, TokenSidecar> token_activations(const TokenWorld& world, const TrueDictionary& truth,
                                                                  const std::vector<std::string>& tokens,
                                                                  std::uint64_t seed, const std::string& text = {}) {
    for (const auto& tok : tokens)
        if (!world.contains(tok)) throw ValidationError("token_activations: unknown token \"" + tok + "\"");
    ActivationBatch batch;
    batch.rows = Matrix(tokens.size(), truth.dim);
    batch.source = "token-world";
    TokenSidecar sc;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        auto x = batch.rows.row(i);
        for (const auto& e : world.mixtures.at(tokens[i])) {
            const auto dir = truth.directions.row(e.feature);
            for (std::size_t j = 0; j < truth.dim; ++j) x[j] += e.weight * dir[j];
        }
        if (world.noise > 0.0) {
            RngStream rng = RngStream::substream(seed, i);
            for (double& v : x) v += world.noise * rng.normal();
        }
        sc.records.push_back({i, tokens[i], "input", i, text.empty() ? tokens[i] : text});
    }
    return {std::move(batch), std::move(sc)};
}

/// SAE whose features are exactly the true directions (identity normalizer,
/// zero biases): encoding a token returns its projections onto the truth.
inline SaeModel oracle_model(const TrueDictionary& truth) {
    SaeModel m;
    m.d = truth.dim;
    m.h = truth.n_features();
    m.W = truth.directions;
    m.b_enc = Matrix(1, m.h);
    m.b_dec = Matrix(1, m.d);
    m.mu.assign(m.d, 0.0);
    m.sigma.assign(m.d, 1.0);
    return m;
}

/// Dictionary carrying the ground-truth labels and categories.
inline FeatureDictionary truth_dictionary(const TrueDictionary& truth) {
    FeatureDictionary d;
    d.dim = truth.dim;
    for (std::size_t f = 0; f < truth.n_features(); ++f) {
        FeatureRecord r;
        r.id = f;
        r.direction.assign(truth.directions.row(f).begin(), truth.directions.row(f).end());
        r.description = truth.labels[f];
        r.category = truth.categories[f];
        d.features.push_back(std::move(r));
    }
    return d;
}

} // namespace monolex
