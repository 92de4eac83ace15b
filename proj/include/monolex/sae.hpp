// SPDX-License-Identifier: Apache-2.0
//
// Tied-weight sparse autoencoder.
//
//   z    = (x - mu) / sigma
//   s    = ReLU(W z + b_enc)
//   x^   = sigma * (W^T s + b_dec) + mu
//   loss = mean_x ||x - x^||^2 + lambda * mean_x ||s||_1
//
// The decoder is W^T; there is no separate decoder matrix anywhere.
#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "monolex/actstore.hpp"
#include "monolex/numerics.hpp"

namespace monolex {

struct SaeModel {
    std::size_t d = 0;
    std::size_t h = 0;
    Matrix W;       // h x d; row i is feature i's encoder row and decoder column
    Matrix b_enc;   // 1 x h
    Matrix b_dec;   // 1 x d
    std::vector<double> mu;
    std::vector<double> sigma;
    std::uint64_t seed = 0;
    double l1_coefficient = 0.0;

    friend bool operator==(const SaeModel&, const SaeModel&) = default;
};

struct LossBreakdown {
    double reconstruction = 0.0;
    double sparsity = 0.0;
    double total = 0.0;
    double lambda = 0.0;
};

struct SaeMetrics {
    double mse = 0.0;                  // mean over samples and coordinates
    double sq_error_per_sample = 0.0;  // mean over samples of ||x - x^||^2
    double sparsity_fraction = 0.0;
    std::size_t dead_features = 0;
    double mean_active = 0.0;
};

struct SaeGradients {
    Matrix W;
    Matrix b_enc;
    Matrix b_dec;
};

inline SaeModel init_model(std::size_t d, std::size_t expansion, std::uint64_t seed) {
    if (d < 1) throw ValidationError("init_model: d must be >= 1");
    if (expansion < 1) throw ValidationError("init_model: expansion must be >= 1");
    SaeModel m;
    m.d = d;
    m.h = d * expansion;
    m.seed = seed;
    m.W = Matrix(m.h, d);
    RngStream rng(seed);
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));
    for (double& w : m.W.values()) w = scale * rng.normal();
    normalize_rows(m.W);
    m.b_enc = Matrix(1, m.h);
    m.b_dec = Matrix(1, d);
    m.mu.assign(d, 0.0);
    m.sigma.assign(d, 1.0);
    return m;
}

inline void require_dim(const SaeModel& m, std::size_t got, const char* what) {
    if (got != m.d)
        throw ValidationError(std::string(what) + ": dimension mismatch (model d=" + std::to_string(m.d) +
                              ", input " + std::to_string(got) + ")");
}

/// Sets mu and sigma from the first `max_rows` rows of `rows`.
inline void fit_normalizer(SaeModel& m, const Matrix& rows, std::size_t max_rows = SIZE_MAX) {
    require_dim(m, rows.cols(), "fit_normalizer");
    const std::size_t n = std::min(rows.rows(), max_rows);
    if (n < 2) throw ValidationError("fit_normalizer: need at least 2 samples, got " + std::to_string(n));
    for (std::size_t j = 0; j < m.d; ++j) {
        double mean = 0.0;
        for (std::size_t i = 0; i < n; ++i) mean += rows(i, j);
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double c = rows(i, j) - mean;
            var += c * c;
        }
        var /= static_cast<double>(n - 1);
        m.mu[j] = mean;
        m.sigma[j] = std::max(std::sqrt(var), 1e-6);
    }
}

inline std::vector<double> normalize_input(const SaeModel& m, std::span<const double> x) {
    require_dim(m, x.size(), "normalize_input");
    std::vector<double> z(m.d);
    for (std::size_t j = 0; j < m.d; ++j) z[j] = (x[j] - m.mu[j]) / m.sigma[j];
    return z;
}

inline std::vector<double> encode(const SaeModel& m, std::span<const double> x) {
    const auto z = normalize_input(m, x);
    std::vector<double> s(m.h);
    for (std::size_t i = 0; i < m.h; ++i) {
        const double a = dot(m.W.row(i), z) + m.b_enc(0, i);
        s[i] = a > 0.0 ? a : 0.0;
    }
    return s;
}

inline std::vector<double> decode(const SaeModel& m, std::span<const double> s) {
    if (s.size() != m.h) throw ValidationError("decode: expected " + std::to_string(m.h) + " feature values");
    std::vector<double> y(m.d, 0.0);
    for (std::size_t i = 0; i < m.h; ++i) {
        if (s[i] == 0.0) continue;
        const auto w = m.W.row(i);
        for (std::size_t j = 0; j < m.d; ++j) y[j] += s[i] * w[j];
    }
    for (std::size_t j = 0; j < m.d; ++j) y[j] = m.sigma[j] * (y[j] + m.b_dec(0, j)) + m.mu[j];
    return y;
}

struct ForwardResult {
    std::vector<double> features;        // s
    std::vector<double> reconstruction;  // x^
};

// Fused single pass; kept separate from encode/decode so the two paths check each other.
inline ForwardResult forward(const SaeModel& m, std::span<const double> x) {
    require_dim(m, x.size(), "forward");
    for (double v : x)
        if (!std::isfinite(v)) throw ValidationError("forward: non-finite input");
    ForwardResult out;
    out.features.assign(m.h, 0.0);
    out.reconstruction.assign(m.d, 0.0);
    std::vector<double> z(m.d);
    for (std::size_t j = 0; j < m.d; ++j) z[j] = (x[j] - m.mu[j]) / m.sigma[j];
    for (std::size_t i = 0; i < m.h; ++i) {
        const auto w = m.W.row(i);
        double a = 0.0;
        for (std::size_t j = 0; j < m.d; ++j) a += w[j] * z[j];
        a += m.b_enc(0, i);
        if (a > 0.0) {
            out.features[i] = a;
            for (std::size_t j = 0; j < m.d; ++j) out.reconstruction[j] += a * w[j];
        }
    }
    for (std::size_t j = 0; j < m.d; ++j)
        out.reconstruction[j] = m.sigma[j] * (out.reconstruction[j] + m.b_dec(0, j)) + m.mu[j];
    return out;
}

inline LossBreakdown loss(const SaeModel& m, const Matrix& batch, double lambda) {
    if (!(lambda >= 0.0)) throw ValidationError("loss: lambda must be >= 0");
    if (batch.rows() == 0) throw ValidationError("loss: empty batch");
    require_dim(m, batch.cols(), "loss");
    double recon = 0.0;
    double l1 = 0.0;
    for (std::size_t r = 0; r < batch.rows(); ++r) {
        const auto x = batch.row(r);
        const auto f = forward(m, x);
        double err = 0.0;
        for (std::size_t j = 0; j < m.d; ++j) {
            const double e = x[j] - f.reconstruction[j];
            err += e * e;
        }
        double sl1 = 0.0;
        for (double s : f.features) sl1 += s;
        recon += err;
        l1 += sl1;
    }
    const double n = static_cast<double>(batch.rows());
    LossBreakdown out;
    out.lambda = lambda;
    out.reconstruction = recon / n;
    out.sparsity = l1 / n;
    out.total = out.reconstruction + lambda * out.sparsity;
    return out;
}

/// Analytic gradient of `loss` with respect to W, b_enc and b_dec. W collects
/// both its encoder-path and decoder-path terms. ReLU and |.| have subgradient
/// 0 at 0.
inline SaeGradients gradients(const SaeModel& m, const Matrix& batch, double lambda) {
    if (!(lambda >= 0.0)) throw ValidationError("gradients: lambda must be >= 0");
    if (batch.rows() == 0) throw ValidationError("gradients: empty batch");
    require_dim(m, batch.cols(), "gradients");

    SaeGradients g{Matrix(m.h, m.d), Matrix(1, m.h), Matrix(1, m.d)};
    const double n = static_cast<double>(batch.rows());
    std::vector<double> z(m.d), s(m.h), y(m.d), gy(m.d);

    for (std::size_t r = 0; r < batch.rows(); ++r) {
        const auto x = batch.row(r);
        for (std::size_t j = 0; j < m.d; ++j) z[j] = (x[j] - m.mu[j]) / m.sigma[j];
        std::fill(y.begin(), y.end(), 0.0);
        for (std::size_t i = 0; i < m.h; ++i) {
            const auto w = m.W.row(i);
            const double a = dot(w, z) + m.b_enc(0, i);
            s[i] = a > 0.0 ? a : 0.0;
            if (s[i] > 0.0)
                for (std::size_t j = 0; j < m.d; ++j) y[j] += s[i] * w[j];
        }
        // d/dy of (1/n) * ||sigma * (z - y - b_dec)||^2
        for (std::size_t j = 0; j < m.d; ++j) {
            const double resid = z[j] - y[j] - m.b_dec(0, j);
            gy[j] = -2.0 / n * m.sigma[j] * m.sigma[j] * resid;
            g.b_dec(0, j) += gy[j];
        }
        for (std::size_t i = 0; i < m.h; ++i) {
            if (s[i] <= 0.0) continue;
            auto w = m.W.row(i);
            auto gw = g.W.row(i);
            // dL/da_i = W_i . gy + lambda / n, active units only
            const double ga = dot(w, gy) + lambda / n;
            g.b_enc(0, i) += ga;
            for (std::size_t j = 0; j < m.d; ++j) gw[j] += s[i] * gy[j] + ga * z[j];
        }
    }
    return g;
}

/// Rows of W mapped back into raw activation space (sigma * W_i), unit length.
inline Matrix learned_directions(const SaeModel& m) {
    Matrix out(m.h, m.d);
    for (std::size_t i = 0; i < m.h; ++i)
        for (std::size_t j = 0; j < m.d; ++j) out(i, j) = m.sigma[j] * m.W(i, j);
    normalize_rows(out);
    return out;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct LossRecord {
    std::size_t batch_index = 0;
    LossBreakdown loss;
};

struct TrainReport {
    std::vector<LossRecord> history;
    LossBreakdown initial;   // on the normalizer sample, before the first step
    LossBreakdown final;     // same sample, after the last step
    std::size_t steps = 0;
    std::size_t sample_count = 0;
    std::vector<std::size_t> schedule;  // sample order, concatenated over passes
    double wall_seconds = 0.0;
};

inline void enforce_unit_rows(SaeModel& m) { normalize_rows(m.W); }

inline TrainReport train(SaeModel& m, const Matrix& samples, const TrainConfig& cfg) {
    if (samples.rows() == 0) throw ValidationError("train: empty activation stream");
    require_dim(m, samples.cols(), "train");
    if (cfg.batch_size < 1) throw ValidationError("train: batch size must be >= 1");
    samples.require_finite("train input");
    const auto t0 = std::chrono::steady_clock::now();

    if (samples.rows() >= 2) fit_normalizer(m, samples, cfg.normalizer_samples);
    m.l1_coefficient = cfg.l1_coefficient;

    const std::size_t eval_rows = std::min(samples.rows(), cfg.normalizer_samples);
    Matrix eval_set(eval_rows, m.d);
    for (std::size_t r = 0; r < eval_rows; ++r) std::copy_n(samples.row(r).begin(), m.d, eval_set.row(r).begin());

    TrainReport report;
    report.initial = loss(m, eval_set, cfg.l1_coefficient);

    AdamHyper hyper;
    hyper.learning_rate = cfg.learning_rate;
    AdamState sW(m.W, hyper), sEnc(m.b_enc, hyper), sDec(m.b_dec, hyper);

    RngStream rng(cfg.seed);
    const std::size_t passes = cfg.single_pass ? 1 : cfg.epochs;
    Matrix mb;
    for (std::size_t pass = 0; pass < passes; ++pass) {
        const auto order = rng.permutation(samples.rows());
        report.schedule.insert(report.schedule.end(), order.begin(), order.end());
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t len = std::min(cfg.batch_size, order.size() - start);
            if (mb.rows() != len) mb = Matrix(len, m.d);
            for (std::size_t k = 0; k < len; ++k)
                std::copy_n(samples.row(order[start + k]).begin(), m.d, mb.row(k).begin());

            if (report.steps % cfg.log_every == 0) report.history.push_back({report.steps, loss(m, mb, cfg.l1_coefficient)});

            const auto g = gradients(m, mb, cfg.l1_coefficient);
            adam_step(sW, m.W, g.W);
            adam_step(sEnc, m.b_enc, g.b_enc);
            adam_step(sDec, m.b_dec, g.b_dec);
            enforce_unit_rows(m);
            ++report.steps;
        }
    }
    report.sample_count = samples.rows() * passes;
    report.final = loss(m, eval_set, cfg.l1_coefficient);
    report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return report;
}

inline json to_json(const TrainReport& r) {
    auto lb = [](const LossBreakdown& l) {
        return json{{"reconstruction", l.reconstruction}, {"sparsity", l.sparsity}, {"total", l.total}, {"lambda", l.lambda}};
    };
    json hist = json::array();
    for (const auto& rec : r.history) hist.push_back({{"batch", rec.batch_index}, {"loss", lb(rec.loss)}});
    return {{"steps", r.steps},      {"sample_count", r.sample_count}, {"initial", lb(r.initial)},
            {"final", lb(r.final)}, {"history", hist},               {"wall_seconds", r.wall_seconds}};
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

inline SaeMetrics metrics(const SaeModel& m, const Matrix& batch, double activation_threshold = 1e-6) {
    if (!(activation_threshold >= 0.0)) throw ValidationError("metrics: threshold must be >= 0");
    if (batch.rows() == 0) throw ValidationError("metrics: empty batch");
    require_dim(m, batch.cols(), "metrics");
    std::vector<std::size_t> fired(m.h, 0);
    double sq = 0.0;
    double active = 0.0;
    for (std::size_t r = 0; r < batch.rows(); ++r) {
        const auto x = batch.row(r);
        const auto f = forward(m, x);
        for (std::size_t j = 0; j < m.d; ++j) {
            const double e = x[j] - f.reconstruction[j];
            sq += e * e;
        }
        for (std::size_t i = 0; i < m.h; ++i)
            if (f.features[i] > activation_threshold) {
                ++fired[i];
                active += 1.0;
            }
    }
    const double n = static_cast<double>(batch.rows());
    SaeMetrics out;
    out.sq_error_per_sample = sq / n;
    out.mse = sq / (n * static_cast<double>(m.d));
    out.mean_active = active / n;
    out.sparsity_fraction = out.mean_active / static_cast<double>(m.h);
    for (auto c : fired) out.dead_features += (c == 0);
    return out;
}

/// Mean over truth rows of the best |cosine| against any learned row.
inline double mmcs(const Matrix& learned, const Matrix& truth) {
    if (learned.cols() != truth.cols()) throw ValidationError("mmcs: dimension mismatch");
    if (truth.rows() == 0) throw ValidationError("mmcs: empty truth set");
    double acc = 0.0;
    for (std::size_t t = 0; t < truth.rows(); ++t) {
        const double tn = l2_norm(truth.row(t));
        double best = 0.0;
        for (std::size_t l = 0; l < learned.rows(); ++l) {
            const double ln = l2_norm(learned.row(l));
            if (ln == 0.0 || tn == 0.0) continue;
            best = std::max(best, std::abs(dot(learned.row(l), truth.row(t))) / (ln * tn));
        }
        acc += best;
    }
    return acc / static_cast<double>(truth.rows());
}

/// Share of truth rows with some learned row at |cosine| >= threshold.
inline double matched_fraction(const Matrix& learned, const Matrix& truth, double threshold) {
    if (learned.cols() != truth.cols()) throw ValidationError("matched_fraction: dimension mismatch");
    std::size_t hits = 0;
    for (std::size_t t = 0; t < truth.rows(); ++t) {
        const double tn = l2_norm(truth.row(t));
        for (std::size_t l = 0; l < learned.rows(); ++l) {
            const double ln = l2_norm(learned.row(l));
            if (ln > 0.0 && tn > 0.0 && std::abs(dot(learned.row(l), truth.row(t))) / (ln * tn) >= threshold) {
                ++hits;
                break;
            }
        }
    }
    return truth.rows() ? static_cast<double>(hits) / static_cast<double>(truth.rows()) : 0.0;
}

// ---------------------------------------------------------------------------
// SAE1 model file: "SAE1" | u32 LE header length | JSON header | f64 LE payload
// (W row-major, b_enc, b_dec)
// ---------------------------------------------------------------------------

inline void write_model(const SaeModel& m, const fs::path& path) {
    json header = {{"d", m.d}, {"h", m.h}, {"lambda", m.l1_coefficient}, {"seed", m.seed}, {"mu", m.mu}, {"sigma", m.sigma}};
    const std::string hdr = header.dump();
    std::string out = "SAE1";
    detail::put_u32(out, static_cast<std::uint32_t>(hdr.size()));
    out += hdr;
    for (double v : m.W.values()) detail::put_f64(out, v);
    for (double v : m.b_enc.values()) detail::put_f64(out, v);
    for (double v : m.b_dec.values()) detail::put_f64(out, v);
    detail::write_file(path, out);
}

inline SaeModel read_model(const fs::path& path) {
    const std::string bytes = detail::read_file(path);
    const std::string label = "SAE1 " + path.string();
    auto [header, at] = detail::read_framed_header(bytes, {'S', 'A', 'E', '1'}, false, 0, label);
    SaeModel m;
    m.d = detail::header_field<std::size_t>(header, "d", label, 8);
    m.h = detail::header_field<std::size_t>(header, "h", label, 8);
    m.l1_coefficient = detail::header_field<double>(header, "lambda", label, 8);
    m.seed = detail::header_field<std::uint64_t>(header, "seed", label, 8);
    m.mu = detail::header_field<std::vector<double>>(header, "mu", label, 8);
    m.sigma = detail::header_field<std::vector<double>>(header, "sigma", label, 8);
    if (m.d == 0 || m.h == 0 || m.mu.size() != m.d || m.sigma.size() != m.d)
        throw FormatError(label + ": inconsistent header dimensions", 8);
    const std::size_t expected = (m.h * m.d + m.h + m.d) * 8;
    if (bytes.size() - at != expected)
        throw FormatError(label + ": payload expected " + std::to_string(expected) + " bytes, got " +
                              std::to_string(bytes.size() - at),
                          at);
    auto take = [&](std::size_t rows, std::size_t cols) {
        std::vector<double> v(rows * cols);
        for (auto& x : v) {
            x = detail::get_f64(bytes, at);
            at += 8;
        }
        return Matrix(rows, cols, std::move(v));
    };
    m.W = take(m.h, m.d);
    m.b_enc = take(1, m.h);
    m.b_dec = take(1, m.d);
    for (double s : m.sigma)
        if (!(s > 0.0)) throw FormatError(label + ": sigma entries must be > 0", 8);
    return m;
}

/// Dictionary skeleton from a model: raw-space directions, no annotations.
inline FeatureDictionary dictionary_from_model(const SaeModel& m) {
    const Matrix dirs = learned_directions(m);
    FeatureDictionary dict;
    dict.dim = m.d;
    for (std::size_t i = 0; i < m.h; ++i) {
        FeatureRecord r;
        r.id = i;
        r.direction.assign(dirs.row(i).begin(), dirs.row(i).end());
        if (l2_norm(r.direction) == 0.0) r.direction.clear();
        dict.features.push_back(std::move(r));
    }
    return dict;
}

} // namespace monolex
