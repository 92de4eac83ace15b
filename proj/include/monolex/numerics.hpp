// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "monolex/error.hpp"

namespace monolex {

/// Dense row-major matrix of doubles.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (data_.size() != rows_ * cols_)
            throw ValidationError("Matrix: data length " + std::to_string(data_.size()) +
                                  " != rows*cols " + std::to_string(rows_ * cols_));
        require_finite("Matrix");
    }

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    std::span<double> values() { return data_; }
    std::span<const double> values() const { return data_; }

    bool same_shape(const Matrix& o) const noexcept { return rows_ == o.rows_ && cols_ == o.cols_; }

    // Throws naming the first non-finite flat index.
    void require_finite(const std::string& what) const {
        for (std::size_t i = 0; i < data_.size(); ++i)
            if (!std::isfinite(data_[i]))
                throw ValidationError(what + ": non-finite value at index " + std::to_string(i) +
                                      " (row " + std::to_string(i / std::max<std::size_t>(cols_, 1)) +
                                      ", col " + std::to_string(i % std::max<std::size_t>(cols_, 1)) + ")");
    }

    friend bool operator==(const Matrix&, const Matrix&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

inline double dot(std::span<const double> a, std::span<const double> b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
}

inline double l2_norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

// Scales each row to unit L2 norm. Zero rows are left untouched.
inline void normalize_rows(Matrix& m) {
    for (std::size_t r = 0; r < m.rows(); ++r) {
        auto row = m.row(r);
        const double n = l2_norm(row);
        if (n > 0.0)
            for (double& v : row) v /= n;
    }
}

// ---------------------------------------------------------------------------
// Random numbers
// ---------------------------------------------------------------------------

inline std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

/// xoshiro256** seeded through splitmix64.
///
/// The sequence depends only on the seed: uniforms take the top 53 bits of
/// each output, normals use Box-Muller on two uniforms (no cached spare), and
/// bounded integers use Lemire's multiply-shift with rejection.
class RngStream {
public:
    explicit RngStream(std::uint64_t seed) : seed_(seed) {
        std::uint64_t sm = seed;
        for (auto& s : s_) s = splitmix64(sm);
    }

    // Independent stream for (seed, index); lets per-sample draws stay
    // reproducible regardless of iteration order.
    static RngStream substream(std::uint64_t seed, std::uint64_t index) {
        std::uint64_t a = seed;
        std::uint64_t mixed = splitmix64(a);
        std::uint64_t b = index ^ 0xD1B54A32D192ED03ULL;
        mixed ^= splitmix64(b);
        return RngStream(mixed);
    }

    std::uint64_t seed() const noexcept { return seed_; }
    std::uint64_t draws() const noexcept { return counter_; }

    std::uint64_t next_u64() {
        ++counter_;
        const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
        const std::uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    /// Uniform in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double normal() {
        const double u1 = 1.0 - uniform();  // (0, 1]
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) {
        if (n == 0) throw ValidationError("RngStream::below: n must be positive");
        unsigned __int128 m = static_cast<unsigned __int128>(next_u64()) * n;
        auto low = static_cast<std::uint64_t>(m);
        if (low < n) {
            const std::uint64_t threshold = (0 - n) % n;
            while (low < threshold) {
                m = static_cast<unsigned __int128>(next_u64()) * n;
                low = static_cast<std::uint64_t>(m);
            }
        }
        return static_cast<std::uint64_t>(m >> 64);
    }

    /// Fisher-Yates shuffle of 0..n-1.
    std::vector<std::size_t> permutation(std::size_t n) {
        std::vector<std::size_t> p(n);
        std::iota(p.begin(), p.end(), std::size_t{0});
        for (std::size_t i = n; i > 1; --i) {
            const auto j = static_cast<std::size_t>(below(i));
            std::swap(p[i - 1], p[j]);
        }
        return p;
    }

private:
    static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    std::uint64_t seed_;
    std::uint64_t counter_ = 0;
    std::uint64_t s_[4];
};

inline RngStream seeded_stream(std::uint64_t seed) { return RngStream(seed); }

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamHyper {
    double learning_rate = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

/// Moment buffers for one parameter tensor.
class AdamState {
public:
    AdamState(std::size_t rows, std::size_t cols, AdamHyper hyper = {})
        : hyper_(hyper), m_(rows, cols), v_(rows, cols) {
        if (!(hyper.learning_rate >= 0.0) || !std::isfinite(hyper.learning_rate))
            throw ValidationError("AdamState: learning rate must be finite and >= 0");
    }
    explicit AdamState(const Matrix& like, AdamHyper hyper = {}) : AdamState(like.rows(), like.cols(), hyper) {}

    const AdamHyper& hyper() const noexcept { return hyper_; }
    std::uint64_t step() const noexcept { return step_; }
    const Matrix& first_moment() const noexcept { return m_; }
    const Matrix& second_moment() const noexcept { return v_; }

    friend void adam_step(AdamState& state, Matrix& params, const Matrix& grads);

private:
    AdamHyper hyper_;
    Matrix m_;
    Matrix v_;
    std::uint64_t step_ = 0;
};

/// One bias-corrected Adam update of `params` in place.
inline void adam_step(AdamState& state, Matrix& params, const Matrix& grads) {
    if (!params.same_shape(grads) || !params.same_shape(state.m_))
        throw ValidationError("adam_step: shape mismatch (params " + std::to_string(params.rows()) + "x" +
                              std::to_string(params.cols()) + ", grads " + std::to_string(grads.rows()) + "x" +
                              std::to_string(grads.cols()) + ")");
    grads.require_finite("adam_step gradient");

    const auto& h = state.hyper_;
    ++state.step_;
    const double t = static_cast<double>(state.step_);
    const double c1 = 1.0 - std::pow(h.beta1, t);
    const double c2 = 1.0 - std::pow(h.beta2, t);

    auto p = params.values();
    auto g = grads.values();
    auto m = state.m_.values();
    auto v = state.v_.values();
    for (std::size_t i = 0; i < p.size(); ++i) {
        m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g[i];
        v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g[i] * g[i];
        const double mhat = m[i] / c1;
        const double vhat = v[i] / c2;
        p[i] -= h.learning_rate * mhat / (std::sqrt(vhat) + h.epsilon);
    }
}

// ---------------------------------------------------------------------------
// Gradient verification
// ---------------------------------------------------------------------------

using LossFn = std::function<double(const Matrix&)>;

/// Central-difference check. Returns max over coordinates of
/// |fd - an| / max(1e-12, |fd| + |an|).
inline double check_gradient(const LossFn& loss_fn, const Matrix& params, const Matrix& analytic_grad,
                             double h = 1e-5) {
    if (!(h > 0.0)) throw ValidationError("check_gradient: h must be > 0");
    if (!params.same_shape(analytic_grad)) throw ValidationError("check_gradient: shape mismatch");

    Matrix probe = params;
    double worst = 0.0;
    auto pv = probe.values();
    auto an = analytic_grad.values();
    for (std::size_t i = 0; i < pv.size(); ++i) {
        const double orig = pv[i];
        pv[i] = orig + h;
        const double up = loss_fn(probe);
        pv[i] = orig - h;
        const double down = loss_fn(probe);
        pv[i] = orig;
        if (!std::isfinite(up) || !std::isfinite(down))
            throw ValidationError("check_gradient: non-finite loss while probing index " + std::to_string(i));
        const double fd = (up - down) / (2.0 * h);
        const double rel = std::abs(fd - an[i]) / std::max(1e-12, std::abs(fd) + std::abs(an[i]));
        worst = std::max(worst, rel);
    }
    return worst;
}

} // namespace monolex
