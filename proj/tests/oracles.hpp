// SPDX-License-Identifier: Apache-2.0
//
// Independent reference evaluators shared by the unit tests and the
// acceptance binary.
#pragma once

#include <cmath>

#include "monolex/sae.hpp"

namespace oracle {

using namespace monolex;

// Straight transcription of the objective with explicit full-size
// intermediates: Z (n x d), A = Z W^T + b (n x h), S = max(A, 0),
// Y = S W + b_dec, Xhat = sigma * Y + mu.
inline LossBreakdown naive_loss(const SaeModel& m, const Matrix& X, double lambda) {
    const std::size_t n = X.rows(), d = m.d, h = m.h;
    std::vector<std::vector<double>> Z(n, std::vector<double>(d)), S(n, std::vector<double>(h)),
        Xh(n, std::vector<double>(d));
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t j = 0; j < d; ++j) Z[r][j] = (X(r, j) - m.mu[j]) / m.sigma[j];
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t i = 0; i < h; ++i) {
            double a = m.b_enc(0, i);
            for (std::size_t j = 0; j < d; ++j) a += m.W(i, j) * Z[r][j];
            S[r][i] = std::max(a, 0.0);
        }
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t j = 0; j < d; ++j) {
            double y = m.b_dec(0, j);
            for (std::size_t i = 0; i < h; ++i) y += S[r][i] * m.W(i, j);
            Xh[r][j] = m.sigma[j] * y + m.mu[j];
        }
    double rec = 0, sp = 0;
    for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t j = 0; j < d; ++j) rec += (X(r, j) - Xh[r][j]) * (X(r, j) - Xh[r][j]);
        for (std::size_t i = 0; i < h; ++i) sp += std::abs(S[r][i]);
    }
    LossBreakdown out;
    out.reconstruction = rec / double(n);
    out.sparsity = sp / double(n);
    out.lambda = lambda;
    out.total = out.reconstruction + lambda * out.sparsity;
    return out;
}

inline SaeModel random_model(std::size_t d, std::size_t h, std::uint64_t seed) {
    SaeModel m = init_model(d, 1, seed);
    m.h = h;
    RngStream r(seed + 1000);
    m.W = Matrix(h, d);
    for (double& v : m.W.values()) v = r.normal();
    normalize_rows(m.W);
    m.b_enc = Matrix(1, h);
    for (double& v : m.b_enc.values()) v = 0.3 * r.normal();
    m.b_dec = Matrix(1, d);
    for (double& v : m.b_dec.values()) v = 0.3 * r.normal();
    for (std::size_t j = 0; j < d; ++j) {
        m.mu[j] = 0.5 * r.normal();
        m.sigma[j] = 0.5 + r.uniform();
    }
    return m;
}

inline Matrix random_batch(std::size_t n, std::size_t d, std::uint64_t seed) {
    RngStream r(seed);
    Matrix X(n, d);
    for (double& v : X.values()) v = r.normal();
    return X;
}

// Student t density integrated with composite Simpson on [0, |t|].
inline double t_two_tailed_by_integration(double t, double df) {
    const double c = std::exp(std::lgamma((df + 1) / 2) - std::lgamma(df / 2)) / std::sqrt(df * M_PI);
    auto f = [&](double x) { return c * std::pow(1 + x * x / df, -(df + 1) / 2); };
    const double a = std::abs(t);
    const int n = 20000;
    const double h = a / n;
    double s = f(0) + f(a);
    for (int i = 1; i < n; ++i) s += (i % 2 ? 4 : 2) * f(i * h);
    return 1.0 - 2.0 * s * h / 3.0;
}

} // namespace oracle
