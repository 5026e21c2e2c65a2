#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "mgec/errors.hpp"

namespace mgec {

// Dense row-major matrix of 64-bit floats. All layer weights, projections and
// prototype tables live in this type.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

    double& at(std::size_t i, std::size_t j) { return data[i * cols + j]; }
    double at(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

    std::span<double> row(std::size_t i) { return {data.data() + i * cols, cols}; }
    std::span<const double> row(std::size_t i) const { return {data.data() + i * cols, cols}; }

    std::size_t size() const { return data.size(); }

    void fill(double v) { std::fill(data.begin(), data.end(), v); }

    bool all_finite() const {
        for (double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }
};

// Dot product with four accumulators; same result on every run, decent ILP
// without -ffast-math.
inline double dot(std::span<const double> a, std::span<const double> b) {
    const std::size_t n = a.size();
    double s0 = 0, s1 = 0, s2 = 0, s3 = 0;
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
    }
    for (; i < n; ++i) s0 += a[i] * b[i];
    return (s0 + s1) + (s2 + s3);
}

inline double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

inline void axpy(double alpha, std::span<const double> x, std::span<double> y) {
    for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

// y = W x + b, W is (out x in) row-major.
inline void matvec(const Matrix& w, std::span<const double> x, std::span<const double> b,
                   std::span<double> y) {
    for (std::size_t j = 0; j < w.rows; ++j) y[j] = dot(w.row(j), x) + b[j];
}

// y += W^T g; the backward companion of matvec.
inline void matvec_t_add(const Matrix& w, std::span<const double> g, std::span<double> y) {
    for (std::size_t j = 0; j < w.rows; ++j) axpy(g[j], w.row(j), y);
}

// G += u v^T.
inline void add_outer(Matrix& g, std::span<const double> u, std::span<const double> v) {
    for (std::size_t j = 0; j < g.rows; ++j) axpy(u[j], v, g.row(j));
}

inline double cosine_similarity(std::span<const double> a, std::span<const double> b) {
    return dot(a, b) / (norm(a) * norm(b));
}

// Max-subtracted softmax; entries in (0,1], sum 1 within 1e-12.
inline std::vector<double> softmax(std::span<const double> logits) {
    if (logits.empty()) throw ConfigError("softmax: empty logit vector");
    const double m = *std::max_element(logits.begin(), logits.end());
    std::vector<double> p(logits.size());
    double z = 0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        p[i] = std::exp(logits[i] - m);
        z += p[i];
    }
    for (double& v : p) v /= z;
    return p;
}

// log(sum(exp(logits))) with max subtraction.
inline double log_sum_exp(std::span<const double> logits) {
    const double m = *std::max_element(logits.begin(), logits.end());
    double z = 0;
    for (double v : logits) z += std::exp(v - m);
    return m + std::log(z);
}

inline std::size_t argmax(std::span<const double> v) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < v.size(); ++i)
        if (v[i] > v[best]) best = i; // ties keep the lowest index
    return best;
}

} // namespace mgec
