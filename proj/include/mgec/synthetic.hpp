#pragma once

#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mgec/data.hpp"
#include "mgec/errors.hpp"
#include "mgec/matrix.hpp"
#include "mgec/rng.hpp"

namespace mgec {

// Hierarchical Gaussian benchmark: group centers, per-domain centers
// perturbed from their group, and linear per-domain teachers mixing a shared
// weight matrix with hierarchically perturbed ones. lambda is the weight on
// the domain-independent component.
struct SyntheticSpec {
    std::size_t group_count = 2;
    std::vector<std::size_t> domains_per_group = {3, 2};
    std::size_t samples_per_domain = 500;
    std::size_t dim = 128;
    int class_count = 2;
    double lambda = 0.5;
    double sigma_group = 1.0;
    double sigma_domain = 0.5;
    double sigma_sample = 1.0;
    double sigma_w_base = 1.0;
    double sigma_w_group = 0.5;
    double sigma_w_domain = 0.25;
    std::uint64_t seed = 0;

    std::size_t domain_count() const {
        return std::accumulate(domains_per_group.begin(), domains_per_group.end(), std::size_t{0});
    }

    void validate() const {
        if (group_count < 1) throw ConfigError("synthetic: group_count must be >= 1");
        if (domains_per_group.size() != group_count)
            throw ConfigError("synthetic: domains_per_group must list one entry per group");
        if (domain_count() < 2) throw ConfigError("synthetic: need at least 2 domains");
        if (samples_per_domain < 1) throw ConfigError("synthetic: samples_per_domain must be >= 1");
        if (dim < 1) throw ConfigError("synthetic: dim must be >= 1");
        if (class_count < 2) throw ConfigError("synthetic: class_count must be >= 2");
        if (lambda < 0.0 || lambda > 1.0) throw ConfigError("synthetic: lambda must be in [0, 1]");
        for (double s : {sigma_group, sigma_domain, sigma_sample, sigma_w_base, sigma_w_group,
                         sigma_w_domain})
            if (s <= 0.0) throw ConfigError("synthetic: all sigma values must be > 0");
    }
};

// Everything needed to re-evaluate the target function: the shared weight
// matrix, the per-domain ones, and the mixing weight. Kept next to generated
// datasets for alignment-error diagnostics.
struct TeacherRecord {
    double lambda = 0.0;
    int class_count = 0;
    std::size_t dim = 0;
    Matrix w_inv;                  // C x d
    std::vector<Matrix> w_domain;  // per domain, C x d
    std::vector<int> domain_group;
    std::uint64_t seed_requested = 0;
    std::uint64_t seed_used = 0;
    int balance_retries = 0;
    std::vector<double> class_fractions;

    // lambda * W_inv x + (1 - lambda) * W_{g,m} x
    std::vector<double> logits(int domain_id, std::span<const double> x) const {
        const Matrix& wd = w_domain.at(static_cast<std::size_t>(domain_id));
        std::vector<double> out(static_cast<std::size_t>(class_count));
        for (std::size_t c = 0; c < out.size(); ++c)
            out[c] = lambda * dot(w_inv.row(c), x) + (1.0 - lambda) * dot(wd.row(c), x);
        return out;
    }

    std::vector<double> invariant_logits(std::span<const double> x) const {
        std::vector<double> out(static_cast<std::size_t>(class_count));
        for (std::size_t c = 0; c < out.size(); ++c) out[c] = dot(w_inv.row(c), x);
        return out;
    }
};

namespace detail {

inline Matrix gaussian_matrix(std::size_t rows, std::size_t cols, double stddev, Rng& rng) {
    Matrix m(rows, cols);
    for (double& v : m.data) v = rng.normal(0.0, stddev);
    return m;
}

inline bool class_balance_ok(std::span<const double> fractions) {
    const double c = double(fractions.size());
    const double lo = 0.5 / c;
    const double hi = 1.0 - 0.5 * (c - 1.0) / c;
    for (double f : fractions)
        if (f < lo || f > hi) return false;
    return true;
}

inline std::pair<Dataset, TeacherRecord> generate_once(const SyntheticSpec& spec,
                                                       std::uint64_t seed) {
    Rng rng(seed);
    const std::size_t d = spec.dim;
    const std::size_t c = static_cast<std::size_t>(spec.class_count);
    const double w_scale = 1.0 / std::sqrt(double(d));

    // Draw order is fixed: group centers, domain centers, W_inv, group
    // deltas, domain deltas, then samples domain by domain.
    std::vector<std::vector<double>> group_centers;
    for (std::size_t g = 0; g < spec.group_count; ++g) {
        std::vector<double> cg(d);
        for (double& v : cg) v = rng.normal(0.0, spec.sigma_group);
        group_centers.push_back(std::move(cg));
    }

    std::vector<std::vector<double>> domain_centers;
    std::vector<int> domain_group;
    for (std::size_t g = 0; g < spec.group_count; ++g) {
        for (std::size_t m = 0; m < spec.domains_per_group[g]; ++m) {
            std::vector<double> cd = group_centers[g];
            for (double& v : cd) v += rng.normal(0.0, spec.sigma_domain);
            domain_centers.push_back(std::move(cd));
            domain_group.push_back(static_cast<int>(g));
        }
    }

    TeacherRecord teacher;
    teacher.lambda = spec.lambda;
    teacher.class_count = spec.class_count;
    teacher.dim = d;
    teacher.domain_group = domain_group;
    teacher.seed_requested = spec.seed;
    teacher.seed_used = seed;
    teacher.w_inv = gaussian_matrix(c, d, spec.sigma_w_base * w_scale, rng);

    std::vector<Matrix> group_delta;
    for (std::size_t g = 0; g < spec.group_count; ++g)
        group_delta.push_back(gaussian_matrix(c, d, spec.sigma_w_group * w_scale, rng));

    const std::size_t domains = spec.domain_count();
    for (std::size_t m = 0; m < domains; ++m) {
        Matrix wd = teacher.w_inv;
        const Matrix& dg = group_delta[static_cast<std::size_t>(domain_group[m])];
        Matrix dm = gaussian_matrix(c, d, spec.sigma_w_domain * w_scale, rng);
        for (std::size_t i = 0; i < wd.size(); ++i) wd.data[i] += dg.data[i] + dm.data[i];
        teacher.w_domain.push_back(std::move(wd));
    }

    Dataset ds;
    ds.class_count = spec.class_count;
    std::vector<std::size_t> class_counts(c, 0);
    for (std::size_t m = 0; m < domains; ++m) {
        for (std::size_t i = 0; i < spec.samples_per_domain; ++i) {
            Sample s;
            s.domain_id = static_cast<int>(m);
            s.t_index = -1;
            s.features = domain_centers[m];
            for (double& v : s.features) v += rng.normal(0.0, spec.sigma_sample);
            const auto logits = teacher.logits(s.domain_id, s.features);
            s.label = static_cast<int>(argmax(logits));
            ++class_counts[static_cast<std::size_t>(s.label)];
            ds.samples.push_back(std::move(s));
        }
    }

    teacher.class_fractions.resize(c);
    const double total = double(ds.samples.size());
    for (std::size_t k = 0; k < c; ++k) teacher.class_fractions[k] = double(class_counts[k]) / total;

    ds.rebuild_index();
    return {std::move(ds), std::move(teacher)};
}

} // namespace detail

// Deterministic for a given spec. If the label draw is too imbalanced the
// generator retries with the next seed and records how many times that
// happened.
inline std::pair<Dataset, TeacherRecord> generate_synthetic(const SyntheticSpec& spec) {
    spec.validate();
    constexpr int max_retries = 16;
    for (int attempt = 0; attempt <= max_retries; ++attempt) {
        auto [ds, teacher] = detail::generate_once(spec, spec.seed + std::uint64_t(attempt));
        teacher.balance_retries = attempt;
        if (detail::class_balance_ok(teacher.class_fractions)) return {std::move(ds), std::move(teacher)};
    }
    throw ConfigError("synthetic: class balance guard failed for " + std::to_string(max_retries) +
                      " consecutive seeds; adjust sigma values");
}

} // namespace mgec
