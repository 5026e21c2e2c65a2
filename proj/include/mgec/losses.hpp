#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "mgec/errors.hpp"
#include "mgec/matrix.hpp"
#include "mgec/models.hpp"

namespace mgec {

enum class LossMode { warmup, mutual };

// Loss breakdown for one batch. total is the unweighted sum of the active
// components; per_sample holds the plain cross-entropy of each sample, which
// is what the partner model consumes as guidance.
struct BatchLossReport {
    double total = 0.0;
    std::map<std::string, double> components;
    std::vector<double> per_sample;
    bool jel_all_skipped = false;

    double component_sum() const {
        double s = 0;
        for (const auto& [_, v] : components) s += v;
        return s;
    }
};

struct CeResult {
    double mean = 0.0;
    std::vector<double> per_sample;
};

// Mean cross-entropy over the batch, stabilized via log-sum-exp. Also returns
// the per-sample losses needed by the mutual-guided weighting.
inline CeResult ce_loss(const Matrix& logits, std::span<const int> labels) {
    if (logits.rows == 0) throw ConfigError("ce_loss: empty batch");
    if (logits.rows != labels.size()) throw ConfigError("ce_loss: batch/label size mismatch");
    CeResult r;
    r.per_sample.resize(logits.rows);
    for (std::size_t i = 0; i < logits.rows; ++i) {
        const auto row = logits.row(i);
        const int y = labels[i];
        if (y < 0 || static_cast<std::size_t>(y) >= logits.cols)
            throw ConfigError("ce_loss: label out of range");
        r.per_sample[i] = log_sum_exp(row) - row[static_cast<std::size_t>(y)];
        r.mean += r.per_sample[i];
    }
    r.mean /= double(logits.rows);
    return r;
}

// Joint embedding loss: mean cosine distance between paired representations.
// Pairs where either side has (near) zero norm are skipped and the mean is
// taken over the rest; if everything is skipped the loss is 0 with a flag.
inline double jel_loss(const Matrix& z_neighbor, const Matrix& z_current,
                       bool* all_skipped = nullptr) {
    if (z_neighbor.rows != z_current.rows || z_neighbor.cols != z_current.cols)
        throw ConfigError("jel_loss: embedding shape mismatch");
    double sum = 0;
    std::size_t used = 0;
    for (std::size_t i = 0; i < z_neighbor.rows; ++i) {
        const double na = norm(z_neighbor.row(i));
        const double nb = norm(z_current.row(i));
        if (na <= 1e-12 || nb <= 1e-12) continue;
        sum += 1.0 - dot(z_neighbor.row(i), z_current.row(i)) / (na * nb);
        ++used;
    }
    if (all_skipped) *all_skipped = (used == 0 && z_neighbor.rows > 0);
    return used > 0 ? sum / double(used) : 0.0;
}

// Specialization loss: entropy of each subject's batch-average routing
// distribution, averaged over the subjects present in the batch. 0*log 0 := 0.
inline double sl_loss(const Matrix& routing, std::span<const int> domain_ids) {
    if (routing.rows != domain_ids.size()) throw ConfigError("sl_loss: batch size mismatch");
    if (routing.rows == 0) throw ConfigError("sl_loss: empty batch");
    std::map<int, std::pair<std::vector<double>, std::size_t>> per_subject;
    for (std::size_t i = 0; i < routing.rows; ++i) {
        auto& [acc, count] = per_subject[domain_ids[i]];
        if (acc.empty()) acc.assign(routing.cols, 0.0);
        axpy(1.0, routing.row(i), acc);
        ++count;
    }
    double total = 0;
    for (auto& [_, entry] : per_subject) {
        auto& [acc, count] = entry;
        double h = 0;
        for (double v : acc) {
            const double r = v / double(count);
            if (r > 0) h -= r * std::log(r);
        }
        total += h;
    }
    return total / double(per_subject.size());
}

// Balance loss M * sum_j f_j * rbar_j, where f_j is the fraction of samples
// that selected expert j and rbar_j its mean routing weight over the batch.
// Divisions are delayed so the collapse (= M) and balanced (= 1) endpoints
// come out exact.
inline double bl_loss(const Matrix& routing, std::size_t expert_count) {
    if (routing.rows == 0) throw ConfigError("bl_loss: empty batch");
    if (routing.cols != expert_count) throw ConfigError("bl_loss: expert count mismatch");
    const double n = double(routing.rows);
    double out = 0;
    for (std::size_t j = 0; j < expert_count; ++j) {
        double count = 0, wsum = 0;
        for (std::size_t i = 0; i < routing.rows; ++i) {
            const double r = routing.at(i, j);
            if (r > 0) count += 1.0;
            wsum += r;
        }
        out += count * wsum;
    }
    return double(expert_count) * out / (n * n);
}

constexpr double kMutualGapClamp = 30.0;

inline double mutual_weight(double own, double guide) {
    const double gap = std::clamp(own - guide, -kMutualGapClamp, kMutualGapClamp);
    return 1.0 + std::exp(gap);
}

// Guided reweighting: mean over the batch of (1 + exp(own - guide)) * own,
// with the guide losses treated as constants.
inline double mutual_weighted_loss(std::span<const double> own, std::span<const double> guide) {
    if (own.size() != guide.size()) throw ConfigError("mutual_weighted_loss: length mismatch");
    if (own.empty()) throw ConfigError("mutual_weighted_loss: empty batch");
    double s = 0;
    for (std::size_t i = 0; i < own.size(); ++i) s += mutual_weight(own[i], guide[i]) * own[i];
    return s / double(own.size());
}

} // namespace mgec
