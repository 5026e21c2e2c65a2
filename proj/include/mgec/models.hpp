#pragma once

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mgec/matrix.hpp"
#include "mgec/mlp.hpp"
#include "mgec/rng.hpp"

namespace mgec {

// Shared expert: one extractor, one classifier head over pooled domains.
struct SharedModel {
    MlpParams extractor;
    MlpParams head;

    std::size_t feature_dim() const { return extractor.output_width(); }
    std::size_t class_count() const { return head.output_width(); }

    void validate() const {
        extractor.validate();
        head.validate();
        if (extractor.output_width() != head.input_width())
            throw ConfigError("shared model: extractor output does not match head input");
    }
};

// Prototype router: features are projected to the gate space and matched
// against one prototype per expert by cosine similarity.
struct RouterState {
    Matrix projection;  // d_r x d
    Matrix prototypes;  // M x d_r, row j is prototype d_j
    std::size_t top_k = 1;

    std::size_t expert_count() const { return prototypes.rows; }
    std::size_t gate_dim() const { return prototypes.cols; }

    std::vector<std::size_t> degenerate_prototypes() const {
        std::vector<std::size_t> out;
        for (std::size_t j = 0; j < prototypes.rows; ++j)
            if (norm(prototypes.row(j)) <= 1e-8) out.push_back(j);
        return out;
    }

    void validate() const {
        if (top_k < 1 || top_k > expert_count())
            throw ConfigError("router: top_k must be in [1, expert_count]");
        if (projection.rows != gate_dim())
            throw ConfigError("router: projection rows must equal gate dimension");
    }
};

struct RoutedModel {
    MlpParams extractor;
    RouterState router;
    std::vector<MlpParams> experts;  // each feature_dim -> C

    std::size_t feature_dim() const { return extractor.output_width(); }
    std::size_t class_count() const { return experts.front().output_width(); }

    void validate() const {
        extractor.validate();
        router.validate();
        if (experts.size() != router.expert_count())
            throw ConfigError("routed model: expert count does not match prototype count");
        for (const auto& e : experts) {
            e.validate();
            if (e.input_width() != extractor.output_width())
                throw ConfigError("routed model: expert input does not match extractor output");
        }
        if (projection_width() != extractor.output_width())
            throw ConfigError("routed model: router projection does not match feature width");
    }

    std::size_t projection_width() const { return router.projection.cols; }
};

struct ModelPair {
    std::optional<SharedModel> shared;
    std::optional<RoutedModel> routed;
};

// Sparse routing weights: exactly K nonzero entries summing to 1.
struct RoutingResult {
    std::vector<double> weights;        // length M
    std::vector<std::size_t> selected;  // ascending expert indices, |selected| == K
    std::vector<double> similarity;     // length M
    std::vector<double> projected;      // W z, cached for the backward pass
    bool zero_projection = false;       // ||Wz|| fell below 1e-12
};

// Cosine routing against learned prototypes; top-K selection with ties broken
// by the lower expert index; softmax over the selected similarities.
inline RoutingResult route(const RouterState& r, std::span<const double> z) {
    const std::size_t m = r.expert_count();
    const std::size_t k = r.top_k;
    RoutingResult out;
    out.similarity.assign(m, 0.0);
    out.weights.assign(m, 0.0);
    out.projected.assign(r.gate_dim(), 0.0);

    for (std::size_t i = 0; i < r.projection.rows; ++i)
        out.projected[i] = dot(r.projection.row(i), z);
    const double un = norm(out.projected);

    if (un > 1e-12) {
        for (std::size_t j = 0; j < m; ++j) {
            const double pn = norm(r.prototypes.row(j));
            out.similarity[j] = pn > 1e-8 ? dot(r.prototypes.row(j), out.projected) / (pn * un) : 0.0;
        }
    } else {
        out.zero_projection = true;  // similarities stay zero, selection falls back to index order
    }

    std::vector<std::size_t> order(m);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return out.similarity[a] > out.similarity[b];
    });
    out.selected.assign(order.begin(), order.begin() + k);
    std::sort(out.selected.begin(), out.selected.end());

    std::vector<double> sel_sims(k);
    for (std::size_t i = 0; i < k; ++i) sel_sims[i] = out.similarity[out.selected[i]];
    const auto p = softmax(sel_sims);
    for (std::size_t i = 0; i < k; ++i) out.weights[out.selected[i]] = p[i];
    return out;
}

struct SharedForward {
    std::vector<double> logits;
    std::vector<double> z;
};

inline SharedForward shared_forward(const SharedModel& model, std::span<const double> x) {
    SharedForward out;
    out.z = mlp_forward(model.extractor, x);
    out.logits = mlp_forward(model.head, out.z);
    return out;
}

struct RoutedForward {
    std::vector<double> logits;
    RoutingResult routing;
    std::vector<double> z;
};

// o = sum over selected experts of r_j * R_j(z).
inline RoutedForward routed_forward(const RoutedModel& model, std::span<const double> x) {
    RoutedForward out;
    out.z = mlp_forward(model.extractor, x);
    out.routing = route(model.router, out.z);
    out.logits.assign(model.class_count(), 0.0);
    for (std::size_t j : out.routing.selected) {
        const auto ej = mlp_forward(model.experts[j], out.z);
        axpy(out.routing.weights[j], ej, out.logits);
    }
    return out;
}

struct FusedPrediction {
    int label = 0;
    std::vector<double> probabilities;
};

// Arithmetic mean of the two softmax distributions; argmax ties resolve to
// the lowest class index.
inline FusedPrediction fuse_predictions(std::span<const double> shared_logits,
                                        std::span<const double> routed_logits) {
    if (shared_logits.size() != routed_logits.size())
        throw ConfigError("fuse_predictions: logit widths differ");
    const auto ps = softmax(shared_logits);
    const auto pr = softmax(routed_logits);
    FusedPrediction out;
    out.probabilities.resize(ps.size());
    for (std::size_t i = 0; i < ps.size(); ++i) out.probabilities[i] = 0.5 * (ps[i] + pr[i]);
    out.label = static_cast<int>(argmax(out.probabilities));
    return out;
}

inline Matrix shared_logits_batch(const SharedModel& m, const Matrix& x) {
    MlpCache c1, c2;
    Matrix z = mlp_forward_batch(m.extractor, x, c1);
    return mlp_forward_batch(m.head, z, c2);
}

// Batched routed inference; optionally surfaces the N x M routing weights.
inline Matrix routed_logits_batch(const RoutedModel& m, const Matrix& x,
                                  Matrix* routing_out = nullptr) {
    MlpCache c1;
    Matrix z = mlp_forward_batch(m.extractor, x, c1);
    Matrix logits(x.rows, m.class_count());
    if (routing_out) *routing_out = Matrix(x.rows, m.router.expert_count());
    MlpCache scratch;
    for (std::size_t i = 0; i < x.rows; ++i) {
        const RoutingResult rr = route(m.router, z.row(i));
        for (std::size_t j : rr.selected) {
            const auto ej = mlp_forward(m.experts[j], z.row(i), &scratch);
            axpy(rr.weights[j], ej, logits.row(i));
        }
        if (routing_out)
            std::copy(rr.weights.begin(), rr.weights.end(), routing_out->row(i).begin());
    }
    return logits;
}

// Default backbone: input -> hidden widths with ReLU, linear feature output;
// heads are single linear layers.
inline SharedModel make_shared_model(std::size_t input_dim, std::span<const std::size_t> hidden,
                                     int class_count, Rng& rng) {
    std::vector<std::size_t> widths;
    widths.push_back(input_dim);
    widths.insert(widths.end(), hidden.begin(), hidden.end());
    SharedModel m;
    m.extractor = make_mlp(widths, rng);
    const std::size_t head_widths[] = {widths.back(), static_cast<std::size_t>(class_count)};
    m.head = make_mlp(head_widths, rng);
    return m;
}

inline RouterState make_router(std::size_t feature_dim, std::size_t gate_dim, std::size_t experts,
                               std::size_t top_k, Rng& rng) {
    RouterState r;
    r.top_k = top_k;
    r.projection = Matrix(gate_dim, feature_dim);
    const double scale = 1.0 / std::sqrt(double(feature_dim));
    for (double& v : r.projection.data) v = rng.normal(0.0, scale);
    r.prototypes = Matrix(experts, gate_dim);
    for (std::size_t j = 0; j < experts; ++j) {
        auto row = r.prototypes.row(j);
        for (double& v : row) v = rng.normal();
        const double n = norm(row);
        for (double& v : row) v /= n;  // unit-normalized prototype init
    }
    return r;
}

inline RoutedModel make_routed_model(std::size_t input_dim, std::span<const std::size_t> hidden,
                                     int class_count, std::size_t experts, std::size_t top_k,
                                     std::size_t gate_dim, Rng& rng) {
    std::vector<std::size_t> widths;
    widths.push_back(input_dim);
    widths.insert(widths.end(), hidden.begin(), hidden.end());
    RoutedModel m;
    m.extractor = make_mlp(widths, rng);
    m.router = make_router(widths.back(), gate_dim, experts, top_k, rng);
    const std::size_t head_widths[] = {widths.back(), static_cast<std::size_t>(class_count)};
    for (std::size_t j = 0; j < experts; ++j) m.experts.push_back(make_mlp(head_widths, rng));
    return m;
}

} // namespace mgec
