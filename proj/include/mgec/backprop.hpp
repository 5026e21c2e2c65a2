#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "mgec/adam.hpp"
#include "mgec/losses.hpp"
#include "mgec/models.hpp"

namespace mgec {

struct SharedGrads {
    MlpGrads extractor;
    MlpGrads head;

    void zero() {
        extractor.zero();
        head.zero();
    }
};

inline SharedGrads make_grads(const SharedModel& m) {
    return {make_grads(m.extractor), make_grads(m.head)};
}

struct RoutedGrads {
    MlpGrads extractor;
    Matrix g_projection;
    Matrix g_prototypes;
    std::vector<MlpGrads> experts;

    void zero() {
        extractor.zero();
        g_projection.fill(0.0);
        g_prototypes.fill(0.0);
        for (auto& e : experts) e.zero();
    }
};

inline RoutedGrads make_grads(const RoutedModel& m) {
    RoutedGrads g;
    g.extractor = make_grads(m.extractor);
    g.g_projection = Matrix(m.router.projection.rows, m.router.projection.cols);
    g.g_prototypes = Matrix(m.router.prototypes.rows, m.router.prototypes.cols);
    for (const auto& e : m.experts) g.experts.push_back(make_grads(e));
    return g;
}

inline TensorRefs collect_params(SharedModel& m) {
    TensorRefs out;
    collect_mlp(m.extractor, out);
    collect_mlp(m.head, out);
    return out;
}

inline TensorRefs collect_grads(SharedGrads& g) {
    TensorRefs out;
    collect_mlp_grads(g.extractor, out);
    collect_mlp_grads(g.head, out);
    return out;
}

// Prototypes are excluded from weight decay so the routing codebook is not
// shrunk toward zero, where cosine similarity degenerates.
inline TensorRefs collect_params(RoutedModel& m) {
    TensorRefs out;
    collect_mlp(m.extractor, out);
    out.push_back({m.router.projection.data.data(), m.router.projection.data.size(), true});
    out.push_back({m.router.prototypes.data.data(), m.router.prototypes.data.size(), false});
    for (auto& e : m.experts) collect_mlp(e, out);
    return out;
}

inline TensorRefs collect_grads(RoutedGrads& g) {
    TensorRefs out;
    collect_mlp_grads(g.extractor, out);
    out.push_back({g.g_projection.data.data(), g.g_projection.data.size(), true});
    out.push_back({g.g_prototypes.data.data(), g.g_prototypes.data.size(), false});
    for (auto& e : g.experts) collect_mlp_grads(e, out);
    return out;
}

inline std::vector<double> pack(const TensorRefs& refs) {
    std::vector<double> out;
    for (const auto& t : refs) out.insert(out.end(), t.data, t.data + t.n);
    return out;
}

inline void unpack(std::span<const double> flat, const TensorRefs& refs) {
    std::size_t off = 0;
    for (const auto& t : refs) {
        std::copy(flat.begin() + long(off), flat.begin() + long(off + t.n), t.data);
        off += t.n;
    }
}

namespace detail {

// d/dlogits of the per-sample CE, times the scale the loss mode assigns to
// that sample. Writes the batch gradient into dlogits.
inline void ce_logit_grad(const Matrix& logits, std::span<const int> labels,
                          std::span<const double> scale, Matrix& dlogits) {
    dlogits = Matrix(logits.rows, logits.cols);
    for (std::size_t i = 0; i < logits.rows; ++i) {
        const auto p = softmax(logits.row(i));
        auto out = dlogits.row(i);
        for (std::size_t c = 0; c < logits.cols; ++c) out[c] = scale[i] * p[c];
        out[static_cast<std::size_t>(labels[i])] -= scale[i];
    }
}

// Per-sample multipliers for the plain mean CE or the mutual-guided weighted
// CE. For the mutual mode the guide losses are constants, so the derivative
// of (1 + exp(l - g)) * l in l is (1 + exp(gap)) + l * exp(gap), with the exp
// term dropped when the gap is clamped.
inline std::vector<double> loss_scales(const std::vector<double>& per_sample,
                                       const std::vector<double>* guide, LossMode mode) {
    const std::size_t n = per_sample.size();
    std::vector<double> scale(n, 1.0 / double(n));
    if (mode == LossMode::mutual) {
        for (std::size_t i = 0; i < n; ++i) {
            const double raw = per_sample[i] - (*guide)[i];
            const double gap = std::clamp(raw, -kMutualGapClamp, kMutualGapClamp);
            const double e = std::exp(gap);
            double d = 1.0 + e;
            if (raw > -kMutualGapClamp && raw < kMutualGapClamp) d += per_sample[i] * e;
            scale[i] = d / double(n);
        }
    }
    return scale;
}

} // namespace detail

// Forward + analytic backward for the shared-expert objective. Warm-up mode
// optimizes ERM + JEL, mutual mode swaps ERM for the routed-guided weighted
// CE. Gradients accumulate into `grads` (zeroed here). `x_masked` holds the
// masked JEL partners, row-aligned with `x`; pass use_jel = false to check
// the bare CE path.
inline BatchLossReport shared_backward(const SharedModel& model, const Matrix& x,
                                       const Matrix& x_masked, std::span<const int> labels,
                                       const std::vector<double>* guide, LossMode mode,
                                       SharedGrads& grads, bool use_jel = true) {
    if (mode == LossMode::mutual && (!guide || guide->size() != x.rows))
        throw ConfigError("shared_backward: mutual mode needs guide losses for the batch");
    grads.zero();

    MlpCache cache_x, cache_head;
    Matrix z = mlp_forward_batch(model.extractor, x, cache_x);
    Matrix logits = mlp_forward_batch(model.head, z, cache_head);
    CeResult ce = ce_loss(logits, labels);

    BatchLossReport report;
    report.per_sample = ce.per_sample;
    if (mode == LossMode::warmup) {
        report.components["erm"] = ce.mean;
    } else {
        report.components["s_from_r"] = mutual_weighted_loss(ce.per_sample, *guide);
    }

    Matrix dlogits;
    detail::ce_logit_grad(logits, labels, detail::loss_scales(ce.per_sample, guide, mode), dlogits);
    Matrix dz = mlp_backward_batch(model.head, cache_head, dlogits, grads.head);

    MlpCache cache_masked;
    Matrix dz_masked;
    if (use_jel) {
        if (x_masked.rows != x.rows)
            throw ConfigError("shared_backward: masked pair batch must align with the input batch");
        Matrix z_masked = mlp_forward_batch(model.extractor, x_masked, cache_masked);
        std::size_t used = 0;
        for (std::size_t i = 0; i < x.rows; ++i)
            if (norm(z_masked.row(i)) > 1e-12 && norm(z.row(i)) > 1e-12) ++used;
        double jel = 0;
        dz_masked = Matrix(z.rows, z.cols);
        for (std::size_t i = 0; i < x.rows && used > 0; ++i) {
            const auto a = z_masked.row(i);
            const auto b = z.row(i);
            const double na = norm(a), nb = norm(b);
            if (na <= 1e-12 || nb <= 1e-12) continue;
            const double cs = dot(a, b) / (na * nb);
            jel += (1.0 - cs) / double(used);
            // d(1-cos)/da = -(b_hat - cos*a_hat)/|a|, same with roles swapped
            const double w = -1.0 / double(used);
            auto da = dz_masked.row(i);
            auto db = dz.row(i);
            for (std::size_t k = 0; k < z.cols; ++k) {
                da[k] += w * (b[k] / nb - cs * a[k] / na) / na;
                db[k] += w * (a[k] / na - cs * b[k] / nb) / nb;
            }
        }
        report.components["jel"] = jel;
        report.jel_all_skipped = (used == 0 && x.rows > 0);
    }

    mlp_backward_batch(model.extractor, cache_x, dz, grads.extractor);
    if (use_jel) mlp_backward_batch(model.extractor, cache_masked, dz_masked, grads.extractor);

    report.total = report.component_sum();
    return report;
}

// Per-batch routing statistics surfaced to the trainer.
struct RoutedBatchStats {
    Matrix routing;                    // N x M full weight rows
    std::vector<double> load_fraction; // f_j
};

// Forward + analytic backward for the routed-expert objective
// (CE or guided CE, plus SL and BL). Selection sets are treated as constants;
// gradients flow through the softmax over the selected similarities, the
// selected prototypes, the projection and the selected experts only.
inline BatchLossReport routed_backward(const RoutedModel& model, const Matrix& x,
                                       std::span<const int> labels, std::span<const int> domain_ids,
                                       const std::vector<double>* guide, LossMode mode,
                                       RoutedGrads& grads, bool use_sl = true, bool use_bl = true,
                                       RoutedBatchStats* stats = nullptr) {
    if (mode == LossMode::mutual && (!guide || guide->size() != x.rows))
        throw ConfigError("routed_backward: mutual mode needs guide losses for the batch");
    grads.zero();

    const std::size_t n = x.rows;
    const std::size_t m = model.router.expert_count();
    const std::size_t classes = model.class_count();

    MlpCache cache_x;
    Matrix z = mlp_forward_batch(model.extractor, x, cache_x);

    std::vector<RoutingResult> routing(n);
    Matrix r_matrix(n, m);
    for (std::size_t i = 0; i < n; ++i) {
        routing[i] = route(model.router, z.row(i));
        std::copy(routing[i].weights.begin(), routing[i].weights.end(), r_matrix.row(i).begin());
    }

    // Batch each expert over the samples that selected it.
    std::vector<std::vector<std::size_t>> members(m);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j : routing[i].selected) members[j].push_back(i);

    Matrix logits(n, classes);
    std::vector<MlpCache> expert_cache(m);
    std::vector<Matrix> expert_out(m);
    for (std::size_t j = 0; j < m; ++j) {
        if (members[j].empty()) continue;
        Matrix in(members[j].size(), z.cols);
        for (std::size_t k = 0; k < members[j].size(); ++k)
            std::copy(z.row(members[j][k]).begin(), z.row(members[j][k]).end(), in.row(k).begin());
        expert_out[j] = mlp_forward_batch(model.experts[j], in, expert_cache[j]);
        for (std::size_t k = 0; k < members[j].size(); ++k) {
            const std::size_t i = members[j][k];
            axpy(r_matrix.at(i, j), expert_out[j].row(k), logits.row(i));
        }
    }

    CeResult ce = ce_loss(logits, labels);

    BatchLossReport report;
    report.per_sample = ce.per_sample;
    if (mode == LossMode::warmup) {
        report.components["ce"] = ce.mean;
    } else {
        report.components["r_from_s"] = mutual_weighted_loss(ce.per_sample, *guide);
    }

    std::vector<double> load(m, 0.0);
    for (std::size_t j = 0; j < m; ++j) load[j] = double(members[j].size()) / double(n);
    if (use_sl) report.components["sl"] = sl_loss(r_matrix, domain_ids);
    if (use_bl) report.components["bl"] = bl_loss(r_matrix, m);

    // --- backward ---
    Matrix dlogits;
    detail::ce_logit_grad(logits, labels, detail::loss_scales(ce.per_sample, guide, mode), dlogits);

    // d loss / d r_ij for the selected entries: CE through the mixture, plus
    // BL (M * f_j / N, f_j constant), plus SL through the subject averages.
    Matrix dr(n, m);
    for (std::size_t j = 0; j < m; ++j)
        for (std::size_t k = 0; k < members[j].size(); ++k) {
            const std::size_t i = members[j][k];
            dr.at(i, j) = dot(dlogits.row(i), expert_out[j].row(k));
        }
    if (use_bl) {
        for (std::size_t j = 0; j < m; ++j) {
            const double g = double(m) * double(members[j].size()) / (double(n) * double(n));
            for (std::size_t i : members[j]) dr.at(i, j) += g;
        }
    }
    if (use_sl) {
        std::map<int, std::vector<std::size_t>> subjects;
        for (std::size_t i = 0; i < n; ++i) subjects[domain_ids[i]].push_back(i);
        const double n_subjects = double(subjects.size());
        for (const auto& [_, idx] : subjects) {
            const double count = double(idx.size());
            std::vector<double> rbar(m, 0.0);
            for (std::size_t i : idx) axpy(1.0 / count, r_matrix.row(i), rbar);
            for (std::size_t j = 0; j < m; ++j) {
                if (rbar[j] <= 0) continue;
                const double g = -(std::log(rbar[j]) + 1.0) / (n_subjects * count);
                for (std::size_t i : idx)
                    if (r_matrix.at(i, j) > 0) dr.at(i, j) += g;
            }
        }
    }

    // Expert parameter gradients and the CE contribution to dz.
    Matrix dz(n, z.cols);
    for (std::size_t j = 0; j < m; ++j) {
        if (members[j].empty()) continue;
        Matrix dout(members[j].size(), classes);
        for (std::size_t k = 0; k < members[j].size(); ++k) {
            const std::size_t i = members[j][k];
            for (std::size_t c = 0; c < classes; ++c)
                dout.at(k, c) = r_matrix.at(i, j) * dlogits.at(i, c);
        }
        Matrix din = mlp_backward_batch(model.experts[j], expert_cache[j], dout, grads.experts[j]);
        for (std::size_t k = 0; k < members[j].size(); ++k)
            axpy(1.0, din.row(k), dz.row(members[j][k]));
    }

    // Router backward: softmax over the selected similarities, then cosine
    // against prototype and projected feature, then the projection itself.
    std::vector<double> du(model.router.gate_dim());
    for (std::size_t i = 0; i < n; ++i) {
        const RoutingResult& rr = routing[i];
        if (rr.zero_projection) continue;
        const std::size_t k = rr.selected.size();
        double mix = 0;
        for (std::size_t s = 0; s < k; ++s) mix += rr.weights[rr.selected[s]] * dr.at(i, rr.selected[s]);
        std::fill(du.begin(), du.end(), 0.0);
        const auto u = std::span<const double>(rr.projected);
        const double nu = norm(u);
        bool touched = false;
        for (std::size_t s = 0; s < k; ++s) {
            const std::size_t j = rr.selected[s];
            const double w = rr.weights[j];
            const double dsim = w * (dr.at(i, j) - mix);
            if (dsim == 0.0) continue;
            const auto proto = model.router.prototypes.row(j);
            const double np = norm(proto);
            if (np <= 1e-8) continue;
            const double sim = rr.similarity[j];
            auto gproto = grads.g_prototypes.row(j);
            for (std::size_t t = 0; t < proto.size(); ++t) {
                gproto[t] += dsim * (u[t] / nu - sim * proto[t] / np) / np;
                du[t] += dsim * (proto[t] / np - sim * u[t] / nu) / nu;
            }
            touched = true;
        }
        if (touched) {
            add_outer(grads.g_projection, du, z.row(i));
            matvec_t_add(model.router.projection, du, dz.row(i));
        }
    }

    mlp_backward_batch(model.extractor, cache_x, dz, grads.extractor);

    if (stats) {
        stats->routing = std::move(r_matrix);
        stats->load_fraction = std::move(load);
    }
    report.total = report.component_sum();
    return report;
}

// Forward-only views of the same objectives; used by oracles and gradcheck.
inline BatchLossReport shared_total(const SharedModel& model, const Matrix& x,
                                    const Matrix& x_masked, std::span<const int> labels,
                                    const std::vector<double>* guide, LossMode mode,
                                    bool use_jel = true) {
    SharedGrads g = make_grads(model);
    return shared_backward(model, x, x_masked, labels, guide, mode, g, use_jel);
}

inline BatchLossReport routed_total(const RoutedModel& model, const Matrix& x,
                                    std::span<const int> labels, std::span<const int> domain_ids,
                                    const std::vector<double>* guide, LossMode mode,
                                    bool use_sl = true, bool use_bl = true) {
    RoutedGrads g = make_grads(model);
    return routed_backward(model, x, labels, domain_ids, guide, mode, g, use_sl, use_bl);
}

} // namespace mgec
