#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mgec/backprop.hpp"
#include "mgec/gradcheck.hpp"
#include "mgec/models.hpp"
#include "mgec/rng.hpp"

namespace mgec {

struct LossCheckOptions {
    std::size_t probes = 100;
    double h = 1e-5;
    double tol = 1e-4;
    std::uint64_t seed = 0;
    bool corrupt = false;  // plant a defect in the analytic gradient; must fail
};

struct LossCheckResult {
    std::string name;
    GradCheckReport report;
};

namespace gradcheck_detail {

// Small but real probe setting. K = 2 so the routing softmax actually carries
// gradient (a top-1 softmax is the constant 1).
struct Probe {
    SharedModel shared;
    RoutedModel routed;
    Matrix x;
    Matrix x_masked;
    std::vector<int> labels;
    std::vector<int> domains;
    std::vector<double> guide_for_shared;
    std::vector<double> guide_for_routed;
};

constexpr std::size_t kInputDim = 10;
constexpr std::size_t kBatch = 8;
constexpr int kClasses = 3;
constexpr std::size_t kExperts = 5;
constexpr std::size_t kTopK = 2;
constexpr std::size_t kGateDim = 6;

inline bool relu_margins_ok(const MlpParams& p, const Matrix& x, double margin) {
    Matrix cur = x;
    for (const auto& lay : p.layers) {
        Matrix pre(cur.rows, lay.w.rows);
        for (std::size_t i = 0; i < cur.rows; ++i) matvec(lay.w, cur.row(i), lay.b, pre.row(i));
        if (lay.act == Activation::relu) {
            for (double v : pre.data)
                if (std::abs(v) <= margin) return false;
            for (double& v : pre.data)
                if (v < 0) v = 0;
        }
        cur = std::move(pre);
    }
    return true;
}

inline bool routing_margins_ok(const RoutedModel& m, const Matrix& x, double margin) {
    MlpCache cache;
    Matrix z = mlp_forward_batch(m.extractor, x, cache);
    for (std::size_t i = 0; i < x.rows; ++i) {
        const RoutingResult rr = route(m.router, z.row(i));
        if (rr.zero_projection) return false;
        std::vector<double> sims = rr.similarity;
        std::sort(sims.begin(), sims.end(), std::greater<double>());
        if (sims[kTopK - 1] - sims[kTopK] <= margin) return false;
        if (norm(z.row(i)) <= margin) return false;  // JEL / cosine safety
    }
    return true;
}

// Draw model + batch until every probe-margin condition holds: routing gaps
// and ReLU preactivations at least 1e-3 away from their kinks.
inline Probe make_probe(std::uint64_t seed) {
    const std::vector<std::size_t> hidden = {12, 8};
    for (std::uint64_t attempt = 0;; ++attempt) {
        Rng rng(derive_seed(seed, {0x6C0DE, attempt}));
        Probe p;
        p.shared = make_shared_model(kInputDim, hidden, kClasses, rng);
        p.routed = make_routed_model(kInputDim, hidden, kClasses, kExperts, kTopK, kGateDim, rng);
        p.x = Matrix(kBatch, kInputDim);
        for (double& v : p.x.data) v = rng.normal();
        p.x_masked = p.x;
        for (double& v : p.x_masked.data)
            if (rng.bernoulli(0.2)) v = 0.0;
        p.labels.resize(kBatch);
        p.domains.resize(kBatch);
        for (std::size_t i = 0; i < kBatch; ++i) {
            p.labels[i] = static_cast<int>(rng.below(kClasses));
            p.domains[i] = static_cast<int>(rng.below(3));
        }
        for (std::size_t i = 0; i < kBatch; ++i) {
            p.guide_for_shared.push_back(0.2 + rng.uniform());
            p.guide_for_routed.push_back(0.2 + rng.uniform());
        }
        const double margin = 1e-3;
        if (!relu_margins_ok(p.shared.extractor, p.x, margin)) continue;
        if (!relu_margins_ok(p.shared.extractor, p.x_masked, margin)) continue;
        if (!relu_margins_ok(p.routed.extractor, p.x, margin)) continue;
        if (!routing_margins_ok(p.routed, p.x, margin)) continue;
        return p;
    }
}

struct Case {
    std::string name;
    std::function<double(Probe&)> loss;                      // forward value at current params
    std::function<std::vector<double>(Probe&)> gradient;     // analytic gradient, packed
    std::function<TensorRefs(Probe&)> params;                // parameter views
};

inline std::vector<Case> make_cases() {
    std::vector<Case> cases;

    const auto shared_params = [](Probe& p) { return collect_params(p.shared); };
    const auto routed_params = [](Probe& p) { return collect_params(p.routed); };

    const auto shared_case = [&](std::string name, bool use_jel, bool jel_only, LossMode mode) {
        Case c;
        c.name = std::move(name);
        c.params = shared_params;
        c.loss = [use_jel, jel_only, mode](Probe& p) {
            auto rep = shared_total(p.shared, p.x, p.x_masked, p.labels,
                                    mode == LossMode::mutual ? &p.guide_for_shared : nullptr, mode,
                                    use_jel);
            return jel_only ? rep.components.at("jel") : rep.total;
        };
        c.gradient = [use_jel, jel_only, mode](Probe& p) {
            SharedGrads g = make_grads(p.shared);
            if (jel_only) {
                // isolate JEL by zeroing the CE path: run with CE included,
                // then subtract a CE-only pass
                SharedGrads g_ce = make_grads(p.shared);
                shared_backward(p.shared, p.x, p.x_masked, p.labels, nullptr, LossMode::warmup, g,
                                true);
                shared_backward(p.shared, p.x, p.x_masked, p.labels, nullptr, LossMode::warmup, g_ce,
                                false);
                auto fg = pack(collect_grads(g));
                const auto fc = pack(collect_grads(g_ce));
                for (std::size_t i = 0; i < fg.size(); ++i) fg[i] -= fc[i];
                return fg;
            }
            shared_backward(p.shared, p.x, p.x_masked, p.labels,
                            mode == LossMode::mutual ? &p.guide_for_shared : nullptr, mode, g,
                            use_jel);
            return pack(collect_grads(g));
        };
        return c;
    };

    cases.push_back(shared_case("erm_shared", false, false, LossMode::warmup));
    cases.push_back(shared_case("jel", true, true, LossMode::warmup));
    cases.push_back(shared_case("shared_total_warmup", true, false, LossMode::warmup));
    cases.push_back(shared_case("mutual_s_from_r", false, false, LossMode::mutual));

    const auto routed_case = [&](std::string name, bool use_sl, bool use_bl, LossMode mode,
                                 const char* only_component) {
        Case c;
        c.name = std::move(name);
        c.params = routed_params;
        std::string only = only_component ? only_component : "";
        c.loss = [use_sl, use_bl, mode, only](Probe& p) {
            auto rep = routed_total(p.routed, p.x, p.labels, p.domains,
                                    mode == LossMode::mutual ? &p.guide_for_routed : nullptr, mode,
                                    use_sl, use_bl);
            return only.empty() ? rep.total : rep.components.at(only);
        };
        c.gradient = [use_sl, use_bl, mode, only](Probe& p) {
            RoutedGrads g = make_grads(p.routed);
            if (!only.empty()) {
                // isolate one regularizer by differencing against the bare CE pass
                RoutedGrads g_ce = make_grads(p.routed);
                routed_backward(p.routed, p.x, p.labels, p.domains, nullptr, LossMode::warmup, g,
                                only == "sl", only == "bl");
                routed_backward(p.routed, p.x, p.labels, p.domains, nullptr, LossMode::warmup, g_ce,
                                false, false);
                auto fg = pack(collect_grads(g));
                const auto fc = pack(collect_grads(g_ce));
                for (std::size_t i = 0; i < fg.size(); ++i) fg[i] -= fc[i];
                return fg;
            }
            routed_backward(p.routed, p.x, p.labels, p.domains,
                            mode == LossMode::mutual ? &p.guide_for_routed : nullptr, mode, g,
                            use_sl, use_bl);
            return pack(collect_grads(g));
        };
        return c;
    };

    cases.push_back(routed_case("routed_ce", false, false, LossMode::warmup, nullptr));
    cases.push_back(routed_case("sl", true, false, LossMode::warmup, "sl"));
    cases.push_back(routed_case("bl", false, true, LossMode::warmup, "bl"));
    cases.push_back(routed_case("routed_total_warmup", true, true, LossMode::warmup, nullptr));
    cases.push_back(routed_case("mutual_r_from_s", true, true, LossMode::mutual, nullptr));

    return cases;
}

} // namespace gradcheck_detail

// Checks analytic gradients of every loss composition against central finite
// differences at randomly probed coordinates.
inline std::vector<LossCheckResult> run_loss_gradchecks(const LossCheckOptions& opt) {
    using namespace gradcheck_detail;
    std::vector<LossCheckResult> results;
    Probe probe = make_probe(opt.seed);
    const auto cases = make_cases();
    for (std::size_t ci = 0; ci < cases.size(); ++ci) {
        const auto& c = cases[ci];
        const TensorRefs refs = c.params(probe);
        const std::vector<double> base = pack(refs);
        std::vector<double> analytic = c.gradient(probe);
        if (opt.corrupt) {
            for (double& v : analytic) v *= 1.01;
        }
        const auto loss_fn = [&](std::span<const double> flat) {
            unpack(flat, refs);
            const double v = c.loss(probe);
            unpack(base, refs);
            return v;
        };
        Rng probe_rng(derive_seed(opt.seed, {0xC4EC, ci}));
        LossCheckResult r;
        r.name = c.name;
        r.report = finite_diff_check(loss_fn, base, analytic, opt.probes, opt.h, opt.tol, probe_rng);
        unpack(base, refs);
        results.push_back(std::move(r));
    }
    return results;
}

} // namespace mgec
