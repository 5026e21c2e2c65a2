#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <vector>

#include "mgec/errors.hpp"
#include "mgec/mlp.hpp"

namespace mgec {

// View over one parameter tensor. decay marks tensors subject to weight
// decay: layer weights yes, biases and router prototypes no.
struct TensorRef {
    double* data = nullptr;
    std::size_t n = 0;
    bool decay = false;
};

using TensorRefs = std::vector<TensorRef>;

inline void collect_mlp(MlpParams& p, TensorRefs& out) {
    for (auto& lay : p.layers) {
        out.push_back({lay.w.data.data(), lay.w.data.size(), true});
        out.push_back({lay.b.data(), lay.b.size(), false});
    }
}

inline void collect_mlp_grads(MlpGrads& g, TensorRefs& out) {
    for (std::size_t l = 0; l < g.gw.size(); ++l) {
        out.push_back({g.gw[l].data.data(), g.gw[l].data.size(), true});
        out.push_back({g.gb[l].data(), g.gb[l].size(), false});
    }
}

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 5e-4;
};

struct AdamState {
    AdamConfig cfg;
    std::vector<std::vector<double>> m, v;
    std::uint64_t step = 0;

    void init(const TensorRefs& params) {
        m.clear();
        v.clear();
        for (const auto& t : params) {
            m.emplace_back(t.n, 0.0);
            v.emplace_back(t.n, 0.0);
        }
        step = 0;
    }
};

// Adam with decoupled weight decay: the decay term is applied directly to the
// parameter, not folded into the gradient.
inline void adam_step(const TensorRefs& params, const TensorRefs& grads, AdamState& st) {
    if (params.size() != grads.size() || params.size() != st.m.size())
        throw ConfigError("adam_step: parameter/gradient/state layout mismatch");
    st.step += 1;
    const auto& c = st.cfg;
    const double bc1 = 1.0 - std::pow(c.beta1, double(st.step));
    const double bc2 = 1.0 - std::pow(c.beta2, double(st.step));
    for (std::size_t t = 0; t < params.size(); ++t) {
        if (params[t].n != grads[t].n || params[t].n != st.m[t].size())
            throw ConfigError("adam_step: tensor shape mismatch");
        double* p = params[t].data;
        const double* g = grads[t].data;
        double* m = st.m[t].data();
        double* v = st.v[t].data();
        for (std::size_t i = 0; i < params[t].n; ++i) {
            m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
            v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            p[i] -= c.lr * mhat / (std::sqrt(vhat) + c.eps);
            if (params[t].decay) p[i] -= c.lr * c.weight_decay * p[i];
        }
    }
}

} // namespace mgec
