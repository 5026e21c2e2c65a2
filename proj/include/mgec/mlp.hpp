#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "mgec/matrix.hpp"
#include "mgec/rng.hpp"

namespace mgec {

enum class Activation { identity, relu };

struct DenseLayer {
    Matrix w;               // out x in
    std::vector<double> b;  // out
    Activation act = Activation::identity;
};

// Plain fully connected stack. Hidden layers use ReLU, the last layer is
// linear; realizes both feature extractors and expert heads.
struct MlpParams {
    std::vector<DenseLayer> layers;

    std::size_t input_width() const { return layers.front().w.cols; }
    std::size_t output_width() const { return layers.back().w.rows; }

    void validate() const {
        if (layers.empty()) throw ConfigError("mlp: no layers");
        for (std::size_t l = 0; l < layers.size(); ++l) {
            const auto& lay = layers[l];
            if (lay.b.size() != lay.w.rows) throw ConfigError("mlp: bias width mismatch");
            if (l > 0 && lay.w.cols != layers[l - 1].w.rows)
                throw ConfigError("mlp: layer " + std::to_string(l) + " input width " +
                                  std::to_string(lay.w.cols) + " does not chain from " +
                                  std::to_string(layers[l - 1].w.rows));
        }
    }
};

// He-style init for ReLU layers, 1/sqrt(fan_in) for linear ones.
inline MlpParams make_mlp(std::span<const std::size_t> widths, Rng& rng) {
    if (widths.size() < 2) throw ConfigError("mlp: need at least input and output widths");
    MlpParams p;
    for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
        DenseLayer lay;
        const std::size_t in = widths[l], out = widths[l + 1];
        const bool hidden = l + 2 < widths.size();
        lay.act = hidden ? Activation::relu : Activation::identity;
        const double scale = hidden ? std::sqrt(2.0 / double(in)) : std::sqrt(1.0 / double(in));
        lay.w = Matrix(out, in);
        for (double& v : lay.w.data) v = rng.normal(0.0, scale);
        lay.b.assign(out, 0.0);
        p.layers.push_back(std::move(lay));
    }
    return p;
}

// Per-layer post-activation values for a batch; acts[0] is the input matrix.
struct MlpCache {
    std::vector<Matrix> acts;
};

inline Matrix mlp_forward_batch(const MlpParams& p, const Matrix& x, MlpCache& cache) {
    if (x.cols != p.input_width())
        throw ConfigError("mlp: input width " + std::to_string(x.cols) + ", expected " +
                          std::to_string(p.input_width()));
    cache.acts.clear();
    cache.acts.reserve(p.layers.size() + 1);
    cache.acts.push_back(x);
    for (const auto& lay : p.layers) {
        const Matrix& in = cache.acts.back();
        Matrix out(in.rows, lay.w.rows);
        for (std::size_t i = 0; i < in.rows; ++i) {
            matvec(lay.w, in.row(i), lay.b, out.row(i));
            if (lay.act == Activation::relu)
                for (double& v : out.row(i))
                    if (v < 0) v = 0;
        }
        cache.acts.push_back(std::move(out));
    }
    return cache.acts.back();
}

inline std::vector<double> mlp_forward(const MlpParams& p, std::span<const double> x,
                                       MlpCache* cache = nullptr) {
    Matrix in(1, x.size());
    std::copy(x.begin(), x.end(), in.data.begin());
    MlpCache local;
    MlpCache& c = cache ? *cache : local;
    Matrix out = mlp_forward_batch(p, in, c);
    return {out.data.begin(), out.data.end()};
}

struct MlpGrads {
    std::vector<Matrix> gw;
    std::vector<std::vector<double>> gb;

    void zero() {
        for (auto& g : gw) g.fill(0.0);
        for (auto& g : gb) std::fill(g.begin(), g.end(), 0.0);
    }
};

inline MlpGrads make_grads(const MlpParams& p) {
    MlpGrads g;
    for (const auto& lay : p.layers) {
        g.gw.emplace_back(lay.w.rows, lay.w.cols);
        g.gb.emplace_back(lay.b.size(), 0.0);
    }
    return g;
}

// Accumulates parameter gradients for the batch and returns the gradient with
// respect to the input. dY must match the forward output shape. ReLU uses the
// post-activation sign, so the subgradient at the kink is 0.
inline Matrix mlp_backward_batch(const MlpParams& p, const MlpCache& cache, const Matrix& dy,
                                 MlpGrads& grads) {
    Matrix delta = dy;
    for (std::size_t l = p.layers.size(); l-- > 0;) {
        const auto& lay = p.layers[l];
        const Matrix& out = cache.acts[l + 1];
        const Matrix& in = cache.acts[l];
        if (lay.act == Activation::relu) {
            for (std::size_t i = 0; i < delta.size(); ++i)
                if (out.data[i] <= 0) delta.data[i] = 0;
        }
        Matrix prev(in.rows, in.cols);
        for (std::size_t i = 0; i < in.rows; ++i) {
            add_outer(grads.gw[l], delta.row(i), in.row(i));
            axpy(1.0, delta.row(i), grads.gb[l]);
            matvec_t_add(lay.w, delta.row(i), prev.row(i));
        }
        delta = std::move(prev);
    }
    return delta;
}

} // namespace mgec
