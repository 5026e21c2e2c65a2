#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "mgec/adam.hpp"
#include "mgec/backprop.hpp"
#include "mgec/gradcheck.hpp"
#include "mgec/mlp.hpp"
#include "mgec/synthetic.hpp"

using namespace mgec;

TEST_CASE("softmax basics") {
    const std::vector<double> sym = {0.0, 0.0};
    auto p = softmax(sym);
    REQUIRE(p[0] == Catch::Approx(0.5).margin(1e-15));
    REQUIRE(p[1] == Catch::Approx(0.5).margin(1e-15));

    const std::vector<double> analytic = {std::log(3.0), 0.0};
    p = softmax(analytic);
    REQUIRE(p[0] == Catch::Approx(0.75).margin(1e-12));
    REQUIRE(p[1] == Catch::Approx(0.25).margin(1e-12));

    const std::vector<double> huge = {1000.0, 0.0};
    p = softmax(huge);
    REQUIRE(std::isfinite(p[0]));
    REQUIRE(p[0] == Catch::Approx(1.0).margin(1e-12));
    REQUIRE(p[1] >= 0.0);
}

TEST_CASE("softmax properties on random vectors") {
    Rng rng(17);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t n = 1 + rng.below(12);
        std::vector<double> v(n);
        for (double& x : v) x = rng.normal(0.0, 5.0);
        const auto p = softmax(v);
        double sum = 0;
        for (double x : p) {
            REQUIRE(x > 0.0);
            REQUIRE(x <= 1.0);
            sum += x;
        }
        REQUIRE(std::abs(sum - 1.0) <= 1e-12);

        const double shift = rng.normal(0.0, 10.0);
        std::vector<double> shifted = v;
        for (double& x : shifted) x += shift;
        const auto q = softmax(shifted);
        for (std::size_t i = 0; i < n; ++i) REQUIRE(std::abs(p[i] - q[i]) <= 1e-12);
    }
}

TEST_CASE("mlp identity layer") {
    MlpParams p;
    DenseLayer lay;
    lay.w = Matrix(2, 2);
    lay.w.at(0, 0) = 1.0;
    lay.w.at(1, 1) = 1.0;
    lay.b = {0.0, 0.0};
    p.layers.push_back(lay);
    const std::vector<double> x = {1.0, 2.0};
    const auto y = mlp_forward(p, x);
    REQUIRE(y == x);
}

TEST_CASE("mlp zero network with relu hidden layer") {
    MlpParams p;
    DenseLayer h;
    h.w = Matrix(4, 3);
    h.b.assign(4, 0.0);
    h.act = Activation::relu;
    DenseLayer o;
    o.w = Matrix(2, 4);
    o.b.assign(2, 0.0);
    p.layers = {h, o};
    const std::vector<double> x = {0.3, -1.2, 5.0};
    for (double v : mlp_forward(p, x)) REQUIRE(v == 0.0);
}

// Straight-line two-layer product written independently of the layer
// abstraction.
static std::vector<double> chain_oracle(const MlpParams& p, const std::vector<double>& x) {
    const auto& l0 = p.layers[0];
    const auto& l1 = p.layers[1];
    std::vector<double> h(l0.w.rows, 0.0);
    for (std::size_t j = 0; j < l0.w.rows; ++j) {
        double acc = l0.b[j];
        for (std::size_t k = 0; k < l0.w.cols; ++k) acc += l0.w.at(j, k) * x[k];
        h[j] = acc > 0 ? acc : 0.0;
    }
    std::vector<double> out(l1.w.rows, 0.0);
    for (std::size_t j = 0; j < l1.w.rows; ++j) {
        double acc = l1.b[j];
        for (std::size_t k = 0; k < l1.w.cols; ++k) acc += l1.w.at(j, k) * h[k];
        out[j] = acc;
    }
    return out;
}

TEST_CASE("mlp forward matches the matrix-chain oracle on a synthetic sample") {
    Rng rng(7);
    const std::size_t widths[] = {128, 64, 2};
    const MlpParams net = make_mlp(widths, rng);

    SyntheticSpec spec;
    const auto [ds, teacher] = generate_synthetic(spec);
    const std::vector<double>& x = ds.samples.front().features;

    const auto got = mlp_forward(net, x);
    const auto want = chain_oracle(net, x);
    REQUIRE(got.size() == want.size());
    for (std::size_t i = 0; i < got.size(); ++i)
        REQUIRE(got[i] == Catch::Approx(want[i]).margin(1e-12));

    const auto again = mlp_forward(net, x);
    REQUIRE(got == again);  // bitwise deterministic
}

TEST_CASE("mlp dimension mismatch is a configuration error") {
    Rng rng(3);
    const std::size_t widths[] = {4, 2};
    const MlpParams net = make_mlp(widths, rng);
    const std::vector<double> bad = {1.0, 2.0, 3.0};
    REQUIRE_THROWS_AS(mlp_forward(net, bad), ConfigError);

    MlpParams broken = net;
    broken.layers.push_back(broken.layers.front());
    REQUIRE_THROWS_AS(broken.validate(), ConfigError);
}

TEST_CASE("adam fixed point under zero gradient and zero decay") {
    std::vector<double> p = {1.5, -2.0, 0.25};
    std::vector<double> g = {0.0, 0.0, 0.0};
    TensorRefs params = {{p.data(), p.size(), true}};
    TensorRefs grads = {{g.data(), g.size(), true}};
    AdamState st;
    st.cfg.weight_decay = 0.0;
    st.init(params);
    const auto before = p;
    for (int i = 0; i < 5; ++i) adam_step(params, grads, st);
    REQUIRE(p == before);
    REQUIRE(st.step == 5);
}

TEST_CASE("adam first step moves by lr in the gradient sign") {
    std::vector<double> p = {1.0};
    std::vector<double> g = {1.0};
    TensorRefs params = {{p.data(), 1, false}};
    TensorRefs grads = {{g.data(), 1, false}};
    AdamState st;
    st.cfg.lr = 1e-4;
    st.cfg.weight_decay = 0.0;
    st.init(params);
    adam_step(params, grads, st);
    // bias-corrected first step: delta = lr * 1 / (1 + eps)
    REQUIRE(p[0] == Catch::Approx(1.0 - 1e-4).epsilon(1e-6));

    const double after_one = p[0];
    adam_step(params, grads, st);
    REQUIRE(p[0] < after_one);  // monotone in -grad direction
}

TEST_CASE("adam rejects mismatched shapes") {
    std::vector<double> p = {1.0, 2.0};
    std::vector<double> g = {1.0};
    TensorRefs params = {{p.data(), 2, false}};
    TensorRefs grads = {{g.data(), 1, false}};
    AdamState st;
    st.init(params);
    REQUIRE_THROWS_AS(adam_step(params, grads, st), ConfigError);
}

TEST_CASE("finite_diff_check accepts the exact quadratic gradient") {
    Rng rng(11);
    std::vector<double> x(20);
    for (double& v : x) v = rng.normal();
    std::vector<double> analytic(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) analytic[i] = 2.0 * x[i];
    const auto loss = [](std::span<const double> v) {
        double s = 0;
        for (double a : v) s += a * a;
        return s;
    };
    Rng probe(1);
    const auto rep = finite_diff_check(loss, x, analytic, 20, 1e-5, 1e-8, probe);
    REQUIRE(rep.pass);
    REQUIRE(rep.max_rel_err <= 1e-8);
}

TEST_CASE("finite_diff_check catches a planted defect") {
    Rng rng(12);
    std::vector<double> x(20);
    for (double& v : x) v = 0.5 + rng.uniform();
    std::vector<double> analytic(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) analytic[i] = 2.0 * x[i] * 1.01;
    const auto loss = [](std::span<const double> v) {
        double s = 0;
        for (double a : v) s += a * a;
        return s;
    };
    Rng probe(2);
    const auto rep = finite_diff_check(loss, x, analytic, 20, 1e-5, 1e-4, probe);
    REQUIRE_FALSE(rep.pass);
    REQUIRE(rep.max_rel_err == Catch::Approx(0.0099).epsilon(0.05));
}

TEST_CASE("finite_diff_check reports a non-finite loss") {
    std::vector<double> x = {0.0};
    std::vector<double> analytic = {0.0};
    const auto loss = [](std::span<const double> v) {
        return std::log(v[0]);  // -inf at 0, nan below
    };
    Rng probe(3);
    const auto rep = finite_diff_check(loss, x, analytic, 1, 1e-5, 1e-4, probe);
    REQUIRE_FALSE(rep.pass);
    REQUIRE(rep.nonfinite);
    REQUIRE(rep.nonfinite_coord == 0);
}
