#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <numbers>
#include <set>
#include <vector>

#include "mgec/checkpoint.hpp"
#include "mgec/models.hpp"

using namespace mgec;

namespace {

// Router whose similarities against z = (1, 0) are exactly the given cosines.
RouterState planted_router(const std::vector<double>& cosines, std::size_t top_k) {
    RouterState r;
    r.top_k = top_k;
    r.projection = Matrix(2, 2);
    r.projection.at(0, 0) = 1.0;
    r.projection.at(1, 1) = 1.0;
    r.prototypes = Matrix(cosines.size(), 2);
    for (std::size_t j = 0; j < cosines.size(); ++j) {
        const double theta = std::acos(cosines[j]);
        r.prototypes.at(j, 0) = std::cos(theta);
        r.prototypes.at(j, 1) = std::sin(theta);
    }
    return r;
}

const std::vector<double> kUnitX = {1.0, 0.0};

} // namespace

TEST_CASE("route picks the single best expert at K=1") {
    const RouterState r = planted_router({0.9, 0.1, -0.5}, 1);
    const RoutingResult res = route(r, kUnitX);
    REQUIRE(res.selected == std::vector<std::size_t>{0});
    REQUIRE(res.weights[0] == 1.0);
    REQUIRE(res.weights[1] == 0.0);
    REQUIRE(res.weights[2] == 0.0);
    REQUIRE(res.similarity[0] == Catch::Approx(0.9).margin(1e-12));
}

TEST_CASE("route splits ties evenly and prefers lower indices") {
    const RouterState r = planted_router({1.0, 1.0, 0.0}, 2);
    const RoutingResult res = route(r, kUnitX);
    REQUIRE(res.selected == std::vector<std::size_t>{0, 1});
    REQUIRE(res.weights[0] == Catch::Approx(0.5).margin(1e-12));
    REQUIRE(res.weights[1] == Catch::Approx(0.5).margin(1e-12));
    REQUIRE(res.weights[2] == 0.0);
}

TEST_CASE("route is invariant to positive rescaling of z") {
    Rng rng(21);
    const RouterState r = make_router(16, 8, 5, 2, rng);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> z(16);
        for (double& v : z) v = rng.normal();
        const RoutingResult a = route(r, z);
        std::vector<double> scaled = z;
        for (double& v : scaled) v *= 3.7;
        const RoutingResult b = route(r, scaled);
        REQUIRE(a.selected == b.selected);
        for (std::size_t j = 0; j < 5; ++j) REQUIRE(std::abs(a.weights[j] - b.weights[j]) <= 1e-12);
    }
}

TEST_CASE("route produces exactly K nonzero weights summing to 1") {
    Rng rng(22);
    for (std::size_t k : {std::size_t{1}, std::size_t{2}, std::size_t{4}}) {
        const RouterState r = make_router(12, 6, 5, k, rng);
        for (int trial = 0; trial < 1000; ++trial) {
            std::vector<double> z(12);
            for (double& v : z) v = rng.normal();
            const RoutingResult res = route(r, z);
            std::size_t nonzero = 0;
            double sum = 0;
            for (double w : res.weights) {
                if (w != 0.0) ++nonzero;
                sum += w;
            }
            REQUIRE(nonzero == k);
            REQUIRE(std::abs(sum - 1.0) <= 1e-10);

            // brute-force top-K via a full similarity sort
            std::vector<std::size_t> order(res.similarity.size());
            std::iota(order.begin(), order.end(), 0);
            std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
                return res.similarity[a] > res.similarity[b];
            });
            std::set<std::size_t> expect(order.begin(), order.begin() + long(k));
            std::set<std::size_t> got(res.selected.begin(), res.selected.end());
            REQUIRE(expect == got);
        }
    }
}

TEST_CASE("route falls back to index order on a zero projection") {
    RouterState r = planted_router({0.4, 0.3, 0.2}, 2);
    r.projection.fill(0.0);
    const std::vector<double> z = {2.0, -1.0};
    const RoutingResult res = route(r, z);
    REQUIRE(res.zero_projection);
    REQUIRE(res.selected == std::vector<std::size_t>{0, 1});
    REQUIRE(res.weights[0] == Catch::Approx(0.5).margin(1e-12));
}

TEST_CASE("degenerate prototypes are reported") {
    RouterState r = planted_router({0.5, 0.6}, 1);
    r.prototypes.at(1, 0) = 0.0;
    r.prototypes.at(1, 1) = 0.0;
    REQUIRE(r.degenerate_prototypes() == std::vector<std::size_t>{1});
}

TEST_CASE("routed_forward is an exact passthrough at K=1") {
    Rng rng(30);
    const std::size_t hidden[] = {8, 6};
    const RoutedModel m = make_routed_model(10, hidden, 3, 5, 1, 4, rng);
    std::vector<double> x(10);
    for (double& v : x) v = rng.normal();
    const RoutedForward rf = routed_forward(m, x);
    REQUIRE(rf.routing.selected.size() == 1);
    const std::size_t j = rf.routing.selected.front();
    const auto direct = mlp_forward(m.experts[j], rf.z);
    REQUIRE(rf.logits == direct);
}

TEST_CASE("identical experts make the output independent of routing") {
    Rng rng(31);
    const std::size_t hidden[] = {8, 6};
    RoutedModel m = make_routed_model(10, hidden, 3, 4, 2, 4, rng);
    for (std::size_t j = 1; j < m.experts.size(); ++j) m.experts[j] = m.experts[0];
    std::vector<double> x(10);
    for (double& v : x) v = rng.normal();
    const RoutedForward rf = routed_forward(m, x);
    const auto direct = mlp_forward(m.experts[0], rf.z);
    for (std::size_t c = 0; c < direct.size(); ++c)
        REQUIRE(rf.logits[c] == Catch::Approx(direct[c]).margin(1e-12));
}

TEST_CASE("two tied experts average exactly, against a hand-built oracle") {
    RoutedModel m;
    // identity extractor so z == x
    DenseLayer ident;
    ident.w = Matrix(2, 2);
    ident.w.at(0, 0) = 1.0;
    ident.w.at(1, 1) = 1.0;
    ident.b = {0.0, 0.0};
    m.extractor.layers = {ident};
    m.router = planted_router({0.8, 0.8, -0.9}, 2);
    for (int j = 0; j < 3; ++j) {
        DenseLayer head;
        head.w = Matrix(2, 2);
        head.w.at(0, 0) = 1.0 + j;
        head.w.at(0, 1) = 2.0;
        head.w.at(1, 0) = -1.0;
        head.w.at(1, 1) = 0.5 * j;
        head.b = {0.1 * j, -0.2};
        MlpParams e;
        e.layers = {head};
        m.experts.push_back(e);
    }

    const std::vector<double> x = {1.0, 0.0};
    const RoutedForward rf = routed_forward(m, x);
    REQUIRE(rf.routing.selected == std::vector<std::size_t>{0, 1});

    for (std::size_t c = 0; c < 2; ++c) {
        double e0 = m.experts[0].layers[0].b[c], e1 = m.experts[1].layers[0].b[c];
        for (std::size_t k = 0; k < 2; ++k) {
            e0 += m.experts[0].layers[0].w.at(c, k) * x[k];
            e1 += m.experts[1].layers[0].w.at(c, k) * x[k];
        }
        REQUIRE(rf.logits[c] == Catch::Approx(0.5 * e0 + 0.5 * e1).margin(1e-12));
    }
}

TEST_CASE("uniform-forced routing over all experts equals the plain mean") {
    Rng rng(33);
    const std::size_t hidden[] = {6, 4};
    RoutedModel m = make_routed_model(8, hidden, 2, 4, 4, 5, rng);
    // identical prototypes force equal similarities, so softmax is uniform
    for (std::size_t j = 1; j < 4; ++j)
        for (std::size_t t = 0; t < m.router.prototypes.cols; ++t)
            m.router.prototypes.at(j, t) = m.router.prototypes.at(0, t);
    std::vector<double> x(8);
    for (double& v : x) v = rng.normal();
    const RoutedForward rf = routed_forward(m, x);
    std::vector<double> mean(2, 0.0);
    for (const auto& e : m.experts) axpy(0.25, mlp_forward(e, rf.z), mean);
    for (std::size_t c = 0; c < 2; ++c)
        REQUIRE(rf.logits[c] == Catch::Approx(mean[c]).margin(1e-12));
}

TEST_CASE("shared_forward basics") {
    SharedModel zero;
    DenseLayer ext;
    ext.w = Matrix(3, 2);
    ext.b.assign(3, 0.0);
    DenseLayer head;
    head.w = Matrix(2, 3);
    head.b.assign(2, 0.0);
    zero.extractor.layers = {ext};
    zero.head.layers = {head};
    const std::vector<double> x = {0.7, -0.3};
    const SharedForward sf = shared_forward(zero, x);
    const auto p = softmax(sf.logits);
    REQUIRE(p[0] == Catch::Approx(0.5).margin(1e-15));

    SharedModel ident;
    DenseLayer i2;
    i2.w = Matrix(2, 2);
    i2.w.at(0, 0) = 1.0;
    i2.w.at(1, 1) = 1.0;
    i2.b = {0.0, 0.0};
    ident.extractor.layers = {i2};
    ident.head.layers = {i2};
    const std::vector<double> e0 = {1.0, 0.0};
    const SharedForward sfi = shared_forward(ident, e0);
    REQUIRE(sfi.logits == e0);
}

TEST_CASE("fuse_predictions averages probabilities") {
    // identical logits: fused == either branch's softmax
    const std::vector<double> logits = {0.3, -0.2, 1.1};
    const auto fused = fuse_predictions(logits, logits);
    const auto p = softmax(logits);
    for (std::size_t c = 0; c < 3; ++c)
        REQUIRE(fused.probabilities[c] == Catch::Approx(p[c]).margin(1e-15));

    // opposing confident predictions cancel; the tie goes to class 0
    const std::vector<double> a = {std::log(0.9), std::log(0.1)};
    const std::vector<double> b = {std::log(0.1), std::log(0.9)};
    const auto tie = fuse_predictions(a, b);
    REQUIRE(tie.probabilities[0] == Catch::Approx(0.5).margin(1e-12));
    REQUIRE(tie.label == 0);

    const std::vector<double> c1 = {std::log(0.8), std::log(0.2)};
    const std::vector<double> c2 = {std::log(0.4), std::log(0.6)};
    const auto mean = fuse_predictions(c1, c2);
    REQUIRE(mean.probabilities[0] == Catch::Approx(0.6).margin(1e-12));
    REQUIRE(mean.label == 0);

    // symmetric in its arguments
    Rng rng(40);
    for (int t = 0; t < 50; ++t) {
        std::vector<double> u(4), v(4);
        for (double& x : u) x = rng.normal();
        for (double& x : v) x = rng.normal();
        const auto ab = fuse_predictions(u, v);
        const auto ba = fuse_predictions(v, u);
        REQUIRE(ab.probabilities == ba.probabilities);
    }

    REQUIRE_THROWS_AS(fuse_predictions(std::vector<double>{1.0}, std::vector<double>{1.0, 2.0}),
                      ConfigError);
}

TEST_CASE("checkpoint round-trip reproduces predictions bitwise") {
    Rng rng(50);
    const std::size_t hidden[] = {10, 6};
    ModelPair pair;
    pair.shared = make_shared_model(12, hidden, 3, rng);
    pair.routed = make_routed_model(12, hidden, 3, 5, 2, 4, rng);

    const auto dir = std::filesystem::temp_directory_path() / "mgec_test_models";
    std::filesystem::create_directories(dir);
    const auto path = dir / "ckpt.json";
    save_checkpoint(path, pair, {{"note", "test"}}, {{"best_epoch", 3}});

    const Checkpoint back = load_checkpoint(path);
    REQUIRE(back.metadata.at("best_epoch").get<int>() == 3);
    REQUIRE(back.models.shared.has_value());
    REQUIRE(back.models.routed.has_value());

    std::vector<double> x(12);
    for (double& v : x) v = rng.normal();
    const auto a = shared_forward(*pair.shared, x);
    const auto b = shared_forward(*back.models.shared, x);
    REQUIRE(a.logits == b.logits);
    const auto ra = routed_forward(*pair.routed, x);
    const auto rb = routed_forward(*back.models.routed, x);
    REQUIRE(ra.logits == rb.logits);
    REQUIRE(ra.routing.selected == rb.routing.selected);
}
