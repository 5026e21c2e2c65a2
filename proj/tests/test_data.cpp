#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "mgec/data.hpp"
#include "mgec/io.hpp"
#include "mgec/synthetic.hpp"

using namespace mgec;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir() {
    const fs::path p = fs::temp_directory_path() / "mgec_test_data";
    fs::create_directories(p);
    return p;
}

int teacher_argmax(const Matrix& w, std::span<const double> x) {
    std::vector<double> logits(w.rows);
    for (std::size_t c = 0; c < w.rows; ++c) logits[c] = dot(w.row(c), x);
    return static_cast<int>(argmax(logits));
}

} // namespace

TEST_CASE("default synthetic spec yields 5 domains of 500 samples at dim 128") {
    SyntheticSpec spec;
    const auto [ds, teacher] = generate_synthetic(spec);
    REQUIRE(ds.samples.size() == 2500);
    REQUIRE(ds.feature_dim() == 128);
    std::set<int> domains;
    for (const auto& s : ds.samples) domains.insert(s.domain_id);
    REQUIRE(domains.size() == 5);
    for (const auto& [id, idx] : ds.by_domain) REQUIRE(idx.size() == 500);
    REQUIRE(teacher.w_domain.size() == 5);

    // class balance guard: every class fraction within [0.25, 0.75] for C=2
    for (double f : teacher.class_fractions) {
        REQUIRE(f >= 0.25);
        REQUIRE(f <= 0.75);
    }
}

TEST_CASE("lambda=1 labels coincide with the invariant teacher everywhere") {
    SyntheticSpec spec;
    spec.lambda = 1.0;
    spec.seed = 3;
    const auto [ds, teacher] = generate_synthetic(spec);
    for (const auto& s : ds.samples)
        REQUIRE(s.label == teacher_argmax(teacher.w_inv, s.features));
}

TEST_CASE("lambda=0 with large teacher spread makes domains disagree") {
    SyntheticSpec spec;
    spec.lambda = 0.0;
    spec.sigma_w_group = 10.0;
    spec.sigma_w_domain = 10.0;
    spec.seed = 5;
    const auto [ds, teacher] = generate_synthetic(spec);

    // brute-force cross-teacher relabeling: count samples whose label flips
    // under some other domain's teacher
    std::size_t disagreements = 0, comparisons = 0;
    for (const auto& s : ds.samples) {
        const int own = teacher_argmax(teacher.w_domain[std::size_t(s.domain_id)], s.features);
        for (std::size_t other = 0; other < teacher.w_domain.size(); ++other) {
            if (int(other) == s.domain_id) continue;
            ++comparisons;
            if (teacher_argmax(teacher.w_domain[other], s.features) != own) ++disagreements;
        }
    }
    REQUIRE(comparisons > 0);
    REQUIRE(disagreements > 0);
}

TEST_CASE("generation is bitwise reproducible for a fixed spec") {
    SyntheticSpec spec;
    spec.seed = 42;
    const auto [a, ta] = generate_synthetic(spec);
    const auto [b, tb] = generate_synthetic(spec);
    REQUIRE(a.samples.size() == b.samples.size());
    for (std::size_t i = 0; i < a.samples.size(); ++i) {
        REQUIRE(a.samples[i].features == b.samples[i].features);
        REQUIRE(a.samples[i].label == b.samples[i].label);
        REQUIRE(a.samples[i].domain_id == b.samples[i].domain_id);
    }
    REQUIRE(ta.w_inv.data == tb.w_inv.data);
    REQUIRE(ta.seed_used == tb.seed_used);
}

TEST_CASE("invalid synthetic specs are rejected") {
    SyntheticSpec spec;
    spec.lambda = 1.5;
    REQUIRE_THROWS_AS(generate_synthetic(spec), ConfigError);

    spec = SyntheticSpec{};
    spec.sigma_sample = 0.0;
    REQUIRE_THROWS_AS(generate_synthetic(spec), ConfigError);

    spec = SyntheticSpec{};
    spec.group_count = 1;
    spec.domains_per_group = {1};
    REQUIRE_THROWS_AS(generate_synthetic(spec), ConfigError);
}

namespace {

Dataset ordered_dataset() {
    Dataset ds;
    ds.class_count = 2;
    for (int t = 0; t < 6; ++t) {
        Sample s;
        s.features = {double(t), 1.0};
        s.domain_id = 3;
        s.t_index = t;
        s.label = t == 3 ? 0 : 1;  // break the chain at t=3
        ds.samples.push_back(s);
    }
    ds.rebuild_index();
    return ds;
}

} // namespace

TEST_CASE("retrieve_neighbor looks up the preceding same-class segment") {
    const Dataset ds = ordered_dataset();

    const Sample& t5 = ds.samples[5];
    const Sample* n = retrieve_neighbor(ds, t5, 1);
    REQUIRE(n != nullptr);
    REQUIRE(n->t_index == 4);

    // class mismatch: t=4 has class 1 but t=3 has class 0
    const Sample& t4 = ds.samples[4];
    REQUIRE(retrieve_neighbor(ds, t4, 1) == nullptr);

    // boundary: no predecessor
    REQUIRE(retrieve_neighbor(ds, ds.samples[0], 1) == nullptr);

    // unordered sample
    Sample unordered = t5;
    unordered.t_index = -1;
    REQUIRE(retrieve_neighbor(ds, unordered, 1) == nullptr);

    // identity on same-class consecutive chains: neighbor(t)->t_index + T == t
    for (const Sample& s : ds.samples) {
        const Sample* prev = retrieve_neighbor(ds, s, 2);
        if (prev) {
            REQUIRE(prev->t_index + 2 == s.t_index);
            REQUIRE(prev->label == s.label);
            REQUIRE(prev->domain_id == s.domain_id);
        }
    }
}

TEST_CASE("masking with rho=0 is the identity") {
    AugmentSpec spec;
    spec.rho = 0.0;
    Rng rng(1);
    Sample s;
    s.features = {1.0, 2.0, 3.0, 4.0};
    s.electrodes = 2;
    s.timesteps = 2;
    const Sample out = apply_mask(s, spec, rng);
    REQUIRE(out.features == s.features);
}

TEST_CASE("spatial masking zeroes electrode rows at rate rho") {
    AugmentSpec spec;
    spec.rho = 0.10;
    Rng rng(9);
    Sample s;
    s.electrodes = 64;
    s.timesteps = 100;
    s.features.assign(64 * 100, 1.0);
    s.label = 1;
    s.domain_id = 7;
    s.t_index = 12;

    std::size_t zeroed_rows = 0;
    const int trials = 10000;
    for (int t = 0; t < trials; ++t) {
        const Sample out = apply_mask(s, spec, rng);
        REQUIRE(out.label == s.label);
        REQUIRE(out.domain_id == s.domain_id);
        REQUIRE(out.t_index == s.t_index);
        for (std::size_t e = 0; e < 64; ++e) {
            bool all_zero = true;
            for (std::size_t k = 0; k < 100; ++k)
                if (out.features[e * 100 + k] != 0.0) all_zero = false;
            if (all_zero) ++zeroed_rows;
        }
    }
    const double fraction = double(zeroed_rows) / double(64 * trials);
    REQUIRE(fraction == Catch::Approx(0.10).margin(0.01));
}

TEST_CASE("small grids mask one contiguous temporal segment per electrode") {
    AugmentSpec spec;
    spec.rho = 0.10;
    Rng rng(4);
    Sample s;
    s.electrodes = 3;
    s.timesteps = 100;
    s.features.assign(300, 1.0);
    const Sample out = apply_mask(s, spec, rng);
    for (std::size_t e = 0; e < 3; ++e) {
        std::size_t zeros = 0, first = 100, last = 0;
        for (std::size_t k = 0; k < 100; ++k) {
            if (out.features[e * 100 + k] == 0.0) {
                ++zeros;
                first = std::min(first, k);
                last = std::max(last, k);
            }
        }
        REQUIRE(zeros == 10);  // ceil(0.1 * 100)
        REQUIRE(last - first + 1 == zeros);  // contiguous
    }
}

TEST_CASE("flat vectors are self-masked coordinate-wise") {
    AugmentSpec spec;
    spec.rho = 0.25;
    spec.mode = AugmentMode::self_mask;
    Rng rng(6);
    Sample s;
    s.features.assign(1000, 2.0);
    std::size_t zeros = 0;
    const int trials = 200;
    for (int t = 0; t < trials; ++t) {
        const Sample out = apply_mask(s, spec, rng);
        for (double v : out.features)
            if (v == 0.0) ++zeros;
    }
    const double fraction = double(zeros) / double(1000 * trials);
    REQUIRE(fraction == Catch::Approx(0.25).margin(0.01));
}

TEST_CASE("flat csv minimal file parses") {
    const fs::path dir = scratch_dir();
    const fs::path csv = dir / "mini.csv";
    {
        std::ofstream out(csv);
        out << "domain_id,label,t_index,f0,f1\n";
        out << "0,0,-1,0.5,1.5\n";
        out << "0,1,-1,2.5,3.5\n";
        out << "1,0,-1,-0.25,0.125\n";
    }
    {
        std::ofstream side(dir / "mini.json");
        side << R"({"class_count": 2, "dim": 2})";
    }
    const Dataset ds = load_dataset_csv(csv);
    REQUIRE(ds.samples.size() == 3);
    REQUIRE(ds.feature_dim() == 2);
    REQUIRE(ds.class_count == 2);
    REQUIRE(ds.samples[2].features == std::vector<double>{-0.25, 0.125});
    REQUIRE(ds.by_domain.size() == 2);
}

TEST_CASE("csv round-trip preserves features bitwise") {
    SyntheticSpec spec;
    spec.samples_per_domain = 20;
    spec.dim = 7;
    spec.seed = 8;
    const auto [ds, teacher] = generate_synthetic(spec);

    const fs::path dir = scratch_dir();
    const fs::path csv = dir / "round.csv";
    save_dataset_csv(ds, csv);
    const Dataset back = load_dataset_csv(csv);
    REQUIRE(back.samples.size() == ds.samples.size());
    for (std::size_t i = 0; i < ds.samples.size(); ++i) {
        REQUIRE(back.samples[i].features == ds.samples[i].features);
        REQUIRE(back.samples[i].label == ds.samples[i].label);
        REQUIRE(back.samples[i].domain_id == ds.samples[i].domain_id);
        REQUIRE(back.samples[i].t_index == ds.samples[i].t_index);
    }

    // teacher record round-trip supports later alignment diagnostics
    save_teacher(teacher, teacher_path_for(csv));
    const TeacherRecord t2 = load_teacher(teacher_path_for(csv));
    REQUIRE(t2.w_inv.data == teacher.w_inv.data);
    REQUIRE(t2.lambda == teacher.lambda);
    REQUIRE(t2.domain_group == teacher.domain_group);
}

TEST_CASE("csv validation errors carry the offending line") {
    const fs::path dir = scratch_dir();
    const fs::path csv = dir / "bad.csv";
    {
        std::ofstream out(csv);
        out << "domain_id,label,t_index,f0,f1\n";
        out << "0,0,-1,0.5,1.5\n";
        out << "0,5,-1,2.5,3.5\n";
    }
    {
        std::ofstream side(dir / "bad.json");
        side << R"({"class_count": 2, "dim": 2})";
    }
    try {
        load_dataset_csv(csv);
        FAIL("expected ParseError");
    } catch (const ParseError& e) {
        REQUIRE(std::string(e.what()).find(":3") != std::string::npos);
        REQUIRE(std::string(e.what()).find("label 5") != std::string::npos);
    }

    {
        std::ofstream out(csv);
        out << "domain_id,label,t_index,f0,f1\n";
        out << "0,0,-1,0.5\n";  // short row
    }
    REQUIRE_THROWS_AS(load_dataset_csv(csv), ParseError);

    REQUIRE_THROWS_AS(load_dataset_csv(dir / "missing.csv"), ParseError);
}

TEST_CASE("grid binary round-trip") {
    Dataset ds;
    ds.class_count = 3;
    Rng rng(13);
    for (int i = 0; i < 10; ++i) {
        Sample s;
        s.electrodes = 4;
        s.timesteps = 6;
        s.features.resize(24);
        for (double& v : s.features) v = double(float(rng.normal()));  // f32-representable
        s.label = int(rng.below(3));
        s.domain_id = i % 2;
        s.t_index = i / 2;
        ds.samples.push_back(std::move(s));
    }
    ds.rebuild_index();

    const fs::path dir = scratch_dir();
    const fs::path bin = dir / "grid.bin";
    save_dataset_grid(ds, bin);
    const Dataset back = load_dataset_grid(bin);
    REQUIRE(back.samples.size() == ds.samples.size());
    for (std::size_t i = 0; i < ds.samples.size(); ++i) {
        REQUIRE(back.samples[i].features == ds.samples[i].features);
        REQUIRE(back.samples[i].electrodes == 4);
        REQUIRE(back.samples[i].timesteps == 6);
        REQUIRE(back.samples[i].t_index == ds.samples[i].t_index);
    }

    REQUIRE(load_dataset(bin, DatasetFormat::grid_binary).samples.size() == 10);
}

TEST_CASE("dataset invariant violations are caught") {
    Dataset ds;
    ds.class_count = 2;
    Sample a;
    a.features = {1.0};
    a.domain_id = 0;
    a.t_index = 5;
    ds.samples.push_back(a);
    ds.samples.push_back(a);  // duplicate (domain, t_index)
    REQUIRE_THROWS_AS(ds.rebuild_index(), ConfigError);

    Dataset bad;
    bad.class_count = 2;
    Sample b;
    b.features = {1.0};
    b.label = 2;  // out of range
    bad.samples.push_back(b);
    REQUIRE_THROWS_AS(bad.validate(), ConfigError);
}
