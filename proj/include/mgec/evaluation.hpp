#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <json.hpp>

#include "mgec/data.hpp"
#include "mgec/io.hpp"
#include "mgec/metrics.hpp"
#include "mgec/synthetic.hpp"
#include "mgec/training.hpp"

namespace mgec {

struct Fold {
    std::size_t id = 0;
    std::vector<int> train_domains;
    std::vector<int> test_domains;
};

// One fold per domain, ascending domain id; together the test sets partition
// the dataset exactly.
inline std::vector<Fold> lodo_folds(const Dataset& ds) {
    const auto ids = ds.domain_ids();
    if (ids.size() < 2) throw ConfigError("lodo_folds: need at least 2 domains");
    std::vector<Fold> folds;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        Fold f;
        f.id = i;
        f.test_domains = {ids[i]};
        for (std::size_t k = 0; k < ids.size(); ++k)
            if (k != i) f.train_domains.push_back(ids[k]);
        folds.push_back(std::move(f));
    }
    return folds;
}

// Domains shuffled seed-deterministically and split into k near-equal groups.
inline std::vector<Fold> kfold_by_domain(const Dataset& ds, std::size_t k, std::uint64_t seed) {
    auto ids = ds.domain_ids();
    if (k < 2) throw ConfigError("kfold_by_domain: k must be >= 2");
    if (k > ids.size()) throw ConfigError("kfold_by_domain: k exceeds domain count");
    Rng rng(derive_seed(seed, {0xF01D}));
    rng.shuffle(ids);
    std::vector<Fold> folds(k);
    for (std::size_t i = 0; i < ids.size(); ++i) folds[i % k].test_domains.push_back(ids[i]);
    for (std::size_t f = 0; f < k; ++f) {
        folds[f].id = f;
        std::sort(folds[f].test_domains.begin(), folds[f].test_domains.end());
        for (int id : ids) {
            const auto& t = folds[f].test_domains;
            if (std::find(t.begin(), t.end(), id) == t.end()) folds[f].train_domains.push_back(id);
        }
        std::sort(folds[f].train_domains.begin(), folds[f].train_domains.end());
    }
    return folds;
}

inline Dataset select_domains(const Dataset& ds, std::span<const int> domains) {
    std::vector<std::size_t> idx;
    for (int d : domains) {
        const auto it = ds.by_domain.find(d);
        if (it == ds.by_domain.end()) throw ConfigError("unknown domain id " + std::to_string(d));
        idx.insert(idx.end(), it->second.begin(), it->second.end());
    }
    std::sort(idx.begin(), idx.end());
    return subset(ds, idx);
}

enum class Ablation { full, shared_only, routed_only };

inline const char* to_string(Ablation a) {
    switch (a) {
        case Ablation::full: return "full";
        case Ablation::shared_only: return "shared_only";
        default: return "routed_only";
    }
}

inline TrainMode train_mode_for(Ablation a) {
    switch (a) {
        case Ablation::full: return TrainMode::full;
        case Ablation::shared_only: return TrainMode::shared_only;
        default: return TrainMode::routed_only;
    }
}

struct FoldReport {
    std::size_t fold_id = 0;
    std::vector<int> test_domains;
    std::string ablation;
    std::optional<double> acc_shared, bacc_shared;
    std::optional<double> acc_routed, bacc_routed;
    std::optional<double> acc_fused, bacc_fused;
    std::size_t best_epoch = 0;
    double best_val_acc = 0.0;
    double runtime_seconds = 0.0;
    bool chance_flag = false;             // fused (or only head) below 1/C - 0.05
    bool fused_below_min_branch = false;  // logged, not fatal
    std::vector<EpochRecord> history;

    // The headline metric: the fused head when present, otherwise whichever
    // single head was trained.
    double primary_accuracy() const {
        if (acc_fused) return *acc_fused;
        if (acc_shared) return *acc_shared;
        return *acc_routed;
    }
    double primary_balanced_accuracy() const {
        if (bacc_fused) return *bacc_fused;
        if (bacc_shared) return *bacc_shared;
        return *bacc_routed;
    }
};

inline nlohmann::json to_json(const FoldReport& r) {
    nlohmann::json j;
    j["fold_id"] = r.fold_id;
    j["test_domains"] = r.test_domains;
    j["ablation"] = r.ablation;
    auto put = [&](const char* key, const std::optional<double>& v) {
        if (v) j[key] = *v;
    };
    put("acc_shared", r.acc_shared);
    put("bacc_shared", r.bacc_shared);
    put("acc_routed", r.acc_routed);
    put("bacc_routed", r.bacc_routed);
    put("acc_fused", r.acc_fused);
    put("bacc_fused", r.bacc_fused);
    j["best_epoch"] = r.best_epoch;
    j["best_val_acc"] = r.best_val_acc;
    j["runtime_seconds"] = r.runtime_seconds;
    j["chance_flag"] = r.chance_flag;
    j["fused_below_min_branch"] = r.fused_below_min_branch;
    return j;
}

// Trains on the fold's training domains (with a 10% stratified validation
// split) and reports test metrics for every head the ablation provides.
inline FoldReport run_fold(const Dataset& ds, const Fold& fold, const TrainConfig& cfg,
                           Ablation ablation, const TeacherRecord* teacher = nullptr) {
    const auto t0 = std::chrono::steady_clock::now();
    const Dataset train_pool = select_domains(ds, fold.train_domains);
    const Dataset test_set = select_domains(ds, fold.test_domains);
    auto [train_set, val_set] = make_validation_split(train_pool, 0.10, cfg.seed);

    TrainResult tr = train(train_set, val_set, cfg, train_mode_for(ablation), teacher);

    FoldReport rep;
    rep.fold_id = fold.id;
    rep.test_domains = fold.test_domains;
    rep.ablation = to_string(ablation);
    rep.best_epoch = tr.best_epoch;
    rep.best_val_acc = tr.best_val_acc;
    rep.history = std::move(tr.history);

    std::vector<int> labels(test_set.samples.size());
    for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = test_set.samples[i].label;
    const SplitPredictions pred = predict(tr.best, test_set);
    if (tr.best.shared) {
        rep.acc_shared = accuracy(pred.shared, labels);
        rep.bacc_shared = balanced_accuracy(pred.shared, labels, ds.class_count);
    }
    if (tr.best.routed) {
        rep.acc_routed = accuracy(pred.routed, labels);
        rep.bacc_routed = balanced_accuracy(pred.routed, labels, ds.class_count);
    }
    if (tr.best.shared && tr.best.routed) {
        rep.acc_fused = accuracy(pred.fused, labels);
        rep.bacc_fused = balanced_accuracy(pred.fused, labels, ds.class_count);
        rep.fused_below_min_branch = *rep.acc_fused < std::min(*rep.acc_shared, *rep.acc_routed);
    }
    rep.chance_flag = rep.primary_accuracy() < 1.0 / double(ds.class_count) - 0.05;
    rep.runtime_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return rep;
}

// --- lambda sweep -----------------------------------------------------------

struct SweepRow {
    double lambda = 0.0;
    std::uint64_t seed = 0;
    std::size_t fold = 0;
    std::string ablation;
    double accuracy = 0.0;
    double balanced_accuracy = 0.0;
    // per-head accuracies of the same checkpoint, present on `full` rows
    std::optional<double> acc_shared_head;
    std::optional<double> acc_routed_head;
};

struct SweepCellStats {
    double mean_acc = 0.0, std_acc = 0.0;
    double mean_bacc = 0.0, std_bacc = 0.0;
};

struct SweepReport {
    std::vector<double> lambda_grid;
    std::vector<std::uint64_t> seeds;
    std::vector<std::string> ablations;
    // cell key: (lambda index, ablation name); mean/std over seeds of the
    // per-seed fold-averaged metric
    std::map<std::pair<std::size_t, std::string>, SweepCellStats> cells;
    std::vector<SweepRow> rows;

    double mean_accuracy(std::size_t lambda_idx, const std::string& ablation) const {
        return cells.at({lambda_idx, ablation}).mean_acc;
    }
};

inline nlohmann::json to_json(const SweepReport& r) {
    nlohmann::json j;
    j["lambda_grid"] = r.lambda_grid;
    j["seeds"] = r.seeds;
    j["ablations"] = r.ablations;
    nlohmann::json cells = nlohmann::json::array();
    for (const auto& [key, c] : r.cells) {
        cells.push_back({{"lambda", r.lambda_grid[key.first]},
                         {"ablation", key.second},
                         {"mean_accuracy", c.mean_acc},
                         {"std_accuracy", c.std_acc},
                         {"mean_balanced_accuracy", c.mean_bacc},
                         {"std_balanced_accuracy", c.std_bacc}});
    }
    j["cells"] = std::move(cells);
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& row : r.rows) {
        nlohmann::json rj{{"lambda", row.lambda},
                          {"seed", row.seed},
                          {"fold", row.fold},
                          {"ablation", row.ablation},
                          {"accuracy", row.accuracy},
                          {"balanced_accuracy", row.balanced_accuracy}};
        if (row.acc_shared_head) rj["acc_shared_head"] = *row.acc_shared_head;
        if (row.acc_routed_head) rj["acc_routed_head"] = *row.acc_routed_head;
        rows.push_back(std::move(rj));
    }
    j["rows"] = std::move(rows);
    return j;
}

inline std::string sweep_csv(const SweepReport& r) {
    std::string out = "lambda,seed,fold,ablation,accuracy,balanced_accuracy\n";
    for (const auto& row : r.rows) {
        out += ioutil::format_double(row.lambda);
        out += ',' + std::to_string(row.seed);
        out += ',' + std::to_string(row.fold);
        out += ',' + row.ablation;
        out += ',' + ioutil::format_double(row.accuracy);
        out += ',' + ioutil::format_double(row.balanced_accuracy);
        out += '\n';
    }
    return out;
}

namespace detail {

// Fixed-size worker pool over independent cells; results land in
// pre-allocated slots, so aggregation is identical for any worker count.
template <typename Work>
inline void parallel_for(std::size_t count, std::size_t jobs, Work&& work) {
    jobs = std::max<std::size_t>(1, std::min(jobs, count));
    if (jobs == 1) {
        for (std::size_t i = 0; i < count; ++i) work(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    std::exception_ptr error;
    std::mutex error_mutex;
    for (std::size_t w = 0; w < jobs; ++w) {
        pool.emplace_back([&]() {
            for (;;) {
                const std::size_t i = next.fetch_add(1);
                if (i >= count) return;
                try {
                    work(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(error_mutex);
                    if (!error) error = std::current_exception();
                    return;
                }
            }
        });
    }
    for (auto& t : pool) t.join();
    if (error) std::rethrow_exception(error);
}

} // namespace detail

// For each (lambda, seed): regenerate the synthetic dataset, run every LODO
// fold for every requested ablation, and aggregate fold-averaged accuracies
// per seed. Cells own RNG streams keyed by (seed, fold, lambda), so parallel
// and serial execution aggregate identically.
inline SweepReport lambda_sweep(const SyntheticSpec& spec_template, std::span<const double> grid,
                                std::span<const std::uint64_t> seeds, const TrainConfig& cfg,
                                std::span<const Ablation> ablations, std::size_t jobs = 1) {
    for (double l : grid)
        if (l < 0.0 || l > 1.0) throw ConfigError("lambda_sweep: grid values must lie in [0, 1]");
    if (grid.empty() || seeds.empty() || ablations.empty())
        throw ConfigError("lambda_sweep: empty grid, seed list or ablation list");

    struct Cell {
        std::size_t lambda_idx, seed_idx, fold_id, ablation_idx;
    };

    // Datasets are shared per (lambda, seed) cell group.
    struct Generated {
        Dataset ds;
        TeacherRecord teacher;
        std::vector<Fold> folds;
    };
    std::vector<Generated> data(grid.size() * seeds.size());
    detail::parallel_for(data.size(), jobs, [&](std::size_t i) {
        const std::size_t li = i / seeds.size();
        const std::size_t si = i % seeds.size();
        SyntheticSpec spec = spec_template;
        spec.lambda = grid[li];
        spec.seed = seeds[si];
        auto [ds, teacher] = generate_synthetic(spec);
        data[i].folds = lodo_folds(ds);
        data[i].ds = std::move(ds);
        data[i].teacher = std::move(teacher);
    });

    const std::size_t folds_per_cell = data.front().folds.size();
    std::vector<Cell> cells;
    for (std::size_t li = 0; li < grid.size(); ++li)
        for (std::size_t si = 0; si < seeds.size(); ++si)
            for (std::size_t f = 0; f < folds_per_cell; ++f)
                for (std::size_t a = 0; a < ablations.size(); ++a) cells.push_back({li, si, f, a});

    std::vector<FoldReport> reports(cells.size());
    detail::parallel_for(cells.size(), jobs, [&](std::size_t i) {
        const Cell& c = cells[i];
        const Generated& g = data[c.lambda_idx * seeds.size() + c.seed_idx];
        TrainConfig cell_cfg = cfg;
        cell_cfg.seed = derive_seed(seeds[c.seed_idx],
                                    {0x5EED, c.lambda_idx, c.fold_id,
                                     static_cast<std::uint64_t>(ablations[c.ablation_idx])});
        reports[i] = run_fold(g.ds, g.folds[c.fold_id], cell_cfg, ablations[c.ablation_idx],
                              &g.teacher);
        reports[i].history.clear();  // keep sweep memory flat
    });

    SweepReport out;
    out.lambda_grid.assign(grid.begin(), grid.end());
    out.seeds.assign(seeds.begin(), seeds.end());
    for (Ablation a : ablations) out.ablations.push_back(to_string(a));

    for (std::size_t i = 0; i < cells.size(); ++i) {
        const Cell& c = cells[i];
        SweepRow row{grid[c.lambda_idx],
                     seeds[c.seed_idx],
                     c.fold_id,
                     to_string(ablations[c.ablation_idx]),
                     reports[i].primary_accuracy(),
                     reports[i].primary_balanced_accuracy(),
                     {},
                     {}};
        if (ablations[c.ablation_idx] == Ablation::full) {
            row.acc_shared_head = reports[i].acc_shared;
            row.acc_routed_head = reports[i].acc_routed;
        }
        out.rows.push_back(std::move(row));
    }

    for (std::size_t li = 0; li < grid.size(); ++li) {
        for (std::size_t a = 0; a < ablations.size(); ++a) {
            std::vector<double> acc_per_seed(seeds.size(), 0.0), bacc_per_seed(seeds.size(), 0.0);
            for (std::size_t i = 0; i < cells.size(); ++i) {
                const Cell& c = cells[i];
                if (c.lambda_idx != li || c.ablation_idx != a) continue;
                acc_per_seed[c.seed_idx] += reports[i].primary_accuracy() / double(folds_per_cell);
                bacc_per_seed[c.seed_idx] +=
                    reports[i].primary_balanced_accuracy() / double(folds_per_cell);
            }
            SweepCellStats stats;
            const double n = double(seeds.size());
            for (double v : acc_per_seed) stats.mean_acc += v / n;
            for (double v : bacc_per_seed) stats.mean_bacc += v / n;
            for (double v : acc_per_seed)
                stats.std_acc += (v - stats.mean_acc) * (v - stats.mean_acc) / n;
            for (double v : bacc_per_seed)
                stats.std_bacc += (v - stats.mean_bacc) * (v - stats.mean_bacc) / n;
            stats.std_acc = std::sqrt(stats.std_acc);
            stats.std_bacc = std::sqrt(stats.std_bacc);
            out.cells[{li, out.ablations[a]}] = stats;
        }
    }
    return out;
}

} // namespace mgec
