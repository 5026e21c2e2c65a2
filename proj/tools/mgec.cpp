// mgec: synthetic-benchmark generation, co-training, cross-validation and
// gradient verification from the command line.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "mgec/mgec.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 1;
constexpr int kExitRuntime = 2;

std::size_t effective_jobs(std::size_t requested) {
    std::size_t jobs = requested == 0 ? std::max(1u, std::thread::hardware_concurrency()) : requested;
    if (const char* cap = std::getenv("MGEC_THREADS")) {
        const auto parsed = std::strtoull(cap, nullptr, 10);
        if (parsed > 0) jobs = std::min<std::size_t>(jobs, parsed);
    }
    return jobs;
}

// Config file support: --config names a JSON object whose keys match the long
// option names; explicit command-line flags win over file values, file values
// win over defaults.
void apply_config_file(CLI::App* cmd, const std::string& path) {
    const json j = mgec::ioutil::load_json_file(path);
    if (!j.is_object()) throw mgec::ConfigError(path + ": config file must hold a JSON object");
    for (const auto& [key, value] : j.items()) {
        CLI::Option* opt = cmd->get_option_no_throw("--" + key);
        if (!opt) throw mgec::ConfigError(path + ": unknown option '" + key + "'");
        if (opt->count() > 0) continue;  // command line wins
        const auto as_text = [](const json& v) {
            return v.is_string() ? v.get<std::string>() : v.dump();
        };
        if (value.is_array()) {
            for (const auto& v : value) opt->add_result(as_text(v));
        } else {
            opt->add_result(as_text(value));
        }
        opt->run_callback();
    }
}

struct GenOptions {
    mgec::SyntheticSpec spec;
    std::string out = "synthetic.csv";
};

struct TrainOptions {
    mgec::TrainConfig cfg;
    std::string data;
    std::string out_dir = "run";
    std::optional<int> test_domain;
    std::string format = "auto";
    std::string ablation = "full";
};

struct EvalOptions {
    mgec::TrainConfig cfg;
    std::string data;
    std::string out_dir = "eval";
    std::string cv = "lodo";
    std::size_t k = 10;
    std::string ablation = "full";
    std::size_t jobs = 1;
    std::string format = "auto";
};

struct SweepOptions {
    mgec::SyntheticSpec spec;
    mgec::TrainConfig cfg;
    std::vector<double> lambdas = {0.0, 0.25, 0.5, 0.75, 1.0};
    std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4};
    std::vector<std::string> ablations = {"full", "shared_only", "routed_only"};
    std::string out_dir = "sweep";
    std::size_t jobs = 1;
};

struct GradcheckOptions {
    mgec::LossCheckOptions opt;
};

mgec::DatasetFormat detect_format(const std::string& flag, const std::string& path) {
    if (flag == "csv") return mgec::DatasetFormat::csv;
    if (flag == "grid-binary") return mgec::DatasetFormat::grid_binary;
    if (flag == "auto")
        return fs::path(path).extension() == ".bin" ? mgec::DatasetFormat::grid_binary
                                                    : mgec::DatasetFormat::csv;
    throw mgec::ConfigError("unknown dataset format '" + flag + "'");
}

mgec::Ablation parse_ablation(const std::string& s) {
    if (s == "full") return mgec::Ablation::full;
    if (s == "shared_only") return mgec::Ablation::shared_only;
    if (s == "routed_only") return mgec::Ablation::routed_only;
    throw mgec::ConfigError("unknown ablation '" + s + "'");
}

json spec_to_json(const mgec::SyntheticSpec& s) {
    return json{{"group_count", s.group_count},
                {"domains_per_group", s.domains_per_group},
                {"samples_per_domain", s.samples_per_domain},
                {"dim", s.dim},
                {"classes", s.class_count},
                {"lambda", s.lambda},
                {"sigma_group", s.sigma_group},
                {"sigma_domain", s.sigma_domain},
                {"sigma_sample", s.sigma_sample},
                {"sigma_w_base", s.sigma_w_base},
                {"sigma_w_group", s.sigma_w_group},
                {"sigma_w_domain", s.sigma_w_domain},
                {"seed", s.seed}};
}

json train_config_to_json(const mgec::TrainConfig& c) {
    return json{{"batch_size", c.batch_size},
                {"max_epochs", c.max_epochs},
                {"patience", c.patience},
                {"lr", c.lr},
                {"weight_decay", c.weight_decay},
                {"warmup_epochs", c.warmup_epochs},
                {"experts", c.experts},
                {"top_k", c.top_k},
                {"gate_dim", c.gate_dim},
                {"extractor_hidden", c.extractor_hidden},
                {"use_sl", c.use_sl},
                {"use_bl", c.use_bl},
                {"rho", c.augment.rho},
                {"neighbor_offset", c.augment.neighbor_offset},
                {"augment_mode",
                 c.augment.mode == mgec::AugmentMode::temporal_neighbor ? "temporal-neighbor"
                                                                        : "self-mask"},
                {"seed", c.seed}};
}

void add_spec_flags(CLI::App* cmd, mgec::SyntheticSpec& spec) {
    cmd->add_option("--groups", spec.group_count, "Number of domain groups");
    cmd->add_option("--domains-per-group", spec.domains_per_group,
                    "Domain count per group (one entry per group)");
    cmd->add_option("--samples-per-domain", spec.samples_per_domain, "Samples per domain");
    cmd->add_option("--dim", spec.dim, "Feature dimension");
    cmd->add_option("--classes", spec.class_count, "Class count");
    cmd->add_option("--lambda", spec.lambda, "Weight of the domain-independent teacher component");
    cmd->add_option("--sigma-group", spec.sigma_group, "Group center scale");
    cmd->add_option("--sigma-domain", spec.sigma_domain, "Domain perturbation scale");
    cmd->add_option("--sigma-sample", spec.sigma_sample, "Within-domain sample scale");
    cmd->add_option("--sigma-w-base", spec.sigma_w_base, "Shared teacher weight scale");
    cmd->add_option("--sigma-w-group", spec.sigma_w_group, "Group teacher perturbation scale");
    cmd->add_option("--sigma-w-domain", spec.sigma_w_domain, "Domain teacher perturbation scale");
    cmd->add_option("--seed", spec.seed, "Generator seed");
}

void add_train_flags(CLI::App* cmd, mgec::TrainConfig& cfg, bool with_seed = true) {
    cmd->add_option("--batch-size", cfg.batch_size, "Mini-batch size");
    cmd->add_option("--max-epochs", cfg.max_epochs, "Maximum training epochs");
    cmd->add_option("--patience", cfg.patience, "Early-stopping patience in epochs");
    cmd->add_option("--lr", cfg.lr, "Adam learning rate (both models)");
    cmd->add_option("--weight-decay", cfg.weight_decay, "Decoupled weight decay");
    cmd->add_option("--warmup-epochs", cfg.warmup_epochs, "Epochs before mutual guidance");
    cmd->add_option("--experts", cfg.experts, "Number of routed experts M");
    cmd->add_option("--top-k", cfg.top_k, "Active experts per sample K");
    cmd->add_option("--gate-dim", cfg.gate_dim, "Router gate dimension");
    cmd->add_option("--hidden", cfg.extractor_hidden, "Extractor hidden widths");
    cmd->add_flag("--no-sl,!--sl", cfg.use_sl, "Disable the specialization loss")
        ->default_val(true);
    cmd->add_flag("--no-bl,!--bl", cfg.use_bl, "Disable the balance loss")->default_val(true);
    cmd->add_option("--rho", cfg.augment.rho, "Masking probability");
    cmd->add_option("--neighbor-offset", cfg.augment.neighbor_offset, "Temporal neighbor offset T");
    if (with_seed) cmd->add_option("--seed", cfg.seed, "Training seed");
}

std::pair<mgec::Dataset, std::optional<mgec::TeacherRecord>> load_with_teacher(
    const std::string& data, const std::string& format) {
    mgec::Dataset ds = mgec::load_dataset(data, detect_format(format, data));
    std::optional<mgec::TeacherRecord> teacher;
    const auto tp = mgec::teacher_path_for(data);
    if (fs::exists(tp)) teacher = mgec::load_teacher(tp);
    return {std::move(ds), std::move(teacher)};
}

int cmd_gen(const GenOptions& o) {
    auto [ds, teacher] = mgec::generate_synthetic(o.spec);
    const fs::path csv = o.out;
    if (csv.has_parent_path()) fs::create_directories(csv.parent_path());
    mgec::save_dataset_csv(ds, csv);
    mgec::save_teacher(teacher, mgec::teacher_path_for(csv));

    std::cout << "wrote " << ds.samples.size() << " samples, " << ds.by_domain.size()
              << " domains to " << csv.string() << "\n";
    std::cout << "class fractions:";
    for (double f : teacher.class_fractions) std::printf(" %.3f", f);
    std::cout << "\n";
    if (teacher.balance_retries > 0)
        std::cout << "note: class balance retried " << teacher.balance_retries
                  << " time(s), seed_used=" << teacher.seed_used << "\n";
    return kExitOk;
}

int cmd_train(const TrainOptions& o) {
    auto [ds, teacher] = load_with_teacher(o.data, o.format);

    fs::create_directories(o.out_dir);
    const fs::path run_dir = o.out_dir;

    json config = train_config_to_json(o.cfg);
    config["data"] = o.data;
    config["ablation"] = o.ablation;
    if (o.test_domain) config["test_domain"] = *o.test_domain;
    mgec::ioutil::write_text_file(run_dir / "config.json", config.dump(2) + "\n");

    mgec::Dataset pool = ds;
    std::optional<mgec::Dataset> test_set;
    if (o.test_domain) {
        std::vector<int> train_domains;
        for (int id : ds.domain_ids())
            if (id != *o.test_domain) train_domains.push_back(id);
        if (train_domains.size() == ds.by_domain.size())
            throw mgec::ConfigError("test domain " + std::to_string(*o.test_domain) +
                                    " not present in dataset");
        pool = mgec::select_domains(ds, train_domains);
        test_set = mgec::select_domains(ds, std::vector<int>{*o.test_domain});
    }
    auto [train_set, val_set] = mgec::make_validation_split(pool, 0.10, o.cfg.seed);

    std::ofstream jsonl(run_dir / "epochs.jsonl", std::ios::binary);
    if (!jsonl) throw mgec::ParseError("cannot open " + (run_dir / "epochs.jsonl").string());

    const mgec::TrainMode mode = mgec::train_mode_for(parse_ablation(o.ablation));
    mgec::TrainResult result =
        mgec::train(train_set, val_set, o.cfg, mode, teacher ? &*teacher : nullptr, &jsonl);
    jsonl.close();

    json meta{{"best_epoch", result.best_epoch},
              {"best_val_acc", result.best_val_acc},
              {"seed", o.cfg.seed}};
    mgec::save_checkpoint(run_dir / "checkpoint.json", result.best, config, meta);

    std::cout << "best epoch " << result.best_epoch << ", validation accuracy "
              << result.best_val_acc << "\n";

    if (test_set) {
        std::vector<int> labels(test_set->samples.size());
        for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = test_set->samples[i].label;
        const mgec::SplitPredictions pred = mgec::predict(result.best, *test_set);
        json fold;
        fold["test_domain"] = *o.test_domain;
        if (result.best.shared) {
            fold["acc_shared"] = mgec::accuracy(pred.shared, labels);
            fold["bacc_shared"] = mgec::balanced_accuracy(pred.shared, labels, ds.class_count);
        }
        if (result.best.routed) {
            fold["acc_routed"] = mgec::accuracy(pred.routed, labels);
            fold["bacc_routed"] = mgec::balanced_accuracy(pred.routed, labels, ds.class_count);
        }
        if (result.best.shared && result.best.routed) {
            fold["acc_fused"] = mgec::accuracy(pred.fused, labels);
            fold["bacc_fused"] = mgec::balanced_accuracy(pred.fused, labels, ds.class_count);
        }
        mgec::ioutil::write_text_file(run_dir / "fold_report.json", fold.dump(2) + "\n");
        std::cout << "test metrics written to " << (run_dir / "fold_report.json").string() << "\n";
    }
    return kExitOk;
}

int cmd_eval(const EvalOptions& o) {
    auto [ds, teacher] = load_with_teacher(o.data, o.format);
    fs::create_directories(o.out_dir);

    std::vector<mgec::Fold> folds;
    if (o.cv == "lodo") folds = mgec::lodo_folds(ds);
    else if (o.cv == "kfold") folds = mgec::kfold_by_domain(ds, o.k, o.cfg.seed);
    else throw mgec::ConfigError("unknown cv scheme '" + o.cv + "'");

    const mgec::Ablation ablation = parse_ablation(o.ablation);
    const std::size_t jobs = effective_jobs(o.jobs);

    std::vector<mgec::FoldReport> reports(folds.size());
    mgec::detail::parallel_for(folds.size(), jobs, [&](std::size_t i) {
        mgec::TrainConfig cfg = o.cfg;
        cfg.seed = mgec::derive_seed(o.cfg.seed, {0xF01D5, folds[i].id});
        reports[i] = mgec::run_fold(ds, folds[i], cfg, ablation, teacher ? &*teacher : nullptr);
    });

    json out = json::array();
    std::string csv = "fold,test_domains,ablation,accuracy,balanced_accuracy\n";
    double mean_acc = 0;
    for (const auto& r : reports) {
        out.push_back(mgec::to_json(r));
        std::string doms;
        for (std::size_t k = 0; k < r.test_domains.size(); ++k)
            doms += (k ? ";" : "") + std::to_string(r.test_domains[k]);
        csv += std::to_string(r.fold_id) + ',' + doms + ',' + r.ablation + ',' +
               mgec::ioutil::format_double(r.primary_accuracy()) + ',' +
               mgec::ioutil::format_double(r.primary_balanced_accuracy()) + '\n';
        mean_acc += r.primary_accuracy() / double(reports.size());
    }
    mgec::ioutil::write_text_file(fs::path(o.out_dir) / "folds.json", out.dump(2) + "\n");
    mgec::ioutil::write_text_file(fs::path(o.out_dir) / "folds.csv", csv);
    std::cout << o.cv << " over " << folds.size() << " folds (" << o.ablation
              << "): mean accuracy " << mean_acc << "\n";
    return kExitOk;
}

int cmd_sweep(const SweepOptions& o) {
    std::vector<mgec::Ablation> ablations;
    for (const auto& a : o.ablations) ablations.push_back(parse_ablation(a));
    const std::size_t jobs = effective_jobs(o.jobs);

    const mgec::SweepReport report =
        mgec::lambda_sweep(o.spec, o.lambdas, o.seeds, o.cfg, ablations, jobs);

    fs::create_directories(o.out_dir);
    json meta = mgec::to_json(report);
    meta["spec"] = spec_to_json(o.spec);
    meta["train_config"] = train_config_to_json(o.cfg);
    mgec::ioutil::write_text_file(fs::path(o.out_dir) / "sweep.json", meta.dump(2) + "\n");
    mgec::ioutil::write_text_file(fs::path(o.out_dir) / "sweep.csv", mgec::sweep_csv(report));

    for (std::size_t li = 0; li < report.lambda_grid.size(); ++li) {
        std::cout << "lambda " << report.lambda_grid[li] << ":";
        for (const auto& a : report.ablations) {
            const auto& c = report.cells.at({li, a});
            std::printf(" %s %.3f+-%.3f", a.c_str(), c.mean_acc, c.std_acc);
        }
        std::cout << "\n";
    }
    return kExitOk;
}

int cmd_gradcheck(const GradcheckOptions& o) {
    const auto results = mgec::run_loss_gradchecks(o.opt);
    bool all_pass = true;
    std::printf("%-22s %-6s %12s  probes kinks\n", "loss", "pass", "max_rel_err");
    for (const auto& r : results) {
        all_pass = all_pass && r.report.pass;
        std::printf("%-22s %-6s %12.3e  %6zu %5zu\n", r.name.c_str(),
                    r.report.pass ? "yes" : "NO", r.report.max_rel_err, r.report.probes,
                    r.report.kinks_skipped);
    }
    if (!all_pass) {
        std::cout << "gradient check FAILED\n";
        return kExitRuntime;
    }
    std::cout << "all gradient checks passed\n";
    return kExitOk;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Mutual-guided expert collaboration: shared + routed experts on synthetic domains"};
    app.require_subcommand(1);

    GenOptions gen;
    TrainOptions train;
    EvalOptions eval;
    SweepOptions sweep;
    GradcheckOptions gradcheck;
    std::string config_path;

    CLI::App* cgen = app.add_subcommand("gen", "Generate a synthetic dataset");
    add_spec_flags(cgen, gen.spec);
    cgen->add_option("--out", gen.out, "Output CSV path");
    cgen->add_option("--config", config_path, "JSON config file");

    CLI::App* ctrain = app.add_subcommand("train", "Train on a dataset");
    ctrain->add_option("--data", train.data, "Dataset path (.csv or .bin)")->required();
    ctrain->add_option("--out", train.out_dir, "Run directory");
    ctrain->add_option("--test-domain", train.test_domain,
                       "Hold this domain out as the test set");
    ctrain->add_option("--format", train.format, "Dataset format: auto|csv|grid-binary");
    ctrain->add_option("--ablation", train.ablation, "full|shared_only|routed_only");
    add_train_flags(ctrain, train.cfg);
    ctrain->add_option("--config", config_path, "JSON config file");

    CLI::App* ceval = app.add_subcommand("eval", "Cross-validate on a dataset");
    ceval->add_option("--data", eval.data, "Dataset path")->required();
    ceval->add_option("--out", eval.out_dir, "Output directory");
    ceval->add_option("--cv", eval.cv, "lodo|kfold");
    ceval->add_option("--k", eval.k, "Fold count for kfold");
    ceval->add_option("--ablation", eval.ablation, "full|shared_only|routed_only");
    ceval->add_option("--jobs", eval.jobs, "Parallel fold workers (0 = all cores)");
    ceval->add_option("--format", eval.format, "Dataset format: auto|csv|grid-binary");
    add_train_flags(ceval, eval.cfg);
    ceval->add_option("--config", config_path, "JSON config file");

    CLI::App* csweep = app.add_subcommand("sweep", "Lambda sweep over synthetic datasets");
    add_spec_flags(csweep, sweep.spec);
    csweep->add_option("--lambdas", sweep.lambdas, "Lambda grid");
    csweep->add_option("--seeds", sweep.seeds, "Seed list");
    csweep->add_option("--ablations", sweep.ablations, "Ablation list");
    csweep->add_option("--out", sweep.out_dir, "Output directory");
    csweep->add_option("--jobs", sweep.jobs, "Parallel cell workers (0 = all cores)");
    add_train_flags(csweep, sweep.cfg, false);
    csweep->add_option("--train-seed", sweep.cfg.seed, "Base training seed");
    csweep->add_option("--config", config_path, "JSON config file");

    CLI::App* cgrad = app.add_subcommand("gradcheck", "Verify analytic gradients");
    cgrad->add_option("--probes", gradcheck.opt.probes, "Probed coordinates per loss");
    cgrad->add_option("--fd-step", gradcheck.opt.h, "Finite-difference step");
    cgrad->add_option("--tol", gradcheck.opt.tol, "Relative error tolerance");
    cgrad->add_option("--seed", gradcheck.opt.seed, "Probe seed");
    cgrad->add_flag("--corrupt", gradcheck.opt.corrupt,
                    "Plant a gradient defect (the check must then fail)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);  // --help
        app.exit(e);
        return kExitConfig;
    }

    try {
        CLI::App* sub = app.get_subcommands().front();
        if (!config_path.empty()) apply_config_file(sub, config_path);
        if (sub == cgen) return cmd_gen(gen);
        if (sub == ctrain) return cmd_train(train);
        if (sub == ceval) return cmd_eval(eval);
        if (sub == csweep) return cmd_sweep(sweep);
        return cmd_gradcheck(gradcheck);
    } catch (const mgec::ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const mgec::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "runtime error: " << e.what() << "\n";
        return kExitRuntime;
    }
}
