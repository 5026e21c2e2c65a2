#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "mgec/adam.hpp"
#include "mgec/backprop.hpp"
#include "mgec/data.hpp"
#include "mgec/errors.hpp"
#include "mgec/metrics.hpp"
#include "mgec/models.hpp"
#include "mgec/synthetic.hpp"

namespace mgec {

struct TrainConfig {
    std::size_t batch_size = 256;
    std::size_t max_epochs = 100;
    std::size_t patience = 10;
    double lr = 1e-4;
    double weight_decay = 5e-4;
    std::size_t warmup_epochs = 5;   // epochs before mutual guidance starts
    std::size_t experts = 5;         // M
    std::size_t top_k = 1;           // K
    std::size_t gate_dim = 32;       // d_r
    std::vector<std::size_t> extractor_hidden = {128, 64};
    bool use_sl = true;
    bool use_bl = true;
    AugmentSpec augment;
    std::uint64_t seed = 0;

    void validate() const {
        if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
        if (max_epochs < 1) throw ConfigError("train: max_epochs must be >= 1");
        if (patience >= max_epochs) throw ConfigError("train: patience must be < max_epochs");
        if (warmup_epochs >= max_epochs) throw ConfigError("train: warmup_epochs must be < max_epochs");
        if (top_k < 1 || top_k > experts) throw ConfigError("train: need 1 <= top_k <= experts");
        if (extractor_hidden.empty()) throw ConfigError("train: extractor needs at least one layer");
        if (lr < 0) throw ConfigError("train: lr must be >= 0");
        if (weight_decay < 0) throw ConfigError("train: weight_decay must be >= 0");
        augment.validate();
    }
};

enum class TrainMode { full, shared_only, routed_only };

inline const char* to_string(TrainMode m) {
    switch (m) {
        case TrainMode::full: return "full";
        case TrainMode::shared_only: return "shared_only";
        default: return "routed_only";
    }
}

struct EpochRecord {
    std::size_t epoch = 0;
    std::string phase;  // eval | warmup | mutual
    std::map<std::string, double> shared_losses;
    std::map<std::string, double> routed_losses;
    double val_acc_shared = std::numeric_limits<double>::quiet_NaN();
    double val_acc_routed = std::numeric_limits<double>::quiet_NaN();
    double val_acc_fused = std::numeric_limits<double>::quiet_NaN();
    double eps_shared = std::numeric_limits<double>::quiet_NaN();
    double eps_routed = std::numeric_limits<double>::quiet_NaN();
    std::vector<double> expert_load;
    // entropy of each subject's epoch-average routing distribution, averaged
    // over subjects
    double subject_entropy = std::numeric_limits<double>::quiet_NaN();
    double jel_neighbor_fraction = std::numeric_limits<double>::quiet_NaN();
    int proto_reinit = 0;
};

inline nlohmann::json to_json(const EpochRecord& r) {
    nlohmann::json j;
    j["epoch"] = r.epoch;
    j["phase"] = r.phase;
    if (!r.shared_losses.empty()) j["shared"] = r.shared_losses;
    if (!r.routed_losses.empty()) j["routed"] = r.routed_losses;
    nlohmann::json acc;
    if (!std::isnan(r.val_acc_shared)) acc["shared"] = r.val_acc_shared;
    if (!std::isnan(r.val_acc_routed)) acc["routed"] = r.val_acc_routed;
    if (!std::isnan(r.val_acc_fused)) acc["fused"] = r.val_acc_fused;
    j["val_acc"] = acc;
    if (!std::isnan(r.eps_shared)) j["eps_shared"] = r.eps_shared;
    if (!std::isnan(r.eps_routed)) j["eps_routed"] = r.eps_routed;
    if (!r.expert_load.empty()) j["expert_load"] = r.expert_load;
    if (!std::isnan(r.subject_entropy)) j["subject_entropy"] = r.subject_entropy;
    if (!std::isnan(r.jel_neighbor_fraction)) j["jel_neighbor_fraction"] = r.jel_neighbor_fraction;
    if (r.proto_reinit > 0) j["proto_reinit"] = r.proto_reinit;
    return j;
}

struct TrainResult {
    ModelPair best;
    std::vector<EpochRecord> history;
    std::size_t best_epoch = 0;
    double best_val_acc = 0.0;
};

// --- batch assembly -------------------------------------------------------

inline Matrix batch_features(const Dataset& ds, std::span<const std::size_t> idx) {
    Matrix x(idx.size(), ds.feature_dim());
    for (std::size_t k = 0; k < idx.size(); ++k) {
        const auto& f = ds.samples[idx[k]].features;
        std::copy(f.begin(), f.end(), x.row(k).begin());
    }
    return x;
}

inline std::vector<int> batch_labels(const Dataset& ds, std::span<const std::size_t> idx) {
    std::vector<int> out(idx.size());
    for (std::size_t k = 0; k < idx.size(); ++k) out[k] = ds.samples[idx[k]].label;
    return out;
}

inline std::vector<int> batch_domains(const Dataset& ds, std::span<const std::size_t> idx) {
    std::vector<int> out(idx.size());
    for (std::size_t k = 0; k < idx.size(); ++k) out[k] = ds.samples[idx[k]].domain_id;
    return out;
}

struct JelPairs {
    Matrix masked;  // row-aligned with the batch
    std::size_t neighbor_pairs = 0;
    std::size_t self_pairs = 0;
};

// Builds the JEL partners: the masked same-class temporal neighbor when the
// augment mode asks for it and one exists, otherwise the sample itself,
// masked (self-mask fallback for unordered data).
inline JelPairs jel_batch_pairs(const Dataset& ds, std::span<const std::size_t> idx,
                                const AugmentSpec& spec, Rng& rng) {
    JelPairs out;
    out.masked = Matrix(idx.size(), ds.feature_dim());
    for (std::size_t k = 0; k < idx.size(); ++k) {
        const Sample& s = ds.samples[idx[k]];
        const Sample* partner = nullptr;
        if (spec.mode == AugmentMode::temporal_neighbor)
            partner = retrieve_neighbor(ds, s, spec.neighbor_offset);
        if (partner) ++out.neighbor_pairs;
        else ++out.self_pairs;
        const Sample masked = apply_mask(partner ? *partner : s, spec, rng);
        std::copy(masked.features.begin(), masked.features.end(), out.masked.row(k).begin());
    }
    return out;
}

// --- evaluation helpers ----------------------------------------------------

struct SplitPredictions {
    std::vector<int> shared, routed, fused;
};

inline SplitPredictions predict(const ModelPair& pair, const Dataset& ds) {
    std::vector<std::size_t> idx(ds.samples.size());
    std::iota(idx.begin(), idx.end(), 0);
    const Matrix x = batch_features(ds, idx);
    SplitPredictions out;
    Matrix ls, lr;
    if (pair.shared) ls = shared_logits_batch(*pair.shared, x);
    if (pair.routed) lr = routed_logits_batch(*pair.routed, x);
    for (std::size_t i = 0; i < ds.samples.size(); ++i) {
        if (pair.shared) out.shared.push_back(static_cast<int>(argmax(ls.row(i))));
        if (pair.routed) out.routed.push_back(static_cast<int>(argmax(lr.row(i))));
        if (pair.shared && pair.routed)
            out.fused.push_back(fuse_predictions(ls.row(i), lr.row(i)).label);
    }
    return out;
}

// Mean squared distance between each model's softmax output and the softmax
// of the per-domain teacher logits. NaN for branches that are absent.
inline std::pair<double, double> alignment_errors(const ModelPair& pair, const Dataset& ds,
                                                  const TeacherRecord& teacher) {
    if (ds.class_count != teacher.class_count)
        throw ConfigError("alignment_errors: teacher/dataset class count mismatch");
    if (pair.shared && int(pair.shared->class_count()) != teacher.class_count)
        throw ConfigError("alignment_errors: teacher/shared-model class count mismatch");
    if (pair.routed && int(pair.routed->class_count()) != teacher.class_count)
        throw ConfigError("alignment_errors: teacher/routed-model class count mismatch");
    std::vector<std::size_t> idx(ds.samples.size());
    std::iota(idx.begin(), idx.end(), 0);
    const Matrix x = batch_features(ds, idx);
    Matrix ls, lr;
    if (pair.shared) ls = shared_logits_batch(*pair.shared, x);
    if (pair.routed) lr = routed_logits_batch(*pair.routed, x);
    double es = 0, er = 0;
    for (std::size_t i = 0; i < ds.samples.size(); ++i) {
        const auto target = softmax(teacher.logits(ds.samples[i].domain_id, x.row(i)));
        if (pair.shared) {
            const auto p = softmax(ls.row(i));
            for (std::size_t c = 0; c < p.size(); ++c) es += (p[c] - target[c]) * (p[c] - target[c]);
        }
        if (pair.routed) {
            const auto p = softmax(lr.row(i));
            for (std::size_t c = 0; c < p.size(); ++c) er += (p[c] - target[c]) * (p[c] - target[c]);
        }
    }
    const double n = double(ds.samples.size());
    const double nan = std::numeric_limits<double>::quiet_NaN();
    return {pair.shared ? es / n : nan, pair.routed ? er / n : nan};
}

inline Dataset subset(const Dataset& ds, std::span<const std::size_t> idx) {
    Dataset out;
    out.class_count = ds.class_count;
    out.samples.reserve(idx.size());
    for (std::size_t i : idx) out.samples.push_back(ds.samples[i]);
    out.rebuild_index();
    return out;
}

// Seed-deterministic split, stratified by (domain, class).
inline std::pair<Dataset, Dataset> make_validation_split(const Dataset& ds, double fraction,
                                                         std::uint64_t seed) {
    std::map<std::pair<int, int>, std::vector<std::size_t>> strata;
    for (std::size_t i = 0; i < ds.samples.size(); ++i)
        strata[{ds.samples[i].domain_id, ds.samples[i].label}].push_back(i);
    std::vector<std::size_t> val_idx, train_idx;
    for (auto& [key, idx] : strata) {
        Rng rng(derive_seed(seed, {0x5711, std::uint64_t(std::uint32_t(key.first)),
                                   std::uint64_t(std::uint32_t(key.second))}));
        rng.shuffle(idx);
        const auto n_val = static_cast<std::size_t>(std::floor(fraction * double(idx.size()) + 0.5));
        for (std::size_t k = 0; k < idx.size(); ++k)
            (k < n_val ? val_idx : train_idx).push_back(idx[k]);
    }
    std::sort(val_idx.begin(), val_idx.end());
    std::sort(train_idx.begin(), train_idx.end());
    if (val_idx.empty() || train_idx.empty())
        throw ConfigError("validation split: a side came out empty; dataset too small");
    return {subset(ds, train_idx), subset(ds, val_idx)};
}

// --- the co-training loop --------------------------------------------------

namespace detail {

inline void accumulate_losses(std::map<std::string, double>& acc, const BatchLossReport& rep,
                              std::size_t batch_n) {
    for (const auto& [k, v] : rep.components) acc[k] += v * double(batch_n);
    acc["total"] += rep.total * double(batch_n);
}

inline void finalize_losses(std::map<std::string, double>& acc, std::size_t total_n) {
    for (auto& [_, v] : acc) v /= double(total_n);
}

inline std::vector<double> per_sample_ce_shared(const SharedModel& m, const Matrix& x,
                                                std::span<const int> labels) {
    return ce_loss(shared_logits_batch(m, x), labels).per_sample;
}

} // namespace detail

// Warm-up epochs optimize the two models independently (ERM + JEL for the
// shared expert, CE + SL + BL for the routed one); afterwards each model
// minimizes its mutual-guided weighted CE plus its own regularizers. Guide
// losses are taken from the partner's forward pass on the identical batch,
// before either model steps.
inline TrainResult train(const Dataset& train_set, const Dataset& val_set, const TrainConfig& cfg,
                         TrainMode mode = TrainMode::full, const TeacherRecord* teacher = nullptr,
                         std::ostream* jsonl = nullptr) {
    cfg.validate();
    train_set.validate();
    if (val_set.samples.empty()) throw ConfigError("train: validation set is empty");
    if (train_set.by_domain.size() < 2) throw ConfigError("train: need at least 2 training domains");

    const std::size_t input_dim = train_set.feature_dim();
    const int classes = train_set.class_count;
    const bool with_shared = mode != TrainMode::routed_only;
    const bool with_routed = mode != TrainMode::shared_only;

    ModelPair models;
    std::optional<SharedGrads> shared_grads;
    std::optional<RoutedGrads> routed_grads;
    AdamState adam_shared, adam_routed;
    TensorRefs shared_params, routed_params, shared_gref, routed_gref;

    {
        Rng init_rng(derive_seed(cfg.seed, {0x1817}));
        if (with_shared) {
            models.shared = make_shared_model(input_dim, cfg.extractor_hidden, classes, init_rng);
            shared_grads = make_grads(*models.shared);
            shared_params = collect_params(*models.shared);
            shared_gref = collect_grads(*shared_grads);
            adam_shared.cfg = {cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay};
            adam_shared.init(shared_params);
        }
        if (with_routed) {
            models.routed = make_routed_model(input_dim, cfg.extractor_hidden, classes, cfg.experts,
                                              cfg.top_k, cfg.gate_dim, init_rng);
            routed_grads = make_grads(*models.routed);
            routed_params = collect_params(*models.routed);
            routed_gref = collect_grads(*routed_grads);
            adam_routed.cfg = {cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay};
            adam_routed.init(routed_params);
        }
    }

    const auto monitored = [&](const EpochRecord& r) {
        switch (mode) {
            case TrainMode::full: return r.val_acc_fused;
            case TrainMode::shared_only: return r.val_acc_shared;
            default: return r.val_acc_routed;
        }
    };

    const auto eval_epoch = [&](EpochRecord& rec) {
        const SplitPredictions pred = predict(models, val_set);
        std::vector<int> labels(val_set.samples.size());
        for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = val_set.samples[i].label;
        if (with_shared) rec.val_acc_shared = accuracy(pred.shared, labels);
        if (with_routed) rec.val_acc_routed = accuracy(pred.routed, labels);
        if (with_shared && with_routed) rec.val_acc_fused = accuracy(pred.fused, labels);
        if (teacher) {
            const auto [es, er] = alignment_errors(models, val_set, *teacher);
            rec.eps_shared = es;
            rec.eps_routed = er;
        }
    };

    const auto emit = [&](const EpochRecord& rec) {
        if (jsonl) *jsonl << to_json(rec).dump() << "\n";
    };

    std::vector<EpochRecord> history;
    std::vector<std::size_t> order(train_set.samples.size());
    std::iota(order.begin(), order.end(), 0);

    // Epoch 0: evaluation of the freshly initialized models, no updates.
    {
        EpochRecord rec;
        rec.epoch = 0;
        rec.phase = "eval";
        std::map<std::string, double> sacc, racc;
        Rng mask_rng(derive_seed(cfg.seed, {0x3A5C, 0}));
        std::size_t seen = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), start + cfg.batch_size);
            const std::span<const std::size_t> idx(order.data() + start, end - start);
            const Matrix x = batch_features(train_set, idx);
            const auto labels = batch_labels(train_set, idx);
            if (with_shared) {
                const JelPairs pairs = jel_batch_pairs(train_set, idx, cfg.augment, mask_rng);
                detail::accumulate_losses(
                    sacc,
                    shared_total(*models.shared, x, pairs.masked, labels, nullptr, LossMode::warmup),
                    idx.size());
            }
            if (with_routed) {
                const auto domains = batch_domains(train_set, idx);
                detail::accumulate_losses(racc,
                                          routed_total(*models.routed, x, labels, domains, nullptr,
                                                       LossMode::warmup, cfg.use_sl, cfg.use_bl),
                                          idx.size());
            }
            seen += idx.size();
        }
        detail::finalize_losses(sacc, seen);
        detail::finalize_losses(racc, seen);
        rec.shared_losses = std::move(sacc);
        rec.routed_losses = std::move(racc);
        eval_epoch(rec);
        emit(rec);
        history.push_back(std::move(rec));
    }

    TrainResult result;
    result.best_val_acc = -1.0;
    std::size_t epochs_since_best = 0;

    for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        const bool warm = epoch <= cfg.warmup_epochs || mode != TrainMode::full;
        const LossMode loss_mode = warm ? LossMode::warmup : LossMode::mutual;

        Rng shuffle_rng(derive_seed(cfg.seed, {0xE901, epoch}));
        shuffle_rng.shuffle(order);
        Rng mask_rng(derive_seed(cfg.seed, {0x3A5C, epoch}));
        Rng proto_rng(derive_seed(cfg.seed, {0x77AB, epoch}));

        EpochRecord rec;
        rec.epoch = epoch;
        rec.phase = (loss_mode == LossMode::mutual) ? "mutual" : "warmup";
        std::map<std::string, double> sacc, racc;
        std::vector<double> load_acc(cfg.experts, 0.0);
        std::map<int, std::pair<std::vector<double>, std::size_t>> routing_by_subject;
        std::size_t seen = 0, neighbor_pairs = 0, total_pairs = 0;

        std::size_t batch_index = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++batch_index) {
            const std::size_t end = std::min(order.size(), start + cfg.batch_size);
            const std::span<const std::size_t> idx(order.data() + start, end - start);
            const Matrix x = batch_features(train_set, idx);
            const auto labels = batch_labels(train_set, idx);

            BatchLossReport srep, rrep;
            RoutedBatchStats rstats;

            if (mode == TrainMode::full && loss_mode == LossMode::mutual) {
                // Guides come from the partner's pre-update forward pass.
                const auto guide_s = detail::per_sample_ce_shared(*models.shared, x, labels);
                const auto domains = batch_domains(train_set, idx);
                rrep = routed_backward(*models.routed, x, labels, domains, &guide_s,
                                       LossMode::mutual, *routed_grads, cfg.use_sl, cfg.use_bl,
                                       &rstats);
                const JelPairs pairs = jel_batch_pairs(train_set, idx, cfg.augment, mask_rng);
                neighbor_pairs += pairs.neighbor_pairs;
                total_pairs += idx.size();
                srep = shared_backward(*models.shared, x, pairs.masked, labels, &rrep.per_sample,
                                       LossMode::mutual, *shared_grads);
            } else {
                if (with_shared) {
                    const JelPairs pairs = jel_batch_pairs(train_set, idx, cfg.augment, mask_rng);
                    neighbor_pairs += pairs.neighbor_pairs;
                    total_pairs += idx.size();
                    srep = shared_backward(*models.shared, x, pairs.masked, labels, nullptr,
                                           LossMode::warmup, *shared_grads);
                }
                if (with_routed) {
                    const auto domains = batch_domains(train_set, idx);
                    rrep = routed_backward(*models.routed, x, labels, domains, nullptr,
                                           LossMode::warmup, *routed_grads, cfg.use_sl, cfg.use_bl,
                                           &rstats);
                }
            }

            if (with_shared && !std::isfinite(srep.total))
                throw TrainingAbort("non-finite shared loss at epoch " + std::to_string(epoch) +
                                        ", batch " + std::to_string(batch_index),
                                    epoch, batch_index);
            if (with_routed && !std::isfinite(rrep.total))
                throw TrainingAbort("non-finite routed loss at epoch " + std::to_string(epoch) +
                                        ", batch " + std::to_string(batch_index),
                                    epoch, batch_index);

            if (with_shared) {
                adam_step(shared_params, shared_gref, adam_shared);
                detail::accumulate_losses(sacc, srep, idx.size());
            }
            if (with_routed) {
                adam_step(routed_params, routed_gref, adam_routed);
                detail::accumulate_losses(racc, rrep, idx.size());
                for (std::size_t j = 0; j < cfg.experts; ++j)
                    load_acc[j] += rstats.load_fraction[j] * double(idx.size());
                for (std::size_t k = 0; k < idx.size(); ++k) {
                    auto& [sum, count] = routing_by_subject[train_set.samples[idx[k]].domain_id];
                    if (sum.empty()) sum.assign(cfg.experts, 0.0);
                    axpy(1.0, rstats.routing.row(k), sum);
                    ++count;
                }
                // Weight decay never touches prototypes, but a collapse to
                // zero norm would make the cosine undefined; redraw if seen.
                for (std::size_t j : models.routed->router.degenerate_prototypes()) {
                    auto row = models.routed->router.prototypes.row(j);
                    for (double& v : row) v = proto_rng.normal();
                    const double nn = norm(row);
                    for (double& v : row) v /= nn;
                    ++rec.proto_reinit;
                }
            }
            seen += idx.size();
        }

        detail::finalize_losses(sacc, seen);
        detail::finalize_losses(racc, seen);
        rec.shared_losses = std::move(sacc);
        rec.routed_losses = std::move(racc);
        if (with_routed) {
            rec.expert_load.resize(cfg.experts);
            for (std::size_t j = 0; j < cfg.experts; ++j) rec.expert_load[j] = load_acc[j] / double(seen);
            double entropy = 0;
            for (const auto& [_, entry] : routing_by_subject) {
                const auto& [sum, count] = entry;
                for (double v : sum) {
                    const double r = v / double(count);
                    if (r > 0) entropy -= r * std::log(r);
                }
            }
            rec.subject_entropy = entropy / double(routing_by_subject.size());
        }
        if (with_shared && total_pairs > 0)
            rec.jel_neighbor_fraction = double(neighbor_pairs) / double(total_pairs);
        eval_epoch(rec);
        emit(rec);
        history.push_back(rec);

        const double acc = monitored(rec);
        if (acc > result.best_val_acc) {
            result.best_val_acc = acc;
            result.best_epoch = epoch;
            result.best = models;  // snapshot of the improving epoch
            epochs_since_best = 0;
        } else if (++epochs_since_best >= cfg.patience) {
            break;
        }
    }

    result.history = std::move(history);
    return result;
}

} // namespace mgec
