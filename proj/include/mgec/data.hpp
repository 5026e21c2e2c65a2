#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mgec/errors.hpp"
#include "mgec/rng.hpp"

namespace mgec {

// One labeled sample. Grid payloads (electrodes x timesteps) keep their shape
// for masking; flat vectors leave electrodes == timesteps == 0. t_index is the
// temporal position inside the sample's domain recording, -1 when unordered.
struct Sample {
    std::vector<double> features;
    std::size_t electrodes = 0;
    std::size_t timesteps = 0;
    int label = 0;
    int domain_id = 0;
    long long t_index = -1;

    bool is_grid() const { return electrodes > 0; }
    std::size_t dim() const { return features.size(); }
};

struct Dataset {
    std::vector<Sample> samples;
    int class_count = 0;

    std::map<int, std::vector<std::size_t>> by_domain;
    std::map<std::pair<int, long long>, std::size_t> by_time;

    void rebuild_index() {
        by_domain.clear();
        by_time.clear();
        for (std::size_t i = 0; i < samples.size(); ++i) {
            const Sample& s = samples[i];
            by_domain[s.domain_id].push_back(i);
            if (s.t_index >= 0) {
                auto key = std::make_pair(s.domain_id, s.t_index);
                if (!by_time.emplace(key, i).second)
                    throw ConfigError("dataset: duplicate t_index " + std::to_string(s.t_index) +
                                      " in domain " + std::to_string(s.domain_id));
            }
        }
    }

    void validate() const {
        if (class_count < 1) throw ConfigError("dataset: class_count must be >= 1");
        for (std::size_t i = 0; i < samples.size(); ++i) {
            const Sample& s = samples[i];
            if (s.features.empty())
                throw ConfigError("dataset: sample " + std::to_string(i) + " has no features");
            if (s.label < 0 || s.label >= class_count)
                throw ConfigError("dataset: sample " + std::to_string(i) + " label " +
                                  std::to_string(s.label) + " out of range for class_count " +
                                  std::to_string(class_count));
            if (s.is_grid() && s.features.size() != s.electrodes * s.timesteps)
                throw ConfigError("dataset: sample " + std::to_string(i) + " grid shape mismatch");
            for (double v : s.features)
                if (!std::isfinite(v))
                    throw ConfigError("dataset: sample " + std::to_string(i) + " has non-finite feature");
        }
    }

    std::vector<int> domain_ids() const {
        std::vector<int> ids;
        ids.reserve(by_domain.size());
        for (const auto& [id, _] : by_domain) ids.push_back(id);
        return ids;
    }

    std::size_t feature_dim() const { return samples.empty() ? 0 : samples.front().dim(); }
};

// Preceding same-class segment of the same domain, t_index - offset. Returns
// nullptr when absent, when the class differs, or when the sample is unordered.
inline const Sample* retrieve_neighbor(const Dataset& ds, const Sample& s, long long offset) {
    if (s.t_index < 0) return nullptr;
    const auto it = ds.by_time.find({s.domain_id, s.t_index - offset});
    if (it == ds.by_time.end()) return nullptr;
    const Sample& n = ds.samples[it->second];
    if (n.label != s.label) return nullptr;
    return &n;
}

enum class AugmentMode { temporal_neighbor, self_mask };

struct AugmentSpec {
    AugmentMode mode = AugmentMode::temporal_neighbor;
    double rho = 0.10;                          // masking probability
    long long neighbor_offset = 1;              // T, in t_index units
    std::size_t min_electrodes_for_spatial = 10;

    void validate() const {
        if (rho < 0.0 || rho >= 1.0) throw ConfigError("augment: rho must be in [0, 1)");
        if (neighbor_offset < 1) throw ConfigError("augment: neighbor offset must be >= 1");
    }
};

// ceil with a snap-to-integer guard so rho*L landing an epsilon above an
// integer does not inflate the segment length.
inline std::size_t masked_segment_length(double rho, std::size_t timesteps) {
    const double v = rho * double(timesteps);
    const double r = std::round(v);
    if (std::abs(v - r) < 1e-9) return static_cast<std::size_t>(r);
    return static_cast<std::size_t>(std::ceil(v));
}

// Stochastic masking: grids with enough electrodes zero whole electrode rows
// with probability rho; small grids zero one contiguous temporal segment of
// length ceil(rho*L) per electrode; flat vectors zero coordinates
// independently. Label, domain and t_index pass through.
inline Sample apply_mask(const Sample& s, const AugmentSpec& spec, Rng& rng) {
    spec.validate();
    Sample out = s;
    if (spec.rho == 0.0) return out;
    if (s.is_grid()) {
        if (s.electrodes >= spec.min_electrodes_for_spatial) {
            for (std::size_t e = 0; e < s.electrodes; ++e)
                if (rng.bernoulli(spec.rho))
                    std::fill_n(out.features.begin() + e * s.timesteps, s.timesteps, 0.0);
        } else {
            const std::size_t seg = masked_segment_length(spec.rho, s.timesteps);
            if (seg == 0) return out;
            for (std::size_t e = 0; e < s.electrodes; ++e) {
                const std::size_t start = rng.below(s.timesteps - seg + 1);
                std::fill_n(out.features.begin() + e * s.timesteps + start, seg, 0.0);
            }
        }
    } else {
        for (double& v : out.features)
            if (rng.bernoulli(spec.rho)) v = 0.0;
    }
    return out;
}

} // namespace mgec
