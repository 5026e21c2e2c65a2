#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "mgec/errors.hpp"

namespace mgec {

inline double accuracy(std::span<const int> predictions, std::span<const int> labels) {
    if (predictions.size() != labels.size() || predictions.empty())
        throw ConfigError("accuracy: empty or mismatched inputs");
    std::size_t correct = 0;
    for (std::size_t i = 0; i < predictions.size(); ++i)
        if (predictions[i] == labels[i]) ++correct;
    return double(correct) / double(predictions.size());
}

// Unweighted mean of per-class recall; classes absent from the labels are
// excluded from the mean.
inline double balanced_accuracy(std::span<const int> predictions, std::span<const int> labels,
                                int class_count) {
    if (predictions.size() != labels.size() || predictions.empty())
        throw ConfigError("balanced_accuracy: empty or mismatched inputs");
    std::vector<std::size_t> total(static_cast<std::size_t>(class_count), 0);
    std::vector<std::size_t> correct(static_cast<std::size_t>(class_count), 0);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const auto c = static_cast<std::size_t>(labels[i]);
        if (labels[i] < 0 || c >= total.size())
            throw ConfigError("balanced_accuracy: label out of range");
        ++total[c];
        if (predictions[i] == labels[i]) ++correct[c];
    }
    double sum = 0;
    std::size_t present = 0;
    for (std::size_t c = 0; c < total.size(); ++c) {
        if (total[c] == 0) continue;
        sum += double(correct[c]) / double(total[c]);
        ++present;
    }
    return sum / double(present);
}

} // namespace mgec
