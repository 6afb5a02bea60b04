#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <vector>

#include "kctrace/util.hpp"

namespace kctrace {

// ROC AUC via the Mann-Whitney statistic. Ranks are accumulated in units of
// 2U so tie handling stays in integer arithmetic; the value equals the
// pairwise definition (ties count 1/2) bit-for-bit. Returns nullopt when only
// one class is present.
inline std::optional<double> auc_score(const std::vector<int>& labels,
                                       const std::vector<double>& scores) {
    if (labels.size() != scores.size()) throw data_error("auc: size mismatch");
    std::size_t n = labels.size();
    std::uint64_t n_pos = 0;
    for (int y : labels) n_pos += (y != 0);
    std::uint64_t n_neg = n - n_pos;
    if (n_pos == 0 || n_neg == 0) return std::nullopt;

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

    // two_r = 2 * sum of average ranks of positives (1-based ranks)
    std::uint64_t two_r = 0;
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j < n && scores[order[j]] == scores[order[i]]) ++j;
        std::uint64_t group_pos = 0;
        for (std::size_t t = i; t < j; ++t) group_pos += (labels[order[t]] != 0);
        // average rank of the tie group, doubled: (i+1) + j
        two_r += group_pos * (static_cast<std::uint64_t>(i) + 1 + j);
        i = j;
    }
    std::uint64_t two_u = two_r - n_pos * (n_pos + 1);
    return static_cast<double>(two_u) / (2.0 * static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

inline double rmse(const std::vector<int>& labels, const std::vector<double>& scores) {
    if (labels.size() != scores.size() || labels.empty()) throw data_error("rmse: bad input");
    double acc = 0.0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        double d = scores[i] - static_cast<double>(labels[i]);
        acc += d * d;
    }
    return std::sqrt(acc / static_cast<double>(labels.size()));
}

// Fraction of rows where the 0.5-thresholded prediction matches the label;
// scores exactly 0.5 round up.
inline double accuracy(const std::vector<int>& labels, const std::vector<double>& scores) {
    if (labels.size() != scores.size() || labels.empty()) throw data_error("accuracy: bad input");
    std::size_t hit = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        int pred = scores[i] >= 0.5 ? 1 : 0;
        hit += (pred == (labels[i] != 0 ? 1 : 0));
    }
    return static_cast<double>(hit) / static_cast<double>(labels.size());
}

inline double log_loss(const std::vector<int>& labels, const std::vector<double>& scores,
                       double eps = 1e-15) {
    if (labels.size() != scores.size() || labels.empty()) throw data_error("log_loss: bad input");
    double acc = 0.0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        double p = std::clamp(scores[i], eps, 1.0 - eps);
        acc += labels[i] ? -std::log(p) : -std::log(1.0 - p);
    }
    return acc / static_cast<double>(labels.size());
}

}  // namespace kctrace
