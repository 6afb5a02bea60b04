#pragma once

// k-means over embedding rows, WCSS/silhouette scoring, and the two
// k-selection strategies (knee detection and bin-local maxima).

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "kctrace/util.hpp"

namespace kctrace {

using Matrix = std::vector<std::vector<double>>;

inline double sq_dist(const std::vector<double>& a, const std::vector<double>& b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        double d = a[i] - b[i];
        acc += d * d;
    }
    return acc;
}

struct ClusterModel {
    int k = 0;
    Matrix centroids;
    std::vector<int> assignment;
    std::map<int, std::string> representative_names;
    std::uint64_t seed = 0;
    // objective after every assignment phase; Lloyd guarantees this is
    // non-increasing within one call, and tests assert it
    std::vector<double> objective_trace;
};

inline double wcss(const Matrix& X, const ClusterModel& m) {
    double acc = 0.0;
    for (std::size_t i = 0; i < X.size(); ++i) acc += sq_dist(X[i], m.centroids[m.assignment[i]]);
    return acc;
}

inline ClusterModel kmeans(const Matrix& X, int k, std::uint64_t seed) {
    const std::size_t n = X.size();
    if (n == 0) throw data_error("kmeans: empty input");
    const std::size_t d = X[0].size();
    if (k < 1 || static_cast<std::size_t>(k) > n)
        throw data_error("kmeans: k=" + std::to_string(k) + " out of range for n=" +
                         std::to_string(n));

    Rng rng(seed);
    ClusterModel m;
    m.k = k;
    m.seed = seed;
    m.centroids.reserve(k);

    // k-means++ seeding
    m.centroids.push_back(X[rng.bounded(n)]);
    std::vector<double> d2(n, 0.0);
    for (int c = 1; c < k; ++c) {
        double total = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            double best = std::numeric_limits<double>::infinity();
            for (const auto& cen : m.centroids) best = std::min(best, sq_dist(X[i], cen));
            d2[i] = best;
            total += best;
        }
        std::size_t pick;
        if (total <= 0.0) {
            pick = rng.bounded(n);
        } else {
            double u = rng.uniform() * total;
            pick = n - 1;
            double cum = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                cum += d2[i];
                if (u < cum) {
                    pick = i;
                    break;
                }
            }
        }
        m.centroids.push_back(X[pick]);
    }

    m.assignment.assign(n, -1);
    std::vector<int> counts(k, 0);
    for (int iter = 0; iter < 300; ++iter) {
        // assignment phase (ties to the lowest centroid index)
        bool changed = false;
        double obj = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            int best = 0;
            double bd = sq_dist(X[i], m.centroids[0]);
            for (int c = 1; c < k; ++c) {
                double dd = sq_dist(X[i], m.centroids[c]);
                if (dd < bd) {
                    bd = dd;
                    best = c;
                }
            }
            if (m.assignment[i] != best) {
                m.assignment[i] = best;
                changed = true;
            }
            obj += bd;
        }
        m.objective_trace.push_back(obj);
        if (!changed && iter > 0) break;

        // update phase
        for (auto& cen : m.centroids) std::fill(cen.begin(), cen.end(), 0.0);
        std::fill(counts.begin(), counts.end(), 0);
        for (std::size_t i = 0; i < n; ++i) {
            int c = m.assignment[i];
            ++counts[c];
            for (std::size_t j = 0; j < d; ++j) m.centroids[c][j] += X[i][j];
        }
        std::set<std::size_t> taken;
        for (int c = 0; c < k; ++c) {
            if (counts[c] > 0) {
                for (std::size_t j = 0; j < d; ++j) m.centroids[c][j] /= counts[c];
            }
        }
        for (int c = 0; c < k; ++c) {
            if (counts[c] > 0) continue;
            // empty cluster: restart it at the point farthest from its own centroid
            double far = -1.0;
            std::size_t pick = 0;
            for (std::size_t i = 0; i < n; ++i) {
                if (taken.count(i)) continue;
                double dd = sq_dist(X[i], m.centroids[m.assignment[i]]);
                if (dd > far) {
                    far = dd;
                    pick = i;
                }
            }
            taken.insert(pick);
            m.centroids[c] = X[pick];
        }
    }
    return m;
}

// Pairwise Euclidean distances, reusable across a whole k sweep.
inline Matrix distance_matrix(const Matrix& X) {
    const std::size_t n = X.size();
    Matrix D(n, std::vector<double>(n, 0.0));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) D[i][j] = D[j][i] = std::sqrt(sq_dist(X[i], X[j]));
    return D;
}

inline double silhouette_from_distances(const Matrix& D, const std::vector<int>& assignment,
                                        int k) {
    if (k < 2) throw data_error("silhouette: k must be >= 2");
    const std::size_t n = D.size();
    std::vector<int> counts(k, 0);
    for (int a : assignment) ++counts[a];
    double total = 0.0;
    std::vector<double> sums(k);
    for (std::size_t i = 0; i < n; ++i) {
        int ci = assignment[i];
        if (counts[ci] <= 1) continue;  // singleton convention: s(i) = 0
        std::fill(sums.begin(), sums.end(), 0.0);
        for (std::size_t j = 0; j < n; ++j) sums[assignment[j]] += D[i][j];
        double a = sums[ci] / (counts[ci] - 1);
        double b = std::numeric_limits<double>::infinity();
        for (int c = 0; c < k; ++c) {
            if (c == ci || counts[c] == 0) continue;
            b = std::min(b, sums[c] / counts[c]);
        }
        if (a == 0.0 && b == 0.0) continue;  // coincident points convention: s(i) = 0
        total += (b - a) / std::max(a, b);
    }
    return total / static_cast<double>(n);
}

inline double silhouette(const Matrix& X, const ClusterModel& m) {
    return silhouette_from_distances(distance_matrix(X), m.assignment, m.k);
}

struct KRecord {
    int k = 0;
    double wcss = 0.0;
    double silhouette = 0.0;
};

struct KBin {
    int lo = 0, hi = 0;  // closed range; adjacent bins share endpoints
    int local_max_k = 0;
    double local_max_s = 0.0;
};

struct KSelectionReport {
    std::vector<KRecord> records;
    std::vector<KBin> bins;
    std::optional<int> knee_k;
    int chosen_k = 0;
    std::string strategy;  // knee | third_bin | fixed
    std::vector<std::string> warnings;
    std::uint64_t seed = 0;
};

// Kneedle on a concave-increasing curve: smooth, normalize to the unit
// square, take y - x, and accept the first difference-curve local maximum
// whose threshold is crossed before the next local maximum.
inline std::optional<double> kneedle_concave_increasing(const std::vector<double>& xs,
                                                        const std::vector<double>& ys,
                                                        int window = 5, double sensitivity = 1.0) {
    const std::size_t n = xs.size();
    if (n < 3) return std::nullopt;

    // centered moving average, truncated at the ends
    std::vector<double> ys_s(n);
    int half = window / 2;
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t lo = i >= static_cast<std::size_t>(half) ? i - half : 0;
        std::size_t hi = std::min(n - 1, i + half);
        double acc = 0.0;
        for (std::size_t j = lo; j <= hi; ++j) acc += ys[j];
        ys_s[i] = acc / static_cast<double>(hi - lo + 1);
    }

    double x0 = xs.front(), x1 = xs.back();
    double ymin = *std::min_element(ys_s.begin(), ys_s.end());
    double ymax = *std::max_element(ys_s.begin(), ys_s.end());
    if (x1 == x0 || ymax == ymin) return std::nullopt;

    std::vector<double> xn(n), dy(n);
    for (std::size_t i = 0; i < n; ++i) {
        xn[i] = (xs[i] - x0) / (x1 - x0);
        dy[i] = (ys_s[i] - ymin) / (ymax - ymin) - xn[i];
    }

    double mean_dx = 0.0;
    for (std::size_t i = 1; i < n; ++i) mean_dx += xn[i] - xn[i - 1];
    mean_dx /= static_cast<double>(n - 1);
    const double drop = sensitivity * mean_dx;

    std::vector<std::size_t> lmx;
    for (std::size_t i = 1; i + 1 < n; ++i) {
        if (dy[i] >= dy[i - 1] && dy[i] >= dy[i + 1] && (dy[i] > dy[i - 1] || dy[i] > dy[i + 1]))
            lmx.push_back(i);
    }

    for (std::size_t m = 0; m < lmx.size(); ++m) {
        std::size_t start = lmx[m];
        std::size_t stop = m + 1 < lmx.size() ? lmx[m + 1] : n;
        double threshold = dy[start] - drop;
        for (std::size_t j = start + 1; j < stop; ++j) {
            if (dy[j] < threshold) return xs[start];
        }
    }
    return std::nullopt;
}

// Knee selection is restricted to k > 10; falls back to the silhouette
// argmax over the analyzed range (ties to the smallest k).
inline int select_k_knee(const KSelectionReport& report) {
    std::vector<double> xs, ys;
    for (const auto& r : report.records) {
        if (r.k > 10) {
            xs.push_back(static_cast<double>(r.k));
            ys.push_back(r.silhouette);
        }
    }
    if (xs.size() < 10) throw data_error("select_k_knee: need at least 10 records with k > 10");
    auto knee = kneedle_concave_increasing(xs, ys);
    if (knee) return static_cast<int>(std::lround(*knee));
    std::size_t best = 0;
    for (std::size_t i = 1; i < xs.size(); ++i)
        if (ys[i] > ys[best]) best = i;
    return static_cast<int>(std::lround(xs[best]));
}

// Ten equal-width closed bins over [10, 200] with shared endpoints:
// edges 10, 29, 48, ..., 200; bin i = [10+19i, 10+19(i+1)].
inline std::vector<KBin> select_k_bins(const KSelectionReport& report) {
    std::vector<KBin> bins;
    for (int i = 0; i < 10; ++i) {
        KBin b;
        b.lo = 10 + 19 * i;
        b.hi = 10 + 19 * (i + 1);
        b.local_max_k = -1;
        b.local_max_s = -std::numeric_limits<double>::infinity();
        for (const auto& r : report.records) {
            if (r.k < b.lo || r.k > b.hi) continue;
            if (r.silhouette > b.local_max_s ||
                (r.silhouette == b.local_max_s && r.k < b.local_max_k)) {
                b.local_max_s = r.silhouette;
                b.local_max_k = r.k;
            }
        }
        bins.push_back(b);
    }
    return bins;
}

inline int pick_third_bin(const KSelectionReport& report) {
    auto bins = select_k_bins(report);
    if (bins[2].local_max_k < 0)
        throw data_error("pick_third_bin: no sweep records inside bin [48,67]");
    return bins[2].local_max_k;
}

inline KSelectionReport sweep_k(const Matrix& X, int kmin, int kmax, std::uint64_t seed) {
    KSelectionReport report;
    report.seed = seed;
    const int n = static_cast<int>(X.size());
    if (kmax > n) {
        report.warnings.push_back("k range clipped to n=" + std::to_string(n));
        kmax = n;
    }
    if (kmin < 2) kmin = 2;
    Matrix D = distance_matrix(X);
    for (int k = kmin; k <= kmax; ++k) {
        ClusterModel m = kmeans(X, k, seed + static_cast<std::uint64_t>(k));
        KRecord r;
        r.k = k;
        r.wcss = wcss(X, m);
        r.silhouette = silhouette_from_distances(D, m.assignment, k);
        report.records.push_back(r);
    }
    report.bins = select_k_bins(report);
    return report;
}

// normalized (case-folded, whitespace-collapsed) key for name counting
inline std::string normalize_name(const std::string& name) {
    std::string out;
    bool pending_space = false;
    for (char raw : trim(name)) {
        unsigned char c = static_cast<unsigned char>(raw);
        if (std::isspace(c)) {
            pending_space = true;
            continue;
        }
        if (pending_space && !out.empty()) out.push_back(' ');
        pending_space = false;
        out.push_back(static_cast<char>(std::tolower(c)));
    }
    return out;
}

// Modal name per cluster; ties break to the lexicographically smallest
// normalized key; the returned surface form is the smallest original
// spelling of the winning key.
inline std::map<int, std::string> representative_name(const ClusterModel& m,
                                                      const std::vector<std::string>& names) {
    if (names.size() != m.assignment.size())
        throw data_error("representative_name: names/assignment size mismatch");
    std::map<int, std::map<std::string, std::pair<int, std::string>>> tally;
    for (std::size_t i = 0; i < names.size(); ++i) {
        std::string key = normalize_name(names[i]);
        auto& slot = tally[m.assignment[i]][key];
        slot.first += 1;
        if (slot.second.empty() || names[i] < slot.second) slot.second = names[i];
    }
    std::map<int, std::string> out;
    for (const auto& [cluster, counts] : tally) {
        int best_count = -1;
        std::string best_key, best_surface;
        for (const auto& [key, slot] : counts) {
            if (slot.first > best_count) {  // map iteration is key-ascending, so
                best_count = slot.first;    // ties keep the smaller key
                best_key = key;
                best_surface = slot.second;
            }
        }
        out[cluster] = best_surface;
    }
    return out;
}

// ---- serialization ----

inline nlohmann::json cluster_model_to_json(const ClusterModel& m) {
    nlohmann::json j;
    j["k"] = m.k;
    j["seed"] = m.seed;
    j["centroids"] = m.centroids;
    j["assignment"] = m.assignment;
    auto& names = j["representative_names"] = nlohmann::json::object();
    for (const auto& [c, name] : m.representative_names) names[std::to_string(c)] = name;
    return j;
}

inline ClusterModel cluster_model_from_json(const nlohmann::json& j) {
    ClusterModel m;
    m.k = j.at("k").get<int>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.centroids = j.at("centroids").get<Matrix>();
    m.assignment = j.at("assignment").get<std::vector<int>>();
    for (const auto& [c, name] : j.at("representative_names").items())
        m.representative_names[std::stoi(c)] = name.get<std::string>();
    return m;
}

inline nlohmann::json kselection_to_json(const KSelectionReport& r) {
    nlohmann::json j;
    j["seed"] = r.seed;
    j["strategy"] = r.strategy;
    j["chosen_k"] = r.chosen_k;
    if (r.knee_k)
        j["knee_k"] = *r.knee_k;
    else
        j["knee_k"] = nullptr;
    j["warnings"] = r.warnings;
    auto& recs = j["records"] = nlohmann::json::array();
    for (const auto& rec : r.records)
        recs.push_back({{"k", rec.k}, {"wcss", rec.wcss}, {"silhouette", rec.silhouette}});
    auto& bins = j["bins"] = nlohmann::json::array();
    for (const auto& b : r.bins)
        bins.push_back({{"lo", b.lo},
                        {"hi", b.hi},
                        {"local_max_k", b.local_max_k},
                        {"local_max_s", b.local_max_s}});
    return j;
}

}  // namespace kctrace
