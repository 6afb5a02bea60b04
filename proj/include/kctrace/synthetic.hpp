#pragma once

// Synthetic student generator: draws AFM ground truth and simulates answer
// streams from it, so evaluation code can be checked against known parameters.

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "kctrace/ingest.hpp"
#include "kctrace/qmatrix.hpp"
#include "kctrace/util.hpp"

namespace kctrace {

struct SyntheticSpec {
    int n_students = 200;
    int n_items = 50;
    int n_kcs = 8;
    int kc_min = 1;  // KCs per item ~ uniform integer [kc_min, kc_max]
    int kc_max = 2;
    int opportunities = 50;  // attempts per student; cycles through reshuffled item orders
    double theta_sd = 1.0;
    double beta_sd = 1.0;
    double gamma_sd = 0.2;  // gamma ~ |Normal(0, gamma_sd)|
    std::uint64_t seed = 42;
};

struct SyntheticData {
    Dataset dataset;
    QMatrix q;                  // the true item -> KC map
    std::vector<double> theta;  // by student index (lexicographic id order)
    std::vector<double> beta;   // by KC index
    std::vector<double> gamma;
    std::vector<double> true_p;  // Bernoulli parameter per interaction row
    double bayes_rmse = 0.0;     // sqrt(mean p(1-p)): floor for any predictor
};

namespace detail {

inline std::string padded_id(const char* prefix, int i, int n) {
    int width = 1;
    for (int v = n - 1; v >= 10; v /= 10) ++width;
    std::string digits = std::to_string(i);
    return prefix + std::string(static_cast<std::size_t>(width) - digits.size(), '0') + digits;
}

}  // namespace detail

inline SyntheticData generate_synthetic(const SyntheticSpec& spec) {
    if (spec.n_students <= 0 || spec.n_items <= 0 || spec.n_kcs <= 0 || spec.opportunities <= 0)
        throw usage_error("generate_synthetic: counts must be positive");
    if (spec.kc_min < 1 || spec.kc_max < spec.kc_min || spec.kc_max > spec.n_kcs)
        throw usage_error("generate_synthetic: bad kc_per_item range");
    if (spec.n_items < spec.n_kcs)
        throw usage_error("generate_synthetic: need n_items >= n_kcs for KC coverage");

    Rng rng(spec.seed);
    SyntheticData out;

    // true q-matrix; redraw until every KC tags at least one item
    out.q.source = "llm";
    for (int k = 0; k < spec.n_kcs; ++k)
        out.q.kcs.push_back(detail::padded_id("k", k, spec.n_kcs));
    std::vector<std::string> item_ids;
    for (int j = 0; j < spec.n_items; ++j)
        item_ids.push_back(detail::padded_id("i", j, spec.n_items));
    for (int attempt = 0;; ++attempt) {
        out.q.items.clear();
        out.q.rows.clear();
        std::vector<bool> used(static_cast<std::size_t>(spec.n_kcs), false);
        std::vector<int> pool(static_cast<std::size_t>(spec.n_kcs));
        for (int k = 0; k < spec.n_kcs; ++k) pool[static_cast<std::size_t>(k)] = k;
        for (const auto& id : item_ids) {
            int c = spec.kc_min +
                    static_cast<int>(rng.bounded(
                        static_cast<std::uint64_t>(spec.kc_max - spec.kc_min + 1)));
            // partial Fisher-Yates draw of c distinct KCs
            for (int t = 0; t < c; ++t) {
                std::size_t pick = static_cast<std::size_t>(t) +
                                   rng.bounded(static_cast<std::uint64_t>(spec.n_kcs - t));
                std::swap(pool[static_cast<std::size_t>(t)], pool[pick]);
            }
            std::vector<int> row(pool.begin(), pool.begin() + c);
            std::sort(row.begin(), row.end());
            for (int k : row) used[static_cast<std::size_t>(k)] = true;
            out.q.items.push_back(id);
            out.q.rows[id] = row;
        }
        bool all = true;
        for (bool u : used) all = all && u;
        if (all) break;
        if (attempt >= 100)
            throw data_error("generate_synthetic: could not cover every KC; raise kc_max");
    }
    validate_qmatrix(out.q);

    for (int s = 0; s < spec.n_students; ++s) out.theta.push_back(rng.normal() * spec.theta_sd);
    for (int k = 0; k < spec.n_kcs; ++k) out.beta.push_back(rng.normal() * spec.beta_sd);
    for (int k = 0; k < spec.n_kcs; ++k) out.gamma.push_back(std::fabs(rng.normal()) * spec.gamma_sd);

    constexpr long long kBase = 1500000000000LL;  // arbitrary fixed epoch
    constexpr long long kStep = 6LL * 3600000LL;
    std::vector<TransactionRecord> records;
    std::map<long long, double> p_by_row;
    long long row_id = 2;
    double sum_var = 0.0;
    for (int s = 0; s < spec.n_students; ++s) {
        std::string sid = detail::padded_id("s", s, spec.n_students);
        std::vector<double> T(static_cast<std::size_t>(spec.n_kcs), 0.0);
        std::vector<int> order;
        int round = 0;
        for (int t = 0; t < spec.opportunities; ++t) {
            if (order.empty()) {
                for (int j = 0; j < spec.n_items; ++j) order.push_back(j);
                rng.shuffle(order);
                ++round;
            }
            int j = order.back();
            order.pop_back();
            double logit = out.theta[static_cast<std::size_t>(s)];
            for (int k : out.q.rows.at(item_ids[static_cast<std::size_t>(j)]))
                logit += out.beta[static_cast<std::size_t>(k)] +
                         out.gamma[static_cast<std::size_t>(k)] * T[static_cast<std::size_t>(k)];
            double p = sigmoid(logit);
            TransactionRecord r;
            r.row_id = row_id++;
            r.student_id = sid;
            r.problem_id = item_ids[static_cast<std::size_t>(j)];
            r.step_id = "r" + std::to_string(round);
            r.timestamp = kBase + static_cast<long long>(t) * kStep;
            r.outcome = rng.uniform() < p ? 1 : 0;
            records.push_back(r);
            p_by_row[r.row_id] = p;
            sum_var += p * (1.0 - p);
            for (int k : out.q.rows.at(r.problem_id)) T[static_cast<std::size_t>(k)] += 1.0;
        }
    }
    out.bayes_rmse = std::sqrt(sum_var / static_cast<double>(records.size()));

    std::map<std::string, ContentItem> items;
    for (const auto& id : item_ids) {
        ContentItem it;
        it.item_id = id;
        Segment seg;
        seg.value = "synthetic item " + id;
        it.segments.push_back(seg);
        items[id] = it;
    }
    out.dataset = link_content(records, items);
    for (const auto& r : out.dataset.interactions) out.true_p.push_back(p_by_row.at(r.row_id));
    return out;
}

}  // namespace kctrace
