#pragma once

// Q-matrix construction from cluster assignments, human labels, or a random
// baseline, plus the joint-skill collapse used by single-skill models.

#include <algorithm>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "kctrace/cluster.hpp"
#include "kctrace/ingest.hpp"
#include "kctrace/util.hpp"

namespace kctrace {

struct QMatrix {
    std::string source;                  // "llm", "human:<model>", "random:<seed>"
    std::vector<std::string> kcs;        // ordered KC ids
    std::vector<std::string> items;      // ordered item ids
    std::map<std::string, std::vector<int>> rows;  // item -> sorted distinct kc indices

    const std::vector<int>& kc_set(const std::string& item) const {
        static const std::vector<int> empty;
        auto it = rows.find(item);
        return it == rows.end() ? empty : it->second;
    }
    bool has_item(const std::string& item) const { return rows.count(item) != 0; }
};

inline void validate_qmatrix(const QMatrix& q) {
    std::vector<int> kc_use(q.kcs.size(), 0);
    for (const auto& item : q.items) {
        auto it = q.rows.find(item);
        if (it == q.rows.end() || it->second.empty())
            throw data_error("qmatrix: item '" + item + "' has no KCs");
        const auto& row = it->second;
        for (std::size_t i = 0; i < row.size(); ++i) {
            if (row[i] < 0 || row[i] >= static_cast<int>(q.kcs.size()))
                throw data_error("qmatrix: kc index out of range on item '" + item + "'");
            if (i > 0 && row[i] <= row[i - 1])
                throw data_error("qmatrix: row not sorted/distinct on item '" + item + "'");
            ++kc_use[row[i]];
        }
    }
    for (std::size_t k = 0; k < kc_use.size(); ++k)
        if (kc_use[k] == 0) throw data_error("qmatrix: kc '" + q.kcs[k] + "' tags no item");
}

struct BuildQResult {
    QMatrix q;
    std::vector<std::string> excluded_items;  // zero extracted KCs
};

// row_items[i] is the item that produced embedding row i of the cluster model.
inline BuildQResult build_qmatrix(const ClusterModel& model,
                                  const std::vector<std::string>& row_items,
                                  const std::vector<std::string>& all_items) {
    if (row_items.size() != model.assignment.size())
        throw data_error("build_qmatrix: row/assignment size mismatch");
    std::map<std::string, std::set<int>> sets;
    for (std::size_t i = 0; i < row_items.size(); ++i)
        sets[row_items[i]].insert(model.assignment[i]);

    BuildQResult out;
    out.q.source = "llm";
    std::set<int> used;
    for (const auto& [item, s] : sets)
        for (int c : s) used.insert(c);
    std::map<int, int> dense;  // cluster id -> kc index
    for (int c : used) {
        dense[c] = static_cast<int>(out.q.kcs.size());
        out.q.kcs.push_back(std::to_string(c));
    }
    for (const auto& item : all_items) {
        auto it = sets.find(item);
        if (it == sets.end() || it->second.empty()) {
            out.excluded_items.push_back(item);
            continue;
        }
        std::vector<int> row;
        for (int c : it->second) row.push_back(dense[c]);
        std::sort(row.begin(), row.end());
        out.q.items.push_back(item);
        out.q.rows[item] = std::move(row);
    }
    if (out.q.items.empty()) throw data_error("build_qmatrix: all items excluded");
    validate_qmatrix(out.q);
    return out;
}

struct JointSkillMap {
    std::vector<std::vector<int>> joint_sets;  // joint id -> canonical kc index set
    std::map<std::string, int> item_to_joint;
    std::size_t count() const { return joint_sets.size(); }
};

// Joint ids in first-appearance order over the item list.
inline JointSkillMap joint_skills(const QMatrix& q) {
    JointSkillMap out;
    std::map<std::vector<int>, int> seen;
    for (const auto& item : q.items) {
        const auto& row = q.rows.at(item);  // already sorted + distinct
        auto it = seen.find(row);
        if (it == seen.end()) {
            int id = static_cast<int>(out.joint_sets.size());
            seen.emplace(row, id);
            out.joint_sets.push_back(row);
            out.item_to_joint[item] = id;
        } else {
            out.item_to_joint[item] = it->second;
        }
    }
    return out;
}

inline QMatrix random_qmatrix(const QMatrix& tmpl, std::uint64_t seed) {
    Rng rng(seed);
    QMatrix out;
    out.source = "random:" + std::to_string(seed);
    out.kcs = tmpl.kcs;
    out.items = tmpl.items;
    const int K = static_cast<int>(tmpl.kcs.size());
    std::vector<int> pool(K);
    for (const auto& item : tmpl.items) {
        std::size_t c = tmpl.rows.at(item).size();
        for (int i = 0; i < K; ++i) pool[i] = i;
        // partial Fisher-Yates: first c entries form a uniform c-subset
        for (std::size_t j = 0; j < c; ++j) {
            std::size_t pick = j + rng.bounded(K - j);
            std::swap(pool[j], pool[pick]);
        }
        std::vector<int> row(pool.begin(), pool.begin() + c);
        std::sort(row.begin(), row.end());
        out.rows[item] = std::move(row);
    }
    // a uniform draw can leave a KC unused; that is fine for a baseline
    // (the KC becomes a dead feature), so no validation here
    return out;
}

inline QMatrix human_qmatrix(const Dataset& ds, const std::string& model_name) {
    auto it = ds.kc_models.find(model_name);
    if (it == ds.kc_models.end()) {
        std::string avail;
        for (const auto& [name, _] : ds.kc_models) avail += (avail.empty() ? "" : ", ") + name;
        throw data_error("human_qmatrix: unknown KC model '" + model_name + "' (available: " +
                         (avail.empty() ? "none" : avail) + ")");
    }
    QMatrix q;
    q.source = "human:" + model_name;
    std::set<std::string> labels;
    for (const auto& [item, ls] : it->second)
        for (const auto& l : ls) labels.insert(l);
    std::map<std::string, int> dense;
    for (const auto& l : labels) {
        dense[l] = static_cast<int>(q.kcs.size());
        q.kcs.push_back(l);
    }
    for (const auto& [item, ls] : it->second) {
        if (ls.empty()) continue;
        std::vector<int> row;
        for (const auto& l : ls) row.push_back(dense[l]);
        std::sort(row.begin(), row.end());
        q.items.push_back(item);
        q.rows[item] = std::move(row);
    }
    if (q.items.empty()) throw data_error("human_qmatrix: no labeled items for '" + model_name + "'");
    validate_qmatrix(q);
    return q;
}

struct FeasibilityResult {
    bool feasible = false;
    std::vector<std::string> witness;  // violating KC ids
};

// Full coverage check: every KC must tag at least one item on each side.
// With restrict_to_test_kcs, only KCs appearing on test items need train
// coverage (the zero-shot requirement).
inline FeasibilityResult kc_split_feasible(const QMatrix& q, const std::set<std::string>& test_items,
                                           bool restrict_to_test_kcs = false) {
    std::vector<int> train_count(q.kcs.size(), 0), test_count(q.kcs.size(), 0);
    for (const auto& item : q.items) {
        bool is_test = test_items.count(item) != 0;
        for (int k : q.rows.at(item)) (is_test ? test_count : train_count)[k] += 1;
    }
    FeasibilityResult res;
    res.feasible = true;
    for (std::size_t k = 0; k < q.kcs.size(); ++k) {
        bool bad = restrict_to_test_kcs ? (test_count[k] > 0 && train_count[k] == 0)
                                        : (train_count[k] == 0 || test_count[k] == 0);
        if (bad) {
            res.feasible = false;
            res.witness.push_back(q.kcs[k]);
        }
    }
    return res;
}

struct QStats {
    std::size_t n_items = 0;
    std::size_t n_kcs = 0;
    double avg_kcs_per_item = 0.0;
    double pct_multi_kc = 0.0;
};

inline QStats qmatrix_stats(const QMatrix& q) {
    QStats s;
    s.n_items = q.items.size();
    s.n_kcs = q.kcs.size();
    std::size_t total = 0, multi = 0;
    for (const auto& item : q.items) {
        std::size_t c = q.rows.at(item).size();
        total += c;
        if (c > 1) ++multi;
    }
    if (s.n_items) {
        s.avg_kcs_per_item = static_cast<double>(total) / static_cast<double>(s.n_items);
        s.pct_multi_kc = 100.0 * static_cast<double>(multi) / static_cast<double>(s.n_items);
    }
    return s;
}

// ---- serialization ----

inline nlohmann::json qmatrix_to_json(const QMatrix& q) {
    nlohmann::json j;
    j["source"] = q.source;
    j["kcs"] = q.kcs;
    auto& items = j["items"] = nlohmann::json::array();
    for (const auto& item : q.items) {
        nlohmann::json row = {{"item_id", item}, {"kc_ids", nlohmann::json::array()}};
        for (int k : q.rows.at(item)) row["kc_ids"].push_back(q.kcs[k]);
        items.push_back(std::move(row));
    }
    return j;
}

inline QMatrix qmatrix_from_json(const nlohmann::json& j) {
    QMatrix q;
    q.source = j.at("source").get<std::string>();
    q.kcs = j.at("kcs").get<std::vector<std::string>>();
    std::map<std::string, int> dense;
    for (std::size_t i = 0; i < q.kcs.size(); ++i) dense[q.kcs[i]] = static_cast<int>(i);
    for (const auto& ji : j.at("items")) {
        std::string item = ji.at("item_id").get<std::string>();
        std::vector<int> row;
        for (const auto& kc : ji.at("kc_ids")) {
            auto it = dense.find(kc.get<std::string>());
            if (it == dense.end()) throw data_error("qmatrix json: kc id not in kcs list");
            row.push_back(it->second);
        }
        std::sort(row.begin(), row.end());
        q.items.push_back(item);
        q.rows[item] = std::move(row);
    }
    validate_qmatrix(q);
    return q;
}

}  // namespace kctrace
