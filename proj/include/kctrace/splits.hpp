#pragma once

// Cross-validation split plans: row-stratified, student-blocked, item-blocked,
// and the item-disjoint zero-shot split with KC coverage guarantees.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "kctrace/ingest.hpp"
#include "kctrace/qmatrix.hpp"
#include "kctrace/util.hpp"

namespace kctrace {

enum class Regime { Stratified, StudentBlocked, ItemBlocked, ZeroshotItemDisjoint };

inline std::string regime_name(Regime r) {
    switch (r) {
        case Regime::Stratified: return "stratified";
        case Regime::StudentBlocked: return "student_blocked";
        case Regime::ItemBlocked: return "item_blocked";
        case Regime::ZeroshotItemDisjoint: return "zeroshot_item_disjoint";
    }
    return "?";
}

struct SplitPlan {
    Regime regime = Regime::Stratified;
    int folds = 3;
    std::vector<int> assignments;  // interaction index -> fold
    std::uint64_t seed = 0;
};

// Rows held out for fold f (test side) and the complement (train side).
inline std::vector<std::size_t> fold_rows(const SplitPlan& plan, int fold, bool held_out) {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < plan.assignments.size(); ++i)
        if ((plan.assignments[i] == fold) == held_out) out.push_back(i);
    return out;
}

namespace detail {

// Deterministic entity -> fold map: sort, shuffle, deal round-robin.
inline std::map<std::string, int> deal_entities(std::set<std::string> entities, int k, Rng& rng,
                                                const char* what) {
    if (static_cast<int>(entities.size()) < k)
        throw data_error(std::string("make_split: fewer ") + what + " (" +
                         std::to_string(entities.size()) + ") than folds (" + std::to_string(k) +
                         ")");
    std::vector<std::string> order(entities.begin(), entities.end());
    rng.shuffle(order);
    std::map<std::string, int> fold;
    for (std::size_t i = 0; i < order.size(); ++i)
        fold[order[i]] = static_cast<int>(i % static_cast<std::size_t>(k));
    return fold;
}

}  // namespace detail

inline SplitPlan make_split(const Dataset& ds, Regime regime, int k, std::uint64_t seed) {
    if (ds.interactions.empty()) throw data_error("make_split: empty dataset");
    if (k < 2) throw usage_error("make_split: need at least 2 folds");
    SplitPlan plan;
    plan.regime = regime;
    plan.folds = k;
    plan.seed = seed;
    plan.assignments.assign(ds.interactions.size(), -1);
    Rng rng(seed);

    if (regime == Regime::Stratified) {
        if (static_cast<int>(ds.interactions.size()) < k)
            throw data_error("make_split: fewer rows (" + std::to_string(ds.interactions.size()) +
                             ") than folds (" + std::to_string(k) + ")");
        // group rows by (student, outcome); shuffle within a group; deal each
        // group round-robin off a rolling counter so fold sizes stay balanced
        std::map<std::pair<std::string, int>, std::vector<std::size_t>> groups;
        for (std::size_t i = 0; i < ds.interactions.size(); ++i)
            groups[{ds.interactions[i].student_id, ds.interactions[i].outcome}].push_back(i);
        std::size_t next = 0;
        for (auto& [key, rows] : groups) {
            rng.shuffle(rows);
            for (std::size_t r : rows) plan.assignments[r] = static_cast<int>(next++ % k);
        }
        return plan;
    }

    if (regime == Regime::StudentBlocked || regime == Regime::ItemBlocked) {
        bool by_student = regime == Regime::StudentBlocked;
        std::set<std::string> entities;
        for (const auto& r : ds.interactions)
            entities.insert(by_student ? r.student_id : r.problem_id);
        auto fold = detail::deal_entities(std::move(entities), k, rng,
                                          by_student ? "students" : "items");
        for (std::size_t i = 0; i < ds.interactions.size(); ++i)
            plan.assignments[i] =
                fold.at(by_student ? ds.interactions[i].student_id : ds.interactions[i].problem_id);
        return plan;
    }

    throw usage_error("make_split: zero-shot plans come from make_zeroshot_split");
}

// Item-disjoint split where every KC seen on a test item is still covered by
// at least one train item. Greedy seeded sampling; items whose removal would
// orphan a KC stay in train. Fold 0 = train, fold 1 = test.
inline SplitPlan make_zeroshot_split(const Dataset& ds, const QMatrix& q, double test_fraction,
                                     std::uint64_t seed) {
    if (ds.interactions.empty()) throw data_error("make_zeroshot_split: empty dataset");
    if (!(test_fraction > 0.0 && test_fraction < 1.0))
        throw usage_error("make_zeroshot_split: test_fraction must be in (0,1)");
    validate_qmatrix(q);

    // candidates: dataset items the q-matrix knows about
    std::set<std::string> eligible;
    for (const auto& [id, item] : ds.items)
        if (q.rows.count(id)) eligible.insert(id);
    if (eligible.empty()) throw data_error("make_zeroshot_split: q-matrix covers no dataset items");

    std::map<std::string, int> train_count;  // KC id -> remaining train items
    for (const auto& id : eligible)
        for (int k : q.rows.at(id)) train_count[q.kcs[static_cast<std::size_t>(k)]] += 1;

    std::size_t target = static_cast<std::size_t>(
        std::llround(test_fraction * static_cast<double>(eligible.size())));
    if (target == 0) target = 1;
    if (target >= eligible.size()) target = eligible.size() - 1;

    std::vector<std::string> order(eligible.begin(), eligible.end());
    Rng rng(seed);
    rng.shuffle(order);

    std::set<std::string> test_items;
    std::set<std::string> blockers;
    for (const auto& id : order) {
        if (test_items.size() >= target) break;
        bool ok = true;
        for (int k : q.rows.at(id)) {
            if (train_count.at(q.kcs[static_cast<std::size_t>(k)]) < 2) {
                ok = false;
                blockers.insert(q.kcs[static_cast<std::size_t>(k)]);
            }
        }
        if (!ok) continue;
        test_items.insert(id);
        for (int k : q.rows.at(id)) train_count.at(q.kcs[static_cast<std::size_t>(k)]) -= 1;
    }
    if (test_items.size() < target) {
        std::vector<std::string> witness(blockers.begin(), blockers.end());
        throw data_error("make_zeroshot_split: cannot reach test fraction " +
                         std::to_string(test_fraction) + "; blocking KCs: " + join(witness, ", "));
    }
    auto feas = kc_split_feasible(q, test_items, /*restrict_to_test_kcs=*/true);
    if (!feas.feasible)
        throw data_error("make_zeroshot_split: coverage check failed for KCs: " +
                         join(feas.witness, ", "));

    SplitPlan plan;
    plan.regime = Regime::ZeroshotItemDisjoint;
    plan.folds = 2;
    plan.seed = seed;
    plan.assignments.assign(ds.interactions.size(), 0);
    for (std::size_t i = 0; i < ds.interactions.size(); ++i)
        if (test_items.count(ds.interactions[i].problem_id)) plan.assignments[i] = 1;
    return plan;
}

}  // namespace kctrace
