#pragma once

// Feature encoders for the logistic KT family: IRT, PFA, DAS3H, AFM, and the
// zero-shot tag set. All counters are causal — a row's features only see
// strictly prior interactions of the same student.

#include <cmath>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "kctrace/ingest.hpp"
#include "kctrace/logistic.hpp"
#include "kctrace/qmatrix.hpp"

namespace kctrace {

inline const std::vector<long long>& default_windows() {
    // 1 h, 1 d, 7 d, 30 d in milliseconds; infinity is the implicit last window
    static const std::vector<long long> w{3600000LL, 86400000LL, 604800000LL, 2592000000LL};
    return w;
}

struct FeatureSpec {
    std::set<std::string> flags;  // subset of {s, sc, tc, tw, w, a}
    std::vector<long long> windows = default_windows();
};

inline void validate_zeroshot_spec(const FeatureSpec& spec) {
    static const std::set<std::string> supported{"s", "sc", "tc", "tw", "w", "a"};
    if (spec.flags.empty()) throw usage_error("feature spec: at least one flag required");
    for (const auto& f : spec.flags)
        if (!supported.count(f)) throw usage_error("feature spec: unsupported flag '" + f + "'");
    for (std::size_t i = 1; i < spec.windows.size(); ++i)
        if (spec.windows[i] <= spec.windows[i - 1])
            throw usage_error("feature spec: windows must be strictly increasing");
}

struct EncodedDataset {
    FeatureMatrix X;
    std::vector<int> y;
    std::vector<std::size_t> row_index;  // index into dataset.interactions
    std::vector<double> l2;
    std::vector<double> lower_bound;
    std::vector<std::size_t> skipped_rows;  // interactions with no Q-matrix row
};

namespace detail {

struct StudentState {
    std::map<int, int> kc_T, kc_S, kc_F;  // per KC index: opportunities/successes/failures
    std::map<int, std::vector<std::pair<long long, int>>> kc_events;  // (time, outcome)
    std::map<std::string, int> item_attempts;
    std::vector<std::pair<long long, int>> all_events;
    int total_attempts = 0;
    int total_wins = 0;

    void update(const TransactionRecord& r, const std::vector<int>& kcs) {
        for (int k : kcs) {
            kc_T[k] += 1;
            (r.outcome ? kc_S[k] : kc_F[k]) += 1;
            kc_events[k].emplace_back(r.timestamp, r.outcome);
        }
        item_attempts[r.problem_id] += 1;
        all_events.emplace_back(r.timestamp, r.outcome);
        total_attempts += 1;
        total_wins += r.outcome;
    }
};

// attempts/wins among events with now - t <= window (strictly prior events only)
inline std::pair<int, int> window_counts(const std::vector<std::pair<long long, int>>& events,
                                         long long now, long long window) {
    int attempts = 0, wins = 0;
    for (const auto& [t, y] : events) {
        if (now - t <= window) {
            ++attempts;
            wins += y;
        }
    }
    return {attempts, wins};
}

template <typename EmitRow>
inline void walk_students(const Dataset& ds, const QMatrix* q, EncodedDataset& out,
                          EmitRow&& emit) {
    std::map<std::string, StudentState> states;
    static const std::vector<int> no_kcs;
    for (std::size_t i = 0; i < ds.interactions.size(); ++i) {
        const auto& r = ds.interactions[i];
        if (q && !q->has_item(r.problem_id)) {
            out.skipped_rows.push_back(i);
            continue;
        }
        const std::vector<int>& kcs = q ? q->kc_set(r.problem_id) : no_kcs;
        StudentState& st = states[r.student_id];
        emit(i, r, kcs, st);
        st.update(r, kcs);
    }
}

}  // namespace detail

inline EncodedDataset encode_irt(const Dataset& ds) {
    EncodedDataset out;
    FeatureIndex fi;
    int bias = fi.get("bias");
    detail::walk_students(ds, nullptr, out,
                          [&](std::size_t i, const TransactionRecord& r,
                              const std::vector<int>&, detail::StudentState&) {
                              SparseRow row;
                              row.add(bias, 1.0);
                              row.add(fi.get("st:" + r.student_id), 1.0);
                              row.add(fi.get("it:" + r.problem_id), 1.0);
                              out.X.rows.push_back(std::move(row));
                              out.y.push_back(r.outcome);
                              out.row_index.push_back(i);
                          });
    out.X.dim = fi.size();
    out.X.names = fi.names();
    double n = static_cast<double>(std::max<std::size_t>(1, out.y.size()));
    out.l2.assign(out.X.dim, 1.0 / n);
    out.l2[bias] = 0.0;
    return out;
}

inline EncodedDataset encode_pfa(const Dataset& ds, const QMatrix& q) {
    EncodedDataset out;
    FeatureIndex fi;
    detail::walk_students(ds, &q, out,
                          [&](std::size_t i, const TransactionRecord& r,
                              const std::vector<int>& kcs, detail::StudentState& st) {
                              SparseRow row;
                              for (int k : kcs) {
                                  std::string ks = q.kcs[k];
                                  row.add(fi.get("pfa_b:" + ks), 1.0);
                                  auto s = st.kc_S.find(k);
                                  auto f = st.kc_F.find(k);
                                  row.add(fi.get("pfa_s:" + ks),
                                          s == st.kc_S.end() ? 0.0 : s->second);
                                  row.add(fi.get("pfa_f:" + ks),
                                          f == st.kc_F.end() ? 0.0 : f->second);
                              }
                              out.X.rows.push_back(std::move(row));
                              out.y.push_back(r.outcome);
                              out.row_index.push_back(i);
                          });
    out.X.dim = fi.size();
    out.X.names = fi.names();
    double n = static_cast<double>(std::max<std::size_t>(1, out.y.size()));
    out.l2.assign(out.X.dim, 1.0 / n);
    return out;
}

inline EncodedDataset encode_das3h(const Dataset& ds, const QMatrix& q,
                                   const std::vector<long long>& windows = default_windows()) {
    EncodedDataset out;
    FeatureIndex fi;
    detail::walk_students(
        ds, &q, out,
        [&](std::size_t i, const TransactionRecord& r, const std::vector<int>& kcs,
            detail::StudentState& st) {
            SparseRow row;
            row.add(fi.get("st:" + r.student_id), 1.0);
            row.add(fi.get("it:" + r.problem_id), 1.0);
            for (int k : kcs) {
                std::string ks = q.kcs[k];
                row.add(fi.get("kc:" + ks), 1.0);
                auto ev = st.kc_events.find(k);
                static const std::vector<std::pair<long long, int>> none;
                const auto& events = ev == st.kc_events.end() ? none : ev->second;
                for (std::size_t wi = 0; wi <= windows.size(); ++wi) {
                    bool inf = wi == windows.size();
                    auto [attempts, wins] = detail::window_counts(
                        events, r.timestamp,
                        inf ? std::numeric_limits<long long>::max() : windows[wi]);
                    std::string tag = inf ? "inf" : std::to_string(windows[wi]);
                    row.add(fi.get("das3h_a:" + ks + ":" + tag), std::log1p(attempts));
                    row.add(fi.get("das3h_w:" + ks + ":" + tag), std::log1p(wins));
                }
            }
            out.X.rows.push_back(std::move(row));
            out.y.push_back(r.outcome);
            out.row_index.push_back(i);
        });
    out.X.dim = fi.size();
    out.X.names = fi.names();
    double n = static_cast<double>(std::max<std::size_t>(1, out.y.size()));
    out.l2.assign(out.X.dim, 1.0 / n);
    return out;
}

// AFM: logit = theta_student + sum_k Q_jk (beta_k + gamma_k * T_k), gamma >= 0.
// Student weights carry the reference implementation's unit-sum-form ridge
// (1/n in mean form); KC weights are unregularized.
inline EncodedDataset encode_afm(const Dataset& ds, const QMatrix& q,
                                 double student_l2_sum_form = 1.0) {
    EncodedDataset out;
    FeatureIndex fi;
    std::set<int> student_features;
    std::set<int> gamma_features;
    detail::walk_students(ds, &q, out,
                          [&](std::size_t i, const TransactionRecord& r,
                              const std::vector<int>& kcs, detail::StudentState& st) {
                              SparseRow row;
                              int sf = fi.get("st:" + r.student_id);
                              student_features.insert(sf);
                              row.add(sf, 1.0);
                              for (int k : kcs) {
                                  std::string ks = q.kcs[k];
                                  row.add(fi.get("afm_b:" + ks), 1.0);
                                  int gf = fi.get("afm_g:" + ks);
                                  gamma_features.insert(gf);
                                  auto t = st.kc_T.find(k);
                                  row.add(gf, t == st.kc_T.end() ? 0.0 : t->second);
                              }
                              out.X.rows.push_back(std::move(row));
                              out.y.push_back(r.outcome);
                              out.row_index.push_back(i);
                          });
    out.X.dim = fi.size();
    out.X.names = fi.names();
    double n = static_cast<double>(std::max<std::size_t>(1, out.y.size()));
    out.l2.assign(out.X.dim, 0.0);
    for (int sf : student_features) out.l2[sf] = student_l2_sum_form / n;
    out.lower_bound.assign(out.X.dim, -std::numeric_limits<double>::infinity());
    for (int gf : gamma_features) out.lower_bound[gf] = 0.0;
    return out;
}

inline EncodedDataset encode_zeroshot(const Dataset& ds, const QMatrix& q,
                                      const FeatureSpec& spec) {
    validate_zeroshot_spec(spec);
    EncodedDataset out;
    FeatureIndex fi;
    const auto& windows = spec.windows;
    detail::walk_students(
        ds, &q, out,
        [&](std::size_t i, const TransactionRecord& r, const std::vector<int>& kcs,
            detail::StudentState& st) {
            SparseRow row;
            for (int k : kcs) {
                std::string ks = q.kcs[k];
                if (spec.flags.count("s")) row.add(fi.get("zs_s:" + ks), 1.0);
                if (spec.flags.count("sc")) {
                    auto t = st.kc_T.find(k);
                    auto s = st.kc_S.find(k);
                    row.add(fi.get("zs_sc_a:" + ks),
                            std::log1p(t == st.kc_T.end() ? 0 : t->second));
                    row.add(fi.get("zs_sc_w:" + ks),
                            std::log1p(s == st.kc_S.end() ? 0 : s->second));
                }
            }
            if (spec.flags.count("tc")) row.add(fi.get("zs_tc"), std::log1p(st.total_attempts));
            if (spec.flags.count("w")) row.add(fi.get("zs_w"), std::log1p(st.total_wins));
            if (spec.flags.count("a")) {
                auto it = st.item_attempts.find(r.problem_id);
                row.add(fi.get("zs_a"),
                        std::log1p(it == st.item_attempts.end() ? 0 : it->second));
            }
            if (spec.flags.count("tw")) {
                for (std::size_t wi = 0; wi <= windows.size(); ++wi) {
                    bool inf = wi == windows.size();
                    auto [attempts, wins] = detail::window_counts(
                        st.all_events, r.timestamp,
                        inf ? std::numeric_limits<long long>::max() : windows[wi]);
                    std::string tag = inf ? "inf" : std::to_string(windows[wi]);
                    row.add(fi.get("zs_tw_a:" + tag), std::log1p(attempts));
                    row.add(fi.get("zs_tw_w:" + tag), std::log1p(wins));
                }
            }
            out.X.rows.push_back(std::move(row));
            out.y.push_back(r.outcome);
            out.row_index.push_back(i);
        });
    out.X.dim = fi.size();
    out.X.names = fi.names();
    double n = static_cast<double>(std::max<std::size_t>(1, out.y.size()));
    out.l2.assign(out.X.dim, 1.0 / n);
    return out;
}

// Global-history baseline with no skill information: per-row prior total
// successes and failures plus a bias. Used as the chance-level reference for
// the random-KC comparison.
inline EncodedDataset encode_noskill(const Dataset& ds) {
    EncodedDataset out;
    FeatureIndex fi;
    int bias = fi.get("bias");
    int sf = fi.get("glob_s");
    int ff = fi.get("glob_f");
    detail::walk_students(ds, nullptr, out,
                          [&](std::size_t i, const TransactionRecord& r,
                              const std::vector<int>&, detail::StudentState& st) {
                              SparseRow row;
                              row.add(bias, 1.0);
                              row.add(sf, st.total_wins);
                              row.add(ff, st.total_attempts - st.total_wins);
                              out.X.rows.push_back(std::move(row));
                              out.y.push_back(r.outcome);
                              out.row_index.push_back(i);
                          });
    out.X.dim = fi.size();
    out.X.names = fi.names();
    double n = static_cast<double>(std::max<std::size_t>(1, out.y.size()));
    out.l2.assign(out.X.dim, 1.0 / n);
    out.l2[bias] = 0.0;
    return out;
}

}  // namespace kctrace
