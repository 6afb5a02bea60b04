#pragma once

// Evaluation harness: fits the KT models under the CV regimes, pools held-out
// predictions, and renders the source x model / source x regime tables plus
// per-k curves.

#include <cstdint>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "kctrace/features.hpp"
#include "kctrace/ingest.hpp"
#include "kctrace/logistic.hpp"
#include "kctrace/metrics.hpp"
#include "kctrace/neural.hpp"
#include "kctrace/qmatrix.hpp"
#include "kctrace/splits.hpp"

namespace kctrace {

struct PredRow {
    std::string student_id;
    std::string item_id;
    long long timestamp = 0;
    double p = 0.5;
    int y = 0;
    int fold = 0;
    std::string regime;
};
using PredictionTable = std::vector<PredRow>;

struct CellMetrics {
    std::string kc_source;  // none | random | llm | human | ...
    std::string model;      // AFM | IRT | PFA | DAS3H | DKT | SAKT
    std::string regime;
    bool present = true;   // false: cell not applicable (marked, never skipped)
    std::string note;
    std::optional<double> auc;
    double rmse = 0.0;
    double accuracy = 0.0;
    std::size_t n_rows = 0;
    std::vector<double> fold_rmse;
    std::vector<std::size_t> fold_rows;
};

struct EvalReport {
    std::vector<CellMetrics> cells;
    PredictionTable predictions;
};

namespace detail {

inline CellMetrics score_cell(const std::string& source, const std::string& model,
                              const std::string& regime, const PredictionTable& preds) {
    CellMetrics c;
    c.kc_source = source;
    c.model = model;
    c.regime = regime;
    c.n_rows = preds.size();
    std::vector<int> y;
    std::vector<double> p;
    int max_fold = -1;
    for (const auto& r : preds) {
        y.push_back(r.y);
        p.push_back(r.p);
        max_fold = std::max(max_fold, r.fold);
    }
    c.rmse = rmse(y, p);
    c.accuracy = accuracy(y, p);
    c.auc = auc_score(y, p);
    c.fold_rmse.assign(static_cast<std::size_t>(max_fold) + 1, 0.0);
    c.fold_rows.assign(static_cast<std::size_t>(max_fold) + 1, 0);
    for (int f = 0; f <= max_fold; ++f) {
        std::vector<int> fy;
        std::vector<double> fp;
        for (const auto& r : preds)
            if (r.fold == f) {
                fy.push_back(r.y);
                fp.push_back(r.p);
            }
        if (!fy.empty()) c.fold_rmse[static_cast<std::size_t>(f)] = rmse(fy, fp);
        c.fold_rows[static_cast<std::size_t>(f)] = fy.size();
    }
    return c;
}

// Fit on the rows outside each fold, predict the fold, pool everything.
inline PredictionTable crossfit_logistic(const Dataset& ds, const EncodedDataset& enc,
                                         const SplitPlan& plan, std::uint64_t seed) {
    PredictionTable preds;
    for (int f = 0; f < plan.folds; ++f) {
        FitOptions opt;
        opt.l2 = enc.l2;
        opt.lower_bound = enc.lower_bound;
        opt.seed = seed;
        bool any_test = false;
        for (std::size_t i = 0; i < enc.row_index.size(); ++i) {
            if (plan.assignments[enc.row_index[i]] == f)
                any_test = true;
            else
                opt.fit_rows.push_back(i);
        }
        if (!any_test) continue;
        if (opt.fit_rows.empty())
            throw data_error("eval: fold " + std::to_string(f) + " leaves no training rows");
        auto model = fit_logistic(enc.X, enc.y, opt);
        auto p = predict(model, enc.X);
        for (std::size_t i = 0; i < enc.row_index.size(); ++i) {
            if (plan.assignments[enc.row_index[i]] != f) continue;
            const auto& r = ds.interactions[enc.row_index[i]];
            preds.push_back({r.student_id, r.problem_id, r.timestamp, p[i], enc.y[i], f,
                             regime_name(plan.regime)});
        }
    }
    return preds;
}

// Collapse a k-fold plan into one train/test split: fold 0 stays the held-out
// side, every other fold becomes train-only. crossfit then evaluates fold 0.
inline SplitPlan single_test_fold(const SplitPlan& plan) {
    SplitPlan out = plan;
    out.folds = 1;
    for (auto& a : out.assignments) a = a == 0 ? 0 : 1;
    return out;
}

}  // namespace detail

// AFM under each requested regime; RMSE per cell is the full cross-validation
// score (pooled over held-out folds).
inline EvalReport run_afm_eval(const Dataset& ds, const QMatrix& q,
                               const std::vector<Regime>& regimes, int folds = 3,
                               std::uint64_t seed = 42, const std::string& source_label = "llm") {
    EvalReport report;
    auto enc = encode_afm(ds, q);
    if (enc.y.empty()) throw data_error("run_afm_eval: q-matrix covers no interactions");
    for (Regime regime : regimes) {
        auto plan = regime == Regime::ZeroshotItemDisjoint
                        ? make_zeroshot_split(ds, q, 1.0 / folds, seed)
                        : make_split(ds, regime, folds, seed);
        if (regime == Regime::ZeroshotItemDisjoint) {
            // a zero-shot plan is one train/test split, not k folds: score only
            // the held-out item side (fold 1), never the train side
            plan.folds = 1;
            for (auto& a : plan.assignments) a = a == 1 ? 0 : 1;
        }
        auto preds = detail::crossfit_logistic(ds, enc, plan, seed);
        report.cells.push_back(
            detail::score_cell(source_label, "AFM", regime_name(regime), preds));
        report.predictions.insert(report.predictions.end(), preds.begin(), preds.end());
    }
    return report;
}

// ---- knowledge-tracing grid -------------------------------------------

struct KtOptions {
    int folds = 5;  // student-blocked; fold 0 is the test side (1/folds of students)
    std::uint64_t seed = 42;
    int dkt_hidden = 32;
    int sakt_embed = 32;
    int sakt_context = 100;
    double lr = 0.5;
    int epochs = 30;
    int batch_size = 8;
    bool keep_predictions = false;
};

namespace detail {

// Per-student joint-skill sequences, in interaction order. Items without a
// q-matrix row are skipped, mirroring the logistic encoders.
inline std::vector<SkillSequence> skill_sequences(const Dataset& ds, const QMatrix& q,
                                                  const JointSkillMap& joint) {
    std::vector<SkillSequence> out;
    for (const auto& r : ds.interactions) {
        auto it = joint.item_to_joint.find(r.problem_id);
        if (it == joint.item_to_joint.end()) continue;
        if (out.empty() || out.back().student_id != r.student_id) {
            out.push_back({});
            out.back().student_id = r.student_id;
        }
        out.back().steps.push_back({it->second, r.outcome, r.timestamp, r.problem_id});
    }
    return out;
}

template <class Model, class Train, class Predict>
PredictionTable run_neural_cell(const Dataset& ds, const QMatrix& q, const SplitPlan& plan,
                                Model model, Train train, Predict predict_seq,
                                std::uint64_t seed) {
    auto joint = joint_skills(q);
    auto seqs = skill_sequences(ds, q, joint);
    // student fold from any of the student's rows
    std::map<std::string, int> student_fold;
    for (std::size_t i = 0; i < ds.interactions.size(); ++i)
        student_fold[ds.interactions[i].student_id] = plan.assignments[i];
    std::vector<SkillSequence> train_seqs, test_seqs;
    for (auto& s : seqs)
        (student_fold.at(s.student_id) == 0 ? test_seqs : train_seqs).push_back(std::move(s));
    if (train_seqs.empty() || test_seqs.empty())
        throw data_error("run_kt_eval: neural split left an empty side");
    train(model, train_seqs, seed);
    PredictionTable preds;
    for (const auto& s : test_seqs) {
        auto p = predict_seq(model, s);
        std::size_t t = 0;
        for (const auto& step : s.steps) {
            double clipped = std::min(std::max(p[t], 1e-6), 1.0 - 1e-6);
            preds.push_back({s.student_id, step.item_id, step.timestamp, clipped, step.outcome,
                             0, "student_blocked"});
            ++t;
        }
    }
    return preds;
}

}  // namespace detail

// Grid evaluation: for each KC source and KT model, student-blocked 80/20
// train/test, AUC on the held-out students. IRT ignores KCs and runs only
// under the "none" source; KC-dependent models are marked absent there.
inline EvalReport run_kt_eval(const Dataset& ds,
                              const std::vector<std::pair<std::string, const QMatrix*>>& sources,
                              const std::vector<std::string>& models, const KtOptions& opt = {}) {
    EvalReport report;
    auto plan = make_split(ds, Regime::StudentBlocked, opt.folds, opt.seed);
    const std::string regime = "student_blocked";
    for (const auto& [source, qp] : sources) {
        bool has_q = qp != nullptr;
        if (has_q) validate_qmatrix(*qp);
        for (const auto& model : models) {
            CellMetrics cell;
            cell.kc_source = source;
            cell.model = model;
            cell.regime = regime;
            if (model == "IRT") {
                if (has_q) {
                    cell.present = false;
                    cell.note = "IRT uses no KCs; evaluated under source 'none'";
                    report.cells.push_back(cell);
                    continue;
                }
                auto enc = encode_irt(ds);
                auto preds = detail::crossfit_logistic(
                    ds, enc, detail::single_test_fold(plan), opt.seed);
                cell = detail::score_cell(source, model, regime, preds);
                if (opt.keep_predictions)
                    report.predictions.insert(report.predictions.end(), preds.begin(),
                                              preds.end());
                report.cells.push_back(cell);
                continue;
            }
            if (!has_q) {
                cell.present = false;
                cell.note = "model needs a q-matrix; source 'none' carries no KCs";
                report.cells.push_back(cell);
                continue;
            }
            PredictionTable preds;
            if (model == "PFA" || model == "DAS3H") {
                auto enc = model == "PFA" ? encode_pfa(ds, *qp) : encode_das3h(ds, *qp);
                if (enc.y.empty()) {
                    cell.present = false;
                    cell.note = "q-matrix covers no interactions";
                    report.cells.push_back(cell);
                    continue;
                }
                preds = detail::crossfit_logistic(ds, enc, detail::single_test_fold(plan),
                                                  opt.seed);
            } else if (model == "DKT") {
                auto joint = joint_skills(*qp);
                DktConfig cfg;
                cfg.n_skills = static_cast<int>(joint.count());
                cfg.hidden = opt.dkt_hidden;
                cfg.lr = opt.lr;
                cfg.epochs = opt.epochs;
                cfg.batch_size = opt.batch_size;
                preds = detail::run_neural_cell(
                    ds, *qp, plan, dkt_init(cfg, opt.seed),
                    [&](DktModel& m, const std::vector<SkillSequence>& tr, std::uint64_t s) {
                        train_dkt(m, tr, nullptr, s);
                    },
                    [](const DktModel& m, const SkillSequence& s) { return dkt_predict(m, s); },
                    opt.seed);
            } else if (model == "SAKT") {
                auto joint = joint_skills(*qp);
                SaktConfig cfg;
                cfg.n_skills = static_cast<int>(joint.count());
                cfg.embed = opt.sakt_embed;
                cfg.max_context = opt.sakt_context;
                cfg.lr = opt.lr;
                cfg.epochs = opt.epochs;
                cfg.batch_size = opt.batch_size;
                preds = detail::run_neural_cell(
                    ds, *qp, plan, sakt_init(cfg, opt.seed),
                    [&](SaktModel& m, const std::vector<SkillSequence>& tr, std::uint64_t s) {
                        train_sakt(m, tr, nullptr, s);
                    },
                    [](const SaktModel& m, const SkillSequence& s) { return sakt_predict(m, s); },
                    opt.seed);
            } else {
                throw usage_error("run_kt_eval: unknown model '" + model + "'");
            }
            cell = detail::score_cell(source, model, regime, preds);
            if (opt.keep_predictions)
                report.predictions.insert(report.predictions.end(), preds.begin(), preds.end());
            report.cells.push_back(cell);
        }
    }
    return report;
}

// ---- renderers ---------------------------------------------------------

namespace detail {

inline std::string fmt3(double v) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(3) << v;
    return os.str();
}

}  // namespace detail

// Source x regime RMSE grid for one model (AFM by default).
inline std::string render_rmse_table(const EvalReport& report, const std::string& model = "AFM") {
    std::vector<std::string> sources;
    std::vector<std::string> regimes;
    std::map<std::pair<std::string, std::string>, const CellMetrics*> at;
    for (const auto& c : report.cells) {
        if (c.model != model) continue;
        if (std::find(sources.begin(), sources.end(), c.kc_source) == sources.end())
            sources.push_back(c.kc_source);
        if (std::find(regimes.begin(), regimes.end(), c.regime) == regimes.end())
            regimes.push_back(c.regime);
        at[{c.kc_source, c.regime}] = &c;
    }
    std::size_t w0 = 10;
    for (const auto& s : sources) w0 = std::max(w0, s.size() + 2);
    std::ostringstream os;
    os << std::left << std::setw(static_cast<int>(w0)) << "KC Source";
    for (const auto& r : regimes) os << std::right << std::setw(16) << r;
    os << "\n";
    for (const auto& s : sources) {
        os << std::left << std::setw(static_cast<int>(w0)) << s;
        for (const auto& r : regimes) {
            auto it = at.find({s, r});
            std::string v = it == at.end() || !it->second->present
                                ? "-"
                                : detail::fmt3(it->second->rmse);
            os << std::right << std::setw(16) << v;
        }
        os << "\n";
    }
    return os.str();
}

// Source x model AUC grid (the KT comparison shape).
inline std::string render_auc_table(const EvalReport& report) {
    std::vector<std::string> sources, models;
    std::map<std::pair<std::string, std::string>, const CellMetrics*> at;
    for (const auto& c : report.cells) {
        if (std::find(sources.begin(), sources.end(), c.kc_source) == sources.end())
            sources.push_back(c.kc_source);
        if (std::find(models.begin(), models.end(), c.model) == models.end())
            models.push_back(c.model);
        at[{c.kc_source, c.model}] = &c;
    }
    std::size_t w0 = 10;
    for (const auto& s : sources) w0 = std::max(w0, s.size() + 2);
    std::ostringstream os;
    os << std::left << std::setw(static_cast<int>(w0)) << "KC Source";
    for (const auto& m : models) os << std::right << std::setw(10) << m;
    os << "\n";
    for (const auto& s : sources) {
        os << std::left << std::setw(static_cast<int>(w0)) << s;
        for (const auto& m : models) {
            auto it = at.find({s, m});
            std::string v = "-";
            if (it != at.end() && it->second->present && it->second->auc)
                v = detail::fmt3(*it->second->auc);
            os << std::right << std::setw(10) << v;
        }
        os << "\n";
    }
    return os.str();
}

inline std::string report_to_csv(const EvalReport& report) {
    std::ostringstream os;
    os << "kc_source,model,regime,present,n_rows,auc,rmse,accuracy,note\n";
    for (const auto& c : report.cells) {
        os << c.kc_source << ',' << c.model << ',' << c.regime << ','
           << (c.present ? "yes" : "no") << ',' << c.n_rows << ',';
        if (c.present && c.auc) os << detail::fmt3(*c.auc);
        os << ',';
        if (c.present) os << detail::fmt3(c.rmse);
        os << ',';
        if (c.present) os << detail::fmt3(c.accuracy);
        os << ',' << c.note << "\n";
    }
    return os.str();
}

inline nlohmann::ordered_json eval_report_to_json(const EvalReport& report) {
    nlohmann::ordered_json cells = nlohmann::ordered_json::array();
    for (const auto& c : report.cells) {
        nlohmann::ordered_json j;
        j["kc_source"] = c.kc_source;
        j["model"] = c.model;
        j["regime"] = c.regime;
        j["present"] = c.present;
        if (!c.note.empty()) j["note"] = c.note;
        if (c.present) {
            if (c.auc)
                j["auc"] = *c.auc;
            else
                j["auc"] = nullptr;
            j["rmse"] = c.rmse;
            j["accuracy"] = c.accuracy;
            j["n_rows"] = c.n_rows;
            j["fold_rmse"] = c.fold_rmse;
            j["fold_rows"] = c.fold_rows;
        }
        cells.push_back(j);
    }
    nlohmann::ordered_json out;
    out["cells"] = cells;
    return out;
}

inline EvalReport eval_report_from_json(const nlohmann::json& j) {
    EvalReport out;
    if (!j.contains("cells") || !j["cells"].is_array())
        throw data_error("eval report: missing cells array");
    for (const auto& c : j["cells"]) {
        CellMetrics m;
        m.kc_source = c.at("kc_source").get<std::string>();
        m.model = c.at("model").get<std::string>();
        m.regime = c.at("regime").get<std::string>();
        m.present = c.value("present", true);
        m.note = c.value("note", std::string());
        if (m.present) {
            if (c.contains("auc") && !c["auc"].is_null()) m.auc = c["auc"].get<double>();
            m.rmse = c.value("rmse", 0.0);
            m.accuracy = c.value("accuracy", 0.0);
            m.n_rows = c.value("n_rows", std::size_t{0});
            if (c.contains("fold_rmse")) m.fold_rmse = c["fold_rmse"].get<std::vector<double>>();
            if (c.contains("fold_rows"))
                m.fold_rows = c["fold_rows"].get<std::vector<std::size_t>>();
        }
        out.cells.push_back(std::move(m));
    }
    return out;
}

// Per-k curve rows for external plotting.
struct KCurveRow {
    int k = 0;
    double wcss = 0.0;
    double silhouette = 0.0;
    std::optional<double> rmse_stratified, rmse_student, rmse_item;
};

inline std::string curves_to_csv(const std::vector<KCurveRow>& rows) {
    std::ostringstream os;
    os << "k,wcss,silhouette,rmse_stratified,rmse_student,rmse_item\n";
    auto cell = [&](const std::optional<double>& v) {
        if (v) os << *v;
    };
    for (const auto& r : rows) {
        os << r.k << ',' << r.wcss << ',' << r.silhouette << ',';
        cell(r.rmse_stratified);
        os << ',';
        cell(r.rmse_student);
        os << ',';
        cell(r.rmse_item);
        os << "\n";
    }
    return os.str();
}

}  // namespace kctrace
