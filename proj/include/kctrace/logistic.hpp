#pragma once

// Regularized logistic regression on sparse rows, fitted by projected
// gradient descent with backtracking line search. Bounds are enforced by
// projection, which is what lets AFM keep its learning rates non-negative.

#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "kctrace/util.hpp"

namespace kctrace {

struct SparseRow {
    std::vector<std::pair<int, double>> entries;  // (feature index, value)
    void add(int idx, double v) {
        if (v != 0.0) entries.emplace_back(idx, v);
    }
};

struct FeatureMatrix {
    int dim = 0;
    std::vector<SparseRow> rows;
    std::vector<std::string> names;  // feature index -> name
};

// name -> index map that assigns indices in first-use order
class FeatureIndex {
public:
    int get(const std::string& name) {
        auto it = map_.find(name);
        if (it != map_.end()) return it->second;
        int idx = static_cast<int>(names_.size());
        map_.emplace(name, idx);
        names_.push_back(name);
        return idx;
    }
    std::optional<int> find(const std::string& name) const {
        auto it = map_.find(name);
        if (it == map_.end()) return std::nullopt;
        return it->second;
    }
    int size() const { return static_cast<int>(names_.size()); }
    const std::vector<std::string>& names() const { return names_; }

private:
    std::map<std::string, int> map_;
    std::vector<std::string> names_;
};

struct FitOptions {
    std::vector<double> l2;           // per-weight coefficient on (1/2) w_j^2; empty = all zero
    std::vector<double> lower_bound;  // per-weight; empty = unbounded
    std::vector<std::size_t> fit_rows;  // rows to fit on; empty = all rows
    int max_iters = 500;
    double tol = 1e-6;
    std::uint64_t seed = 0;
};

struct LogisticModel {
    std::vector<double> weights;
    std::vector<std::string> names;
    int iters = 0;
    double final_loss = 0.0;
    std::uint64_t seed = 0;
    std::vector<double> loss_trace;  // accepted-step objective values
};

// mean log-loss over the given rows plus sum_j (l2_j/2) w_j^2
inline double logistic_loss_grad(const FeatureMatrix& X, const std::vector<int>& y,
                                 const std::vector<double>& l2, const std::vector<double>& w,
                                 const std::vector<std::size_t>& rows, std::vector<double>& grad) {
    const double n = static_cast<double>(rows.size());
    grad.assign(w.size(), 0.0);
    double loss = 0.0;
    for (std::size_t r : rows) {
        double z = 0.0;
        for (const auto& [idx, v] : X.rows[r].entries) z += w[idx] * v;
        if (!std::isfinite(z)) {
            for (const auto& [idx, v] : X.rows[r].entries)
                if (!std::isfinite(w[idx] * v))
                    throw data_error("fit_logistic: non-finite contribution at feature index " +
                                     std::to_string(idx));
            throw data_error("fit_logistic: non-finite logit");
        }
        double p = sigmoid(z);
        // numerically stable log-loss via log1p(exp(-|z|))
        double yl = y[r] ? z : 0.0;
        loss += std::log1p(std::exp(-std::abs(z))) + (z > 0 ? z : 0.0) - yl;
        double resid = (p - (y[r] ? 1.0 : 0.0)) / n;
        for (const auto& [idx, v] : X.rows[r].entries) grad[idx] += resid * v;
    }
    loss /= n;
    if (!l2.empty()) {
        for (std::size_t j = 0; j < w.size(); ++j) {
            loss += 0.5 * l2[j] * w[j] * w[j];
            grad[j] += l2[j] * w[j];
        }
    }
    if (!std::isfinite(loss)) throw data_error("fit_logistic: non-finite loss");
    return loss;
}

inline LogisticModel fit_logistic(const FeatureMatrix& X, const std::vector<int>& y,
                                  FitOptions opt = {}) {
    if (X.rows.empty() || X.rows.size() != y.size())
        throw data_error("fit_logistic: empty or mismatched inputs");
    const int d = X.dim;
    if (opt.l2.empty()) opt.l2.assign(d, 0.0);
    if (opt.lower_bound.empty())
        opt.lower_bound.assign(d, -std::numeric_limits<double>::infinity());
    if (static_cast<int>(opt.l2.size()) != d || static_cast<int>(opt.lower_bound.size()) != d)
        throw data_error("fit_logistic: option vectors do not match feature dim");
    std::vector<std::size_t> rows = opt.fit_rows;
    if (rows.empty()) {
        rows.resize(X.rows.size());
        for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
    }

    // Column scaling is an exact reparameterization (l2 and bounds adjusted),
    // kept internal; it only conditions the gradient steps.
    std::vector<double> scale(d, 1.0);
    for (std::size_t r : rows)
        for (const auto& [idx, v] : X.rows[r].entries)
            scale[idx] = std::max(scale[idx], std::abs(v));
    FeatureMatrix Xs;
    Xs.dim = d;
    Xs.rows.resize(X.rows.size());
    for (std::size_t r : rows) {
        for (const auto& [idx, v] : X.rows[r].entries)
            Xs.rows[r].entries.emplace_back(idx, v / scale[idx]);
    }
    std::vector<double> l2s(d), lbs(d);
    for (int j = 0; j < d; ++j) {
        l2s[j] = opt.l2[j] * scale[j] * scale[j];
        lbs[j] = opt.lower_bound[j] == -std::numeric_limits<double>::infinity()
                     ? opt.lower_bound[j]
                     : opt.lower_bound[j] * scale[j];
        // only zero or -inf lower bounds scale exactly through sign-preserving
        // division; the models here use exactly those
    }

    auto project = [&](std::vector<double>& w) {
        for (int j = 0; j < d; ++j)
            if (w[j] < lbs[j]) w[j] = lbs[j];
    };

    std::vector<double> w(d, 0.0), grad(d), trial(d), trial_grad(d);
    double loss = logistic_loss_grad(Xs, y, l2s, w, rows, grad);

    LogisticModel model;
    model.seed = opt.seed;
    model.loss_trace.push_back(loss);

    double alpha = 1.0;
    int iter = 0;
    for (; iter < opt.max_iters; ++iter) {
        // convergence: projected-gradient residual (plain gradient norm when
        // no bound is active)
        double resid = 0.0;
        for (int j = 0; j < d; ++j) {
            double stepped = std::max(w[j] - grad[j], lbs[j]);
            resid = std::max(resid, std::abs(stepped - w[j]));
        }
        if (resid < opt.tol) break;

        bool accepted = false;
        for (int bt = 0; bt < 60; ++bt) {
            for (int j = 0; j < d; ++j) trial[j] = w[j] - alpha * grad[j];
            project(trial);
            double gd = 0.0;
            for (int j = 0; j < d; ++j) gd += grad[j] * (trial[j] - w[j]);
            double trial_loss = logistic_loss_grad(Xs, y, l2s, trial, rows, trial_grad);
            if (trial_loss <= loss + 1e-4 * gd) {
                w = trial;
                grad = trial_grad;
                loss = trial_loss;
                model.loss_trace.push_back(loss);
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if (!accepted) break;  // line search exhausted at machine precision
        alpha = std::min(alpha * 2.0, 1e8);
    }

    model.iters = iter;
    model.final_loss = loss;
    model.names = X.names;
    model.weights.resize(d);
    for (int j = 0; j < d; ++j) model.weights[j] = w[j] / scale[j];
    return model;
}

inline double predict_one(const std::vector<double>& weights, const SparseRow& row,
                          double clip = 1e-6) {
    double z = 0.0;
    for (const auto& [idx, v] : row.entries) z += weights[idx] * v;
    double p = sigmoid(z);
    return std::clamp(p, clip, 1.0 - clip);
}

inline std::vector<double> predict(const LogisticModel& m, const FeatureMatrix& X,
                                   double clip = 1e-6) {
    if (static_cast<int>(m.weights.size()) != X.dim)
        throw data_error("predict: dimension mismatch");
    std::vector<double> out;
    out.reserve(X.rows.size());
    for (const auto& r : X.rows) out.push_back(predict_one(m.weights, r, clip));
    return out;
}

inline nlohmann::json logistic_model_to_json(const LogisticModel& m) {
    nlohmann::json j;
    j["weights"] = m.weights;
    j["names"] = m.names;
    j["iters"] = m.iters;
    j["final_loss"] = m.final_loss;
    j["seed"] = m.seed;
    return j;
}

inline LogisticModel logistic_model_from_json(const nlohmann::json& j) {
    LogisticModel m;
    m.weights = j.at("weights").get<std::vector<double>>();
    m.names = j.at("names").get<std::vector<std::string>>();
    m.iters = j.at("iters").get<int>();
    m.final_loss = j.at("final_loss").get<double>();
    m.seed = j.at("seed").get<std::uint64_t>();
    return m;
}

}  // namespace kctrace
