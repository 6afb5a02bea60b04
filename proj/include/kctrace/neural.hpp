#pragma once

// Desk-scale neural knowledge tracing over joint-skill sequences: a gated
// recurrent model (DKT) and a single-head self-attentive model (SAKT), with
// hand-derived gradients. Parameters live in one flat vector so training,
// clipping, serialization, and finite-difference checks share one code path.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "kctrace/metrics.hpp"
#include "kctrace/util.hpp"

namespace kctrace {

struct SkillInteraction {
    int skill = 0;
    int outcome = 0;
    long long timestamp = 0;
    std::string item_id;  // carried through for prediction tables; unused by the models
};

struct SkillSequence {
    std::string student_id;
    std::vector<SkillInteraction> steps;
};

namespace detail {

inline void check_sequence(const SkillSequence& seq, int n_skills) {
    if (seq.steps.empty()) throw data_error("neural: empty sequence for " + seq.student_id);
    for (const auto& s : seq.steps) {
        if (s.skill < 0 || s.skill >= n_skills)
            throw data_error("neural: skill id " + std::to_string(s.skill) + " out of range [0," +
                             std::to_string(n_skills) + ") for " + seq.student_id);
        if (s.outcome != 0 && s.outcome != 1)
            throw data_error("neural: outcome must be 0/1 for " + seq.student_id);
    }
}

// stable binary cross-entropy from the logit
inline double bce_from_logit(double z, int y) {
    return std::log1p(std::exp(-std::fabs(z))) + std::max(z, 0.0) - static_cast<double>(y) * z;
}

}  // namespace detail

// ---------------------------------------------------------------- DKT ----

struct DktConfig {
    int n_skills = 0;
    int hidden = 64;
    double lr = 0.1;
    int epochs = 30;
    int batch_size = 8;
    double clip = 5.0;
};

// Gated recurrent cell over (skill, outcome) one-hots of size 2|S|; the
// output vector computed from the hidden state BEFORE step t scores step t,
// so the first step is predicted from the zero state (bias only).
struct DktModel {
    DktConfig cfg;
    std::vector<double> w;
    // flat layout offsets
    std::size_t wz = 0, uz = 0, bz = 0, wr = 0, ur = 0, br = 0, wh = 0, uh = 0, bh = 0, wo = 0,
                bo = 0;

    static DktModel make(const DktConfig& cfg) {
        if (cfg.n_skills <= 0 || cfg.hidden <= 0)
            throw usage_error("dkt: n_skills and hidden must be positive");
        DktModel m;
        m.cfg = cfg;
        std::size_t h = static_cast<std::size_t>(cfg.hidden);
        std::size_t s = static_cast<std::size_t>(cfg.n_skills);
        std::size_t in = 2 * s;
        std::size_t at = 0;
        auto take = [&](std::size_t n) {
            std::size_t o = at;
            at += n;
            return o;
        };
        m.wz = take(h * in);
        m.uz = take(h * h);
        m.bz = take(h);
        m.wr = take(h * in);
        m.ur = take(h * h);
        m.br = take(h);
        m.wh = take(h * in);
        m.uh = take(h * h);
        m.bh = take(h);
        m.wo = take(s * h);
        m.bo = take(s);
        m.w.assign(at, 0.0);
        return m;
    }
};

inline DktModel dkt_init(const DktConfig& cfg, std::uint64_t seed) {
    DktModel m = DktModel::make(cfg);
    Rng rng(seed);
    std::size_t h = static_cast<std::size_t>(cfg.hidden);
    std::size_t s = static_cast<std::size_t>(cfg.n_skills);
    std::size_t in = 2 * s;
    auto fill = [&](std::size_t off, std::size_t rows, std::size_t cols) {
        double a = 1.0 / std::sqrt(static_cast<double>(cols));
        for (std::size_t i = 0; i < rows * cols; ++i) m.w[off + i] = (2.0 * rng.uniform() - 1.0) * a;
    };
    fill(m.wz, h, in);
    fill(m.uz, h, h);
    fill(m.wr, h, in);
    fill(m.ur, h, h);
    fill(m.wh, h, in);
    fill(m.uh, h, h);
    fill(m.wo, s, h);
    // biases follow the same rule (fan-in = own length); this also keeps the
    // relu-free cell away from exact saturation points at step one
    fill(m.bz, 1, h);
    fill(m.br, 1, h);
    fill(m.bh, 1, h);
    fill(m.bo, 1, s);
    return m;
}

namespace detail {

struct DktTrace {
    // per step: gate activations and hidden states (h[t] = state after step t)
    std::vector<std::vector<double>> z, r, hc, h;
    std::vector<std::vector<double>> logits;  // (T, S): scores for step t from h[t-1]
};

inline void dkt_run(const DktModel& m, const SkillSequence& seq, DktTrace& tr) {
    check_sequence(seq, m.cfg.n_skills);
    const std::size_t H = static_cast<std::size_t>(m.cfg.hidden);
    const std::size_t S = static_cast<std::size_t>(m.cfg.n_skills);
    const std::size_t in = 2 * S;
    const std::size_t T = seq.steps.size();
    tr.z.assign(T, std::vector<double>(H, 0.0));
    tr.r.assign(T, std::vector<double>(H, 0.0));
    tr.hc.assign(T, std::vector<double>(H, 0.0));
    tr.h.assign(T, std::vector<double>(H, 0.0));
    tr.logits.assign(T, std::vector<double>(S, 0.0));
    std::vector<double> hprev(H, 0.0);
    for (std::size_t t = 0; t < T; ++t) {
        // score step t from the state so far
        for (std::size_t i = 0; i < S; ++i) {
            double o = m.w[m.bo + i];
            for (std::size_t j = 0; j < H; ++j) o += m.w[m.wo + i * H + j] * hprev[j];
            tr.logits[t][i] = o;
        }
        // then absorb step t
        std::size_t xi = static_cast<std::size_t>(seq.steps[t].skill) +
                         S * static_cast<std::size_t>(seq.steps[t].outcome);
        auto& z = tr.z[t];
        auto& r = tr.r[t];
        auto& hc = tr.hc[t];
        auto& h = tr.h[t];
        for (std::size_t i = 0; i < H; ++i) {
            double az = m.w[m.wz + i * in + xi] + m.w[m.bz + i];
            double ar = m.w[m.wr + i * in + xi] + m.w[m.br + i];
            for (std::size_t j = 0; j < H; ++j) {
                az += m.w[m.uz + i * H + j] * hprev[j];
                ar += m.w[m.ur + i * H + j] * hprev[j];
            }
            z[i] = sigmoid(az);
            r[i] = sigmoid(ar);
        }
        for (std::size_t i = 0; i < H; ++i) {
            double ah = m.w[m.wh + i * in + xi] + m.w[m.bh + i];
            for (std::size_t j = 0; j < H; ++j) ah += m.w[m.uh + i * H + j] * (r[j] * hprev[j]);
            hc[i] = std::tanh(ah);
            h[i] = (1.0 - z[i]) * hprev[i] + z[i] * hc[i];
        }
        hprev = h;
    }
}

}  // namespace detail

// Per-step probability vectors, shape (len(seq), n_skills); row t is computed
// before step t's outcome is seen.
inline std::vector<std::vector<double>> dkt_forward(const DktModel& m, const SkillSequence& seq) {
    detail::DktTrace tr;
    detail::dkt_run(m, seq, tr);
    std::vector<std::vector<double>> probs(tr.logits.size());
    for (std::size_t t = 0; t < tr.logits.size(); ++t) {
        probs[t].resize(tr.logits[t].size());
        for (std::size_t i = 0; i < tr.logits[t].size(); ++i)
            probs[t][i] = sigmoid(tr.logits[t][i]);
    }
    return probs;
}

// Probability assigned to each step's own skill.
inline std::vector<double> dkt_predict(const DktModel& m, const SkillSequence& seq) {
    auto probs = dkt_forward(m, seq);
    std::vector<double> out(probs.size());
    for (std::size_t t = 0; t < probs.size(); ++t)
        out[t] = probs[t][static_cast<std::size_t>(seq.steps[t].skill)];
    return out;
}

// Mean BCE over every step of every sequence; accumulates the analytic
// gradient into *grad (same layout as m.w) when non-null.
inline double dkt_loss_grad(const DktModel& m, const std::vector<const SkillSequence*>& batch,
                            std::vector<double>* grad) {
    const std::size_t H = static_cast<std::size_t>(m.cfg.hidden);
    const std::size_t S = static_cast<std::size_t>(m.cfg.n_skills);
    const std::size_t in = 2 * S;
    if (grad) grad->assign(m.w.size(), 0.0);
    std::size_t total = 0;
    for (const auto* s : batch) total += s->steps.size();
    if (total == 0) throw data_error("dkt_loss_grad: empty batch");
    double loss = 0.0;
    detail::DktTrace tr;
    for (const auto* sp : batch) {
        const auto& seq = *sp;
        detail::dkt_run(m, seq, tr);
        const std::size_t T = seq.steps.size();
        for (std::size_t t = 0; t < T; ++t)
            loss += detail::bce_from_logit(
                tr.logits[t][static_cast<std::size_t>(seq.steps[t].skill)], seq.steps[t].outcome);
        if (!grad) continue;
        auto& g = *grad;
        // delta on the scored logit entry: (p - y) / total
        std::vector<double> dh(H, 0.0);  // grad wrt h[t] being walked backwards
        for (std::size_t t = T; t-- > 0;) {
            // output contribution: logits[t+1] used h[t]
            if (t + 1 < T) {
                std::size_t si = static_cast<std::size_t>(seq.steps[t + 1].skill);
                double d = (sigmoid(tr.logits[t + 1][si]) -
                            static_cast<double>(seq.steps[t + 1].outcome)) /
                           static_cast<double>(total);
                g[m.bo + si] += d;
                for (std::size_t j = 0; j < H; ++j) {
                    g[m.wo + si * H + j] += d * tr.h[t][j];
                    dh[j] += m.w[m.wo + si * H + j] * d;
                }
            }
            // backprop the gated cell at step t
            const auto& z = tr.z[t];
            const auto& r = tr.r[t];
            const auto& hc = tr.hc[t];
            const std::vector<double> zero(H, 0.0);
            const auto& hprev = t == 0 ? zero : tr.h[t - 1];
            std::size_t xi = static_cast<std::size_t>(seq.steps[t].skill) +
                             S * static_cast<std::size_t>(seq.steps[t].outcome);
            std::vector<double> dhprev(H, 0.0), da_h(H), da_z(H), drh(H, 0.0);
            for (std::size_t i = 0; i < H; ++i) {
                double dz = dh[i] * (hc[i] - hprev[i]);
                double dhc = dh[i] * z[i];
                dhprev[i] += dh[i] * (1.0 - z[i]);
                da_h[i] = dhc * (1.0 - hc[i] * hc[i]);
                da_z[i] = dz * z[i] * (1.0 - z[i]);
            }
            // a_h = Wh x + Uh (r .* hprev) + bh
            std::vector<double> da_r(H, 0.0);
            for (std::size_t i = 0; i < H; ++i) {
                g[m.wh + i * in + xi] += da_h[i];
                g[m.bh + i] += da_h[i];
                for (std::size_t j = 0; j < H; ++j) {
                    g[m.uh + i * H + j] += da_h[i] * (r[j] * hprev[j]);
                    drh[j] += m.w[m.uh + i * H + j] * da_h[i];
                }
            }
            for (std::size_t j = 0; j < H; ++j) {
                da_r[j] = drh[j] * hprev[j] * r[j] * (1.0 - r[j]);
                dhprev[j] += drh[j] * r[j];
            }
            for (std::size_t i = 0; i < H; ++i) {
                g[m.wz + i * in + xi] += da_z[i];
                g[m.bz + i] += da_z[i];
                g[m.wr + i * in + xi] += da_r[i];
                g[m.br + i] += da_r[i];
                for (std::size_t j = 0; j < H; ++j) {
                    g[m.uz + i * H + j] += da_z[i] * hprev[j];
                    g[m.ur + i * H + j] += da_r[i] * hprev[j];
                    dhprev[j] += m.w[m.uz + i * H + j] * da_z[i];
                    dhprev[j] += m.w[m.ur + i * H + j] * da_r[i];
                }
            }
            dh = dhprev;
        }
        // logits[0] came from the zero state: only the bias moves
        std::size_t s0 = static_cast<std::size_t>(seq.steps[0].skill);
        (*grad)[m.bo + s0] +=
            (sigmoid(tr.logits[0][s0]) - static_cast<double>(seq.steps[0].outcome)) /
            static_cast<double>(total);
    }
    return loss / static_cast<double>(total);
}

// ---------------------------------------------------------------- SAKT ----

struct SaktConfig {
    int n_skills = 0;
    int embed = 64;
    int max_context = 100;  // attention window L
    double lr = 0.1;
    int epochs = 30;
    int batch_size = 8;
    double clip = 5.0;
};

// Single-head scaled dot-product attention. Queries come from the current
// skill's exercise embedding; keys/values from past (skill, outcome)
// interaction embeddings plus a learned recency position embedding
// (index 0 = most recent). Empty past -> zero context vector. The
// feed-forward block has a residual from the context, not from the query.
struct SaktModel {
    SaktConfig cfg;
    std::vector<double> w;
    std::size_t e_ex = 0, e_in = 0, pos = 0, wq = 0, wk = 0, wv = 0, w1 = 0, b1 = 0, w2 = 0,
                b2 = 0, w_out = 0, b_out = 0;

    static SaktModel make(const SaktConfig& cfg) {
        if (cfg.n_skills <= 0 || cfg.embed <= 0 || cfg.max_context <= 0)
            throw usage_error("sakt: n_skills, embed, max_context must be positive");
        SaktModel m;
        m.cfg = cfg;
        std::size_t d = static_cast<std::size_t>(cfg.embed);
        std::size_t s = static_cast<std::size_t>(cfg.n_skills);
        std::size_t L = static_cast<std::size_t>(cfg.max_context);
        std::size_t at = 0;
        auto take = [&](std::size_t n) {
            std::size_t o = at;
            at += n;
            return o;
        };
        m.e_ex = take(s * d);
        m.e_in = take(2 * s * d);
        m.pos = take(L * d);
        m.wq = take(d * d);
        m.wk = take(d * d);
        m.wv = take(d * d);
        m.w1 = take(d * d);
        m.b1 = take(d);
        m.w2 = take(d * d);
        m.b2 = take(d);
        m.w_out = take(d);
        m.b_out = take(1);
        m.w.assign(at, 0.0);
        return m;
    }
};

inline SaktModel sakt_init(const SaktConfig& cfg, std::uint64_t seed) {
    SaktModel m = SaktModel::make(cfg);
    Rng rng(seed);
    std::size_t d = static_cast<std::size_t>(cfg.embed);
    std::size_t s = static_cast<std::size_t>(cfg.n_skills);
    std::size_t L = static_cast<std::size_t>(cfg.max_context);
    auto fill = [&](std::size_t off, std::size_t rows, std::size_t cols) {
        double a = 1.0 / std::sqrt(static_cast<double>(cols));
        for (std::size_t i = 0; i < rows * cols; ++i) m.w[off + i] = (2.0 * rng.uniform() - 1.0) * a;
    };
    fill(m.e_ex, s, d);
    fill(m.e_in, 2 * s, d);
    fill(m.pos, L, d);
    fill(m.wq, d, d);
    fill(m.wk, d, d);
    fill(m.wv, d, d);
    fill(m.w1, d, d);
    fill(m.b1, 1, d);  // nonzero bias keeps relu inputs off the kink at ctx = 0
    fill(m.w2, d, d);
    fill(m.b2, 1, d);
    fill(m.w_out, 1, d);
    fill(m.b_out, 1, 1);
    return m;
}

namespace detail {

struct SaktStep {
    std::vector<std::size_t> win;          // absolute indices of attended steps, oldest first
    std::vector<std::vector<double>> mkv;  // per attended step: m = e_in + pos
    std::vector<std::vector<double>> k, v;
    std::vector<double> q, alpha, ctx, a1, u;
    double logit = 0.0;
};

inline void mat_vec(const std::vector<double>& w, std::size_t off, std::size_t rows,
                    std::size_t cols, const std::vector<double>& x, std::vector<double>& y) {
    y.assign(rows, 0.0);
    for (std::size_t i = 0; i < rows; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < cols; ++j) acc += w[off + i * cols + j] * x[j];
        y[i] = acc;
    }
}

inline void sakt_run(const SaktModel& m, const SkillSequence& seq, std::vector<SaktStep>& steps) {
    check_sequence(seq, m.cfg.n_skills);
    const std::size_t d = static_cast<std::size_t>(m.cfg.embed);
    const std::size_t S = static_cast<std::size_t>(m.cfg.n_skills);
    const std::size_t L = static_cast<std::size_t>(m.cfg.max_context);
    const std::size_t T = seq.steps.size();
    steps.assign(T, {});
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));
    for (std::size_t t = 0; t < T; ++t) {
        auto& st = steps[t];
        std::size_t lo = t > L ? t - L : 0;
        for (std::size_t u = lo; u < t; ++u) st.win.push_back(u);
        const std::size_t W = st.win.size();
        // query from the current exercise embedding
        std::vector<double> xq(d);
        for (std::size_t j = 0; j < d; ++j)
            xq[j] = m.w[m.e_ex + static_cast<std::size_t>(seq.steps[t].skill) * d + j];
        mat_vec(m.w, m.wq, d, d, xq, st.q);
        st.mkv.resize(W);
        st.k.resize(W);
        st.v.resize(W);
        std::vector<double> scores(W, 0.0);
        for (std::size_t wi = 0; wi < W; ++wi) {
            std::size_t u = st.win[wi];
            std::size_t idx = static_cast<std::size_t>(seq.steps[u].skill) +
                              S * static_cast<std::size_t>(seq.steps[u].outcome);
            std::size_t rec = t - 1 - u;  // 0 = most recent
            auto& mm = st.mkv[wi];
            mm.resize(d);
            for (std::size_t j = 0; j < d; ++j)
                mm[j] = m.w[m.e_in + idx * d + j] + m.w[m.pos + rec * d + j];
            mat_vec(m.w, m.wk, d, d, mm, st.k[wi]);
            mat_vec(m.w, m.wv, d, d, mm, st.v[wi]);
            double e = 0.0;
            for (std::size_t j = 0; j < d; ++j) e += st.q[j] * st.k[wi][j];
            scores[wi] = e * scale;
        }
        st.ctx.assign(d, 0.0);
        if (W > 0) {
            double mx = *std::max_element(scores.begin(), scores.end());
            double z = 0.0;
            st.alpha.assign(W, 0.0);
            for (std::size_t wi = 0; wi < W; ++wi) {
                st.alpha[wi] = std::exp(scores[wi] - mx);
                z += st.alpha[wi];
            }
            for (std::size_t wi = 0; wi < W; ++wi) {
                st.alpha[wi] /= z;
                for (std::size_t j = 0; j < d; ++j) st.ctx[j] += st.alpha[wi] * st.v[wi][j];
            }
        }
        // u = ctx + W2 relu(W1 ctx + b1) + b2
        mat_vec(m.w, m.w1, d, d, st.ctx, st.a1);
        for (std::size_t j = 0; j < d; ++j) st.a1[j] += m.w[m.b1 + j];
        st.u.assign(d, 0.0);
        for (std::size_t i = 0; i < d; ++i) {
            double acc = 0.0;
            for (std::size_t j = 0; j < d; ++j)
                acc += m.w[m.w2 + i * d + j] * std::max(st.a1[j], 0.0);
            st.u[i] = st.ctx[i] + acc + m.w[m.b2 + i];
        }
        double z = m.w[m.b_out];
        for (std::size_t j = 0; j < d; ++j) z += m.w[m.w_out + j] * st.u[j];
        st.logit = z;
    }
}

}  // namespace detail

inline std::vector<double> sakt_forward(const SaktModel& m, const SkillSequence& seq) {
    std::vector<detail::SaktStep> steps;
    detail::sakt_run(m, seq, steps);
    std::vector<double> out(steps.size());
    for (std::size_t t = 0; t < steps.size(); ++t) out[t] = sigmoid(steps[t].logit);
    return out;
}

inline std::vector<double> sakt_predict(const SaktModel& m, const SkillSequence& seq) {
    return sakt_forward(m, seq);
}

inline double sakt_loss_grad(const SaktModel& m, const std::vector<const SkillSequence*>& batch,
                             std::vector<double>* grad) {
    const std::size_t d = static_cast<std::size_t>(m.cfg.embed);
    const std::size_t S = static_cast<std::size_t>(m.cfg.n_skills);
    if (grad) grad->assign(m.w.size(), 0.0);
    std::size_t total = 0;
    for (const auto* s : batch) total += s->steps.size();
    if (total == 0) throw data_error("sakt_loss_grad: empty batch");
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));
    double loss = 0.0;
    std::vector<detail::SaktStep> steps;
    for (const auto* sp : batch) {
        const auto& seq = *sp;
        detail::sakt_run(m, seq, steps);
        for (std::size_t t = 0; t < seq.steps.size(); ++t)
            loss += detail::bce_from_logit(steps[t].logit, seq.steps[t].outcome);
        if (!grad) continue;
        auto& g = *grad;
        for (std::size_t t = 0; t < seq.steps.size(); ++t) {
            const auto& st = steps[t];
            const std::size_t W = st.win.size();
            double dz = (sigmoid(st.logit) - static_cast<double>(seq.steps[t].outcome)) /
                        static_cast<double>(total);
            g[m.b_out] += dz;
            std::vector<double> du(d);
            for (std::size_t j = 0; j < d; ++j) {
                g[m.w_out + j] += dz * st.u[j];
                du[j] = dz * m.w[m.w_out + j];
            }
            // u = ctx + W2 relu(a1) + b2
            std::vector<double> dctx(d, 0.0), da1(d, 0.0);
            for (std::size_t i = 0; i < d; ++i) {
                dctx[i] += du[i];
                g[m.b2 + i] += du[i];
                for (std::size_t j = 0; j < d; ++j) {
                    double r = std::max(st.a1[j], 0.0);
                    g[m.w2 + i * d + j] += du[i] * r;
                    if (st.a1[j] > 0.0) da1[j] += m.w[m.w2 + i * d + j] * du[i];
                }
            }
            for (std::size_t i = 0; i < d; ++i) {
                g[m.b1 + i] += da1[i];
                for (std::size_t j = 0; j < d; ++j) {
                    g[m.w1 + i * d + j] += da1[i] * st.ctx[j];
                    dctx[j] += m.w[m.w1 + i * d + j] * da1[i];
                }
            }
            std::vector<double> dq(d, 0.0);
            if (W > 0) {
                // ctx = sum alpha_w v_w; e_w = q . k_w * scale
                std::vector<double> dalpha(W, 0.0);
                for (std::size_t wi = 0; wi < W; ++wi)
                    for (std::size_t j = 0; j < d; ++j) dalpha[wi] += dctx[j] * st.v[wi][j];
                double dot = 0.0;
                for (std::size_t wi = 0; wi < W; ++wi) dot += st.alpha[wi] * dalpha[wi];
                for (std::size_t wi = 0; wi < W; ++wi) {
                    std::size_t u = st.win[wi];
                    double de = st.alpha[wi] * (dalpha[wi] - dot) * scale;
                    std::vector<double> dk(d), dv(d);
                    for (std::size_t j = 0; j < d; ++j) {
                        dq[j] += de * st.k[wi][j];
                        dk[j] = de * st.q[j];
                        dv[j] = st.alpha[wi] * dctx[j];
                    }
                    // k = Wk m, v = Wv m
                    std::vector<double> dm(d, 0.0);
                    for (std::size_t i = 0; i < d; ++i) {
                        for (std::size_t j = 0; j < d; ++j) {
                            g[m.wk + i * d + j] += dk[i] * st.mkv[wi][j];
                            g[m.wv + i * d + j] += dv[i] * st.mkv[wi][j];
                            dm[j] += m.w[m.wk + i * d + j] * dk[i];
                            dm[j] += m.w[m.wv + i * d + j] * dv[i];
                        }
                    }
                    std::size_t idx = static_cast<std::size_t>(seq.steps[u].skill) +
                                      S * static_cast<std::size_t>(seq.steps[u].outcome);
                    std::size_t rec = t - 1 - u;
                    for (std::size_t j = 0; j < d; ++j) {
                        g[m.e_in + idx * d + j] += dm[j];
                        g[m.pos + rec * d + j] += dm[j];
                    }
                }
            }
            // q = Wq e_ex[skill]
            std::vector<double> xq(d);
            for (std::size_t j = 0; j < d; ++j)
                xq[j] = m.w[m.e_ex + static_cast<std::size_t>(seq.steps[t].skill) * d + j];
            for (std::size_t i = 0; i < d; ++i) {
                for (std::size_t j = 0; j < d; ++j) {
                    g[m.wq + i * d + j] += dq[i] * xq[j];
                    g[m.e_ex + static_cast<std::size_t>(seq.steps[t].skill) * d + j] +=
                        m.w[m.wq + i * d + j] * dq[i];
                }
            }
        }
    }
    return loss / static_cast<double>(total);
}

// ---------------------------------------------------------------- training

struct TrainLog {
    std::vector<double> epoch_loss;  // mean train loss per epoch
    std::vector<double> val_auc;     // empty when no validation set given
};

namespace detail {

template <class Model, class LossGrad, class Predict>
TrainLog sgd_train(Model& m, const std::vector<SkillSequence>& train,
                   const std::vector<SkillSequence>* val, std::uint64_t seed, LossGrad loss_grad,
                   Predict predict) {
    if (train.empty()) throw data_error("train_neural: empty training set");
    const int epochs = m.cfg.epochs;
    const int batch_size = std::max(1, m.cfg.batch_size);
    Rng rng(seed);
    TrainLog log;
    std::vector<std::size_t> order(train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::vector<double> grad;
    for (int epoch = 0; epoch < epochs; ++epoch) {
        rng.shuffle(order);
        double epoch_loss = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size();
             start += static_cast<std::size_t>(batch_size)) {
            std::vector<const SkillSequence*> batch;
            for (std::size_t i = start;
                 i < std::min(order.size(), start + static_cast<std::size_t>(batch_size)); ++i)
                batch.push_back(&train[order[i]]);
            double loss = loss_grad(m, batch, &grad);
            if (!std::isfinite(loss))
                throw data_error("train_neural: loss diverged at epoch " + std::to_string(epoch) +
                                 " batch " + std::to_string(batches));
            double norm = 0.0;
            for (double v : grad) norm += v * v;
            norm = std::sqrt(norm);
            double step = m.cfg.lr;
            if (m.cfg.clip > 0.0 && norm > m.cfg.clip) step *= m.cfg.clip / norm;
            for (std::size_t i = 0; i < m.w.size(); ++i) m.w[i] -= step * grad[i];
            epoch_loss += loss;
            ++batches;
        }
        log.epoch_loss.push_back(epoch_loss / static_cast<double>(batches));
        if (val) {
            std::vector<double> scores;
            std::vector<int> labels;
            for (const auto& seq : *val) {
                auto p = predict(m, seq);
                for (std::size_t t = 0; t < seq.steps.size(); ++t) {
                    scores.push_back(p[t]);
                    labels.push_back(seq.steps[t].outcome);
                }
            }
            auto auc = auc_score(labels, scores);
            log.val_auc.push_back(auc ? *auc : std::numeric_limits<double>::quiet_NaN());
        }
    }
    return log;
}

}  // namespace detail

inline TrainLog train_dkt(DktModel& m, const std::vector<SkillSequence>& train,
                          const std::vector<SkillSequence>* val, std::uint64_t seed) {
    return detail::sgd_train(
        m, train, val, seed,
        [](const DktModel& mm, const std::vector<const SkillSequence*>& b,
           std::vector<double>* g) { return dkt_loss_grad(mm, b, g); },
        [](const DktModel& mm, const SkillSequence& s) { return dkt_predict(mm, s); });
}

inline TrainLog train_sakt(SaktModel& m, const std::vector<SkillSequence>& train,
                           const std::vector<SkillSequence>* val, std::uint64_t seed) {
    return detail::sgd_train(
        m, train, val, seed,
        [](const SaktModel& mm, const std::vector<const SkillSequence*>& b,
           std::vector<double>* g) { return sakt_loss_grad(mm, b, g); },
        [](const SaktModel& mm, const SkillSequence& s) { return sakt_predict(mm, s); });
}

// ---------------------------------------------------------------- JSON ----

inline nlohmann::ordered_json dkt_to_json(const DktModel& m) {
    nlohmann::ordered_json j;
    j["kind"] = "dkt";
    j["config"] = {{"n_skills", m.cfg.n_skills}, {"hidden", m.cfg.hidden},     {"lr", m.cfg.lr},
                   {"epochs", m.cfg.epochs},     {"batch_size", m.cfg.batch_size},
                   {"clip", m.cfg.clip}};
    j["params"] = m.w;
    return j;
}

inline DktModel dkt_from_json(const nlohmann::json& j) {
    DktConfig cfg;
    cfg.n_skills = j.at("config").at("n_skills").get<int>();
    cfg.hidden = j.at("config").at("hidden").get<int>();
    cfg.lr = j.at("config").at("lr").get<double>();
    cfg.epochs = j.at("config").at("epochs").get<int>();
    cfg.batch_size = j.at("config").at("batch_size").get<int>();
    cfg.clip = j.at("config").at("clip").get<double>();
    DktModel m = DktModel::make(cfg);
    auto params = j.at("params").get<std::vector<double>>();
    if (params.size() != m.w.size()) throw data_error("dkt_from_json: parameter count mismatch");
    m.w = std::move(params);
    return m;
}

inline nlohmann::ordered_json sakt_to_json(const SaktModel& m) {
    nlohmann::ordered_json j;
    j["kind"] = "sakt";
    j["config"] = {{"n_skills", m.cfg.n_skills}, {"embed", m.cfg.embed},
                   {"max_context", m.cfg.max_context}, {"lr", m.cfg.lr},
                   {"epochs", m.cfg.epochs},     {"batch_size", m.cfg.batch_size},
                   {"clip", m.cfg.clip}};
    j["params"] = m.w;
    return j;
}

inline SaktModel sakt_from_json(const nlohmann::json& j) {
    SaktConfig cfg;
    cfg.n_skills = j.at("config").at("n_skills").get<int>();
    cfg.embed = j.at("config").at("embed").get<int>();
    cfg.max_context = j.at("config").at("max_context").get<int>();
    cfg.lr = j.at("config").at("lr").get<double>();
    cfg.epochs = j.at("config").at("epochs").get<int>();
    cfg.batch_size = j.at("config").at("batch_size").get<int>();
    cfg.clip = j.at("config").at("clip").get<double>();
    SaktModel m = SaktModel::make(cfg);
    auto params = j.at("params").get<std::vector<double>>();
    if (params.size() != m.w.size()) throw data_error("sakt_from_json: parameter count mismatch");
    m.w = std::move(params);
    return m;
}

}  // namespace kctrace
