// kctrace: batch pipeline driver. Each subcommand reads the artifacts of its
// predecessor stage from out/<stage>/vNNN, writes a new versioned directory,
// and drops a manifest describing exactly what went in and out. Manifests and
// artifacts are deliberately deterministic: rerunning a stage with the same
// config and inputs must produce byte-identical files (volatile numbers like
// cache-hit counts go to stdout, never into artifacts).

#include <fcntl.h>
#include <unistd.h>

#include <cstdio>
#include <deque>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "kctrace/cluster.hpp"
#include "kctrace/config.hpp"
#include "kctrace/eval.hpp"
#include "kctrace/features.hpp"
#include "kctrace/ingest.hpp"
#include "kctrace/llm.hpp"
#include "kctrace/logistic.hpp"
#include "kctrace/mock_server.hpp"
#include "kctrace/neural.hpp"
#include "kctrace/qmatrix.hpp"
#include "kctrace/splits.hpp"
#include "kctrace/util.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;
using namespace kctrace;

namespace {

constexpr const char* kTool = "kctrace 0.1.0";

std::string sha_hex(const std::string& bytes) {
    auto d = sha256_digest(bytes);
    return hex_encode(d.data(), d.size());
}

std::string sha_file(const fs::path& p) { return sha_hex(read_file(p)); }

struct Ctx {
    PipelineConfig cfg;
    std::string config_sha;
    bool force = false;
};

// Exclusive lock on the output tree. O_CREAT|O_EXCL is atomic on every
// filesystem we care about; a stale lock after a crash is removed by hand.
class DirLock {
public:
    explicit DirLock(const fs::path& dir) {
        fs::create_directories(dir);
        path_ = dir / ".lock";
        int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
        if (fd < 0)
            throw usage_error("output directory is locked (" + path_.string() +
                              "); another kctrace run may be active — delete the "
                              "file if it is stale");
        std::string pid = std::to_string(::getpid()) + "\n";
        (void)!::write(fd, pid.data(), pid.size());
        ::close(fd);
        held_ = true;
    }
    ~DirLock() {
        if (held_) {
            std::error_code ec;
            fs::remove(path_, ec);
        }
    }
    DirLock(const DirLock&) = delete;
    DirLock& operator=(const DirLock&) = delete;

private:
    fs::path path_;
    bool held_ = false;
};

std::optional<fs::path> latest_stage_dir(const PipelineConfig& cfg, const std::string& stage) {
    std::error_code ec;
    int best = 0;
    fs::path best_path;
    for (const auto& e : fs::directory_iterator(cfg.output_dir / stage, ec)) {
        if (!e.is_directory()) continue;
        auto name = e.path().filename().string();
        if (name.size() != 4 || name[0] != 'v') continue;
        if (name.find_first_not_of("0123456789", 1) != std::string::npos) continue;
        int n = std::stoi(name.substr(1));
        if (n > best) {
            best = n;
            best_path = e.path();
        }
    }
    if (best == 0) return std::nullopt;
    return best_path;
}

// Collects a stage's outputs, then writes manifest.json last so a manifest's
// presence marks a complete stage directory.
class StageWriter {
public:
    StageWriter(const Ctx& ctx, std::string stage) : ctx_(ctx), stage_(std::move(stage)) {
        if (ctx.force) {
            if (auto latest = latest_stage_dir(ctx.cfg, stage_)) {
                fs::remove_all(*latest);
                dir_ = *latest;
            }
        }
        if (dir_.empty()) {
            int next = 1;
            if (auto latest = latest_stage_dir(ctx.cfg, stage_))
                next = std::stoi(latest->filename().string().substr(1)) + 1;
            char buf[8];
            std::snprintf(buf, sizeof buf, "v%03d", next);
            dir_ = ctx.cfg.output_dir / stage_ / buf;
        }
        fs::create_directories(dir_);
    }

    const fs::path& dir() const { return dir_; }

    void input(const std::string& name, const fs::path& p) { inputs_[name] = sha_file(p); }
    void seed(const std::string& name, std::uint64_t v) { seeds_[name] = v; }

    template <typename T>
    void note(const std::string& key, T v) {
        summary_[key] = v;
    }

    void write(const std::string& name, const std::string& content) {
        write_file_atomic(dir_ / name, content);
        outputs_.push_back(name);
    }
    void write_json(const std::string& name, const ordered_json& j) { write(name, j.dump(2) + "\n"); }

    void finish() {
        ordered_json m;
        m["stage"] = stage_;
        m["tool"] = kTool;
        m["config"] = ordered_json{{"sha256", ctx_.config_sha}, {"snapshot", ctx_.cfg.snapshot}};
        m["inputs"] = inputs_;
        m["seeds"] = seeds_;
        ordered_json outs = ordered_json::object();
        for (const auto& name : outputs_) outs[name] = sha_file(dir_ / name);
        m["outputs"] = outs;
        m["summary"] = summary_;
        write_file_atomic(dir_ / "manifest.json", m.dump(2) + "\n");
        std::printf("%s: wrote %s\n", stage_.c_str(), dir_.string().c_str());
    }

private:
    const Ctx& ctx_;
    std::string stage_;
    fs::path dir_;
    ordered_json inputs_ = ordered_json::object();
    ordered_json seeds_ = ordered_json::object();
    ordered_json summary_ = ordered_json::object();
    std::vector<std::string> outputs_;
};

fs::path require_stage_file(const PipelineConfig& cfg, const std::string& stage,
                            const std::string& file) {
    auto dir = latest_stage_dir(cfg, stage);
    if (!dir || !fs::exists(*dir / "manifest.json"))
        throw data_error("no completed " + stage + " artifact under " +
                         (cfg.output_dir / stage).string() + "; run `kctrace " + stage +
                         "` first");
    auto p = *dir / file;
    if (!fs::exists(p))
        throw data_error(p.string() + " is missing; re-run `kctrace " + stage + "`");
    return p;
}

json load_json(const fs::path& p) {
    auto j = json::parse(read_file(p), nullptr, false);
    if (j.is_discarded()) throw data_error("invalid JSON artifact: " + p.string());
    return j;
}

Dataset load_dataset(const Ctx& ctx, StageWriter* w = nullptr) {
    auto p = require_stage_file(ctx.cfg, "ingest", "dataset.json");
    if (w) w->input("dataset.json", p);
    return dataset_from_json(load_json(p));
}

std::string sanitize(const std::string& s) {
    std::string out;
    for (char c : s)
        out += std::isalnum(static_cast<unsigned char>(c)) ? static_cast<char>(std::tolower(c))
                                                           : '_';
    return out;
}

// ---- ingest -------------------------------------------------------------

void cmd_ingest(const Ctx& ctx) {
    const auto& cfg = ctx.cfg;
    if (cfg.transactions.empty())
        throw usage_error("config: [paths] transactions is required for ingest");
    if (cfg.content_manifest.empty())
        throw usage_error("config: [paths] content_manifest is required for ingest");

    auto parsed = parse_transactions(cfg.transactions, cfg.columns);
    auto firsts = reduce_first_attempts(parsed.records);
    auto items = load_content_manifest(cfg.content_manifest);
    auto ds = link_content(std::move(firsts), std::move(items));

    StageWriter w(ctx, "ingest");
    w.input("transactions", cfg.transactions);
    w.input("content_manifest", cfg.content_manifest);
    w.write_json("dataset.json", ordered_json(dataset_to_json(ds)));

    std::ostringstream rej;
    rej << "row\treason\n";
    for (const auto& r : parsed.rejects) rej << r.row_number << '\t' << r.reason << '\n';
    w.write("rejects.tsv", rej.str());

    w.note("rows_parsed", parsed.records.size());
    w.note("rows_rejected", parsed.rejects.size());
    w.note("first_attempts", ds.stats.before);
    w.note("rows_linked", ds.stats.after);
    w.note("items", ds.items.size());
    w.note("kc_models", ds.kc_models.size());
    w.finish();
    std::printf("ingest: %zu rows parsed, %zu rejected, %zu first attempts, %zu linked, %zu items\n",
                parsed.records.size(), parsed.rejects.size(), ds.stats.before, ds.stats.after,
                ds.items.size());
}

// ---- extract ------------------------------------------------------------

void cmd_extract(const Ctx& ctx) {
    StageWriter w(ctx, "extract");
    auto ds = load_dataset(ctx, &w);
    auto res = extract_kcs(ds.items, ctx.cfg.llm);

    ordered_json items = ordered_json::object();
    std::size_t total = 0;
    for (const auto& [id, kcs] : res.kcs) {
        ordered_json arr = ordered_json::array();
        for (const auto& kc : kcs)
            arr.push_back(ordered_json{
                {"name", kc.name}, {"description", kc.description}, {"ordinal", kc.ordinal}});
        items[id] = arr;
        total += kcs.size();
    }
    ordered_json fails = ordered_json::array();
    for (const auto& f : res.failures)
        fails.push_back(ordered_json{{"item_id", f.item_id}, {"reason", f.reason}});
    ordered_json out;
    out["items"] = items;
    out["empty_items"] = res.empty_items;
    out["failures"] = fails;
    w.write_json("kcs.json", out);

    w.seed("chat_seed", static_cast<std::uint64_t>(ctx.cfg.llm.seed));
    w.note("items", res.kcs.size());
    w.note("knowledge_components", total);
    w.note("empty_items", res.empty_items.size());
    w.note("failures", res.failures.size());
    w.finish();

    std::printf("extract: %zu items, %zu KCs (%zu cache hits, %zu requests, %zu retries)\n",
                res.kcs.size(), total, res.stats.cache_hits, res.stats.requests,
                res.stats.retries);
    for (const auto& id : res.empty_items)
        std::printf("extract: warning: no KCs extracted for item %s\n", id.c_str());
    if (!res.failures.empty()) {
        for (const auto& f : res.failures)
            std::fprintf(stderr, "extract: failed: %s: %s\n", f.item_id.c_str(),
                         f.reason.c_str());
        throw upstream_error("extraction failed for " + std::to_string(res.failures.size()) +
                             " item(s); artifact written without them");
    }
}

// ---- embed ----------------------------------------------------------------

std::vector<KnowledgeComponent> load_kcs(const Ctx& ctx, StageWriter* w) {
    auto p = require_stage_file(ctx.cfg, "extract", "kcs.json");
    if (w) w->input("kcs.json", p);
    auto j = load_json(p);
    std::vector<KnowledgeComponent> kcs;
    for (const auto& [id, arr] : j.at("items").items()) {
        for (const auto& e : arr) {
            KnowledgeComponent kc;
            kc.name = e.at("name").get<std::string>();
            kc.description = e.at("description").get<std::string>();
            kc.item_id = id;
            kc.ordinal = e.at("ordinal").get<int>();
            kcs.push_back(std::move(kc));
        }
    }
    if (kcs.empty()) throw data_error("extract artifact holds no knowledge components");
    return kcs;
}

void cmd_embed(const Ctx& ctx) {
    StageWriter w(ctx, "embed");
    auto kcs = load_kcs(ctx, &w);
    LlmStats stats;
    auto vecs = embed_kcs(kcs, ctx.cfg.llm, &stats);

    ordered_json rows = ordered_json::array();
    for (std::size_t i = 0; i < vecs.size(); ++i)
        rows.push_back(ordered_json{{"item_id", vecs[i].item_id},
                                    {"ordinal", vecs[i].ordinal},
                                    {"name", kcs[i].name},
                                    {"values", vecs[i].values}});
    ordered_json out;
    out["model_tag"] = vecs.front().model_tag;
    out["dim"] = vecs.front().values.size();
    out["rows"] = rows;
    w.write_json("embeddings.json", out);

    w.note("rows", vecs.size());
    w.note("dim", vecs.front().values.size());
    w.finish();
    std::printf("embed: %zu vectors of dim %zu (%zu cache hits, %zu requests)\n", vecs.size(),
                vecs.front().values.size(), stats.cache_hits, stats.requests);
}

// ---- cluster ----------------------------------------------------------------

void cmd_cluster(const Ctx& ctx) {
    StageWriter w(ctx, "cluster");
    auto p = require_stage_file(ctx.cfg, "embed", "embeddings.json");
    w.input("embeddings.json", p);
    auto j = load_json(p);

    Matrix X;
    std::vector<std::string> row_items, names;
    for (const auto& r : j.at("rows")) {
        X.push_back(r.at("values").get<std::vector<double>>());
        row_items.push_back(r.at("item_id").get<std::string>());
        names.push_back(r.at("name").get<std::string>());
    }
    if (X.size() < 3) throw data_error("cluster: need at least 3 embedding rows");
    if (ctx.cfg.normalize_embeddings) {
        for (auto& row : X) {
            double ss = 0.0;
            for (double v : row) ss += v * v;
            if (ss > 0.0)
                for (double& v : row) v /= std::sqrt(ss);
        }
    }

    const int n = static_cast<int>(X.size());
    int kmax = std::min(ctx.cfg.k_max, n - 1);
    int kmin = std::max(2, std::min(ctx.cfg.k_min, kmax));
    auto report = sweep_k(X, kmin, kmax, ctx.cfg.cluster_seed);
    report.strategy = ctx.cfg.strategy;
    if (ctx.cfg.strategy == "knee") {
        report.chosen_k = select_k_knee(report);
    } else if (ctx.cfg.strategy == "third_bin") {
        report.chosen_k = pick_third_bin(report);
    } else {  // fixed — validated by the config loader
        if (ctx.cfg.fixed_k < kmin || ctx.cfg.fixed_k > kmax)
            throw usage_error("config: [cluster] fixed_k=" + std::to_string(ctx.cfg.fixed_k) +
                              " outside sweep range [" + std::to_string(kmin) + ", " +
                              std::to_string(kmax) + "]");
        report.chosen_k = ctx.cfg.fixed_k;
    }

    auto model = kmeans(X, report.chosen_k, ctx.cfg.cluster_seed);
    model.representative_names = representative_name(model, names);

    w.write_json("kselection.json", ordered_json(kselection_to_json(report)));
    ordered_json cj;
    cj["model"] = cluster_model_to_json(model);
    cj["row_items"] = row_items;
    cj["row_names"] = names;
    w.write_json("cluster.json", cj);

    std::vector<KCurveRow> curves;
    for (const auto& r : report.records)
        curves.push_back(KCurveRow{r.k, r.wcss, r.silhouette, {}, {}, {}});
    w.write("curves.csv", curves_to_csv(curves));

    w.seed("cluster_seed", ctx.cfg.cluster_seed);
    w.note("rows", X.size());
    w.note("k_min", kmin);
    w.note("k_max", kmax);
    w.note("strategy", report.strategy);
    w.note("chosen_k", report.chosen_k);
    if (report.knee_k) w.note("knee_k", *report.knee_k);
    w.finish();
    std::printf("cluster: swept k=%d..%d, chose k=%d (%s)\n", kmin, kmax, report.chosen_k,
                report.strategy.c_str());
    for (const auto& warn : report.warnings)
        std::printf("cluster: warning: %s\n", warn.c_str());
}

// ---- qmatrix ----------------------------------------------------------------

void cmd_qmatrix(const Ctx& ctx) {
    StageWriter w(ctx, "qmatrix");
    auto ds = load_dataset(ctx, &w);
    auto cp = require_stage_file(ctx.cfg, "cluster", "cluster.json");
    w.input("cluster.json", cp);
    auto cj = load_json(cp);
    auto model = cluster_model_from_json(cj.at("model"));
    auto row_items = cj.at("row_items").get<std::vector<std::string>>();

    std::vector<std::string> all_items;
    for (const auto& [id, _] : ds.items) all_items.push_back(id);

    auto built = build_qmatrix(model, row_items, all_items);
    ordered_json kc_names = ordered_json::object();
    for (const auto& label : built.q.kcs) {
        int cid = std::stoi(label);
        auto it = model.representative_names.find(cid);
        kc_names[label] = it == model.representative_names.end() ? label : it->second;
    }
    ordered_json qj;
    qj["q"] = qmatrix_to_json(built.q);
    qj["kc_names"] = kc_names;
    qj["excluded_items"] = built.excluded_items;
    w.write_json("qmatrix.json", qj);

    auto randq = random_qmatrix(built.q, ctx.cfg.eval_seed);
    ordered_json rj;
    rj["q"] = qmatrix_to_json(randq);
    rj["seed"] = ctx.cfg.eval_seed;
    w.write_json("qmatrix_random.json", rj);

    for (const auto& [mname, _] : ds.kc_models) {
        auto hq = human_qmatrix(ds, mname);
        ordered_json hj;
        hj["q"] = qmatrix_to_json(hq);
        hj["kc_model"] = mname;
        w.write_json("qmatrix_human_" + sanitize(mname) + ".json", hj);
    }

    auto stats = qmatrix_stats(built.q);
    w.seed("random_q_seed", ctx.cfg.eval_seed);
    w.note("items", stats.n_items);
    w.note("kcs", stats.n_kcs);
    w.note("avg_kcs_per_item", stats.avg_kcs_per_item);
    w.note("pct_multi_kc", stats.pct_multi_kc);
    w.note("excluded_items", built.excluded_items.size());
    w.note("human_models", ds.kc_models.size());
    w.finish();
    std::printf("qmatrix: %zu items x %zu KCs (%.2f KCs/item, %.1f%% multi-KC), %zu excluded\n",
                stats.n_items, stats.n_kcs, stats.avg_kcs_per_item, stats.pct_multi_kc,
                built.excluded_items.size());
}

// ---- shared q-matrix resolution ------------------------------------------

QMatrix load_source_q(const Ctx& ctx, const Dataset& ds, const std::string& source,
                      StageWriter* w) {
    auto take = [&](const std::string& file) {
        auto p = require_stage_file(ctx.cfg, "qmatrix", file);
        if (w) w->input(file, p);
        return qmatrix_from_json(load_json(p).at("q"));
    };
    if (source == "llm") return take("qmatrix.json");
    if (source == "random") return take("qmatrix_random.json");
    if (source == "human" || starts_with(source, "human.")) {
        std::string model;
        if (source == "human") {
            if (ds.kc_models.size() != 1)
                throw usage_error(
                    "config: kc source 'human' is ambiguous; use human.<model> (available: " +
                    std::to_string(ds.kc_models.size()) + " models)");
            model = ds.kc_models.begin()->first;
        } else {
            model = source.substr(6);
        }
        return take("qmatrix_human_" + sanitize(model) + ".json");
    }
    throw usage_error("config: unknown kc source '" + source +
                      "' (expected none, random, llm, or human[.model])");
}

// ---- train ----------------------------------------------------------------

void cmd_train(const Ctx& ctx) {
    const auto& cfg = ctx.cfg;
    StageWriter w(ctx, "train");
    auto ds = load_dataset(ctx, &w);

    bool needs_q = false;
    for (const auto& m : cfg.train_models) needs_q |= m != "IRT";
    if (needs_q && cfg.train_source == "none")
        throw usage_error("config: [models] train_source 'none' only supports IRT");

    QMatrix q;
    if (needs_q) q = load_source_q(ctx, ds, cfg.train_source, &w);

    ordered_json trained = ordered_json::object();
    for (const auto& mname : cfg.train_models) {
        if (mname == "AFM" || mname == "PFA" || mname == "DAS3H" || mname == "IRT") {
            EncodedDataset enc;
            if (mname == "AFM")
                enc = encode_afm(ds, q);
            else if (mname == "PFA")
                enc = encode_pfa(ds, q);
            else if (mname == "DAS3H")
                enc = encode_das3h(ds, q);
            else
                enc = encode_irt(ds);
            if (enc.y.empty()) throw data_error("train: no usable rows for " + mname);
            FitOptions fo;
            fo.l2 = enc.l2;
            fo.lower_bound = enc.lower_bound;
            fo.seed = cfg.eval_seed;
            auto m = fit_logistic(enc.X, enc.y, fo);
            ordered_json mj;
            mj["model"] = mname;
            mj["kc_source"] = mname == "IRT" ? "none" : cfg.train_source;
            mj["fit"] = logistic_model_to_json(m);
            w.write_json("model_" + sanitize(mname) + ".json", mj);
            trained[mname] =
                ordered_json{{"rows", enc.y.size()}, {"iters", m.iters}, {"loss", m.final_loss}};
        } else if (mname == "DKT" || mname == "SAKT") {
            auto joint = joint_skills(q);
            auto seqs = detail::skill_sequences(ds, q, joint);
            ordered_json mj;
            mj["model"] = mname;
            mj["kc_source"] = cfg.train_source;
            TrainLog log;
            if (mname == "DKT") {
                DktConfig dc;
                dc.n_skills = static_cast<int>(joint.count());
                dc.hidden = cfg.kt.dkt_hidden;
                dc.lr = cfg.kt.lr;
                dc.epochs = cfg.kt.epochs;
                dc.batch_size = cfg.kt.batch_size;
                auto m = dkt_init(dc, cfg.kt.seed);
                log = train_dkt(m, seqs, nullptr, cfg.kt.seed);
                mj["net"] = dkt_to_json(m);
            } else {
                SaktConfig sc;
                sc.n_skills = static_cast<int>(joint.count());
                sc.embed = cfg.kt.sakt_embed;
                sc.max_context = cfg.kt.sakt_context;
                sc.lr = cfg.kt.lr;
                sc.epochs = cfg.kt.epochs;
                sc.batch_size = cfg.kt.batch_size;
                auto m = sakt_init(sc, cfg.kt.seed);
                log = train_sakt(m, seqs, nullptr, cfg.kt.seed);
                mj["net"] = sakt_to_json(m);
            }
            mj["epoch_loss"] = log.epoch_loss;
            w.write_json("model_" + sanitize(mname) + ".json", mj);
            trained[mname] = ordered_json{{"sequences", seqs.size()},
                                          {"skills", joint.count()},
                                          {"final_loss", log.epoch_loss.back()}};
        } else {
            throw usage_error("config: [models] unknown train model '" + mname + "'");
        }
        std::printf("train: %s done\n", mname.c_str());
    }

    w.seed("fit_seed", cfg.eval_seed);
    w.note("source", cfg.train_source);
    w.note("models", trained);
    w.finish();
}

// ---- evaluate ---------------------------------------------------------------

std::vector<Regime> parse_regimes(const std::vector<std::string>& names) {
    std::vector<Regime> out;
    for (const auto& r : names) {
        if (r == "stratified")
            out.push_back(Regime::Stratified);
        else if (r == "student_blocked")
            out.push_back(Regime::StudentBlocked);
        else if (r == "item_blocked")
            out.push_back(Regime::ItemBlocked);
        else if (r == "zeroshot_item_disjoint")
            out.push_back(Regime::ZeroshotItemDisjoint);
        else
            throw usage_error("config: [eval] unknown regime '" + r + "'");
    }
    return out;
}

void cmd_evaluate(const Ctx& ctx) {
    const auto& cfg = ctx.cfg;
    StageWriter w(ctx, "evaluate");
    auto ds = load_dataset(ctx, &w);
    auto regimes = parse_regimes(cfg.regimes);

    // materialize every requested q-matrix once; "none" carries no q
    std::deque<QMatrix> storage;
    std::vector<std::pair<std::string, const QMatrix*>> sources;
    for (const auto& name : cfg.eval_sources) {
        if (name == "none") {
            sources.emplace_back(name, nullptr);
        } else {
            storage.push_back(load_source_q(ctx, ds, name, &w));
            sources.emplace_back(name, &storage.back());
        }
    }

    EvalReport afm;
    for (const auto& [name, qp] : sources) {
        if (!qp) continue;
        auto r = run_afm_eval(ds, *qp, regimes, cfg.folds, cfg.eval_seed, name);
        afm.cells.insert(afm.cells.end(), r.cells.begin(), r.cells.end());
    }
    w.write_json("afm_eval.json", eval_report_to_json(afm));

    KtOptions opt = cfg.kt;
    auto kt = run_kt_eval(ds, sources, cfg.eval_models, opt);
    w.write_json("kt_eval.json", eval_report_to_json(kt));

    w.seed("eval_seed", cfg.eval_seed);
    w.note("afm_cells", afm.cells.size());
    w.note("kt_cells", kt.cells.size());
    w.note("folds", cfg.folds);
    w.note("kt_folds", opt.folds);
    w.finish();
    for (const auto& c : afm.cells)
        std::printf("evaluate: AFM %s/%s rmse=%.4f (n=%zu)\n", c.kc_source.c_str(),
                    c.regime.c_str(), c.rmse, c.n_rows);
    for (const auto& c : kt.cells)
        if (c.present && c.auc)
            std::printf("evaluate: %s/%s auc=%.4f rmse=%.4f (n=%zu)\n", c.model.c_str(),
                        c.kc_source.c_str(), *c.auc, c.rmse, c.n_rows);
}

// ---- zeroshot ---------------------------------------------------------------

void cmd_zeroshot(const Ctx& ctx) {
    const auto& cfg = ctx.cfg;
    StageWriter w(ctx, "zeroshot");
    auto ds = load_dataset(ctx, &w);
    auto q = load_source_q(ctx, ds, "llm", &w);

    FeatureSpec spec;
    spec.flags = std::set<std::string>(cfg.zeroshot_flags.begin(), cfg.zeroshot_flags.end());
    auto enc = encode_zeroshot(ds, q, spec);
    if (enc.y.empty()) throw data_error("zeroshot: no usable rows");

    auto plan = make_zeroshot_split(ds, q, cfg.test_fraction, cfg.eval_seed);
    // score only the held-out item side (fold 1 of the plan)
    plan.folds = 1;
    for (auto& a : plan.assignments) a = a == 1 ? 0 : 1;
    auto preds = detail::crossfit_logistic(ds, enc, plan, cfg.eval_seed);
    auto cell = detail::score_cell("llm", "ZS-LR", "zeroshot_item_disjoint", preds);

    EvalReport r;
    r.cells.push_back(cell);
    auto j = eval_report_to_json(r);
    j["flags"] = cfg.zeroshot_flags;
    j["test_fraction"] = cfg.test_fraction;
    w.write_json("zeroshot.json", j);

    std::set<std::string> test_items;
    for (const auto& p : preds) test_items.insert(p.item_id);
    w.seed("split_seed", cfg.eval_seed);
    w.note("rows_scored", cell.n_rows);
    w.note("test_items", test_items.size());
    w.note("test_fraction", cfg.test_fraction);
    w.finish();
    std::printf("zeroshot: auc=%s rmse=%.4f over %zu rows (%zu held-out items)\n",
                cell.auc ? std::to_string(*cell.auc).c_str() : "n/a", cell.rmse, cell.n_rows,
                test_items.size());
}

// ---- report -----------------------------------------------------------------

void cmd_report(const Ctx& ctx) {
    StageWriter w(ctx, "report");
    auto ap = require_stage_file(ctx.cfg, "evaluate", "afm_eval.json");
    auto kp = require_stage_file(ctx.cfg, "evaluate", "kt_eval.json");
    w.input("afm_eval.json", ap);
    w.input("kt_eval.json", kp);
    auto afm = eval_report_from_json(load_json(ap));
    auto kt = eval_report_from_json(load_json(kp));

    EvalReport zs;
    if (auto zdir = latest_stage_dir(ctx.cfg, "zeroshot");
        zdir && fs::exists(*zdir / "zeroshot.json")) {
        auto zp = *zdir / "zeroshot.json";
        w.input("zeroshot.json", zp);
        zs = eval_report_from_json(load_json(zp));
    }

    std::ostringstream md;
    md << "# kctrace report\n\n";
    md << "## AFM RMSE by cross-validation regime\n\n```\n"
       << render_rmse_table(afm) << "```\n\n";
    md << "## Knowledge-tracing AUC by KC source (student-blocked)\n\n```\n"
       << render_auc_table(kt) << "```\n\n";
    if (!zs.cells.empty()) {
        md << "## Zero-shot logistic regression (item-disjoint)\n\n";
        for (const auto& c : zs.cells) {
            md << "- " << c.model << ": ";
            if (c.auc)
                md << "AUC " << *c.auc << ", ";
            md << "RMSE " << c.rmse << ", accuracy " << c.accuracy << " over " << c.n_rows
               << " rows\n";
        }
        md << "\n";
    }
    w.write("report.md", md.str());

    EvalReport merged;
    merged.cells = afm.cells;
    merged.cells.insert(merged.cells.end(), kt.cells.begin(), kt.cells.end());
    merged.cells.insert(merged.cells.end(), zs.cells.begin(), zs.cells.end());
    w.write("report.csv", report_to_csv(merged));

    if (auto cdir = latest_stage_dir(ctx.cfg, "cluster");
        cdir && fs::exists(*cdir / "curves.csv")) {
        w.input("curves.csv", *cdir / "curves.csv");
        w.write("curves.csv", read_file(*cdir / "curves.csv"));
    }

    w.note("afm_cells", afm.cells.size());
    w.note("kt_cells", kt.cells.size());
    w.note("zeroshot_cells", zs.cells.size());
    w.finish();
    std::printf("%s", md.str().c_str());
}

// ---- mock server ------------------------------------------------------------

int cmd_mock_server(const std::string& fixture, const std::string& host, int port) {
    auto fx = load_mock_fixture(fixture);
    MockServer server(fx);
    if (!server.bind(host, port)) throw upstream_error("mock-server: cannot bind " + host);
    std::printf("mock-server: listening on http://%s:%d/v1 (POST /shutdown to stop)\n",
                host.c_str(), server.port());
    std::fflush(stdout);
    server.run();
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"knowledge-component extraction and knowledge-tracing evaluation"};
    app.require_subcommand(1);

    std::string config_path;
    bool force = false;
    bool cache_only = false;
    std::optional<std::uint64_t> seed_override;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("-c,--config", config_path, "pipeline config (INI)")->required();
        sub->add_flag("--force", force, "rewrite the latest artifact version in place");
        sub->add_flag("--cache-only", cache_only,
                      "serve every endpoint call from the response cache; fail on a miss");
        sub->add_option("--seed", seed_override,
                        "override the clustering/evaluation seeds from the config");
        return sub;
    };

    std::vector<std::pair<std::string, void (*)(const Ctx&)>> stages = {
        {"ingest", cmd_ingest},     {"extract", cmd_extract}, {"embed", cmd_embed},
        {"cluster", cmd_cluster},   {"qmatrix", cmd_qmatrix}, {"train", cmd_train},
        {"evaluate", cmd_evaluate}, {"zeroshot", cmd_zeroshot}, {"report", cmd_report}};
    static const std::map<std::string, std::string> descs = {
        {"ingest", "parse transactions, keep first attempts, link problem content"},
        {"extract", "extract knowledge components for every item via the chat endpoint"},
        {"embed", "embed extracted knowledge components"},
        {"cluster", "sweep k, pick a cluster count, fit the final k-means model"},
        {"qmatrix", "build Q-matrices (clustered, random control, human baselines)"},
        {"train", "fit the configured models on the full dataset"},
        {"evaluate", "cross-validated AFM RMSE and knowledge-tracing AUC grids"},
        {"zeroshot", "zero-shot logistic regression on item-disjoint splits"},
        {"report", "render result tables from evaluation artifacts"}};
    for (auto& [name, _] : stages) add_common(app.add_subcommand(name, descs.at(name)));

    auto* mock = app.add_subcommand("mock-server", "serve canned chat/embedding responses");
    std::string fixture, host = "127.0.0.1";
    int port = 8089;
    mock->add_option("--fixture", fixture, "mock fixture (JSON)")->required();
    mock->add_option("--host", host, "bind address");
    mock->add_option("--port", port, "bind port (0 picks a free one)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (mock->parsed()) return cmd_mock_server(fixture, host, port);

        Ctx ctx;
        try {
            ctx.cfg = load_config(config_path);
        } catch (const Error& e) {
            // any config problem — unreadable, unparsable, bad schema — is a
            // usage error, whatever layer it surfaced from
            throw usage_error(e.what());
        }
        ctx.config_sha = sha_file(config_path);
        ctx.force = force;
        if (cache_only) ctx.cfg.llm.cache_only = true;
        if (seed_override) {
            ctx.cfg.eval_seed = *seed_override;
            ctx.cfg.cluster_seed = *seed_override;
            ctx.cfg.kt.seed = *seed_override;
        }

        DirLock lock(ctx.cfg.output_dir);
        for (auto& [name, fn] : stages)
            if (app.got_subcommand(name)) {
                fn(ctx);
                return 0;
            }
        throw usage_error("no subcommand dispatched");  // unreachable
    } catch (const Error& e) {
        std::fprintf(stderr, "kctrace: %s\n", e.what());
        return e.exit_code();
    } catch (const std::exception& e) {
        std::fprintf(stderr, "kctrace: internal error: %s\n", e.what());
        return 1;
    }
}
