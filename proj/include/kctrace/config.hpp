#pragma once

// Plain-text, diffable pipeline configuration: INI-style sections with strict
// key checking so typos surface as errors naming the exact key path.

#include <filesystem>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "kctrace/eval.hpp"
#include "kctrace/ingest.hpp"
#include "kctrace/llm.hpp"
#include "kctrace/util.hpp"

namespace kctrace {

struct IniEntry {
    std::string key;
    std::string value;
    int line = 0;
};

using IniDoc = std::map<std::string, std::vector<IniEntry>>;

inline IniDoc parse_ini(const std::string& text) {
    IniDoc doc;
    std::istringstream in(text);
    std::string line, section;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        auto t = trim(line);
        if (t.empty() || t[0] == '#' || t[0] == ';') continue;
        if (t.front() == '[') {
            if (t.back() != ']')
                throw usage_error("config: line " + std::to_string(line_no) +
                                  ": unterminated section header");
            section = trim(t.substr(1, t.size() - 2));
            if (section.empty())
                throw usage_error("config: line " + std::to_string(line_no) +
                                  ": empty section name");
            doc[section];  // a section may legitimately stay empty
            continue;
        }
        auto eq = t.find('=');
        if (eq == std::string::npos)
            throw usage_error("config: line " + std::to_string(line_no) +
                              ": expected key = value");
        IniEntry e;
        e.key = trim(t.substr(0, eq));
        e.value = trim(t.substr(eq + 1));
        e.line = line_no;
        if (e.key.empty())
            throw usage_error("config: line " + std::to_string(line_no) + ": empty key");
        doc[section].push_back(std::move(e));
    }
    return doc;
}

struct PipelineConfig {
    // [paths] — resolved relative to the config file's directory
    std::filesystem::path transactions;
    std::filesystem::path content_manifest;
    std::filesystem::path cache_dir = "kc_cache";
    std::filesystem::path output_dir = "out";

    ColumnMap columns;

    LlmConfig llm;  // [endpoint]

    // [cluster]
    int k_min = 2;
    int k_max = 40;
    int bins = 3;
    std::string strategy = "third_bin";  // knee | third_bin | fixed
    int fixed_k = 0;
    bool normalize_embeddings = false;
    std::uint64_t cluster_seed = 42;

    // [models]
    KtOptions kt;
    std::vector<std::string> zeroshot_flags = {"s", "sc", "tc", "tw", "w", "a"};
    std::vector<std::string> train_models = {"AFM", "PFA"};
    std::string train_source = "llm";

    // [eval]
    std::vector<std::string> regimes = {"stratified", "student_blocked", "item_blocked"};
    int folds = 3;
    double test_fraction = 0.2;
    std::uint64_t eval_seed = 42;
    std::vector<std::string> eval_models = {"IRT", "PFA", "DAS3H", "DKT", "SAKT"};
    std::vector<std::string> eval_sources = {"none", "random", "llm"};

    std::filesystem::path config_path;   // where this config was loaded from
    nlohmann::ordered_json snapshot;     // exact keys/values as written, for manifests
};

namespace detail {

inline long long cfg_int(const std::string& section, const IniEntry& e) {
    try {
        std::size_t used = 0;
        long long v = std::stoll(e.value, &used);
        if (used != e.value.size()) throw std::invalid_argument("trailing");
        return v;
    } catch (const std::exception&) {
        throw usage_error("config: [" + section + "] " + e.key + " expects an integer, got '" +
                          e.value + "'");
    }
}

inline double cfg_double(const std::string& section, const IniEntry& e) {
    try {
        std::size_t used = 0;
        double v = std::stod(e.value, &used);
        if (used != e.value.size()) throw std::invalid_argument("trailing");
        return v;
    } catch (const std::exception&) {
        throw usage_error("config: [" + section + "] " + e.key + " expects a number, got '" +
                          e.value + "'");
    }
}

inline bool cfg_bool(const std::string& section, const IniEntry& e) {
    auto v = to_lower(e.value);
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw usage_error("config: [" + section + "] " + e.key + " expects true/false, got '" +
                      e.value + "'");
}

inline std::vector<std::string> cfg_list(const std::string& value) {
    std::vector<std::string> out;
    for (const auto& part : split(value, ',')) {
        auto t = trim(part);
        if (!t.empty()) out.push_back(t);
    }
    return out;
}

}  // namespace detail

inline PipelineConfig config_from_ini(const IniDoc& doc,
                                      const std::filesystem::path& config_path) {
    PipelineConfig cfg;
    cfg.config_path = config_path;
    auto base = config_path.has_parent_path() ? config_path.parent_path()
                                              : std::filesystem::path(".");
    auto resolve = [&](const std::string& value) -> std::filesystem::path {
        std::filesystem::path p(value);
        return p.is_absolute() ? p : base / p;
    };

    for (const auto& [section, entries] : doc) {
        for (const auto& e : entries) {
            const std::string where = "[" + section + "] " + e.key;
            if (section == "paths") {
                if (e.key == "transactions") cfg.transactions = resolve(e.value);
                else if (e.key == "content_manifest") cfg.content_manifest = resolve(e.value);
                else if (e.key == "cache_dir") cfg.cache_dir = resolve(e.value);
                else if (e.key == "output_dir") cfg.output_dir = resolve(e.value);
                else throw usage_error("config: unknown key " + where);
            } else if (section == "columns") {
                if (e.key == "student") cfg.columns.student = e.value;
                else if (e.key == "problem") cfg.columns.problem = e.value;
                else if (e.key == "step") cfg.columns.step = e.value;
                else if (e.key == "time") cfg.columns.time = e.value;
                else if (e.key == "outcome") cfg.columns.outcome = e.value;
                else if (starts_with(e.key, "kc_model."))
                    cfg.columns.kc_models[e.key.substr(9)] = e.value;
                else throw usage_error("config: unknown key " + where);
            } else if (section == "endpoint") {
                if (e.key == "base_url") cfg.llm.base_url = e.value;
                else if (e.key == "chat_model") cfg.llm.chat_model = e.value;
                else if (e.key == "embed_model") cfg.llm.embed_model = e.value;
                else if (e.key == "api_key") cfg.llm.api_key = e.value;
                else if (e.key == "seed")
                    cfg.llm.seed = static_cast<std::uint64_t>(detail::cfg_int(section, e));
                else if (e.key == "parallelism")
                    cfg.llm.parallelism = static_cast<int>(detail::cfg_int(section, e));
                else if (e.key == "max_retries")
                    cfg.llm.max_retries = static_cast<int>(detail::cfg_int(section, e));
                else if (e.key == "backoff_base_s")
                    cfg.llm.backoff_base_s = detail::cfg_double(section, e);
                else if (e.key == "embed_batch")
                    cfg.llm.embed_batch = static_cast<int>(detail::cfg_int(section, e));
                else if (e.key == "embed_include_name")
                    cfg.llm.embed_include_name = detail::cfg_bool(section, e);
                else if (e.key == "timeout_s")
                    cfg.llm.timeout_s = static_cast<int>(detail::cfg_int(section, e));
                else throw usage_error("config: unknown key " + where);
            } else if (section == "cluster") {
                if (e.key == "k_min") cfg.k_min = static_cast<int>(detail::cfg_int(section, e));
                else if (e.key == "k_max")
                    cfg.k_max = static_cast<int>(detail::cfg_int(section, e));
                else if (e.key == "bins") cfg.bins = static_cast<int>(detail::cfg_int(section, e));
                else if (e.key == "strategy") cfg.strategy = e.value;
                else if (e.key == "fixed_k")
                    cfg.fixed_k = static_cast<int>(detail::cfg_int(section, e));
                else if (e.key == "normalize")
                    cfg.normalize_embeddings = detail::cfg_bool(section, e);
                else if (e.key == "seed")
                    cfg.cluster_seed = static_cast<std::uint64_t>(detail::cfg_int(section, e));
                else throw usage_error("config: unknown key " + where);
            } else if (section == "models") {
                if (e.key == "dkt_hidden")
                    cfg.kt.dkt_hidden = static_cast<int>(detail::cfg_int(section, e));
                else if (e.key == "sakt_embed")
                    cfg.kt.sakt_embed = static_cast<int>(detail::cfg_int(section, e));
                else if (e.key == "sakt_context")
                    cfg.kt.sakt_context = static_cast<int>(detail::cfg_int(section, e));
                else if (e.key == "lr") cfg.kt.lr = detail::cfg_double(section, e);
                else if (e.key == "epochs")
                    cfg.kt.epochs = static_cast<int>(detail::cfg_int(section, e));
                else if (e.key == "batch_size")
                    cfg.kt.batch_size = static_cast<int>(detail::cfg_int(section, e));
                else if (e.key == "zeroshot_features")
                    cfg.zeroshot_flags = detail::cfg_list(e.value);
                else if (e.key == "train_models") cfg.train_models = detail::cfg_list(e.value);
                else if (e.key == "train_source") cfg.train_source = e.value;
                else throw usage_error("config: unknown key " + where);
            } else if (section == "eval") {
                if (e.key == "regimes") cfg.regimes = detail::cfg_list(e.value);
                else if (e.key == "folds")
                    cfg.folds = static_cast<int>(detail::cfg_int(section, e));
                else if (e.key == "kt_folds")
                    cfg.kt.folds = static_cast<int>(detail::cfg_int(section, e));
                else if (e.key == "test_fraction")
                    cfg.test_fraction = detail::cfg_double(section, e);
                else if (e.key == "seed")
                    cfg.eval_seed = static_cast<std::uint64_t>(detail::cfg_int(section, e));
                else if (e.key == "models") cfg.eval_models = detail::cfg_list(e.value);
                else if (e.key == "sources") cfg.eval_sources = detail::cfg_list(e.value);
                else throw usage_error("config: unknown key " + where);
            } else {
                throw usage_error("config: unknown section [" + section + "]");
            }
        }
    }

    if (cfg.strategy != "knee" && cfg.strategy != "third_bin" && cfg.strategy != "fixed")
        throw usage_error("config: [cluster] strategy must be knee, third_bin, or fixed, got '" +
                          cfg.strategy + "'");
    if (cfg.strategy == "fixed" && cfg.fixed_k < 1)
        throw usage_error("config: [cluster] fixed_k must be set for strategy = fixed");
    if (cfg.test_fraction <= 0.0 || cfg.test_fraction >= 1.0)
        throw usage_error("config: [eval] test_fraction must be in (0, 1)");

    // exact key/value snapshot, in file order, for artifact manifests
    nlohmann::ordered_json snap;
    for (const auto& [section, entries] : doc) {
        nlohmann::ordered_json sec = nlohmann::ordered_json::object();
        for (const auto& e : entries) sec[e.key] = e.value;
        snap[section] = sec;
    }
    cfg.snapshot = snap;
    cfg.kt.seed = cfg.eval_seed;
    cfg.llm.cache_dir = cfg.cache_dir;  // [paths] cache_dir feeds the endpoint gateway
    return cfg;
}

inline PipelineConfig load_config(const std::filesystem::path& path) {
    return config_from_ini(parse_ini(read_file(path)), path);
}

}  // namespace kctrace
