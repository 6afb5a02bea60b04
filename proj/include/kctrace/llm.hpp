#pragma once

// Chat + embeddings gateway: prompt construction for KC extraction, an
// OpenAI-compatible HTTP client with retries, and a content-addressed disk
// cache so reruns are byte-identical and free.

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "kctrace/ingest.hpp"
#include "kctrace/util.hpp"

namespace kctrace {

struct KnowledgeComponent {
    std::string name;         // target 2-4 words
    std::string description;  // target 1 sentence
    std::string item_id;
    int ordinal = 0;  // position within the item's KC list
};

struct ChatPart {
    enum class Kind { Text, Image };
    Kind kind = Kind::Text;
    std::string text;  // Text parts
    std::string mime;  // Image parts: MIME type + base64 payload
    std::string b64;
};

struct ChatRequest {
    std::string model;
    std::uint64_t seed = 42;
    bool json_mode = true;  // ask for JSON output when the endpoint supports it
    std::string system;
    std::vector<ChatPart> user_parts;
};

struct ChatResponse {
    std::string text;
    std::string finish_reason;
    long long prompt_tokens = 0;
    long long completion_tokens = 0;
};

struct EmbeddingVector {
    std::vector<double> values;
    std::string item_id;  // source KC reference
    int ordinal = 0;
    std::string model_tag;
};

struct LlmConfig {
    std::string base_url = "http://127.0.0.1:8089/v1";
    std::string chat_model = "gpt-4o";
    std::string embed_model = "text-embedding-3-large";
    std::uint64_t seed = 42;
    std::string api_key;  // empty -> KCTRACE_API_KEY from the environment
    std::filesystem::path cache_dir = "kc_cache";
    int max_retries = 3;          // retries after the first attempt
    double backoff_base_s = 1.0;  // sleep base * 2^attempt between retries
    bool cache_only = false;      // never touch the network; miss = failure
    bool embed_include_name = true;
    int embed_batch = 16;
    int parallelism = 4;
    bool json_mode = true;
    int timeout_s = 120;
};

// System prompt for KC extraction. The example deliberately keeps the line
// break inside the description string.
inline constexpr const char* kExtractionPrompt =
    "Extract the knowledge components required to solve this question. Each knowledge "
    "component has two fields:\n"
    "- Name: 2 to 4 words\n"
    "- Description: 1 sentence\n"
    "Output is in JSON format, like:\n"
    "{\n"
    "  \"knowledge_components\": [\n"
    "    {\n"
    "      \"name\": \"knowledge component 1\",\n"
    "      \"description\": \"understand\n"
    "      how to apply kc 1\"\n"
    "    }\n"
    "  ]\n"
    "}";

class MalformedResponse : public Error {
public:
    explicit MalformedResponse(const std::string& msg) : Error(ErrKind::Upstream, msg) {}
};

class EmptyExtraction : public Error {
public:
    explicit EmptyExtraction(const std::string& msg) : Error(ErrKind::Data, msg) {}
};

namespace detail {

inline std::string image_mime(const std::string& path) {
    auto ext = to_lower(std::filesystem::path(path).extension().string());
    if (ext == ".png") return "image/png";
    if (ext == ".jpg" || ext == ".jpeg") return "image/jpeg";
    if (ext == ".gif") return "image/gif";
    if (ext == ".webp") return "image/webp";
    return "application/octet-stream";
}

}  // namespace detail

// The problem body opens with the literal `Content:\n\n` label; text and
// transcript segments are text parts (transcripts arrive marker-prefixed from
// ingest), images become base64 parts, all in segment order. Adjacent text
// runs collapse into one part, so text,image,text yields exactly three parts.
inline ChatRequest build_extraction_prompt(const ContentItem& item, const LlmConfig& cfg = {}) {
    if (item.segments.empty())
        throw data_error("build_extraction_prompt: item '" + item.item_id + "' has no segments");
    ChatRequest req;
    req.model = cfg.chat_model;
    req.seed = cfg.seed;
    req.json_mode = cfg.json_mode;
    req.system = kExtractionPrompt;
    std::string buf = "Content:\n\n";
    bool buf_open = true, buf_has_body = false;
    auto flush = [&] {
        if (!buf_open) return;
        ChatPart p;
        p.kind = ChatPart::Kind::Text;
        p.text = buf;
        req.user_parts.push_back(std::move(p));
        buf.clear();
        buf_open = buf_has_body = false;
    };
    for (const auto& seg : item.segments) {
        if (seg.kind == Segment::Kind::Image) {
            flush();
            std::string bytes;
            try {
                bytes = read_file(seg.value);
            } catch (const Error&) {
                throw data_error("build_extraction_prompt: cannot read image '" + seg.value +
                                 "' for item '" + item.item_id + "'");
            }
            ChatPart p;
            p.kind = ChatPart::Kind::Image;
            p.mime = detail::image_mime(seg.value);
            p.b64 = base64_encode(bytes);
            req.user_parts.push_back(std::move(p));
        } else {
            if (!buf_open) buf_open = true;
            if (buf_has_body) buf += "\n\n";
            buf += seg.value;
            buf_has_body = true;
        }
    }
    flush();
    return req;
}

namespace detail {

inline nlohmann::json chat_body(const ChatRequest& req) {
    nlohmann::json user = nlohmann::json::array();
    for (const auto& p : req.user_parts) {
        if (p.kind == ChatPart::Kind::Text)
            user.push_back({{"type", "text"}, {"text", p.text}});
        else
            user.push_back({{"type", "image_url"},
                            {"image_url", {{"url", "data:" + p.mime + ";base64," + p.b64}}}});
    }
    nlohmann::json body = {{"model", req.model},
                           {"seed", req.seed},
                           {"messages",
                            nlohmann::json::array({{{"role", "system"}, {"content", req.system}},
                                                   {{"role", "user"}, {"content", user}}})}};
    if (req.json_mode) body["response_format"] = {{"type", "json_object"}};
    return body;
}

inline nlohmann::json embed_body(const LlmConfig& cfg, const std::vector<std::string>& input) {
    return {{"model", cfg.embed_model}, {"input", input}};
}

// cache key: hex SHA-256 over endpoint path + canonical (key-sorted) JSON body
inline std::string request_key(const std::string& path, const nlohmann::json& body) {
    std::string canon = path + "\n" + body.dump();
    auto digest = sha256_digest(canon);
    return hex_encode(digest.data(), digest.size());
}

inline std::filesystem::path cache_file(const LlmConfig& cfg, const std::string& key) {
    return cfg.cache_dir / (key + ".json");
}

inline std::optional<std::string> cache_get(const LlmConfig& cfg, const std::string& key) {
    auto path = cache_file(cfg, key);
    std::error_code ec;
    if (!std::filesystem::exists(path, ec)) return std::nullopt;
    return read_file(path);
}

inline void cache_put(const LlmConfig& cfg, const std::string& key, const std::string& value) {
    write_file_atomic(cache_file(cfg, key), value);  // temp+rename: safe under races
}

struct HostPath {
    std::string host;    // scheme://host:port
    std::string prefix;  // path prefix, no trailing slash
};

inline HostPath split_base_url(const std::string& base) {
    auto scheme_end = base.find("://");
    if (scheme_end == std::string::npos)
        throw usage_error("base_url must start with http:// or https://: " + base);
    auto path_start = base.find('/', scheme_end + 3);
    if (path_start == std::string::npos) return {base, ""};
    std::string prefix = base.substr(path_start);
    while (!prefix.empty() && prefix.back() == '/') prefix.pop_back();
    return {base.substr(0, path_start), prefix};
}

inline std::string api_key_of(const LlmConfig& cfg) {
    if (!cfg.api_key.empty()) return cfg.api_key;
    const char* env = std::getenv("KCTRACE_API_KEY");
    return env ? env : "";
}

// single POST; status 0 = transport failure (message in body)
inline std::pair<int, std::string> http_post(const LlmConfig& cfg, const std::string& path,
                                             const std::string& body) {
    auto hp = split_base_url(cfg.base_url);
    httplib::Client cli(hp.host);
    cli.set_connection_timeout(10, 0);
    cli.set_read_timeout(cfg.timeout_s, 0);
    httplib::Headers headers;
    auto key = api_key_of(cfg);
    if (!key.empty()) headers.emplace("Authorization", "Bearer " + key);
    auto res = cli.Post(hp.prefix + path, headers, body, "application/json");
    if (!res) return {0, httplib::to_string(res.error())};
    return {res->status, res->body};
}

inline bool retryable_status(int status) {
    return status == 0 || status == 429 || status >= 500;
}

inline void backoff_sleep(const LlmConfig& cfg, int retry_index) {
    double secs = cfg.backoff_base_s * std::pow(2.0, retry_index);
    if (secs > 0)
        std::this_thread::sleep_for(std::chrono::duration<double>(secs));
}

inline ChatResponse parse_chat_body(const std::string& body) {
    auto j = nlohmann::json::parse(body, nullptr, false);
    if (j.is_discarded()) throw MalformedResponse("chat response is not JSON");
    ChatResponse r;
    try {
        r.text = j.at("choices").at(0).at("message").at("content").get<std::string>();
        r.finish_reason = j["choices"][0].value("finish_reason", "");
        if (j.contains("usage")) {
            r.prompt_tokens = j["usage"].value("prompt_tokens", 0LL);
            r.completion_tokens = j["usage"].value("completion_tokens", 0LL);
        }
    } catch (const nlohmann::json::exception&) {
        throw MalformedResponse("chat response missing choices[0].message.content");
    }
    return r;
}

}  // namespace detail

// Pull the KC list out of a raw model reply. Scans for the first balanced JSON
// object carrying the "knowledge_components" key, so replies wrapped in code
// fences or prose still parse.
inline std::vector<KnowledgeComponent> parse_kc_response(const std::string& raw) {
    for (std::size_t i = 0; i < raw.size(); ++i) {
        if (raw[i] != '{') continue;
        int depth = 0;
        bool in_str = false, esc = false;
        std::size_t end = std::string::npos;
        for (std::size_t j = i; j < raw.size(); ++j) {
            char c = raw[j];
            if (in_str) {
                if (esc)
                    esc = false;
                else if (c == '\\')
                    esc = true;
                else if (c == '"')
                    in_str = false;
            } else if (c == '"') {
                in_str = true;
            } else if (c == '{') {
                ++depth;
            } else if (c == '}') {
                if (--depth == 0) {
                    end = j;
                    break;
                }
            }
        }
        if (end == std::string::npos) break;  // no balanced close before end of input
        auto parsed = nlohmann::json::parse(raw.substr(i, end - i + 1), nullptr, false);
        if (parsed.is_discarded() || !parsed.is_object() ||
            !parsed.contains("knowledge_components"))
            continue;  // keep scanning; nested objects get their own try
        const auto& arr = parsed["knowledge_components"];
        if (!arr.is_array())
            throw MalformedResponse("\"knowledge_components\" is not a list");
        std::vector<KnowledgeComponent> out;
        for (const auto& el : arr) {
            if (!el.is_object() || !el.contains("name") || !el.contains("description") ||
                !el["name"].is_string() || !el["description"].is_string())
                throw MalformedResponse("knowledge component entries need string name and description");
            KnowledgeComponent kc;
            kc.name = trim(el["name"].get<std::string>());
            kc.description = trim(el["description"].get<std::string>());
            kc.ordinal = static_cast<int>(out.size());
            if (kc.name.empty() || kc.description.empty())
                throw MalformedResponse("knowledge component with empty name or description");
            out.push_back(std::move(kc));
        }
        if (out.empty()) throw EmptyExtraction("response contained no knowledge components");
        return out;
    }
    throw MalformedResponse("no JSON object with \"knowledge_components\" in response");
}

struct ExtractionFailure {
    std::string item_id;
    std::string reason;
};

struct LlmStats {
    std::size_t cache_hits = 0;
    std::size_t requests = 0;  // actual HTTP posts, including retries
    std::size_t retries = 0;
};

struct ExtractionResult {
    std::map<std::string, std::vector<KnowledgeComponent>> kcs;
    std::vector<ExtractionFailure> failures;  // items given up on after retries
    std::vector<std::string> empty_items;     // valid responses with zero KCs
    LlmStats stats;
};

namespace detail {

inline std::vector<KnowledgeComponent> extract_one(const ContentItem& item, const LlmConfig& cfg,
                                                   LlmStats& stats, bool& flagged_empty) {
    auto req = build_extraction_prompt(item, cfg);
    auto body = chat_body(req);
    auto key = request_key("/chat/completions", body);
    auto finish = [&](const std::string& response_body,
                      bool from_cache) -> std::vector<KnowledgeComponent> {
        auto chat = parse_chat_body(response_body);
        std::vector<KnowledgeComponent> kcs;
        try {
            kcs = parse_kc_response(chat.text);
        } catch (const EmptyExtraction&) {
            if (!from_cache) cache_put(cfg, key, response_body);
            flagged_empty = true;
            return {};
        }
        if (!from_cache) cache_put(cfg, key, response_body);
        for (auto& kc : kcs) kc.item_id = item.item_id;
        return kcs;
    };
    if (auto hit = cache_get(cfg, key)) {
        ++stats.cache_hits;
        return finish(*hit, true);
    }
    if (cfg.cache_only)
        throw upstream_error("cache miss for item '" + item.item_id + "' in cache-only mode");
    std::string last_err;
    for (int attempt = 0; attempt <= cfg.max_retries; ++attempt) {
        if (attempt > 0) {
            ++stats.retries;
            backoff_sleep(cfg, attempt - 1);
        }
        auto [status, resp] = http_post(cfg, "/chat/completions", body.dump());
        ++stats.requests;
        if (retryable_status(status)) {
            last_err = status == 0 ? "transport error: " + resp
                                   : "HTTP " + std::to_string(status);
            continue;
        }
        if (status != 200)
            throw upstream_error("chat endpoint returned HTTP " + std::to_string(status) +
                                 " for item '" + item.item_id + "'");
        try {
            return finish(resp, false);
        } catch (const MalformedResponse& e) {
            last_err = e.what();
            continue;
        }
    }
    throw upstream_error("item '" + item.item_id + "' failed after " +
                         std::to_string(cfg.max_retries) + " retries: " + last_err);
}

}  // namespace detail

// Extract KCs for every item, with bounded parallelism and fail-soft per item:
// an item that keeps failing lands in `failures` and the batch carries on.
inline ExtractionResult extract_kcs(const std::map<std::string, ContentItem>& items,
                                    const LlmConfig& cfg = {}) {
    ExtractionResult out;
    std::vector<const ContentItem*> todo;
    todo.reserve(items.size());
    for (const auto& [id, item] : items) todo.push_back(&item);
    std::mutex mu;
    std::atomic<std::size_t> next{0};
    auto work = [&] {
        for (;;) {
            std::size_t i = next.fetch_add(1);
            if (i >= todo.size()) return;
            const ContentItem& item = *todo[i];
            LlmStats local;
            bool flagged_empty = false;
            try {
                auto kcs = detail::extract_one(item, cfg, local, flagged_empty);
                std::lock_guard<std::mutex> lk(mu);
                out.kcs[item.item_id] = std::move(kcs);
                if (flagged_empty) out.empty_items.push_back(item.item_id);
            } catch (const std::exception& e) {
                std::lock_guard<std::mutex> lk(mu);
                out.failures.push_back({item.item_id, e.what()});
            }
            std::lock_guard<std::mutex> lk(mu);
            out.stats.cache_hits += local.cache_hits;
            out.stats.requests += local.requests;
            out.stats.retries += local.retries;
        }
    };
    int workers = std::max(1, std::min<int>(cfg.parallelism, static_cast<int>(todo.size())));
    if (workers <= 1) {
        work();
    } else {
        std::vector<std::thread> pool;
        for (int w = 0; w < workers; ++w) pool.emplace_back(work);
        for (auto& t : pool) t.join();
    }
    std::sort(out.failures.begin(), out.failures.end(),
              [](const ExtractionFailure& a, const ExtractionFailure& b) {
                  return a.item_id < b.item_id;
              });
    std::sort(out.empty_items.begin(), out.empty_items.end());
    return out;
}

// One vector per input text. Misses are fetched in batches; each text is
// cached individually so duplicates and reruns replay byte-identically.
inline std::vector<EmbeddingVector> embed_texts(const std::vector<std::string>& texts,
                                                const LlmConfig& cfg = {},
                                                LlmStats* stats_out = nullptr) {
    if (texts.empty()) throw usage_error("embed_texts: no texts given");
    for (std::size_t i = 0; i < texts.size(); ++i)
        if (trim(texts[i]).empty())
            throw data_error("embed_texts: text " + std::to_string(i) + " is empty");
    LlmStats stats;
    std::vector<std::string> keys(texts.size());
    std::vector<std::optional<std::vector<double>>> vals(texts.size());
    auto parse_cached = [](const std::string& body) {
        auto j = nlohmann::json::parse(body);
        return j.get<std::vector<double>>();
    };
    for (std::size_t i = 0; i < texts.size(); ++i) {
        keys[i] = detail::request_key("/embeddings", detail::embed_body(cfg, {texts[i]}));
        if (auto hit = detail::cache_get(cfg, keys[i])) {
            vals[i] = parse_cached(*hit);
            ++stats.cache_hits;
        }
    }
    // unique missing texts in first-appearance order; duplicates share a fetch
    std::vector<std::size_t> reps;
    std::map<std::string, std::vector<std::size_t>> by_key;
    for (std::size_t i = 0; i < texts.size(); ++i) {
        if (vals[i]) continue;
        auto& bucket = by_key[keys[i]];
        if (bucket.empty()) reps.push_back(i);
        bucket.push_back(i);
    }
    if (!reps.empty() && cfg.cache_only)
        throw upstream_error("embedding cache miss for " + std::to_string(reps.size()) +
                             " texts in cache-only mode");
    int batch = std::max(1, cfg.embed_batch);
    for (std::size_t start = 0; start < reps.size(); start += batch) {
        std::size_t stop = std::min(reps.size(), start + batch);
        std::vector<std::string> input;
        for (std::size_t r = start; r < stop; ++r) input.push_back(texts[reps[r]]);
        auto body = detail::embed_body(cfg, input);
        std::string last_err;
        bool done = false;
        for (int attempt = 0; attempt <= cfg.max_retries && !done; ++attempt) {
            if (attempt > 0) {
                ++stats.retries;
                detail::backoff_sleep(cfg, attempt - 1);
            }
            auto [status, resp] = detail::http_post(cfg, "/embeddings", body.dump());
            ++stats.requests;
            if (detail::retryable_status(status)) {
                last_err = status == 0 ? "transport error: " + resp
                                       : "HTTP " + std::to_string(status);
                continue;
            }
            if (status != 200)
                throw upstream_error("embeddings endpoint returned HTTP " +
                                     std::to_string(status));
            auto j = nlohmann::json::parse(resp, nullptr, false);
            if (j.is_discarded() || !j.contains("data") || !j["data"].is_array() ||
                j["data"].size() != input.size()) {
                last_err = "embeddings response malformed or wrong length";
                continue;
            }
            for (std::size_t r = start; r < stop; ++r) {
                const auto& entry = j["data"][r - start];
                if (!entry.contains("embedding") || !entry["embedding"].is_array())
                    throw upstream_error("embeddings response entry missing vector");
                auto vec = entry["embedding"].get<std::vector<double>>();
                std::string canon = nlohmann::json(vec).dump();
                detail::cache_put(cfg, keys[reps[r]], canon);
                for (std::size_t idx : by_key[keys[reps[r]]]) vals[idx] = vec;
            }
            done = true;
        }
        if (!done)
            throw upstream_error("embeddings batch failed after " +
                                 std::to_string(cfg.max_retries) + " retries: " + last_err);
    }
    std::size_t dim = vals[0]->size();
    if (dim == 0) throw upstream_error("embeddings endpoint returned empty vectors");
    std::vector<EmbeddingVector> out(texts.size());
    for (std::size_t i = 0; i < texts.size(); ++i) {
        if (vals[i]->size() != dim)
            throw upstream_error("embedding dimension mismatch: text " + std::to_string(i) +
                                 " has " + std::to_string(vals[i]->size()) + ", expected " +
                                 std::to_string(dim));
        for (double v : *vals[i])
            if (!std::isfinite(v))
                throw upstream_error("non-finite embedding value for text " + std::to_string(i));
        out[i].values = std::move(*vals[i]);
        out[i].model_tag = cfg.embed_model;
    }
    if (stats_out) *stats_out = stats;
    return out;
}

inline std::string kc_embed_text(const KnowledgeComponent& kc, bool include_name = true) {
    return include_name ? kc.name + ": " + kc.description : kc.description;
}

inline std::vector<EmbeddingVector> embed_kcs(const std::vector<KnowledgeComponent>& kcs,
                                              const LlmConfig& cfg = {},
                                              LlmStats* stats_out = nullptr) {
    if (kcs.empty()) throw usage_error("embed_kcs: no knowledge components given");
    std::vector<std::string> texts;
    texts.reserve(kcs.size());
    for (const auto& kc : kcs) texts.push_back(kc_embed_text(kc, cfg.embed_include_name));
    auto out = embed_texts(texts, cfg, stats_out);
    for (std::size_t i = 0; i < kcs.size(); ++i) {
        out[i].item_id = kcs[i].item_id;
        out[i].ordinal = kcs[i].ordinal;
    }
    return out;
}

}  // namespace kctrace
