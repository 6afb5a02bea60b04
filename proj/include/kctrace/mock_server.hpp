#pragma once

// Fixture-driven stand-in for the chat/embeddings endpoints. Speaks just
// enough of the wire protocol for the toolkit: canned chat replies selected by
// substring match (optionally failing the first N calls to exercise retries)
// and deterministic embeddings derived from the input text.

#include <mutex>
#include <string>
#include <vector>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "kctrace/util.hpp"

namespace kctrace {

struct MockRule {
    std::string match;     // substring tested against the raw request body
    std::string response;  // assistant message content returned on match
    int fail_first = 0;    // serve this many garbage replies before the real one
};

struct MockFixture {
    std::string default_chat;  // reply when no rule matches; empty = HTTP 500
    std::vector<MockRule> rules;
    std::string embed_mode = "basis";  // "basis": one-hot axis; "hash": unit pseudo-random
    int embed_dim = 16;
};

inline MockFixture mock_fixture_from_json(const nlohmann::json& j) {
    MockFixture fx;
    if (j.contains("chat")) {
        const auto& c = j["chat"];
        fx.default_chat = c.value("default", "");
        if (c.contains("rules")) {
            for (const auto& r : c["rules"]) {
                MockRule rule;
                rule.match = r.value("match", "");
                rule.response = r.value("response", "");
                rule.fail_first = r.value("fail_first", 0);
                fx.rules.push_back(std::move(rule));
            }
        }
    }
    if (j.contains("embeddings")) {
        const auto& e = j["embeddings"];
        fx.embed_mode = e.value("mode", "basis");
        fx.embed_dim = e.value("dim", 16);
    }
    if (fx.embed_dim <= 0) throw data_error("mock fixture: embeddings dim must be positive");
    if (fx.embed_mode != "basis" && fx.embed_mode != "hash")
        throw data_error("mock fixture: unknown embeddings mode '" + fx.embed_mode + "'");
    return fx;
}

inline MockFixture load_mock_fixture(const std::filesystem::path& path) {
    auto j = nlohmann::json::parse(read_file(path), nullptr, false);
    if (j.is_discarded()) throw data_error("mock fixture is not valid JSON: " + path.string());
    return mock_fixture_from_json(j);
}

class MockServer {
public:
    explicit MockServer(MockFixture fx) : fx_(std::move(fx)) { wire(); }

    // port 0 picks a free port; returns the bound port
    int bind(const std::string& host = "127.0.0.1", int port = 0) {
        if (port == 0) {
            port_ = svr_.bind_to_any_port(host);
            if (port_ < 0) throw upstream_error("mock server: cannot bind " + host);
        } else {
            if (!svr_.bind_to_port(host, port))
                throw upstream_error("mock server: cannot bind " + host + ":" +
                                     std::to_string(port));
            port_ = port;
        }
        return port_;
    }

    // blocks until stop() or POST /shutdown
    void run() { svr_.listen_after_bind(); }

    void stop() { svr_.stop(); }
    bool running() const { return svr_.is_running(); }
    int port() const { return port_; }

    std::size_t chat_calls() const {
        std::lock_guard<std::mutex> lk(mu_);
        return chat_calls_;
    }
    std::size_t embed_calls() const {
        std::lock_guard<std::mutex> lk(mu_);
        return embed_calls_;
    }

private:
    void wire() {
        svr_.Post("/v1/chat/completions",
                  [this](const httplib::Request& req, httplib::Response& res) {
                      handle_chat(req, res);
                  });
        svr_.Post("/v1/embeddings", [this](const httplib::Request& req, httplib::Response& res) {
            handle_embed(req, res);
        });
        svr_.Get("/healthz", [](const httplib::Request&, httplib::Response& res) {
            res.set_content("ok", "text/plain");
        });
        svr_.Post("/shutdown", [this](const httplib::Request&, httplib::Response& res) {
            res.set_content("bye", "text/plain");
            svr_.stop();
        });
    }

    void handle_chat(const httplib::Request& req, httplib::Response& res) {
        std::string text;
        bool garbage = false;
        {
            std::lock_guard<std::mutex> lk(mu_);
            ++chat_calls_;
            text = fx_.default_chat;
            for (auto& rule : fx_.rules) {
                if (req.body.find(rule.match) == std::string::npos) continue;
                if (rule.fail_first > 0) {
                    --rule.fail_first;
                    garbage = true;
                } else {
                    text = rule.response;
                }
                break;
            }
        }
        if (garbage) {
            // deliberately not JSON: exercises the caller's malformed-response retry
            res.set_content("mock: transient garbage reply", "text/plain");
            return;
        }
        if (text.empty()) {
            res.status = 500;
            res.set_content("mock: no rule matched and no default reply", "text/plain");
            return;
        }
        nlohmann::json out = {
            {"model", "mock"},
            {"choices",
             nlohmann::json::array(
                 {{{"index", 0},
                   {"message", {{"role", "assistant"}, {"content", text}}},
                   {"finish_reason", "stop"}}})},
            {"usage",
             {{"prompt_tokens", static_cast<long long>(req.body.size() / 4)},
              {"completion_tokens", static_cast<long long>(text.size() / 4)}}}};
        res.set_content(out.dump(), "application/json");
    }

    std::vector<double> embed_vec(const std::string& text) const {
        auto digest = sha256_digest(text);
        std::vector<double> v(static_cast<std::size_t>(fx_.embed_dim), 0.0);
        if (fx_.embed_mode == "basis") {
            v[digest[0] % static_cast<unsigned>(fx_.embed_dim)] = 1.0;
            return v;
        }
        std::uint64_t seed = 0;
        for (int i = 0; i < 8; ++i) seed = (seed << 8) | digest[i];
        Rng rng(seed);
        double norm = 0.0;
        for (auto& x : v) {
            x = rng.normal();
            norm += x * x;
        }
        norm = std::sqrt(norm);
        if (norm > 0)
            for (auto& x : v) x /= norm;
        return v;
    }

    void handle_embed(const httplib::Request& req, httplib::Response& res) {
        {
            std::lock_guard<std::mutex> lk(mu_);
            ++embed_calls_;
        }
        auto j = nlohmann::json::parse(req.body, nullptr, false);
        if (j.is_discarded() || !j.contains("input") || !j["input"].is_array()) {
            res.status = 400;
            res.set_content("mock: embeddings request needs an input array", "text/plain");
            return;
        }
        nlohmann::json data = nlohmann::json::array();
        int idx = 0;
        for (const auto& t : j["input"]) {
            if (!t.is_string()) {
                res.status = 400;
                res.set_content("mock: embeddings inputs must be strings", "text/plain");
                return;
            }
            data.push_back({{"object", "embedding"},
                            {"index", idx++},
                            {"embedding", embed_vec(t.get<std::string>())}});
        }
        nlohmann::json out = {{"object", "list"}, {"model", "mock-embed"}, {"data", data}};
        res.set_content(out.dump(), "application/json");
    }

    MockFixture fx_;
    httplib::Server svr_;
    int port_ = 0;
    mutable std::mutex mu_;
    std::size_t chat_calls_ = 0;
    std::size_t embed_calls_ = 0;
};

}  // namespace kctrace
