#include <catch2/catch_amalgamated.hpp>

#include <atomic>
#include <chrono>
#include <filesystem>
#include <thread>

#include "kctrace/llm.hpp"
#include "kctrace/mock_server.hpp"

using namespace kctrace;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& tag) {
    static std::atomic<int> counter{0};
    auto p = fs::temp_directory_path() /
             ("kctrace_llm_" + tag + "_" + std::to_string(counter.fetch_add(1)));
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

ContentItem text_item(const std::string& id, const std::string& text) {
    ContentItem item;
    item.item_id = id;
    item.segments.push_back({Segment::Kind::Text, text});
    return item;
}

// starts on a free port; stops and joins on scope exit
struct ServerGuard {
    MockServer server;
    std::thread th;

    explicit ServerGuard(MockFixture fx) : server(std::move(fx)) {
        server.bind("127.0.0.1", 0);
        th = std::thread([this] { server.run(); });
        for (int i = 0; i < 1000 && !server.running(); ++i)
            std::this_thread::sleep_for(std::chrono::milliseconds(2));
        REQUIRE(server.running());
    }
    ~ServerGuard() {
        server.stop();
        if (th.joinable()) th.join();
    }
    std::string base_url() const {
        return "http://127.0.0.1:" + std::to_string(server.port()) + "/v1";
    }
};

LlmConfig test_config(const std::string& base_url, const fs::path& cache) {
    LlmConfig cfg;
    cfg.base_url = base_url;
    cfg.cache_dir = cache;
    cfg.backoff_base_s = 0.0;  // no sleeping in tests
    cfg.parallelism = 2;
    return cfg;
}

const char* kAdditionKcs =
    R"({"knowledge_components":[)"
    R"({"name":"Single Digit Addition","description":"Add two one-digit numbers."},)"
    R"({"name":"Equation Reading","description":"Read a simple arithmetic equation."}]})";

const char* kAlgebraKcs =
    R"({"knowledge_components":[)"
    R"({"name":"Linear Equations","description":"Isolate the unknown on one side."}]})";

const char* kDefaultKcs =
    R"({"knowledge_components":[)"
    R"({"name":"Reading Comprehension","description":"Understand what the question asks."}]})";

MockFixture standard_fixture() {
    MockFixture fx;
    fx.default_chat = kDefaultKcs;
    fx.rules.push_back({"2+2", kAdditionKcs, 0});
    fx.rules.push_back({"Solve x", kAlgebraKcs, 0});
    return fx;
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
    double dot = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    return dot / std::sqrt(na * nb);
}

}  // namespace

TEST_CASE("extraction prompt carries the fixed system text and content label") {
    auto req = build_extraction_prompt(text_item("q1", "2+2=?"));
    REQUIRE(req.system == kExtractionPrompt);
    REQUIRE(req.system.find("Extract the knowledge components required to solve this question.") !=
            std::string::npos);
    REQUIRE(req.system.find("Name: 2 to 4 words") != std::string::npos);
    REQUIRE(req.system.find("Description: 1 sentence") != std::string::npos);
    REQUIRE(req.system.find("\"knowledge_components\"") != std::string::npos);
    REQUIRE(req.seed == 42);
    REQUIRE(req.user_parts.size() == 1);
    REQUIRE(req.user_parts[0].kind == ChatPart::Kind::Text);
    REQUIRE(req.user_parts[0].text == "Content:\n\n2+2=?");
}

TEST_CASE("images become base64 parts in segment order") {
    auto dir = fresh_dir("img");
    std::string bytes = "\x89PNG\r\n\x1a\nfakebody";
    write_file_atomic(dir / "fig.png", bytes);

    ContentItem item;
    item.item_id = "q2";
    item.segments.push_back({Segment::Kind::Text, "Look at the figure."});
    item.segments.push_back({Segment::Kind::Image, (dir / "fig.png").string()});
    item.segments.push_back({Segment::Kind::Text, "What force acts on the beam?"});

    auto req = build_extraction_prompt(item);
    REQUIRE(req.user_parts.size() == 3);  // label merges into the leading text
    REQUIRE(req.user_parts[0].text == "Content:\n\nLook at the figure.");
    REQUIRE(req.user_parts[1].kind == ChatPart::Kind::Image);
    REQUIRE(req.user_parts[1].mime == "image/png");
    REQUIRE(req.user_parts[1].b64 == base64_encode(bytes));
    REQUIRE(req.user_parts[2].text == "What force acts on the beam?");

    // image-first items still open with the label
    ContentItem img_first;
    img_first.item_id = "q3";
    img_first.segments.push_back({Segment::Kind::Image, (dir / "fig.png").string()});
    auto req2 = build_extraction_prompt(img_first);
    REQUIRE(req2.user_parts.size() == 2);
    REQUIRE(req2.user_parts[0].text == "Content:\n\n");
    REQUIRE(req2.user_parts[1].kind == ChatPart::Kind::Image);

    fs::remove_all(dir);
}

TEST_CASE("transcript segments pass through verbatim and adjacent text merges") {
    ContentItem item;
    item.item_id = "q4";
    item.segments.push_back({Segment::Kind::Text, "Listen to the clip."});
    item.segments.push_back(
        {Segment::Kind::Transcript,
         std::string(kTranscriptMarker) + "The ball rolls down the incline."});
    auto req = build_extraction_prompt(item);
    REQUIRE(req.user_parts.size() == 1);
    REQUIRE(req.user_parts[0].text ==
            "Content:\n\nListen to the clip.\n\n" + std::string(kTranscriptMarker) +
                "The ball rolls down the incline.");
}

TEST_CASE("prompt construction errors name the problem") {
    ContentItem empty;
    empty.item_id = "q5";
    REQUIRE_THROWS_WITH(build_extraction_prompt(empty),
                        Catch::Matchers::ContainsSubstring("q5"));

    ContentItem bad_img;
    bad_img.item_id = "q6";
    bad_img.segments.push_back({Segment::Kind::Image, "/nonexistent/fig.png"});
    REQUIRE_THROWS_WITH(build_extraction_prompt(bad_img),
                        Catch::Matchers::ContainsSubstring("/nonexistent/fig.png"));
}

TEST_CASE("prompt construction is a pure function of its inputs") {
    auto a = build_extraction_prompt(text_item("q7", "Compute 3*4."));
    auto b = build_extraction_prompt(text_item("q7", "Compute 3*4."));
    REQUIRE(detail::chat_body(a).dump() == detail::chat_body(b).dump());
    REQUIRE(detail::request_key("/chat/completions", detail::chat_body(a)) ==
            detail::request_key("/chat/completions", detail::chat_body(b)));
}

TEST_CASE("kc responses parse from bare json, fences, and surrounding prose") {
    auto plain = parse_kc_response(kAdditionKcs);
    REQUIRE(plain.size() == 2);
    REQUIRE(plain[0].name == "Single Digit Addition");
    REQUIRE(plain[0].description == "Add two one-digit numbers.");
    REQUIRE(plain[0].ordinal == 0);
    REQUIRE(plain[1].ordinal == 1);

    auto fenced = parse_kc_response("```json\n" + std::string(kAdditionKcs) + "\n```");
    REQUIRE(fenced.size() == 2);
    REQUIRE(fenced[0].name == plain[0].name);

    auto prose = parse_kc_response("Sure! Here is the result you asked for:\n" +
                                   std::string(kAlgebraKcs) + "\nLet me know if that helps.");
    REQUIRE(prose.size() == 1);
    REQUIRE(prose[0].name == "Linear Equations");

    // an earlier object without the key is skipped; a nested carrier is found
    auto decoy = parse_kc_response(R"({"foo": 1} then {"result": )" + std::string(kAlgebraKcs) +
                                   "}");
    REQUIRE(decoy.size() == 1);

    // string values with braces do not break the balance scan
    auto braces = parse_kc_response(
        R"({"knowledge_components":[{"name":"Set Notation","description":"Read {x} as a set."}]})");
    REQUIRE(braces.size() == 1);
    REQUIRE(braces[0].description == "Read {x} as a set.");

    auto padded = parse_kc_response(
        R"({"knowledge_components":[{"name":"  Trimmed  ","description":" kept. "}]})");
    REQUIRE(padded[0].name == "Trimmed");
    REQUIRE(padded[0].description == "kept.");
}

TEST_CASE("kc response failure modes are typed") {
    REQUIRE_THROWS_AS(parse_kc_response("I cannot answer that."), MalformedResponse);
    REQUIRE_THROWS_AS(parse_kc_response("{\"other\": []}"), MalformedResponse);
    REQUIRE_THROWS_AS(parse_kc_response("{\"knowledge_components\":本"), MalformedResponse);
    REQUIRE_THROWS_AS(parse_kc_response(R"({"knowledge_components": []})"), EmptyExtraction);
    REQUIRE_THROWS_AS(parse_kc_response(R"({"knowledge_components": [{"name":"X"}]})"),
                      MalformedResponse);
    REQUIRE_THROWS_AS(
        parse_kc_response(R"({"knowledge_components": [{"name":"  ","description":"d"}]})"),
        MalformedResponse);
    REQUIRE_THROWS_AS(parse_kc_response(R"({"knowledge_components": 3})"), MalformedResponse);
}

TEST_CASE("extraction round trip against the mock server with cache replay") {
    ServerGuard guard(standard_fixture());
    auto cache = fresh_dir("cache_rt");
    auto cfg = test_config(guard.base_url(), cache);

    std::map<std::string, ContentItem> items;
    items["add1"] = text_item("add1", "What is 2+2?");
    items["alg1"] = text_item("alg1", "Solve x - 3 = 5.");
    items["read1"] = text_item("read1", "Why is the sky blue?");

    auto first = extract_kcs(items, cfg);
    REQUIRE(first.failures.empty());
    REQUIRE(first.kcs.size() == 3);
    REQUIRE(first.kcs["add1"].size() == 2);
    REQUIRE(first.kcs["add1"][0].name == "Single Digit Addition");
    REQUIRE(first.kcs["add1"][0].item_id == "add1");
    REQUIRE(first.kcs["add1"][1].ordinal == 1);
    REQUIRE(first.kcs["alg1"].size() == 1);
    REQUIRE(first.kcs["read1"][0].name == "Reading Comprehension");
    REQUIRE(first.stats.requests == 3);
    REQUIRE(first.stats.cache_hits == 0);
    REQUIRE(first.stats.retries == 0);
    REQUIRE(guard.server.chat_calls() == 3);

    auto second = extract_kcs(items, cfg);
    REQUIRE(second.stats.cache_hits == 3);
    REQUIRE(second.stats.requests == 0);
    REQUIRE(guard.server.chat_calls() == 3);  // fully served from disk
    REQUIRE(second.kcs.size() == first.kcs.size());
    for (const auto& [id, kcs] : first.kcs) {
        REQUIRE(second.kcs.at(id).size() == kcs.size());
        for (std::size_t i = 0; i < kcs.size(); ++i) {
            REQUIRE(second.kcs.at(id)[i].name == kcs[i].name);
            REQUIRE(second.kcs.at(id)[i].description == kcs[i].description);
        }
    }

    // cache-only mode replays without a server at all
    auto cfg_offline = cfg;
    cfg_offline.base_url = "http://127.0.0.1:1/v1";  // nothing listens here
    cfg_offline.cache_only = true;
    auto third = extract_kcs(items, cfg_offline);
    REQUIRE(third.failures.empty());
    REQUIRE(third.stats.cache_hits == 3);

    fs::remove_all(cache);
}

TEST_CASE("transient garbage is retried and counted") {
    MockFixture fx = standard_fixture();
    fx.rules.insert(fx.rules.begin(), {"flaky item", kAlgebraKcs, 1});
    ServerGuard guard(fx);
    auto cache = fresh_dir("cache_retry");
    auto cfg = test_config(guard.base_url(), cache);

    std::map<std::string, ContentItem> items;
    items["flaky"] = text_item("flaky", "This is the flaky item body.");
    auto res = extract_kcs(items, cfg);
    REQUIRE(res.failures.empty());
    REQUIRE(res.kcs["flaky"].size() == 1);
    REQUIRE(res.stats.retries == 1);
    REQUIRE(res.stats.requests == 2);  // garbage + good

    fs::remove_all(cache);
}

TEST_CASE("items that never parse fail soft while the batch continues") {
    MockFixture fx = standard_fixture();
    fx.rules.insert(fx.rules.begin(), {"hopeless", kAlgebraKcs, 1000});
    ServerGuard guard(fx);
    auto cache = fresh_dir("cache_fail");
    auto cfg = test_config(guard.base_url(), cache);
    cfg.max_retries = 2;

    std::map<std::string, ContentItem> items;
    items["bad"] = text_item("bad", "A hopeless case.");
    items["good"] = text_item("good", "What is 2+2?");
    auto res = extract_kcs(items, cfg);
    REQUIRE(res.kcs.count("good") == 1);
    REQUIRE(res.kcs.count("bad") == 0);
    REQUIRE(res.failures.size() == 1);
    REQUIRE(res.failures[0].item_id == "bad");
    REQUIRE(res.stats.retries == 2);

    // cold cache in cache-only mode is a per-item failure, not a crash
    auto cfg_cold = test_config(guard.base_url(), fresh_dir("cache_cold"));
    cfg_cold.cache_only = true;
    auto cold = extract_kcs(items, cfg_cold);
    REQUIRE(cold.failures.size() == 2);
    REQUIRE(cold.kcs.empty());

    fs::remove_all(cache);
}

TEST_CASE("empty extractions are flagged, not failed") {
    MockFixture fx;
    fx.default_chat = R"({"knowledge_components": []})";
    ServerGuard guard(fx);
    auto cache = fresh_dir("cache_empty");
    auto cfg = test_config(guard.base_url(), cache);

    std::map<std::string, ContentItem> items;
    items["void"] = text_item("void", "An item yielding nothing.");
    auto res = extract_kcs(items, cfg);
    REQUIRE(res.failures.empty());
    REQUIRE(res.empty_items == std::vector<std::string>{"void"});
    REQUIRE(res.kcs.at("void").empty());

    // the definitive empty answer is cached like any other
    auto again = extract_kcs(items, cfg);
    REQUIRE(again.stats.cache_hits == 1);
    REQUIRE(again.empty_items == std::vector<std::string>{"void"});

    fs::remove_all(cache);
}

TEST_CASE("embeddings come back one per text with caching and batching") {
    ServerGuard guard(standard_fixture());
    auto cache = fresh_dir("cache_embed");
    auto cfg = test_config(guard.base_url(), cache);

    // basis-mode vectors for these texts land on distinct axes
    std::vector<std::string> texts = {"alpha", "beta", "delta", "alpha"};
    LlmStats stats;
    auto vecs = embed_texts(texts, cfg, &stats);
    REQUIRE(vecs.size() == 4);
    for (const auto& v : vecs) {
        REQUIRE(v.values.size() == 16);
        REQUIRE(v.model_tag == cfg.embed_model);
    }
    REQUIRE(cosine(vecs[0].values, vecs[1].values) == Catch::Approx(0.0).margin(1e-12));
    REQUIRE(cosine(vecs[0].values, vecs[2].values) == Catch::Approx(0.0).margin(1e-12));
    REQUIRE(cosine(vecs[1].values, vecs[2].values) == Catch::Approx(0.0).margin(1e-12));
    REQUIRE(vecs[0].values == vecs[3].values);  // duplicate text, identical vector
    REQUIRE(stats.requests == 1);               // one batch for the three unique misses
    REQUIRE(guard.server.embed_calls() == 1);

    LlmStats stats2;
    auto again = embed_texts(texts, cfg, &stats2);
    REQUIRE(stats2.cache_hits == 4);
    REQUIRE(stats2.requests == 0);
    for (std::size_t i = 0; i < vecs.size(); ++i) REQUIRE(again[i].values == vecs[i].values);

    REQUIRE_THROWS_AS(embed_texts({"ok", "   "}, cfg), Error);
    REQUIRE_THROWS_AS(embed_texts({}, cfg), Error);

    fs::remove_all(cache);
}

TEST_CASE("embedded strings are name colon description with source references") {
    ServerGuard guard(standard_fixture());
    auto cache = fresh_dir("cache_kcs");
    auto cfg = test_config(guard.base_url(), cache);

    std::vector<KnowledgeComponent> kcs = {
        {"Fraction Addition", "Add two fractions with unlike denominators.", "i1", 0},
        {"Area of Circle", "Compute area from radius.", "i1", 1},
        {"Unit Conversion", "Convert between metric units.", "i2", 0}};
    REQUIRE(kc_embed_text(kcs[0]) ==
            "Fraction Addition: Add two fractions with unlike denominators.");
    REQUIRE(kc_embed_text(kcs[0], false) == "Add two fractions with unlike denominators.");

    auto vecs = embed_kcs(kcs, cfg);
    REQUIRE(vecs.size() == 3);
    REQUIRE(vecs[0].item_id == "i1");
    REQUIRE(vecs[1].ordinal == 1);
    REQUIRE(vecs[2].item_id == "i2");

    auto direct = embed_texts({kc_embed_text(kcs[0])}, cfg);
    REQUIRE(direct[0].values == vecs[0].values);

    fs::remove_all(cache);
}

TEST_CASE("corpus-wide embedding dimension mismatches are a hard error") {
    ServerGuard guard(standard_fixture());
    auto cache = fresh_dir("cache_dim");
    auto cfg = test_config(guard.base_url(), cache);

    // poison the cache entry for one text with a short vector
    auto key = detail::request_key("/embeddings", detail::embed_body(cfg, {"beta"}));
    detail::cache_put(cfg, key, "[1.0,2.0]");
    REQUIRE_THROWS_WITH(embed_texts({"alpha", "beta"}, cfg),
                        Catch::Matchers::ContainsSubstring("dimension mismatch"));

    fs::remove_all(cache);
}

TEST_CASE("mock server shuts down over http") {
    MockServer server(standard_fixture());
    int port = server.bind("127.0.0.1", 0);
    std::thread th([&] { server.run(); });
    for (int i = 0; i < 1000 && !server.running(); ++i)
        std::this_thread::sleep_for(std::chrono::milliseconds(2));
    REQUIRE(server.running());

    httplib::Client cli("http://127.0.0.1:" + std::to_string(port));
    auto res = cli.Post("/shutdown", "", "text/plain");
    REQUIRE(res);
    REQUIRE(res->status == 200);
    th.join();
    REQUIRE(!server.running());
}
