#pragma once

// Transaction TSV parsing, first-attempt reduction, and content-manifest
// loading, linked into one Dataset.

#include <cctype>
#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "kctrace/util.hpp"

namespace kctrace {

inline constexpr const char* kTranscriptMarker = "[transcription of embedded mp3 file]: ";

struct TransactionRecord {
    long long row_id = 0;
    std::string student_id;
    std::string problem_id;
    std::string step_id;
    long long timestamp = 0;  // UTC milliseconds
    int outcome = 0;          // 1 = correct first attempt
    // KC model name -> labels on this row (possibly empty)
    std::map<std::string, std::vector<std::string>> kc_labels;
};

struct Segment {
    enum class Kind { Text, Image, Transcript };
    Kind kind = Kind::Text;
    std::string value;  // text, transcript text (marker included), or image path
};

struct ContentItem {
    std::string item_id;
    std::vector<Segment> segments;
    std::string source_path;
};

struct ColumnMap {
    std::string student = "Anon Student Id";
    std::string problem = "Problem Name";
    std::string step = "Step Name";
    std::string time = "Time";
    std::string outcome = "Outcome";
    std::map<std::string, std::string> kc_models;  // model name -> column name
};

struct Reject {
    long long row_number = 0;  // 1-based, header = row 1
    std::string reason;
};

struct ParseResult {
    std::vector<TransactionRecord> records;
    std::vector<Reject> rejects;
};

struct Dataset {
    std::vector<TransactionRecord> interactions;  // sorted by (student, timestamp, row_id)
    std::map<std::string, ContentItem> items;
    // model name -> item -> union of step-level labels
    std::map<std::string, std::map<std::string, std::set<std::string>>> kc_models;
    struct Stats {
        std::size_t before = 0;
        std::size_t after = 0;
    } stats;
};

// ---- timestamp parsing ----

// days since 1970-01-01 for a proleptic Gregorian date (Hinnant's algorithm)
inline long long days_from_civil(int y, int m, int d) {
    y -= m <= 2;
    const int era = (y >= 0 ? y : y - 399) / 400;
    const unsigned yoe = static_cast<unsigned>(y - era * 400);
    const unsigned doy = (153u * (m + (m > 2 ? -3 : 9)) + 2) / 5 + d - 1;
    const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    return static_cast<long long>(era) * 146097 + static_cast<long long>(doe) - 719468;
}

// Accepts "YYYY-MM-DD HH:MM:SS[.fff]" (UTC) or a plain integer (epoch ms).
inline std::optional<long long> parse_timestamp_ms(const std::string& raw) {
    std::string s = trim(raw);
    if (s.empty()) return std::nullopt;
    bool all_digits = true;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (!std::isdigit(static_cast<unsigned char>(s[i])) && !(i == 0 && s[i] == '-'))
            all_digits = false;
    }
    if (all_digits) {
        try {
            return std::stoll(s);
        } catch (...) {
            return std::nullopt;
        }
    }
    int y, mo, d, h, mi, sec;
    char sep;
    if (std::sscanf(s.c_str(), "%d-%d-%d%c%d:%d:%d", &y, &mo, &d, &sep, &h, &mi, &sec) != 7)
        return std::nullopt;
    if (mo < 1 || mo > 12 || d < 1 || d > 31 || h < 0 || h > 23 || mi < 0 || mi > 59 ||
        sec < 0 || sec > 60)
        return std::nullopt;
    long long ms = 0;
    auto dot = s.find('.');
    if (dot != std::string::npos) {
        std::string frac = s.substr(dot + 1, 3);
        while (frac.size() < 3) frac += '0';
        for (char c : frac) {
            if (!std::isdigit(static_cast<unsigned char>(c))) return std::nullopt;
        }
        ms = std::stoll(frac);
    }
    long long days = days_from_civil(y, mo, d);
    return ((days * 24 + h) * 60 + mi) * 60000LL + sec * 1000LL + ms;
}

// DataShop first-attempt vocabulary; hints count as incorrect.
inline std::optional<int> parse_outcome(const std::string& raw) {
    std::string s = to_lower(trim(raw));
    if (s == "correct" || s == "1") return 1;
    if (s == "incorrect" || s == "hint" || s == "0") return 0;
    return std::nullopt;
}

// ---- operations ----

inline ParseResult parse_transactions(const std::filesystem::path& path, const ColumnMap& cmap) {
    std::string content = read_file(path);
    ParseResult out;
    if (trim(content).empty()) return out;

    std::vector<std::string> lines = split(content, '\n');
    while (!lines.empty() && trim(lines.back()).empty()) lines.pop_back();
    if (lines.empty()) return out;

    std::vector<std::string> header = split(lines[0], '\t');
    for (auto& h : header) h = trim(h);
    auto col = [&](const std::string& name) -> std::optional<std::size_t> {
        for (std::size_t i = 0; i < header.size(); ++i)
            if (header[i] == name) return i;
        return std::nullopt;
    };
    auto need = [&](const std::string& name) {
        auto c = col(name);
        if (!c) throw usage_error("transactions: missing mapped column '" + name + "'");
        return *c;
    };
    std::size_t c_student = need(cmap.student);
    std::size_t c_problem = need(cmap.problem);
    std::size_t c_step = need(cmap.step);
    std::size_t c_time = need(cmap.time);
    std::size_t c_outcome = need(cmap.outcome);
    std::vector<std::pair<std::string, std::size_t>> c_kcs;
    for (const auto& [model, column] : cmap.kc_models) c_kcs.emplace_back(model, need(column));

    for (std::size_t li = 1; li < lines.size(); ++li) {
        long long row_number = static_cast<long long>(li) + 1;
        if (trim(lines[li]).empty()) continue;
        std::vector<std::string> cells = split(lines[li], '\t');
        auto cell = [&](std::size_t c) -> std::string {
            return c < cells.size() ? trim(cells[c]) : std::string();
        };
        auto ts = parse_timestamp_ms(cell(c_time));
        if (!ts) {
            out.rejects.push_back({row_number, "unparseable time: '" + cell(c_time) + "'"});
            continue;
        }
        auto oc = parse_outcome(cell(c_outcome));
        if (!oc) {
            out.rejects.push_back({row_number, "unparseable outcome: '" + cell(c_outcome) + "'"});
            continue;
        }
        TransactionRecord r;
        r.row_id = row_number;
        r.student_id = cell(c_student);
        r.problem_id = cell(c_problem);
        r.step_id = cell(c_step);
        r.timestamp = *ts;
        r.outcome = *oc;
        for (const auto& [model, c] : c_kcs) {
            std::vector<std::string> labels;
            // DataShop packs multiple KCs into one cell separated by "~~"
            std::string raw = cell(c);
            std::size_t pos = 0;
            while (pos <= raw.size()) {
                std::size_t next = raw.find("~~", pos);
                std::string piece =
                    trim(next == std::string::npos ? raw.substr(pos) : raw.substr(pos, next - pos));
                if (!piece.empty()) labels.push_back(piece);
                if (next == std::string::npos) break;
                pos = next + 2;
            }
            r.kc_labels[model] = labels;
        }
        out.records.push_back(std::move(r));
    }
    return out;
}

inline std::vector<TransactionRecord> reduce_first_attempts(std::vector<TransactionRecord> records) {
    std::map<std::tuple<std::string, std::string, std::string>, std::size_t> best;
    for (std::size_t i = 0; i < records.size(); ++i) {
        auto key = std::make_tuple(records[i].student_id, records[i].problem_id, records[i].step_id);
        auto it = best.find(key);
        if (it == best.end()) {
            best.emplace(key, i);
        } else {
            const auto& cur = records[it->second];
            const auto& cand = records[i];
            if (cand.timestamp < cur.timestamp ||
                (cand.timestamp == cur.timestamp && cand.row_id < cur.row_id))
                it->second = i;
        }
    }
    std::vector<TransactionRecord> out;
    out.reserve(best.size());
    for (const auto& [key, idx] : best) out.push_back(records[idx]);
    std::sort(out.begin(), out.end(), [](const TransactionRecord& a, const TransactionRecord& b) {
        if (a.student_id != b.student_id) return a.student_id < b.student_id;
        if (a.timestamp != b.timestamp) return a.timestamp < b.timestamp;
        return a.row_id < b.row_id;
    });
    return out;
}

inline std::map<std::string, ContentItem> load_content_manifest(const std::filesystem::path& path) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(read_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw data_error("content manifest: invalid JSON: " + std::string(e.what()));
    }
    if (!doc.contains("items") || !doc["items"].is_array())
        throw data_error("content manifest: missing 'items' array");
    std::filesystem::path base = path.has_parent_path() ? path.parent_path() : ".";
    std::map<std::string, ContentItem> out;
    for (const auto& it : doc["items"]) {
        ContentItem item;
        item.item_id = it.value("item_id", "");
        item.source_path = path.string();
        if (item.item_id.empty()) throw data_error("content manifest: item without item_id");
        if (!it.contains("segments") || !it["segments"].is_array() || it["segments"].empty())
            throw data_error("content manifest: item '" + item.item_id + "' has no segments");
        for (const auto& seg : it["segments"]) {
            std::string kind = seg.value("kind", "");
            std::string value = seg.value("value", "");
            Segment s;
            if (kind == "text") {
                s.kind = Segment::Kind::Text;
                s.value = value;
            } else if (kind == "image") {
                s.kind = Segment::Kind::Image;
                std::filesystem::path p(value);
                s.value = p.is_absolute() ? p.string() : (base / p).string();
            } else if (kind == "transcript") {
                if (!starts_with(value, kTranscriptMarker))
                    throw data_error("content manifest: transcript in item '" + item.item_id +
                                     "' lacks the required marker prefix");
                s.kind = Segment::Kind::Transcript;
                s.value = value;
            } else {
                throw data_error("content manifest: unknown segment kind '" + kind + "' in item '" +
                                 item.item_id + "'");
            }
            item.segments.push_back(std::move(s));
        }
        out[item.item_id] = std::move(item);
    }
    return out;
}

inline Dataset link_content(std::vector<TransactionRecord> records,
                            std::map<std::string, ContentItem> items) {
    Dataset ds;
    ds.stats.before = records.size();
    ds.items = std::move(items);
    for (auto& r : records) {
        if (!ds.items.count(r.problem_id)) continue;
        for (const auto& [model, labels] : r.kc_labels) {
            auto& entry = ds.kc_models[model][r.problem_id];
            for (const auto& l : labels) entry.insert(l);
        }
        ds.interactions.push_back(std::move(r));
    }
    ds.stats.after = ds.interactions.size();
    if (ds.stats.after == 0)
        throw data_error("link_content: zero interactions map to content items");
    return ds;
}

// ---- artifact (de)serialization ----

inline nlohmann::json dataset_to_json(const Dataset& ds) {
    nlohmann::json j;
    j["stats"] = {{"before", ds.stats.before}, {"after", ds.stats.after}};
    auto& rows = j["interactions"] = nlohmann::json::array();
    for (const auto& r : ds.interactions) {
        nlohmann::json row = {{"row_id", r.row_id},     {"student", r.student_id},
                              {"problem", r.problem_id}, {"step", r.step_id},
                              {"time", r.timestamp},     {"outcome", r.outcome}};
        rows.push_back(std::move(row));
    }
    auto& items = j["items"] = nlohmann::json::array();
    for (const auto& [id, item] : ds.items) {
        nlohmann::json ji = {{"item_id", id}, {"segments", nlohmann::json::array()}};
        for (const auto& s : item.segments) {
            const char* kind = s.kind == Segment::Kind::Text      ? "text"
                               : s.kind == Segment::Kind::Image   ? "image"
                                                                  : "transcript";
            ji["segments"].push_back({{"kind", kind}, {"value", s.value}});
        }
        items.push_back(std::move(ji));
    }
    auto& models = j["kc_models"] = nlohmann::json::object();
    for (const auto& [model, per_item] : ds.kc_models) {
        nlohmann::json jm = nlohmann::json::object();
        for (const auto& [item, labels] : per_item)
            jm[item] = std::vector<std::string>(labels.begin(), labels.end());
        models[model] = std::move(jm);
    }
    return j;
}

inline Dataset dataset_from_json(const nlohmann::json& j) {
    Dataset ds;
    ds.stats.before = j.at("stats").at("before").get<std::size_t>();
    ds.stats.after = j.at("stats").at("after").get<std::size_t>();
    for (const auto& row : j.at("interactions")) {
        TransactionRecord r;
        r.row_id = row.at("row_id").get<long long>();
        r.student_id = row.at("student").get<std::string>();
        r.problem_id = row.at("problem").get<std::string>();
        r.step_id = row.at("step").get<std::string>();
        r.timestamp = row.at("time").get<long long>();
        r.outcome = row.at("outcome").get<int>();
        ds.interactions.push_back(std::move(r));
    }
    for (const auto& ji : j.at("items")) {
        ContentItem item;
        item.item_id = ji.at("item_id").get<std::string>();
        for (const auto& js : ji.at("segments")) {
            Segment s;
            std::string kind = js.at("kind").get<std::string>();
            s.kind = kind == "text"    ? Segment::Kind::Text
                     : kind == "image" ? Segment::Kind::Image
                                       : Segment::Kind::Transcript;
            s.value = js.at("value").get<std::string>();
            item.segments.push_back(std::move(s));
        }
        ds.items[item.item_id] = std::move(item);
    }
    if (j.contains("kc_models")) {
        for (const auto& [model, per_item] : j.at("kc_models").items()) {
            for (const auto& [item, labels] : per_item.items()) {
                auto& entry = ds.kc_models[model][item];
                for (const auto& l : labels) entry.insert(l.get<std::string>());
            }
        }
    }
    return ds;
}

}  // namespace kctrace
