#pragma once

// Interaction-log parsing, implicit->binary labeling, k-core filtering,
// train/val/test splitting (random and cold-start), layered-embedding file
// format, and JSONL metadata.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "taste/common.hpp"

namespace taste {

struct InteractionEvent {
    int64_t user = 0;  // dense index, see KeyMap
    int64_t item = 0;
    int64_t timestamp = 0;  // unix seconds
};

struct LabeledPair {
    int64_t user = 0;
    int64_t item = 0;
    int64_t count = 0;  // distinct events for this (user, item)
    int label = 0;      // 1 iff count >= threshold
    bool operator==(const LabeledPair&) const = default;
};

struct SplitSet {
    std::vector<LabeledPair> train, validation, test;
};

struct ColdSplitSet {
    std::vector<LabeledPair> train, warm_validation, warm_test, cold_validation, cold_test;
    std::vector<int64_t> cold_items;
};

// First-appearance-order string interner.
struct KeyMap {
    std::vector<std::string> keys;
    std::unordered_map<std::string, int64_t> index;

    int64_t intern(const std::string& key) {
        auto it = index.find(key);
        if (it != index.end()) return it->second;
        const auto id = static_cast<int64_t>(keys.size());
        keys.push_back(key);
        index.emplace(key, id);
        return id;
    }
    int64_t lookup(const std::string& key) const {
        auto it = index.find(key);
        return it == index.end() ? -1 : it->second;
    }
    static KeyMap from_keys(std::vector<std::string> ks) {
        KeyMap m;
        for (auto& k : ks) m.intern(k);
        return m;
    }
};

struct EventLog {
    std::vector<InteractionEvent> events;
    KeyMap users;
    KeyMap items;
};

// ---------------------------------------------------------------------------
// Events TSV: user_id \t item_id \t timestamp. A literal header line is
// skipped when present.

inline EventLog parse_interactions(const std::string& path) {
    const std::string text = read_file(path);
    TASTE_CHECK(!text.empty(), Errc::empty_input, "events file is empty: " + path);
    EventLog log;
    size_t line_start = 0, line_no = 0;
    while (line_start < text.size()) {
        ++line_no;
        size_t line_end = text.find('\n', line_start);
        if (line_end == std::string::npos) line_end = text.size();
        std::string line = text.substr(line_start, line_end - line_start);
        if (!line.empty() && line.back() == '\r') line.pop_back();
        line_start = line_end + 1;
        if (line.empty()) continue;
        if (line_no == 1 && line == "user_id\titem_id\ttimestamp") continue;
        const size_t t1 = line.find('\t');
        const size_t t2 = t1 == std::string::npos ? std::string::npos : line.find('\t', t1 + 1);
        TASTE_CHECK(t1 != std::string::npos && t2 != std::string::npos &&
                        line.find('\t', t2 + 1) == std::string::npos,
                    Errc::malformed_line, "line " + std::to_string(line_no) + ": expected 3 fields");
        const std::string user_key = line.substr(0, t1);
        const std::string item_key = line.substr(t1 + 1, t2 - t1 - 1);
        const std::string ts_str = line.substr(t2 + 1);
        TASTE_CHECK(!user_key.empty() && !item_key.empty(), Errc::malformed_line,
                    "line " + std::to_string(line_no) + ": empty key");
        int64_t ts = 0;
        try {
            size_t pos = 0;
            ts = std::stoll(ts_str, &pos);
            TASTE_CHECK(pos == ts_str.size(), Errc::bad_timestamp, "");
        } catch (const TasteError&) {
            fail(Errc::bad_timestamp,
                 "line " + std::to_string(line_no) + ": '" + ts_str + "' is not an integer");
        } catch (const std::exception&) {
            fail(Errc::bad_timestamp,
                 "line " + std::to_string(line_no) + ": '" + ts_str + "' is not an integer");
        }
        TASTE_CHECK(ts >= 0, Errc::bad_timestamp,
                    "line " + std::to_string(line_no) + ": negative timestamp");
        log.events.push_back({log.users.intern(user_key), log.items.intern(item_key), ts});
    }
    TASTE_CHECK(!log.events.empty(), Errc::empty_input, "no events in " + path);
    return log;
}

// ---------------------------------------------------------------------------
// Implicit -> binary labels. One pair per distinct (user, item); label 1 iff
// the event count reaches the threshold. Output sorted by (user, item).

inline std::vector<LabeledPair> binarize(const std::vector<InteractionEvent>& events,
                                         int64_t threshold) {
    TASTE_CHECK(threshold >= 1, Errc::degenerate_input, "threshold must be >= 1");
    std::map<std::pair<int64_t, int64_t>, int64_t> counts;
    for (const auto& e : events) ++counts[{e.user, e.item}];
    std::vector<LabeledPair> pairs;
    pairs.reserve(counts.size());
    for (const auto& [key, count] : counts)
        pairs.push_back({key.first, key.second, count, count >= threshold ? 1 : 0});
    return pairs;
}

// ---------------------------------------------------------------------------
// k-core over distinct user-item pairs, iterated to the (unique) fixpoint.

inline std::vector<LabeledPair> k_core_filter(std::vector<LabeledPair> pairs, int64_t k) {
    TASTE_CHECK(k >= 1, Errc::degenerate_input, "k must be >= 1");
    if (k == 1) {
        std::sort(pairs.begin(), pairs.end(), [](const LabeledPair& a, const LabeledPair& b) {
            return std::tie(a.user, a.item) < std::tie(b.user, b.item);
        });
        return pairs;
    }
    bool changed = true;
    while (changed && !pairs.empty()) {
        std::unordered_map<int64_t, int64_t> user_deg, item_deg;
        for (const auto& p : pairs) {
            ++user_deg[p.user];
            ++item_deg[p.item];
        }
        std::vector<LabeledPair> kept;
        kept.reserve(pairs.size());
        for (const auto& p : pairs)
            if (user_deg[p.user] >= k && item_deg[p.item] >= k) kept.push_back(p);
        changed = kept.size() != pairs.size();
        pairs = std::move(kept);
    }
    std::sort(pairs.begin(), pairs.end(), [](const LabeledPair& a, const LabeledPair& b) {
        return std::tie(a.user, a.item) < std::tie(b.user, b.item);
    });
    return pairs;
}

// ---------------------------------------------------------------------------
// Per-user random split. Sizes: floor(n*r_val) to validation,
// floor(n*r_test) to test, remainder to train (so a 1-pair user trains).

struct SplitRatios {
    double train = 0.8, validation = 0.1, test = 0.1;
};

inline void check_ratios(const SplitRatios& r) {
    TASTE_CHECK(r.train > 0 && r.validation > 0 && r.test > 0, Errc::config_error,
                "split ratios must be positive");
    TASTE_CHECK(std::abs(r.train + r.validation + r.test - 1.0) < 1e-9, Errc::config_error,
                "split ratios must sum to 1");
}

inline SplitSet split_random(const std::vector<LabeledPair>& pairs, const SplitRatios& ratios,
                             uint64_t seed) {
    check_ratios(ratios);
    std::map<int64_t, std::vector<LabeledPair>> by_user;
    for (const auto& p : pairs) by_user[p.user].push_back(p);
    Rng rng(seed);
    SplitSet out;
    for (auto& [user, user_pairs] : by_user) {
        (void)user;
        std::sort(user_pairs.begin(), user_pairs.end(),
                  [](const LabeledPair& a, const LabeledPair& b) { return a.item < b.item; });
        rng.shuffle(user_pairs);
        const size_t n = user_pairs.size();
        const auto n_val = static_cast<size_t>(std::floor(static_cast<double>(n) * ratios.validation));
        const auto n_test = static_cast<size_t>(std::floor(static_cast<double>(n) * ratios.test));
        const size_t n_train = n - n_val - n_test;
        for (size_t i = 0; i < n; ++i) {
            if (i < n_train)
                out.train.push_back(user_pairs[i]);
            else if (i < n_train + n_val)
                out.validation.push_back(user_pairs[i]);
            else
                out.test.push_back(user_pairs[i]);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Cold-start split: floor(|items| * cold_fraction) items become cold; their
// pairs alternate val/test after a seeded shuffle (exact 1:1); warm pairs
// follow the per-user random split.

inline ColdSplitSet split_cold_start(const std::vector<LabeledPair>& pairs, double cold_fraction,
                                     const SplitRatios& ratios, uint64_t seed) {
    TASTE_CHECK(cold_fraction > 0.0 && cold_fraction < 1.0, Errc::config_error,
                "cold_fraction must be in (0,1)");
    check_ratios(ratios);
    std::set<int64_t> item_set;
    for (const auto& p : pairs) item_set.insert(p.item);
    std::vector<int64_t> items(item_set.begin(), item_set.end());
    const auto n_cold =
        static_cast<size_t>(std::floor(static_cast<double>(items.size()) * cold_fraction));
    TASTE_CHECK(n_cold >= 1, Errc::degenerate_cold_fraction,
                "cold fraction selects zero items out of " + std::to_string(items.size()));
    Rng rng(seed);
    rng.shuffle(items);
    std::set<int64_t> cold(items.begin(), items.begin() + static_cast<long>(n_cold));

    std::vector<LabeledPair> cold_pairs, warm_pairs;
    for (const auto& p : pairs)
        (cold.count(p.item) ? cold_pairs : warm_pairs).push_back(p);
    rng.shuffle(cold_pairs);

    ColdSplitSet out;
    out.cold_items.assign(cold.begin(), cold.end());
    for (size_t i = 0; i < cold_pairs.size(); ++i)
        (i % 2 == 0 ? out.cold_validation : out.cold_test).push_back(cold_pairs[i]);
    SplitSet warm = split_random(warm_pairs, ratios, rng.next_u64());
    out.train = std::move(warm.train);
    out.warm_validation = std::move(warm.validation);
    out.warm_test = std::move(warm.test);
    return out;
}

// ---------------------------------------------------------------------------
// Layered embeddings: per item an (L, H) f32 audio matrix plus a d_text f32
// text vector (all-zero when the item has no labeled text).

struct LayeredEmbeddings {
    int64_t n = 0, L = 0, H = 0, d_text = 0;
    std::vector<float> audio;         // n * L * H, item-major, layer-major
    std::vector<float> text;          // n * d_text
    std::vector<uint8_t> present;     // per item; 0 after re-alignment gaps

    const float* audio_at(int64_t item) const { return audio.data() + item * L * H; }
    const float* text_at(int64_t item) const { return text.data() + item * d_text; }
    bool has(int64_t item) const {
        return item >= 0 && item < n && present[static_cast<size_t>(item)] != 0;
    }
};

constexpr char kEmbMagic[8] = {'T', 'A', 'S', 'T', 'E', 'E', 'M', 'B'};
constexpr uint32_t kEmbVersion = 1;

inline std::string embeddings_sidecar_path(const std::string& path) { return path + ".keys.json"; }

inline void save_layered_embeddings(const std::string& path, const LayeredEmbeddings& emb,
                                    const std::vector<std::string>& item_keys) {
    TASTE_CHECK(static_cast<int64_t>(item_keys.size()) == emb.n, Errc::shape_error,
                "key count != item count");
    ByteWriter w;
    w.raw(kEmbMagic, 8);
    w.u32(kEmbVersion);
    w.u32(static_cast<uint32_t>(emb.n));
    w.u32(static_cast<uint32_t>(emb.L));
    w.u32(static_cast<uint32_t>(emb.H));
    w.u32(static_cast<uint32_t>(emb.d_text));
    w.raw(emb.audio.data(), emb.audio.size() * sizeof(float));
    w.raw(emb.text.data(), emb.text.size() * sizeof(float));
    write_file(path, w.bytes);
    nlohmann::json side;
    side["items"] = item_keys;
    write_file(embeddings_sidecar_path(path), side.dump(2) + "\n");
}

struct LoadedEmbeddings {
    LayeredEmbeddings emb;
    std::vector<std::string> item_keys;
};

inline LoadedEmbeddings load_layered_embeddings(const std::string& path) {
    const std::string bytes = read_file(path);
    ByteReader r(bytes);
    char magic[8];
    r.raw(magic, 8);
    TASTE_CHECK(std::memcmp(magic, kEmbMagic, 8) == 0, Errc::bad_magic,
                path + " is not a TASTEEMB file");
    const uint32_t version = r.u32();
    TASTE_CHECK(version == kEmbVersion, Errc::version_mismatch,
                "TASTEEMB version " + std::to_string(version));
    LoadedEmbeddings out;
    auto& e = out.emb;
    e.n = r.u32();
    e.L = r.u32();
    e.H = r.u32();
    e.d_text = r.u32();
    TASTE_CHECK(e.L >= 1, Errc::shape_error, "layer count must be >= 1");
    const size_t n_audio = static_cast<size_t>(e.n * e.L * e.H);
    const size_t n_text = static_cast<size_t>(e.n * e.d_text);
    e.audio.resize(n_audio);
    e.text.resize(n_text);
    r.raw(e.audio.data(), n_audio * sizeof(float));
    r.raw(e.text.data(), n_text * sizeof(float));
    TASTE_CHECK(r.done(), Errc::truncated_file, "trailing bytes in " + path);
    for (float v : e.audio)
        TASTE_CHECK(std::isfinite(v), Errc::non_finite_value, "audio payload has NaN/Inf");
    for (float v : e.text)
        TASTE_CHECK(std::isfinite(v), Errc::non_finite_value, "text payload has NaN/Inf");
    e.present.assign(static_cast<size_t>(e.n), 1);

    nlohmann::json side = nlohmann::json::parse(read_file(embeddings_sidecar_path(path)));
    TASTE_CHECK(side.contains("items") && side["items"].is_array(), Errc::missing_field,
                "sidecar lacks 'items'");
    out.item_keys = side["items"].get<std::vector<std::string>>();
    TASTE_CHECK(static_cast<int64_t>(out.item_keys.size()) == e.n, Errc::shape_error,
                "sidecar key count != N");
    return out;
}

// Re-index embeddings from file order to a dataset's item order. Items with
// no embedding get zero rows and present=0.
inline LayeredEmbeddings align_embeddings(const LoadedEmbeddings& loaded,
                                          const std::vector<std::string>& dataset_item_keys) {
    std::unordered_map<std::string, int64_t> pos;
    for (size_t i = 0; i < loaded.item_keys.size(); ++i)
        pos.emplace(loaded.item_keys[i], static_cast<int64_t>(i));
    LayeredEmbeddings out;
    out.n = static_cast<int64_t>(dataset_item_keys.size());
    out.L = loaded.emb.L;
    out.H = loaded.emb.H;
    out.d_text = loaded.emb.d_text;
    out.audio.assign(static_cast<size_t>(out.n * out.L * out.H), 0.0f);
    out.text.assign(static_cast<size_t>(out.n * out.d_text), 0.0f);
    out.present.assign(static_cast<size_t>(out.n), 0);
    for (int64_t i = 0; i < out.n; ++i) {
        auto it = pos.find(dataset_item_keys[static_cast<size_t>(i)]);
        if (it == pos.end()) continue;
        const int64_t src = it->second;
        std::copy_n(loaded.emb.audio_at(src), out.L * out.H, out.audio.begin() + i * out.L * out.H);
        std::copy_n(loaded.emb.text_at(src), out.d_text, out.text.begin() + i * out.d_text);
        out.present[static_cast<size_t>(i)] = 1;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Dataset artifact: filtered pairs with split tags, plus key-map sidecars.

enum class SplitTag : uint8_t { train = 0, validation = 1, test = 2, cold_validation = 3, cold_test = 4 };

struct Dataset {
    std::vector<LabeledPair> pairs;
    std::vector<uint8_t> split;  // SplitTag per pair
    std::vector<std::string> user_keys, item_keys;
    std::vector<int64_t> cold_items;
    int64_t threshold = 2;
    int64_t k_core = 5;
    uint64_t seed = 0;

    std::vector<LabeledPair> select(std::initializer_list<SplitTag> tags) const {
        std::vector<LabeledPair> out;
        for (size_t i = 0; i < pairs.size(); ++i)
            for (SplitTag t : tags)
                if (split[i] == static_cast<uint8_t>(t)) {
                    out.push_back(pairs[i]);
                    break;
                }
        return out;
    }
    bool is_cold() const { return !cold_items.empty(); }
};

constexpr char kDatasetMagic[8] = {'T', 'A', 'S', 'T', 'D', 'S', 'E', 'T'};
constexpr uint32_t kDatasetVersion = 1;

inline void save_dataset(const std::string& path, const Dataset& ds) {
    ByteWriter w;
    w.raw(kDatasetMagic, 8);
    w.u32(kDatasetVersion);
    w.u64(ds.seed);
    w.u32(static_cast<uint32_t>(ds.threshold));
    w.u32(static_cast<uint32_t>(ds.k_core));
    w.u32(static_cast<uint32_t>(ds.pairs.size()));
    for (size_t i = 0; i < ds.pairs.size(); ++i) {
        const auto& p = ds.pairs[i];
        w.u32(static_cast<uint32_t>(p.user));
        w.u32(static_cast<uint32_t>(p.item));
        w.u32(static_cast<uint32_t>(p.count));
        w.bytes.push_back(static_cast<char>(p.label));
        w.bytes.push_back(static_cast<char>(ds.split[i]));
    }
    w.u32(static_cast<uint32_t>(ds.cold_items.size()));
    for (int64_t it : ds.cold_items) w.u32(static_cast<uint32_t>(it));
    write_file(path, w.bytes);
    nlohmann::json users, items;
    users["users"] = ds.user_keys;
    items["items"] = ds.item_keys;
    write_file(path + ".users.json", users.dump(2) + "\n");
    write_file(path + ".items.json", items.dump(2) + "\n");
}

inline Dataset load_dataset(const std::string& path) {
    const std::string bytes = read_file(path);
    ByteReader r(bytes);
    char magic[8];
    r.raw(magic, 8);
    TASTE_CHECK(std::memcmp(magic, kDatasetMagic, 8) == 0, Errc::bad_magic,
                path + " is not a dataset artifact");
    TASTE_CHECK(r.u32() == kDatasetVersion, Errc::version_mismatch, "dataset artifact version");
    Dataset ds;
    ds.seed = r.u64();
    ds.threshold = r.u32();
    ds.k_core = r.u32();
    const uint32_t n = r.u32();
    ds.pairs.reserve(n);
    ds.split.reserve(n);
    for (uint32_t i = 0; i < n; ++i) {
        LabeledPair p;
        p.user = r.u32();
        p.item = r.u32();
        p.count = r.u32();
        char label, tag;
        r.raw(&label, 1);
        r.raw(&tag, 1);
        p.label = label;
        ds.pairs.push_back(p);
        ds.split.push_back(static_cast<uint8_t>(tag));
    }
    const uint32_t n_cold = r.u32();
    for (uint32_t i = 0; i < n_cold; ++i) ds.cold_items.push_back(r.u32());
    TASTE_CHECK(r.done(), Errc::truncated_file, "trailing bytes in " + path);
    nlohmann::json users = nlohmann::json::parse(read_file(path + ".users.json"));
    nlohmann::json items = nlohmann::json::parse(read_file(path + ".items.json"));
    ds.user_keys = users["users"].get<std::vector<std::string>>();
    ds.item_keys = items["items"].get<std::vector<std::string>>();
    return ds;
}

// ---------------------------------------------------------------------------
// Metadata JSONL: one object per entity;
// {"item_id": str, "categorical": {f: str}, "multi": {f: [str]}, "numeric": {f: num}}.

struct EntityMeta {
    std::map<std::string, std::string> categorical;
    std::map<std::string, std::vector<std::string>> multi;
    std::map<std::string, double> numeric;
};

using MetaTable = std::unordered_map<std::string, EntityMeta>;

inline MetaTable parse_metadata_jsonl(const std::string& path, const std::string& id_field) {
    const std::string text = read_file(path);
    MetaTable table;
    size_t line_start = 0, line_no = 0;
    while (line_start < text.size()) {
        ++line_no;
        size_t line_end = text.find('\n', line_start);
        if (line_end == std::string::npos) line_end = text.size();
        std::string line = text.substr(line_start, line_end - line_start);
        line_start = line_end + 1;
        if (line.empty() || line == "\r") continue;
        nlohmann::json obj;
        try {
            obj = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            fail(Errc::malformed_line, "line " + std::to_string(line_no) + ": " + e.what());
        }
        TASTE_CHECK(obj.contains(id_field), Errc::missing_field,
                    "line " + std::to_string(line_no) + " lacks '" + id_field + "'");
        EntityMeta meta;
        if (obj.contains("categorical"))
            for (auto& [k, v] : obj["categorical"].items()) meta.categorical[k] = v.get<std::string>();
        if (obj.contains("multi"))
            for (auto& [k, v] : obj["multi"].items())
                meta.multi[k] = v.get<std::vector<std::string>>();
        if (obj.contains("numeric"))
            for (auto& [k, v] : obj["numeric"].items()) meta.numeric[k] = v.get<double>();
        table[obj[id_field].get<std::string>()] = std::move(meta);
    }
    return table;
}

}  // namespace taste
