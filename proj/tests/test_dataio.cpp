#include <catch2/catch_amalgamated.hpp>

#include <cstring>
#include <filesystem>
#include <map>

#include "taste/dataio.hpp"

using namespace taste;

namespace {

std::string temp_dir() {
    auto dir = std::filesystem::temp_directory_path() / "taste_dataio_test";
    std::filesystem::create_directories(dir);
    return dir.string();
}

std::vector<LabeledPair> make_pairs(const std::vector<std::tuple<int, int, int, int>>& rows) {
    std::vector<LabeledPair> out;
    for (auto [u, i, c, l] : rows) out.push_back({u, i, c, l});
    return out;
}

// Brute-force k-core: repeatedly delete any pair whose endpoints drop below k,
// scanning in reverse order to confirm order independence.
std::vector<LabeledPair> k_core_oracle(std::vector<LabeledPair> pairs, int64_t k) {
    bool changed = true;
    while (changed) {
        changed = false;
        for (size_t idx = pairs.size(); idx-- > 0;) {
            std::map<int64_t, int> ud, id;
            for (const auto& p : pairs) {
                ++ud[p.user];
                ++id[p.item];
            }
            const auto& p = pairs[idx];
            if (ud[p.user] < k || id[p.item] < k) {
                pairs.erase(pairs.begin() + static_cast<long>(idx));
                changed = true;
            }
        }
    }
    std::sort(pairs.begin(), pairs.end(), [](const LabeledPair& a, const LabeledPair& b) {
        return std::tie(a.user, a.item) < std::tie(b.user, b.item);
    });
    return pairs;
}

}  // namespace

TEST_CASE("parse_interactions basic file") {
    const std::string path = temp_dir() + "/events_ok.tsv";
    write_file(path, "u1\ti1\t100\nu1\ti1\t200\nu2\ti1\t150\n");
    EventLog log = parse_interactions(path);
    CHECK(log.events.size() == 3);
    CHECK(log.users.keys.size() == 2);
    CHECK(log.items.keys.size() == 1);
    CHECK(log.events[0].timestamp == 100);
    CHECK(log.events[2].user == 1);
}

TEST_CASE("parse_interactions accepts the header line") {
    const std::string path = temp_dir() + "/events_header.tsv";
    write_file(path, "user_id\titem_id\ttimestamp\nu1\ti1\t100\n");
    CHECK(parse_interactions(path).events.size() == 1);
}

TEST_CASE("parse_interactions error cases") {
    const std::string dir = temp_dir();
    write_file(dir + "/empty.tsv", "");
    CHECK_THROWS_MATCHES(parse_interactions(dir + "/empty.tsv"), TasteError,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("EmptyInput")));
    write_file(dir + "/short.tsv", "u1\ti1\n");
    CHECK_THROWS_MATCHES(parse_interactions(dir + "/short.tsv"), TasteError,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("line 1")));
    write_file(dir + "/ts.tsv", "u1\ti1\tabc\n");
    CHECK_THROWS_AS(parse_interactions(dir + "/ts.tsv"), TasteError);
    write_file(dir + "/neg.tsv", "u1\ti1\t-5\n");
    CHECK_THROWS_AS(parse_interactions(dir + "/neg.tsv"), TasteError);
}

TEST_CASE("binarize thresholds counts") {
    std::vector<InteractionEvent> events = {
        {0, 0, 1}, {0, 0, 2}, {0, 0, 3},  // (u1,i1) x3
        {0, 1, 4},                        // (u1,i2) x1
        {1, 0, 5}, {1, 0, 6},             // (u2,i1) x2
    };
    auto pairs = binarize(events, 2);
    REQUIRE(pairs.size() == 3);
    CHECK(pairs[0].count == 3);
    CHECK(pairs[0].label == 1);
    CHECK(pairs[1].count == 1);
    CHECK(pairs[1].label == 0);
    CHECK(pairs[2].count == 2);
    CHECK(pairs[2].label == 1);

    auto all_pos = binarize(events, 1);
    for (const auto& p : all_pos) CHECK(p.label == 1);

    std::vector<InteractionEvent> five;
    for (int e = 0; e < 5; ++e) five.push_back({3, 7, e});
    auto single = binarize(five, 2);
    REQUIRE(single.size() == 1);
    CHECK(single[0].count == 5);
}

TEST_CASE("binarize is invariant under event reordering") {
    Rng rng(13);
    std::vector<InteractionEvent> events;
    for (int e = 0; e < 200; ++e)
        events.push_back({static_cast<int64_t>(rng.uniform_index(10)),
                          static_cast<int64_t>(rng.uniform_index(15)),
                          static_cast<int64_t>(rng.uniform_index(1000))});
    auto base = binarize(events, 2);
    rng.shuffle(events);
    CHECK(binarize(events, 2) == base);
}

TEST_CASE("k-core on the star graph empties, on complete bipartite is identity") {
    // 1 user against 5 items: every item has degree 1 < 5.
    std::vector<LabeledPair> star;
    for (int i = 0; i < 5; ++i) star.push_back({0, i, 1, 0});
    CHECK(k_core_filter(star, 5).empty());
    CHECK(k_core_filter(star, 5) == k_core_oracle(star, 5));

    std::vector<LabeledPair> complete;
    for (int u = 0; u < 5; ++u)
        for (int i = 0; i < 5; ++i) complete.push_back({u, i, 2, 1});
    CHECK(k_core_filter(complete, 5).size() == 25);

    CHECK(k_core_filter(star, 1).size() == star.size());
}

TEST_CASE("k-core matches the pruning oracle and is idempotent on random graphs") {
    Rng rng(101);
    for (int trial = 0; trial < 10; ++trial) {
        std::set<std::pair<int, int>> seen;
        std::vector<LabeledPair> pairs;
        for (int e = 0; e < 60; ++e) {
            int u = static_cast<int>(rng.uniform_index(12));
            int i = static_cast<int>(rng.uniform_index(12));
            if (seen.insert({u, i}).second) pairs.push_back({u, i, 1, 0});
        }
        const int64_t k = 2 + static_cast<int64_t>(rng.uniform_index(3));
        auto filtered = k_core_filter(pairs, k);
        CHECK(filtered == k_core_oracle(pairs, k));
        CHECK(k_core_filter(filtered, k) == filtered);
    }
}

TEST_CASE("split_random sizes for 10 pairs and 1 pair") {
    std::vector<LabeledPair> ten;
    for (int i = 0; i < 10; ++i) ten.push_back({0, i, 1, 0});
    SplitSet s = split_random(ten, {0.8, 0.1, 0.1}, 7);
    CHECK(s.train.size() == 8);
    CHECK(s.validation.size() == 1);
    CHECK(s.test.size() == 1);

    std::vector<LabeledPair> one = {{0, 0, 1, 0}};
    SplitSet s1 = split_random(one, {0.8, 0.1, 0.1}, 7);
    CHECK(s1.train.size() == 1);
    CHECK(s1.validation.empty());
    CHECK(s1.test.empty());
}

TEST_CASE("split_random is deterministic and partitions the input") {
    Rng rng(55);
    std::vector<LabeledPair> pairs;
    for (int u = 0; u < 8; ++u) {
        const int n = 1 + static_cast<int>(rng.uniform_index(20));
        for (int i = 0; i < n; ++i) pairs.push_back({u, i, 1, u % 2});
    }
    SplitSet a = split_random(pairs, {0.8, 0.1, 0.1}, 99);
    SplitSet b = split_random(pairs, {0.8, 0.1, 0.1}, 99);
    CHECK(a.train == b.train);
    CHECK(a.validation == b.validation);
    CHECK(a.test == b.test);

    CHECK(a.train.size() + a.validation.size() + a.test.size() == pairs.size());
    auto key = [](const LabeledPair& p) { return std::make_pair(p.user, p.item); };
    std::set<std::pair<int64_t, int64_t>> all;
    for (const auto& p : a.train) CHECK(all.insert(key(p)).second);
    for (const auto& p : a.validation) CHECK(all.insert(key(p)).second);
    for (const auto& p : a.test) CHECK(all.insert(key(p)).second);
    CHECK(all.size() == pairs.size());

    CHECK_THROWS_AS(split_random(pairs, {0.5, 0.2, 0.2}, 1), TasteError);
}

TEST_CASE("cold split keeps cold items out of train and balances 1:1") {
    Rng rng(77);
    std::set<std::pair<int64_t, int64_t>> seen;
    std::vector<LabeledPair> pairs;
    for (int u = 0; u < 30; ++u)
        for (int rep = 0; rep < 12; ++rep) {
            const auto item = static_cast<int64_t>(rng.uniform_index(100));
            if (seen.insert({u, item}).second) pairs.push_back({u, item, 2, 1});
        }

    ColdSplitSet cs = split_cold_start(pairs, 0.2, {0.8, 0.1, 0.1}, 5);
    std::set<int64_t> items;
    for (const auto& p : pairs) items.insert(p.item);
    CHECK(cs.cold_items.size() == items.size() / 5);

    std::set<int64_t> cold(cs.cold_items.begin(), cs.cold_items.end());
    for (const auto& p : cs.train) CHECK_FALSE(cold.count(p.item));
    for (const auto& p : cs.warm_validation) CHECK_FALSE(cold.count(p.item));
    for (const auto& p : cs.cold_validation) CHECK(cold.count(p.item));
    const auto diff = static_cast<long>(cs.cold_validation.size()) -
                      static_cast<long>(cs.cold_test.size());
    CHECK(std::abs(diff) <= 1);

    const size_t total = cs.train.size() + cs.warm_validation.size() + cs.warm_test.size() +
                         cs.cold_validation.size() + cs.cold_test.size();
    CHECK(total == pairs.size());
}

TEST_CASE("cold split degenerate fraction") {
    std::vector<LabeledPair> pairs = {{0, 0, 2, 1}, {0, 1, 2, 1}, {0, 2, 2, 1}};
    CHECK_THROWS_MATCHES(split_cold_start(pairs, 0.01, {0.8, 0.1, 0.1}, 1), TasteError,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("DegenerateColdFraction")));
}

TEST_CASE("TASTEEMB round trip is bit exact") {
    const std::string path = temp_dir() + "/emb.tasteemb";
    Rng rng(3);
    LayeredEmbeddings emb;
    emb.n = 5;
    emb.L = 3;
    emb.H = 4;
    emb.d_text = 2;
    emb.present.assign(5, 1);
    for (int i = 0; i < 5 * 3 * 4; ++i) emb.audio.push_back(static_cast<float>(rng.normal()));
    for (int i = 0; i < 5 * 2; ++i) emb.text.push_back(static_cast<float>(rng.normal()));
    std::vector<std::string> keys = {"a", "b", "c", "d", "e"};
    save_layered_embeddings(path, emb, keys);

    LoadedEmbeddings loaded = load_layered_embeddings(path);
    CHECK(loaded.emb.audio == emb.audio);
    CHECK(loaded.emb.text == emb.text);
    CHECK(loaded.item_keys == keys);

    // Saving what was loaded reproduces the identical file.
    const std::string path2 = temp_dir() + "/emb2.tasteemb";
    save_layered_embeddings(path2, loaded.emb, loaded.item_keys);
    CHECK(read_file(path) == read_file(path2));
}

TEST_CASE("TASTEEMB shape arithmetic and corruption errors") {
    const std::string path = temp_dir() + "/emb3.tasteemb";
    LayeredEmbeddings emb;
    emb.n = 2;
    emb.L = 3;
    emb.H = 4;
    emb.d_text = 0;
    emb.present.assign(2, 1);
    emb.audio.assign(2 * 3 * 4, 1.5f);
    save_layered_embeddings(path, emb, {"x", "y"});
    LoadedEmbeddings ok = load_layered_embeddings(path);
    CHECK(ok.emb.L == 3);
    CHECK(ok.emb.audio.size() == 24);

    std::string bytes = read_file(path);
    write_file(path, bytes.substr(0, bytes.size() - 7));
    CHECK_THROWS_MATCHES(load_layered_embeddings(path), TasteError,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("TruncatedFile")));

    std::string bad = bytes;
    bad[0] = 'X';
    write_file(path, bad);
    CHECK_THROWS_MATCHES(load_layered_embeddings(path), TasteError,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("BadMagic")));

    std::string nan_bytes = bytes;
    const float nan_val = std::numeric_limits<float>::quiet_NaN();
    std::memcpy(nan_bytes.data() + 28, &nan_val, 4);  // first audio float
    write_file(path, nan_bytes);
    CHECK_THROWS_MATCHES(load_layered_embeddings(path), TasteError,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("NonFiniteValue")));
}

TEST_CASE("embedding alignment by keys marks missing items") {
    const std::string path = temp_dir() + "/emb4.tasteemb";
    LayeredEmbeddings emb;
    emb.n = 2;
    emb.L = 1;
    emb.H = 2;
    emb.d_text = 1;
    emb.present.assign(2, 1);
    emb.audio = {1.0f, 2.0f, 3.0f, 4.0f};
    emb.text = {0.5f, 0.6f};
    save_layered_embeddings(path, emb, {"b", "a"});
    LoadedEmbeddings loaded = load_layered_embeddings(path);
    LayeredEmbeddings aligned = align_embeddings(loaded, {"a", "b", "zz"});
    CHECK(aligned.has(0));
    CHECK(aligned.audio_at(0)[0] == 3.0f);
    CHECK(aligned.audio_at(1)[0] == 1.0f);
    CHECK_FALSE(aligned.has(2));
}

TEST_CASE("dataset artifact round trip") {
    const std::string path = temp_dir() + "/ds.bin";
    Dataset ds;
    ds.pairs = make_pairs({{0, 0, 3, 1}, {0, 1, 1, 0}, {1, 0, 2, 1}});
    ds.split = {0, 1, 2};
    ds.user_keys = {"u1", "u2"};
    ds.item_keys = {"i1", "i2"};
    ds.cold_items = {1};
    ds.seed = 42;
    save_dataset(path, ds);
    Dataset loaded = load_dataset(path);
    CHECK(loaded.pairs == ds.pairs);
    CHECK(loaded.split == ds.split);
    CHECK(loaded.user_keys == ds.user_keys);
    CHECK(loaded.cold_items == ds.cold_items);
    CHECK(loaded.seed == 42);

    auto train = loaded.select({SplitTag::train});
    REQUIRE(train.size() == 1);
    CHECK(train[0].user == 0);
}

TEST_CASE("metadata jsonl parsing") {
    const std::string path = temp_dir() + "/items.jsonl";
    write_file(path,
               R"({"item_id":"i1","categorical":{"genre":"rock"},"multi":{"tags":["a","b"]},"numeric":{"tempo":120.5}})"
               "\n"
               R"({"item_id":"i2"})"
               "\n");
    MetaTable table = parse_metadata_jsonl(path, "item_id");
    REQUIRE(table.size() == 2);
    CHECK(table.at("i1").categorical.at("genre") == "rock");
    CHECK(table.at("i1").multi.at("tags").size() == 2);
    CHECK(table.at("i1").numeric.at("tempo") == 120.5);
    CHECK(table.at("i2").categorical.empty());

    write_file(path, "{broken\n");
    CHECK_THROWS_AS(parse_metadata_jsonl(path, "item_id"), TasteError);
}
