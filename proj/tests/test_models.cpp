#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <numeric>

#include "taste/models.hpp"

using namespace taste;

namespace {

struct Fixture {
    MetaTable users, items;
    std::vector<std::string> user_keys{"u0", "u1", "u2"};
    std::vector<std::string> item_keys{"i0", "i1", "i2", "i3"};
    std::vector<LabeledPair> train{{0, 0, 2, 1}, {1, 1, 1, 0}, {2, 2, 3, 1}, {0, 3, 1, 0}};

    Fixture() {
        for (int u = 0; u < 3; ++u) {
            const std::string k = "u" + std::to_string(u);
            users[k].categorical["country"] = u % 2 ? "us" : "jp";
            users[k].numeric["age"] = 20.0 + 10.0 * u;
        }
        for (int i = 0; i < 4; ++i) {
            const std::string k = "i" + std::to_string(i);
            items[k].categorical["genre"] = i % 2 ? "rock" : "jazz";
            items[k].multi["tags"] = {i % 2 ? "a" : "b", "c"};
            items[k].numeric["tempo"] = 60.0 + 30.0 * i;
        }
    }

    LayeredEmbeddings embeddings(int64_t L = 2, int64_t H = 3, int64_t d_text = 2) const {
        LayeredEmbeddings emb;
        emb.n = 4;
        emb.L = L;
        emb.H = H;
        emb.d_text = d_text;
        emb.present.assign(4, 1);
        Rng rng(17);
        emb.audio.resize(static_cast<size_t>(emb.n * L * H));
        emb.text.resize(static_cast<size_t>(emb.n * d_text));
        for (auto& v : emb.audio) v = static_cast<float>(rng.normal());
        for (auto& v : emb.text) v = static_cast<float>(rng.normal());
        return emb;
    }

    FeatureSchema schema(FeatureSetting setting, ModalKind modal,
                         const LayeredEmbeddings* emb = nullptr,
                         DenseFusion fusion = DenseFusion::mean_pool) const {
        SchemaConfig cfg;
        cfg.setting = setting;
        cfg.modal = modal;
        cfg.fusion = fusion;
        cfg.token_k = 4;
        cfg.numeric_bins = 5;
        return build_schema(users, items, train, user_keys, item_keys, emb, cfg);
    }

    TokenTable tokens() const {
        TokenTable t;
        t.n = 4;
        t.L = 2;
        t.k = 4;
        t.present.assign(4, 1);
        t.tokens = {0, 1, 1, 2, 2, 3, 3, 0};
        return t;
    }

    std::vector<Instance> encode(const FeatureSchema& s, const TokenTable* tok = nullptr,
                                 const LayeredEmbeddings* emb = nullptr) const {
        std::vector<Instance> rows;
        for (const auto& p : train)
            rows.push_back(encode_row(s, p, user_keys, item_keys, users, items, tok, emb));
        return rows;
    }
};

std::vector<size_t> all_indices(size_t n) {
    std::vector<size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    return idx;
}

// Move parameters to a generic random point: near the default init some
// entries have ~1e-10 gradients, below the central-difference noise floor.
void randomize_params(ParamStore& params, uint64_t seed, double scale = 0.3) {
    Rng rng(seed);
    for (auto& t : params.tensors)
        for (double& v : t.values()) v = rng.uniform(-scale, scale);
}

}  // namespace

TEST_CASE("fm reduces to the lr logit when interaction vectors vanish") {
    Fixture fx;
    FeatureSchema s = fx.schema(FeatureSetting::id_only, ModalKind::none);
    CtrModel m = make_ctr_model(CtrKind::fm, s, {.d = 2}, 1);
    for (double& v : m.params.at("emb/user_id").values()) v = 0.0;
    for (double& v : m.params.at("emb/item_id").values()) v = 0.0;
    m.params.at("w0").values()[0] = 0.3;
    m.params.at("first/user_id").values()[1] = 0.5;  // user 0 -> index 1
    m.params.at("first/item_id").values()[1] = -0.1;

    auto rows = fx.encode(s);
    Batch b = make_batch(s, rows, {0});  // pair (u0, i0)
    auto probs = ctr_forward(m, b);
    CHECK(probs[0] == Catch::Approx(sigmoid_scalar(0.3 + 0.5 - 0.1)).epsilon(1e-12));
}

TEST_CASE("fm hand-evaluated interactions") {
    Fixture fx;
    FeatureSchema s = fx.schema(FeatureSetting::id_only, ModalKind::none);
    CtrModel m = make_ctr_model(CtrKind::fm, s, {.d = 2}, 1);
    for (auto& t : m.params.tensors)
        for (double& v : t.values()) v = 0.0;

    auto set_row = [](Tensor& t, int64_t row, std::vector<double> vals) {
        for (size_t j = 0; j < vals.size(); ++j)
            t.values()[static_cast<size_t>(row * 2 + static_cast<int64_t>(j))] = vals[j];
    };
    // Orthogonal embeddings -> zero interaction -> sigma(0) = 0.5.
    set_row(m.params.at("emb/user_id"), 1, {1.0, 0.0});
    set_row(m.params.at("emb/item_id"), 1, {0.0, 1.0});
    auto rows = fx.encode(s);
    Batch b = make_batch(s, rows, {0});
    CHECK(ctr_forward(m, b)[0] == Catch::Approx(0.5).epsilon(1e-12));

    // v1 = v2 = (1,1) -> <v1,v2> = 2 -> sigma(2).
    set_row(m.params.at("emb/user_id"), 1, {1.0, 1.0});
    set_row(m.params.at("emb/item_id"), 1, {1.0, 1.0});
    CHECK(ctr_forward(m, b)[0] == Catch::Approx(sigmoid_scalar(2.0)).epsilon(1e-12));
    CHECK(ctr_forward(m, b)[0] == Catch::Approx(0.880797).margin(1e-6));
}

TEST_CASE("fm pairwise identity matches the naive double loop") {
    Fixture fx;
    LayeredEmbeddings emb = fx.embeddings();
    TokenTable tok = fx.tokens();
    FeatureSchema s = fx.schema(FeatureSetting::full, ModalKind::muq_token, &emb);
    CtrModel m = make_ctr_model(CtrKind::fm, s, {.d = 5}, 3);
    auto rows = fx.encode(s, &tok, &emb);
    Batch batch = make_batch(s, rows, all_indices(rows.size()));

    auto es = detail::field_embeddings(m, batch);
    Tensor fast = detail::fm_pairwise_logit(es);
    const int64_t B = batch.size, d = 5;
    for (int64_t r = 0; r < B; ++r) {
        double naive = 0.0;
        for (size_t i = 0; i < es.size(); ++i)
            for (size_t j = i + 1; j < es.size(); ++j)
                for (int64_t t = 0; t < d; ++t)
                    naive += es[i].values()[static_cast<size_t>(r * d + t)] *
                             es[j].values()[static_cast<size_t>(r * d + t)];
        CHECK(fast.values()[static_cast<size_t>(r)] == Catch::Approx(naive).margin(1e-10));
    }
}

TEST_CASE("dcnv2 cross layers with zero weights are the identity map") {
    Fixture fx;
    FeatureSchema s = fx.schema(FeatureSetting::id_categories, ModalKind::none);
    CtrHyper hyper{.d = 3, .mlp = {8}, .cross_depth = 2};
    CtrModel m = make_ctr_model(CtrKind::dcnv2, s, hyper, 5);
    for (int l = 0; l < 2; ++l) {
        for (double& v : m.params.at("cross/w" + std::to_string(l)).values()) v = 0.0;
        for (double& v : m.params.at("cross/b" + std::to_string(l)).values()) v = 0.0;
    }
    auto rows = fx.encode(s);
    Batch batch = make_batch(s, rows, all_indices(rows.size()));
    Tensor logits = ctr_logits(m, batch);

    // Expected: final([x0 || relu(x0 W + b)]) with the cross tower pass-through.
    auto es = detail::field_embeddings(m, batch);
    Tensor x0 = concat_last(es);
    Tensor deep = relu(add(matmul(x0, m.params.at("deep/w0")), m.params.at("deep/b0")));
    Tensor expected =
        add(matmul(concat_last({x0, deep}), m.params.at("final/w")), m.params.at("final/b"));
    for (int64_t i = 0; i < logits.size(); ++i)
        CHECK(logits.values()[static_cast<size_t>(i)] ==
              Catch::Approx(expected.values()[static_cast<size_t>(i)]).margin(1e-12));
}

TEST_CASE("afm attention weights are a distribution per instance") {
    Fixture fx;
    FeatureSchema s = fx.schema(FeatureSetting::full, ModalKind::none);
    CtrModel m = make_ctr_model(CtrKind::afm, s, {.d = 4}, 9);
    auto rows = fx.encode(s);
    Batch batch = make_batch(s, rows, all_indices(rows.size()));
    auto es = detail::field_embeddings(m, batch);
    Tensor attn = detail::afm_attention(m, detail::afm_pair_terms(es));
    const int64_t P = attn.shape()[1];
    for (int64_t r = 0; r < attn.shape()[0]; ++r) {
        double total = 0.0;
        for (int64_t p = 0; p < P; ++p) {
            const double w = attn.values()[static_cast<size_t>(r * P + p)];
            CHECK(w >= 0.0);
            total += w;
        }
        CHECK(total == Catch::Approx(1.0).margin(1e-9));
    }
}

TEST_CASE("every CTR kind emits probabilities strictly inside (0,1)") {
    Fixture fx;
    LayeredEmbeddings emb = fx.embeddings();
    TokenTable tok = fx.tokens();
    FeatureSchema s = fx.schema(FeatureSetting::full, ModalKind::muq_token, &emb);
    auto rows = fx.encode(s, &tok, &emb);
    for (CtrKind kind : {CtrKind::lr, CtrKind::fm, CtrKind::ffm, CtrKind::afm, CtrKind::wide_deep,
                         CtrKind::deepfm, CtrKind::dcnv2}) {
        CtrModel m = make_ctr_model(kind, s, {.d = 3, .mlp = {6}}, 11);
        Batch batch = make_batch(s, rows, all_indices(rows.size()));
        for (double p : ctr_forward(m, batch)) {
            CHECK(p > 0.0);
            CHECK(p < 1.0);
        }
    }
}

TEST_CASE("fm and dcnv2 training losses pass the gradient check") {
    Fixture fx;
    LayeredEmbeddings emb = fx.embeddings();
    TokenTable tok = fx.tokens();
    FeatureSchema s = fx.schema(FeatureSetting::full, ModalKind::muq_dense, &emb);
    auto rows = fx.encode(s, &tok, &emb);
    for (CtrKind kind : {CtrKind::fm, CtrKind::dcnv2}) {
        // l2 = 0: the check targets the BCE path; with a penalty, embedding
        // rows unused by the batch carry ~1e-8 gradients that drown in
        // finite-difference cancellation noise.
        CtrModel m =
            make_ctr_model(kind, s, {.d = 3, .mlp = {4}, .adaptor_hidden = {4}, .l2 = 0.0}, 13);
        randomize_params(m.params, 19);
        Batch batch = make_batch(s, rows, all_indices(rows.size()));
        auto f = [&] { return ctr_loss(m, batch); };
        CHECK(gradient_check(f, m.params.tensors) < 1e-4);
    }
}

TEST_CASE("schema mismatch between batch and model is rejected") {
    Fixture fx;
    FeatureSchema id_schema = fx.schema(FeatureSetting::id_only, ModalKind::none);
    FeatureSchema full_schema = fx.schema(FeatureSetting::full, ModalKind::none);
    CtrModel m = make_ctr_model(CtrKind::fm, full_schema, {.d = 2}, 1);
    auto rows = fx.encode(id_schema);
    Batch batch = make_batch(id_schema, rows, {0});
    CHECK_THROWS_AS(ctr_forward(m, batch), std::exception);
}

TEST_CASE("bpr score is the dot product plus item bias") {
    RecallModel m = make_recall_model(RecallKind::bpr, 2, 2, 2, 1);
    m.params.at("user_emb").values() = {1.0, 1.0, 0.0, 0.0};
    m.params.at("item_emb").values() = {1.0, 1.0, 0.5, -0.5};
    m.params.at("item_bias").values() = {0.0, 0.25};
    CHECK(recall_score(m, 0, 0) == Catch::Approx(2.0));
    CHECK(recall_score(m, 0, 1) == Catch::Approx(0.25));
}

TEST_CASE("vbpr ablations: zero modal path reduces to bpr, zero id path is modal-only") {
    Fixture fx;
    LayeredEmbeddings emb = fx.embeddings(2, 3, 2);
    RecallModel vb = make_recall_model(RecallKind::vbpr, 3, 4, 2, 7, &emb);
    RecallModel bp = make_recall_model(RecallKind::bpr, 3, 4, 2, 7);
    bp.params.at("user_emb").values() = vb.params.at("user_emb").values();
    bp.params.at("item_emb").values() = vb.params.at("item_emb").values();
    bp.params.at("item_bias").values() = vb.params.at("item_bias").values();

    for (double& v : vb.params.at("proj").values()) v = 0.0;
    for (double& v : vb.params.at("vis_bias").values()) v = 0.0;
    for (int64_t u = 0; u < 3; ++u)
        for (int64_t i = 0; i < 4; ++i)
            CHECK(recall_score(vb, u, i) == Catch::Approx(recall_score(bp, u, i)).margin(1e-12));

    // Complementary ablation: zero the ID embeddings and bias.
    Rng rng(3);
    for (double& v : vb.params.at("proj").values()) v = rng.normal();
    for (double& v : vb.params.at("vis_bias").values()) v = rng.normal();
    for (double& v : vb.params.at("user_emb").values()) v = 0.0;
    for (double& v : vb.params.at("item_emb").values()) v = 0.0;
    for (double& v : vb.params.at("item_bias").values()) v = 0.0;
    RecallScorer scorer(vb);
    const auto& f = vb.features.values();
    const auto& e = vb.params.at("proj").values();
    const auto& bv = vb.params.at("vis_bias").values();
    const auto& tu = vb.params.at("user_vis").values();
    for (int64_t u = 0; u < 3; ++u)
        for (int64_t i = 0; i < 4; ++i) {
            double expected = 0.0;
            for (int64_t v = 0; v < vb.d_visual; ++v) {
                double proj = 0.0;
                for (int64_t t = 0; t < vb.feat_dim; ++t)
                    proj += f[static_cast<size_t>(i * vb.feat_dim + t)] *
                            e[static_cast<size_t>(t * vb.d_visual + v)];
                expected += tu[static_cast<size_t>(u * vb.d_visual + v)] * proj;
            }
            for (int64_t t = 0; t < vb.feat_dim; ++t)
                expected +=
                    bv[static_cast<size_t>(t)] * f[static_cast<size_t>(i * vb.feat_dim + t)];
            CHECK(scorer.score(u, i) == Catch::Approx(expected).margin(1e-9));
        }
}

TEST_CASE("rank_items ordering, ties, and exhaustion") {
    RecallModel m = make_recall_model(RecallKind::bpr, 1, 3, 1, 1);
    m.params.at("user_emb").values() = {1.0};
    m.params.at("item_emb").values() = {0.9, 0.1, 0.5};
    m.params.at("item_bias").values() = {0.0, 0.0, 0.0};
    RecallScorer scorer(m);
    auto top2 = rank_items(scorer, 0, {}, 2);
    CHECK(top2.items == std::vector<int64_t>{0, 2});
    CHECK_FALSE(top2.short_list);

    m.params.at("item_emb").values() = {0.5, 0.5, 0.5};
    RecallScorer tied(m);
    CHECK(rank_items(tied, 0, {}, 3).items == std::vector<int64_t>{0, 1, 2});

    auto empty = rank_items(tied, 0, {0, 1, 2}, 2);
    CHECK(empty.items.empty());
    CHECK(empty.short_list);
}

TEST_CASE("ranking is invariant under strictly increasing score transforms") {
    RecallModel m = make_recall_model(RecallKind::bpr, 1, 20, 3, 5);
    RecallScorer scorer(m);
    std::vector<std::pair<double, int64_t>> manual;
    for (int64_t i = 0; i < 20; ++i)
        manual.emplace_back(std::exp(2.0 * scorer.score(0, i)) + 5.0, i);  // monotone transform
    std::sort(manual.begin(), manual.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
    });
    auto ranked = rank_items(scorer, 0, {}, 20).items;
    for (size_t i = 0; i < 20; ++i) CHECK(ranked[i] == manual[i].second);
}

TEST_CASE("vbpr with zeroed modal tables ranks exactly like bpr") {
    Fixture fx;
    LayeredEmbeddings emb = fx.embeddings(2, 3, 2);
    RecallModel vb = make_recall_model(RecallKind::vbpr, 3, 4, 2, 21, &emb);
    for (double& v : vb.params.at("proj").values()) v = 0.0;
    for (double& v : vb.params.at("vis_bias").values()) v = 0.0;
    RecallModel bp = make_recall_model(RecallKind::bpr, 3, 4, 2, 99);
    bp.params.at("user_emb").values() = vb.params.at("user_emb").values();
    bp.params.at("item_emb").values() = vb.params.at("item_emb").values();
    bp.params.at("item_bias").values() = vb.params.at("item_bias").values();
    RecallScorer sv(vb), sb(bp);
    for (int64_t u = 0; u < 3; ++u)
        CHECK(rank_items(sv, u, {}, 4).items == rank_items(sb, u, {}, 4).items);
}

TEST_CASE("recall pairwise loss passes the gradient check") {
    Fixture fx;
    LayeredEmbeddings emb = fx.embeddings(2, 3, 2);
    for (RecallKind kind : {RecallKind::bpr, RecallKind::vbpr}) {
        RecallModel m = make_recall_model(kind, 3, 4, 2, 31, &emb);
        std::vector<int64_t> users{0, 1, 2, 0}, pos{0, 1, 2, 3}, neg{1, 2, 3, 0};
        auto f = [&] { return recall_loss(m, users, pos, neg); };
        CHECK(gradient_check(f, m.params.tensors) < 1e-4);
    }
}

TEST_CASE("ctr checkpoint round trip reproduces predictions") {
    Fixture fx;
    LayeredEmbeddings emb = fx.embeddings();
    TokenTable tok = fx.tokens();
    FeatureSchema s = fx.schema(FeatureSetting::full, ModalKind::muq_token, &emb);
    CtrModel m = make_ctr_model(CtrKind::deepfm, s, {.d = 3, .mlp = {4}}, 77);
    const std::string path =
        (std::filesystem::temp_directory_path() / "taste_ctr_ckpt.bin").string();
    save_ctr_checkpoint(path, m);
    CtrModel loaded = load_ctr_checkpoint(path);
    CHECK(loaded.kind == m.kind);
    CHECK(schema_hash(loaded.schema) == schema_hash(m.schema));

    // Values round-trip through f32; saving again must be byte-identical.
    const std::string path2 =
        (std::filesystem::temp_directory_path() / "taste_ctr_ckpt2.bin").string();
    save_ctr_checkpoint(path2, loaded);
    CHECK(read_file(path) == read_file(path2));

    auto rows = fx.encode(s, &tok, &emb);
    Batch batch = make_batch(s, rows, all_indices(rows.size()));
    auto p1 = ctr_forward(m, batch);
    auto p2 = ctr_forward(loaded, batch);
    for (size_t i = 0; i < p1.size(); ++i) CHECK(p2[i] == Catch::Approx(p1[i]).margin(1e-6));
}

TEST_CASE("recall checkpoint round trip") {
    Fixture fx;
    LayeredEmbeddings emb = fx.embeddings(2, 3, 2);
    RecallModel m = make_recall_model(RecallKind::vbpr, 3, 4, 2, 55, &emb);
    const std::string path =
        (std::filesystem::temp_directory_path() / "taste_recall_ckpt.bin").string();
    save_recall_checkpoint(path, m);
    RecallModel loaded = load_recall_checkpoint(path);
    RecallScorer sa(m), sb(loaded);
    for (int64_t u = 0; u < 3; ++u)
        for (int64_t i = 0; i < 4; ++i)
            CHECK(sb.score(u, i) == Catch::Approx(sa.score(u, i)).margin(1e-6));
}
