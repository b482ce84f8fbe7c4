#include <catch2/catch_amalgamated.hpp>

#include "taste/train.hpp"

using namespace taste;

namespace {

// Items 0..4 are always liked, 5..9 never: separable through item weights.
struct ToyCtr {
    std::vector<std::string> user_keys{"u0", "u1"};
    std::vector<std::string> item_keys;
    std::vector<LabeledPair> pairs;
    MetaTable empty;
    FeatureSchema schema;
    std::vector<Instance> rows;

    ToyCtr() {
        for (int i = 0; i < 10; ++i) item_keys.push_back("i" + std::to_string(i));
        for (int u = 0; u < 2; ++u)
            for (int i = 0; i < 10; ++i) pairs.push_back({u, i, i < 5 ? 2 : 1, i < 5 ? 1 : 0});
        SchemaConfig cfg;
        cfg.setting = FeatureSetting::id_only;
        schema = build_schema(empty, empty, pairs, user_keys, item_keys, nullptr, cfg);
        for (const auto& p : pairs)
            rows.push_back(encode_row(schema, p, user_keys, item_keys, empty, empty, nullptr,
                                      nullptr));
    }
};

}  // namespace

TEST_CASE("adam with zero gradients leaves parameters unchanged") {
    ParamStore params;
    params.add("p", Tensor({3}, {1.0, -2.0, 0.5}, true));
    AdamState state(params);
    params.tensors[0].zero_grad();
    adam_step(params, state, 0.001);
    CHECK(params.at("p").values() == std::vector<double>{1.0, -2.0, 0.5});
}

TEST_CASE("first adam step applies the bias-corrected unit update") {
    ParamStore params;
    params.add("p", Tensor({1}, {0.7}, true));
    AdamState state(params);
    params.tensors[0].grad()[0] = 1.0;
    adam_step(params, state, 0.001);
    // m_hat = 1, v_hat = 1 -> delta = -lr / (1 + 1e-8)
    CHECK(params.at("p").values()[0] == Catch::Approx(0.7 - 0.001 / (1.0 + 1e-8)).epsilon(1e-12));
}

TEST_CASE("adam contracts toward the optimum of a convex quadratic") {
    // f(p) = (p - 3)^2, gradient 2(p - 3); simulated for a few steps.
    ParamStore params;
    params.add("p", Tensor({1}, {0.0}, true));
    AdamState state(params);
    double prev_dist = 3.0;
    for (int step = 0; step < 200; ++step) {
        double p = params.at("p").values()[0];
        params.at("p").grad()[0] = 2.0 * (p - 3.0);
        adam_step(params, state, 0.05);
        if (step == 0 || step == 1) {
            const double dist = std::abs(params.at("p").values()[0] - 3.0);
            CHECK(dist < prev_dist);
            prev_dist = dist;
        }
    }
    CHECK(std::abs(params.at("p").values()[0] - 3.0) < 0.5);
}

TEST_CASE("adam rejects non-finite gradients") {
    ParamStore params;
    params.add("p", Tensor({1}, {0.0}, true));
    AdamState state(params);
    params.at("p").grad()[0] = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_MATCHES(adam_step(params, state, 0.001), TasteError,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("NonFiniteGradient")));
}

TEST_CASE("early stopping halts after patience epochs without improvement") {
    // Metric strictly decreasing from epoch 2; patience 1 -> runs epoch 3,
    // stops, best = 1.
    ParamStore params;
    params.add("p", Tensor({1}, {0.0}, true));
    TrainConfig cfg;
    cfg.patience = 1;
    cfg.max_epochs = 50;
    std::vector<double> metrics = {0.9, 0.8, 0.7, 0.6, 0.5};
    int epochs_run = 0;
    auto report = detail::train_loop(
        params, cfg, "auc",
        [&](AdamState&, int) {
            ++epochs_run;
            return 1.0;
        },
        [&]() { return metrics[static_cast<size_t>(epochs_run - 1)]; });
    CHECK(epochs_run == 3);
    CHECK(report.best_epoch == 1);
    CHECK(report.best_metric == 0.9);
    CHECK(report.early_stopped);
    CHECK(report.history.size() == 3);
}

TEST_CASE("early stopping restores the best snapshot") {
    ParamStore params;
    params.add("p", Tensor({1}, {0.0}, true));
    TrainConfig cfg;
    cfg.patience = 2;
    cfg.max_epochs = 10;
    std::vector<double> metrics = {0.5, 0.9, 0.4, 0.3, 0.2, 0.1, 0.05, 0.04, 0.03, 0.02};
    int epoch_counter = 0;
    auto report = detail::train_loop(
        params, cfg, "auc",
        [&](AdamState&, int epoch) {
            ++epoch_counter;
            params.at("p").values()[0] = epoch;  // param equals the epoch index
            return 1.0;
        },
        [&]() { return metrics[static_cast<size_t>(epoch_counter - 1)]; });
    CHECK(report.best_epoch == 2);
    CHECK(params.at("p").values()[0] == 2.0);  // snapshot from the best epoch
}

TEST_CASE("ctr training reaches AUC 1 on a separable toy dataset") {
    ToyCtr toy;
    CtrModel model = make_ctr_model(CtrKind::lr, toy.schema, {.d = 4}, 3);
    TrainConfig cfg;
    cfg.learning_rate = 0.05;
    cfg.batch_size = 20;
    cfg.max_epochs = 50;
    cfg.patience = 50;
    cfg.seed = 11;
    TrainReport report = train_ctr(model, toy.rows, toy.rows, cfg);
    CHECK(report.best_metric == Catch::Approx(1.0));
    CHECK(report.metric_name == "auc");

    // The restored checkpoint scores the validation metric it reported.
    std::vector<int> labels;
    for (const auto& r : toy.rows) labels.push_back(r.label);
    CHECK(auc(labels, ctr_predict(model, toy.rows)) ==
          Catch::Approx(report.best_metric).margin(1e-12));
}

TEST_CASE("ctr training is deterministic given the seed") {
    ToyCtr toy;
    TrainConfig cfg;
    cfg.learning_rate = 0.01;
    cfg.max_epochs = 5;
    cfg.patience = 5;
    cfg.batch_size = 8;
    cfg.seed = 21;
    CtrModel a = make_ctr_model(CtrKind::fm, toy.schema, {.d = 4}, 9);
    CtrModel b = make_ctr_model(CtrKind::fm, toy.schema, {.d = 4}, 9);
    TrainReport ra = train_ctr(a, toy.rows, toy.rows, cfg);
    TrainReport rb = train_ctr(b, toy.rows, toy.rows, cfg);
    REQUIRE(ra.history.size() == rb.history.size());
    for (size_t e = 0; e < ra.history.size(); ++e) {
        CHECK(ra.history[e].train_loss == rb.history[e].train_loss);
        CHECK(ra.history[e].val_metric == rb.history[e].val_metric);
    }
    for (size_t p = 0; p < a.params.tensors.size(); ++p)
        CHECK(a.params.tensors[p].values() == b.params.tensors[p].values());
}

TEST_CASE("one small-lr step decreases the batch loss") {
    ToyCtr toy;
    for (CtrKind kind : {CtrKind::fm, CtrKind::dcnv2}) {
        CtrModel model = make_ctr_model(kind, toy.schema, {.d = 4, .mlp = {8}}, 17);
        std::vector<size_t> idx(toy.rows.size());
        std::iota(idx.begin(), idx.end(), 0);
        Batch batch = make_batch(toy.schema, toy.rows, idx);
        const double before = ctr_loss(model, batch).item();
        AdamState adam(model.params);
        Tensor loss = ctr_loss(model, batch);
        model.params.zero_grads();
        backward(loss);
        adam_step(model.params, adam, 1e-4);
        const double after = ctr_loss(model, batch).item();
        CHECK(after < before);
    }
}

TEST_CASE("empty validation falls back to max_epochs with a warning flag") {
    ToyCtr toy;
    CtrModel model = make_ctr_model(CtrKind::lr, toy.schema, {.d = 2}, 5);
    TrainConfig cfg;
    cfg.max_epochs = 4;
    cfg.patience = 2;
    TrainReport report = train_ctr(model, toy.rows, {}, cfg);
    CHECK(report.validation_missing);
    CHECK(report.history.size() == 4);
    CHECK_FALSE(report.early_stopped);
}

TEST_CASE("training aborts cleanly when the loss explodes") {
    ToyCtr toy;
    CtrModel model = make_ctr_model(CtrKind::dcnv2, toy.schema, {.d = 4, .mlp = {8}}, 23);
    TrainConfig cfg;
    cfg.learning_rate = 1e18;  // guaranteed overflow
    cfg.max_epochs = 10;
    cfg.patience = 5;
    TrainReport report = train_ctr(model, toy.rows, toy.rows, cfg);
    CHECK(report.history.size() < 10);
}

TEST_CASE("pairwise loss at zero score difference is ln 2") {
    RecallModel m = make_recall_model(RecallKind::bpr, 2, 3, 2, 1);
    for (auto& t : m.params.tensors)
        for (double& v : t.values()) v = 0.0;
    Tensor loss = recall_loss(m, {0, 1}, {0, 1}, {1, 2});
    CHECK(loss.item() == Catch::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("negative sampler never returns a positive item") {
    Rng rng(7);
    std::set<int64_t> positives = {0, 2, 4, 6, 8};
    for (int t = 0; t < 10000; ++t) {
        const int64_t j = sample_negative(rng, positives, 10);
        CHECK(j >= 0);
        CHECK(j < 10);
        CHECK_FALSE(positives.count(j));
    }
}

TEST_CASE("bpr learns disjoint preferences (recall@1 = 1)") {
    // u0 repeat-listens only to i0, u1 only to i1.
    std::vector<LabeledPair> train = {{0, 0, 3, 1}, {1, 1, 3, 1}};
    RecallModel model = make_recall_model(RecallKind::bpr, 2, 2, 4, 3);
    TrainConfig cfg;
    cfg.learning_rate = 0.05;
    cfg.max_epochs = 60;
    cfg.patience = 60;
    cfg.batch_size = 4;
    cfg.seed = 13;
    train_recall(model, train, {}, cfg);

    RecallEvalData eval;
    eval.exclude.resize(2);
    eval.relevant = {{0}, {1}};
    TopKMetrics m = evaluate_recall(model, eval, 1);
    CHECK(m.recall == Catch::Approx(1.0));
    CHECK(m.mrr == Catch::Approx(1.0));
}

TEST_CASE("recall training is deterministic and reports recall@10") {
    Rng rng(33);
    std::vector<LabeledPair> train, val;
    for (int u = 0; u < 8; ++u) {
        for (int r = 0; r < 6; ++r)
            train.push_back({u, static_cast<int64_t>(rng.uniform_index(15)), 2, 1});
        val.push_back({u, static_cast<int64_t>(rng.uniform_index(15)), 2, 1});
    }
    TrainConfig cfg;
    cfg.learning_rate = 0.01;
    cfg.max_epochs = 3;
    cfg.patience = 3;
    cfg.seed = 5;
    RecallModel a = make_recall_model(RecallKind::bpr, 8, 15, 4, 7);
    RecallModel b = make_recall_model(RecallKind::bpr, 8, 15, 4, 7);
    TrainReport ra = train_recall(a, train, val, cfg);
    TrainReport rb = train_recall(b, train, val, cfg);
    CHECK(ra.metric_name == "recall@10");
    REQUIRE(ra.history.size() == rb.history.size());
    for (size_t e = 0; e < ra.history.size(); ++e)
        CHECK(ra.history[e].train_loss == rb.history[e].train_loss);
    for (size_t p = 0; p < a.params.tensors.size(); ++p)
        CHECK(a.params.tensors[p].values() == b.params.tensors[p].values());
}

TEST_CASE("train config validation") {
    TrainConfig cfg;
    cfg.patience = 200;
    cfg.max_epochs = 100;
    CHECK_THROWS_AS(cfg.validate(), TasteError);
    cfg = {};
    cfg.learning_rate = -1.0;
    CHECK_THROWS_AS(cfg.validate(), TasteError);
}
