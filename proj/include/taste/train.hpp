#pragma once

// Optimization loop: Adam, seeded mini-batching, early stopping on the
// validation metric (AUC for CTR, Recall@10 for recall), BPR pairwise
// sampling with uniform negatives.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "taste/common.hpp"
#include "taste/metrics.hpp"
#include "taste/models.hpp"

namespace taste {

struct TrainConfig {
    double learning_rate = 0.001;
    int64_t batch_size = 2048;
    int max_epochs = 100;
    int patience = 5;
    uint64_t seed = 42;
    double l2 = 1e-6;
    int negatives_per_positive = 1;  // recall task

    void validate() const {
        TASTE_CHECK(learning_rate > 0 && batch_size > 0 && max_epochs > 0 && patience > 0 &&
                        negatives_per_positive > 0 && l2 >= 0,
                    Errc::config_error, "train config values must be positive");
        TASTE_CHECK(patience <= max_epochs, Errc::config_error, "patience > max_epochs");
    }
};

struct AdamState {
    static constexpr double beta1 = 0.9;
    static constexpr double beta2 = 0.999;
    static constexpr double eps = 1e-8;
    struct Slot {
        std::vector<double> m, v;
        int64_t t = 0;
    };
    std::vector<Slot> slots;

    explicit AdamState(const ParamStore& params) {
        slots.resize(params.tensors.size());
        for (size_t i = 0; i < params.tensors.size(); ++i) {
            const auto n = params.tensors[i].values().size();
            slots[i].m.assign(n, 0.0);
            slots[i].v.assign(n, 0.0);
        }
    }
};

// Bias-corrected Adam update; consumes and clears the gradients.
inline void adam_step(ParamStore& params, AdamState& state, double lr) {
    for (size_t s = 0; s < params.tensors.size(); ++s) {
        Tensor& p = params.tensors[s];
        auto& slot = state.slots[s];
        auto& g = p.grad();
        for (double gv : g)
            TASTE_CHECK(std::isfinite(gv), Errc::non_finite_gradient,
                        "gradient of " + params.names[s]);
        ++slot.t;
        const double bc1 = 1.0 - std::pow(AdamState::beta1, static_cast<double>(slot.t));
        const double bc2 = 1.0 - std::pow(AdamState::beta2, static_cast<double>(slot.t));
        auto& vals = p.values();
        for (size_t i = 0; i < vals.size(); ++i) {
            slot.m[i] = AdamState::beta1 * slot.m[i] + (1.0 - AdamState::beta1) * g[i];
            slot.v[i] = AdamState::beta2 * slot.v[i] + (1.0 - AdamState::beta2) * g[i] * g[i];
            const double mhat = slot.m[i] / bc1;
            const double vhat = slot.v[i] / bc2;
            vals[i] -= lr * mhat / (std::sqrt(vhat) + AdamState::eps);
        }
        p.zero_grad();
    }
}

struct EpochStat {
    int epoch = 0;
    double train_loss = 0.0;
    double val_metric = 0.0;
    double seconds = 0.0;
};

struct TrainReport {
    std::string metric_name;
    std::vector<EpochStat> history;
    int best_epoch = -1;
    double best_metric = 0.0;
    bool early_stopped = false;
    bool validation_missing = false;

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["metric"] = metric_name;
        j["best_epoch"] = best_epoch;
        j["best_metric"] = best_metric;
        j["early_stopped"] = early_stopped;
        j["validation_missing"] = validation_missing;
        nlohmann::json hist = nlohmann::json::array();
        for (const auto& e : history)
            hist.push_back({{"epoch", e.epoch},
                            {"train_loss", e.train_loss},
                            {"val_metric", e.val_metric},
                            {"seconds", e.seconds}});
        j["history"] = std::move(hist);
        return j;
    }
};

namespace detail {

// Shared early-stopping driver. run_epoch returns the epoch's mean train
// loss; eval_metric returns the validation metric (higher is better) or NaN
// when validation is unusable.
template <typename RunEpoch, typename EvalMetric>
TrainReport train_loop(ParamStore& params, const TrainConfig& cfg, const std::string& metric_name,
                       RunEpoch run_epoch, EvalMetric eval_metric) {
    cfg.validate();
    AdamState adam(params);
    TrainReport report;
    report.metric_name = metric_name;
    auto best_snapshot = params.snapshot();
    bool have_validation = true;
    for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        const auto start = std::chrono::steady_clock::now();
        double loss = 0.0;
        try {
            loss = run_epoch(adam, epoch);
        } catch (const TasteError& e) {
            if (e.code() != Errc::non_finite_gradient) throw;
            report.early_stopped = true;  // aborted epoch; keep the best state
            break;
        }
        double metric = std::numeric_limits<double>::quiet_NaN();
        if (have_validation) {
            metric = eval_metric();
            if (std::isnan(metric)) {
                have_validation = false;
                report.validation_missing = true;
            }
        }
        const double seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        report.history.push_back({epoch, loss, metric, seconds});
        if (have_validation) {
            if (report.best_epoch < 0 || metric > report.best_metric) {
                report.best_epoch = epoch;
                report.best_metric = metric;
                best_snapshot = params.snapshot();
            }
            if (epoch - report.best_epoch > cfg.patience) {
                report.early_stopped = true;
                break;
            }
        } else {
            // No usable validation: run to max_epochs, keep the final state.
            report.best_epoch = epoch;
            best_snapshot = params.snapshot();
        }
    }
    params.restore(best_snapshot);
    return report;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// CTR training: mean BCE-with-logits + L2, early stop on validation AUC.

inline TrainReport train_ctr(CtrModel& model, const std::vector<Instance>& train_rows,
                             const std::vector<Instance>& val_rows, const TrainConfig& cfg) {
    TASTE_CHECK(!train_rows.empty(), Errc::empty_input, "empty train split");
    Rng rng(mix_seed(cfg.seed, 0x637472ull));
    std::vector<size_t> order(train_rows.size());
    std::iota(order.begin(), order.end(), 0);

    std::vector<int> val_labels;
    val_labels.reserve(val_rows.size());
    for (const auto& r : val_rows) val_labels.push_back(r.label);

    auto run_epoch = [&](AdamState& adam, int) {
        rng.shuffle(order);
        double loss_sum = 0.0;
        size_t seen = 0;
        std::vector<size_t> batch_idx;
        for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch_size)) {
            batch_idx.assign(order.begin() + static_cast<long>(start),
                             order.begin() +
                                 static_cast<long>(std::min(order.size(),
                                                            start + static_cast<size_t>(cfg.batch_size))));
            Batch batch = make_batch(model.schema, train_rows, batch_idx);
            Tensor loss = ctr_loss(model, batch);
            TASTE_CHECK(std::isfinite(loss.item()), Errc::non_finite_gradient, "loss is not finite");
            model.params.zero_grads();
            backward(loss);
            adam_step(model.params, adam, cfg.learning_rate);
            loss_sum += loss.item() * static_cast<double>(batch_idx.size());
            seen += batch_idx.size();
        }
        return loss_sum / static_cast<double>(seen);
    };
    auto eval_metric = [&]() -> double {
        if (val_rows.empty()) return std::numeric_limits<double>::quiet_NaN();
        try {
            return auc(val_labels, ctr_predict(model, val_rows));
        } catch (const TasteError& e) {
            if (e.code() == Errc::undefined_auc) return std::numeric_limits<double>::quiet_NaN();
            throw;
        }
    };
    return detail::train_loop(model.params, cfg, "auc", run_epoch, eval_metric);
}

// ---------------------------------------------------------------------------
// Recall training: BPR pairwise loss with uniformly sampled negatives, early
// stop on validation Recall@10.

struct RecallEvalData {
    // Per user: items to exclude from ranking (train history) and the
    // relevant (positive) validation/test items.
    std::vector<std::set<int64_t>> exclude;
    std::vector<std::set<int64_t>> relevant;
};

inline RecallEvalData make_recall_eval(const std::vector<LabeledPair>& train,
                                       const std::vector<LabeledPair>& eval_pairs,
                                       int64_t n_users) {
    RecallEvalData data;
    data.exclude.resize(static_cast<size_t>(n_users));
    data.relevant.resize(static_cast<size_t>(n_users));
    for (const auto& p : train) data.exclude[static_cast<size_t>(p.user)].insert(p.item);
    for (const auto& p : eval_pairs)
        if (p.label == 1) data.relevant[static_cast<size_t>(p.user)].insert(p.item);
    return data;
}

inline TopKMetrics evaluate_recall(const RecallModel& model, const RecallEvalData& data,
                                   size_t k) {
    RecallScorer scorer(model);
    std::vector<std::vector<int64_t>> ranked;
    std::vector<std::set<int64_t>> relevant;
    for (size_t u = 0; u < data.relevant.size(); ++u) {
        if (data.relevant[u].empty()) continue;
        ranked.push_back(rank_items(scorer, static_cast<int64_t>(u), data.exclude[u], k).items);
        relevant.push_back(data.relevant[u]);
    }
    return topk_metrics(ranked, relevant, k);
}

// Uniform negative item outside the user's positive set.
inline int64_t sample_negative(Rng& rng, const std::set<int64_t>& positives, int64_t n_items) {
    for (;;) {
        const auto j = static_cast<int64_t>(rng.uniform_index(static_cast<size_t>(n_items)));
        if (!positives.count(j)) return j;
    }
}

inline TrainReport train_recall(RecallModel& model, const std::vector<LabeledPair>& train,
                                const std::vector<LabeledPair>& val, const TrainConfig& cfg) {
    // Positive pairs drive the pairwise loss; negatives are sampled outside
    // the user's positive set.
    std::vector<std::pair<int64_t, int64_t>> positives;
    std::vector<std::set<int64_t>> user_pos(static_cast<size_t>(model.n_users));
    for (const auto& p : train) {
        if (p.label != 1) continue;
        positives.emplace_back(p.user, p.item);
        user_pos[static_cast<size_t>(p.user)].insert(p.item);
    }
    TASTE_CHECK(!positives.empty(), Errc::empty_input, "no positive train pairs");
    // Users whose positives cover every item cannot be sampled against.
    std::vector<std::pair<int64_t, int64_t>> usable;
    for (const auto& pi : positives)
        if (static_cast<int64_t>(user_pos[static_cast<size_t>(pi.first)].size()) < model.n_items)
            usable.push_back(pi);
    TASTE_CHECK(!usable.empty(), Errc::empty_input, "every user has interacted with every item");

    RecallEvalData eval_data = make_recall_eval(train, val, model.n_users);
    Rng rng(mix_seed(cfg.seed, 0x62707275ull));

    auto run_epoch = [&](AdamState& adam, int) {
        rng.shuffle(usable);
        double loss_sum = 0.0;
        size_t seen = 0;
        for (size_t start = 0; start < usable.size(); start += static_cast<size_t>(cfg.batch_size)) {
            const size_t end = std::min(usable.size(), start + static_cast<size_t>(cfg.batch_size));
            std::vector<int64_t> users, pos_items, neg_items;
            for (size_t i = start; i < end; ++i)
                for (int r = 0; r < cfg.negatives_per_positive; ++r) {
                    users.push_back(usable[i].first);
                    pos_items.push_back(usable[i].second);
                    neg_items.push_back(sample_negative(
                        rng, user_pos[static_cast<size_t>(usable[i].first)], model.n_items));
                }
            Tensor loss = recall_loss(model, users, pos_items, neg_items);
            TASTE_CHECK(std::isfinite(loss.item()), Errc::non_finite_gradient, "loss is not finite");
            model.params.zero_grads();
            backward(loss);
            adam_step(model.params, adam, cfg.learning_rate);
            loss_sum += loss.item() * static_cast<double>(users.size());
            seen += users.size();
        }
        return loss_sum / static_cast<double>(seen);
    };
    auto eval_metric = [&]() -> double {
        bool any = false;
        for (const auto& s : eval_data.relevant)
            if (!s.empty()) any = true;
        if (!any) return std::numeric_limits<double>::quiet_NaN();
        return evaluate_recall(model, eval_data, 10).recall;
    };
    return detail::train_loop(model.params, cfg, "recall@10", run_epoch, eval_metric);
}

}  // namespace taste
