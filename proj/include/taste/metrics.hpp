#pragma once

// Evaluation metrics: AUC, LogLoss, top-K ranking metrics, popularity
// histogram for the diversity analysis.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "taste/common.hpp"

namespace taste {

// Probability a random positive outranks a random negative; ties count 1/2.
// Rank-sum formulation, O(n log n).
inline double auc(const std::vector<int>& labels, const std::vector<double>& scores) {
    TASTE_CHECK(labels.size() == scores.size(), Errc::shape_error, "auc input size mismatch");
    const size_t n = labels.size();
    size_t n_pos = 0;
    for (int y : labels) n_pos += (y != 0);
    const size_t n_neg = n - n_pos;
    TASTE_CHECK(n_pos > 0 && n_neg > 0, Errc::undefined_auc,
                "need at least one positive and one negative");
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](size_t a, size_t b) { return scores[a] < scores[b]; });
    double rank_sum_pos = 0.0;
    size_t i = 0;
    while (i < n) {
        size_t j = i;
        while (j < n && scores[order[j]] == scores[order[i]]) ++j;
        const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);  // ranks are 1-based
        for (size_t t = i; t < j; ++t)
            if (labels[order[t]] != 0) rank_sum_pos += avg_rank;
        i = j;
    }
    const double u = rank_sum_pos - static_cast<double>(n_pos) * (n_pos + 1) / 2.0;
    return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

// Mean negative log-likelihood with probabilities clipped to [1e-7, 1-1e-7].
inline double logloss(const std::vector<int>& labels, const std::vector<double>& probs) {
    TASTE_CHECK(labels.size() == probs.size(), Errc::shape_error, "logloss input size mismatch");
    TASTE_CHECK(!labels.empty(), Errc::empty_input, "logloss of empty input");
    constexpr double kClip = 1e-7;
    double total = 0.0;
    for (size_t i = 0; i < labels.size(); ++i) {
        const double p = std::clamp(probs[i], kClip, 1.0 - kClip);
        total += labels[i] != 0 ? -std::log(p) : -std::log(1.0 - p);
    }
    return total / static_cast<double>(labels.size());
}

struct TopKMetrics {
    double recall = 0.0;
    double precision = 0.0;
    double mrr = 0.0;        // first relevant rank over the full ranked list
    double mrr_at_k = 0.0;   // truncated at K (Table-3 style "M@K")
    double ndcg = 0.0;
    size_t users_evaluated = 0;
};

// Per-user binary-relevance metrics averaged over users with non-empty
// relevant sets. NDCG uses binary gains; IDCG is over min(|rel|, K) hits.
inline TopKMetrics topk_metrics(const std::vector<std::vector<int64_t>>& ranked,
                                const std::vector<std::set<int64_t>>& relevant, size_t k) {
    TASTE_CHECK(k >= 1, Errc::degenerate_input, "K must be >= 1");
    TASTE_CHECK(ranked.size() == relevant.size(), Errc::shape_error,
                "ranked/relevant user count mismatch");
    TopKMetrics out;
    for (size_t u = 0; u < ranked.size(); ++u) {
        const auto& rel = relevant[u];
        if (rel.empty()) continue;
        const auto& list = ranked[u];
        const size_t depth = std::min(k, list.size());
        size_t hits = 0;
        double dcg = 0.0;
        for (size_t i = 0; i < depth; ++i) {
            if (rel.count(list[i])) {
                ++hits;
                dcg += 1.0 / std::log2(static_cast<double>(i) + 2.0);
            }
        }
        double idcg = 0.0;
        for (size_t i = 0; i < std::min(rel.size(), k); ++i)
            idcg += 1.0 / std::log2(static_cast<double>(i) + 2.0);
        double rr_full = 0.0, rr_k = 0.0;
        for (size_t i = 0; i < list.size(); ++i) {
            if (rel.count(list[i])) {
                rr_full = 1.0 / static_cast<double>(i + 1);
                if (i < k) rr_k = rr_full;
                break;
            }
        }
        out.recall += static_cast<double>(hits) / static_cast<double>(rel.size());
        out.precision += static_cast<double>(hits) / static_cast<double>(k);
        out.mrr += rr_full;
        out.mrr_at_k += rr_k;
        out.ndcg += idcg > 0.0 ? dcg / idcg : 0.0;
        ++out.users_evaluated;
    }
    TASTE_CHECK(out.users_evaluated > 0, Errc::empty_input,
                "no users with non-empty relevant sets");
    const double n = static_cast<double>(out.users_evaluated);
    out.recall /= n;
    out.precision /= n;
    out.mrr /= n;
    out.mrr_at_k /= n;
    out.ndcg /= n;
    return out;
}

struct MetricReport {
    double auc = 0.0;
    double logloss = 0.0;
    std::map<int, TopKMetrics> topk;  // K -> metrics
    size_t instances = 0;
};

// ---------------------------------------------------------------------------
// Diversity: histogram of train-set popularities of recommended items.

// Quantile edges over the train popularity multiset; duplicates collapsed so
// the result is strictly increasing.
inline std::vector<double> quantile_bin_edges(std::vector<double> popularity, int bins) {
    TASTE_CHECK(!popularity.empty(), Errc::empty_input, "no popularity values");
    TASTE_CHECK(bins >= 1, Errc::degenerate_input, "bins must be >= 1");
    std::sort(popularity.begin(), popularity.end());
    std::vector<double> edges;
    for (int b = 0; b <= bins; ++b) {
        const double q = static_cast<double>(b) / bins;
        const size_t idx = std::min(popularity.size() - 1,
                                    static_cast<size_t>(q * static_cast<double>(popularity.size() - 1) + 0.5));
        edges.push_back(popularity[idx]);
    }
    edges.erase(std::unique(edges.begin(), edges.end()), edges.end());
    if (edges.size() < 2) edges.push_back(edges.back() + 1.0);
    return edges;
}

// Bin index for a popularity value; below-range clamps to the first bin,
// at-or-above the last edge clamps to the last bin.
inline size_t popularity_bin(double pop, const std::vector<double>& edges) {
    const size_t n_bins = edges.size() - 1;
    if (pop < edges.front()) return 0;
    for (size_t b = 0; b + 1 < edges.size(); ++b)
        if (pop >= edges[b] && pop < edges[b + 1]) return b;
    return n_bins - 1;
}

// Normalized frequency of recommended items per popularity bin. Items never
// seen in train have popularity 0.
inline std::vector<double> popularity_histogram(
    const std::vector<std::vector<int64_t>>& recommendations,
    const std::map<int64_t, int64_t>& train_counts, const std::vector<double>& edges) {
    TASTE_CHECK(edges.size() >= 2, Errc::degenerate_input, "need at least two bin edges");
    for (size_t i = 0; i + 1 < edges.size(); ++i)
        TASTE_CHECK(edges[i] < edges[i + 1], Errc::degenerate_input,
                    "bin edges must be strictly increasing");
    std::vector<double> freq(edges.size() - 1, 0.0);
    size_t total = 0;
    for (const auto& items : recommendations) {
        for (int64_t item : items) {
            auto it = train_counts.find(item);
            const double pop = it == train_counts.end() ? 0.0 : static_cast<double>(it->second);
            freq[popularity_bin(pop, edges)] += 1.0;
            ++total;
        }
    }
    TASTE_CHECK(total > 0, Errc::empty_input, "no recommendations to bin");
    for (double& f : freq) f /= static_cast<double>(total);
    return freq;
}

}  // namespace taste
