#pragma once

// Synthetic dataset generator with planted audio-cluster preference
// structure. Layer 0 carries the taste-driving partition; deeper layers are
// noisy refinements, so adjacent layers agree more than distant ones. Repeat
// listens (count >= 2) follow the user's affinity for the item's cluster, so
// token features are Bayes-sufficient on cold items while bare IDs are not.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "taste/common.hpp"
#include "taste/dataio.hpp"

namespace taste {

struct SynthConfig {
    int64_t n_users = 500;
    int64_t n_items = 2000;
    int64_t L = 4;
    int64_t H = 32;
    int64_t d_text = 16;
    int64_t n_clusters = 16;
    double cluster_separation = 10.0;
    double noise = 1.0;
    double events_per_user = 120.0;
    double cold_fraction = 0.2;
    uint64_t seed = 1;
    // Shape knobs.
    double layer_resample_prob = 0.25;  // label refresh rate between layers
    double affinity_alpha = 0.25;       // Dirichlet concentration per user
    double text_missing_fraction = 0.1; // items whose text is the zero vector
    double zipf_exponent = 1.0;         // within-cluster popularity skew
    double prob_floor = 0.05;
    double prob_ceil = 0.95;
    // Every user's mean positive probability is calibrated to this value, so
    // bare user bias carries no signal on cold items.
    double positive_rate = 0.45;
    // Probability of sampling the next item's cluster uniformly instead of by
    // affinity; keeps within-user probability spread wide.
    double explore_prob = 0.5;

    void validate() const {
        TASTE_CHECK(n_users > 0 && n_items > 0 && L >= 1 && H >= 1 && d_text >= 1,
                    Errc::config_error, "synth dimensions must be positive");
        TASTE_CHECK(n_clusters >= 1 && n_clusters <= n_items, Errc::config_error,
                    "need 1 <= n_clusters <= n_items");
        TASTE_CHECK(cluster_separation > 0 && noise >= 0, Errc::config_error,
                    "separation must be > 0 and noise >= 0");
        TASTE_CHECK(events_per_user > 0, Errc::config_error, "events_per_user must be positive");
    }
};

struct GroundTruth {
    int64_t n_users = 0, n_items = 0, L = 0, C = 0;
    std::vector<std::vector<int64_t>> layer_clusters;  // [layer][item]
    std::vector<std::vector<double>> affinity;         // [user][cluster]
    std::vector<double> user_scale;                    // per-user calibration factor
    double prob_floor = 0.05, prob_ceil = 0.95;

    double raw_prob(int64_t user, int64_t item) const {
        const double a = affinity[static_cast<size_t>(user)]
                                 [static_cast<size_t>(layer_clusters[0][static_cast<size_t>(item)])];
        const double scaled = a * static_cast<double>(C);
        return scaled / (scaled + 1.0);
    }

    // Bayes-consistent probability that (user, item) is a positive pair.
    double positive_prob(int64_t user, int64_t item) const {
        const double s = user_scale.empty() ? 1.0 : user_scale[static_cast<size_t>(user)];
        return std::clamp(s * raw_prob(user, item), prob_floor, prob_ceil);
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["n_users"] = n_users;
        j["n_items"] = n_items;
        j["L"] = L;
        j["C"] = C;
        j["layer_clusters"] = layer_clusters;
        j["affinity"] = affinity;
        j["user_scale"] = user_scale;
        j["prob_floor"] = prob_floor;
        j["prob_ceil"] = prob_ceil;
        return j;
    }
    static GroundTruth from_json(const nlohmann::json& j) {
        GroundTruth gt;
        gt.n_users = j["n_users"].get<int64_t>();
        gt.n_items = j["n_items"].get<int64_t>();
        gt.L = j["L"].get<int64_t>();
        gt.C = j["C"].get<int64_t>();
        gt.layer_clusters = j["layer_clusters"].get<std::vector<std::vector<int64_t>>>();
        gt.affinity = j["affinity"].get<std::vector<std::vector<double>>>();
        gt.user_scale = j["user_scale"].get<std::vector<double>>();
        gt.prob_floor = j["prob_floor"].get<double>();
        gt.prob_ceil = j["prob_ceil"].get<double>();
        return gt;
    }
};

struct SynthOutput {
    std::string events_path;
    std::string users_meta_path;
    std::string items_meta_path;
    std::string embeddings_path;
    std::string ground_truth_path;
    GroundTruth truth;
};

namespace detail {

inline std::string synth_user_key(int64_t u) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "u%05lld", static_cast<long long>(u));
    return buf;
}
inline std::string synth_item_key(int64_t i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "i%05lld", static_cast<long long>(i));
    return buf;
}

}  // namespace detail

inline SynthOutput synth_generate(const SynthConfig& cfg, const std::string& out_dir) {
    cfg.validate();
    Rng rng(cfg.seed);
    const int64_t C = cfg.n_clusters;

    GroundTruth gt;
    gt.n_users = cfg.n_users;
    gt.n_items = cfg.n_items;
    gt.L = cfg.L;
    gt.C = C;
    gt.prob_floor = cfg.prob_floor;
    gt.prob_ceil = cfg.prob_ceil;

    // Planted labels: layer 0 uniform; each deeper layer re-samples a fraction.
    gt.layer_clusters.assign(static_cast<size_t>(cfg.L), {});
    auto& layer0 = gt.layer_clusters[0];
    layer0.resize(static_cast<size_t>(cfg.n_items));
    for (auto& c : layer0) c = static_cast<int64_t>(rng.uniform_index(static_cast<size_t>(C)));
    for (int64_t l = 1; l < cfg.L; ++l) {
        auto& cur = gt.layer_clusters[static_cast<size_t>(l)];
        const auto& prev = gt.layer_clusters[static_cast<size_t>(l - 1)];
        cur.resize(static_cast<size_t>(cfg.n_items));
        for (int64_t i = 0; i < cfg.n_items; ++i)
            cur[static_cast<size_t>(i)] =
                rng.uniform01() < cfg.layer_resample_prob
                    ? static_cast<int64_t>(rng.uniform_index(static_cast<size_t>(C)))
                    : prev[static_cast<size_t>(i)];
    }

    // Per-user affinities over clusters (Dirichlet via normalized gammas).
    gt.affinity.assign(static_cast<size_t>(cfg.n_users), {});
    for (auto& row : gt.affinity) {
        row.resize(static_cast<size_t>(C));
        double total = 0.0;
        for (auto& a : row) {
            a = rng.gamma(cfg.affinity_alpha) + 1e-12;
            total += a;
        }
        for (auto& a : row) a /= total;
    }

    // Embeddings: per-layer centroids + Gaussian noise.
    LayeredEmbeddings emb;
    emb.n = cfg.n_items;
    emb.L = cfg.L;
    emb.H = cfg.H;
    emb.d_text = cfg.d_text;
    emb.present.assign(static_cast<size_t>(cfg.n_items), 1);
    std::vector<double> centroids(static_cast<size_t>(cfg.L * C * cfg.H));
    for (auto& v : centroids) v = cfg.cluster_separation * rng.normal();
    emb.audio.resize(static_cast<size_t>(cfg.n_items * cfg.L * cfg.H));
    for (int64_t i = 0; i < cfg.n_items; ++i)
        for (int64_t l = 0; l < cfg.L; ++l) {
            const int64_t c = gt.layer_clusters[static_cast<size_t>(l)][static_cast<size_t>(i)];
            const double* mu = centroids.data() + (l * C + c) * cfg.H;
            float* dst = emb.audio.data() + (i * cfg.L + l) * cfg.H;
            for (int64_t h = 0; h < cfg.H; ++h)
                dst[h] = static_cast<float>(mu[h] + cfg.noise * rng.normal());
        }
    // Text: cluster-indicator-ish vector + noise, a fraction zeroed out to
    // exercise the unlabeled-text fallback.
    emb.text.assign(static_cast<size_t>(cfg.n_items * cfg.d_text), 0.0f);
    for (int64_t i = 0; i < cfg.n_items; ++i) {
        const bool missing = rng.uniform01() < cfg.text_missing_fraction;
        float* dst = emb.text.data() + i * cfg.d_text;
        if (missing) continue;  // all-zero vector
        const int64_t slot = layer0[static_cast<size_t>(i)] % cfg.d_text;
        for (int64_t t = 0; t < cfg.d_text; ++t)
            dst[t] = static_cast<float>(0.3 * cfg.noise * rng.normal());
        dst[slot] += static_cast<float>(cfg.cluster_separation);
    }

    // Cluster membership lists and within-cluster Zipf popularity weights.
    std::vector<std::vector<int64_t>> cluster_items(static_cast<size_t>(C));
    for (int64_t i = 0; i < cfg.n_items; ++i)
        cluster_items[static_cast<size_t>(layer0[static_cast<size_t>(i)])].push_back(i);
    std::vector<std::vector<double>> cluster_cum(static_cast<size_t>(C));
    for (int64_t c = 0; c < C; ++c) {
        double acc = 0.0;
        for (size_t r = 0; r < cluster_items[static_cast<size_t>(c)].size(); ++r) {
            acc += 1.0 / std::pow(static_cast<double>(r + 1), cfg.zipf_exponent);
            cluster_cum[static_cast<size_t>(c)].push_back(acc);
        }
    }

    // Interaction events. Each user draws distinct items cluster-first; a
    // per-user scale then calibrates the mean positive probability to
    // cfg.positive_rate, and the repeat-listen count follows the calibrated
    // affinity-derived probability.
    struct RawEvent {
        int64_t user, item, ts;
    };
    std::vector<RawEvent> events;
    const int64_t t0 = 1546300800;              // 2019-01-01 UTC
    const int64_t span = 365LL * 24 * 3600;
    const double mean_pairs = cfg.events_per_user / 2.0;
    std::vector<int64_t> user_plays(static_cast<size_t>(cfg.n_users), 0);
    gt.user_scale.assign(static_cast<size_t>(cfg.n_users), 1.0);
    for (int64_t u = 0; u < cfg.n_users; ++u) {
        int64_t n_pairs = std::max<int64_t>(5, rng.poisson(mean_pairs));
        n_pairs = std::min(n_pairs, cfg.n_items / 4);
        // Cumulative affinity for cluster sampling.
        std::vector<double> cum(static_cast<size_t>(C));
        double acc = 0.0;
        for (int64_t c = 0; c < C; ++c) {
            acc += gt.affinity[static_cast<size_t>(u)][static_cast<size_t>(c)];
            cum[static_cast<size_t>(c)] = acc;
        }
        std::set<int64_t> chosen;
        std::vector<int64_t> items_of_user;
        for (int64_t p = 0; p < n_pairs; ++p) {
            int64_t item = -1;
            for (int attempt = 0; attempt < 50 && item < 0; ++attempt) {
                int64_t c;
                if (rng.uniform01() < cfg.explore_prob) {
                    c = static_cast<int64_t>(rng.uniform_index(static_cast<size_t>(C)));
                } else {
                    const double uc = rng.uniform01() * acc;
                    c = static_cast<int64_t>(std::lower_bound(cum.begin(), cum.end(), uc) -
                                             cum.begin());
                    if (c >= C) c = C - 1;
                }
                const auto& members = cluster_items[static_cast<size_t>(c)];
                if (members.empty()) continue;
                const auto& cw = cluster_cum[static_cast<size_t>(c)];
                const double ui = rng.uniform01() * cw.back();
                const auto rank = static_cast<size_t>(
                    std::lower_bound(cw.begin(), cw.end(), ui) - cw.begin());
                const int64_t cand = members[std::min(rank, members.size() - 1)];
                if (!chosen.count(cand)) item = cand;
            }
            if (item < 0) continue;
            chosen.insert(item);
            items_of_user.push_back(item);
        }

        // Bisect the user scale so the expected clamped probability under the
        // cluster sampling distribution hits the target rate. Calibrating on
        // the distribution (not the realized items) keeps the train- and
        // cold-subset rates independent draws around the target.
        double lo = 1e-3, hi = 1e3;
        for (int iter = 0; iter < 40; ++iter) {
            const double mid = std::sqrt(lo * hi);
            double mean = 0.0;
            for (int64_t c = 0; c < C; ++c) {
                const double theta = gt.affinity[static_cast<size_t>(u)][static_cast<size_t>(c)];
                const double w = cfg.explore_prob / static_cast<double>(C) +
                                 (1.0 - cfg.explore_prob) * theta;
                const double scaled = theta * static_cast<double>(C);
                mean += w * std::clamp(mid * scaled / (scaled + 1.0), cfg.prob_floor,
                                       cfg.prob_ceil);
            }
            (mean < cfg.positive_rate ? lo : hi) = mid;
        }
        gt.user_scale[static_cast<size_t>(u)] = std::sqrt(lo * hi);

        for (int64_t item : items_of_user) {
            const double p_pos = gt.positive_prob(u, item);
            int64_t count = 1;
            if (rng.uniform01() < p_pos) {
                count = 2;
                while (rng.uniform01() < 0.5) ++count;
            }
            for (int64_t e = 0; e < count; ++e) {
                const int64_t ts = t0 + static_cast<int64_t>(rng.uniform01() *
                                                             static_cast<double>(span));
                events.push_back({u, item, ts});
            }
            user_plays[static_cast<size_t>(u)] += count;
        }
    }
    std::stable_sort(events.begin(), events.end(),
                     [](const RawEvent& a, const RawEvent& b) { return a.ts < b.ts; });

    // ------------------------------------------------------------------
    // Emit files in the dataio formats.
    SynthOutput out;
    out.truth = gt;
    out.events_path = out_dir + "/events.tsv";
    out.users_meta_path = out_dir + "/users.jsonl";
    out.items_meta_path = out_dir + "/items.jsonl";
    out.embeddings_path = out_dir + "/embeddings.tasteemb";
    out.ground_truth_path = out_dir + "/ground_truth.json";

    {
        std::ostringstream tsv;
        tsv << "user_id\titem_id\ttimestamp\n";
        for (const auto& e : events)
            tsv << detail::synth_user_key(e.user) << '\t' << detail::synth_item_key(e.item) << '\t'
                << e.ts << '\n';
        write_file(out.events_path, tsv.str());
    }
    {
        static const char* kCountries[] = {"us", "uk", "de", "jp", "br", "fr", "kr", "se"};
        std::ostringstream jl;
        for (int64_t u = 0; u < cfg.n_users; ++u) {
            nlohmann::json j;
            j["user_id"] = detail::synth_user_key(u);
            j["categorical"] = {{"country", kCountries[rng.uniform_index(8)]}};
            j["numeric"] = {{"age", 18.0 + std::floor(rng.uniform01() * 52.0)},
                            {"plays", static_cast<double>(user_plays[static_cast<size_t>(u)])}};
            jl << j.dump() << "\n";
        }
        write_file(out.users_meta_path, jl.str());
    }
    {
        std::ostringstream jl;
        for (int64_t i = 0; i < cfg.n_items; ++i) {
            const int64_t c0 = layer0[static_cast<size_t>(i)];
            const int64_t c1 = gt.layer_clusters[std::min<int64_t>(1, cfg.L - 1)]
                                                [static_cast<size_t>(i)];
            nlohmann::json j;
            j["item_id"] = detail::synth_item_key(i);
            j["categorical"] = {{"genre", "g" + std::to_string(c0 / 2)}};
            std::vector<std::string> tags = {"t" + std::to_string(c1 % 6)};
            if (rng.uniform01() < 0.5) tags.push_back("x" + std::to_string(rng.uniform_index(10)));
            j["multi"] = {{"tags", tags}};
            j["numeric"] = {{"tempo", 60.0 + static_cast<double>(c0) * (120.0 / static_cast<double>(C)) +
                                          5.0 * rng.normal()},
                            {"duration", 120.0 + rng.uniform01() * 240.0}};
            jl << j.dump() << "\n";
        }
        write_file(out.items_meta_path, jl.str());
    }
    {
        std::vector<std::string> keys;
        for (int64_t i = 0; i < cfg.n_items; ++i) keys.push_back(detail::synth_item_key(i));
        save_layered_embeddings(out.embeddings_path, emb, keys);
    }
    write_file(out.ground_truth_path, gt.to_json().dump() + "\n");
    return out;
}

}  // namespace taste
