#pragma once

// Command-line pipeline: validated run configs, stage commands with
// content-hash manifests, the cold-start / cluster-sweep / diversity / drift
// studies, paired t-test, and a small deterministic 2-component PCA.

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "taste/common.hpp"
#include "taste/dataio.hpp"
#include "taste/features.hpp"
#include "taste/metrics.hpp"
#include "taste/models.hpp"
#include "taste/muqtoken.hpp"
#include "taste/synth.hpp"
#include "taste/train.hpp"

namespace taste {

// ---------------------------------------------------------------------------
// Paired two-tailed t-test.

namespace detail {

// Continued-fraction incomplete beta (Lentz), for the Student-t CDF.
inline double betacf(double a, double b, double x) {
    constexpr int kMaxIter = 200;
    constexpr double kEps = 3e-14, kFpMin = 1e-300;
    const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
    double c = 1.0, d = 1.0 - qab * x / qap;
    if (std::abs(d) < kFpMin) d = kFpMin;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= kMaxIter; ++m) {
        const int m2 = 2 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < kFpMin) d = kFpMin;
        c = 1.0 + aa / c;
        if (std::abs(c) < kFpMin) c = kFpMin;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < kFpMin) d = kFpMin;
        c = 1.0 + aa / c;
        if (std::abs(c) < kFpMin) c = kFpMin;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::abs(del - 1.0) < kEps) break;
    }
    return h;
}

inline double betai(double a, double b, double x) {
    if (x <= 0.0) return 0.0;
    if (x >= 1.0) return 1.0;
    const double bt = std::exp(std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                               a * std::log(x) + b * std::log(1.0 - x));
    if (x < (a + 1.0) / (a + b + 2.0)) return bt * betacf(a, b, x) / a;
    return 1.0 - bt * betacf(b, a, 1.0 - x) / b;
}

}  // namespace detail

struct TTestResult {
    double mean_diff = 0.0;
    double t_stat = 0.0;
    double p_value = 1.0;
    size_t n = 0;
};

inline TTestResult paired_ttest(const std::vector<double>& a, const std::vector<double>& b) {
    TASTE_CHECK(a.size() == b.size(), Errc::shape_error, "paired samples differ in length");
    TASTE_CHECK(a.size() >= 2, Errc::ttest_requires_replicates,
                "need >= 2 paired replicates, got " + std::to_string(a.size()));
    const size_t n = a.size();
    std::vector<double> d(n);
    for (size_t i = 0; i < n; ++i) d[i] = a[i] - b[i];
    double mean = 0.0;
    for (double v : d) mean += v;
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (double v : d) var += (v - mean) * (v - mean);
    var /= static_cast<double>(n - 1);
    TTestResult out;
    out.mean_diff = mean;
    out.n = n;
    if (var <= 0.0) {
        out.t_stat = mean == 0.0 ? 0.0 : std::numeric_limits<double>::infinity() * (mean > 0 ? 1 : -1);
        out.p_value = mean == 0.0 ? 1.0 : 0.0;
        return out;
    }
    const double se = std::sqrt(var / static_cast<double>(n));
    out.t_stat = mean / se;
    const double nu = static_cast<double>(n - 1);
    out.p_value = detail::betai(nu / 2.0, 0.5, nu / (nu + out.t_stat * out.t_stat));
    return out;
}

// ---------------------------------------------------------------------------
// Deterministic 2-component PCA (cyclic Jacobi on the covariance).

struct Pca2 {
    std::vector<std::array<double, 2>> coords;      // per input row
    std::array<double, 2> variance_share{0.0, 0.0};  // explained / total
};

inline Pca2 pca2(const std::vector<std::vector<double>>& rows) {
    Pca2 out;
    const size_t n = rows.size();
    if (n == 0) return out;
    const size_t d = rows[0].size();
    out.coords.assign(n, {0.0, 0.0});
    if (d == 0 || n == 1) return out;

    std::vector<double> mean(d, 0.0);
    for (const auto& r : rows)
        for (size_t j = 0; j < d; ++j) mean[j] += r[j];
    for (double& m : mean) m /= static_cast<double>(n);
    std::vector<std::vector<double>> centered(n, std::vector<double>(d));
    for (size_t i = 0; i < n; ++i)
        for (size_t j = 0; j < d; ++j) centered[i][j] = rows[i][j] - mean[j];

    std::vector<std::vector<double>> cov(d, std::vector<double>(d, 0.0));
    for (size_t i = 0; i < n; ++i)
        for (size_t a = 0; a < d; ++a)
            for (size_t b = a; b < d; ++b) cov[a][b] += centered[i][a] * centered[i][b];
    for (size_t a = 0; a < d; ++a)
        for (size_t b = a; b < d; ++b) {
            cov[a][b] /= static_cast<double>(n - 1);
            cov[b][a] = cov[a][b];
        }

    // Cyclic Jacobi; V accumulates eigenvectors as columns.
    std::vector<std::vector<double>> v(d, std::vector<double>(d, 0.0));
    for (size_t i = 0; i < d; ++i) v[i][i] = 1.0;
    for (int sweep = 0; sweep < 64; ++sweep) {
        double off = 0.0;
        for (size_t p = 0; p < d; ++p)
            for (size_t q = p + 1; q < d; ++q) off += cov[p][q] * cov[p][q];
        if (off < 1e-24) break;
        for (size_t p = 0; p < d; ++p)
            for (size_t q = p + 1; q < d; ++q) {
                if (std::abs(cov[p][q]) < 1e-300) continue;
                const double theta = (cov[q][q] - cov[p][p]) / (2.0 * cov[p][q]);
                const double t = (theta >= 0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (size_t k = 0; k < d; ++k) {
                    const double akp = cov[k][p], akq = cov[k][q];
                    cov[k][p] = c * akp - s * akq;
                    cov[k][q] = s * akp + c * akq;
                }
                for (size_t k = 0; k < d; ++k) {
                    const double apk = cov[p][k], aqk = cov[q][k];
                    cov[p][k] = c * apk - s * aqk;
                    cov[q][k] = s * apk + c * aqk;
                }
                for (size_t k = 0; k < d; ++k) {
                    const double vkp = v[k][p], vkq = v[k][q];
                    v[k][p] = c * vkp - s * vkq;
                    v[k][q] = s * vkp + c * vkq;
                }
            }
    }
    std::vector<std::pair<double, size_t>> eig;
    double total = 0.0;
    for (size_t i = 0; i < d; ++i) {
        eig.emplace_back(cov[i][i], i);
        total += std::max(cov[i][i], 0.0);
    }
    std::sort(eig.begin(), eig.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
    });
    for (int comp = 0; comp < 2 && comp < static_cast<int>(d); ++comp) {
        const size_t col = eig[static_cast<size_t>(comp)].second;
        std::vector<double> axis(d);
        for (size_t j = 0; j < d; ++j) axis[j] = v[j][col];
        // Deterministic sign: largest-magnitude loading is positive.
        size_t arg = 0;
        for (size_t j = 1; j < d; ++j)
            if (std::abs(axis[j]) > std::abs(axis[arg])) arg = j;
        if (axis[arg] < 0.0)
            for (double& x : axis) x = -x;
        for (size_t i = 0; i < n; ++i) {
            double dot = 0.0;
            for (size_t j = 0; j < d; ++j) dot += centered[i][j] * axis[j];
            out.coords[i][static_cast<size_t>(comp)] = dot;
        }
        out.variance_share[static_cast<size_t>(comp)] =
            total > 0.0 ? std::max(eig[static_cast<size_t>(comp)].first, 0.0) / total : 0.0;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Run configuration. The accepted document is described in
// docs/runconfig.schema.json; validation here mirrors it with path-precise
// errors.

struct RunConfig {
    nlohmann::json raw;
    std::string out_dir;

    // data
    std::string events_path, users_meta_path, items_meta_path, embeddings_path;

    SynthConfig synth;

    // ingest
    int64_t threshold = 2;
    int64_t k_core = 5;
    std::string split = "random";  // random | cold
    double cold_fraction = 0.2;
    SplitRatios ratios;

    // tokenize
    int64_t token_k = 16;
    bool fit_on_train_only = true;
    bool zscore = false;

    // features
    FeatureSetting setting = FeatureSetting::id_only;
    ModalKind modal = ModalKind::none;
    DenseFusion fusion = DenseFusion::mean_pool;
    bool include_text = true;
    int64_t numeric_bins = 10;

    // model
    std::string task = "ctr";  // ctr | recall
    std::string model_kind = "fm";
    CtrHyper hyper;

    TrainConfig train;
    std::vector<int> eval_ks = {10};

    uint64_t seed = 42;
    std::vector<uint64_t> seeds = {1, 2, 3, 4, 5};

    // studies
    std::vector<int64_t> sweep_k_list = {4, 8, 16, 32, 64};
    int64_t diversity_bins = 10;
    int64_t diversity_top_k = 10;
    int64_t diversity_user_sample = 200;
    std::string diversity_baseline_ckpt, diversity_modal_ckpt;

    // artifact layout
    std::string dataset_path() const { return out_dir + "/dataset.bin"; }
    std::string codebooks_path() const { return out_dir + "/tokens/codebooks.json"; }
    std::string tokens_csv_path() const { return out_dir + "/tokens/tokens.csv"; }
    std::string ari_csv_path() const { return out_dir + "/tokens/ari.csv"; }
    std::string schema_path() const { return out_dir + "/model/schema.json"; }
    std::string checkpoint_path() const { return out_dir + "/model/checkpoint.bin"; }
    std::string train_report_path() const { return out_dir + "/model/train_report.json"; }
    std::string metric_report_path() const { return out_dir + "/eval/metric_report.json"; }
    std::string metrics_csv_path() const { return out_dir + "/eval/metrics.csv"; }
    std::string manifest_path(const std::string& cmd) const {
        return out_dir + "/manifests/" + cmd + ".manifest.json";
    }
};

namespace cfgdetail {

[[noreturn]] inline void bad(const std::string& path, const std::string& what) {
    fail(Errc::config_error, path + ": " + what);
}

inline void expect_keys(const nlohmann::json& obj, const std::string& path,
                        const std::set<std::string>& allowed) {
    for (const auto& [key, value] : obj.items()) {
        (void)value;
        if (!allowed.count(key)) bad(path + "." + key, "unknown key");
    }
}

inline double num(const nlohmann::json& obj, const std::string& path, const std::string& key,
                  double fallback) {
    if (!obj.contains(key)) return fallback;
    if (!obj[key].is_number()) bad(path + "." + key, "expected a number");
    return obj[key].get<double>();
}

inline int64_t integer(const nlohmann::json& obj, const std::string& path, const std::string& key,
                       int64_t fallback) {
    if (!obj.contains(key)) return fallback;
    if (!obj[key].is_number_integer()) bad(path + "." + key, "expected an integer");
    return obj[key].get<int64_t>();
}

inline bool boolean(const nlohmann::json& obj, const std::string& path, const std::string& key,
                    bool fallback) {
    if (!obj.contains(key)) return fallback;
    if (!obj[key].is_boolean()) bad(path + "." + key, "expected a boolean");
    return obj[key].get<bool>();
}

inline std::string str(const nlohmann::json& obj, const std::string& path, const std::string& key,
                       const std::string& fallback) {
    if (!obj.contains(key)) return fallback;
    if (!obj[key].is_string()) bad(path + "." + key, "expected a string");
    return obj[key].get<std::string>();
}

}  // namespace cfgdetail

inline RunConfig parse_run_config(const nlohmann::json& j) {
    using namespace cfgdetail;
    RunConfig cfg;
    cfg.raw = j;
    if (!j.is_object()) bad("$", "config must be a JSON object");
    expect_keys(j, "$",
                {"out_dir", "data", "synth", "ingest", "tokenize", "features", "model", "train",
                 "eval", "seed", "seeds", "sweep", "diversity", "drift"});
    cfg.out_dir = str(j, "$", "out_dir", "");
    if (cfg.out_dir.empty()) bad("$.out_dir", "required");

    if (j.contains("data")) {
        const auto& d = j["data"];
        expect_keys(d, "$.data", {"events", "users_meta", "items_meta", "embeddings"});
        cfg.events_path = str(d, "$.data", "events", "");
        cfg.users_meta_path = str(d, "$.data", "users_meta", "");
        cfg.items_meta_path = str(d, "$.data", "items_meta", "");
        cfg.embeddings_path = str(d, "$.data", "embeddings", "");
    }

    if (j.contains("synth")) {
        const auto& s = j["synth"];
        expect_keys(s, "$.synth",
                    {"n_users", "n_items", "layers", "audio_dim", "text_dim", "n_clusters",
                     "cluster_separation", "noise", "events_per_user", "cold_fraction",
                     "layer_resample_prob", "affinity_alpha", "text_missing_fraction",
                     "zipf_exponent"});
        cfg.synth.n_users = integer(s, "$.synth", "n_users", cfg.synth.n_users);
        cfg.synth.n_items = integer(s, "$.synth", "n_items", cfg.synth.n_items);
        cfg.synth.L = integer(s, "$.synth", "layers", cfg.synth.L);
        cfg.synth.H = integer(s, "$.synth", "audio_dim", cfg.synth.H);
        cfg.synth.d_text = integer(s, "$.synth", "text_dim", cfg.synth.d_text);
        cfg.synth.n_clusters = integer(s, "$.synth", "n_clusters", cfg.synth.n_clusters);
        cfg.synth.cluster_separation =
            num(s, "$.synth", "cluster_separation", cfg.synth.cluster_separation);
        cfg.synth.noise = num(s, "$.synth", "noise", cfg.synth.noise);
        cfg.synth.events_per_user = num(s, "$.synth", "events_per_user", cfg.synth.events_per_user);
        cfg.synth.cold_fraction = num(s, "$.synth", "cold_fraction", cfg.synth.cold_fraction);
        cfg.synth.layer_resample_prob =
            num(s, "$.synth", "layer_resample_prob", cfg.synth.layer_resample_prob);
        cfg.synth.affinity_alpha = num(s, "$.synth", "affinity_alpha", cfg.synth.affinity_alpha);
        cfg.synth.text_missing_fraction =
            num(s, "$.synth", "text_missing_fraction", cfg.synth.text_missing_fraction);
        cfg.synth.zipf_exponent = num(s, "$.synth", "zipf_exponent", cfg.synth.zipf_exponent);
    }

    if (j.contains("ingest")) {
        const auto& g = j["ingest"];
        expect_keys(g, "$.ingest", {"threshold", "k_core", "split", "cold_fraction", "ratios"});
        cfg.threshold = integer(g, "$.ingest", "threshold", cfg.threshold);
        cfg.k_core = integer(g, "$.ingest", "k_core", cfg.k_core);
        cfg.split = str(g, "$.ingest", "split", cfg.split);
        if (cfg.split != "random" && cfg.split != "cold")
            bad("$.ingest.split", "expected 'random' or 'cold'");
        cfg.cold_fraction = num(g, "$.ingest", "cold_fraction", cfg.cold_fraction);
        if (g.contains("ratios")) {
            if (!g["ratios"].is_array() || g["ratios"].size() != 3)
                bad("$.ingest.ratios", "expected [train, validation, test]");
            cfg.ratios = {g["ratios"][0].get<double>(), g["ratios"][1].get<double>(),
                          g["ratios"][2].get<double>()};
        }
        if (cfg.threshold < 1) bad("$.ingest.threshold", "must be >= 1");
        if (cfg.k_core < 1) bad("$.ingest.k_core", "must be >= 1");
    }

    if (j.contains("tokenize")) {
        const auto& t = j["tokenize"];
        expect_keys(t, "$.tokenize", {"k", "fit_on_train_only", "zscore"});
        cfg.token_k = integer(t, "$.tokenize", "k", cfg.token_k);
        if (cfg.token_k < 1) bad("$.tokenize.k", "must be >= 1");
        cfg.fit_on_train_only = boolean(t, "$.tokenize", "fit_on_train_only", true);
        cfg.zscore = boolean(t, "$.tokenize", "zscore", false);
    }

    if (j.contains("features")) {
        const auto& f = j["features"];
        expect_keys(f, "$.features",
                    {"setting", "modal", "fusion", "include_text", "numeric_bins"});
        const std::string setting = str(f, "$.features", "setting", "id_only");
        if (setting == "id_only")
            cfg.setting = FeatureSetting::id_only;
        else if (setting == "id_categories")
            cfg.setting = FeatureSetting::id_categories;
        else if (setting == "full")
            cfg.setting = FeatureSetting::full;
        else
            bad("$.features.setting", "expected id_only | id_categories | full");
        const std::string modal = str(f, "$.features", "modal", "none");
        if (modal == "none")
            cfg.modal = ModalKind::none;
        else if (modal == "muq_dense")
            cfg.modal = ModalKind::muq_dense;
        else if (modal == "muq_token")
            cfg.modal = ModalKind::muq_token;
        else
            bad("$.features.modal", "expected none | muq_dense | muq_token");
        const std::string fusion = str(f, "$.features", "fusion", "mean");
        if (fusion == "mean")
            cfg.fusion = DenseFusion::mean_pool;
        else if (fusion == "all_layers")
            cfg.fusion = DenseFusion::all_layers;
        else
            bad("$.features.fusion", "expected mean | all_layers");
        cfg.include_text = boolean(f, "$.features", "include_text", true);
        cfg.numeric_bins = integer(f, "$.features", "numeric_bins", 10);
        if (cfg.numeric_bins < 1) bad("$.features.numeric_bins", "must be >= 1");
    }

    if (j.contains("model")) {
        const auto& m = j["model"];
        expect_keys(m, "$.model",
                    {"task", "kind", "d", "mlp", "cross_depth", "attention_dim", "adaptor_hidden",
                     "l2"});
        cfg.task = str(m, "$.model", "task", "ctr");
        if (cfg.task != "ctr" && cfg.task != "recall") bad("$.model.task", "expected ctr | recall");
        cfg.model_kind = str(m, "$.model", "kind", cfg.task == "ctr" ? "fm" : "bpr");
        if (cfg.task == "ctr") {
            ctr_kind_from(cfg.model_kind);  // validates
        } else if (cfg.model_kind != "bpr" && cfg.model_kind != "vbpr") {
            bad("$.model.kind", "expected bpr | vbpr for the recall task");
        }
        cfg.hyper.d = integer(m, "$.model", "d", cfg.hyper.d);
        if (cfg.hyper.d < 1) bad("$.model.d", "must be >= 1");
        if (m.contains("mlp")) {
            if (!m["mlp"].is_array()) bad("$.model.mlp", "expected an array of layer sizes");
            cfg.hyper.mlp = m["mlp"].get<std::vector<int64_t>>();
        }
        cfg.hyper.cross_depth =
            static_cast<int>(integer(m, "$.model", "cross_depth", cfg.hyper.cross_depth));
        cfg.hyper.attention_dim = integer(m, "$.model", "attention_dim", 0);
        if (m.contains("adaptor_hidden")) {
            if (!m["adaptor_hidden"].is_array())
                bad("$.model.adaptor_hidden", "expected an array of layer sizes");
            cfg.hyper.adaptor_hidden = m["adaptor_hidden"].get<std::vector<int64_t>>();
        }
        cfg.hyper.l2 = num(m, "$.model", "l2", cfg.hyper.l2);
    }

    if (j.contains("train")) {
        const auto& t = j["train"];
        expect_keys(t, "$.train",
                    {"learning_rate", "batch_size", "max_epochs", "patience",
                     "negatives_per_positive"});
        cfg.train.learning_rate = num(t, "$.train", "learning_rate", cfg.train.learning_rate);
        cfg.train.batch_size = integer(t, "$.train", "batch_size", cfg.train.batch_size);
        cfg.train.max_epochs =
            static_cast<int>(integer(t, "$.train", "max_epochs", cfg.train.max_epochs));
        cfg.train.patience = static_cast<int>(integer(t, "$.train", "patience", cfg.train.patience));
        cfg.train.negatives_per_positive = static_cast<int>(
            integer(t, "$.train", "negatives_per_positive", cfg.train.negatives_per_positive));
    }
    cfg.train.l2 = cfg.hyper.l2;

    if (j.contains("eval")) {
        const auto& e = j["eval"];
        expect_keys(e, "$.eval", {"ks"});
        if (e.contains("ks")) {
            if (!e["ks"].is_array()) bad("$.eval.ks", "expected an array of cutoffs");
            cfg.eval_ks = e["ks"].get<std::vector<int>>();
        }
    }

    if (j.contains("seed")) {
        if (!j["seed"].is_number_integer()) bad("$.seed", "expected an integer");
        cfg.seed = j["seed"].get<uint64_t>();
    }
    cfg.synth.seed = cfg.seed;
    cfg.train.seed = cfg.seed;
    if (j.contains("seeds")) {
        if (!j["seeds"].is_array() || j["seeds"].empty())
            bad("$.seeds", "expected a non-empty array of integers");
        cfg.seeds = j["seeds"].get<std::vector<uint64_t>>();
    }

    if (j.contains("sweep")) {
        const auto& s = j["sweep"];
        expect_keys(s, "$.sweep", {"k_list"});
        if (s.contains("k_list")) {
            if (!s["k_list"].is_array() || s["k_list"].empty())
                bad("$.sweep.k_list", "expected a non-empty array of cluster counts");
            cfg.sweep_k_list = s["k_list"].get<std::vector<int64_t>>();
        }
    }

    if (j.contains("diversity")) {
        const auto& d = j["diversity"];
        expect_keys(d, "$.diversity",
                    {"bins", "top_k", "user_sample", "baseline_checkpoint", "modal_checkpoint"});
        cfg.diversity_bins = integer(d, "$.diversity", "bins", cfg.diversity_bins);
        cfg.diversity_top_k = integer(d, "$.diversity", "top_k", cfg.diversity_top_k);
        cfg.diversity_user_sample =
            integer(d, "$.diversity", "user_sample", cfg.diversity_user_sample);
        cfg.diversity_baseline_ckpt = str(d, "$.diversity", "baseline_checkpoint", "");
        cfg.diversity_modal_ckpt = str(d, "$.diversity", "modal_checkpoint", "");
    }

    if (j.contains("drift")) expect_keys(j["drift"], "$.drift", {});

    check_ratios(cfg.ratios);
    cfg.synth.validate();
    cfg.train.validate();
    return cfg;
}

inline RunConfig load_run_config(const std::string& path) {
    TASTE_CHECK(std::filesystem::exists(path), Errc::config_error,
                "config file not found: " + path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_file(path));
    } catch (const nlohmann::json::exception& e) {
        fail(Errc::config_error, std::string("config is not valid JSON: ") + e.what());
    }
    return parse_run_config(j);
}

// Default data paths fall back to the synth layout under out_dir/data.
inline void resolve_data_paths(RunConfig& cfg) {
    const std::string base = cfg.out_dir + "/data";
    if (cfg.events_path.empty()) cfg.events_path = base + "/events.tsv";
    if (cfg.users_meta_path.empty()) cfg.users_meta_path = base + "/users.jsonl";
    if (cfg.items_meta_path.empty()) cfg.items_meta_path = base + "/items.jsonl";
    if (cfg.embeddings_path.empty()) cfg.embeddings_path = base + "/embeddings.tasteemb";
}

// ---------------------------------------------------------------------------
// Manifests: resolved config + content hashes of inputs and outputs, so any
// table cell can be reproduced by replaying the stage.

inline void write_manifest(const RunConfig& cfg, const std::string& command,
                           const std::vector<std::string>& inputs,
                           const std::vector<std::string>& outputs,
                           const std::vector<std::string>& unhashed_outputs = {}) {
    nlohmann::json m;
    m["command"] = command;
    m["config"] = cfg.raw;
    m["config_hash"] = hex64(fnv1a64(cfg.raw.dump()));
    m["seed"] = cfg.seed;
    nlohmann::json in = nlohmann::json::object(), out = nlohmann::json::object();
    for (const auto& p : inputs) in[p] = file_hash_hex(p);
    for (const auto& p : outputs) out[p] = file_hash_hex(p);
    for (const auto& p : unhashed_outputs) out[p] = "unhashed(timing)";
    m["inputs"] = std::move(in);
    m["outputs"] = std::move(out);
    write_file(cfg.manifest_path(command), m.dump(2) + "\n");
}

inline void require_artifact(const std::string& path, const std::string& producer) {
    TASTE_CHECK(std::filesystem::exists(path), Errc::missing_artifact,
                path + " not found; run `taste " + producer + "` first");
}

// Worker cap for independent jobs (sweeps, multi-seed runs).
inline size_t worker_count(size_t jobs) {
    size_t cap = std::thread::hardware_concurrency();
    if (cap == 0) cap = 1;
    if (const char* env = std::getenv("TASTE_THREADS")) {
        const long v = std::strtol(env, nullptr, 10);
        if (v >= 1) cap = static_cast<size_t>(v);
    }
    return std::min(cap, jobs);
}

// Runs fn(job_index) for every job on up to worker_count threads. Jobs must
// be independent; exceptions propagate after all workers join.
template <typename Fn>
void run_jobs(size_t n_jobs, Fn fn) {
    const size_t workers = worker_count(n_jobs);
    if (workers <= 1) {
        for (size_t i = 0; i < n_jobs; ++i) fn(i);
        return;
    }
    std::atomic<size_t> next{0};
    std::vector<std::exception_ptr> errors(n_jobs);
    std::vector<std::thread> pool;
    for (size_t w = 0; w < workers; ++w)
        pool.emplace_back([&] {
            for (;;) {
                const size_t i = next.fetch_add(1);
                if (i >= n_jobs) return;
                try {
                    fn(i);
                } catch (...) {
                    errors[i] = std::current_exception();
                }
            }
        });
    for (auto& t : pool) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

// ---------------------------------------------------------------------------
// Shared stage plumbing.

struct LoadedData {
    Dataset dataset;
    MetaTable users_meta, items_meta;
    LayeredEmbeddings embeddings;  // aligned to dataset item order
    bool has_embeddings = false;
};

inline LoadedData load_stage_inputs(const RunConfig& cfg, bool need_embeddings) {
    LoadedData out;
    require_artifact(cfg.dataset_path(), "ingest");
    out.dataset = load_dataset(cfg.dataset_path());
    if (std::filesystem::exists(cfg.users_meta_path))
        out.users_meta = parse_metadata_jsonl(cfg.users_meta_path, "user_id");
    if (std::filesystem::exists(cfg.items_meta_path))
        out.items_meta = parse_metadata_jsonl(cfg.items_meta_path, "item_id");
    if (need_embeddings) {
        require_artifact(cfg.embeddings_path, "synth (or point data.embeddings at a TASTEEMB file)");
        out.embeddings = align_embeddings(load_layered_embeddings(cfg.embeddings_path),
                                          out.dataset.item_keys);
        out.has_embeddings = true;
    }
    return out;
}

// Token table for all items from persisted codebooks (cold items reuse
// train-time centroids).
inline TokenTable assign_tokens_from_codebooks(const std::vector<Codebook>& books,
                                               const LayeredEmbeddings& emb) {
    TASTE_CHECK(static_cast<int64_t>(books.size()) == emb.L, Errc::schema_error,
                "codebook layer count != embedding layers");
    TokenTable table;
    table.n = emb.n;
    table.L = emb.L;
    table.k = books.empty() ? 0 : books[0].k;
    table.present = emb.present;
    table.tokens.assign(static_cast<size_t>(emb.n * emb.L), -1);
    std::vector<double> point;
    for (int64_t i = 0; i < emb.n; ++i) {
        if (!emb.has(i)) continue;
        for (int64_t l = 0; l < emb.L; ++l) {
            const float* src = emb.audio_at(i) + l * emb.H;
            point.assign(src, src + emb.H);
            table.tokens[static_cast<size_t>(i * emb.L + l)] =
                assign_token(books[static_cast<size_t>(l)], point.data());
        }
    }
    return table;
}

inline std::vector<Instance> encode_pairs(const FeatureSchema& schema,
                                          const std::vector<LabeledPair>& pairs,
                                          const LoadedData& data, const TokenTable* tokens) {
    std::vector<Instance> rows;
    rows.reserve(pairs.size());
    for (const auto& p : pairs)
        rows.push_back(encode_row(schema, p, data.dataset.user_keys, data.dataset.item_keys,
                                  data.users_meta, data.items_meta, tokens,
                                  data.has_embeddings ? &data.embeddings : nullptr));
    return rows;
}

// ---------------------------------------------------------------------------
// Stage commands.

inline void cmd_synth(RunConfig cfg) {
    const std::string data_dir = cfg.out_dir + "/data";
    SynthOutput out = synth_generate(cfg.synth, data_dir);
    write_manifest(cfg, "synth", {},
                   {out.events_path, out.users_meta_path, out.items_meta_path, out.embeddings_path,
                    embeddings_sidecar_path(out.embeddings_path), out.ground_truth_path});
}

inline void cmd_ingest(RunConfig cfg) {
    resolve_data_paths(cfg);
    require_artifact(cfg.events_path, "synth (or point data.events at a TSV log)");
    EventLog log = parse_interactions(cfg.events_path);
    auto pairs = k_core_filter(binarize(log.events, cfg.threshold), cfg.k_core);
    TASTE_CHECK(!pairs.empty(), Errc::empty_input, "k-core filtering removed every pair");

    Dataset ds;
    ds.user_keys = log.users.keys;
    ds.item_keys = log.items.keys;
    ds.threshold = cfg.threshold;
    ds.k_core = cfg.k_core;
    ds.seed = cfg.seed;
    if (cfg.split == "random") {
        SplitSet s = split_random(pairs, cfg.ratios, cfg.seed);
        for (const auto& p : s.train) {
            ds.pairs.push_back(p);
            ds.split.push_back(static_cast<uint8_t>(SplitTag::train));
        }
        for (const auto& p : s.validation) {
            ds.pairs.push_back(p);
            ds.split.push_back(static_cast<uint8_t>(SplitTag::validation));
        }
        for (const auto& p : s.test) {
            ds.pairs.push_back(p);
            ds.split.push_back(static_cast<uint8_t>(SplitTag::test));
        }
    } else {
        ColdSplitSet s = split_cold_start(pairs, cfg.cold_fraction, cfg.ratios, cfg.seed);
        ds.cold_items = s.cold_items;
        auto push = [&](const std::vector<LabeledPair>& ps, SplitTag tag) {
            for (const auto& p : ps) {
                ds.pairs.push_back(p);
                ds.split.push_back(static_cast<uint8_t>(tag));
            }
        };
        push(s.train, SplitTag::train);
        push(s.warm_validation, SplitTag::validation);
        push(s.warm_test, SplitTag::test);
        push(s.cold_validation, SplitTag::cold_validation);
        push(s.cold_test, SplitTag::cold_test);
    }
    save_dataset(cfg.dataset_path(), ds);
    write_manifest(cfg, "ingest", {cfg.events_path},
                   {cfg.dataset_path(), cfg.dataset_path() + ".users.json",
                    cfg.dataset_path() + ".items.json"});
}

inline void cmd_tokenize(RunConfig cfg) {
    resolve_data_paths(cfg);
    LoadedData data = load_stage_inputs(cfg, /*need_embeddings=*/true);

    std::vector<int64_t> fit_items;
    if (cfg.fit_on_train_only) {
        std::set<int64_t> train_items;
        for (const auto& p : data.dataset.select({SplitTag::train})) train_items.insert(p.item);
        fit_items.assign(train_items.begin(), train_items.end());
    }
    TokenizeOptions opts;
    opts.zscore = cfg.zscore;
    Tokenization tok = tokenize(data.embeddings, cfg.token_k, cfg.seed, fit_items, opts);
    save_codebooks(cfg.codebooks_path(), tok.codebooks);
    write_file(cfg.tokens_csv_path(), token_table_csv(tok.table, data.dataset.item_keys));
    write_file(cfg.ari_csv_path(), ari_matrix_csv(ari_matrix(tok.table)));
    write_manifest(cfg, "tokenize", {cfg.dataset_path(), cfg.embeddings_path},
                   {cfg.codebooks_path(), cfg.tokens_csv_path(), cfg.ari_csv_path()});
}

inline FeatureSchema build_stage_schema(const RunConfig& cfg, const LoadedData& data) {
    SchemaConfig sc;
    sc.setting = cfg.setting;
    sc.modal = cfg.modal;
    sc.fusion = cfg.fusion;
    sc.include_text = cfg.include_text;
    sc.token_k = cfg.token_k;
    sc.numeric_bins = cfg.numeric_bins;
    return build_schema(data.users_meta, data.items_meta, data.dataset.select({SplitTag::train}),
                        data.dataset.user_keys, data.dataset.item_keys,
                        data.has_embeddings ? &data.embeddings : nullptr, sc);
}

inline TrainReport cmd_train(RunConfig cfg) {
    resolve_data_paths(cfg);
    const bool needs_emb = cfg.modal != ModalKind::none || cfg.model_kind == "vbpr";
    LoadedData data = load_stage_inputs(cfg, needs_emb);
    const auto train_pairs = data.dataset.select({SplitTag::train});
    const auto val_pairs = data.dataset.is_cold()
                               ? data.dataset.select({SplitTag::validation, SplitTag::cold_validation})
                               : data.dataset.select({SplitTag::validation});

    TrainConfig tc = cfg.train;
    tc.seed = cfg.seed;
    TrainReport report;
    std::vector<std::string> inputs = {cfg.dataset_path()};
    if (needs_emb) inputs.push_back(cfg.embeddings_path);

    if (cfg.task == "ctr") {
        TokenTable tokens;
        const TokenTable* tokens_ptr = nullptr;
        if (cfg.modal == ModalKind::muq_token) {
            require_artifact(cfg.codebooks_path(), "tokenize");
            tokens = assign_tokens_from_codebooks(load_codebooks(cfg.codebooks_path()),
                                                  data.embeddings);
            tokens_ptr = &tokens;
            inputs.push_back(cfg.codebooks_path());
        }
        FeatureSchema schema = build_stage_schema(cfg, data);
        write_file(cfg.schema_path(), schema_to_json(schema).dump(2) + "\n");
        auto train_rows = encode_pairs(schema, train_pairs, data, tokens_ptr);
        auto val_rows = encode_pairs(schema, val_pairs, data, tokens_ptr);
        CtrModel model = make_ctr_model(ctr_kind_from(cfg.model_kind), schema, cfg.hyper, cfg.seed);
        report = train_ctr(model, train_rows, val_rows, tc);
        save_ctr_checkpoint(cfg.checkpoint_path(), model);
    } else {
        RecallModel model = make_recall_model(
            cfg.model_kind == "bpr" ? RecallKind::bpr : RecallKind::vbpr,
            static_cast<int64_t>(data.dataset.user_keys.size()),
            static_cast<int64_t>(data.dataset.item_keys.size()), cfg.hyper.d, cfg.seed,
            data.has_embeddings ? &data.embeddings : nullptr, cfg.hyper.l2);
        report = train_recall(model, train_pairs, val_pairs, tc);
        save_recall_checkpoint(cfg.checkpoint_path(), model);
    }
    write_file(cfg.train_report_path(), report.to_json().dump(2) + "\n");
    write_manifest(cfg, "train", inputs, {cfg.checkpoint_path()}, {cfg.train_report_path()});
    return report;
}

struct EvalOutput {
    nlohmann::json report;
    std::string csv;
};

inline EvalOutput evaluate_checkpoint(RunConfig& cfg) {
    resolve_data_paths(cfg);
    require_artifact(cfg.checkpoint_path(), "train");
    const std::string ckpt = cfg.checkpoint_path();

    nlohmann::json report;
    std::ostringstream csv;
    LoadedData data;
    if (cfg.task == "ctr") {
        CtrModel model = load_ctr_checkpoint(ckpt);
        const bool needs_emb = model.schema.modal != ModalKind::none;
        data = load_stage_inputs(cfg, needs_emb);
        TokenTable tokens;
        const TokenTable* tokens_ptr = nullptr;
        if (model.schema.modal == ModalKind::muq_token) {
            require_artifact(cfg.codebooks_path(), "tokenize");
            tokens = assign_tokens_from_codebooks(load_codebooks(cfg.codebooks_path()),
                                                  data.embeddings);
            tokens_ptr = &tokens;
        }
        std::vector<std::pair<std::string, std::vector<LabeledPair>>> splits;
        if (data.dataset.is_cold()) {
            splits.emplace_back("warm_test", data.dataset.select({SplitTag::test}));
            splits.emplace_back("cold_test", data.dataset.select({SplitTag::cold_test}));
            splits.emplace_back("combined_test",
                                data.dataset.select({SplitTag::test, SplitTag::cold_test}));
            splits.emplace_back(
                "combined_validation",
                data.dataset.select({SplitTag::validation, SplitTag::cold_validation}));
        } else {
            splits.emplace_back("validation", data.dataset.select({SplitTag::validation}));
            splits.emplace_back("test", data.dataset.select({SplitTag::test}));
        }
        report["task"] = "ctr";
        report["model"] = to_string(model.kind);
        report["setting"] = to_string(model.schema.setting);
        report["modal"] = to_string(model.schema.modal);
        csv << "model,setting,modal,split,auc_pct,logloss,instances\n";
        for (auto& [name, pairs] : splits) {
            if (pairs.empty()) continue;
            auto rows = encode_pairs(model.schema, pairs, data, tokens_ptr);
            std::vector<int> labels;
            labels.reserve(rows.size());
            for (const auto& r : rows) labels.push_back(r.label);
            auto probs = ctr_predict(model, rows);
            nlohmann::json sj;
            sj["auc"] = auc(labels, probs);
            sj["logloss"] = logloss(labels, probs);
            sj["instances"] = rows.size();
            report["splits"][name] = sj;
            csv << to_string(model.kind) << ',' << to_string(model.schema.setting) << ','
                << to_string(model.schema.modal) << ',' << name << ','
                << 100.0 * sj["auc"].get<double>() << ',' << sj["logloss"].get<double>() << ','
                << rows.size() << "\n";
        }
    } else {
        RecallModel model = load_recall_checkpoint(ckpt);
        data = load_stage_inputs(cfg, /*need_embeddings=*/false);
        const auto train_pairs = data.dataset.select({SplitTag::train});
        std::vector<std::pair<std::string, std::vector<LabeledPair>>> splits;
        if (data.dataset.is_cold()) {
            splits.emplace_back("combined_test",
                                data.dataset.select({SplitTag::test, SplitTag::cold_test}));
        } else {
            splits.emplace_back("validation", data.dataset.select({SplitTag::validation}));
            splits.emplace_back("test", data.dataset.select({SplitTag::test}));
        }
        report["task"] = "recall";
        report["model"] = to_string(model.kind);
        csv << "model,split,k,recall,mrr,mrr_at_k,ndcg,precision,users\n";
        for (auto& [name, pairs] : splits) {
            if (pairs.empty()) continue;
            RecallEvalData ed = make_recall_eval(train_pairs, pairs, model.n_users);
            for (int k : cfg.eval_ks) {
                TopKMetrics m = evaluate_recall(model, ed, static_cast<size_t>(k));
                nlohmann::json sj;
                sj["recall"] = m.recall;
                sj["mrr"] = m.mrr;
                sj["mrr_at_k"] = m.mrr_at_k;
                sj["ndcg"] = m.ndcg;
                sj["precision"] = m.precision;
                sj["users"] = m.users_evaluated;
                report["splits"][name]["k" + std::to_string(k)] = sj;
                csv << to_string(model.kind) << ',' << name << ',' << k << ',' << m.recall << ','
                    << m.mrr << ',' << m.mrr_at_k << ',' << m.ndcg << ',' << m.precision << ','
                    << m.users_evaluated << "\n";
            }
        }
    }
    return {std::move(report), csv.str()};
}

inline nlohmann::json cmd_eval(RunConfig cfg) {
    EvalOutput out = evaluate_checkpoint(cfg);
    write_file(cfg.metric_report_path(), out.report.dump(2) + "\n");
    write_file(cfg.metrics_csv_path(), out.csv);
    std::vector<std::string> inputs = {cfg.checkpoint_path(), cfg.dataset_path()};
    write_manifest(cfg, "eval", inputs, {cfg.metric_report_path(), cfg.metrics_csv_path()});
    return out.report;
}

// ---------------------------------------------------------------------------
// Cold-start study: per seed, per variant (modal none vs muq_token), the full
// ingest -> tokenize -> train -> eval chain on a cold split; paired t-tests
// across seeds.

struct ColdstartResult {
    nlohmann::json report;
};

inline RunConfig child_config(const RunConfig& base, const std::string& sub_out, uint64_t seed,
                              ModalKind modal) {
    RunConfig cfg = base;
    cfg.out_dir = sub_out;
    cfg.seed = seed;
    cfg.train.seed = seed;
    cfg.modal = modal;
    nlohmann::json raw = base.raw;
    raw["out_dir"] = sub_out;
    raw["seed"] = seed;
    raw["features"]["modal"] = to_string(modal);
    cfg.raw = std::move(raw);
    return cfg;
}

inline nlohmann::json cmd_coldstart(RunConfig cfg) {
    resolve_data_paths(cfg);
    TASTE_CHECK(cfg.seeds.size() >= 2, Errc::ttest_requires_replicates,
                "cold-start comparison needs >= 2 seeds");
    cfg.split = "cold";

    struct Cell {
        double auc = 0.0, logloss = 0.0;
    };
    // [seed][variant] -> split -> cell
    std::vector<std::array<std::map<std::string, Cell>, 2>> results(cfg.seeds.size());
    const std::array<ModalKind, 2> variants = {ModalKind::none, ModalKind::muq_token};

    run_jobs(cfg.seeds.size(), [&](size_t si) {
        const uint64_t seed = cfg.seeds[si];
        const std::string seed_dir = cfg.out_dir + "/coldstart/seed" + std::to_string(seed);
        // One cold split per seed, shared by both variants.
        RunConfig ingest_cfg = child_config(cfg, seed_dir, seed, ModalKind::none);
        ingest_cfg.split = "cold";
        ingest_cfg.raw["ingest"]["split"] = "cold";
        cmd_ingest(ingest_cfg);
        for (size_t vi = 0; vi < variants.size(); ++vi) {
            const std::string var_dir =
                seed_dir + "/" + (variants[vi] == ModalKind::none ? "baseline" : "muq_token");
            RunConfig vcfg = child_config(cfg, var_dir, seed, variants[vi]);
            // Share the per-seed dataset artifact.
            std::filesystem::create_directories(var_dir);
            for (const char* suffix : {"", ".users.json", ".items.json"})
                std::filesystem::copy_file(ingest_cfg.dataset_path() + suffix,
                                           vcfg.dataset_path() + suffix,
                                           std::filesystem::copy_options::overwrite_existing);
            if (variants[vi] == ModalKind::muq_token) cmd_tokenize(vcfg);
            cmd_train(vcfg);
            nlohmann::json report = cmd_eval(vcfg);
            for (auto& [split, sj] : report["splits"].items())
                results[si][vi][split] = {sj["auc"].get<double>(), sj["logloss"].get<double>()};
        }
    });

    nlohmann::json out;
    out["model"] = cfg.model_kind;
    out["seeds"] = cfg.seeds;
    std::ostringstream csv;
    csv << "model,variant,seed,split,auc_pct,logloss\n";
    for (size_t si = 0; si < cfg.seeds.size(); ++si)
        for (size_t vi = 0; vi < 2; ++vi)
            for (auto& [split, cell] : results[si][vi])
                csv << cfg.model_kind << ',' << (vi == 0 ? "baseline" : "muq_token") << ','
                    << cfg.seeds[si] << ',' << split << ',' << 100.0 * cell.auc << ','
                    << cell.logloss << "\n";

    for (const std::string split : {"warm_test", "cold_test", "combined_test"}) {
        std::vector<double> base_auc, tok_auc, base_ll, tok_ll;
        for (size_t si = 0; si < cfg.seeds.size(); ++si) {
            if (!results[si][0].count(split) || !results[si][1].count(split)) continue;
            base_auc.push_back(results[si][0][split].auc);
            tok_auc.push_back(results[si][1][split].auc);
            base_ll.push_back(results[si][0][split].logloss);
            tok_ll.push_back(results[si][1][split].logloss);
        }
        if (base_auc.size() < 2) continue;
        TTestResult tt = paired_ttest(tok_auc, base_auc);
        auto mean = [](const std::vector<double>& v) {
            double s = 0.0;
            for (double x : v) s += x;
            return s / static_cast<double>(v.size());
        };
        nlohmann::json sj;
        sj["baseline_auc_mean"] = mean(base_auc);
        sj["muq_token_auc_mean"] = mean(tok_auc);
        sj["baseline_logloss_mean"] = mean(base_ll);
        sj["muq_token_logloss_mean"] = mean(tok_ll);
        sj["auc_mean_diff"] = tt.mean_diff;
        sj["p_value"] = tt.p_value;
        out["splits"][split] = sj;
    }
    write_file(cfg.out_dir + "/coldstart/coldstart.csv", csv.str());
    write_file(cfg.out_dir + "/coldstart/coldstart.json", out.dump(2) + "\n");
    return out;
}

// ---------------------------------------------------------------------------
// Cluster-count sweep: tokenize + train + eval per k with fixed seeds; emits
// the k -> validation AUC table.

inline nlohmann::json cmd_sweep_clusters(RunConfig cfg) {
    resolve_data_paths(cfg);
    TASTE_CHECK(!cfg.sweep_k_list.empty(), Errc::config_error, "sweep.k_list is empty");
    cfg.modal = ModalKind::muq_token;

    struct Job {
        size_t seed_index, k_index;
    };
    std::vector<Job> jobs;
    for (size_t si = 0; si < cfg.seeds.size(); ++si)
        for (size_t ki = 0; ki < cfg.sweep_k_list.size(); ++ki) jobs.push_back({si, ki});

    // Ingest once per seed up front (shared by all k).
    std::vector<std::string> seed_dirs(cfg.seeds.size());
    for (size_t si = 0; si < cfg.seeds.size(); ++si) {
        const uint64_t seed = cfg.seeds[si];
        seed_dirs[si] = cfg.out_dir + "/sweep/seed" + std::to_string(seed);
        RunConfig icfg = child_config(cfg, seed_dirs[si], seed, ModalKind::muq_token);
        cmd_ingest(icfg);
    }

    std::vector<std::vector<double>> val_auc(cfg.seeds.size(),
                                             std::vector<double>(cfg.sweep_k_list.size(), 0.0));
    run_jobs(jobs.size(), [&](size_t ji) {
        const auto [si, ki] = jobs[ji];
        const uint64_t seed = cfg.seeds[si];
        const int64_t k = cfg.sweep_k_list[ki];
        const std::string dir = seed_dirs[si] + "/k" + std::to_string(k);
        RunConfig kcfg = child_config(cfg, dir, seed, ModalKind::muq_token);
        kcfg.token_k = k;
        kcfg.raw["tokenize"]["k"] = k;
        std::filesystem::create_directories(dir);
        for (const char* suffix : {"", ".users.json", ".items.json"})
            std::filesystem::copy_file(seed_dirs[si] + "/dataset.bin" + suffix,
                                       kcfg.dataset_path() + suffix,
                                       std::filesystem::copy_options::overwrite_existing);
        cmd_tokenize(kcfg);
        cmd_train(kcfg);
        nlohmann::json report = cmd_eval(kcfg);
        const char* split = report["splits"].contains("validation") ? "validation"
                                                                    : "combined_validation";
        val_auc[si][ki] = report["splits"][split]["auc"].get<double>();
    });

    std::ostringstream csv;
    csv << "k,seed,val_auc\n";
    nlohmann::json out;
    out["k_list"] = cfg.sweep_k_list;
    for (size_t ki = 0; ki < cfg.sweep_k_list.size(); ++ki) {
        double mean = 0.0;
        for (size_t si = 0; si < cfg.seeds.size(); ++si) {
            csv << cfg.sweep_k_list[ki] << ',' << cfg.seeds[si] << ',' << val_auc[si][ki] << "\n";
            mean += val_auc[si][ki];
        }
        out["mean_val_auc"][std::to_string(cfg.sweep_k_list[ki])] =
            mean / static_cast<double>(cfg.seeds.size());
    }
    nlohmann::json per_seed = nlohmann::json::array();
    for (size_t si = 0; si < cfg.seeds.size(); ++si) {
        nlohmann::json row;
        row["seed"] = cfg.seeds[si];
        row["val_auc"] = val_auc[si];
        per_seed.push_back(std::move(row));
    }
    out["per_seed"] = std::move(per_seed);
    write_file(cfg.out_dir + "/sweep/sweep.csv", csv.str());
    write_file(cfg.out_dir + "/sweep/sweep.json", out.dump(2) + "\n");
    return out;
}

// ---------------------------------------------------------------------------
// Diversity study: top-K recommendations from two trained CTR checkpoints,
// binned by train popularity.

inline nlohmann::json cmd_diversity(RunConfig cfg) {
    resolve_data_paths(cfg);
    TASTE_CHECK(!cfg.diversity_baseline_ckpt.empty() && !cfg.diversity_modal_ckpt.empty(),
                Errc::config_error,
                "$.diversity.baseline_checkpoint and modal_checkpoint are required");
    require_artifact(cfg.diversity_baseline_ckpt, "train (baseline variant)");
    require_artifact(cfg.diversity_modal_ckpt, "train (modal variant)");

    LoadedData data = load_stage_inputs(cfg, /*need_embeddings=*/true);
    const auto train_pairs = data.dataset.select({SplitTag::train});

    // Popularity = train interaction frequency (event counts).
    std::map<int64_t, int64_t> popularity;
    for (const auto& p : train_pairs) popularity[p.item] += p.count;
    std::vector<double> pop_values;
    for (auto& [item, c] : popularity) pop_values.push_back(static_cast<double>(c));
    const std::vector<double> edges =
        quantile_bin_edges(pop_values, static_cast<int>(cfg.diversity_bins));

    std::vector<std::set<int64_t>> history(data.dataset.user_keys.size());
    for (const auto& p : train_pairs) history[static_cast<size_t>(p.user)].insert(p.item);

    // Deterministic user sample among users with train history.
    std::vector<int64_t> users;
    for (size_t u = 0; u < history.size(); ++u)
        if (!history[u].empty()) users.push_back(static_cast<int64_t>(u));
    Rng rng(mix_seed(cfg.seed, 0x646976ull));
    rng.shuffle(users);
    if (static_cast<int64_t>(users.size()) > cfg.diversity_user_sample)
        users.resize(static_cast<size_t>(cfg.diversity_user_sample));
    std::sort(users.begin(), users.end());

    const int64_t n_items = static_cast<int64_t>(data.dataset.item_keys.size());
    auto recommend = [&](const std::string& ckpt_path) {
        CtrModel model = load_ctr_checkpoint(ckpt_path);
        TokenTable tokens;
        const TokenTable* tokens_ptr = nullptr;
        if (model.schema.modal == ModalKind::muq_token) {
            require_artifact(cfg.codebooks_path(), "tokenize");
            tokens = assign_tokens_from_codebooks(load_codebooks(cfg.codebooks_path()),
                                                  data.embeddings);
            tokens_ptr = &tokens;
        }
        std::vector<std::vector<int64_t>> recs(users.size());
        run_jobs(users.size(), [&](size_t ui) {
            const int64_t user = users[ui];
            std::vector<LabeledPair> cand;
            std::vector<int64_t> cand_items;
            for (int64_t i = 0; i < n_items; ++i) {
                if (history[static_cast<size_t>(user)].count(i)) continue;
                cand.push_back({user, i, 1, 0});
                cand_items.push_back(i);
            }
            auto rows = encode_pairs(model.schema, cand, data, tokens_ptr);
            auto probs = ctr_predict(model, rows);  // read-only concurrent scoring
            std::vector<std::pair<double, int64_t>> scored;
            for (size_t i = 0; i < cand_items.size(); ++i)
                scored.emplace_back(probs[i], cand_items[i]);
            const auto take =
                std::min<size_t>(static_cast<size_t>(cfg.diversity_top_k), scored.size());
            std::partial_sort(scored.begin(), scored.begin() + static_cast<long>(take),
                              scored.end(), [](const auto& a, const auto& b) {
                                  if (a.first != b.first) return a.first > b.first;
                                  return a.second < b.second;
                              });
            for (size_t i = 0; i < take; ++i) recs[ui].push_back(scored[i].second);
        });
        return recs;
    };

    auto base_recs = recommend(cfg.diversity_baseline_ckpt);
    auto modal_recs = recommend(cfg.diversity_modal_ckpt);
    auto base_freq = popularity_histogram(base_recs, popularity, edges);
    auto modal_freq = popularity_histogram(modal_recs, popularity, edges);

    std::ostringstream csv;
    csv << "bin_lo,bin_hi,baseline_freq,modal_freq\n";
    for (size_t b = 0; b + 1 < edges.size(); ++b)
        csv << edges[b] << ',' << edges[b + 1] << ',' << base_freq[b] << ',' << modal_freq[b]
            << "\n";
    write_file(cfg.out_dir + "/diversity/diversity.csv", csv.str());

    // Bottom-quartile mass: bins covering the lowest quarter of bins.
    const size_t quartile = std::max<size_t>(1, base_freq.size() / 4);
    double base_tail = 0.0, modal_tail = 0.0;
    for (size_t b = 0; b < quartile; ++b) {
        base_tail += base_freq[b];
        modal_tail += modal_freq[b];
    }
    nlohmann::json out;
    out["edges"] = edges;
    out["baseline_freq"] = base_freq;
    out["modal_freq"] = modal_freq;
    out["bottom_quartile_baseline"] = base_tail;
    out["bottom_quartile_modal"] = modal_tail;
    out["users_scored"] = users.size();
    write_file(cfg.out_dir + "/diversity/diversity.json", out.dump(2) + "\n");
    return out;
}

// ---------------------------------------------------------------------------
// Drift study: monthly interaction-weighted feature averages, min-max
// normalized per field, plus 2-component PCA coordinates per period.

inline nlohmann::json cmd_drift(RunConfig cfg) {
    resolve_data_paths(cfg);
    require_artifact(cfg.events_path, "synth (or point data.events at a TSV log)");
    EventLog log = parse_interactions(cfg.events_path);
    MetaTable users_meta, items_meta;
    if (std::filesystem::exists(cfg.users_meta_path))
        users_meta = parse_metadata_jsonl(cfg.users_meta_path, "user_id");
    LayeredEmbeddings emb;
    bool has_emb = false;
    if (std::filesystem::exists(cfg.embeddings_path)) {
        emb = align_embeddings(load_layered_embeddings(cfg.embeddings_path), log.items.keys);
        has_emb = true;
    }

    std::map<YearMonth, std::map<int64_t, int64_t>> user_weight, item_weight;
    for (const auto& e : log.events) {
        const YearMonth ym = year_month_utc(e.timestamp);
        ++user_weight[ym][e.user];
        ++item_weight[ym][e.item];
    }
    TASTE_CHECK(user_weight.size() >= 2, Errc::degenerate_input,
                "drift analysis needs events spanning >= 2 calendar months");

    // User side: weighted mean of each numeric metadata field per month.
    std::set<std::string> field_set;
    for (const auto& [key, meta] : users_meta)
        for (const auto& [name, v] : meta.numeric) {
            (void)v;
            field_set.insert(name);
        }
    std::vector<std::string> fields(field_set.begin(), field_set.end());

    std::vector<std::string> months;
    std::vector<std::vector<double>> user_rows;
    for (const auto& [ym, weights] : user_weight) {
        std::vector<double> row(fields.size(), 0.0);
        std::vector<double> wsum(fields.size(), 0.0);
        for (const auto& [user, w] : weights) {
            auto it = users_meta.find(log.users.keys[static_cast<size_t>(user)]);
            if (it == users_meta.end()) continue;
            for (size_t f = 0; f < fields.size(); ++f) {
                auto vit = it->second.numeric.find(fields[f]);
                if (vit == it->second.numeric.end()) continue;
                row[f] += static_cast<double>(w) * vit->second;
                wsum[f] += static_cast<double>(w);
            }
        }
        for (size_t f = 0; f < fields.size(); ++f) row[f] = wsum[f] > 0 ? row[f] / wsum[f] : 0.0;
        months.push_back(ym.str());
        user_rows.push_back(std::move(row));
    }

    // Min-max per field across periods; degenerate ranges map to 0.5.
    auto normalize = [](std::vector<std::vector<double>>& rows) {
        if (rows.empty()) return;
        const size_t d = rows[0].size();
        for (size_t f = 0; f < d; ++f) {
            double lo = rows[0][f], hi = rows[0][f];
            for (const auto& r : rows) {
                lo = std::min(lo, r[f]);
                hi = std::max(hi, r[f]);
            }
            for (auto& r : rows) r[f] = hi > lo ? (r[f] - lo) / (hi - lo) : 0.5;
        }
    };
    normalize(user_rows);
    Pca2 user_pca = pca2(user_rows);

    // Item side: weighted mean of concat(audio mean over layers, text).
    std::vector<std::vector<double>> item_rows;
    if (has_emb) {
        const size_t dim = static_cast<size_t>(emb.H + emb.d_text);
        for (const auto& [ym, weights] : item_weight) {
            std::vector<double> row(dim, 0.0);
            double wsum = 0.0;
            for (const auto& [item, w] : weights) {
                if (!emb.has(item)) continue;
                const double wd = static_cast<double>(w);
                for (int64_t l = 0; l < emb.L; ++l) {
                    const float* src = emb.audio_at(item) + l * emb.H;
                    for (int64_t h = 0; h < emb.H; ++h)
                        row[static_cast<size_t>(h)] +=
                            wd * src[h] / static_cast<double>(emb.L);
                }
                const float* txt = emb.text_at(item);
                for (int64_t t = 0; t < emb.d_text; ++t)
                    row[static_cast<size_t>(emb.H + t)] += wd * txt[t];
                wsum += wd;
            }
            if (wsum > 0)
                for (double& v : row) v /= wsum;
            item_rows.push_back(std::move(row));
        }
        normalize(item_rows);
    }
    Pca2 item_pca = pca2(item_rows);

    std::ostringstream user_csv;
    user_csv << "month";
    for (const auto& f : fields) user_csv << ',' << f;
    user_csv << ",pc1,pc2\n";
    for (size_t m = 0; m < months.size(); ++m) {
        user_csv << months[m];
        for (double v : user_rows[m]) user_csv << ',' << v;
        user_csv << ',' << user_pca.coords[m][0] << ',' << user_pca.coords[m][1] << "\n";
    }
    write_file(cfg.out_dir + "/drift/drift_user.csv", user_csv.str());

    if (has_emb) {
        std::ostringstream item_csv;
        item_csv << "month,pc1,pc2\n";
        size_t m = 0;
        for (const auto& [ym, weights] : item_weight) {
            (void)weights;
            item_csv << ym.str() << ',' << item_pca.coords[m][0] << ',' << item_pca.coords[m][1]
                     << "\n";
            ++m;
        }
        write_file(cfg.out_dir + "/drift/drift_item.csv", item_csv.str());
    }

    nlohmann::json out;
    out["months"] = months;
    out["user_fields"] = fields;
    out["user_normalized"] = user_rows;
    out["user_pca_variance_share"] = user_pca.variance_share;
    if (has_emb) out["item_pca_variance_share"] = item_pca.variance_share;
    write_file(cfg.out_dir + "/drift/drift.json", out.dump(2) + "\n");
    return out;
}

}  // namespace taste
