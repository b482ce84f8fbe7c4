#pragma once

// Audio-feature discretization: temporal pooling, per-layer K-means
// codebooks, token assignment, and cross-layer ARI similarity.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "taste/common.hpp"
#include "taste/dataio.hpp"

namespace taste {

// Temporal average pooling: (L, T, H) row-major -> (L, H).
inline std::vector<float> pool_temporal(const std::vector<float>& raw, int64_t L, int64_t T,
                                        int64_t H) {
    TASTE_CHECK(T >= 1, Errc::empty_sequence, "temporal dimension is empty");
    TASTE_CHECK(static_cast<int64_t>(raw.size()) == L * T * H, Errc::shape_error,
                "raw tensor size mismatch");
    std::vector<float> out(static_cast<size_t>(L * H), 0.0f);
    for (int64_t l = 0; l < L; ++l) {
        for (int64_t h = 0; h < H; ++h) {
            double acc = 0.0;
            for (int64_t t = 0; t < T; ++t) acc += raw[static_cast<size_t>((l * T + t) * H + h)];
            out[static_cast<size_t>(l * H + h)] = static_cast<float>(acc / static_cast<double>(T));
        }
    }
    return out;
}

struct Codebook {
    int layer = 0;
    int64_t k = 0;
    int64_t dim = 0;
    std::vector<double> centroids;  // k * dim
    double inertia = 0.0;
    uint64_t seed = 0;
    int iterations = 0;

    const double* centroid(int64_t c) const { return centroids.data() + c * dim; }
};

namespace detail {

inline double sq_dist(const double* a, const double* b, int64_t dim) {
    double acc = 0.0;
    for (int64_t i = 0; i < dim; ++i) {
        const double d = a[i] - b[i];
        acc += d * d;
    }
    return acc;
}

}  // namespace detail

// Nearest centroid by squared Euclidean distance; ties to the lowest index.
inline int64_t assign_token(const Codebook& cb, const double* point) {
    int64_t best = 0;
    double best_d = detail::sq_dist(point, cb.centroid(0), cb.dim);
    for (int64_t c = 1; c < cb.k; ++c) {
        const double d = detail::sq_dist(point, cb.centroid(c), cb.dim);
        if (d < best_d) {
            best_d = d;
            best = c;
        }
    }
    return best;
}

// Lloyd's algorithm with k-means++ seeding. Deterministic given the seed.
// Empty clusters are re-seeded to the point farthest from its centroid.
inline Codebook fit_kmeans(const std::vector<double>& points, int64_t n, int64_t dim, int64_t k,
                           uint64_t seed, int max_iter = 100, double tol = 1e-6) {
    TASTE_CHECK(k >= 1, Errc::degenerate_input, "k must be >= 1");
    TASTE_CHECK(n >= k, Errc::too_few_points,
                std::to_string(n) + " points for k=" + std::to_string(k));
    TASTE_CHECK(static_cast<int64_t>(points.size()) == n * dim, Errc::shape_error,
                "points buffer size mismatch");
    for (double v : points)
        TASTE_CHECK(std::isfinite(v), Errc::non_finite_value, "non-finite point");

    Rng rng(seed);
    Codebook cb;
    cb.k = k;
    cb.dim = dim;
    cb.seed = seed;
    cb.centroids.resize(static_cast<size_t>(k * dim));

    // k-means++ seeding.
    auto point_at = [&](int64_t i) { return points.data() + i * dim; };
    std::vector<double> min_d2(static_cast<size_t>(n), std::numeric_limits<double>::max());
    int64_t first = static_cast<int64_t>(rng.uniform_index(static_cast<size_t>(n)));
    std::copy_n(point_at(first), dim, cb.centroids.begin());
    for (int64_t c = 1; c < k; ++c) {
        const double* prev = cb.centroid(c - 1);
        double total = 0.0;
        for (int64_t i = 0; i < n; ++i) {
            min_d2[i] = std::min(min_d2[i], detail::sq_dist(point_at(i), prev, dim));
            total += min_d2[i];
        }
        int64_t chosen;
        if (total <= 0.0) {
            chosen = static_cast<int64_t>(rng.uniform_index(static_cast<size_t>(n)));
        } else {
            double target = rng.uniform01() * total;
            chosen = n - 1;
            double acc = 0.0;
            for (int64_t i = 0; i < n; ++i) {
                acc += min_d2[i];
                if (acc >= target) {
                    chosen = i;
                    break;
                }
            }
        }
        std::copy_n(point_at(chosen), dim, cb.centroids.begin() + c * dim);
    }

    std::vector<int64_t> assignment(static_cast<size_t>(n), 0);
    std::vector<double> dist(static_cast<size_t>(n), 0.0);
    double prev_inertia = std::numeric_limits<double>::max();
    for (int iter = 0; iter < max_iter; ++iter) {
        double inertia = 0.0;
        for (int64_t i = 0; i < n; ++i) {
            assignment[i] = assign_token(cb, point_at(i));
            dist[i] = detail::sq_dist(point_at(i), cb.centroid(assignment[i]), dim);
            inertia += dist[i];
        }
        TASTE_CHECK(inertia <= prev_inertia * (1.0 + 1e-12) + 1e-12, Errc::non_finite_value,
                    "k-means inertia increased");
        prev_inertia = inertia;
        cb.inertia = inertia;
        cb.iterations = iter + 1;

        // Update step: 64-bit accumulation.
        std::vector<double> sums(static_cast<size_t>(k * dim), 0.0);
        std::vector<int64_t> counts(static_cast<size_t>(k), 0);
        for (int64_t i = 0; i < n; ++i) {
            double* dst = sums.data() + assignment[i] * dim;
            const double* src = point_at(i);
            for (int64_t j = 0; j < dim; ++j) dst[j] += src[j];
            ++counts[assignment[i]];
        }
        std::vector<double> next(cb.centroids);
        for (int64_t c = 0; c < k; ++c) {
            if (counts[c] == 0) {
                // Farthest point from its current centroid; ties to lowest index.
                int64_t far_i = 0;
                for (int64_t i = 1; i < n; ++i)
                    if (dist[i] > dist[far_i]) far_i = i;
                std::copy_n(point_at(far_i), dim, next.begin() + c * dim);
                dist[far_i] = 0.0;  // don't pick it twice
                continue;
            }
            const double inv = 1.0 / static_cast<double>(counts[c]);
            for (int64_t j = 0; j < dim; ++j)
                next[static_cast<size_t>(c * dim + j)] = sums[c * dim + j] * inv;
        }

        double shift2 = 0.0, norm2 = 0.0;
        for (size_t i = 0; i < next.size(); ++i) {
            const double d = next[i] - cb.centroids[i];
            shift2 += d * d;
            norm2 += cb.centroids[i] * cb.centroids[i];
        }
        cb.centroids = std::move(next);
        if (std::sqrt(shift2) <= tol * (std::sqrt(norm2) + 1e-12)) break;
    }
    // Final assignment against the converged centroids.
    double inertia = 0.0;
    for (int64_t i = 0; i < n; ++i)
        inertia += detail::sq_dist(point_at(i), cb.centroid(assign_token(cb, point_at(i))), dim);
    cb.inertia = inertia;
    return cb;
}

// ---------------------------------------------------------------------------
// Token table: one cluster ID per layer per item.

struct TokenTable {
    int64_t n = 0, L = 0, k = 0;
    std::vector<int64_t> tokens;   // n * L, -1 where absent
    std::vector<uint8_t> present;  // per item

    int64_t at(int64_t item, int64_t layer) const { return tokens[item * L + layer]; }
    bool has(int64_t item) const {
        return item >= 0 && item < n && present[static_cast<size_t>(item)] != 0;
    }
};

struct Tokenization {
    std::vector<Codebook> codebooks;  // one per layer
    TokenTable table;
};

// Optional per-layer z-scoring before clustering (default off; vectors are
// clustered un-normalized).
struct TokenizeOptions {
    int max_iter = 100;
    double tol = 1e-6;
    bool zscore = false;
};

// Fit one K-means per layer over `fit_items` (all present items when empty),
// then assign tokens to every present item with the fitted codebooks. Cold
// items therefore reuse train-time centroids.
inline Tokenization tokenize(const LayeredEmbeddings& emb, int64_t k, uint64_t seed,
                             const std::vector<int64_t>& fit_items = {},
                             const TokenizeOptions& opts = {}) {
    TASTE_CHECK(emb.n > 0, Errc::empty_input, "no embeddings to tokenize");
    std::vector<int64_t> fit;
    if (fit_items.empty()) {
        for (int64_t i = 0; i < emb.n; ++i)
            if (emb.has(i)) fit.push_back(i);
    } else {
        for (int64_t i : fit_items)
            if (emb.has(i)) fit.push_back(i);
    }
    TASTE_CHECK(!fit.empty(), Errc::empty_input, "no items with embeddings to fit on");

    Tokenization out;
    out.table.n = emb.n;
    out.table.L = emb.L;
    out.table.k = k;
    out.table.tokens.assign(static_cast<size_t>(emb.n * emb.L), -1);
    out.table.present = emb.present;

    const int64_t H = emb.H;
    for (int64_t layer = 0; layer < emb.L; ++layer) {
        std::vector<double> pts(fit.size() * static_cast<size_t>(H));
        for (size_t r = 0; r < fit.size(); ++r) {
            const float* src = emb.audio_at(fit[r]) + layer * H;
            for (int64_t h = 0; h < H; ++h) pts[r * H + h] = src[h];
        }
        std::vector<double> mu(static_cast<size_t>(H), 0.0), sd(static_cast<size_t>(H), 1.0);
        if (opts.zscore) {
            for (size_t r = 0; r < fit.size(); ++r)
                for (int64_t h = 0; h < H; ++h) mu[h] += pts[r * H + h];
            for (int64_t h = 0; h < H; ++h) mu[h] /= static_cast<double>(fit.size());
            std::vector<double> var(static_cast<size_t>(H), 0.0);
            for (size_t r = 0; r < fit.size(); ++r)
                for (int64_t h = 0; h < H; ++h) {
                    const double d = pts[r * H + h] - mu[h];
                    var[h] += d * d;
                }
            for (int64_t h = 0; h < H; ++h)
                sd[h] = std::sqrt(var[h] / static_cast<double>(fit.size())) + 1e-12;
            for (size_t r = 0; r < fit.size(); ++r)
                for (int64_t h = 0; h < H; ++h) pts[r * H + h] = (pts[r * H + h] - mu[h]) / sd[h];
        }
        // Same seed for every layer: identical layer inputs then yield
        // identical token columns, not merely relabeled ones.
        Codebook cb = fit_kmeans(pts, static_cast<int64_t>(fit.size()), H, k, seed, opts.max_iter,
                                 opts.tol);
        cb.layer = static_cast<int>(layer);

        std::vector<double> point(static_cast<size_t>(H));
        for (int64_t i = 0; i < emb.n; ++i) {
            if (!emb.has(i)) continue;
            const float* src = emb.audio_at(i) + layer * H;
            for (int64_t h = 0; h < H; ++h)
                point[static_cast<size_t>(h)] = (static_cast<double>(src[h]) - mu[h]) / sd[h];
            out.table.tokens[static_cast<size_t>(i * emb.L + layer)] = assign_token(cb, point.data());
        }
        out.codebooks.push_back(std::move(cb));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Adjusted Rand Index between two labelings of the same N items.

inline double adjusted_rand_index(const std::vector<int64_t>& a, const std::vector<int64_t>& b) {
    TASTE_CHECK(a.size() == b.size(), Errc::shape_error, "labelings differ in length");
    TASTE_CHECK(a.size() >= 2, Errc::degenerate_input, "ARI needs at least 2 items");
    const auto comb2 = [](double x) { return x * (x - 1.0) / 2.0; };
    std::map<std::pair<int64_t, int64_t>, int64_t> joint;
    std::map<int64_t, int64_t> row, col;
    for (size_t i = 0; i < a.size(); ++i) {
        ++joint[{a[i], b[i]}];
        ++row[a[i]];
        ++col[b[i]];
    }
    double index = 0.0, sum_a = 0.0, sum_b = 0.0;
    for (const auto& [key, c] : joint) index += comb2(static_cast<double>(c));
    for (const auto& [key, c] : row) sum_a += comb2(static_cast<double>(c));
    for (const auto& [key, c] : col) sum_b += comb2(static_cast<double>(c));
    const double total = comb2(static_cast<double>(a.size()));
    const double expected = sum_a * sum_b / total;
    const double max_index = 0.5 * (sum_a + sum_b);
    // Denominator vanishes only when both partitions are all-singletons or
    // both single-cluster, i.e. identical.
    if (std::abs(max_index - expected) < 1e-12) return 1.0;
    return (index - expected) / (max_index - expected);
}

struct AriMatrix {
    int64_t L = 0;
    std::vector<double> values;  // L * L
    double at(int64_t i, int64_t j) const { return values[i * L + j]; }
};

inline AriMatrix ari_matrix(const TokenTable& table) {
    std::vector<int64_t> items;
    for (int64_t i = 0; i < table.n; ++i)
        if (table.has(i)) items.push_back(i);
    TASTE_CHECK(items.size() >= 2, Errc::degenerate_input, "ARI matrix needs >= 2 items");
    AriMatrix m;
    m.L = table.L;
    m.values.assign(static_cast<size_t>(table.L * table.L), 1.0);
    for (int64_t i = 0; i < table.L; ++i) {
        for (int64_t j = i + 1; j < table.L; ++j) {
            std::vector<int64_t> a, b;
            a.reserve(items.size());
            b.reserve(items.size());
            for (int64_t it : items) {
                a.push_back(table.at(it, i));
                b.push_back(table.at(it, j));
            }
            const double v = adjusted_rand_index(a, b);
            m.values[static_cast<size_t>(i * table.L + j)] = v;
            m.values[static_cast<size_t>(j * table.L + i)] = v;
        }
    }
    return m;
}

// ---------------------------------------------------------------------------
// Persistence: codebooks as self-describing JSON (desk-scale sizes), token
// table and ARI matrix as CSV.

inline void save_codebooks(const std::string& path, const std::vector<Codebook>& books) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& cb : books) {
        nlohmann::json j;
        j["layer"] = cb.layer;
        j["k"] = cb.k;
        j["dim"] = cb.dim;
        j["inertia"] = cb.inertia;
        j["seed"] = cb.seed;
        j["iterations"] = cb.iterations;
        j["centroids"] = cb.centroids;
        arr.push_back(std::move(j));
    }
    write_file(path, arr.dump() + "\n");
}

inline std::vector<Codebook> load_codebooks(const std::string& path) {
    nlohmann::json arr = nlohmann::json::parse(read_file(path));
    std::vector<Codebook> books;
    for (const auto& j : arr) {
        Codebook cb;
        cb.layer = j["layer"].get<int>();
        cb.k = j["k"].get<int64_t>();
        cb.dim = j["dim"].get<int64_t>();
        cb.inertia = j["inertia"].get<double>();
        cb.seed = j["seed"].get<uint64_t>();
        cb.iterations = j["iterations"].get<int>();
        cb.centroids = j["centroids"].get<std::vector<double>>();
        TASTE_CHECK(static_cast<int64_t>(cb.centroids.size()) == cb.k * cb.dim,
                    Errc::truncated_file, "codebook centroid payload mismatch");
        books.push_back(std::move(cb));
    }
    return books;
}

inline std::string token_table_csv(const TokenTable& table,
                                   const std::vector<std::string>& item_keys) {
    std::ostringstream out;
    out << "item_id";
    for (int64_t l = 0; l < table.L; ++l) out << ",tok_" << l;
    out << "\n";
    for (int64_t i = 0; i < table.n; ++i) {
        if (!table.has(i)) continue;
        out << item_keys[static_cast<size_t>(i)];
        for (int64_t l = 0; l < table.L; ++l) out << "," << table.at(i, l);
        out << "\n";
    }
    return out.str();
}

inline std::string ari_matrix_csv(const AriMatrix& m) {
    std::ostringstream out;
    out << "layer";
    for (int64_t j = 0; j < m.L; ++j) out << "," << j;
    out << "\n";
    for (int64_t i = 0; i < m.L; ++i) {
        out << i;
        for (int64_t j = 0; j < m.L; ++j) out << "," << m.at(i, j);
        out << "\n";
    }
    return out.str();
}

}  // namespace taste
