#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "taste/muqtoken.hpp"

using namespace taste;

namespace {

// Best possible 2-cluster inertia by enumerating every assignment, n <= 8.
double best_two_partition_inertia(const std::vector<double>& pts, int64_t n, int64_t dim) {
    double best = std::numeric_limits<double>::max();
    for (uint32_t mask = 1; mask + 1 < (1u << n); ++mask) {
        std::vector<double> c0(static_cast<size_t>(dim), 0.0), c1(static_cast<size_t>(dim), 0.0);
        int64_t n0 = 0, n1 = 0;
        for (int64_t i = 0; i < n; ++i) {
            const bool hi = (mask >> i) & 1u;
            double* c = hi ? c1.data() : c0.data();
            (hi ? n1 : n0)++;
            for (int64_t d = 0; d < dim; ++d) c[d] += pts[i * dim + d];
        }
        for (int64_t d = 0; d < dim; ++d) {
            c0[static_cast<size_t>(d)] /= static_cast<double>(std::max<int64_t>(n0, 1));
            c1[static_cast<size_t>(d)] /= static_cast<double>(std::max<int64_t>(n1, 1));
        }
        double inertia = 0.0;
        for (int64_t i = 0; i < n; ++i) {
            const double* c = ((mask >> i) & 1u) ? c1.data() : c0.data();
            for (int64_t d = 0; d < dim; ++d) {
                const double diff = pts[i * dim + d] - c[d];
                inertia += diff * diff;
            }
        }
        best = std::min(best, inertia);
    }
    return best;
}

// Pair-counting ARI: agreement over all C(n,2) item pairs, chance corrected.
double ari_pair_counting(const std::vector<int64_t>& a, const std::vector<int64_t>& b) {
    const size_t n = a.size();
    double n11 = 0, n00 = 0, n10 = 0, n01 = 0;
    for (size_t i = 0; i < n; ++i)
        for (size_t j = i + 1; j < n; ++j) {
            const bool same_a = a[i] == a[j];
            const bool same_b = b[i] == b[j];
            if (same_a && same_b)
                ++n11;
            else if (!same_a && !same_b)
                ++n00;
            else if (same_a)
                ++n10;
            else
                ++n01;
        }
    const double total = n11 + n00 + n10 + n01;
    const double expected = (n11 + n10) * (n11 + n01) / total;
    const double max_index = 0.5 * ((n11 + n10) + (n11 + n01));
    if (std::abs(max_index - expected) < 1e-12) return 1.0;
    return (n11 - expected) / (max_index - expected);
}

LayeredEmbeddings planted_embeddings(int64_t n, int64_t L, int64_t H, int64_t C, double sep,
                                     double noise, uint64_t seed,
                                     std::vector<std::vector<int64_t>>* labels_out = nullptr) {
    Rng rng(seed);
    LayeredEmbeddings emb;
    emb.n = n;
    emb.L = L;
    emb.H = H;
    emb.d_text = 0;
    emb.present.assign(static_cast<size_t>(n), 1);
    emb.audio.assign(static_cast<size_t>(n * L * H), 0.0f);
    std::vector<double> centroids(static_cast<size_t>(L * C * H));
    for (auto& v : centroids) v = sep * rng.normal();
    std::vector<std::vector<int64_t>> labels(static_cast<size_t>(L),
                                             std::vector<int64_t>(static_cast<size_t>(n)));
    for (int64_t l = 0; l < L; ++l)
        for (int64_t i = 0; i < n; ++i)
            labels[static_cast<size_t>(l)][static_cast<size_t>(i)] =
                static_cast<int64_t>(rng.uniform_index(static_cast<size_t>(C)));
    for (int64_t i = 0; i < n; ++i)
        for (int64_t l = 0; l < L; ++l) {
            const int64_t c = labels[static_cast<size_t>(l)][static_cast<size_t>(i)];
            float* dst = emb.audio.data() + (i * L + l) * H;
            const double* mu = centroids.data() + (l * C + c) * H;
            for (int64_t h = 0; h < H; ++h)
                dst[h] = static_cast<float>(mu[h] + noise * rng.normal());
        }
    if (labels_out) *labels_out = labels;
    return emb;
}

}  // namespace

TEST_CASE("pool_temporal averages over time") {
    // L=1, T=2, H=2, frames (1,3) and (3,5) -> (2,4)
    auto out = pool_temporal({1, 3, 3, 5}, 1, 2, 2);
    CHECK(out == std::vector<float>{2, 4});

    auto ident = pool_temporal({7, 8, 9}, 3, 1, 1);
    CHECK(ident == std::vector<float>{7, 8, 9});

    auto constant = pool_temporal(std::vector<float>(2 * 4 * 3, 2.5f), 2, 4, 3);
    for (float v : constant) CHECK(v == 2.5f);

    CHECK_THROWS_AS(pool_temporal({}, 1, 0, 1), TasteError);
}

TEST_CASE("kmeans separates two obvious groups") {
    std::vector<double> pts = {0, 0, 0, 1, 10, 10, 10, 11};
    Codebook cb = fit_kmeans(pts, 4, 2, 2, 1);
    std::vector<std::vector<double>> cents = {{cb.centroid(0)[0], cb.centroid(0)[1]},
                                              {cb.centroid(1)[0], cb.centroid(1)[1]}};
    std::sort(cents.begin(), cents.end());
    CHECK(cents[0][0] == Catch::Approx(0.0));
    CHECK(cents[0][1] == Catch::Approx(0.5));
    CHECK(cents[1][0] == Catch::Approx(10.0));
    CHECK(cents[1][1] == Catch::Approx(10.5));
    CHECK(cb.inertia == Catch::Approx(1.0));
}

TEST_CASE("kmeans with k=1 gives the global mean") {
    Rng rng(2);
    const int64_t n = 20, dim = 3;
    std::vector<double> pts(static_cast<size_t>(n * dim));
    for (auto& v : pts) v = rng.normal();
    Codebook cb = fit_kmeans(pts, n, dim, 1, 9);
    double expected_inertia = 0.0;
    for (int64_t d = 0; d < dim; ++d) {
        double mean = 0.0;
        for (int64_t i = 0; i < n; ++i) mean += pts[i * dim + d];
        mean /= static_cast<double>(n);
        CHECK(cb.centroid(0)[d] == Catch::Approx(mean).margin(1e-12));
        for (int64_t i = 0; i < n; ++i) {
            const double diff = pts[i * dim + d] - mean;
            expected_inertia += diff * diff;
        }
    }
    CHECK(cb.inertia == Catch::Approx(expected_inertia).epsilon(1e-12));
}

TEST_CASE("kmeans reaches the enumeration optimum on tiny instances with restarts") {
    Rng rng(31);
    int hits = 0;
    const int trials = 40;
    for (int t = 0; t < trials; ++t) {
        const int64_t n = 6, dim = 2;
        std::vector<double> pts(static_cast<size_t>(n * dim));
        for (auto& v : pts) v = rng.normal() * 2.0;
        const double best = best_two_partition_inertia(pts, n, dim);
        double reached = std::numeric_limits<double>::max();
        for (uint64_t seed = 0; seed < 10; ++seed)
            reached = std::min(reached, fit_kmeans(pts, n, dim, 2, seed).inertia);
        if (reached <= best * (1.0 + 1e-9) + 1e-12) ++hits;
    }
    CHECK(hits >= trials * 9 / 10);
}

TEST_CASE("kmeans errors and determinism") {
    std::vector<double> pts = {0, 0, 1, 1};
    CHECK_THROWS_MATCHES(fit_kmeans(pts, 2, 2, 3, 1), TasteError,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("TooFewPoints")));
    Rng rng(8);
    std::vector<double> many(50 * 3);
    for (auto& v : many) v = rng.normal();
    Codebook a = fit_kmeans(many, 50, 3, 4, 123);
    Codebook b = fit_kmeans(many, 50, 3, 4, 123);
    CHECK(a.centroids == b.centroids);
    CHECK(a.inertia == b.inertia);
}

TEST_CASE("kmeans handles duplicate points (empty-cluster reseed path)") {
    // 6 identical points + 2 distinct: k=4 must still produce 4 finite
    // centroids deterministically.
    std::vector<double> pts = {5, 5, 5, 5, 5, 5, 5, 5, 5, 5, 5, 5, 0, 0, 9, 9};
    Codebook cb = fit_kmeans(pts, 8, 2, 4, 3);
    CHECK(cb.k == 4);
    for (double v : cb.centroids) CHECK(std::isfinite(v));
    CHECK(cb.inertia >= 0.0);
}

TEST_CASE("tokenize assigns identical columns for identical layers") {
    LayeredEmbeddings emb = planted_embeddings(40, 1, 4, 3, 8.0, 0.3, 5);
    LayeredEmbeddings two;
    two.n = emb.n;
    two.L = 2;
    two.H = emb.H;
    two.d_text = 0;
    two.present = emb.present;
    two.audio.resize(static_cast<size_t>(two.n * 2 * two.H));
    for (int64_t i = 0; i < emb.n; ++i)
        for (int64_t l = 0; l < 2; ++l)
            std::copy_n(emb.audio_at(i), emb.H, two.audio.begin() + (i * 2 + l) * two.H);
    Tokenization tok = tokenize(two, 3, 11);
    for (int64_t i = 0; i < two.n; ++i) CHECK(tok.table.at(i, 0) == tok.table.at(i, 1));
}

TEST_CASE("a point equal to a centroid gets that centroid's id") {
    std::vector<double> pts = {0, 0, 10, 10};
    Codebook cb = fit_kmeans(pts, 2, 2, 2, 7);
    for (int64_t c = 0; c < 2; ++c) CHECK(assign_token(cb, cb.centroid(c)) == c);
}

TEST_CASE("tokenize recovers planted clusters (ARI = 1) when separation dominates noise") {
    std::vector<std::vector<int64_t>> labels;
    LayeredEmbeddings emb = planted_embeddings(64, 2, 6, 4, 10.0, 0.2, 21, &labels);
    Tokenization tok = tokenize(emb, 4, 9);
    for (int64_t l = 0; l < emb.L; ++l) {
        std::vector<int64_t> got;
        for (int64_t i = 0; i < emb.n; ++i) got.push_back(tok.table.at(i, l));
        CHECK(adjusted_rand_index(got, labels[static_cast<size_t>(l)]) ==
              Catch::Approx(1.0).margin(1e-9));
    }
    for (int64_t i = 0; i < emb.n; ++i)
        for (int64_t l = 0; l < emb.L; ++l) {
            CHECK(tok.table.at(i, l) >= 0);
            CHECK(tok.table.at(i, l) < 4);
        }
}

TEST_CASE("tokenize is deterministic") {
    LayeredEmbeddings emb = planted_embeddings(30, 3, 4, 3, 6.0, 1.0, 17);
    Tokenization a = tokenize(emb, 5, 99);
    Tokenization b = tokenize(emb, 5, 99);
    CHECK(a.table.tokens == b.table.tokens);
    for (size_t l = 0; l < a.codebooks.size(); ++l)
        CHECK(a.codebooks[l].centroids == b.codebooks[l].centroids);
}

TEST_CASE("ARI on identical, relabeled, and hand-evaluated partitions") {
    CHECK(adjusted_rand_index({0, 0, 1, 1}, {0, 0, 1, 1}) == 1.0);
    CHECK(adjusted_rand_index({0, 0, 1, 1}, {1, 1, 0, 0}) == 1.0);
    const double v = adjusted_rand_index({0, 0, 1, 1}, {0, 1, 0, 1});
    CHECK(v == Catch::Approx(ari_pair_counting({0, 0, 1, 1}, {0, 1, 0, 1})).margin(1e-12));
    CHECK(v == Catch::Approx(-0.5));  // contingency formula by hand

    CHECK(adjusted_rand_index({0, 0, 0}, {0, 0, 0}) == 1.0);  // both single-cluster
    CHECK_THROWS_AS(adjusted_rand_index({0}, {0}), TasteError);
}

TEST_CASE("ARI matches pair counting on exhaustive small labelings") {
    std::vector<int64_t> b = {0, 1, 0, 2, 1};
    for (int code = 0; code < 3 * 3 * 3 * 3 * 3; ++code) {
        std::vector<int64_t> a(5);
        int c = code;
        for (int i = 0; i < 5; ++i) {
            a[static_cast<size_t>(i)] = c % 3;
            c /= 3;
        }
        CHECK(adjusted_rand_index(a, b) ==
              Catch::Approx(ari_pair_counting(a, b)).margin(1e-12));
    }
}

TEST_CASE("ARI is symmetric and relabeling invariant on random labelings") {
    Rng rng(6);
    for (int t = 0; t < 20; ++t) {
        std::vector<int64_t> a(50), b(50);
        for (auto& v : a) v = static_cast<int64_t>(rng.uniform_index(4));
        for (auto& v : b) v = static_cast<int64_t>(rng.uniform_index(4));
        CHECK(adjusted_rand_index(a, b) ==
              Catch::Approx(adjusted_rand_index(b, a)).margin(1e-12));
        std::vector<int64_t> a_perm(a);
        for (auto& v : a_perm) v = (v + 2) % 4;  // relabeling
        CHECK(adjusted_rand_index(a_perm, b) ==
              Catch::Approx(adjusted_rand_index(a, b)).margin(1e-12));
    }
}

TEST_CASE("mean ARI of independent labelings is near zero") {
    Rng rng(44);
    double total = 0.0;
    const int trials = 60;
    for (int t = 0; t < trials; ++t) {
        std::vector<int64_t> a(1000), b(1000);
        for (auto& v : a) v = static_cast<int64_t>(rng.uniform_index(8));
        for (auto& v : b) v = static_cast<int64_t>(rng.uniform_index(8));
        total += adjusted_rand_index(a, b);
    }
    CHECK(std::abs(total / trials) < 0.05);
}

TEST_CASE("ari_matrix is symmetric with unit diagonal") {
    LayeredEmbeddings emb = planted_embeddings(50, 3, 4, 4, 8.0, 0.5, 12);
    Tokenization tok = tokenize(emb, 4, 3);
    AriMatrix m = ari_matrix(tok.table);
    for (int64_t i = 0; i < m.L; ++i) {
        CHECK(m.at(i, i) == 1.0);
        for (int64_t j = 0; j < m.L; ++j) {
            CHECK(m.at(i, j) == m.at(j, i));
            CHECK(m.at(i, j) >= -1.0);
            CHECK(m.at(i, j) <= 1.0);
        }
    }
}

TEST_CASE("all-identical layers give an all-ones ARI matrix") {
    LayeredEmbeddings emb = planted_embeddings(40, 1, 4, 3, 9.0, 0.2, 15);
    LayeredEmbeddings three;
    three.n = emb.n;
    three.L = 3;
    three.H = emb.H;
    three.d_text = 0;
    three.present = emb.present;
    three.audio.resize(static_cast<size_t>(three.n * 3 * three.H));
    for (int64_t i = 0; i < emb.n; ++i)
        for (int64_t l = 0; l < 3; ++l)
            std::copy_n(emb.audio_at(i), emb.H, three.audio.begin() + (i * 3 + l) * three.H);
    AriMatrix m = ari_matrix(tokenize(three, 3, 2).table);
    for (double v : m.values) CHECK(v == Catch::Approx(1.0).margin(1e-12));
}

TEST_CASE("codebooks round trip through JSON") {
    LayeredEmbeddings emb = planted_embeddings(30, 2, 4, 3, 7.0, 0.5, 19);
    Tokenization tok = tokenize(emb, 3, 77);
    const std::string path =
        (std::filesystem::temp_directory_path() / "taste_codebooks.json").string();
    save_codebooks(path, tok.codebooks);
    auto loaded = load_codebooks(path);
    REQUIRE(loaded.size() == tok.codebooks.size());
    for (size_t l = 0; l < loaded.size(); ++l) {
        CHECK(loaded[l].centroids == tok.codebooks[l].centroids);
        CHECK(loaded[l].inertia == tok.codebooks[l].inertia);
        CHECK(loaded[l].k == tok.codebooks[l].k);
    }
}

TEST_CASE("token and ARI CSV emission") {
    LayeredEmbeddings emb = planted_embeddings(4, 2, 3, 2, 9.0, 0.1, 23);
    Tokenization tok = tokenize(emb, 2, 5);
    std::string csv = token_table_csv(tok.table, {"i0", "i1", "i2", "i3"});
    CHECK(csv.rfind("item_id,tok_0,tok_1\n", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 5);

    std::string ari_csv = ari_matrix_csv(ari_matrix(tok.table));
    CHECK(ari_csv.rfind("layer,0,1\n", 0) == 0);
}
