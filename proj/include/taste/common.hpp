#pragma once

// Shared plumbing: error type, deterministic RNG, hashing, binary IO helpers.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace taste {

// ---------------------------------------------------------------------------
// Errors

enum class Errc {
    // data errors
    empty_input,
    malformed_line,
    bad_timestamp,
    bad_magic,
    version_mismatch,
    truncated_file,
    non_finite_value,
    missing_field,
    missing_modality,
    degenerate_cold_fraction,
    missing_artifact,
    // config errors
    config_error,
    // numerical / engine errors
    shape_error,
    non_scalar_loss,
    too_few_points,
    degenerate_input,
    undefined_auc,
    empty_sequence,
    schema_error,
    non_finite_gradient,
    ttest_requires_replicates,
};

inline const char* errc_name(Errc c) {
    switch (c) {
        case Errc::empty_input: return "EmptyInput";
        case Errc::malformed_line: return "MalformedLine";
        case Errc::bad_timestamp: return "BadTimestamp";
        case Errc::bad_magic: return "BadMagic";
        case Errc::version_mismatch: return "VersionMismatch";
        case Errc::truncated_file: return "TruncatedFile";
        case Errc::non_finite_value: return "NonFiniteValue";
        case Errc::missing_field: return "MissingField";
        case Errc::missing_modality: return "MissingModality";
        case Errc::degenerate_cold_fraction: return "DegenerateColdFraction";
        case Errc::missing_artifact: return "MissingArtifact";
        case Errc::config_error: return "ConfigError";
        case Errc::shape_error: return "ShapeError";
        case Errc::non_scalar_loss: return "NonScalarLoss";
        case Errc::too_few_points: return "TooFewPoints";
        case Errc::degenerate_input: return "DegenerateInput";
        case Errc::undefined_auc: return "UndefinedAUC";
        case Errc::empty_sequence: return "EmptySequence";
        case Errc::schema_error: return "SchemaError";
        case Errc::non_finite_gradient: return "NonFiniteGradient";
        case Errc::ttest_requires_replicates: return "TTestRequiresReplicates";
    }
    return "Unknown";
}

// Exit-code category used by the CLI: 2 config, 3 data, 4 numerical.
inline int errc_exit_code(Errc c) {
    switch (c) {
        case Errc::config_error:
            return 2;
        case Errc::empty_input:
        case Errc::malformed_line:
        case Errc::bad_timestamp:
        case Errc::bad_magic:
        case Errc::version_mismatch:
        case Errc::truncated_file:
        case Errc::missing_field:
        case Errc::missing_modality:
        case Errc::degenerate_cold_fraction:
        case Errc::missing_artifact:
            return 3;
        default:
            return 4;
    }
}

class TasteError : public std::runtime_error {
public:
    TasteError(Errc code, const std::string& msg)
        : std::runtime_error(std::string(errc_name(code)) + ": " + msg), code_(code) {}
    Errc code() const { return code_; }

private:
    Errc code_;
};

[[noreturn]] inline void fail(Errc code, const std::string& msg) {
    throw TasteError(code, msg);
}

#define TASTE_CHECK(cond, code, msg) \
    do {                             \
        if (!(cond)) ::taste::fail((code), (msg)); \
    } while (0)

// ---------------------------------------------------------------------------
// Deterministic RNG.
//
// mt19937_64 output is fully specified by the standard; every derived draw
// below is built from raw 64-bit words only, so streams are reproducible
// across platforms and compilers (std::shuffle / std::*_distribution are not).

class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    uint64_t next_u64() { return gen_(); }

    // Unbiased index in [0, n) via rejection sampling.
    size_t uniform_index(size_t n) {
        if (n == 0) fail(Errc::degenerate_input, "uniform_index over empty range");
        uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t x;
        do {
            x = gen_();
        } while (x >= limit);
        return static_cast<size_t>(x % n);
    }

    // Uniform double in [0, 1) with 53-bit resolution.
    double uniform01() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    // Box-Muller; draws exactly two words per call.
    double normal() {
        double u1 = uniform01();
        double u2 = uniform01();
        while (u1 <= 0.0) u1 = uniform01();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    // Marsaglia-Tsang gamma sampler, shape > 0, scale 1.
    double gamma(double shape) {
        if (shape < 1.0) {
            double u = uniform01();
            while (u <= 0.0) u = uniform01();
            return gamma(shape + 1.0) * std::pow(u, 1.0 / shape);
        }
        double d = shape - 1.0 / 3.0;
        double c = 1.0 / std::sqrt(9.0 * d);
        for (;;) {
            double x = normal();
            double v = 1.0 + c * x;
            if (v <= 0.0) continue;
            v = v * v * v;
            double u = uniform01();
            if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
            if (u > 0.0 && std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
        }
    }

    // Knuth; fine for the event-count magnitudes used here.
    int poisson(double lambda) {
        double l = std::exp(-lambda);
        double p = 1.0;
        int k = 0;
        do {
            ++k;
            p *= uniform01();
        } while (p > l);
        return k - 1;
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = uniform_index(i);
            std::swap(v[i - 1], v[j]);
        }
    }

    // Independent child stream; splitmix64 mixes the salt.
    Rng fork(uint64_t salt);

private:
    std::mt19937_64 gen_;
};

// Order-free derivation of a child seed (parallel jobs get stable streams).
inline uint64_t mix_seed(uint64_t seed, uint64_t salt) {
    uint64_t z = seed + salt * 0x9e3779b97f4a7c15ull + 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

inline Rng Rng::fork(uint64_t salt) { return Rng(mix_seed(next_u64(), salt)); }

// ---------------------------------------------------------------------------
// Hashing (content hashes for manifests) and file IO.

inline uint64_t fnv1a64(const void* data, size_t len, uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

inline std::string hex64(uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    TASTE_CHECK(in.good(), Errc::missing_artifact, "cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_file(const std::string& path, const std::string& bytes) {
    if (auto dir = std::filesystem::path(path).parent_path(); !dir.empty())
        std::filesystem::create_directories(dir);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    TASTE_CHECK(out.good(), Errc::missing_artifact, "cannot write " + path);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline std::string file_hash_hex(const std::string& path) {
    return hex64(fnv1a64(read_file(path)));
}

// Little-endian scalar append / read (host assumed little-endian compatible;
// memcpy keeps it alias-safe).
struct ByteWriter {
    std::string bytes;
    void raw(const void* p, size_t n) { bytes.append(static_cast<const char*>(p), n); }
    void u32(uint32_t v) { raw(&v, 4); }
    void u64(uint64_t v) { raw(&v, 8); }
    void f32(float v) { raw(&v, 4); }
    void f64(double v) { raw(&v, 8); }
    void str(const std::string& s) {
        u32(static_cast<uint32_t>(s.size()));
        raw(s.data(), s.size());
    }
};

struct ByteReader {
    const std::string& bytes;
    size_t pos = 0;
    explicit ByteReader(const std::string& b) : bytes(b) {}
    void raw(void* p, size_t n) {
        TASTE_CHECK(pos + n <= bytes.size(), Errc::truncated_file,
                    "payload ends early at byte " + std::to_string(pos));
        std::memcpy(p, bytes.data() + pos, n);
        pos += n;
    }
    uint32_t u32() { uint32_t v; raw(&v, 4); return v; }
    uint64_t u64() { uint64_t v; raw(&v, 8); return v; }
    float f32() { float v; raw(&v, 4); return v; }
    double f64() { double v; raw(&v, 8); return v; }
    std::string str() {
        uint32_t n = u32();
        std::string s(n, '\0');
        raw(s.data(), n);
        return s;
    }
    bool done() const { return pos == bytes.size(); }
};

// ---------------------------------------------------------------------------
// Calendar helper (UTC) for the drift analysis: unix seconds -> (year, month).

struct YearMonth {
    int year;
    int month;  // 1..12
    bool operator==(const YearMonth&) const = default;
    auto operator<=>(const YearMonth&) const = default;
    std::string str() const {
        char buf[8];
        std::snprintf(buf, sizeof(buf), "%04d-%02d", year, month);
        return buf;
    }
};

inline YearMonth year_month_utc(int64_t unix_seconds) {
    // Howard Hinnant's civil_from_days.
    int64_t z = unix_seconds / 86400;
    if (unix_seconds < 0 && unix_seconds % 86400 != 0) --z;
    z += 719468;
    int64_t era = (z >= 0 ? z : z - 146096) / 146097;
    int64_t doe = z - era * 146097;
    int64_t yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
    int64_t y = yoe + era * 400;
    int64_t doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    int64_t mp = (5 * doy + 2) / 153;
    int m = static_cast<int>(mp < 10 ? mp + 3 : mp - 9);
    if (m <= 2) ++y;
    return {static_cast<int>(y), m};
}

}  // namespace taste
