#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace counterfax {

inline constexpr const char* kVersion = "0.1.0";

// Training graphs allocate and free multi-megabyte activation buffers every
// step; keeping those on the heap free-lists instead of mmap avoids constant
// page faulting.
struct MallocTuning {
    MallocTuning() {
#if defined(__GLIBC__)
        mallopt(M_MMAP_THRESHOLD, 256 * 1024 * 1024);
        mallopt(M_TRIM_THRESHOLD, 256 * 1024 * 1024);
#endif
    }
};
inline const MallocTuning malloc_tuning_applied{};

// ---------------------------------------------------------------------------
// Error taxonomy. The CLI maps ConfigError/FormatError to exit code 2 and
// NumericError to exit code 3; everything else is a plain failure.
// ---------------------------------------------------------------------------

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct UndefinedError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Hashing (FNV-1a, 64 bit). Used for artifact identity and frozen-parameter
// checks, not for security.
// ---------------------------------------------------------------------------

inline uint64_t fnv1a64(const void* data, size_t len, uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline uint64_t fnv1a64(std::string_view s, uint64_t h = 0xcbf29ce484222325ull) {
    return fnv1a64(s.data(), s.size(), h);
}

template <typename T>
uint64_t hash_values(const std::vector<T>& v, uint64_t h = 0xcbf29ce484222325ull) {
    return fnv1a64(v.data(), v.size() * sizeof(T), h);
}

inline std::string hash_hex(uint64_t h) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
        s[size_t(i)] = digits[h & 0xf];
        h >>= 4;
    }
    return s;
}

// ---------------------------------------------------------------------------
// Seeded random stream with named substreams. All distributions are
// implemented on top of the raw 64-bit engine so streams are reproducible
// across compilers and standard libraries.
// ---------------------------------------------------------------------------

/// Cheap splittable generator for bulk masks; seeded from a RandomStream.
struct SplitMix64 {
    uint64_t state = 0;
    uint64_t next() {
        uint64_t z = (state += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }
    double uniform() { return double(next() >> 11) * 0x1.0p-53; }
};

class RandomStream {
public:
    explicit RandomStream(uint64_t seed) : eng_(seed ^ 0x9e3779b97f4a7c15ull) {}

    // Substream derived from a root seed and a stable name, so pipeline
    // stages can re-run independently with unchanged randomness.
    RandomStream(uint64_t seed, std::string_view name)
        : RandomStream(seed ^ fnv1a64(name)) {}

    uint64_t next_u64() { return eng_(); }

    /// Uniform in [0, 1).
    double uniform() {
        return double(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [lo, hi], inclusive.
    int uniform_int(int lo, int hi) {
        if (hi < lo) throw ConfigError("uniform_int: empty range");
        uint64_t span = uint64_t(hi) - uint64_t(lo) + 1;
        return lo + int(next_u64() % span);
    }

    /// Standard normal via Box-Muller on the raw stream.
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 1e-300) u1 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    template <typename It>
    void shuffle(It first, It last) {
        auto n = last - first;
        for (auto i = n - 1; i > 0; --i) {
            auto j = uniform_int(0, int(i));
            std::swap(first[i], first[j]);
        }
    }

private:
    std::mt19937_64 eng_;
};

}  // namespace counterfax
