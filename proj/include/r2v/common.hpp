#pragma once

// Shared plumbing: error taxonomy, seeded RNG, hashing, misc numeric helpers.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace r2v {

// Error taxonomy. Library code throws; the CLI maps these onto exit codes
// (config 2, dependency 3, numeric/training 4).
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ConfigError : Error {
    using Error::Error;
};
struct ContractError : Error {
    using Error::Error;
};
struct DependencyError : Error {
    using Error::Error;
};
struct NumericError : Error {
    using Error::Error;
};
struct TrainingError : Error {
    using Error::Error;
};

#define R2V_CHECK(cond, msg)                                 \
    do {                                                     \
        if (!(cond)) {                                       \
            throw ::r2v::ContractError(std::string(msg));    \
        }                                                    \
    } while (0)

#define R2V_CONFIG_CHECK(cond, msg)                          \
    do {                                                     \
        if (!(cond)) {                                       \
            throw ::r2v::ConfigError(std::string(msg));      \
        }                                                    \
    } while (0)

// Deterministic RNG. Gaussian sampling is hand-rolled (Box-Muller) so streams
// do not depend on the standard library's distribution implementations.
class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    // uniform in [0, 1)
    double uniform() {
        return (gen_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) {
        return lo + (hi - lo) * uniform();
    }

    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        while (u1 <= 0.0) {
            u1 = uniform();
        }
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    // integer in [lo, hi] inclusive
    int64_t randint(int64_t lo, int64_t hi) {
        R2V_CHECK(hi >= lo, "randint: empty range");
        uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
        return lo + static_cast<int64_t>(gen_() % span);
    }

    uint64_t raw() { return gen_(); }

private:
    std::mt19937_64 gen_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; i++) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline uint64_t fnv1a64(const std::string& s, uint64_t h = 0xcbf29ce484222325ull) {
    return fnv1a64(s.data(), s.size(), h);
}

inline std::string hash_hex(uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
}

// Derives a per-purpose seed from a base seed; purpose strings keep stages
// decorrelated without extra config knobs.
inline uint64_t derive_seed(uint64_t base, const std::string& purpose) {
    uint64_t h = fnv1a64(purpose);
    h ^= base + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
    return h;
}

inline std::string format_index(const char* fmt, int i) {
    char buf[256];
    std::snprintf(buf, sizeof(buf), fmt, i);
    return std::string(buf);
}

}  // namespace r2v
