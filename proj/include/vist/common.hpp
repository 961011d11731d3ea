#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace vist {

// Error taxonomy. The CLI maps these onto exit codes:
//   ConfigError -> 1, ParseError/SchemaError/DataError -> 2,
//   NumericError/ResourceError/OracleError -> 3.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ConfigError : Error {
    using Error::Error;
};
struct DataError : Error {
    using Error::Error;
};
struct ParseError : DataError {
    using DataError::DataError;
};
struct SchemaError : DataError {
    using DataError::DataError;
};
struct NumericError : Error {
    using Error::Error;
};
struct ResourceError : Error {
    using Error::Error;
};
struct RealizationError : Error {
    using Error::Error;
};

// Deterministic RNG used everywhere seeds matter. splitmix64 core with
// Box-Muller for normals, so streams are identical across platforms and
// standard-library versions.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1).
    double next_double() { return double(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform integer in [0, n).
    std::uint64_t next_below(std::uint64_t n) {
        // Rejection sampling to avoid modulo bias.
        std::uint64_t threshold = (0ULL - n) % n;
        for (;;) {
            std::uint64_t r = next_u64();
            if (r >= threshold) return r % n;
        }
    }

    double next_normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 0.0, u2 = 0.0;
        do {
            u1 = next_double();
        } while (u1 <= 1e-300);
        u2 = next_double();
        double mag = std::sqrt(-2.0 * std::log(u1));
        double two_pi = 6.283185307179586476925286766559;
        spare_ = mag * std::sin(two_pi * u2);
        have_spare_ = true;
        return mag * std::cos(two_pi * u2);
    }

    // Derive an independent stream, e.g. per sequence index.
    Rng fork(std::uint64_t stream) const {
        Rng r(state_ ^ (0xa0761d6478bd642fULL * (stream + 1)));
        r.next_u64();
        return r;
    }

  private:
    std::uint64_t state_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

// In-place seeded Fisher-Yates; deterministic unlike std::shuffle.
template <class Vec>
void shuffle(Vec& v, Rng& rng) {
    for (std::size_t i = v.size(); i > 1; --i) {
        std::size_t j = std::size_t(rng.next_below(i));
        std::swap(v[i - 1], v[j]);
    }
}

// k distinct indices from [0, n), seeded, order = draw order.
inline std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k, Rng& rng) {
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    if (k > n) k = n;
    for (std::size_t i = 0; i < k; ++i) {
        std::size_t j = i + std::size_t(rng.next_below(n - i));
        std::swap(idx[i], idx[j]);
    }
    idx.resize(k);
    return idx;
}

}  // namespace vist
