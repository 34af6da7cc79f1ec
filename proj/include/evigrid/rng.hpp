// SPDX-License-Identifier: Apache-2.0
//
// Seeding and sampling helpers. Everything here is bit-reproducible across
// standard libraries: distributions are computed from raw engine output
// instead of going through <random>'s implementation-defined distributions.

#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

namespace evigrid {

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Seed for one item of a run, independent of processing order.
inline uint64_t derive_seed(uint64_t global, uint64_t index) {
    return splitmix64(global ^ splitmix64(index));
}

inline uint64_t derive_seed(uint64_t global, std::string_view key) {
    uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
    for (unsigned char c : key) {
        h = (h ^ c) * 0x100000001b3ULL;
    }
    return derive_seed(global, h);
}

class Rng {
public:
    explicit Rng(uint64_t seed) : eng_(splitmix64(seed)) {}

    uint64_t next() { return eng_(); }

    // [0, 1)
    double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Inclusive range; lo <= hi.
    int uniform_int(int lo, int hi) {
        const uint64_t span = static_cast<uint64_t>(static_cast<int64_t>(hi) - lo) + 1;
        return lo + static_cast<int>(eng_() % span);
    }

    bool coin() { return (eng_() >> 63) != 0; }

    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) {
            u1 = uniform();
        }
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        spare_ = r * std::sin(2.0 * M_PI * u2);
        has_spare_ = true;
        return r * std::cos(2.0 * M_PI * u2);
    }

    template <typename It>
    void shuffle(It first, It last) {
        const auto n = last - first;
        for (auto i = n - 1; i > 0; --i) {
            const auto j = static_cast<decltype(i)>(eng_() % static_cast<uint64_t>(i + 1));
            std::swap(first[i], first[j]);
        }
    }

private:
    std::mt19937_64 eng_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace evigrid
