#include "evax/rng.hpp"

#include <cmath>
#include <numeric>

namespace evax {

std::uint64_t CounterRng::below(std::uint64_t n) {
    if (n <= 1) return 0;
    // Rejection on the top of the range keeps every residue equally likely.
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    for (;;) {
        std::uint64_t x = next_u64();
        if (x < limit) return x % n;
    }
}

double CounterRng::normal() {
    // Box-Muller, one value per call.
    double u1 = uniform_f64();
    double u2 = uniform_f64();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

float CounterRng::truncated_normal(float std) {
    for (;;) {
        double z = normal();
        if (z >= -2.0 && z <= 2.0) return static_cast<float>(z * std);
    }
}

std::vector<std::int64_t> permutation(std::int64_t n, CounterRng &rng) {
    std::vector<std::int64_t> p(static_cast<std::size_t>(std::max<std::int64_t>(n, 0)));
    std::iota(p.begin(), p.end(), 0);
    for (std::int64_t i = n - 1; i > 0; --i) {
        auto j = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(i + 1)));
        std::swap(p[i], p[j]);
    }
    return p;
}

std::vector<std::int64_t> seeded_permutation(std::int64_t n, std::uint64_t seed) {
    CounterRng rng(seed);
    return permutation(n, rng);
}

}  // namespace evax
