#pragma once

#include <cstdint>
#include <vector>

namespace evax {

// Counter-based generator built on the SplitMix64 finalizer.
//
// Output k of a stream with key K is mix64(K + (k + 1) * 0x9E3779B97F4A7C15),
// where mix64 is the SplitMix64 output function
//   z ^= z >> 30; z *= 0xBF58476D1CE4E5B9;
//   z ^= z >> 27; z *= 0x94D049BB133111EB;
//   z ^= z >> 31.
// Any draw can be reproduced from (key, counter) alone, and child streams are
// derived with fork(), which hashes the child id into a new key. Three named
// streams (init, mask, augment) are derived from one run seed.
class CounterRng {
   public:
    enum class Stream : std::uint64_t { init = 1, mask = 2, augment = 3 };

    CounterRng() = default;
    explicit CounterRng(std::uint64_t seed) : key_(mix64(seed ^ 0x45564158'52414E44ull)) {}
    CounterRng(std::uint64_t seed, Stream stream)
        : CounterRng(CounterRng(seed).fork(static_cast<std::uint64_t>(stream))) {}

    static std::uint64_t mix64(std::uint64_t z) {
        z ^= z >> 30;
        z *= 0xBF58476D1CE4E5B9ull;
        z ^= z >> 27;
        z *= 0x94D049BB133111EBull;
        z ^= z >> 31;
        return z;
    }

    // Independent child stream; does not advance this stream.
    CounterRng fork(std::uint64_t id) const {
        CounterRng child;
        child.key_ = mix64(key_ ^ mix64(id + 0xD1B54A32D192ED03ull));
        return child;
    }

    std::uint64_t next_u64() {
        ++counter_;
        return mix64(key_ + counter_ * 0x9E3779B97F4A7C15ull);
    }

    // Uniform in [0, 1) with 24 bits of resolution (exact in f32).
    float uniform() { return static_cast<float>(next_u64() >> 40) * 0x1.0p-24f; }
    // Uniform in [0, 1) with 53 bits.
    double uniform_f64() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
    // Unbiased integer in [0, n).
    std::uint64_t below(std::uint64_t n);
    double normal();
    // Normal(0, std) truncated to [-2 std, 2 std] by rejection.
    float truncated_normal(float std);

    std::uint64_t key() const { return key_; }
    std::uint64_t counter() const { return counter_; }

   private:
    std::uint64_t key_ = 0;
    std::uint64_t counter_ = 0;
};

// Fisher-Yates permutation of 0..n-1 driven by a fresh stream for `seed`.
std::vector<std::int64_t> seeded_permutation(std::int64_t n, std::uint64_t seed);
std::vector<std::int64_t> permutation(std::int64_t n, CounterRng &rng);

}  // namespace evax
