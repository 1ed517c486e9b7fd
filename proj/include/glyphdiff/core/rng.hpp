#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <random>

namespace glyphdiff {

// All randomness in the library is counter-based: every consumer derives a
// fresh engine from (seed, purpose, counters...) instead of sharing one
// stream. This makes training resume bit-exact and keeps independent
// subsystems (data sampling, noise, dropout) decoupled from each other.

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

inline uint64_t mix_key(std::initializer_list<uint64_t> parts) {
    uint64_t h = 0x6a09e667f3bcc909ull;
    for (uint64_t p : parts) h = splitmix64(h ^ splitmix64(p));
    return h;
}

// Stream tags so distinct uses of the same (seed, step, sample) never collide.
enum class RngUse : uint64_t {
    ParamInit = 1,
    CorpusGeometry,
    CorpusTransform,
    SplitShuffle,
    TripletDraw,
    Augment,
    ConditionDrop,
    Timestep,
    DiffusionNoise,
    SampleInit,
    SampleStepNoise,
    ScrBatch,
    RetrievalTrial,
    Gradcheck,
    EvalReference,
};

// std::mt19937_64 output is fully specified by the standard, so seeded draws
// are reproducible across platforms. Distributions are hand-rolled because
// std::normal_distribution is not.
class Rng {
  public:
    explicit Rng(uint64_t key) : eng_(key) {}
    Rng(uint64_t seed, RngUse use, std::initializer_list<uint64_t> counters)
        : eng_(make_key(seed, use, counters)) {}

    static uint64_t make_key(uint64_t seed, RngUse use, std::initializer_list<uint64_t> counters) {
        uint64_t h = mix_key({seed, static_cast<uint64_t>(use)});
        for (uint64_t c : counters) h = splitmix64(h ^ splitmix64(c));
        return h;
    }

    uint64_t bits() { return eng_(); }

    // [0, 1) with 53 random bits
    double unit() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * unit(); }

    // Box-Muller; consumes two uniforms per draw, no cached spare
    double normal() {
        double u1 = 1.0 - unit();  // (0, 1]
        double u2 = unit();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
    }

    // unbiased integer in [0, n) via Lemire rejection
    uint64_t integer(uint64_t n) {
        if (n == 0) return 0;
        while (true) {
            uint64_t x = eng_();
            __uint128_t m = static_cast<__uint128_t>(x) * n;
            uint64_t lo = static_cast<uint64_t>(m);
            if (lo >= n || lo >= (-n) % n) return static_cast<uint64_t>(m >> 64);
        }
    }

    int uniform_int(int lo, int hi) {  // inclusive range
        return lo + static_cast<int>(integer(static_cast<uint64_t>(hi - lo + 1)));
    }

    bool bernoulli(double p) { return unit() < p; }

  private:
    std::mt19937_64 eng_;
};

}  // namespace glyphdiff
