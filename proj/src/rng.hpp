#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

namespace headpatch {

// Deterministic PRNG used everywhere randomness is needed. All sampling
// algorithms are hand-rolled so that a given seed produces the same stream
// on every platform (std:: distributions are implementation-defined).
class Rng {
public:
    explicit Rng(std::uint64_t seed);

    std::uint64_t next_u64();

    // Uniform double in [0, 1).
    double uniform();

    // Standard normal via Box-Muller. Consumes two uniforms per pair.
    double normal();

    // Uniform integer in [0, n). n must be > 0.
    std::size_t below(std::size_t n);

    // Fisher-Yates.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        if (v.size() < 2) return;
        for (std::size_t i = v.size() - 1; i > 0; --i) {
            std::size_t j = below(i + 1);
            std::swap(v[i], v[j]);
        }
    }

private:
    std::uint64_t state_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

// Derives an independent stream seed from a base seed and a stream index.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

// FNV-1a, used for per-example attack seeds and config fingerprints.
std::uint64_t fnv1a(std::string_view bytes);
std::uint64_t fnv1a_accumulate(std::uint64_t state, std::string_view bytes);

}  // namespace headpatch
