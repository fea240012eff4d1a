#include "rng.hpp"

#include <cmath>

#include "error.hpp"

namespace headpatch {

namespace {

// splitmix64; also used to scramble the raw seed so that small consecutive
// seeds do not produce correlated streams.
std::uint64_t splitmix64(std::uint64_t& x) {
    x += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

constexpr double kTwoPi = 6.283185307179586476925286766559;

}  // namespace

Rng::Rng(std::uint64_t seed) : state_(seed) {
    // Warm up so that seed=0 and seed=1 diverge immediately.
    (void)splitmix64(state_);
}

std::uint64_t Rng::next_u64() {
    return splitmix64(state_);
}

double Rng::uniform() {
    // 53 random bits -> [0, 1).
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::normal() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    spare_ = r * std::sin(kTwoPi * u2);
    has_spare_ = true;
    return r * std::cos(kTwoPi * u2);
}

std::size_t Rng::below(std::size_t n) {
    if (n == 0) fail(ErrorCode::Argument, "Rng::below requires n > 0");
    // Modulo bias is negligible at desk scale and keeps the stream portable.
    return static_cast<std::size_t>(next_u64() % n);
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t x = seed ^ (0x9e3779b97f4a7c15ULL + (stream << 1));
    return splitmix64(x);
}

std::uint64_t fnv1a(std::string_view bytes) {
    return fnv1a_accumulate(0xcbf29ce484222325ULL, bytes);
}

std::uint64_t fnv1a_accumulate(std::uint64_t state, std::string_view bytes) {
    for (unsigned char c : bytes) {
        state ^= c;
        state *= 0x100000001b3ULL;
    }
    return state;
}

}  // namespace headpatch
