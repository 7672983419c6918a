#include "radapter/rng.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace radapter {

namespace {

std::uint64_t splitmix64(std::uint64_t& x) {
    x += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

}  // namespace

SeededRng::SeededRng(std::uint64_t seed) : seed_(seed) {
    std::uint64_t sm = seed;
    for (auto& word : state_) word = splitmix64(sm);
}

SeededRng::SeededRng(std::uint64_t seed, std::string_view stream_name)
    : SeededRng(mix(seed, fnv1a64(stream_name))) {
    seed_ = seed;
}

std::uint64_t SeededRng::mix(std::uint64_t a, std::uint64_t b) {
    std::uint64_t x = a ^ rotl(b, 32);
    return splitmix64(x);
}

// xoshiro256++
std::uint64_t SeededRng::next_u64() {
    const std::uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
}

double SeededRng::next_double() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double SeededRng::next_gaussian() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    // u1 in (0, 1] so the log stays finite.
    const double u1 = 1.0 - next_double();
    const double u2 = next_double();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
}

bool SeededRng::bernoulli(double p_true) { return next_double() < p_true; }

std::uint64_t SeededRng::next_below(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("SeededRng::next_below: n must be nonzero");
    return next_u64() % n;
}

SeededRng SeededRng::split() { return SeededRng(next_u64()); }

}  // namespace radapter
