#include "lcm/rng.hpp"

#include <cmath>

#include "lcm/errors.hpp"

namespace lcm {

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

std::uint64_t rotl(std::uint64_t x, int k) {
    return (x << k) | (x >> (64 - k));
}

}  // namespace

Rng::Rng(std::uint64_t seed, std::string_view label) : seed_(seed), label_(label) {
    init_state();
}

void Rng::init_state() {
    std::uint64_t sm = seed_ ^ fnv1a64(label_);
    state_[0] = splitmix64(sm);
    state_[1] = splitmix64(sm);
    state_[2] = splitmix64(sm);
    state_[3] = splitmix64(sm);
    // All-zero state would be a fixed point of xoshiro; splitmix makes this
    // astronomically unlikely but guard anyway.
    if ((state_[0] | state_[1] | state_[2] | state_[3]) == 0) {
        state_[0] = 1;
    }
    have_spare_ = false;
    spare_ = 0.0;
}

Rng Rng::stream(std::string_view label) const {
    std::string child = label_.empty() ? std::string(label) : label_ + "/" + std::string(label);
    return Rng(seed_, child);
}

Rng Rng::stream(std::string_view label, std::uint64_t index) const {
    return stream(std::string(label) + "." + std::to_string(index));
}

std::uint64_t Rng::next_u64() {
    // xoshiro256++ step (Blackman & Vigna).
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

std::uint64_t Rng::below(std::uint64_t bound) {
    if (bound == 0) {
        throw ConfigError("Rng::below: bound must be positive");
    }
    const std::uint64_t threshold = (0ULL - bound) % bound;
    for (;;) {
        std::uint64_t r = next_u64();
        if (r >= threshold) {
            return r % bound;
        }
    }
}

double Rng::uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::normal(double mean, double stddev) {
    if (have_spare_) {
        have_spare_ = false;
        return mean + stddev * spare_;
    }
    // Box-Muller; u clamped away from 0 so log() stays finite.
    double u = uniform();
    if (u <= 0.0) {
        u = 0x1.0p-53;
    }
    const double v = uniform();
    const double r = std::sqrt(-2.0 * std::log(u));
    const double theta = 2.0 * 3.141592653589793238462643383279502884 * v;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return mean + stddev * r * std::cos(theta);
}

std::vector<double> Rng::normal_vec(std::size_t n, double mean, double stddev) {
    std::vector<double> out(n);
    for (auto& x : out) {
        x = normal(mean, stddev);
    }
    return out;
}

}  // namespace lcm
