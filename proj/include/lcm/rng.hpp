#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace lcm {

// Deterministic random stream: xoshiro256++ seeded through splitmix64.
//
// The state is derived from (seed, stream label) only, so the same
// (seed, label, draw index) triple yields the same value on every platform
// at full 64-bit precision. Uniform and normal variates are generated
// in-repo (53-bit mantissa scaling and Box-Muller) because the standard
// library distributions are not bit-portable.
//
// Sub-streams for independent purposes ("shuffle", "init", fold workers)
// are derived with stream(label); derivation is pure, the parent stream
// is not advanced.
class Rng {
public:
    explicit Rng(std::uint64_t seed, std::string_view label = "");

    // Derived stream for a named purpose; child label is "parent/label".
    Rng stream(std::string_view label) const;
    Rng stream(std::string_view label, std::uint64_t index) const;

    std::uint64_t seed() const { return seed_; }
    const std::string& label() const { return label_; }

    std::uint64_t next_u64();

    // Unbiased draw in [0, bound) by rejection.
    std::uint64_t below(std::uint64_t bound);

    // [0, 1) with 53 random mantissa bits.
    double uniform();

    double normal(double mean = 0.0, double stddev = 1.0);
    std::vector<double> normal_vec(std::size_t n, double mean = 0.0, double stddev = 1.0);

    template <typename T>
    void shuffle(std::vector<T>& items) {
        for (std::size_t i = items.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(below(i));
            std::swap(items[i - 1], items[j]);
        }
    }

private:
    std::uint64_t seed_ = 0;
    std::string label_;
    std::uint64_t state_[4] = {0, 0, 0, 0};
    bool have_spare_ = false;
    double spare_ = 0.0;

    void init_state();
};

}  // namespace lcm
