#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

namespace shiftlab {

inline std::uint64_t splitmix64(std::uint64_t& state) {
    state += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// Deterministic random stream. The engine is mt19937_64 (bit-exact by
// standard) and every conversion below is a fixed algorithm, so sequences
// are identical across platforms and standard libraries. Distribution
// classes from <random> are deliberately not used: their output is
// implementation-defined.
class RngStream {
public:
    explicit RngStream(std::uint64_t seed) : engine_(seed) {}

    // Independent stream named by (seed, tag, index).
    static RngStream derive(std::uint64_t seed, std::string_view tag, std::uint64_t index = 0) {
        std::uint64_t h = 0xcbf29ce484222325ULL ^ seed;
        for (char ch : tag) {
            h ^= static_cast<unsigned char>(ch);
            h *= 0x100000001b3ULL;
        }
        std::uint64_t s = h + (index + 1) * 0x632be59bd9b4e019ULL;
        return RngStream(splitmix64(s));
    }

    std::uint64_t next_u64() { return engine_(); }

    // [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // {0, ..., n-1}; multiply-shift mapping, one draw per call.
    std::uint64_t uniform_int(std::uint64_t n) {
        using u128 = unsigned __int128;
        return static_cast<std::uint64_t>((static_cast<u128>(next_u64()) * n) >> 64);
    }

    // Box-Muller; the second value of each pair is cached.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double theta = 2.0 * kPi * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

private:
    static constexpr double kPi = 3.14159265358979323846;
    std::mt19937_64 engine_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace shiftlab
