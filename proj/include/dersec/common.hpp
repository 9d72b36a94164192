#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace dersec {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed case/trace/scenario input.
class ParseError : public Error {
public:
    using Error::Error;
};

/// A numerical routine failed to converge or hit its iteration cap.
class SolveError : public Error {
public:
    using Error::Error;
};

/// A requested operating point or command cannot be realized.
class InfeasibleError : public Error {
public:
    using Error::Error;
};

/// Deterministic random stream. All randomness in the project goes through
/// this wrapper so that a fixed seed reproduces a run bit for bit; the
/// uniform mapping is pinned here instead of relying on the standard
/// library's unspecified distribution algorithms.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    std::uint64_t next_u64() { return gen_(); }

    /// Uniform on [0, 1) with 53-bit resolution.
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    /// Uniform on [lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Standard normal via Box-Muller (no cached spare, two draws per call).
    double gaussian(double mean = 0.0, double stddev = 1.0) {
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        return mean + stddev * r * std::cos(6.283185307179586 * u2);
    }

private:
    std::mt19937_64 gen_;
};

inline constexpr double kTwoPi = 6.283185307179586476925286766559;

inline double hz_to_rad(double hz) { return hz * kTwoPi; }
inline double rad_to_hz(double rad) { return rad / kTwoPi; }

} // namespace dersec
