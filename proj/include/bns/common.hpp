#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace bns {

/// Base class for all library errors.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Bad user input: malformed config, invalid argument combinations.
class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};

/// Argument outside the mathematical domain of an operation.
class DomainError : public Error {
public:
    explicit DomainError(const std::string& msg) : Error(msg) {}
};

/// Value outside an attainable range; carries the range for diagnostics.
class RangeError : public Error {
public:
    RangeError(const std::string& msg, double lo, double hi)
        : Error(msg), lo(lo), hi(hi) {}
    double lo, hi;
};

/// A trajectory left the sane region (non-finite or astronomically large).
class DivergenceError : public Error {
public:
    DivergenceError(const std::string& msg, int step) : Error(msg), step(step) {}
    int step;
};

/// Adaptive step size underflowed; the problem is too stiff at the tolerance.
class StiffnessError : public Error {
public:
    explicit StiffnessError(const std::string& msg) : Error(msg) {}
};

/// A consistency/certification check failed.
class VerificationError : public Error {
public:
    explicit VerificationError(const std::string& msg) : Error(msg) {}
};

using Vec = std::vector<double>;

/// States beyond this magnitude are treated as divergent.
inline constexpr double kDivergenceLimit = 1e12;

/// Interior clamp for operations that need finite SNR or sigma > 0.
inline constexpr double kInteriorEps = 1e-6;

/// Tighter clamp used when evaluating fields next to the terminal time.
inline constexpr double kTimeEps = 1e-12;

inline bool all_finite(std::span<const double> v) {
    for (double x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

inline bool within_divergence_limit(std::span<const double> v) {
    for (double x : v)
        if (!std::isfinite(x) || std::fabs(x) > kDivergenceLimit) return false;
    return true;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

/// y += c * x
inline void axpy(double c, std::span<const double> x, std::span<double> y) {
    for (std::size_t i = 0; i < x.size(); ++i) y[i] += c * x[i];
}

inline void scale(std::span<double> x, double c) {
    for (double& v : x) v *= c;
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        m = std::max(m, std::fabs(a[i] - b[i]));
    return m;
}

inline double norm2(std::span<const double> v) {
    return std::sqrt(dot(v, v));
}

/// Mean squared error with the per-dimension convention: (1/d) * sum((a-b)^2).
inline double mean_squared_error(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size())
        throw DomainError("mean_squared_error: dimension mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        double e = a[i] - b[i];
        s += e * e;
    }
    return s / static_cast<double>(a.size());
}

/// Format a double with 17 significant digits (bit-exact round trip).
inline std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

/// SplitMix64: used to derive independent substreams from (seed, index).
inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index) {
    return splitmix64(seed ^ splitmix64(index + 0x12fa9e1ULL));
}

/// Deterministic uniform/normal generator with a pinned algorithm.
///
/// std::normal_distribution's output sequence is implementation-defined, so
/// reproducible outputs across toolchains use an explicit Box-Muller here.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(splitmix64(seed ^ 0x6a09e667f3bcc908ULL)) {}

    std::uint64_t next_u64() {
        state_ = splitmix64(state_ + 0x9e3779b97f4a7c15ULL);
        return state_;
    }

    /// Uniform in [0, 1).
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    /// Uniform in [lo, hi).
    double uniform(double lo, double hi) {
        return lo + (hi - lo) * uniform();
    }

    /// Uniform integer in [0, n).
    std::uint64_t uniform_below(std::uint64_t n) {
        return next_u64() % n;
    }

    /// Standard normal via Box-Muller.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        do { u1 = uniform(); } while (u1 <= 0.0);
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * M_PI * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    void normal_fill(std::span<double> out) {
        for (double& v : out) v = normal();
    }

    /// Deterministic Fisher-Yates shuffle of indices [0, n).
    void shuffle(std::vector<std::size_t>& idx) {
        for (std::size_t i = idx.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(uniform_below(i));
            std::swap(idx[i - 1], idx[j]);
        }
    }

private:
    std::uint64_t state_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

/// softplus(x) = log(1 + e^x), evaluated stably.
inline double softplus(double x) {
    if (x > 0.0) return x + std::log1p(std::exp(-x));
    return std::log1p(std::exp(x));
}

/// Inverse of softplus for y > 0.
inline double softplus_inverse(double y) {
    if (!(y > 0.0)) throw DomainError("softplus_inverse: argument must be positive");
    return std::log(std::expm1(y));
}

/// d softplus / dx = logistic(x).
inline double logistic(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    double e = std::exp(x);
    return e / (1.0 + e);
}

}  // namespace bns
