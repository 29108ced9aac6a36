#pragma once

// Shared numeric aliases, error helpers and the deterministic random source
// used across the library. All stochastic components draw from comit::Rng so
// that runs are reproducible for a fixed seed independent of the platform's
// std::distribution implementations.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>

namespace comit {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using MatF = Mat<float>;
using MatD = Mat<double>;

struct Vec2 {
    double x = 0.0;
    double y = 0.0;

    friend Vec2 operator+(Vec2 a, Vec2 b) { return {a.x + b.x, a.y + b.y}; }
    friend Vec2 operator-(Vec2 a, Vec2 b) { return {a.x - b.x, a.y - b.y}; }
    friend Vec2 operator-(Vec2 a) { return {-a.x, -a.y}; }
    friend bool operator==(Vec2 a, Vec2 b) { return a.x == b.x && a.y == b.y; }
};

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

[[noreturn]] inline void fail(const std::string& msg) { throw std::runtime_error(msg); }

// FNV-1a, used to derive per-module seeds from one root seed.
inline uint64_t fnv1a64(std::string_view s) {
    uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

inline uint64_t derive_seed(uint64_t root, std::string_view tag) {
    uint64_t h = fnv1a64(tag);
    // splitmix64 finalizer over the combination
    uint64_t z = root ^ (h + 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

// Deterministic random source with hand-rolled distributions (std::*_distribution
// output is implementation-defined, which would break frozen test values).
class Rng {
public:
    explicit Rng(uint64_t seed = 0) : gen_(seed) {}

    uint64_t next_u64() { return gen_(); }

    // uniform in [0, 1)
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    // standard normal via Box-Muller, pair cached
    double normal() {
        if (has_cached_) {
            has_cached_ = false;
            return cached_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * M_PI * u2;
        cached_ = r * std::sin(a);
        has_cached_ = true;
        return r * std::cos(a);
    }

    bool bernoulli(double p) { return uniform() < p; }

    // uniform integer in [lo, hi] inclusive
    int uniform_int(int lo, int hi) {
        require(lo <= hi, "uniform_int: empty range");
        uint64_t span = static_cast<uint64_t>(hi) - static_cast<uint64_t>(lo) + 1;
        // rejection sampling to avoid modulo bias
        uint64_t limit = std::numeric_limits<uint64_t>::max() - std::numeric_limits<uint64_t>::max() % span;
        uint64_t v = gen_();
        while (v >= limit) v = gen_();
        return lo + static_cast<int>(v % span);
    }

    // exact Poisson sampler; large rates are split recursively so the
    // multiplication method never underflows
    int poisson(double lambda) {
        require(lambda >= 0.0 && std::isfinite(lambda), "poisson: bad rate");
        if (lambda == 0.0) return 0;
        if (lambda > 30.0) {
            double half = lambda / 2.0;
            return poisson(half) + poisson(lambda - half);
        }
        double limit = std::exp(-lambda);
        double prod = 1.0;
        int k = -1;
        do {
            prod *= uniform();
            ++k;
        } while (prod > limit);
        return k;
    }

    std::string save_state() const {
        std::ostringstream os;
        os << gen_ << ' ' << (has_cached_ ? 1 : 0) << ' ' << cached_;
        return os.str();
    }

    void load_state(const std::string& s) {
        std::istringstream is(s);
        int flag = 0;
        is >> gen_ >> flag >> cached_;
        if (!is) fail("Rng::load_state: malformed state string");
        has_cached_ = flag != 0;
    }

private:
    std::mt19937_64 gen_;
    bool has_cached_ = false;
    double cached_ = 0.0;
};

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace comit
