#pragma once

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace rigtune {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
using SpMat = Eigen::SparseMatrix<double>;
using IndexList = std::vector<int>;
using Mask = std::vector<char>;  // one flag per control or geometry row

struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct DimensionError : Error {
    using Error::Error;
};
struct NonFiniteError : Error {
    using Error::Error;
};
struct SingularMatrixError : Error {
    using Error::Error;
};
struct UnderdeterminedError : Error {
    using Error::Error;
};
struct TrackerError : Error {
    using Error::Error;
};
struct CapabilityError : Error {
    using Error::Error;
};
struct ConfigError : Error {
    using Error::Error;
};
struct MergeConflictError : Error {
    using Error::Error;
};

inline void check_dim(bool ok, const std::string& what) {
    if (!ok) throw DimensionError(what);
}

inline void check_finite(const Vec& x, const std::string& what) {
    if (!x.allFinite()) throw NonFiniteError(what + ": non-finite values");
}

// Deterministic RNG. Distributions are hand-rolled on top of mt19937_64 so
// that a given seed yields the same stream on every standard library.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    double uniform01() {
        // 53-bit mantissa draw in [0, 1).
        return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    // Marsaglia polar method.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u, v, s;
        do {
            u = 2.0 * uniform01() - 1.0;
            v = 2.0 * uniform01() - 1.0;
            s = u * u + v * v;
        } while (s >= 1.0 || s == 0.0);
        const double f = std::sqrt(-2.0 * std::log(s) / s);
        spare_ = v * f;
        have_spare_ = true;
        return u * f;
    }

    int uniform_int(int lo, int hi) {  // inclusive bounds
        const auto span = static_cast<std::uint64_t>(hi - lo + 1);
        return lo + static_cast<int>(gen_() % span);
    }

    int uniform_int(int n) { return uniform_int(0, n - 1); }  // [0, n)

    Vec normal_vec(int dim) {
        Vec x(dim);
        for (int i = 0; i < dim; ++i) x[i] = normal();
        return x;
    }

    Vec unit_vec(int dim) {
        Vec x = normal_vec(dim);
        double n = x.norm();
        while (n == 0.0) {
            x = normal_vec(dim);
            n = x.norm();
        }
        return x / n;
    }

    template <typename T>
    void shuffle(std::vector<T>& xs) {
        for (std::size_t i = xs.size(); i > 1; --i) {
            const auto j = static_cast<std::size_t>(gen_() % i);
            std::swap(xs[i - 1], xs[j]);
        }
    }

    std::uint64_t raw() { return gen_(); }

private:
    std::mt19937_64 gen_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

// Derives an independent stream for a sub-task (expression index, iteration,
// ...) from a base seed, so results do not depend on evaluation order.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b = 0) {
    std::uint64_t h = 0xcbf29ce484222325ull ^ base;
    const auto mix = [&h](std::uint64_t x) {
        for (int i = 0; i < 8; ++i) {
            h ^= (x >> (8 * i)) & 0xffull;
            h *= 0x100000001b3ull;
        }
    };
    mix(a);
    mix(b);
    return h;
}

inline std::uint64_t fnv1a(const void* data, std::size_t size) {
    const auto* p = static_cast<const unsigned char*>(data);
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (std::size_t i = 0; i < size; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::uint64_t fingerprint(const Vec& theta) {
    return fnv1a(theta.data(), sizeof(double) * static_cast<std::size_t>(theta.size()));
}

inline IndexList mask_indices(const Mask& mask) {
    IndexList idx;
    for (std::size_t i = 0; i < mask.size(); ++i)
        if (mask[i]) idx.push_back(static_cast<int>(i));
    return idx;
}

inline int mask_count(const Mask& mask) {
    int c = 0;
    for (char f : mask) c += (f != 0);
    return c;
}

inline std::string join_ints(const IndexList& xs, const char* sep = ", ") {
    std::string out;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        if (i) out += sep;
        out += std::to_string(xs[i]);
    }
    return out;
}

}  // namespace rigtune
