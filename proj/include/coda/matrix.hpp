#pragma once

// Dense row-major matrices over 64-bit reals, plus the seeded RNG shared by
// the rest of the library. Everything here is shape-checked and pure: inputs
// are never mutated and results are freshly allocated.

#include <cmath>
#include <cstdint>
#include <algorithm>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace coda {

class dimension_error : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class capacity_error : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class input_error : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class state_error : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

// Multiply-accumulate counter for FLOPs verification. Counts contractions
// performed by matmul and the scalar-op budget spent inside soft top-k
// iterations; elementwise work (residual adds, normalization, softmax) is
// out of scope by definition.
struct FlopCounter {
    std::uint64_t multiply_adds = 0;
    std::uint64_t topk_scalar_ops = 0;
    bool enabled = false;

    void reset() { multiply_adds = 0; topk_scalar_ops = 0; }
};

inline FlopCounter& flop_counter() {
    thread_local FlopCounter counter;
    return counter;
}

// RAII enable/disable around an instrumented region.
class FlopScope {
public:
    FlopScope() {
        flop_counter().reset();
        flop_counter().enabled = true;
    }
    ~FlopScope() { flop_counter().enabled = false; }
    FlopScope(const FlopScope&) = delete;
    FlopScope& operator=(const FlopScope&) = delete;

    std::uint64_t multiply_adds() const { return flop_counter().multiply_adds; }
    std::uint64_t topk_scalar_ops() const { return flop_counter().topk_scalar_ops; }
};

struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;  // row-major, rows*cols entries

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, double fill = 0.0)
        : rows(r), cols(c), data(r * c, fill) {}

    static Matrix identity(std::size_t n) {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }

    double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
    double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

    std::span<double> row(std::size_t i) { return {data.data() + i * cols, cols}; }
    std::span<const double> row(std::size_t i) const { return {data.data() + i * cols, cols}; }

    bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }

    std::string shape_str() const {
        return std::to_string(rows) + "x" + std::to_string(cols);
    }
};

inline void check_finite(const Matrix& m, const char* what) {
    for (double v : m.data) {
        if (!std::isfinite(v)) {
            throw input_error(std::string(what) + ": non-finite entry");
        }
    }
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols != b.rows) {
        throw dimension_error("matmul: inner dimensions differ, " + a.shape_str() +
                              " * " + b.shape_str());
    }
    Matrix out(a.rows, b.cols);
    // ikj order keeps both b and out accesses contiguous
    for (std::size_t i = 0; i < a.rows; ++i) {
        const double* arow = a.data.data() + i * a.cols;
        double* orow = out.data.data() + i * b.cols;
        for (std::size_t k = 0; k < a.cols; ++k) {
            const double aik = arow[k];
            const double* brow = b.data.data() + k * b.cols;
            for (std::size_t j = 0; j < b.cols; ++j) {
                orow[j] += aik * brow[j];
            }
        }
    }
    if (flop_counter().enabled) {
        flop_counter().multiply_adds +=
            static_cast<std::uint64_t>(a.rows) * a.cols * b.cols;
    }
    return out;
}

// a * b^T without materializing the transpose.
inline Matrix matmul_transposed(const Matrix& a, const Matrix& b) {
    if (a.cols != b.cols) {
        throw dimension_error("matmul_transposed: inner dimensions differ, " +
                              a.shape_str() + " * " + b.shape_str() + "^T");
    }
    Matrix out(a.rows, b.rows);
    for (std::size_t i = 0; i < a.rows; ++i) {
        const double* arow = a.data.data() + i * a.cols;
        for (std::size_t j = 0; j < b.rows; ++j) {
            const double* brow = b.data.data() + j * b.cols;
            double acc = 0.0;
            for (std::size_t k = 0; k < a.cols; ++k) acc += arow[k] * brow[k];
            out(i, j) = acc;
        }
    }
    if (flop_counter().enabled) {
        flop_counter().multiply_adds +=
            static_cast<std::uint64_t>(a.rows) * a.cols * b.rows;
    }
    return out;
}

// a^T * b without materializing the transpose.
inline Matrix transposed_matmul(const Matrix& a, const Matrix& b) {
    if (a.rows != b.rows) {
        throw dimension_error("transposed_matmul: inner dimensions differ, " +
                              a.shape_str() + "^T * " + b.shape_str());
    }
    Matrix out(a.cols, b.cols);
    for (std::size_t k = 0; k < a.rows; ++k) {
        const double* arow = a.data.data() + k * a.cols;
        const double* brow = b.data.data() + k * b.cols;
        for (std::size_t i = 0; i < a.cols; ++i) {
            const double aki = arow[i];
            double* orow = out.data.data() + i * b.cols;
            for (std::size_t j = 0; j < b.cols; ++j) orow[j] += aki * brow[j];
        }
    }
    if (flop_counter().enabled) {
        flop_counter().multiply_adds +=
            static_cast<std::uint64_t>(a.rows) * a.cols * b.cols;
    }
    return out;
}

inline Matrix transpose(const Matrix& m) {
    Matrix out(m.cols, m.rows);
    for (std::size_t i = 0; i < m.rows; ++i)
        for (std::size_t j = 0; j < m.cols; ++j) out(j, i) = m(i, j);
    return out;
}

inline Matrix add(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) {
        throw dimension_error("add: shapes differ, " + a.shape_str() + " vs " +
                              b.shape_str());
    }
    Matrix out = a;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += b.data[i];
    return out;
}

inline void add_inplace(Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) {
        throw dimension_error("add_inplace: shapes differ, " + a.shape_str() +
                              " vs " + b.shape_str());
    }
    for (std::size_t i = 0; i < a.data.size(); ++i) a.data[i] += b.data[i];
}

inline Matrix subtract(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) {
        throw dimension_error("subtract: shapes differ, " + a.shape_str() + " vs " +
                              b.shape_str());
    }
    Matrix out = a;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] -= b.data[i];
    return out;
}

inline Matrix scale(const Matrix& a, double c) {
    Matrix out = a;
    for (double& v : out.data) v *= c;
    return out;
}

inline Matrix hadamard(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) {
        throw dimension_error("hadamard: shapes differ, " + a.shape_str() + " vs " +
                              b.shape_str());
    }
    Matrix out = a;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= b.data[i];
    return out;
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) {
        throw dimension_error("max_abs_diff: shapes differ, " + a.shape_str() +
                              " vs " + b.shape_str());
    }
    double worst = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i)
        worst = std::max(worst, std::abs(a.data[i] - b.data[i]));
    return worst;
}

// Row-wise layer normalization: each row is centered and scaled to unit
// variance (population variance + eps), then gain/bias are applied.
inline Matrix layer_norm(const Matrix& x, std::span<const double> gain,
                         std::span<const double> bias, double eps = 1e-6) {
    if (gain.size() != x.cols || bias.size() != x.cols) {
        throw dimension_error("layer_norm: gain/bias length " +
                              std::to_string(gain.size()) + "/" +
                              std::to_string(bias.size()) + " vs cols " +
                              std::to_string(x.cols));
    }
    if (eps <= 0.0) throw input_error("layer_norm: eps must be positive");
    Matrix out(x.rows, x.cols);
    for (std::size_t i = 0; i < x.rows; ++i) {
        auto r = x.row(i);
        double mean = 0.0;
        for (double v : r) mean += v;
        mean /= static_cast<double>(x.cols);
        double var = 0.0;
        for (double v : r) var += (v - mean) * (v - mean);
        var /= static_cast<double>(x.cols);
        const double inv_std = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < x.cols; ++j) {
            out(i, j) = (r[j] - mean) * inv_std * gain[j] + bias[j];
        }
    }
    return out;
}

// Numerically stable row softmax (max-subtraction).
inline Matrix row_softmax(const Matrix& x) {
    Matrix out(x.rows, x.cols);
    for (std::size_t i = 0; i < x.rows; ++i) {
        auto r = x.row(i);
        const double m = *std::max_element(r.begin(), r.end());
        double denom = 0.0;
        for (std::size_t j = 0; j < x.cols; ++j) {
            out(i, j) = std::exp(r[j] - m);
            denom += out(i, j);
        }
        for (std::size_t j = 0; j < x.cols; ++j) out(i, j) /= denom;
    }
    return out;
}

// Counter-based generator: splitmix64 over seed+counter. The sequence is a
// pure function of (seed, draw index), so equal seeds replay identically.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : seed_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = seed_ + (++counter_) * 0x9E3779B97F4A7C15ull;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    // uniform in [0, 1)
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    std::uint64_t uniform_index(std::uint64_t n) { return next_u64() % n; }

    // standard normal via Box-Muller; the second deviate is cached
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    double normal(double mean, double std) { return mean + std * normal(); }

    Matrix gaussian_matrix(std::size_t rows, std::size_t cols, double std) {
        Matrix m(rows, cols);
        for (double& v : m.data) v = normal(0.0, std);
        return m;
    }

    std::uint64_t seed() const { return seed_; }

private:
    std::uint64_t seed_;
    std::uint64_t counter_ = 0;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace coda
