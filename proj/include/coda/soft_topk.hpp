#pragma once

// Differentiable soft top-k selection. The operator solves
//
//     maximize   s^T lambda + eps * H(lambda)
//     subject to sum(lambda) = k,  0 <= lambda[i] <= 1
//
// through its dual: lambda = exp((s + a + b) / eps) with a scalar multiplier
// a for the sum constraint and b <= 0 for the upper bounds. Iterations
// alternate an a-solve with the closed-form b-update b = min(-s - a, 0),
// annealing eps from eps0 down to eps_target (eps-scaling). The a-solve
// treats coordinates saturated by the current b as exactly 1, which makes
// the pair (a, b) consistent at a fixed point and reaches the dual optimum
// within a handful of iterations; the first iteration (b = 0) reduces to
// the plain logsumexp step.
//
// oracle_bisection solves the same problem by monotone bisection on the
// scalar a and is kept free of any code shared with the iterative path.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <algorithm>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "coda/matrix.hpp"

namespace coda {

struct EpsSchedule {
    double eps0 = 4.0;
    double eps_target = 0.03;
    double beta = 0.7;
    std::size_t iterations = 20;

    // Appendix-style presets: text/vision vs speech regime.
    static EpsSchedule text_default() { return {4.0, 0.03, 0.7, 20}; }
    static EpsSchedule speech_default() { return {4.0, 1.0, 0.85, 20}; }

    void validate() const {
        if (!(eps_target > 0.0) || !(eps0 >= eps_target)) {
            throw input_error("EpsSchedule: need eps0 >= eps_target > 0");
        }
        if (!(beta > 0.0 && beta < 1.0)) {
            throw input_error("EpsSchedule: beta must lie in (0,1)");
        }
        if (iterations < 1) {
            throw input_error("EpsSchedule: need at least one iteration");
        }
    }
};

struct SoftTopkResult {
    std::vector<double> lambda;
    double a = 0.0;
    std::vector<double> b;
    double constraint_residual = 0.0;
    std::size_t iterations_run = 0;
};

namespace detail {

// Order-independent sum: accumulating in sorted order makes the result a
// function of the multiset of addends, so permuting the input scores
// permutes the output bit-exactly.
inline double stable_sum(std::vector<double>& terms) {
    std::sort(terms.begin(), terms.end());
    double acc = 0.0;
    for (double t : terms) acc += t;
    return acc;
}

struct IterationCache {
    double eps = 0.0;
    double a = 0.0;
    std::vector<std::uint8_t> in_pattern;  // coords treated as saturated
    std::vector<std::uint8_t> b_active;    // coords where b = -s - a < 0
};

struct UnrolledForward {
    std::vector<IterationCache> steps;
    std::vector<double> lambda;
    std::vector<double> b;
    double a = 0.0;
    double eps_final = 0.0;
    bool short_circuit = false;
};

inline UnrolledForward soft_topk_unrolled(const std::vector<double>& s,
                                          std::size_t k,
                                          const EpsSchedule& sched) {
    sched.validate();
    if (k < 1) throw capacity_error("soft_topk: k must be at least 1");
    const std::size_t n = s.size();
    if (n < 1) throw input_error("soft_topk: empty score vector");
    for (double v : s) {
        if (!std::isfinite(v)) throw input_error("soft_topk: non-finite score");
    }

    UnrolledForward fwd;
    if (k >= n) {
        // Constraint set pins lambda at the all-ones vector; pick duals so
        // that lambda = exp((s + a + b)/eps) holds exactly.
        fwd.short_circuit = true;
        fwd.eps_final = sched.eps_target;
        fwd.a = -*std::min_element(s.begin(), s.end());
        fwd.b.resize(n);
        fwd.lambda.assign(n, 1.0);
        for (std::size_t i = 0; i < n; ++i) {
            fwd.b[i] = std::min(-s[i] - fwd.a, 0.0);
            fwd.lambda[i] = std::exp((s[i] + fwd.b[i] + fwd.a) / fwd.eps_final);
        }
        return fwd;
    }

    std::vector<double> b(n, 0.0);
    double a = 0.0;
    double eps = sched.eps0;
    std::vector<double> terms;
    std::vector<std::size_t> sat_idx;
    fwd.steps.reserve(sched.iterations);

    for (std::size_t t = 0; t < sched.iterations; ++t) {
        eps = std::max(sched.beta * eps, sched.eps_target);
        IterationCache cache;
        cache.eps = eps;
        cache.in_pattern.assign(n, 0);

        sat_idx.clear();
        for (std::size_t i = 0; i < n; ++i) {
            if (b[i] < 0.0) sat_idx.push_back(i);
        }
        if (sat_idx.size() >= k) {
            // Over-saturated transient: the optimum saturates at most k-1
            // coordinates for finite scores, so keep the k-1 highest.
            std::stable_sort(sat_idx.begin(), sat_idx.end(),
                             [&](std::size_t x, std::size_t y) { return s[x] > s[y]; });
            sat_idx.resize(k - 1);
        }
        for (std::size_t i : sat_idx) cache.in_pattern[i] = 1;
        const std::size_t m = sat_idx.size();

        // a-solve with pattern coords held at 1:
        //   sum_{i not in pattern} exp((s_i + a)/eps) = k - m
        double cmax = -std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < n; ++i) {
            if (!cache.in_pattern[i]) cmax = std::max(cmax, s[i] / eps);
        }
        terms.clear();
        for (std::size_t i = 0; i < n; ++i) {
            if (!cache.in_pattern[i]) terms.push_back(std::exp(s[i] / eps - cmax));
        }
        const double lse = cmax + std::log(stable_sum(terms));
        a = eps * (std::log(static_cast<double>(k - m)) - lse);
        cache.a = a;

        cache.b_active.assign(n, 0);
        for (std::size_t i = 0; i < n; ++i) {
            const double candidate = -s[i] - a;
            cache.b_active[i] = candidate < 0.0 ? 1 : 0;
            b[i] = std::min(candidate, 0.0);
        }
        fwd.steps.push_back(std::move(cache));

        if (flop_counter().enabled) {
            flop_counter().topk_scalar_ops += 6ull * n;
        }
    }

    fwd.eps_final = eps;
    fwd.a = a;
    fwd.b = std::move(b);
    fwd.lambda.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        fwd.lambda[i] = std::exp((s[i] + fwd.b[i] + fwd.a) / fwd.eps_final);
    }
    return fwd;
}

}  // namespace detail

inline SoftTopkResult soft_topk(const std::vector<double>& s, std::size_t k,
                                const EpsSchedule& sched) {
    auto fwd = detail::soft_topk_unrolled(s, k, sched);
    SoftTopkResult out;
    out.lambda = std::move(fwd.lambda);
    out.a = fwd.a;
    out.b = std::move(fwd.b);
    out.iterations_run = fwd.short_circuit ? 0 : sched.iterations;
    if (fwd.short_circuit) {
        out.constraint_residual = 0.0;
    } else {
        std::vector<double> terms(out.lambda);
        out.constraint_residual =
            std::abs(detail::stable_sum(terms) - static_cast<double>(k));
    }
    return out;
}

// Reverse-mode gradient of grad_lambda^T lambda with respect to s, through
// the exact unrolled forward iterations. Saturation patterns are piecewise
// constant in s, so only the smooth edges of each iteration carry gradient.
inline std::vector<double> soft_topk_backward(const std::vector<double>& s,
                                              std::size_t k,
                                              const EpsSchedule& sched,
                                              const std::vector<double>& grad_lambda) {
    if (grad_lambda.size() != s.size()) {
        throw dimension_error("soft_topk_backward: cotangent length " +
                              std::to_string(grad_lambda.size()) + " vs scores " +
                              std::to_string(s.size()));
    }
    auto fwd = detail::soft_topk_unrolled(s, k, sched);
    const std::size_t n = s.size();
    std::vector<double> ds(n, 0.0);
    if (fwd.short_circuit) return ds;  // lambda pinned at ones

    // lambda = exp((s + b_T + a_T)/eps_T)
    std::vector<double> db(n, 0.0);
    double da = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double dw = grad_lambda[i] * fwd.lambda[i] / fwd.eps_final;
        ds[i] += dw;
        db[i] = dw;
        da += dw;
    }

    std::vector<double> softmax(n, 0.0);
    for (std::size_t t = fwd.steps.size(); t-- > 0;) {
        const auto& cache = fwd.steps[t];
        // b_t = min(-s - a_t, 0)
        for (std::size_t i = 0; i < n; ++i) {
            if (cache.b_active[i]) {
                ds[i] -= db[i];
                da -= db[i];
            }
        }
        // a_t = eps (ln(k - m) - LSE_{i not in pattern}(s_i/eps))
        double cmax = -std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < n; ++i) {
            if (!cache.in_pattern[i]) cmax = std::max(cmax, s[i] / cache.eps);
        }
        double denom = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            softmax[i] = cache.in_pattern[i] ? 0.0 : std::exp(s[i] / cache.eps - cmax);
            denom += softmax[i];
        }
        for (std::size_t i = 0; i < n; ++i) {
            ds[i] -= da * softmax[i] / denom;
        }
        // earlier iterations feed a_t only through the pattern: zero grad
        std::fill(db.begin(), db.end(), 0.0);
        da = 0.0;
    }
    return ds;
}

// Independent verification oracle. With b eliminated via the KKT system,
// lambda(a) = min(1, exp((s + a)/eps)) is monotone increasing in a; the sum
// constraint has a unique root found by bisection.
inline SoftTopkResult oracle_bisection(const std::vector<double>& s, std::size_t k,
                                       double eps) {
    const std::size_t n = s.size();
    if (k < 1) throw capacity_error("oracle_bisection: k must be at least 1");
    if (k > n) {
        throw capacity_error("oracle_bisection: k = " + std::to_string(k) +
                             " exceeds n = " + std::to_string(n));
    }
    if (!(eps > 0.0)) throw input_error("oracle_bisection: eps must be positive");
    for (double v : s) {
        if (!std::isfinite(v)) throw input_error("oracle_bisection: non-finite score");
    }

    const double smin = *std::min_element(s.begin(), s.end());
    const double smax = *std::max_element(s.begin(), s.end());
    auto constraint_sum = [&](double a) {
        double total = 0.0;
        for (double v : s) {
            const double e = (v + a) / eps;
            total += e >= 0.0 ? 1.0 : std::exp(e);
        }
        return total;
    };

    double lo = -smax + eps * std::log(static_cast<double>(k) / n) - 1.0;
    double hi = -smin + 1.0;
    double a = 0.5 * (lo + hi);
    for (int iter = 0; iter < 500; ++iter) {
        a = 0.5 * (lo + hi);
        const double g = constraint_sum(a);
        if (std::abs(g - static_cast<double>(k)) < 1e-12) break;
        if (g < static_cast<double>(k)) {
            lo = a;
        } else {
            hi = a;
        }
        if (hi - lo < 1e-16 * std::max(1.0, std::abs(lo))) break;
    }

    SoftTopkResult out;
    out.a = a;
    out.b.resize(n);
    out.lambda.resize(n);
    out.iterations_run = 0;
    for (std::size_t i = 0; i < n; ++i) {
        out.b[i] = std::min(-s[i] - a, 0.0);
        const double e = (s[i] + out.b[i] + a) / eps;
        out.lambda[i] = std::exp(e);
    }
    out.constraint_residual =
        std::abs(constraint_sum(a) - static_cast<double>(k));
    return out;
}

// Binary mask with ones at the k largest entries; ties keep the lowest index.
inline std::vector<std::uint8_t> hard_topk_mask(const std::vector<double>& v,
                                                std::size_t k) {
    const std::size_t n = v.size();
    if (k < 1 || k > n) {
        throw capacity_error("hard_topk_mask: k = " + std::to_string(k) +
                             " out of range for n = " + std::to_string(n));
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return v[a] > v[b]; });
    std::vector<std::uint8_t> mask(n, 0);
    for (std::size_t i = 0; i < k; ++i) mask[order[i]] = 1;
    return mask;
}

}  // namespace coda
