#pragma once

// Token router: turns normalized token representations into a soft weight
// mask m and a one-hot selection matrix P. The soft top-k variant is the
// learned router; sigmoid gating and first-k truncation are the ablation
// baselines. Gather/scatter realize the P and P^T products as index moves.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "coda/matrix.hpp"
#include "coda/soft_topk.hpp"

namespace coda {

enum class RouterVariant { soft_topk, sigmoid_gate, truncation };

inline std::string to_string(RouterVariant v) {
    switch (v) {
        case RouterVariant::soft_topk: return "soft_topk";
        case RouterVariant::sigmoid_gate: return "sigmoid_gate";
        case RouterVariant::truncation: return "truncation";
    }
    return "?";
}

inline RouterVariant router_variant_from_string(const std::string& name) {
    if (name == "soft_topk") return RouterVariant::soft_topk;
    if (name == "sigmoid_gate") return RouterVariant::sigmoid_gate;
    if (name == "truncation") return RouterVariant::truncation;
    throw input_error("unknown router variant: " + name);
}

struct RouterParams {
    std::vector<double> w;  // score projection, length d
};

struct SelectionResult {
    std::vector<double> m;                  // n, zero off the selected set
    std::vector<double> lambda;             // n, soft selection scores
    std::vector<std::size_t> selected_indices;  // k, ascending
    std::vector<double> scores;             // n, raw s = x_norm . w
    std::size_t n = 0;

    std::size_t k() const { return selected_indices.size(); }

    // one-hot rows ordered by ascending token index
    Matrix selection_matrix() const {
        Matrix p(selected_indices.size(), n);
        for (std::size_t i = 0; i < selected_indices.size(); ++i) {
            p(i, selected_indices[i]) = 1.0;
        }
        return p;
    }
};

inline std::vector<double> router_scores(const Matrix& x_norm,
                                         const RouterParams& params) {
    if (params.w.size() != x_norm.cols) {
        throw dimension_error("route: w length " + std::to_string(params.w.size()) +
                              " vs d = " + std::to_string(x_norm.cols));
    }
    Matrix w_col(x_norm.cols, 1);
    w_col.data = params.w;
    Matrix s = matmul(x_norm, w_col);
    return s.data;
}

inline SelectionResult route(const Matrix& x_norm, const RouterParams& params,
                             std::size_t k, RouterVariant variant,
                             const EpsSchedule& sched) {
    const std::size_t n = x_norm.rows;
    if (k < 1 || k > n) {
        throw capacity_error("route: k = " + std::to_string(k) +
                             " out of range for n = " + std::to_string(n));
    }
    check_finite(x_norm, "route: x_norm");

    SelectionResult sel;
    sel.n = n;

    if (variant == RouterVariant::truncation) {
        // no-learning baseline: first k tokens, unit weights
        sel.scores.assign(n, 0.0);
        sel.lambda.assign(n, 0.0);
        sel.m.assign(n, 0.0);
        for (std::size_t i = 0; i < k; ++i) {
            sel.lambda[i] = 1.0;
            sel.m[i] = 1.0;
            sel.selected_indices.push_back(i);
        }
        return sel;
    }

    sel.scores = router_scores(x_norm, params);
    if (variant == RouterVariant::soft_topk) {
        sel.lambda = soft_topk(sel.scores, k, sched).lambda;
    } else {
        sel.lambda.resize(n);
        for (std::size_t i = 0; i < n; ++i) {
            sel.lambda[i] = 1.0 / (1.0 + std::exp(-sel.scores[i]));
        }
    }

    const auto mask = hard_topk_mask(sel.lambda, k);
    sel.m.assign(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        if (mask[i]) {
            sel.m[i] = sel.lambda[i];
            sel.selected_indices.push_back(i);
        }
    }
    return sel;
}

// P * x_norm as an index gather; row i is the i-th selected token's row.
inline Matrix gather(const Matrix& x_norm, const SelectionResult& sel) {
    if (sel.n != x_norm.rows) {
        throw dimension_error("gather: selection built for n = " +
                              std::to_string(sel.n) + ", input has " +
                              std::to_string(x_norm.rows) + " rows");
    }
    Matrix out(sel.k(), x_norm.cols);
    for (std::size_t i = 0; i < sel.k(); ++i) {
        const auto src = x_norm.row(sel.selected_indices[i]);
        std::copy(src.begin(), src.end(), out.row(i).begin());
    }
    return out;
}

// P^T * z_routed; rows of non-selected tokens are zero.
inline Matrix scatter(const Matrix& z_routed, const SelectionResult& sel,
                      std::size_t n) {
    if (z_routed.rows != sel.k()) {
        throw dimension_error("scatter: z has " + std::to_string(z_routed.rows) +
                              " rows, selection has k = " + std::to_string(sel.k()));
    }
    Matrix out(n, z_routed.cols);
    for (std::size_t i = 0; i < sel.k(); ++i) {
        const auto src = z_routed.row(i);
        std::copy(src.begin(), src.end(), out.row(sel.selected_indices[i]).begin());
    }
    return out;
}

// Gradient of the routing weights m with respect to the router parameters w,
// given dL/dm. Hard selection is a constant: gradient reaches w only through
// the soft path m = lambda on the selected set.
inline std::vector<double> route_backward_w(const Matrix& x_norm,
                                            const SelectionResult& sel,
                                            RouterVariant variant,
                                            const EpsSchedule& sched, std::size_t k,
                                            const std::vector<double>& grad_m,
                                            std::vector<double>* grad_x_norm_scores) {
    const std::size_t n = sel.n;
    std::vector<double> ds(n, 0.0);
    if (variant == RouterVariant::truncation) {
        if (grad_x_norm_scores) grad_x_norm_scores->assign(n, 0.0);
        return std::vector<double>(x_norm.cols, 0.0);
    }

    std::vector<double> dlambda(n, 0.0);
    for (std::size_t idx : sel.selected_indices) dlambda[idx] = grad_m[idx];

    if (variant == RouterVariant::soft_topk) {
        ds = soft_topk_backward(sel.scores, k, sched, dlambda);
    } else {
        for (std::size_t i = 0; i < n; ++i) {
            ds[i] = dlambda[i] * sel.lambda[i] * (1.0 - sel.lambda[i]);
        }
    }

    if (grad_x_norm_scores) *grad_x_norm_scores = ds;

    // s = x_norm . w  =>  dw = x_norm^T ds
    std::vector<double> dw(x_norm.cols, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        const auto row = x_norm.row(i);
        for (std::size_t j = 0; j < x_norm.cols; ++j) dw[j] += row[j] * ds[i];
    }
    return dw;
}

}  // namespace coda
