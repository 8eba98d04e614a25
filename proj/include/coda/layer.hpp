#pragma once

// One conditional-adapter encoder layer. The normalized input feeds three
// paths: a small adapter over all tokens, a learned router, and the frozen
// Transformer branch over the k routed tokens. The branch output is
// scattered back and gated row-wise by the routing weights:
//
//   x_norm   = LN_att(x)
//   z_adpt   = adapter(x_norm)                      (all n tokens)
//   m, P     = route(x_norm)
//   x_r      = P x_norm                             (k tokens)
//   zbar     = attention(x_r, kv)                   (kv = x_r or x_norm)
//   z_ffn    = ffn(LN_ffn(x_r + zbar))
//   z_cond   = P^T (zbar + z_ffn)
//   y        = x + z_adpt + m (.) z_cond
//
// Only the adapter, router and layer-norm parameters are trainable; the
// attention/FFN weights stand in for a pretrained model and stay frozen.
// layer_backward produces gradients for the trainable set plus the input
// cotangent, treating hard selection as a constant.

#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "coda/matrix.hpp"
#include "coda/router.hpp"
#include "coda/soft_topk.hpp"

namespace coda {

enum class AttentionVariant { k_to_k, k_to_all };
enum class AdapterVariant { parallel, lora };

inline std::string to_string(AttentionVariant v) {
    return v == AttentionVariant::k_to_k ? "k_to_k" : "k_to_all";
}
inline std::string to_string(AdapterVariant v) {
    return v == AdapterVariant::parallel ? "parallel" : "lora";
}
inline AttentionVariant attention_variant_from_string(const std::string& name) {
    if (name == "k_to_k") return AttentionVariant::k_to_k;
    if (name == "k_to_all") return AttentionVariant::k_to_all;
    throw input_error("unknown attention variant: " + name);
}
inline AdapterVariant adapter_variant_from_string(const std::string& name) {
    if (name == "parallel") return AdapterVariant::parallel;
    if (name == "lora") return AdapterVariant::lora;
    throw input_error("unknown adapter variant: " + name);
}

struct LoraPair {
    Matrix a;  // in x rank
    Matrix b;  // rank x out, zero-initialized so the initial delta vanishes
};

struct AdapterWeights {
    AdapterVariant variant = AdapterVariant::parallel;
    // parallel adapter
    Matrix down;  // d x d_adpt
    Matrix up;    // d_adpt x d
    // low-rank deltas for every projection matrix
    double lora_alpha = 16.0;
    std::size_t lora_rank = 4;
    LoraPair lq, lk, lv, lo, lffn_in, lffn_out;

    double lora_scale() const {
        return lora_alpha / static_cast<double>(lora_rank);
    }
};

struct FrozenLayerWeights {
    Matrix wq, wk, wv, wo;  // d x d
    Matrix ffn_in;          // d x d_ffn
    Matrix ffn_out;         // d_ffn x d
};

struct LayerNormParams {
    std::vector<double> gain;
    std::vector<double> bias;
};

struct CodaLayerParams {
    FrozenLayerWeights frozen;
    LayerNormParams ln_att, ln_ffn;  // trainable
    AdapterWeights adapter;          // trainable
    RouterParams router;             // trainable
};

struct CodaConfig {
    std::size_t n = 16;
    std::size_t d = 32;
    std::size_t heads = 4;
    std::size_t d_ffn = 64;
    std::size_t d_adpt = 8;
    double reduction = 0.0;       // r > 1; 0 means capacity is explicit
    std::size_t capacity_k = 0;   // used when reduction == 0
    AttentionVariant attention_variant = AttentionVariant::k_to_k;
    RouterVariant router_variant = RouterVariant::soft_topk;
    AdapterVariant adapter_variant = AdapterVariant::parallel;
    EpsSchedule eps;
    std::size_t lora_rank = 4;
    double lora_alpha = 16.0;
    double ln_eps = 1e-6;

    std::size_t capacity() const {
        std::size_t k;
        if (reduction > 0.0) {
            k = static_cast<std::size_t>(
                std::ceil(static_cast<double>(n) / reduction));
        } else {
            k = capacity_k;
        }
        if (k < 1 || k > n) {
            throw capacity_error("config: capacity k = " + std::to_string(k) +
                                 " out of range for n = " + std::to_string(n));
        }
        return k;
    }

    void validate() const {
        if (d % heads != 0) {
            throw dimension_error("config: d = " + std::to_string(d) +
                                  " not divisible by heads = " + std::to_string(heads));
        }
        capacity();
        eps.validate();
    }
};

// ---------------------------------------------------------------------------
// parameter initialization

inline CodaLayerParams init_layer_params(const CodaConfig& cfg, Rng& rng) {
    cfg.validate();
    const double sd = 1.0 / std::sqrt(static_cast<double>(cfg.d));
    CodaLayerParams p;
    p.frozen.wq = rng.gaussian_matrix(cfg.d, cfg.d, sd);
    p.frozen.wk = rng.gaussian_matrix(cfg.d, cfg.d, sd);
    p.frozen.wv = rng.gaussian_matrix(cfg.d, cfg.d, sd);
    p.frozen.wo = rng.gaussian_matrix(cfg.d, cfg.d, sd);
    p.frozen.ffn_in = rng.gaussian_matrix(cfg.d, cfg.d_ffn, sd);
    p.frozen.ffn_out = rng.gaussian_matrix(cfg.d_ffn, cfg.d, sd);
    p.ln_att.gain.assign(cfg.d, 1.0);
    p.ln_att.bias.assign(cfg.d, 0.0);
    p.ln_ffn.gain.assign(cfg.d, 1.0);
    p.ln_ffn.bias.assign(cfg.d, 0.0);

    p.adapter.variant = cfg.adapter_variant;
    if (cfg.adapter_variant == AdapterVariant::parallel) {
        p.adapter.down = rng.gaussian_matrix(cfg.d, cfg.d_adpt, sd);
        p.adapter.up = Matrix(cfg.d_adpt, cfg.d);  // zero: layer starts as frozen branch
    } else {
        p.adapter.lora_rank = cfg.lora_rank;
        p.adapter.lora_alpha = cfg.lora_alpha;
        auto lora_pair = [&](std::size_t in, std::size_t out) {
            LoraPair lp;
            lp.a = rng.gaussian_matrix(in, cfg.lora_rank, sd);
            lp.b = Matrix(cfg.lora_rank, out);
            return lp;
        };
        p.adapter.lq = lora_pair(cfg.d, cfg.d);
        p.adapter.lk = lora_pair(cfg.d, cfg.d);
        p.adapter.lv = lora_pair(cfg.d, cfg.d);
        p.adapter.lo = lora_pair(cfg.d, cfg.d);
        p.adapter.lffn_in = lora_pair(cfg.d, cfg.d_ffn);
        p.adapter.lffn_out = lora_pair(cfg.d_ffn, cfg.d);
    }
    p.router.w.resize(cfg.d);
    for (auto& v : p.router.w) v = rng.normal(0.0, sd);
    return p;
}

// ---------------------------------------------------------------------------
// parameter census

inline std::size_t frozen_parameter_count(const CodaLayerParams& p) {
    return p.frozen.wq.data.size() + p.frozen.wk.data.size() +
           p.frozen.wv.data.size() + p.frozen.wo.data.size() +
           p.frozen.ffn_in.data.size() + p.frozen.ffn_out.data.size();
}

inline std::size_t adapter_parameter_count(const AdapterWeights& a) {
    if (a.variant == AdapterVariant::parallel) {
        return a.down.data.size() + a.up.data.size();
    }
    auto pair_count = [](const LoraPair& lp) {
        return lp.a.data.size() + lp.b.data.size();
    };
    return pair_count(a.lq) + pair_count(a.lk) + pair_count(a.lv) +
           pair_count(a.lo) + pair_count(a.lffn_in) + pair_count(a.lffn_out);
}

inline std::size_t trainable_parameter_count(const CodaLayerParams& p) {
    const std::size_t ln = p.ln_att.gain.size() + p.ln_att.bias.size() +
                           p.ln_ffn.gain.size() + p.ln_ffn.bias.size();
    return adapter_parameter_count(p.adapter) + p.router.w.size() + ln;
}

// ---------------------------------------------------------------------------
// forward

struct LayerNormCache {
    Matrix xhat;                  // normalized rows before gain/bias
    std::vector<double> inv_std;  // per row
};

inline Matrix layer_norm_cached(const Matrix& x, const LayerNormParams& ln,
                                double eps, LayerNormCache& cache) {
    Matrix out = layer_norm(x, ln.gain, ln.bias, eps);
    cache.xhat = Matrix(x.rows, x.cols);
    cache.inv_std.resize(x.rows);
    for (std::size_t i = 0; i < x.rows; ++i) {
        auto r = x.row(i);
        double mean = 0.0;
        for (double v : r) mean += v;
        mean /= static_cast<double>(x.cols);
        double var = 0.0;
        for (double v : r) var += (v - mean) * (v - mean);
        var /= static_cast<double>(x.cols);
        cache.inv_std[i] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < x.cols; ++j) {
            cache.xhat(i, j) = (r[j] - mean) * cache.inv_std[i];
        }
    }
    return out;
}

// dx for y = xhat * gain + bias; also accumulates dgain/dbias.
inline Matrix layer_norm_backward(const Matrix& dy, const LayerNormParams& ln,
                                  const LayerNormCache& cache,
                                  std::vector<double>& dgain,
                                  std::vector<double>& dbias) {
    const std::size_t rows = dy.rows, cols = dy.cols;
    Matrix dx(rows, cols);
    for (std::size_t i = 0; i < rows; ++i) {
        double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
        for (std::size_t j = 0; j < cols; ++j) {
            const double dxhat = dy(i, j) * ln.gain[j];
            dgain[j] += dy(i, j) * cache.xhat(i, j);
            dbias[j] += dy(i, j);
            mean_dxhat += dxhat;
            mean_dxhat_xhat += dxhat * cache.xhat(i, j);
        }
        mean_dxhat /= static_cast<double>(cols);
        mean_dxhat_xhat /= static_cast<double>(cols);
        for (std::size_t j = 0; j < cols; ++j) {
            const double dxhat = dy(i, j) * ln.gain[j];
            dx(i, j) = cache.inv_std[i] *
                       (dxhat - mean_dxhat - cache.xhat(i, j) * mean_dxhat_xhat);
        }
    }
    return dx;
}

struct AdapterCache {
    Matrix pre_act;  // x_norm * down
    Matrix hidden;   // relu(pre_act)
};

inline Matrix adapter_forward(const Matrix& x_norm, const AdapterWeights& w,
                              AdapterCache* cache = nullptr) {
    if (w.variant == AdapterVariant::lora) {
        // low-rank deltas act inside the projection matrices instead
        return Matrix(x_norm.rows, x_norm.cols);
    }
    if (w.down.rows != x_norm.cols) {
        throw dimension_error("adapter_forward: down is " + w.down.shape_str() +
                              ", input has d = " + std::to_string(x_norm.cols));
    }
    Matrix pre = matmul(x_norm, w.down);
    Matrix hidden = pre;
    for (double& v : hidden.data) v = std::max(v, 0.0);
    Matrix out = matmul(hidden, w.up);
    if (cache) {
        cache->pre_act = std::move(pre);
        cache->hidden = std::move(hidden);
    }
    return out;
}

struct AttentionCache {
    Matrix q, k, v;               // projected, full width
    std::vector<Matrix> probs;    // per head, rows_q x rows_kv
    Matrix concat;                // pre-output-projection
    Matrix wq_eff, wk_eff, wv_eff, wo_eff;  // only populated for lora
};

namespace detail {

inline Matrix head_slice(const Matrix& m, std::size_t head, std::size_t dh) {
    Matrix out(m.rows, dh);
    for (std::size_t i = 0; i < m.rows; ++i) {
        const double* src = m.data.data() + i * m.cols + head * dh;
        std::copy(src, src + dh, out.row(i).begin());
    }
    return out;
}

inline void head_unslice(Matrix& dst, const Matrix& part, std::size_t head,
                         std::size_t dh) {
    for (std::size_t i = 0; i < part.rows; ++i) {
        double* out = dst.data.data() + i * dst.cols + head * dh;
        const auto src = part.row(i);
        for (std::size_t j = 0; j < dh; ++j) out[j] += src[j];
    }
}

inline Matrix lora_effective(const Matrix& w, const LoraPair& lp, double scale) {
    Matrix delta = matmul(lp.a, lp.b);
    Matrix eff = w;
    for (std::size_t i = 0; i < eff.data.size(); ++i) {
        eff.data[i] += scale * delta.data[i];
    }
    return eff;
}

}  // namespace detail

// Multi-head scaled dot-product attention with output projection. kv_src is
// q_src itself for k-to-k attention or the full token set for k-to-all.
inline Matrix attention(const Matrix& q_src, const Matrix& kv_src,
                        const FrozenLayerWeights& w, const AdapterWeights& adapters,
                        std::size_t heads, AttentionCache* cache = nullptr) {
    const std::size_t d = q_src.cols;
    if (kv_src.cols != d) {
        throw dimension_error("attention: query d = " + std::to_string(d) +
                              " vs key/value d = " + std::to_string(kv_src.cols));
    }
    if (d % heads != 0) {
        throw dimension_error("attention: d = " + std::to_string(d) +
                              " not divisible by heads = " + std::to_string(heads));
    }
    const std::size_t dh = d / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    const bool lora = adapters.variant == AdapterVariant::lora;
    const double ls = lora ? adapters.lora_scale() : 0.0;
    Matrix wq_eff = lora ? detail::lora_effective(w.wq, adapters.lq, ls) : w.wq;
    Matrix wk_eff = lora ? detail::lora_effective(w.wk, adapters.lk, ls) : w.wk;
    Matrix wv_eff = lora ? detail::lora_effective(w.wv, adapters.lv, ls) : w.wv;
    Matrix wo_eff = lora ? detail::lora_effective(w.wo, adapters.lo, ls) : w.wo;

    Matrix q = matmul(q_src, wq_eff);
    Matrix k = matmul(kv_src, wk_eff);
    Matrix v = matmul(kv_src, wv_eff);

    Matrix concat(q_src.rows, d);
    std::vector<Matrix> probs;
    probs.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
        Matrix qh = detail::head_slice(q, h, dh);
        Matrix kh = detail::head_slice(k, h, dh);
        Matrix vh = detail::head_slice(v, h, dh);
        Matrix scores = matmul_transposed(qh, kh);
        for (double& s : scores.data) s *= scale;
        Matrix a = row_softmax(scores);
        Matrix oh = matmul(a, vh);
        detail::head_unslice(concat, oh, h, dh);
        probs.push_back(std::move(a));
    }
    Matrix out = matmul(concat, wo_eff);

    if (cache) {
        cache->q = std::move(q);
        cache->k = std::move(k);
        cache->v = std::move(v);
        cache->probs = std::move(probs);
        cache->concat = std::move(concat);
        if (lora) {
            cache->wq_eff = std::move(wq_eff);
            cache->wk_eff = std::move(wk_eff);
            cache->wv_eff = std::move(wv_eff);
            cache->wo_eff = std::move(wo_eff);
        }
    }
    return out;
}

struct ForwardCache {
    bool valid = false;
    Matrix x;
    Matrix x_norm;
    LayerNormCache ln_att;
    AdapterCache adapter;
    Matrix x_routed;
    AttentionCache attn;
    Matrix zbar;
    LayerNormCache ln_ffn;
    Matrix h_norm;
    Matrix ffn_pre;     // h_norm * ffn_in (pre-relu)
    Matrix ffn_hidden;  // relu(ffn_pre)
    Matrix z_cond;
    Matrix z_adapter;
};

struct LayerOutput {
    Matrix y;
    SelectionResult selection;
    ForwardCache cache;
};

inline LayerOutput layer_forward(const Matrix& x, const CodaLayerParams& params,
                                 const CodaConfig& cfg) {
    cfg.validate();
    if (x.cols != cfg.d) {
        throw dimension_error("layer_forward: input is " + x.shape_str() +
                              ", config d = " + std::to_string(cfg.d));
    }
    const std::size_t n = x.rows;
    const std::size_t k =
        std::min(cfg.capacity(), n);  // config n may exceed the actual rows

    LayerOutput out;
    ForwardCache& c = out.cache;
    c.x = x;
    c.x_norm = layer_norm_cached(x, params.ln_att, cfg.ln_eps, c.ln_att);
    c.z_adapter = adapter_forward(c.x_norm, params.adapter, &c.adapter);

    out.selection = route(c.x_norm, params.router, k, cfg.router_variant, cfg.eps);
    c.x_routed = gather(c.x_norm, out.selection);

    const Matrix& kv_src =
        cfg.attention_variant == AttentionVariant::k_to_k ? c.x_routed : c.x_norm;
    c.zbar = attention(c.x_routed, kv_src, params.frozen, params.adapter,
                       cfg.heads, &c.attn);

    Matrix h = add(c.x_routed, c.zbar);
    c.h_norm = layer_norm_cached(h, params.ln_ffn, cfg.ln_eps, c.ln_ffn);

    const bool lora = params.adapter.variant == AdapterVariant::lora;
    const double ls = lora ? params.adapter.lora_scale() : 0.0;
    Matrix fin = lora ? detail::lora_effective(params.frozen.ffn_in,
                                               params.adapter.lffn_in, ls)
                      : params.frozen.ffn_in;
    Matrix fout = lora ? detail::lora_effective(params.frozen.ffn_out,
                                                params.adapter.lffn_out, ls)
                       : params.frozen.ffn_out;
    c.ffn_pre = matmul(c.h_norm, fin);
    c.ffn_hidden = c.ffn_pre;
    for (double& v : c.ffn_hidden.data) v = std::max(v, 0.0);
    Matrix z_routed = matmul(c.ffn_hidden, fout);

    c.z_cond = scatter(add(c.zbar, z_routed), out.selection, n);

    out.y = Matrix(n, cfg.d);
    for (std::size_t i = 0; i < n; ++i) {
        const double mi = out.selection.m[i];
        for (std::size_t j = 0; j < cfg.d; ++j) {
            out.y(i, j) = x(i, j) + c.z_adapter(i, j) + mi * c.z_cond(i, j);
        }
    }
    c.valid = true;
    return out;
}

// Dense parallel-adapter baseline: every token passes through the frozen
// branch, no router. Written as a straight-line pipeline so it can serve as
// an independent cross-check of layer_forward at k = n.
inline LayerOutput dense_layer_forward(const Matrix& x, const CodaLayerParams& params,
                                       const CodaConfig& cfg) {
    if (x.cols != cfg.d) {
        throw dimension_error("dense_layer_forward: input is " + x.shape_str() +
                              ", config d = " + std::to_string(cfg.d));
    }
    const std::size_t n = x.rows;
    LayerOutput out;
    ForwardCache& c = out.cache;
    c.x = x;
    c.x_norm = layer_norm_cached(x, params.ln_att, cfg.ln_eps, c.ln_att);
    c.z_adapter = adapter_forward(c.x_norm, params.adapter, &c.adapter);
    c.x_routed = c.x_norm;
    c.zbar = attention(c.x_norm, c.x_norm, params.frozen, params.adapter,
                       cfg.heads, &c.attn);
    Matrix h = add(c.x_norm, c.zbar);
    c.h_norm = layer_norm_cached(h, params.ln_ffn, cfg.ln_eps, c.ln_ffn);

    const bool lora = params.adapter.variant == AdapterVariant::lora;
    const double ls = lora ? params.adapter.lora_scale() : 0.0;
    Matrix fin = lora ? detail::lora_effective(params.frozen.ffn_in,
                                               params.adapter.lffn_in, ls)
                      : params.frozen.ffn_in;
    Matrix fout = lora ? detail::lora_effective(params.frozen.ffn_out,
                                                params.adapter.lffn_out, ls)
                       : params.frozen.ffn_out;
    c.ffn_pre = matmul(c.h_norm, fin);
    c.ffn_hidden = c.ffn_pre;
    for (double& v : c.ffn_hidden.data) v = std::max(v, 0.0);
    Matrix z_routed = matmul(c.ffn_hidden, fout);
    c.z_cond = add(c.zbar, z_routed);

    out.selection.n = n;
    out.selection.m.assign(n, 1.0);
    out.selection.lambda.assign(n, 1.0);
    out.selection.scores.assign(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) out.selection.selected_indices.push_back(i);

    out.y = Matrix(n, cfg.d);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < cfg.d; ++j) {
            out.y(i, j) = x(i, j) + c.z_adapter(i, j) + c.z_cond(i, j);
        }
    }
    c.valid = true;
    return out;
}

// ---------------------------------------------------------------------------
// backward

struct LayerGrads {
    Matrix grad_x;
    std::vector<double> ln_att_gain, ln_att_bias;
    std::vector<double> ln_ffn_gain, ln_ffn_bias;
    Matrix adapter_down, adapter_up;
    LoraPair lq, lk, lv, lo, lffn_in, lffn_out;  // gradients, lora variant only
    std::vector<double> router_w;
};

namespace detail {

struct LoraGradPair {
    Matrix da, db;
};

// dL/d(A,B) given dL/dW_eff for W_eff = W + scale * A * B.
inline LoraGradPair lora_backward(const LoraPair& lp, const Matrix& dweff,
                                  double scale) {
    LoraGradPair g;
    g.da = matmul_transposed(dweff, lp.b);
    for (double& v : g.da.data) v *= scale;
    g.db = transposed_matmul(lp.a, dweff);
    for (double& v : g.db.data) v *= scale;
    return g;
}

}  // namespace detail

inline LayerGrads layer_backward(const LayerOutput& fwd, const CodaLayerParams& params,
                                 const CodaConfig& cfg, const Matrix& grad_y) {
    if (!fwd.cache.valid) {
        throw state_error("layer_backward: forward cache missing");
    }
    const ForwardCache& c = fwd.cache;
    const std::size_t n = c.x.rows;
    const std::size_t d = cfg.d;
    if (grad_y.rows != n || grad_y.cols != d) {
        throw dimension_error("layer_backward: cotangent is " + grad_y.shape_str() +
                              ", output was " + std::to_string(n) + "x" +
                              std::to_string(d));
    }
    const SelectionResult& sel = fwd.selection;
    const std::size_t k = sel.k();
    const bool lora = params.adapter.variant == AdapterVariant::lora;
    const double ls = lora ? params.adapter.lora_scale() : 0.0;

    LayerGrads g;
    g.ln_att_gain.assign(d, 0.0);
    g.ln_att_bias.assign(d, 0.0);
    g.ln_ffn_gain.assign(d, 0.0);
    g.ln_ffn_bias.assign(d, 0.0);

    // y = x + z_adapter + m (.) z_cond
    Matrix dx = grad_y;
    const Matrix& dz_adapter = grad_y;
    Matrix dz_cond(n, d);
    std::vector<double> dm(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        const double mi = sel.m[i];
        for (std::size_t j = 0; j < d; ++j) {
            dz_cond(i, j) = mi * grad_y(i, j);
            dm[i] += grad_y(i, j) * c.z_cond(i, j);
        }
    }

    // z_cond = scatter(zbar + z_ffn)
    Matrix dz_sum = gather(dz_cond, sel);  // k x d
    Matrix dzbar = dz_sum;
    const Matrix& dz_routed = dz_sum;

    // ffn
    const Matrix fout_eff = lora ? detail::lora_effective(params.frozen.ffn_out,
                                                          params.adapter.lffn_out, ls)
                                 : params.frozen.ffn_out;
    const Matrix fin_eff = lora ? detail::lora_effective(params.frozen.ffn_in,
                                                         params.adapter.lffn_in, ls)
                                : params.frozen.ffn_in;
    Matrix dhidden = matmul_transposed(dz_routed, fout_eff);  // k x d_ffn
    Matrix dpre = dhidden;
    for (std::size_t i = 0; i < dpre.data.size(); ++i) {
        if (c.ffn_pre.data[i] <= 0.0) dpre.data[i] = 0.0;
    }
    Matrix dh_norm = matmul_transposed(dpre, fin_eff);  // k x d
    if (lora) {
        Matrix dw_fout = transposed_matmul(c.ffn_hidden, dz_routed);
        auto gf = detail::lora_backward(params.adapter.lffn_out, dw_fout, ls);
        g.lffn_out.a = std::move(gf.da);
        g.lffn_out.b = std::move(gf.db);
        Matrix dw_fin = transposed_matmul(c.h_norm, dpre);
        auto gi = detail::lora_backward(params.adapter.lffn_in, dw_fin, ls);
        g.lffn_in.a = std::move(gi.da);
        g.lffn_in.b = std::move(gi.db);
    }

    // LN_ffn over h = x_routed + zbar
    Matrix dh = layer_norm_backward(dh_norm, params.ln_ffn, c.ln_ffn,
                                    g.ln_ffn_gain, g.ln_ffn_bias);
    Matrix dx_routed = dh;
    add_inplace(dzbar, dh);

    // attention
    const std::size_t dh_head = d / cfg.heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh_head));
    const Matrix& wq_eff = lora ? c.attn.wq_eff : params.frozen.wq;
    const Matrix& wk_eff = lora ? c.attn.wk_eff : params.frozen.wk;
    const Matrix& wv_eff = lora ? c.attn.wv_eff : params.frozen.wv;
    const Matrix& wo_eff = lora ? c.attn.wo_eff : params.frozen.wo;

    Matrix dconcat = matmul_transposed(dzbar, wo_eff);  // k x d
    if (lora) {
        Matrix dwo = transposed_matmul(c.attn.concat, dzbar);
        auto go = detail::lora_backward(params.adapter.lo, dwo, ls);
        g.lo.a = std::move(go.da);
        g.lo.b = std::move(go.db);
    }

    const std::size_t m_rows = c.attn.k.rows;
    Matrix dq(k, d), dk(m_rows, d), dv(m_rows, d);
    for (std::size_t h = 0; h < cfg.heads; ++h) {
        Matrix dq_h(k, dh_head), dk_h(m_rows, dh_head), dv_h(m_rows, dh_head);
        Matrix do_h = detail::head_slice(dconcat, h, dh_head);
        Matrix vh = detail::head_slice(c.attn.v, h, dh_head);
        Matrix qh = detail::head_slice(c.attn.q, h, dh_head);
        Matrix kh = detail::head_slice(c.attn.k, h, dh_head);
        const Matrix& probs = c.attn.probs[h];

        Matrix dprobs = matmul_transposed(do_h, vh);       // k x m
        dv_h = transposed_matmul(probs, do_h);             // m x dh
        // softmax backward row-wise
        Matrix dscores(k, m_rows);
        for (std::size_t i = 0; i < k; ++i) {
            double dot = 0.0;
            for (std::size_t j = 0; j < m_rows; ++j) {
                dot += dprobs(i, j) * probs(i, j);
            }
            for (std::size_t j = 0; j < m_rows; ++j) {
                dscores(i, j) = probs(i, j) * (dprobs(i, j) - dot) * scale;
            }
        }
        dq_h = matmul(dscores, kh);
        dk_h = transposed_matmul(dscores, qh);

        detail::head_unslice(dq, dq_h, h, dh_head);
        detail::head_unslice(dk, dk_h, h, dh_head);
        detail::head_unslice(dv, dv_h, h, dh_head);
    }

    add_inplace(dx_routed, matmul_transposed(dq, wq_eff));
    Matrix dkv = matmul_transposed(dk, wk_eff);
    add_inplace(dkv, matmul_transposed(dv, wv_eff));
    if (lora) {
        const Matrix& kv_src = cfg.attention_variant == AttentionVariant::k_to_k
                                   ? c.x_routed
                                   : c.x_norm;
        Matrix dwq = transposed_matmul(c.x_routed, dq);
        auto gq = detail::lora_backward(params.adapter.lq, dwq, ls);
        g.lq.a = std::move(gq.da);
        g.lq.b = std::move(gq.db);
        Matrix dwk = transposed_matmul(kv_src, dk);
        auto gk = detail::lora_backward(params.adapter.lk, dwk, ls);
        g.lk.a = std::move(gk.da);
        g.lk.b = std::move(gk.db);
        Matrix dwv = transposed_matmul(kv_src, dv);
        auto gv = detail::lora_backward(params.adapter.lv, dwv, ls);
        g.lv.a = std::move(gv.da);
        g.lv.b = std::move(gv.db);
    }

    // assemble dx_norm
    Matrix dx_norm(n, d);
    if (cfg.attention_variant == AttentionVariant::k_to_k) {
        add_inplace(dx_routed, dkv);
    } else {
        add_inplace(dx_norm, dkv);
    }
    // gather backward: scatter-add routed rows
    for (std::size_t i = 0; i < k; ++i) {
        const auto src = dx_routed.row(i);
        auto dst = dx_norm.row(sel.selected_indices[i]);
        for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
    }

    // router: gradient through m = lambda (.) top_mask
    std::vector<double> ds;
    g.router_w = route_backward_w(c.x_norm, sel, cfg.router_variant, cfg.eps, k,
                                  dm, &ds);
    if (cfg.router_variant != RouterVariant::truncation) {
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < d; ++j) {
                dx_norm(i, j) += ds[i] * params.router.w[j];
            }
        }
    }

    // adapter
    if (!lora) {
        Matrix dadapter_hidden = matmul_transposed(dz_adapter, params.adapter.up);
        g.adapter_up = transposed_matmul(c.adapter.hidden, dz_adapter);
        Matrix dadapter_pre = dadapter_hidden;
        for (std::size_t i = 0; i < dadapter_pre.data.size(); ++i) {
            if (c.adapter.pre_act.data[i] <= 0.0) dadapter_pre.data[i] = 0.0;
        }
        g.adapter_down = transposed_matmul(c.x_norm, dadapter_pre);
        add_inplace(dx_norm, matmul_transposed(dadapter_pre, params.adapter.down));
    }

    // LN_att
    Matrix dx_from_norm = layer_norm_backward(dx_norm, params.ln_att, c.ln_att,
                                              g.ln_att_gain, g.ln_att_bias);
    add_inplace(dx, dx_from_norm);
    g.grad_x = std::move(dx);
    return g;
}

}  // namespace coda
