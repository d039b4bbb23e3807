#pragma once

// Divided space-time attention blocks. Each block runs, in order: multi-head
// time attention (every patch token attends to the MOS key and the keys of
// the same patch position across frames), multi-head space attention (every
// patch token attends to the MOS key and the keys of all patches in its own
// frame), and a pre-norm MLP. All three are residual.
//
// The MOS token (row 0) passes through time attention unchanged; during
// space attention its query attends over its own key plus all K patch keys,
// so it aggregates global evidence once per block. With a single frame the
// time stage is skipped entirely - a one-frame clip is a still image, and
// the image-mode network is exactly this network without time attention.

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "stvq/errors.hpp"
#include "stvq/tensor.hpp"

namespace stvq {

inline constexpr double kLayerNormEps = 1e-6;

struct AttentionStageWeights {
    Tensor ln_gamma, ln_beta; // D
    Tensor wq, wk, wv;        // D x D, all heads packed (head a owns columns [a*Hd, (a+1)*Hd))
    Tensor proj;              // D x D output projection (time: W_T, space: W_S)
};

struct MlpWeights {
    Tensor ln_gamma, ln_beta; // D
    Tensor w1, b1;            // D x 4D, 4D
    Tensor w2, b2;            // 4D x D, D
};

struct BlockWeights {
    std::optional<AttentionStageWeights> time; // absent in image-mode models
    AttentionStageWeights space;
    MlpWeights mlp;
};

struct EncoderGeometry {
    std::size_t patches = 0; // P
    std::size_t frames = 0;  // N
    std::size_t width = 0;   // D
    std::size_t heads = 0;   // A

    std::size_t tokens() const { return patches * frames; }
    std::size_t head_dim() const { return width / heads; }
};

// Per-forward record of every attention weight matrix, for invariant checks.
struct AttentionTrace {
    struct Entry {
        std::size_t block;
        bool time_stage;
        bool mos_query; // the MOS token's own space-attention group
        std::size_t head;
        std::size_t rows; // query tokens in the group
        std::size_t cols; // keys (N+1 time, P+1 space, K+1 for the MOS group)
        std::vector<double> weights;
    };
    std::vector<Entry> entries;
};

// softmax(q . keys^T / sqrt(Hd)) row-wise; q is one or more query rows.
inline Tensor attention_weights(const Tensor& q, const Tensor& keys) {
    if (q.cols() != keys.cols())
        throw ShapeError("attention: query width " + std::to_string(q.cols()) +
                         " vs key width " + std::to_string(keys.cols()));
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(q.cols()));
    return softmax(scale(matmul_nt(q, keys), inv_sqrt), 1);
}

// Weight vector over [MOS key, same-patch keys across frames]; length N+1.
inline Tensor time_attention_weights(const Tensor& q, const Tensor& mos_key,
                                     const Tensor& frame_keys) {
    return attention_weights(q, concat_rows({mos_key, frame_keys}));
}

// Weight vector over [MOS key, same-frame keys across patches]; length P+1.
inline Tensor space_attention_weights(const Tensor& q, const Tensor& mos_key,
                                      const Tensor& patch_keys) {
    return attention_weights(q, concat_rows({mos_key, patch_keys}));
}

// s = alpha(0) * mos_value + sum_k alpha(k) * values[k].
inline Tensor attention_aggregate(const Tensor& weights, const Tensor& mos_value,
                                  const Tensor& values) {
    return matmul(weights, concat_rows({mos_value, values}));
}

namespace detail {

inline void trace_weights(AttentionTrace* trace, const Tensor& alpha, std::size_t block,
                          bool time_stage, bool mos_query, std::size_t head) {
    if (!trace) return;
    trace->entries.push_back({block, time_stage, mos_query, head, alpha.rows(), alpha.cols(),
                              alpha.vec()});
}

// Time attention over the whole sequence. Patch tokens are processed in
// per-patch groups (N query rows against N+1 keys); the MOS row passes
// through on the residual path alone.
inline Tensor time_stage(const Tensor& e, const AttentionStageWeights& w,
                         const EncoderGeometry& g, std::size_t block, AttentionTrace* trace) {
    const std::size_t p = g.patches, n = g.frames, hd = g.head_dim(), a = g.heads;
    Tensor x = layernorm(e, w.ln_gamma, w.ln_beta, kLayerNormEps);
    Tensor q = matmul(x, w.wq), k = matmul(x, w.wk), v = matmul(x, w.wv);

    // per-head output rows, patch-major: [zeros(MOS); p0=0 frames 1..N; p0=1 ...]
    Tensor mos_zero({1, hd});
    std::vector<std::vector<Tensor>> head_rows(a);
    for (std::size_t h = 0; h < a; ++h) head_rows[h].push_back(mos_zero);

    for (std::size_t p0 = 0; p0 < p; ++p0) {
        std::vector<std::size_t> qrows(n), krows(n + 1);
        krows[0] = 0;
        for (std::size_t n0 = 0; n0 < n; ++n0) {
            qrows[n0] = 1 + n0 * p + p0;
            krows[n0 + 1] = qrows[n0];
        }
        Tensor qp = gather_rows(q, qrows);
        Tensor kp = gather_rows(k, krows);
        Tensor vp = gather_rows(v, krows);
        for (std::size_t h = 0; h < a; ++h) {
            Tensor qh = slice_cols(qp, h * hd, (h + 1) * hd);
            Tensor kh = slice_cols(kp, h * hd, (h + 1) * hd);
            Tensor vh = slice_cols(vp, h * hd, (h + 1) * hd);
            Tensor alpha = attention_weights(qh, kh);
            trace_weights(trace, alpha, block, true, false, h);
            head_rows[h].push_back(matmul(alpha, vh));
        }
    }

    // reorder patch-major group output to the frame-major sequence layout
    std::vector<std::size_t> perm(1 + p * n);
    perm[0] = 0;
    for (std::size_t p0 = 0; p0 < p; ++p0)
        for (std::size_t n0 = 0; n0 < n; ++n0) perm[1 + n0 * p + p0] = 1 + p0 * n + n0;

    std::vector<Tensor> heads(a);
    for (std::size_t h = 0; h < a; ++h) heads[h] = gather_rows(concat_rows(head_rows[h]), perm);
    return add(matmul(concat_cols(heads), w.proj), e);
}

// Space attention: per-frame groups of P query rows against P+1 keys, plus
// the MOS group (one query row against all K+1 keys).
inline Tensor space_stage(const Tensor& e, const AttentionStageWeights& w,
                          const EncoderGeometry& g, std::size_t block, AttentionTrace* trace) {
    const std::size_t p = g.patches, n = g.frames, hd = g.head_dim(), a = g.heads;
    Tensor x = layernorm(e, w.ln_gamma, w.ln_beta, kLayerNormEps);
    Tensor q = matmul(x, w.wq), k = matmul(x, w.wk), v = matmul(x, w.wv);

    Tensor q_mos = slice_rows(q, 0, 1);
    std::vector<std::vector<Tensor>> head_rows(a);

    for (std::size_t h = 0; h < a; ++h) {
        Tensor kh_full = slice_cols(k, h * hd, (h + 1) * hd); // (K+1) x Hd, MOS key first
        Tensor vh_full = slice_cols(v, h * hd, (h + 1) * hd);
        Tensor qh_mos = slice_cols(q_mos, h * hd, (h + 1) * hd);
        Tensor alpha = attention_weights(qh_mos, kh_full);
        trace_weights(trace, alpha, block, false, true, h);
        head_rows[h].push_back(matmul(alpha, vh_full));
    }

    for (std::size_t n0 = 0; n0 < n; ++n0) {
        const std::size_t r0 = 1 + n0 * p, r1 = r0 + p;
        Tensor qn = slice_rows(q, r0, r1);
        std::vector<std::size_t> krows(p + 1);
        krows[0] = 0;
        for (std::size_t i = 0; i < p; ++i) krows[i + 1] = r0 + i;
        Tensor kn = gather_rows(k, krows);
        Tensor vn = gather_rows(v, krows);
        for (std::size_t h = 0; h < a; ++h) {
            Tensor qh = slice_cols(qn, h * hd, (h + 1) * hd);
            Tensor kh = slice_cols(kn, h * hd, (h + 1) * hd);
            Tensor vh = slice_cols(vn, h * hd, (h + 1) * hd);
            Tensor alpha = attention_weights(qh, kh);
            trace_weights(trace, alpha, block, false, false, h);
            head_rows[h].push_back(matmul(alpha, vh));
        }
    }

    std::vector<Tensor> heads(a);
    for (std::size_t h = 0; h < a; ++h) heads[h] = concat_rows(head_rows[h]); // frame-major already
    return add(matmul(concat_cols(heads), w.proj), e);
}

inline Tensor mlp_stage(const Tensor& e, const MlpWeights& w) {
    Tensor x = layernorm(e, w.ln_gamma, w.ln_beta, kLayerNormEps);
    Tensor h = gelu(add(matmul(x, w.w1), w.b1));
    return add(add(matmul(h, w.w2), w.b2), e);
}

} // namespace detail

struct EncoderOutput {
    Tensor sequence; // (K+1) x D, same shape as the input
    Tensor mos;      // 1 x D, final MOS row after the closing LayerNorm
};

// Applies the block stack. use_time selects the full divided space-time path;
// it is off for image-mode models and for single-frame clips.
inline EncoderOutput encoder_forward(const Tensor& e0, const std::vector<BlockWeights>& blocks,
                                     const Tensor& final_ln_gamma, const Tensor& final_ln_beta,
                                     const EncoderGeometry& g, bool use_time,
                                     AttentionTrace* trace = nullptr) {
    if (g.width == 0 || g.heads == 0 || g.width % g.heads != 0)
        throw ConfigError("encoder: width " + std::to_string(g.width) +
                          " not divisible by heads " + std::to_string(g.heads));
    if (e0.rows() != g.tokens() + 1 || e0.cols() != g.width)
        throw ContractError("encoder: sequence shape " + detail::shape_str(e0.shape()) +
                            " does not match geometry (" + std::to_string(g.tokens() + 1) + "x" +
                            std::to_string(g.width) + ")");

    Tensor e = e0;
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        if (use_time && g.frames > 1) {
            if (!blocks[i].time)
                throw StateError("encoder: block " + std::to_string(i) + " has no time-attention weights");
            e = detail::time_stage(e, *blocks[i].time, g, i, trace);
        }
        e = detail::space_stage(e, blocks[i].space, g, i, trace);
        e = detail::mlp_stage(e, blocks[i].mlp);
    }
    Tensor mos = layernorm(slice_rows(e, 0, 1), final_ln_gamma, final_ln_beta, kLayerNormEps);
    return {e, mos};
}

} // namespace stvq
