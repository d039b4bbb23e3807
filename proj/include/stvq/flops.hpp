#pragma once

// Closed-form multiply-accumulate count for one forward pass of one clip with
// one crop. Counts exactly the matrix-product sites (embedding, QKV,
// attention scores, attention aggregation, output projections, MLP, head);
// LayerNorm, softmax, GELU and bias adds are excluded. The tensor engine's
// matmul kernels report into detail::MacCounter, so an instrumented forward
// reproduces this number exactly. The count depends only on
// (N, P, D, A, I, m) - the source resolution never enters, because cropping
// fixes the patch grid.

#include <cstdint>

#include "stvq/model.hpp"

namespace stvq {

struct FlopsBreakdown {
    unsigned long long embed = 0;
    unsigned long long time_per_block = 0;
    unsigned long long space_per_block = 0;
    unsigned long long mlp_per_block = 0;
    unsigned long long head = 0;
    unsigned long long blocks = 0;

    unsigned long long block_total() const {
        return (time_per_block + space_per_block + mlp_per_block) * blocks;
    }
    unsigned long long total() const { return embed + block_total() + head; }
};

inline FlopsBreakdown estimate_flops_breakdown(const ModelConfig& cfg) {
    cfg.validate();
    const unsigned long long p = cfg.patches_per_frame();
    const unsigned long long n = cfg.clip_frames();
    const unsigned long long d = cfg.embed_dim;
    const unsigned long long dt = cfg.token_dim();
    const unsigned long long a = cfg.heads;
    const unsigned long long hd = cfg.head_dim();
    const unsigned long long m = cfg.anchors;
    const unsigned long long k = p * n;
    const unsigned long long r = k + 1;

    FlopsBreakdown f;
    f.blocks = cfg.blocks;
    f.embed = k * dt * d;

    const bool time_active = cfg.mode == NetMode::video && n > 1;
    if (time_active) {
        // QKV on all rows, per-patch score/aggregate groups, output projection
        f.time_per_block = 3 * r * d * d +
                           p * a * (n * hd * (n + 1) + n * (n + 1) * hd) +
                           r * d * d;
    }
    // space stage: QKV, MOS group (1 x (K+1) scores + aggregate per head),
    // per-frame patch groups, output projection
    f.space_per_block = 3 * r * d * d +
                        a * (hd * r + r * hd) +
                        a * n * (p * hd * (p + 1) + p * (p + 1) * hd) +
                        r * d * d;
    f.mlp_per_block = 8 * r * d * d;
    f.head = d * d + d * m;
    return f;
}

inline unsigned long long estimate_flops(const ModelConfig& cfg) {
    return estimate_flops_breakdown(cfg).total();
}

// RAII instrumentation around a forward pass; reads the kernel-level counter.
using MacCountScope = detail::MacCountScope;

} // namespace stvq
