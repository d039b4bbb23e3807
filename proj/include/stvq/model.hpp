#pragma once

// Model configuration, the full learnable state, deterministic initialization,
// and the composed forward pass from a clip's token matrix to the predicted
// anchor probability vector.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "stvq/anchors.hpp"
#include "stvq/encoder.hpp"
#include "stvq/errors.hpp"
#include "stvq/rng.hpp"
#include "stvq/tensor.hpp"
#include "stvq/tokenizer.hpp"

namespace stvq {

enum class NetMode { image, video };

// Test-time clip selection: equal-interval sampling over the full duration,
// or a contiguous window centered in the video.
enum class ClipMode { equal_interval, middle_window };

struct ModelConfig {
    std::size_t n_frames = 16;
    std::size_t crop = 224;
    std::size_t patch = 16;
    std::size_t embed_dim = 768; // D; equals patch*patch*3 at the default geometry
    std::size_t heads = 12;     // A
    std::size_t blocks = 12;    // I
    std::size_t anchors = 6;    // M
    double lo = 0.0;            // L
    double hi = 5.0;            // U
    NetMode mode = NetMode::video;
    ClipMode clip = ClipMode::equal_interval;

    std::size_t token_dim() const { return patch * patch * 3; }
    std::size_t grid() const { return crop / patch; }
    std::size_t patches_per_frame() const { return grid() * grid(); }
    std::size_t head_dim() const { return embed_dim / heads; }
    std::size_t clip_frames() const { return mode == NetMode::image ? 1 : n_frames; }

    void validate() const {
        if (patch == 0) throw ConfigError("config: patch size must be positive");
        if (crop < patch) throw ConfigError("config: crop smaller than patch size");
        if (n_frames == 0) throw ConfigError("config: need at least one frame");
        if (heads == 0 || blocks == 0) throw ConfigError("config: heads and blocks must be positive");
        if (embed_dim == 0 || embed_dim % heads != 0)
            throw ConfigError("config: embed dim " + std::to_string(embed_dim) +
                              " not divisible by " + std::to_string(heads) + " heads");
        if (anchors < 2) throw ConfigError("config: need at least 2 anchors");
        if (!(hi > lo)) throw ConfigError("config: scaled range upper bound must exceed lower");
    }

    AnchorCodec codec() const { return AnchorCodec::make(anchors, lo, hi); }

    EncoderGeometry geometry(std::size_t frames) const {
        return {patches_per_frame(), frames, embed_dim, heads};
    }
};

struct ModelWeights {
    ModelConfig cfg;
    EmbeddingWeights embed;
    std::vector<BlockWeights> blocks;
    Tensor final_ln_gamma, final_ln_beta;
    HeadWeights head;
};

namespace detail {

inline AttentionStageWeights make_attention_stage(std::size_t d) {
    AttentionStageWeights w;
    w.ln_gamma = Tensor({d}, 1.0, true);
    w.ln_beta = Tensor({d}, 0.0, true);
    w.wq = Tensor({d, d}, 0.0, true);
    w.wk = Tensor({d, d}, 0.0, true);
    w.wv = Tensor({d, d}, 0.0, true);
    w.proj = Tensor({d, d}, 0.0, true);
    return w;
}

inline MlpWeights make_mlp(std::size_t d) {
    MlpWeights w;
    w.ln_gamma = Tensor({d}, 1.0, true);
    w.ln_beta = Tensor({d}, 0.0, true);
    w.w1 = Tensor({d, 4 * d}, 0.0, true);
    w.b1 = Tensor({4 * d}, 0.0, true);
    w.w2 = Tensor({4 * d, d}, 0.0, true);
    w.b2 = Tensor({d}, 0.0, true);
    return w;
}

// Names that stay at their structural value (ones for LN scales, zeros for
// offsets and biases) rather than receiving random init.
inline bool structurally_initialized(const std::string& name) {
    return name.ends_with("ln_gamma") || name.ends_with("ln_beta") ||
           name.ends_with(".gamma") || name.ends_with(".beta") || name.ends_with(".b1") ||
           name.ends_with(".b2");
}

} // namespace detail

// Allocates the full learnable state at its structural values (LN scales one,
// everything else zero). The checkpoint loader fills these tensors in place.
inline ModelWeights make_model_weights(const ModelConfig& cfg) {
    cfg.validate();
    ModelWeights w;
    w.cfg = cfg;
    const std::size_t d = cfg.embed_dim, dt = cfg.token_dim(), p = cfg.patches_per_frame();
    w.embed.patch_proj = Tensor({dt, d}, 0.0, true);
    w.embed.pos_spatial = Tensor({p, d}, 0.0, true);
    if (cfg.mode == NetMode::video) w.embed.pos_temporal = Tensor({cfg.n_frames, d}, 0.0, true);
    w.embed.pos_mos = Tensor({1, d}, 0.0, true);
    w.embed.mos_token = Tensor({1, d}, 0.0, true);
    for (std::size_t i = 0; i < cfg.blocks; ++i) {
        BlockWeights b;
        if (cfg.mode == NetMode::video) b.time = detail::make_attention_stage(d);
        b.space = detail::make_attention_stage(d);
        b.mlp = detail::make_mlp(d);
        w.blocks.push_back(std::move(b));
    }
    w.final_ln_gamma = Tensor({d}, 1.0, true);
    w.final_ln_beta = Tensor({d}, 0.0, true);
    w.head.w1 = Tensor({d, d}, 0.0, true);
    w.head.b1 = Tensor({d}, 0.0, true);
    w.head.w2 = Tensor({d, cfg.anchors}, 0.0, true);
    w.head.b2 = Tensor({cfg.anchors}, 0.0, true);
    return w;
}

inline std::vector<std::pair<std::string, Tensor>> named_params(const ModelWeights& w);

// Deterministic initialization, drawn in enumeration order: truncated normal
// with std 1/sqrt(fan_in) for weight matrices (signal scale stays O(1) at any
// width), std 0.02 for the additive tables (positions, MOS token); ones for
// LN scales; zeros for LN offsets and biases.
inline ModelWeights init_model_weights(const ModelConfig& cfg, std::uint64_t seed) {
    ModelWeights w = make_model_weights(cfg);
    Rng rng(mix_seed(seed, 0xA11CE));
    for (auto& [name, t] : named_params(w)) {
        if (detail::structurally_initialized(name)) continue;
        const bool is_table = name.starts_with("embed.pos") || name == "embed.mos_token";
        const double stddev =
            is_table ? 0.02 : 1.0 / std::sqrt(static_cast<double>(t.shape()[0]));
        for (std::size_t i = 0; i < t.size(); ++i) t.data()[i] = rng.trunc_normal(stddev);
    }
    return w;
}

// Named learnable tensors in a fixed order; the checkpoint index, optimizer
// velocities and transfer logic all rely on this enumeration.
inline std::vector<std::pair<std::string, Tensor>> named_params(const ModelWeights& w) {
    std::vector<std::pair<std::string, Tensor>> out;
    out.emplace_back("embed.patch_proj", w.embed.patch_proj);
    out.emplace_back("embed.pos_spatial", w.embed.pos_spatial);
    if (w.embed.has_temporal()) out.emplace_back("embed.pos_temporal", w.embed.pos_temporal);
    out.emplace_back("embed.pos_mos", w.embed.pos_mos);
    out.emplace_back("embed.mos_token", w.embed.mos_token);
    for (std::size_t i = 0; i < w.blocks.size(); ++i) {
        const std::string b = "block" + std::to_string(i) + ".";
        auto stage = [&](const char* name, const AttentionStageWeights& s) {
            out.emplace_back(b + name + ".ln_gamma", s.ln_gamma);
            out.emplace_back(b + name + ".ln_beta", s.ln_beta);
            out.emplace_back(b + name + ".wq", s.wq);
            out.emplace_back(b + name + ".wk", s.wk);
            out.emplace_back(b + name + ".wv", s.wv);
            out.emplace_back(b + name + ".proj", s.proj);
        };
        if (w.blocks[i].time) stage("time", *w.blocks[i].time);
        stage("space", w.blocks[i].space);
        out.emplace_back(b + "mlp.ln_gamma", w.blocks[i].mlp.ln_gamma);
        out.emplace_back(b + "mlp.ln_beta", w.blocks[i].mlp.ln_beta);
        out.emplace_back(b + "mlp.w1", w.blocks[i].mlp.w1);
        out.emplace_back(b + "mlp.b1", w.blocks[i].mlp.b1);
        out.emplace_back(b + "mlp.w2", w.blocks[i].mlp.w2);
        out.emplace_back(b + "mlp.b2", w.blocks[i].mlp.b2);
    }
    out.emplace_back("final_ln.gamma", w.final_ln_gamma);
    out.emplace_back("final_ln.beta", w.final_ln_beta);
    out.emplace_back("head.w1", w.head.w1);
    out.emplace_back("head.b1", w.head.b1);
    out.emplace_back("head.w2", w.head.w2);
    out.emplace_back("head.b2", w.head.b2);
    return out;
}

inline std::vector<Tensor> param_list(const ModelWeights& w) {
    std::vector<Tensor> out;
    for (auto& [name, t] : named_params(w)) out.push_back(t);
    return out;
}

struct ModelOutput {
    Tensor yhat;   // 1 x anchors, softmax of the head logits
    Tensor logits; // 1 x anchors
    Tensor mos;    // 1 x D final MOS embedding
};

// Tokens -> embedding -> encoder -> head. `frames` is the clip length the
// token matrix was built with (1 for images).
inline ModelOutput model_forward(const ModelWeights& w, const Tensor& clip_toks,
                                 std::size_t frames, AttentionTrace* trace = nullptr) {
    const std::size_t p = w.cfg.patches_per_frame();
    Tensor e0 = embed_tokens(clip_toks, w.embed, p, frames);
    const bool use_time = (w.cfg.mode == NetMode::video);
    EncoderOutput enc = encoder_forward(e0, w.blocks, w.final_ln_gamma, w.final_ln_beta,
                                        w.cfg.geometry(frames), use_time, trace);
    Tensor logits = head_logits(enc.mos, w.head);
    return {softmax(logits, 1), logits, enc.mos};
}

} // namespace stvq
