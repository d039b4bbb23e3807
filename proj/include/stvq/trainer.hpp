#pragma once

// Training orchestration: the staged image -> video protocol, stage transfer,
// the step learning-rate schedule, seeded stratified splitting, minibatch SGD
// with momentum, per-epoch metric logging, decoder fitting, and the
// deterministic three-crop inference protocol.

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "stvq/anchors.hpp"
#include "stvq/errors.hpp"
#include "stvq/io.hpp"
#include "stvq/metrics.hpp"
#include "stvq/model.hpp"
#include "stvq/rng.hpp"
#include "stvq/tensor.hpp"
#include "stvq/tokenizer.hpp"

namespace stvq {

enum class LossKind { cosine, l2, ce };
enum class DecoderKind { svr, expectation };

struct TrainConfig {
    ModelConfig model;
    double lr0 = 0.005;
    double momentum = 0.9;
    double decay_factor = 0.1;
    int decay_every = 10;
    int epochs = 10;
    std::size_t batch = 8;
    std::uint64_t seed = 0;
    LossKind loss = LossKind::cosine;
    SvrParams svr;
    std::optional<double> early_stop_train_srocc;
    bool verbose = false;
};

// lr0 * decay_factor^floor(epoch / decay_every): piecewise constant,
// non-increasing, breakpoints exactly at multiples of decay_every.
inline double lr_schedule(int epoch, const TrainConfig& cfg) {
    if (epoch < 0) throw ContractError("lr_schedule: negative epoch");
    return cfg.lr0 * std::pow(cfg.decay_factor, epoch / cfg.decay_every);
}

struct SplitIndices {
    std::vector<std::size_t> train;
    std::vector<std::size_t> test;
};

// Seeded random 80/20 split, stratified per dataset id. Deterministic given
// the seed; groups too small to split (one item) go entirely to train.
inline SplitIndices split_dataset(const Manifest& m, std::uint64_t seed) {
    if (m.items.size() < 5)
        throw InputError("split: need at least 5 items, got " + std::to_string(m.items.size()));
    std::map<std::string, std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < m.items.size(); ++i) groups[m.items[i].dataset].push_back(i);

    SplitIndices out;
    Rng rng(mix_seed(seed, 0x5B117));
    for (auto& [name, idx] : groups) {
        rng.shuffle(idx);
        if (idx.size() < 2) {
            out.train.insert(out.train.end(), idx.begin(), idx.end());
            continue;
        }
        const auto n = static_cast<double>(idx.size());
        std::size_t n_test = static_cast<std::size_t>(std::llround(0.2 * n));
        n_test = std::max<std::size_t>(1, std::min(n_test, idx.size() - 1));
        out.test.insert(out.test.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_test));
        out.train.insert(out.train.end(), idx.begin() + static_cast<std::ptrdiff_t>(n_test), idx.end());
    }
    std::sort(out.train.begin(), out.train.end());
    std::sort(out.test.begin(), out.test.end());
    return out;
}

// Explicit split tags in the manifest win; otherwise fall back to the seeded
// split. Untagged items in a tagged manifest train.
inline SplitIndices effective_split(const Manifest& m, std::uint64_t seed) {
    bool any_tag = false;
    for (const auto& item : m.items)
        if (item.split) any_tag = true;
    if (!any_tag) return split_dataset(m, seed);
    SplitIndices out;
    for (std::size_t i = 0; i < m.items.size(); ++i) {
        if (m.items[i].split && *m.items[i].split == Split::test)
            out.test.push_back(i);
        else
            out.train.push_back(i);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Stage transfer
// ---------------------------------------------------------------------------

// Copies the preprocessing (embedding) state, space-attention stages, MLPs and
// head verbatim from an image-stage checkpoint into a video-mode model.
// Temporal positions start at zero and the fresh time stages have zero output
// projections, so the transferred model computes exactly the image-mode
// function until training moves it.
inline ModelWeights transfer_weights(const Checkpoint& image_ckpt, const ModelConfig& video_cfg,
                                     std::uint64_t seed) {
    if (image_ckpt.stage != "image")
        throw StateError("transfer: source checkpoint stage is '" + image_ckpt.stage +
                         "', expected 'image'");
    video_cfg.validate();
    const ModelConfig& src = image_ckpt.weights.cfg;

    std::string mismatches;
    auto require = [&](bool ok, const std::string& what) {
        if (!ok) mismatches += (mismatches.empty() ? "" : ", ") + what;
    };
    require(video_cfg.mode == NetMode::video, "target mode must be video");
    require(src.patch == video_cfg.patch, "patch size");
    require(src.crop == video_cfg.crop, "crop size");
    require(src.embed_dim == video_cfg.embed_dim, "embed dim");
    require(src.heads == video_cfg.heads, "heads");
    require(src.blocks == video_cfg.blocks, "blocks");
    require(src.anchors == video_cfg.anchors, "anchor count");
    require(src.lo == video_cfg.lo && src.hi == video_cfg.hi, "scaled MOS range");
    if (!mismatches.empty()) throw ConfigError("transfer: incompatible configs: " + mismatches);

    ModelWeights w = make_model_weights(video_cfg);
    auto copy = [](Tensor& dst, const Tensor& from) { dst.vec() = from.vec(); };
    const ModelWeights& s = image_ckpt.weights;
    copy(w.embed.patch_proj, s.embed.patch_proj);
    copy(w.embed.pos_spatial, s.embed.pos_spatial);
    copy(w.embed.pos_mos, s.embed.pos_mos);
    copy(w.embed.mos_token, s.embed.mos_token);
    // pos_temporal stays zero

    Rng rng(mix_seed(seed, 0x717E));
    const double stddev = 1.0 / std::sqrt(static_cast<double>(video_cfg.embed_dim));
    for (std::size_t i = 0; i < w.blocks.size(); ++i) {
        AttentionStageWeights& t = *w.blocks[i].time;
        for (Tensor* fresh : {&t.wq, &t.wk, &t.wv})
            for (std::size_t j = 0; j < fresh->size(); ++j) fresh->data()[j] = rng.trunc_normal(stddev);
        // t.proj stays zero: the stage starts as the identity
        auto& sb = s.blocks[i];
        auto& db = w.blocks[i];
        for (auto [dst, from] : {std::pair{&db.space.ln_gamma, &sb.space.ln_gamma},
                                 {&db.space.ln_beta, &sb.space.ln_beta},
                                 {&db.space.wq, &sb.space.wq},
                                 {&db.space.wk, &sb.space.wk},
                                 {&db.space.wv, &sb.space.wv},
                                 {&db.space.proj, &sb.space.proj},
                                 {&db.mlp.ln_gamma, &sb.mlp.ln_gamma},
                                 {&db.mlp.ln_beta, &sb.mlp.ln_beta},
                                 {&db.mlp.w1, &sb.mlp.w1},
                                 {&db.mlp.b1, &sb.mlp.b1},
                                 {&db.mlp.w2, &sb.mlp.w2},
                                 {&db.mlp.b2, &sb.mlp.b2}})
            copy(*dst, *from);
    }
    copy(w.final_ln_gamma, s.final_ln_gamma);
    copy(w.final_ln_beta, s.final_ln_beta);
    copy(w.head.w1, s.head.w1);
    copy(w.head.b1, s.head.b1);
    copy(w.head.w2, s.head.w2);
    copy(w.head.b2, s.head.b2);
    return w;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct EpochLog {
    int epoch = 0;
    double lr = 0.0;
    double mean_loss = 0.0;
    double train_srocc = 0.0;
    double train_plcc = 0.0;
};

struct TrainResult {
    Checkpoint checkpoint;
    std::vector<EpochLog> log;
    SplitIndices split;
};

namespace detail {

struct TrainItem {
    RawVideo video;
    double c = 0.0; // scaled MOS
    Tensor y_row;   // 1 x m encoded target
    std::vector<double> y;
    std::size_t cls = 0; // nearest anchor (classification surrogate)
    Tensor eval_tokens;  // deterministic clip, center crop (cached)
};

inline Tensor training_loss(LossKind kind, const TrainItem& item, const ModelOutput& out,
                            const Tensor& anchors_row) {
    switch (kind) {
        case LossKind::cosine: return anchor_cosine_loss(item.y_row, out.yhat);
        case LossKind::l2: {
            Tensor decoded = sum(mul(out.yhat, anchors_row));
            Tensor diff = sub(decoded, Tensor::scalar(item.c));
            return mul(diff, diff);
        }
        case LossKind::ce: return cross_entropy_with_logits(out.logits, item.cls);
    }
    throw ContractError("training_loss: unknown loss kind");
}

inline std::vector<std::size_t> clip_indices(const ModelConfig& cfg, std::size_t total) {
    const std::size_t n = cfg.clip_frames();
    return cfg.clip == ClipMode::middle_window ? middle_window_indices(total, n)
                                               : sample_frame_indices(total, n);
}

} // namespace detail

// Shared stage driver. Image mode forces single-frame clips and trains the
// weakened (space-attention-only) network; video mode trains the full stack
// and fits the score decoder on the training targets afterwards.
inline TrainResult train_model(const Manifest& manifest, TrainConfig cfg,
                               const std::optional<Checkpoint>& init = {}) {
    if (cfg.model.mode == NetMode::image) cfg.model.n_frames = 1;
    cfg.model.validate();
    if (cfg.batch == 0) throw ConfigError("train: batch size must be positive");
    if (manifest.items.empty()) throw InputError("train: empty manifest");
    for (const auto& item : manifest.items)
        manifest.range_of(item.dataset); // missing range -> ConfigError

    // starting weights: fresh, resumed, or transferred from the image stage
    ModelWeights weights;
    std::vector<Tensor> velocity;
    if (init) {
        if (init->stage == "image" && cfg.model.mode == NetMode::video) {
            weights = transfer_weights(*init, cfg.model, cfg.seed);
        } else {
            const ModelConfig& c = init->weights.cfg;
            if ((c.mode == NetMode::image) != (cfg.model.mode == NetMode::image))
                throw ConfigError("train: checkpoint mode does not match the requested mode");
            if (c.embed_dim != cfg.model.embed_dim || c.heads != cfg.model.heads ||
                c.blocks != cfg.model.blocks || c.patch != cfg.model.patch ||
                c.crop != cfg.model.crop || c.anchors != cfg.model.anchors)
                throw ConfigError("train: checkpoint geometry does not match the requested config");
            weights = init->weights; // resumes the checkpoint's own config
            velocity = init->velocity;
        }
    } else {
        weights = init_model_weights(cfg.model, cfg.seed);
    }

    const AnchorCodec codec = weights.cfg.codec();
    Tensor anchors_row = Tensor::from(codec.anchors, {1, codec.count});

    const SplitIndices split = effective_split(manifest, cfg.seed);
    if (split.train.empty()) throw InputError("train: no training items after the split");

    std::vector<detail::TrainItem> items;
    items.reserve(split.train.size());
    for (std::size_t idx : split.train) {
        const ManifestItem& mi = manifest.items[idx];
        const DatasetRange& r = manifest.range_of(mi.dataset);
        detail::TrainItem it;
        it.video = read_container(manifest.resolve(mi));
        it.c = scale_mos(mi.mos, r.mos_min, r.mos_max, codec);
        it.y = codec.encode(it.c);
        it.y_row = Tensor::from(it.y, {1, codec.count});
        it.cls = codec.nearest_anchor(it.c);
        items.push_back(std::move(it));
    }

    std::vector<Tensor> params = param_list(weights);
    if (velocity.empty())
        for (const Tensor& p : params) velocity.emplace_back(p.shape());
    if (velocity.size() != params.size())
        throw ConfigError("train: checkpoint optimizer state does not match the parameter list");

    const std::size_t n_frames = weights.cfg.clip_frames();
    std::vector<EpochLog> log;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lr = lr_schedule(epoch, cfg);
        std::vector<std::size_t> order(items.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        Rng shuffle_rng(mix_seed(cfg.seed, 0xE40C, static_cast<std::uint64_t>(epoch)));
        shuffle_rng.shuffle(order);

        double loss_sum = 0.0;
        std::size_t loss_count = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
            const std::size_t end = std::min(order.size(), start + cfg.batch);
            const double inv_batch = 1.0 / static_cast<double>(end - start);
            for (std::size_t bi = start; bi < end; ++bi) {
                detail::TrainItem& item = items[order[bi]];
                Rng crop_rng(mix_seed(cfg.seed, 0xC407 + static_cast<std::uint64_t>(epoch),
                                      order[bi]));
                ClipTokens clip = clip_tokens(
                    item.video, sample_frame_indices(item.video.frames, n_frames),
                    weights.cfg.crop, weights.cfg.patch, CropMode::random, &crop_rng);
                Graph graph;
                GraphScope scope(graph);
                ModelOutput out = model_forward(weights, clip.tokens, n_frames);
                Tensor loss = detail::training_loss(cfg.loss, item, out, anchors_row);
                loss_sum += loss.value();
                ++loss_count;
                graph.backward(scale(loss, inv_batch));
            }
            sgd_momentum_step(params, velocity, lr, cfg.momentum);
            clear_grads(params);
        }

        // deterministic metrics pass: center crop, expectation decode
        std::vector<double> preds, truth;
        for (detail::TrainItem& item : items) {
            if (item.eval_tokens.size() == 0)
                item.eval_tokens = clip_tokens(item.video,
                                               detail::clip_indices(weights.cfg, item.video.frames),
                                               weights.cfg.crop, weights.cfg.patch, CropMode::center)
                                       .tokens;
            ModelOutput out = model_forward(weights, item.eval_tokens, n_frames);
            preds.push_back(expectation_decode({out.yhat.data(), out.yhat.size()}, codec));
            truth.push_back(item.c);
        }
        EpochLog entry{epoch, lr, loss_count ? loss_sum / static_cast<double>(loss_count) : 0.0,
                       0.0, 0.0};
        try {
            entry.train_srocc = srocc(truth, preds);
            entry.train_plcc = plcc(truth, preds);
        } catch (const Error&) {
            entry.train_srocc = std::nan("");
            entry.train_plcc = std::nan("");
        }
        log.push_back(entry);
        if (cfg.verbose)
            std::fprintf(stderr, "epoch %d lr %.6g loss %.6g srocc %.4f plcc %.4f\n", entry.epoch,
                         entry.lr, entry.mean_loss, entry.train_srocc, entry.train_plcc);
        if (cfg.early_stop_train_srocc && entry.train_srocc >= *cfg.early_stop_train_srocc) break;
    }

    Checkpoint ck;
    ck.stage = cfg.model.mode == NetMode::image ? "image" : "video";
    ck.weights = weights;
    ck.velocity = velocity;
    ck.datasets = manifest.datasets;
    if (cfg.model.mode == NetMode::video) {
        std::vector<std::vector<double>> ys;
        std::vector<double> cs;
        for (const auto& item : items) {
            ys.push_back(item.y);
            cs.push_back(item.c);
        }
        SvrParams sp = cfg.svr;
        sp.seed = mix_seed(cfg.seed, 0x5F17);
        ck.decoder = SvrDecoder::fit(ys, cs, codec, sp);
    }
    return {std::move(ck), std::move(log), split};
}

inline TrainResult train_stage_image(const Manifest& manifest, TrainConfig cfg,
                                     const std::optional<Checkpoint>& init = {}) {
    cfg.model.mode = NetMode::image;
    return train_model(manifest, cfg, init);
}

inline TrainResult train_stage_video(const Manifest& manifest, TrainConfig cfg,
                                     const std::optional<Checkpoint>& init = {}) {
    cfg.model.mode = NetMode::video;
    return train_model(manifest, cfg, init);
}

// ---------------------------------------------------------------------------
// Inference
// ---------------------------------------------------------------------------

struct InferResult {
    double score_scaled = 0.0;                 // mean of the three crop scores on [lo, hi]
    std::optional<double> score_raw;           // inverse-scaled when a dataset id is supplied
    std::vector<double> probability;           // elementwise mean of the three crop vectors
    std::array<double, 3> crop_scores{};       // top-left, center, bottom-right
};

// Deterministic protocol: one clip (per the config's clip mode), three fixed
// spatial crops, per-crop decode, arithmetic mean.
inline InferResult infer_video(const Checkpoint& ck, const RawVideo& video,
                               const std::optional<std::string>& dataset = {},
                               DecoderKind decoder = DecoderKind::svr) {
    const ModelWeights& w = ck.weights;
    if (decoder == DecoderKind::svr && (!ck.decoder || !ck.decoder->fitted()))
        throw StateError("infer: checkpoint has no fitted decoder");
    const AnchorCodec codec = w.cfg.codec();
    const std::size_t n_frames = w.cfg.clip_frames();
    const std::vector<std::size_t> idx = detail::clip_indices(w.cfg, video.frames);

    InferResult res;
    res.probability.assign(codec.count, 0.0);
    const std::array<CropMode, 3> crops{CropMode::top_left, CropMode::center,
                                        CropMode::bottom_right};
    for (std::size_t k = 0; k < 3; ++k) {
        ClipTokens clip = clip_tokens(video, idx, w.cfg.crop, w.cfg.patch, crops[k]);
        ModelOutput out = model_forward(w, clip.tokens, n_frames);
        const std::span<const double> yhat{out.yhat.data(), out.yhat.size()};
        res.crop_scores[k] = decoder == DecoderKind::svr ? ck.decoder->predict(yhat)
                                                         : expectation_decode(yhat, codec);
        for (std::size_t i = 0; i < codec.count; ++i) res.probability[i] += yhat[i] / 3.0;
    }
    res.score_scaled = (res.crop_scores[0] + res.crop_scores[1] + res.crop_scores[2]) / 3.0;
    if (dataset) {
        auto it = ck.datasets.find(*dataset);
        if (it == ck.datasets.end())
            throw ConfigError("infer: checkpoint has no MOS range for dataset '" + *dataset + "'");
        res.score_raw = inverse_scale_mos(res.score_scaled, it->second.mos_min, it->second.mos_max,
                                          codec);
    }
    return res;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct EvalRow {
    std::string dataset;
    std::string split; // "train", "test", or "all"
    double srocc_value = 0.0;
    double plcc_value = 0.0;
    std::size_t n = 0;
};

inline std::vector<EvalRow> evaluate_manifest(const Checkpoint& ck, const Manifest& manifest,
                                              DecoderKind decoder = DecoderKind::svr) {
    std::map<std::pair<std::string, std::string>, ScorePairs> groups;
    for (const auto& item : manifest.items) {
        const DatasetRange& r = manifest.range_of(item.dataset);
        RawVideo video = read_container(manifest.resolve(item));
        InferResult res = infer_video(ck, video, std::nullopt, decoder);
        const double raw = inverse_scale_mos(res.score_scaled, r.mos_min, r.mos_max,
                                             ck.weights.cfg.codec());
        const std::string split = !item.split ? "all"
                                  : (*item.split == Split::train ? "train" : "test");
        ScorePairs& g = groups[{item.dataset, split}];
        g.ground.push_back(item.mos);
        g.pred.push_back(raw);
    }
    std::vector<EvalRow> rows;
    for (auto& [key, pairs] : groups) {
        EvalRow row{key.first, key.second, 0.0, 0.0, pairs.ground.size()};
        try {
            row.srocc_value = srocc(pairs);
            row.plcc_value = plcc(pairs);
        } catch (const Error&) {
            row.srocc_value = std::nan("");
            row.plcc_value = std::nan("");
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

} // namespace stvq
