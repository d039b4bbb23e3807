#pragma once

// Video-to-token-sequence pipeline: equal-interval frame sampling, cropping
// (with bilinear upscaling for undersized frames), pixel normalization to
// [-1, 1], non-overlapping patch extraction, linear + positional embedding,
// and assembly of the (K+1) x D sequence with the learnable MOS token at
// row 0. Patch rows are frame-major: frame n contributes rows
// 1 + (n-1)P .. nP, each frame's patches in row-major patch order, every
// patch flattened row-major with the channel index fastest.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "stvq/errors.hpp"
#include "stvq/rng.hpp"
#include "stvq/tensor.hpp"

namespace stvq {

struct RawVideo {
    std::size_t frames = 0;
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::uint8_t> pixels; // frames * height * width * 3, RGB interleaved

    std::size_t frame_bytes() const { return height * width * 3; }
    const std::uint8_t* frame(std::size_t t) const { return pixels.data() + t * frame_bytes(); }
    std::uint8_t* frame(std::size_t t) { return pixels.data() + t * frame_bytes(); }
};

// One frame, same pixel layout.
struct Image {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::uint8_t> pixels;
};

inline Image extract_frame(const RawVideo& v, std::size_t t) {
    if (t >= v.frames) throw IndexError("frame " + std::to_string(t) + " out of range");
    Image f{v.height, v.width, {}};
    f.pixels.assign(v.frame(t), v.frame(t) + v.frame_bytes());
    return f;
}

// Equal-interval sampling: index j = floor(j * T / n). Monotone, always
// starts at frame 0, repeats indices when T < n.
inline std::vector<std::size_t> sample_frame_indices(std::size_t total, std::size_t n) {
    if (total == 0) throw InputError("sample_frames: empty video");
    if (n == 0) throw InputError("sample_frames: need at least one frame");
    std::vector<std::size_t> idx(n);
    for (std::size_t j = 0; j < n; ++j) idx[j] = (j * total) / n;
    return idx;
}

// Contiguous window of n frames centered in the video (alternative test-time
// clip selection); clamps into range and repeats the last frame when T < n.
inline std::vector<std::size_t> middle_window_indices(std::size_t total, std::size_t n) {
    if (total == 0) throw InputError("middle_window: empty video");
    if (n == 0) throw InputError("middle_window: need at least one frame");
    const std::size_t start = total > n ? (total - n) / 2 : 0;
    std::vector<std::size_t> idx(n);
    for (std::size_t j = 0; j < n; ++j) idx[j] = std::min(start + j, total - 1);
    return idx;
}

// Bilinear upscale so that height >= min_h and width >= min_w (no-op when
// already large enough). Aspect ratio is preserved via a common scale factor.
inline Image upscale_to_min(const Image& src, std::size_t min_h, std::size_t min_w) {
    if (src.height >= min_h && src.width >= min_w) return src;
    const double s = std::max(static_cast<double>(min_h) / static_cast<double>(src.height),
                              static_cast<double>(min_w) / static_cast<double>(src.width));
    const std::size_t oh = std::max(min_h, static_cast<std::size_t>(std::llround(src.height * s)));
    const std::size_t ow = std::max(min_w, static_cast<std::size_t>(std::llround(src.width * s)));
    Image out{oh, ow, std::vector<std::uint8_t>(oh * ow * 3)};
    for (std::size_t y = 0; y < oh; ++y) {
        const double sy = (static_cast<double>(y) + 0.5) * static_cast<double>(src.height) /
                              static_cast<double>(oh) - 0.5;
        const double fy = std::max(0.0, std::min(sy, static_cast<double>(src.height - 1)));
        const std::size_t y0 = static_cast<std::size_t>(fy);
        const std::size_t y1 = std::min(y0 + 1, src.height - 1);
        const double wy = fy - static_cast<double>(y0);
        for (std::size_t x = 0; x < ow; ++x) {
            const double sx = (static_cast<double>(x) + 0.5) * static_cast<double>(src.width) /
                                  static_cast<double>(ow) - 0.5;
            const double fx = std::max(0.0, std::min(sx, static_cast<double>(src.width - 1)));
            const std::size_t x0 = static_cast<std::size_t>(fx);
            const std::size_t x1 = std::min(x0 + 1, src.width - 1);
            const double wx = fx - static_cast<double>(x0);
            for (std::size_t c = 0; c < 3; ++c) {
                const double v00 = src.pixels[(y0 * src.width + x0) * 3 + c];
                const double v01 = src.pixels[(y0 * src.width + x1) * 3 + c];
                const double v10 = src.pixels[(y1 * src.width + x0) * 3 + c];
                const double v11 = src.pixels[(y1 * src.width + x1) * 3 + c];
                const double v = (1 - wy) * ((1 - wx) * v00 + wx * v01) +
                                 wy * ((1 - wx) * v10 + wx * v11);
                out.pixels[(y * ow + x) * 3 + c] =
                    static_cast<std::uint8_t>(std::min(255.0, std::max(0.0, std::round(v))));
            }
        }
    }
    return out;
}

enum class CropMode { random, top_left, center, bottom_right };

struct CropOffset {
    std::size_t row = 0;
    std::size_t col = 0;
};

// Top-left corner of the crop window. Random mode draws uniformly from the
// valid range using the supplied stream.
inline CropOffset crop_offset(std::size_t frame_h, std::size_t frame_w, std::size_t h,
                              std::size_t w, CropMode mode, Rng* rng = nullptr) {
    if (h == 0 || w == 0) throw InputError("crop: zero crop extent");
    if (frame_h < h || frame_w < w)
        throw InputError("crop: window " + std::to_string(h) + "x" + std::to_string(w) +
                         " exceeds frame " + std::to_string(frame_h) + "x" + std::to_string(frame_w));
    switch (mode) {
        case CropMode::top_left: return {0, 0};
        case CropMode::center: return {(frame_h - h) / 2, (frame_w - w) / 2};
        case CropMode::bottom_right: return {frame_h - h, frame_w - w};
        case CropMode::random:
            if (!rng) throw ContractError("crop: random mode requires a random stream");
            return {rng->uniform_index(frame_h - h + 1), rng->uniform_index(frame_w - w + 1)};
    }
    throw ContractError("crop: unknown mode");
}

inline Image crop_at(const Image& src, CropOffset at, std::size_t h, std::size_t w) {
    if (at.row + h > src.height || at.col + w > src.width)
        throw IndexError("crop: window out of range");
    Image out{h, w, std::vector<std::uint8_t>(h * w * 3)};
    for (std::size_t y = 0; y < h; ++y)
        std::copy(src.pixels.begin() + ((at.row + y) * src.width + at.col) * 3,
                  src.pixels.begin() + ((at.row + y) * src.width + at.col + w) * 3,
                  out.pixels.begin() + y * w * 3);
    return out;
}

// Undersized frames are upscaled first so the patch grid stays constant.
inline Image crop_frame(const Image& frame, std::size_t h, std::size_t w, CropMode mode,
                        Rng* rng = nullptr) {
    const Image sized = upscale_to_min(frame, h, w);
    return crop_at(sized, crop_offset(sized.height, sized.width, h, w, mode, rng), h, w);
}

// x -> (x/255 - 0.5) / 0.5, per channel; range [-1, 1].
inline std::vector<double> normalize_pixels(const Image& frame) {
    std::vector<double> out(frame.pixels.size());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = (static_cast<double>(frame.pixels[i]) / 255.0 - 0.5) / 0.5;
    return out;
}

// Non-overlapping s x s patches in row-major patch order; each token is the
// patch flattened row-major with channel fastest. Pixels beyond the floor
// grid are discarded. Returns P tokens of length s*s*3, concatenated.
inline std::vector<double> patchify(const std::vector<double>& frame, std::size_t h, std::size_t w,
                                    std::size_t s) {
    if (s == 0) throw InputError("patchify: zero patch size");
    if (s > h || s > w)
        throw InputError("patchify: patch " + std::to_string(s) + " exceeds frame " +
                         std::to_string(h) + "x" + std::to_string(w));
    const std::size_t gh = h / s, gw = w / s, d = s * s * 3;
    std::vector<double> tokens(gh * gw * d);
    std::size_t tok = 0;
    for (std::size_t pr = 0; pr < gh; ++pr)
        for (std::size_t pc = 0; pc < gw; ++pc) {
            double* dst = tokens.data() + tok * d;
            for (std::size_t y = 0; y < s; ++y)
                for (std::size_t x = 0; x < s; ++x)
                    for (std::size_t c = 0; c < 3; ++c)
                        *dst++ = frame[((pr * s + y) * w + (pc * s + x)) * 3 + c];
            ++tok;
        }
    return tokens;
}

// Learnable embedding state. The projection maps token length S*S*3 to the
// model width D (square at the default geometry). Positions are factorized
// into spatial + temporal tables whose rows sum to the joint position vector;
// image-mode models carry no temporal table.
struct EmbeddingWeights {
    Tensor patch_proj;   // (S*S*3) x D
    Tensor pos_spatial;  // P x D
    Tensor pos_temporal; // N x D (empty in image mode)
    Tensor pos_mos;      // 1 x D
    Tensor mos_token;    // 1 x D

    bool has_temporal() const { return pos_temporal.size() > 0; }
};

// E0 = [mos_token + pos_mos; X * patch_proj + pos_spatial[p] + pos_temporal[n]].
// X holds K = P*N token rows, frame-major.
inline Tensor embed_tokens(const Tensor& tokens, const EmbeddingWeights& w, std::size_t patches,
                           std::size_t frames) {
    const std::size_t k = patches * frames;
    if (tokens.rows() != k)
        throw ContractError("embed: expected " + std::to_string(k) + " token rows, got " +
                            std::to_string(tokens.rows()));
    if (tokens.cols() != w.patch_proj.rows())
        throw ShapeError("embed: token length " + std::to_string(tokens.cols()) +
                         " vs projection input " + std::to_string(w.patch_proj.rows()));
    if (w.pos_spatial.rows() != patches)
        throw ShapeError("embed: spatial table has " + std::to_string(w.pos_spatial.rows()) +
                         " rows, expected " + std::to_string(patches));
    if (w.has_temporal() && w.pos_temporal.rows() < frames)
        throw ShapeError("embed: temporal table has " + std::to_string(w.pos_temporal.rows()) +
                         " rows, need at least " + std::to_string(frames));

    Tensor projected = matmul(tokens, w.patch_proj); // K x D
    std::vector<std::size_t> p_idx(k), n_idx(k);
    for (std::size_t r = 0; r < k; ++r) {
        p_idx[r] = r % patches;
        n_idx[r] = r / patches;
    }
    Tensor pos = gather_rows(w.pos_spatial, p_idx);
    if (w.has_temporal()) pos = add(pos, gather_rows(w.pos_temporal, n_idx));
    Tensor patch_rows = add(projected, pos);
    Tensor mos_row = add(w.mos_token, w.pos_mos);
    return concat_rows({mos_row, patch_rows});
}

// Full preprocessing of one clip: sample -> upscale -> crop (one window for
// the whole clip) -> normalize -> patchify -> stack. Returns the constant
// K x (S*S*3) token matrix.
struct ClipTokens {
    Tensor tokens;
    std::size_t patches = 0;
    std::size_t frames = 0;
};

inline ClipTokens clip_tokens(const RawVideo& video, const std::vector<std::size_t>& frame_indices,
                              std::size_t crop, std::size_t patch, CropMode mode,
                              Rng* rng = nullptr) {
    if (video.frames == 0) throw InputError("clip_tokens: empty video");
    const std::size_t n = frame_indices.size();
    const std::size_t grid = crop / patch;
    const std::size_t p = grid * grid;
    const std::size_t d = patch * patch * 3;

    // the crop window is drawn once and shared by all frames of the clip so
    // that patch positions correspond across time
    Image first = upscale_to_min(extract_frame(video, frame_indices[0]), crop, crop);
    const CropOffset at = crop_offset(first.height, first.width, crop, crop, mode, rng);

    Tensor tokens({n * p, d});
    for (std::size_t j = 0; j < n; ++j) {
        Image frame = j == 0 ? first : upscale_to_min(extract_frame(video, frame_indices[j]), crop, crop);
        Image cropped = crop_at(frame, at, crop, crop);
        const std::vector<double> norm = normalize_pixels(cropped);
        const std::vector<double> toks = patchify(norm, crop, crop, patch);
        std::copy(toks.begin(), toks.end(), tokens.data() + j * p * d);
    }
    return {tokens, p, n};
}

} // namespace stvq
