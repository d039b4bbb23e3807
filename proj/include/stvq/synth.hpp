#pragma once

// Procedural test-fixture videos: smooth animated backgrounds with a moving
// bright rectangle, degraded by box blur and additive noise whose strength
// grows monotonically with the assigned degradation level. MOS decreases
// strictly with the level, so quality is learnable by construction.
// Generation is fully seeded; identical specs produce byte-identical files.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "stvq/errors.hpp"
#include "stvq/io.hpp"
#include "stvq/rng.hpp"
#include "stvq/tokenizer.hpp"

namespace stvq {

struct SynthSpec {
    std::size_t count = 8;
    std::size_t frames = 8;
    std::size_t size = 64; // square frames
    std::size_t levels = 0; // distinct degradation levels; 0 means one per video
    double mos_min = 1.0;
    double mos_max = 5.0;
    std::uint64_t seed = 0;
};

namespace detail {

inline void box_blur(std::vector<double>& img, std::size_t h, std::size_t w, std::size_t radius) {
    if (radius == 0) return;
    std::vector<double> tmp(img.size());
    const auto at = [&](const std::vector<double>& v, std::size_t y, std::size_t x, std::size_t c) {
        return v[(y * w + x) * 3 + c];
    };
    // horizontal then vertical pass
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
            for (std::size_t c = 0; c < 3; ++c) {
                double acc = 0.0;
                std::size_t cnt = 0;
                for (std::size_t dx = x > radius ? x - radius : 0;
                     dx <= std::min(w - 1, x + radius); ++dx, ++cnt)
                    acc += at(img, y, dx, c);
                tmp[(y * w + x) * 3 + c] = acc / static_cast<double>(cnt);
            }
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
            for (std::size_t c = 0; c < 3; ++c) {
                double acc = 0.0;
                std::size_t cnt = 0;
                for (std::size_t dy = y > radius ? y - radius : 0;
                     dy <= std::min(h - 1, y + radius); ++dy, ++cnt)
                    acc += at(tmp, dy, x, c);
                img[(y * w + x) * 3 + c] = acc / static_cast<double>(cnt);
            }
}

inline RawVideo synth_video(const SynthSpec& spec, double level, Rng& rng) {
    const std::size_t s = spec.size, t = spec.frames;
    RawVideo v{t, s, s, std::vector<std::uint8_t>(t * s * s * 3)};

    // per-video content parameters
    double freq_x[3], freq_y[3], phase[3], amp[3];
    for (std::size_t c = 0; c < 3; ++c) {
        freq_x[c] = rng.uniform(0.5, 2.5);
        freq_y[c] = rng.uniform(0.5, 2.5);
        phase[c] = rng.uniform(0.0, 6.28);
        amp[c] = rng.uniform(30.0, 70.0);
    }
    const double rect_w = rng.uniform(0.15, 0.3) * static_cast<double>(s);
    const double rect_h = rng.uniform(0.15, 0.3) * static_cast<double>(s);
    double rx = rng.uniform(0.0, static_cast<double>(s) - rect_w);
    double ry = rng.uniform(0.0, static_cast<double>(s) - rect_h);
    const double vx = rng.uniform(-2.0, 2.0), vy = rng.uniform(-2.0, 2.0);
    const double rect_gain = rng.uniform(40.0, 80.0);

    const std::size_t blur_radius = static_cast<std::size_t>(std::floor(level * 3.0 + 0.5));
    const double noise_amp = 70.0 * level;

    std::vector<double> frame(s * s * 3);
    for (std::size_t f = 0; f < t; ++f) {
        const double cx = std::fmod(rx + vx * static_cast<double>(f) + 4.0 * s, static_cast<double>(s));
        const double cy = std::fmod(ry + vy * static_cast<double>(f) + 4.0 * s, static_cast<double>(s));
        for (std::size_t y = 0; y < s; ++y)
            for (std::size_t x = 0; x < s; ++x) {
                const bool inside = static_cast<double>(x) >= cx &&
                                    static_cast<double>(x) < cx + rect_w &&
                                    static_cast<double>(y) >= cy &&
                                    static_cast<double>(y) < cy + rect_h;
                for (std::size_t c = 0; c < 3; ++c) {
                    const double u = static_cast<double>(x) / static_cast<double>(s);
                    const double w2 = static_cast<double>(y) / static_cast<double>(s);
                    double val = 128.0 +
                                 amp[c] * std::sin(6.283185307179586 *
                                                   (freq_x[c] * u + freq_y[c] * w2) + phase[c] +
                                                   0.21 * static_cast<double>(f));
                    if (inside) val += rect_gain;
                    frame[(y * s + x) * 3 + c] = val;
                }
            }
        box_blur(frame, s, s, blur_radius);
        std::uint8_t* dst = v.frame(f);
        for (std::size_t i = 0; i < frame.size(); ++i) {
            const double noisy = frame[i] + rng.uniform(-noise_amp, noise_amp);
            dst[i] = static_cast<std::uint8_t>(std::min(255.0, std::max(0.0, std::round(noisy))));
        }
    }
    return v;
}

} // namespace detail

// Writes `count` container files plus a manifest (without split tags; callers
// split and re-save as needed). Returns the manifest.
inline Manifest make_synthetic_dataset(const std::filesystem::path& out_dir, const SynthSpec& spec) {
    if (spec.count == 0) throw InputError("make_synth: need at least one video");
    if (spec.size < 2 || spec.frames == 0) throw InputError("make_synth: degenerate video extents");
    if (!(spec.mos_max > spec.mos_min)) throw ConfigError("make_synth: degenerate MOS range");
    std::filesystem::create_directories(out_dir);

    const std::size_t levels = spec.levels == 0 ? spec.count : spec.levels;
    Manifest m;
    m.base_dir = out_dir;
    m.datasets["synth"] = {spec.mos_min, spec.mos_max};

    for (std::size_t i = 0; i < spec.count; ++i) {
        const std::size_t level_index = i % levels;
        const double level =
            levels == 1 ? 0.0 : static_cast<double>(level_index) / static_cast<double>(levels - 1);
        const double mos = spec.mos_max - (spec.mos_max - spec.mos_min) * level;
        Rng rng(mix_seed(spec.seed, 0x5EED, i));
        RawVideo v = detail::synth_video(spec, level, rng);

        char name[32];
        std::snprintf(name, sizeof(name), "video_%03zu.svqv", i);
        write_container(v, out_dir / name);
        m.items.push_back({name, mos, "synth", std::nullopt});
    }
    return m;
}

} // namespace stvq
