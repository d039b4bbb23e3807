#pragma once

// Finite-difference verification of the full training objective. The
// analytic gradients come from one recorded backward pass; the reference
// values are central differences of pure (non-recording) forward passes, so
// the two paths share no differentiation machinery.

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "stvq/anchors.hpp"
#include "stvq/model.hpp"
#include "stvq/rng.hpp"
#include "stvq/tensor.hpp"

namespace stvq {

// Relative error with a floor: exact relative comparison above the floor
// magnitude, absolute (floor-scaled) below it where finite-difference noise
// dominates.
inline double gradcheck_rel_err(double a, double b, double floor = 1e-3) {
    return std::fabs(a - b) / std::max({std::fabs(a), std::fabs(b), floor});
}

struct GradCheckReport {
    std::size_t tensors = 0;
    std::size_t elements = 0;
    double max_rel_err = 0.0;
    std::string worst_tensor;
    bool passed = false;
    std::vector<std::pair<std::string, double>> per_tensor;
};

// The small end-to-end configuration used for gradient integrity checks:
// D=24, A=2, I=2, N=2, P=4 (crop 4, patch 2), m=6 anchors.
inline ModelConfig grad_check_config() {
    ModelConfig cfg;
    cfg.n_frames = 2;
    cfg.crop = 4;
    cfg.patch = 2;
    cfg.embed_dim = 24;
    cfg.heads = 2;
    cfg.blocks = 2;
    cfg.anchors = 6;
    cfg.mode = NetMode::video;
    return cfg;
}

// Checks every parameter of the cosine-loss objective against central finite
// differences (step h) at a random point.
inline GradCheckReport run_network_grad_check(std::uint64_t seed = 7, double tol = 1e-3,
                                              double h = 1e-4) {
    const ModelConfig cfg = grad_check_config();
    ModelWeights w = init_model_weights(cfg, seed);
    Rng rng(mix_seed(seed, 0x6C8EC));

    // a random, well-scaled point: larger than init so attention is not
    // uniform and every gradient path carries signal
    for (auto& [name, t] : named_params(w)) {
        const bool is_gamma = name.ends_with("ln_gamma") || name.ends_with(".gamma");
        for (std::size_t i = 0; i < t.size(); ++i)
            t.data()[i] = is_gamma ? 1.0 + rng.uniform(-0.2, 0.2) : rng.uniform(-0.25, 0.25);
    }

    Tensor tokens({cfg.patches_per_frame() * cfg.n_frames, cfg.token_dim()});
    for (std::size_t i = 0; i < tokens.size(); ++i) tokens.data()[i] = rng.uniform(-1.0, 1.0);
    const AnchorCodec codec = cfg.codec();
    Tensor target = Tensor::from(codec.encode(rng.uniform(codec.lo, codec.hi)), {1, codec.count});

    auto forward = [&]() -> double {
        return anchor_cosine_loss(target, model_forward(w, tokens, cfg.n_frames).yhat).value();
    };

    Graph graph;
    {
        GraphScope scope(graph);
        graph.backward(anchor_cosine_loss(target, model_forward(w, tokens, cfg.n_frames).yhat));
    }

    GradCheckReport report;
    for (auto& [name, t] : named_params(w)) {
        const std::vector<double>& analytic = t.grad();
        double worst = 0.0;
        for (std::size_t i = 0; i < t.size(); ++i) {
            const double orig = t.data()[i];
            t.data()[i] = orig + h;
            const double fp = forward();
            t.data()[i] = orig - h;
            const double fm = forward();
            t.data()[i] = orig;
            const double fd = (fp - fm) / (2.0 * h);
            const double a = analytic.empty() ? 0.0 : analytic[i];
            worst = std::max(worst, gradcheck_rel_err(a, fd));
        }
        report.per_tensor.emplace_back(name, worst);
        report.tensors += 1;
        report.elements += t.size();
        if (worst > report.max_rel_err) {
            report.max_rel_err = worst;
            report.worst_tensor = name;
        }
    }
    report.passed = report.max_rel_err < tol;
    return report;
}

} // namespace stvq
