#pragma once

// Anchor-point score coding and the losses built on it: a scalar score on
// [lo, hi] is soft-encoded against uniformly spaced anchors via a softmax of
// negative squared distances, the head predicts such a vector, and training
// minimizes one minus the cosine similarity between the two. Decoding back to
// a scalar goes through either a fitted linear epsilon-insensitive SVR (the
// default at inference) or the analytic expectation over anchors.

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "stvq/errors.hpp"
#include "stvq/rng.hpp"
#include "stvq/tensor.hpp"

namespace stvq {

struct AnchorCodec {
    std::size_t count = 0;
    double lo = 0.0;
    double hi = 0.0;
    std::vector<double> anchors;

    static AnchorCodec make(std::size_t m, double lo, double hi) {
        if (m < 2) throw ConfigError("anchors: need at least 2 anchor points, got " + std::to_string(m));
        if (!(hi > lo)) throw ConfigError("anchors: upper bound must exceed lower bound");
        AnchorCodec c;
        c.count = m;
        c.lo = lo;
        c.hi = hi;
        c.anchors.resize(m);
        for (std::size_t i = 0; i < m; ++i)
            c.anchors[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(m - 1);
        return c;
    }

    double spacing() const { return (hi - lo) / static_cast<double>(count - 1); }

    std::size_t nearest_anchor(double c) const {
        std::size_t best = 0;
        double bestd = std::fabs(c - anchors[0]);
        for (std::size_t i = 1; i < count; ++i) {
            const double d = std::fabs(c - anchors[i]);
            if (d < bestd) {
                bestd = d;
                best = i;
            }
        }
        return best;
    }

    // y_i = exp(-(c - b_i)^2) / sum_k exp(-(c - b_k)^2), with the max logit
    // subtracted. Evaluated through the factored form (d_i - dmin)(d_i + dmin)
    // in extended precision so any finite c yields a valid probability vector.
    std::vector<double> encode(double c) const {
        std::vector<long double> d(count);
        long double dmin = -1.0L;
        for (std::size_t i = 0; i < count; ++i) {
            d[i] = std::fabs(static_cast<long double>(c) - static_cast<long double>(anchors[i]));
            if (dmin < 0.0L || d[i] < dmin) dmin = d[i];
        }
        std::vector<long double> e(count);
        long double sum = 0.0L;
        for (std::size_t i = 0; i < count; ++i) {
            e[i] = std::exp(-((d[i] - dmin) * (d[i] + dmin)));
            sum += e[i];
        }
        std::vector<double> y(count);
        for (std::size_t i = 0; i < count; ++i) y[i] = static_cast<double>(e[i] / sum);
        return y;
    }
};

// Affine map sending [raw_min, raw_max] onto [codec.lo, codec.hi]; out-of-range
// inputs clamp (reported through *clamped so the caller can warn).
inline double scale_mos(double raw, double raw_min, double raw_max, const AnchorCodec& codec,
                        bool* clamped = nullptr) {
    if (!(raw_max > raw_min))
        throw ConfigError("scale_mos: degenerate raw range [" + std::to_string(raw_min) + ", " +
                          std::to_string(raw_max) + "]");
    double t = (raw - raw_min) / (raw_max - raw_min);
    if (clamped) *clamped = (t < 0.0 || t > 1.0);
    t = std::min(1.0, std::max(0.0, t));
    return codec.lo + t * (codec.hi - codec.lo);
}

inline double inverse_scale_mos(double c, double raw_min, double raw_max, const AnchorCodec& codec) {
    const double t = (c - codec.lo) / (codec.hi - codec.lo);
    return raw_min + t * (raw_max - raw_min);
}

// Sum_i b_i * yhat_i; exact on one-hot inputs.
inline double expectation_decode(std::span<const double> yhat, const AnchorCodec& codec) {
    if (yhat.size() != codec.count)
        throw ShapeError("expectation_decode: vector length " + std::to_string(yhat.size()) +
                         " vs " + std::to_string(codec.count) + " anchors");
    double s = 0.0;
    for (std::size_t i = 0; i < yhat.size(); ++i) s += codec.anchors[i] * yhat[i];
    return s;
}

// ---------------------------------------------------------------------------
// Cosine regression loss: 1 - <a, b> / (|a| |b|).
// ---------------------------------------------------------------------------

namespace detail {
// The denominator uses sqrt(na2 * nb2) so identical inputs give exactly zero.
inline double cosine_loss_parts(std::span<const double> a, std::span<const double> b,
                                double& dot, double& na2, double& nb2) {
    if (a.size() != b.size())
        throw ShapeError("cosine loss: lengths disagree: " + std::to_string(a.size()) + " vs " +
                         std::to_string(b.size()));
    dot = na2 = nb2 = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na2 += a[i] * a[i];
        nb2 += b[i] * b[i];
    }
    if (na2 == 0.0 || nb2 == 0.0) throw ContractError("cosine loss: zero-norm input");
    return 1.0 - dot / std::sqrt(na2 * nb2);
}
} // namespace detail

inline double anchor_cosine_loss_value(std::span<const double> a, std::span<const double> b) {
    double dot, na2, nb2;
    return detail::cosine_loss_parts(a, b, dot, na2, nb2);
}

// Recorded-op form; gradients flow into either argument.
inline Tensor anchor_cosine_loss(const Tensor& y, const Tensor& yhat) {
    double dot, na2, nb2;
    const double loss = detail::cosine_loss_parts({y.data(), y.size()}, {yhat.data(), yhat.size()},
                                                  dot, na2, nb2);
    Tensor out = Tensor::scalar(loss);

    Graph* g = detail::active_graph();
    if (g && (detail::tracked(y, g) || detail::tracked(yhat, g))) {
        auto ad = y.ptr(), bd = yhat.ptr(), od = out.ptr();
        const bool ga = detail::tracked(y, g), gb = detail::tracked(yhat, g);
        const double denom = std::sqrt(na2 * nb2);
        const double s = dot / denom;
        g->record("anchor_cosine_loss", {detail::node_id(y, g), detail::node_id(yhat, g)}, od,
                  [=](Graph& gr) {
                      const auto* go = gr.output_grad(*od);
                      if (!go) return;
                      const double up = (*go)[0];
                      const std::size_t n = ad->data.size();
                      std::vector<double> d(n);
                      if (ga) {
                          for (std::size_t i = 0; i < n; ++i)
                              d[i] = -up * (bd->data[i] / denom - s * ad->data[i] / na2);
                          gr.accumulate(*ad, d.data(), n);
                      }
                      if (gb) {
                          for (std::size_t i = 0; i < n; ++i)
                              d[i] = -up * (ad->data[i] / denom - s * bd->data[i] / nb2);
                          gr.accumulate(*bd, d.data(), n);
                      }
                  });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Heads over the final MOS-token embedding.
// ---------------------------------------------------------------------------

// Two-layer MLP (hidden width = input width, GELU) producing one logit per
// anchor (regression) or per class (classification pretraining).
struct HeadWeights {
    Tensor w1, b1; // D x D, D
    Tensor w2, b2; // D x out, out
};

inline Tensor head_logits(const Tensor& mos_row, const HeadWeights& w) {
    Tensor h = gelu(add(matmul(mos_row, w.w1), w.b1));
    return add(matmul(h, w.w2), w.b2);
}

inline Tensor probability_head(const Tensor& mos_row, const HeadWeights& w) {
    return softmax(head_logits(mos_row, w), 1);
}

// Fused log-softmax NLL on a single logit row.
inline Tensor cross_entropy_with_logits(const Tensor& logits, std::size_t target) {
    const std::size_t n = logits.size();
    if (target >= n)
        throw IndexError("cross_entropy: target " + std::to_string(target) + " out of range for " +
                         std::to_string(n) + " classes");
    double mx = logits.data()[0];
    for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, logits.data()[i]);
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) sum += std::exp(logits.data()[i] - mx);
    const double lse = std::log(sum) + mx;
    Tensor out = Tensor::scalar(lse - logits.data()[target]);

    Graph* g = detail::active_graph();
    if (g && detail::tracked(logits, g)) {
        auto ld = logits.ptr(), od = out.ptr();
        g->record("cross_entropy", {detail::node_id(logits, g)}, od, [=](Graph& gr) {
            const auto* go = gr.output_grad(*od);
            if (!go) return;
            std::vector<double> d(n);
            double m2 = ld->data[0];
            for (std::size_t i = 1; i < n; ++i) m2 = std::max(m2, ld->data[i]);
            double s2 = 0.0;
            for (std::size_t i = 0; i < n; ++i) s2 += std::exp(ld->data[i] - m2);
            for (std::size_t i = 0; i < n; ++i) {
                const double p = std::exp(ld->data[i] - m2) / s2;
                d[i] = (*go)[0] * (p - (i == target ? 1.0 : 0.0));
            }
            gr.accumulate(*ld, d.data(), n);
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Linear epsilon-insensitive SVR, fitted by seeded stochastic subgradient
// descent on  1/2 |w|^2 + C sum_i max(0, |w.y_i + b - c_i| - eps).
// ---------------------------------------------------------------------------

struct SvrParams {
    double c = 1.0;
    double epsilon_frac = 0.025; // eps = epsilon_frac * (hi - lo)
    int epochs = 1000;
    double step = 0.01;
    std::uint64_t seed = 1;
};

class SvrDecoder {
public:
    SvrDecoder() = default;

    static SvrDecoder fit(const std::vector<std::vector<double>>& ys, const std::vector<double>& cs,
                          const AnchorCodec& codec, const SvrParams& params = {}) {
        if (ys.size() != cs.size())
            throw ShapeError("svr_fit: " + std::to_string(ys.size()) + " vectors vs " +
                             std::to_string(cs.size()) + " targets");
        if (ys.size() < 2) throw InputError("svr_fit: need at least 2 training pairs");
        for (const auto& y : ys)
            if (y.size() != codec.count)
                throw ShapeError("svr_fit: vector length " + std::to_string(y.size()) + " vs " +
                                 std::to_string(codec.count) + " anchors");

        SvrDecoder d;
        d.w_.assign(codec.count, 0.0);
        d.b_ = 0.0;
        d.epsilon_ = params.epsilon_frac * (codec.hi - codec.lo);
        d.lo_ = codec.lo;
        d.hi_ = codec.hi;

        const double inv_n = 1.0 / static_cast<double>(ys.size());
        Rng rng(params.seed);
        std::vector<std::size_t> order(ys.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

        // Tail-averaged iterates (second half of the run) damp the noise ball
        // of the fixed-step subgradient walk.
        std::vector<double> w_avg(codec.count, 0.0);
        double b_avg = 0.0;
        std::size_t avg_n = 0;
        const int avg_from = params.epochs / 2;

        for (int epoch = 0; epoch < params.epochs; ++epoch) {
            rng.shuffle(order);
            for (std::size_t idx : order) {
                const auto& y = ys[idx];
                double r = d.b_ - cs[idx];
                for (std::size_t j = 0; j < y.size(); ++j) r += d.w_[j] * y[j];
                const double sgn = (std::fabs(r) > d.epsilon_) ? (r > 0.0 ? 1.0 : -1.0) : 0.0;
                for (std::size_t j = 0; j < y.size(); ++j)
                    d.w_[j] -= params.step * (d.w_[j] * inv_n + params.c * sgn * y[j]);
                d.b_ -= params.step * params.c * sgn;
                if (epoch >= avg_from) {
                    for (std::size_t j = 0; j < w_avg.size(); ++j) w_avg[j] += d.w_[j];
                    b_avg += d.b_;
                    ++avg_n;
                }
            }
        }
        if (avg_n > 0) {
            for (std::size_t j = 0; j < w_avg.size(); ++j) d.w_[j] = w_avg[j] / static_cast<double>(avg_n);
            d.b_ = b_avg / static_cast<double>(avg_n);
        }
        d.fitted_ = true;
        return d;
    }

    static SvrDecoder from_parts(std::vector<double> w, double b, double epsilon, double lo, double hi) {
        SvrDecoder d;
        d.w_ = std::move(w);
        d.b_ = b;
        d.epsilon_ = epsilon;
        d.lo_ = lo;
        d.hi_ = hi;
        d.fitted_ = true;
        return d;
    }

    double predict(std::span<const double> yhat) const {
        if (!fitted_) throw StateError("svr_predict: decoder has not been fitted");
        if (yhat.size() != w_.size())
            throw ShapeError("svr_predict: vector length " + std::to_string(yhat.size()) + " vs " +
                             std::to_string(w_.size()) + " weights");
        double p = b_;
        for (std::size_t i = 0; i < yhat.size(); ++i) p += w_[i] * yhat[i];
        return std::min(hi_, std::max(lo_, p));
    }

    bool fitted() const { return fitted_; }
    const std::vector<double>& weights() const { return w_; }
    double bias() const { return b_; }
    double epsilon() const { return epsilon_; }
    double lo() const { return lo_; }
    double hi() const { return hi_; }

private:
    std::vector<double> w_;
    double b_ = 0.0;
    double epsilon_ = 0.0;
    double lo_ = 0.0;
    double hi_ = 1.0;
    bool fitted_ = false;
};

} // namespace stvq
