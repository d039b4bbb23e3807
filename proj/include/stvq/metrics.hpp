#pragma once

// Rank and linear correlation between ground-truth and predicted scores.
// Spearman is computed on average-tie ranks (the raw-score-difference variant
// of the textbook shortcut formula is wrong under ties and is kept only as a
// test oracle).

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "stvq/errors.hpp"

namespace stvq {

struct ScorePairs {
    std::vector<double> ground;
    std::vector<double> pred;
};

// 1-based ranks; ties receive the average of the positions they occupy.
inline std::vector<double> ranks(std::span<const double> values) {
    const std::size_t n = values.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
    std::vector<double> r(n);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && values[order[j + 1]] == values[order[i]]) ++j;
        const double avg = 0.5 * static_cast<double>(i + j) + 1.0; // mean of 1-based positions i..j
        for (std::size_t k = i; k <= j; ++k) r[order[k]] = avg;
        i = j + 1;
    }
    return r;
}

namespace detail {

inline bool is_constant(std::span<const double> v) {
    for (double x : v)
        if (x != v.front()) return false;
    return true;
}

inline void check_pairs(const char* op, std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size())
        throw ShapeError(std::string(op) + ": " + std::to_string(a.size()) + " vs " +
                         std::to_string(b.size()) + " scores");
    if (a.size() < 2) throw InputError(std::string(op) + ": need at least 2 score pairs");
    for (double x : a)
        if (!std::isfinite(x)) throw InputError(std::string(op) + ": non-finite score");
    for (double x : b)
        if (!std::isfinite(x)) throw InputError(std::string(op) + ": non-finite score");
    if (is_constant(a) || is_constant(b))
        throw DegenerateInputError(std::string(op) + ": constant input, correlation undefined");
}

} // namespace detail

// Pearson linear correlation.
inline double plcc(std::span<const double> ground, std::span<const double> pred) {
    detail::check_pairs("plcc", ground, pred);
    const std::size_t n = ground.size();
    double mg = 0.0, mp = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        mg += ground[i];
        mp += pred[i];
    }
    mg /= static_cast<double>(n);
    mp /= static_cast<double>(n);
    double num = 0.0, vg = 0.0, vp = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double a = ground[i] - mg;
        const double b = pred[i] - mp;
        num += a * b;
        vg += a * a;
        vp += b * b;
    }
    return num / (std::sqrt(vg) * std::sqrt(vp));
}

// Spearman rank correlation. Without ties this is the shortcut formula
// 1 - 6 sum d_i^2 / (n (n^2 - 1)); with ties it falls back to the Pearson
// correlation of the two rank vectors.
inline double srocc(std::span<const double> ground, std::span<const double> pred) {
    detail::check_pairs("srocc", ground, pred);
    const std::vector<double> rg = ranks(ground);
    const std::vector<double> rp = ranks(pred);
    const std::size_t n = rg.size();

    bool ties = false;
    {
        std::vector<double> sg = rg, sp = rp;
        std::sort(sg.begin(), sg.end());
        std::sort(sp.begin(), sp.end());
        for (std::size_t i = 0; i + 1 < n; ++i)
            if (sg[i] == sg[i + 1] || sp[i] == sp[i + 1]) ties = true;
    }
    if (ties) return plcc(rg, rp);

    double sum_d2 = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = rp[i] - rg[i];
        sum_d2 += d * d;
    }
    const double nn = static_cast<double>(n);
    return 1.0 - 6.0 * sum_d2 / (nn * (nn * nn - 1.0));
}

inline double plcc(const ScorePairs& p) { return plcc(p.ground, p.pred); }
inline double srocc(const ScorePairs& p) { return srocc(p.ground, p.pred); }

} // namespace stvq
