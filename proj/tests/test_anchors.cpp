#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "oracles.hpp"
#include "stvq/anchors.hpp"
#include "stvq/rng.hpp"

using namespace stvq;

TEST_CASE("anchor generation") {
    SECTION("six anchors on [0, 5] are the integers") {
        auto c = AnchorCodec::make(6, 0.0, 5.0);
        CHECK(c.anchors == std::vector<double>{0, 1, 2, 3, 4, 5});
    }
    SECTION("three anchors on [1, 5]") {
        auto c = AnchorCodec::make(3, 1.0, 5.0);
        CHECK(c.anchors == std::vector<double>{1, 3, 5});
    }
    SECTION("two anchors are the endpoints") {
        auto c = AnchorCodec::make(2, -1.0, 2.0);
        CHECK(c.anchors == std::vector<double>{-1, 2});
    }
    SECTION("invalid configs raise") {
        CHECK_THROWS_AS(AnchorCodec::make(1, 0, 5), ConfigError);
        CHECK_THROWS_AS(AnchorCodec::make(4, 5, 5), ConfigError);
        CHECK_THROWS_AS(AnchorCodec::make(4, 5, 2), ConfigError);
    }
}

TEST_CASE("mos scaling") {
    auto codec = AnchorCodec::make(6, 0.0, 5.0);

    SECTION("KoNViD-1k style range maps endpoints to bounds") {
        CHECK(scale_mos(1.22, 1.22, 4.64, codec) == 0.0);
        CHECK(scale_mos(4.64, 1.22, 4.64, codec) == 5.0);
    }
    SECTION("midpoint maps to the scaled midpoint") {
        CHECK(scale_mos(2.5, 0.0, 5.0, codec) == Catch::Approx(2.5));
        CHECK(scale_mos(50.0, 0.0, 100.0, codec) == Catch::Approx(2.5));
    }
    SECTION("quarter point maps affinely") {
        CHECK(scale_mos(1.0 + 0.25 * 3.0, 1.0, 4.0, codec) == Catch::Approx(0.25 * 5.0));
    }
    SECTION("out-of-range input clamps and reports") {
        bool clamped = false;
        CHECK(scale_mos(-3.0, 0.0, 1.0, codec, &clamped) == 0.0);
        CHECK(clamped);
        clamped = false;
        CHECK(scale_mos(0.5, 0.0, 1.0, codec, &clamped) == Catch::Approx(2.5));
        CHECK(!clamped);
    }
    SECTION("inverse undoes the map") {
        const double c = scale_mos(3.1, 1.22, 4.64, codec);
        CHECK(inverse_scale_mos(c, 1.22, 4.64, codec) == Catch::Approx(3.1));
    }
    SECTION("degenerate range raises") {
        CHECK_THROWS_AS(scale_mos(1.0, 2.0, 2.0, codec), ConfigError);
    }
}

TEST_CASE("mos encoding") {
    auto codec = AnchorCodec::make(6, 0.0, 5.0);

    SECTION("frozen c=2 vector") {
        auto y = codec.encode(2.0);
        // independently derived values
        CHECK(y[0] == Catch::Approx(0.0103).margin(5e-4));
        CHECK(y[1] == Catch::Approx(0.2076).margin(5e-4));
        CHECK(y[2] == Catch::Approx(0.5642).margin(5e-4));
        CHECK(y[3] == Catch::Approx(0.2076).margin(5e-4));
        CHECK(y[4] == Catch::Approx(0.0103).margin(5e-4));
        CHECK(y[5] == Catch::Approx(0.00007).margin(5e-5));
        auto ref = oracle::encode_mos(2.0, codec.anchors);
        for (std::size_t i = 0; i < 6; ++i) CHECK(std::fabs(y[i] - ref[i]) < 1e-12);
    }

    SECTION("on-anchor c peaks there and is symmetric") {
        auto y = codec.encode(3.0);
        std::size_t arg = 0;
        for (std::size_t i = 1; i < 6; ++i)
            if (y[i] > y[arg]) arg = i;
        CHECK(arg == 3);
        CHECK(y[2] == Catch::Approx(y[4]).epsilon(1e-12));
        CHECK(y[1] == Catch::Approx(y[5]).epsilon(1e-12));
    }

    SECTION("midpoint between anchors ties the two") {
        auto y = codec.encode(2.5);
        CHECK(y[2] == y[3]);
    }

    SECTION("argmax is the nearest anchor; ties go to the lower index") {
        Rng rng(61);
        for (int rep = 0; rep < 200; ++rep) {
            const double c = rng.uniform(-2.0, 7.0);
            auto y = codec.encode(c);
            std::size_t arg = 0;
            for (std::size_t i = 1; i < 6; ++i)
                if (y[i] > y[arg]) arg = i;
            CHECK(arg == codec.nearest_anchor(c));
        }
        auto tie = codec.encode(2.5);
        std::size_t arg = 0;
        for (std::size_t i = 1; i < 6; ++i)
            if (tie[i] > tie[arg]) arg = i;
        CHECK(arg == 2);
    }

    SECTION("valid probability vector for extreme finite inputs") {
        for (double c : {1e300, -1e300, 1e-300, 1e8, -273.15}) {
            auto y = codec.encode(c);
            double sum = 0.0;
            for (double v : y) {
                CHECK(v >= 0.0);
                CHECK(std::isfinite(v));
                sum += v;
            }
            CHECK(std::fabs(sum - 1.0) < 1e-6);
        }
    }

    SECTION("translation invariance with unit-scale re-anchoring") {
        auto shifted = AnchorCodec::make(6, 1.0, 6.0);
        auto y0 = codec.encode(2.0);
        auto y1 = shifted.encode(3.0);
        for (std::size_t i = 0; i < 6; ++i) CHECK(y0[i] == y1[i]);
    }
}

TEST_CASE("cosine regression loss") {
    SECTION("identical vectors give exactly zero") {
        auto codec = AnchorCodec::make(6, 0.0, 5.0);
        for (double c : {0.0, 1.3, 2.5, 4.9}) {
            auto y = codec.encode(c);
            CHECK(anchor_cosine_loss_value(y, y) == 0.0);
        }
    }

    SECTION("disjoint one-hots give exactly one") {
        std::vector<double> e0{1, 0, 0}, e1{0, 1, 0};
        CHECK(anchor_cosine_loss_value(e0, e1) == 1.0);
    }

    SECTION("frozen hand-computed case") {
        std::vector<double> y{0.5, 0.5, 0}, yh{0.5, 0, 0.5};
        CHECK(anchor_cosine_loss_value(y, yh) == Catch::Approx(0.5));
    }

    SECTION("bounded in [0, 1] and symmetric for probability vectors") {
        Rng rng(71);
        for (int rep = 0; rep < 100; ++rep) {
            std::vector<double> a(6), b(6);
            double sa = 0, sb = 0;
            for (std::size_t i = 0; i < 6; ++i) {
                a[i] = rng.uniform(0, 1);
                b[i] = rng.uniform(0, 1);
                sa += a[i];
                sb += b[i];
            }
            for (std::size_t i = 0; i < 6; ++i) {
                a[i] /= sa;
                b[i] /= sb;
            }
            const double l = anchor_cosine_loss_value(a, b);
            CHECK(l >= 0.0);
            CHECK(l <= 1.0);
            CHECK(l == anchor_cosine_loss_value(b, a));
            CHECK(std::fabs(l - oracle::cosine_loss(a, b)) < 1e-12);
        }
    }

    SECTION("zero iff equal for probability vectors") {
        std::vector<double> a{0.2, 0.3, 0.5}, b{0.5, 0.3, 0.2};
        CHECK(anchor_cosine_loss_value(a, b) > 0.0);
    }

    SECTION("zero-norm input raises ContractError") {
        std::vector<double> z{0, 0, 0}, y{1, 0, 0};
        CHECK_THROWS_AS(anchor_cosine_loss_value(z, y), ContractError);
    }

    SECTION("gradient matches finite differences") {
        Rng rng(72);
        Tensor y = Tensor::from({0.1, 0.2, 0.4, 0.2, 0.05, 0.05}, {6});
        Tensor yh({6}, 0.0, true);
        for (std::size_t i = 0; i < 6; ++i) yh.data()[i] = rng.uniform(0.05, 1.0);
        auto forward = [&] { return anchor_cosine_loss(y, yh).value(); };
        Graph g;
        {
            GraphScope scope(g);
            g.backward(anchor_cosine_loss(y, yh));
        }
        CHECK(oracle::max_rel_err(yh.grad(), oracle::fd_grad(yh, forward)) < 1e-4);
    }
}

TEST_CASE("expectation decode") {
    auto codec = AnchorCodec::make(6, 0.0, 5.0);

    SECTION("one-hot inputs decode exactly to their anchor") {
        for (std::size_t j = 0; j < 6; ++j) {
            std::vector<double> y(6, 0.0);
            y[j] = 1.0;
            CHECK(expectation_decode(y, codec) == codec.anchors[j]);
        }
    }

    SECTION("uniform vector decodes to the interval midpoint") {
        std::vector<double> u(6, 1.0 / 6.0);
        CHECK(expectation_decode(u, codec) == Catch::Approx(2.5));
    }

    SECTION("decode(encode(c)) sweep: exact at midpoint, tight in the interior") {
        CHECK(expectation_decode(codec.encode(2.5), codec) == Catch::Approx(2.5).margin(1e-12));
        const double tol = 0.05 * (codec.hi - codec.lo);
        for (double c = 0.5; c <= 4.5; c += 0.05)
            CHECK(std::fabs(expectation_decode(codec.encode(c), codec) - c) < tol);
        // the bias grows toward the edges; documented, not asserted tight
        CHECK(std::fabs(expectation_decode(codec.encode(0.0), codec) - 0.0) < 0.5);
    }
}

TEST_CASE("probability head") {
    const std::size_t d = 8, m = 6;
    HeadWeights w;
    w.w1 = Tensor({d, d}, 0.0, true);
    w.b1 = Tensor({d}, 0.0, true);
    w.w2 = Tensor({d, m}, 0.0, true);
    w.b2 = Tensor({m}, 0.0, true);

    SECTION("zero weights give the uniform vector") {
        Tensor row({1, d}, 0.3);
        Tensor y = probability_head(row, w);
        REQUIRE(y.size() == m);
        double sum = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
            CHECK(y.data()[i] == Catch::Approx(1.0 / 6.0));
            sum += y.data()[i];
        }
        CHECK(sum == Catch::Approx(1.0));
    }

    SECTION("loss gradient through the head matches finite differences") {
        Rng rng(81);
        for (auto* t : {&w.w1, &w.b1, &w.w2, &w.b2})
            for (std::size_t i = 0; i < t->size(); ++i) t->data()[i] = rng.uniform(-0.5, 0.5);
        Tensor row({1, d});
        for (std::size_t i = 0; i < d; ++i) row.data()[i] = rng.uniform(-1, 1);
        auto codec = AnchorCodec::make(m, 0.0, 5.0);
        Tensor target = Tensor::from(codec.encode(2.0), {1, m});

        auto forward = [&] { return anchor_cosine_loss(target, probability_head(row, w)).value(); };
        Graph g;
        {
            GraphScope scope(g);
            g.backward(anchor_cosine_loss(target, probability_head(row, w)));
        }
        CHECK(oracle::max_rel_err(w.w1.grad(), oracle::fd_grad(w.w1, forward)) < 1e-4);
        CHECK(oracle::max_rel_err(w.b1.grad(), oracle::fd_grad(w.b1, forward)) < 1e-4);
        CHECK(oracle::max_rel_err(w.w2.grad(), oracle::fd_grad(w.w2, forward)) < 1e-4);
        CHECK(oracle::max_rel_err(w.b2.grad(), oracle::fd_grad(w.b2, forward)) < 1e-4);
    }
}

TEST_CASE("cross-entropy classification") {
    SECTION("uniform logits cost ln C for any target") {
        Tensor logits({1, 5}, 0.0);
        for (std::size_t t = 0; t < 5; ++t)
            CHECK(cross_entropy_with_logits(logits, t).value() == Catch::Approx(std::log(5.0)));
    }

    SECTION("confident correct logit drives the loss to zero") {
        Tensor logits = Tensor::from({30.0, 0.0, 0.0}, {1, 3});
        CHECK(cross_entropy_with_logits(logits, 0).value() < 1e-9);
    }

    SECTION("gradient matches finite differences") {
        Rng rng(82);
        Tensor logits({1, 6}, 0.0, true);
        for (std::size_t i = 0; i < 6; ++i) logits.data()[i] = rng.uniform(-2, 2);
        auto forward = [&] { return cross_entropy_with_logits(logits, 2).value(); };
        Graph g;
        {
            GraphScope scope(g);
            g.backward(cross_entropy_with_logits(logits, 2));
        }
        CHECK(oracle::max_rel_err(logits.grad(), oracle::fd_grad(logits, forward)) < 1e-4);
    }

    SECTION("target out of range raises IndexError") {
        Tensor logits({1, 4}, 0.0);
        CHECK_THROWS_AS(cross_entropy_with_logits(logits, 4), IndexError);
    }
}

TEST_CASE("svr decoder") {
    auto codec = AnchorCodec::make(6, 0.0, 5.0);

    SECTION("constant targets are fitted within epsilon") {
        std::vector<std::vector<double>> ys;
        std::vector<double> cs;
        Rng rng(91);
        for (int i = 0; i < 8; ++i) {
            ys.push_back(codec.encode(rng.uniform(0.0, 5.0)));
            cs.push_back(2.5);
        }
        auto d = SvrDecoder::fit(ys, cs, codec);
        for (const auto& y : ys) CHECK(std::fabs(d.predict(y) - 2.5) <= d.epsilon() + 1e-9);
    }

    SECTION("dense grid fit predicts held-out encodings within 2 eps") {
        std::vector<std::vector<double>> ys;
        std::vector<double> cs;
        for (double c = 0.0; c <= 5.0; c += 0.05) {
            ys.push_back(codec.encode(c));
            cs.push_back(c);
        }
        auto d = SvrDecoder::fit(ys, cs, codec);
        for (double c = 0.025; c <= 4.98; c += 0.1)
            CHECK(std::fabs(d.predict(codec.encode(c)) - c) <= 2.0 * d.epsilon());
    }

    SECTION("one-hot inputs after a grid fit decode near their anchors") {
        std::vector<std::vector<double>> ys;
        std::vector<double> cs;
        for (double c = 0.0; c <= 5.0; c += 0.05) {
            ys.push_back(codec.encode(c));
            cs.push_back(c);
        }
        auto d = SvrDecoder::fit(ys, cs, codec);
        for (std::size_t j = 0; j < 6; ++j) {
            std::vector<double> onehot(6, 0.0);
            onehot[j] = 1.0;
            CHECK(std::fabs(d.predict(onehot) - codec.anchors[j]) <= 2.0 * d.epsilon());
        }
    }

    SECTION("agrees with expectation decode on random probability vectors") {
        std::vector<std::vector<double>> ys;
        std::vector<double> cs;
        for (double c = 0.0; c <= 5.0; c += 0.05) {
            ys.push_back(codec.encode(c));
            cs.push_back(c);
        }
        auto d = SvrDecoder::fit(ys, cs, codec);
        Rng rng(92);
        double mad = 0.0;
        const int reps = 200;
        for (int rep = 0; rep < reps; ++rep) {
            const double c = rng.uniform(0.0, 5.0);
            auto y = codec.encode(c); // valid predicted-like vectors
            mad += std::fabs(d.predict(y) - expectation_decode(y, codec));
        }
        mad /= reps;
        CHECK(mad <= 0.1 * (codec.hi - codec.lo));
    }

    SECTION("prediction clamps to the scaled range and repeats deterministically") {
        auto d = SvrDecoder::from_parts({10, 10, 10, 10, 10, 10}, 3.0, 0.1, 0.0, 5.0);
        std::vector<double> u(6, 1.0 / 6.0);
        CHECK(d.predict(u) == 5.0);
        auto d2 = SvrDecoder::from_parts({-10, 0, 0, 0, 0, 0}, 0.0, 0.1, 0.0, 5.0);
        std::vector<double> e0{1, 0, 0, 0, 0, 0};
        CHECK(d2.predict(e0) == 0.0);
        CHECK(d2.predict(e0) == d2.predict(e0));
    }

    SECTION("same seed reproduces the same fit") {
        std::vector<std::vector<double>> ys;
        std::vector<double> cs;
        for (double c = 0.0; c <= 5.0; c += 0.5) {
            ys.push_back(codec.encode(c));
            cs.push_back(c);
        }
        auto a = SvrDecoder::fit(ys, cs, codec);
        auto b = SvrDecoder::fit(ys, cs, codec);
        CHECK(a.weights() == b.weights());
        CHECK(a.bias() == b.bias());
    }

    SECTION("unfitted prediction raises StateError; too few pairs raise InputError") {
        SvrDecoder d;
        std::vector<double> u(6, 1.0 / 6.0);
        CHECK_THROWS_AS(d.predict(u), StateError);
        CHECK_THROWS_AS(SvrDecoder::fit({codec.encode(1.0)}, {1.0}, codec), InputError);
    }
}
