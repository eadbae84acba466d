#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <numeric>
#include <random>

#include "fd.hpp"
#include "reliocc/uncert.hpp"

using namespace reliocc;
using Catch::Approx;

TEST_CASE("sample_absolute") {
    const std::vector<double> z{1.0, -2.0, 0.5};
    std::vector<double> out(3);
    SECTION("zero noise is the identity") {
        const std::vector<double> eps{0.0, 0.0, 0.0};
        sample_absolute(z, 0.7, eps, out);
        REQUIRE(out == z);
    }
    SECTION("floor sigma bounds the deviation") {
        const std::vector<double> eps{1.0, -3.0, 2.0};
        sample_absolute(z, 1e-3, eps, out);
        for (std::size_t c = 0; c < 3; ++c)
            REQUIRE(std::abs(out[c] - z[c]) <= 1e-3 * 3.0 + 1e-15);
    }
    SECTION("nonpositive sigma is rejected") {
        const std::vector<double> eps{0.0, 0.0, 0.0};
        REQUIRE_THROWS_AS(sample_absolute(z, 0.0, eps, out), std::invalid_argument);
    }
    SECTION("empirical std of the perturbation matches sigma") {
        std::mt19937_64 rng(2024);
        std::normal_distribution<double> g(0.0, 1.0);
        const double sigma = 0.85;
        double sum = 0.0, sum2 = 0.0;
        const int draws = 10000;
        std::vector<double> eps(3);
        for (int k = 0; k < draws; ++k) {
            for (auto& e : eps) e = g(rng);
            sample_absolute(z, sigma, eps, out);
            for (std::size_t c = 0; c < 3; ++c) {
                const double d = out[c] - z[c];
                sum += d;
                sum2 += d * d;
            }
        }
        const double n = draws * 3.0;
        const double var = sum2 / n - (sum / n) * (sum / n);
        REQUIRE(std::sqrt(var) == Approx(sigma).epsilon(0.03));
    }
}

TEST_CASE("loss_absolute") {
    SECTION("huge margin drives the loss to zero") {
        const std::vector<double> z{40.0, 0.0, 0.0};
        REQUIRE(loss_absolute(z, 0) < 1e-9);
    }
    SECTION("uniform logits give ln(width)") {
        const std::vector<double> z(5, 0.3);
        REQUIRE(loss_absolute(z, 2) == Approx(std::log(5.0)).margin(1e-12));
    }
    SECTION("ignored label is rejected") {
        const std::vector<double> z{0.0, 0.0};
        REQUIRE_THROWS_AS(loss_absolute(z, kIgnoreLabel), std::invalid_argument);
    }
    SECTION("softmax-minus-onehot matches central differences, h = 1e-4") {
        std::mt19937_64 rng(5);
        std::normal_distribution<double> g(0.0, 1.5);
        std::vector<double> z(5);
        for (auto& v : z) v = g(rng);
        const std::uint16_t y = 3;
        const auto p = softmax(z);
        const double h = 1e-4;
        for (std::size_t c = 0; c < z.size(); ++c) {
            const double analytic = p[c] - (c == y ? 1.0 : 0.0);
            const double orig = z[c];
            z[c] = orig + h;
            const double fp = loss_absolute(z, y);
            z[c] = orig - h;
            const double fm = loss_absolute(z, y);
            z[c] = orig;
            REQUIRE(fd::rel_err(analytic, (fp - fm) / (2 * h)) < 1e-4);
        }
    }
}

static VoxelBatch pair_batch() {
    VoxelBatch b;
    b.n = 4;
    b.num_classes = 2;
    b.feature_dim = 2;
    b.labels = {1, 2, 1, kIgnoreLabel};
    b.logits.assign(4 * 3, 0.0f);
    b.features = {1.0f, 0.0f, 0.0f, 1.0f, 2.0f, 2.0f, 9.0f, 9.0f};
    return b;
}

TEST_CASE("mix lambda") {
    SECTION("equal sigmas split evenly, exactly") {
        for (double s : {1e-3, 0.37, 2.0, 113.0}) REQUIRE(mix_lambda(s, s) == 0.5);
    }
    SECTION("direct formula") {
        REQUIRE(mix_lambda(1.0, 3.0) == Approx(0.25).margin(1e-15));
    }
    SECTION("complementary pairs sum to one") {
        std::mt19937_64 rng(3);
        std::uniform_real_distribution<double> unit(1e-3, 5.0);
        for (int rep = 0; rep < 1000; ++rep) {
            const double a = unit(rng), b = unit(rng);
            REQUIRE(mix_lambda(a, b) + mix_lambda(b, a) == Approx(1.0).margin(1e-15));
            REQUIRE(mix_lambda(a, b) > 0.0);
            REQUIRE(mix_lambda(a, b) < 1.0);
        }
    }
    SECTION("invariant under common scaling") {
        std::mt19937_64 rng(4);
        std::uniform_real_distribution<double> unit(1e-3, 5.0);
        for (int rep = 0; rep < 1000; ++rep) {
            const double a = unit(rng), b = unit(rng);
            for (double c : {0.1, 1.0, 10.0, 7.3})
                REQUIRE(mix_lambda(c * a, c * b) == Approx(mix_lambda(a, b)).margin(1e-15));
        }
        // powers of two scale without rounding, so equality is exact
        for (double a : {0.25, 0.5, 1.0, 2.0, 4.0})
            for (double b : {0.25, 0.5, 1.0, 2.0, 4.0})
                for (double c : {0.5, 2.0, 8.0})
                    REQUIRE(mix_lambda(c * a, c * b) == mix_lambda(a, b));
    }
}

TEST_CASE("make_pairs") {
    const VoxelBatch b = pair_batch();
    SECTION("pairs ignore masked voxels and blend features") {
        const std::vector<double> sigmas{1.0, 3.0, 2.0, 1.0};
        std::mt19937_64 rng(11);
        const auto pairs = make_pairs(b, sigmas, rng);
        REQUIRE(pairs.size() == 3);
        for (const auto& p : pairs) {
            REQUIRE(p.i != 3);
            REQUIRE(p.j != 3);
            REQUIRE(p.lambda == mix_lambda(sigmas[p.i], sigmas[p.j]));
            double target_sum = 0.0;
            for (double t : p.target) {
                target_sum += t;
                REQUIRE((t == 0.0 || t == 1.0 || t == 2.0));
            }
            REQUIRE(target_sum == 2.0);
            REQUIRE(p.mixed_feature.size() == 2);
            for (std::size_t k = 0; k < 2; ++k)
                REQUIRE(p.mixed_feature[k] ==
                        Approx(p.lambda * b.feature_row(p.i)[k] +
                               (1.0 - p.lambda) * b.feature_row(p.j)[k])
                            .margin(1e-12));
        }
    }
    SECTION("duplicate class collapses to a single weight-2 entry") {
        VoxelBatch b2 = pair_batch();
        b2.labels = {1, 1, 1, kIgnoreLabel};
        const std::vector<double> sigmas{1.0, 1.0, 1.0, 1.0};
        std::mt19937_64 rng(1);
        const auto pairs = make_pairs(b2, sigmas, rng);
        for (const auto& p : pairs) {
            REQUIRE(p.target[1] == 2.0);
            REQUIRE(p.target[0] == 0.0);
            REQUIRE(p.target[2] == 0.0);
        }
    }
    SECTION("fewer than two eligible voxels is rejected") {
        VoxelBatch b2 = pair_batch();
        b2.labels = {1, kIgnoreLabel, kIgnoreLabel, kIgnoreLabel};
        const std::vector<double> sigmas{1.0, 1.0, 1.0, 1.0};
        std::mt19937_64 rng(1);
        REQUIRE_THROWS_AS(make_pairs(b2, sigmas, rng), std::invalid_argument);
    }
}

TEST_CASE("loss_relative") {
    SECTION("peaked logits on a doubled class") {
        const std::vector<double> z{40.0, 0.0, 0.0};
        const std::vector<double> target{2.0, 0.0, 0.0};
        REQUIRE(loss_relative(z, target) < 1e-9);
    }
    SECTION("uniform logits give twice ln(width)") {
        const std::vector<double> z(5, 0.0);
        const std::vector<double> target{1.0, 0.0, 1.0, 0.0, 0.0};
        REQUIRE(loss_relative(z, target) == Approx(2.0 * std::log(5.0)).margin(1e-12));
    }
    SECTION("bad target sum is rejected") {
        const std::vector<double> z(3, 0.0);
        const std::vector<double> target{1.0, 0.0, 0.0};
        REQUIRE_THROWS_AS(loss_relative(z, target), std::invalid_argument);
    }
}

TEST_CASE("sigma head gradients match central differences") {
    const int d = 4;
    const std::size_t m = 6;
    UncertaintyHead head = make_uncertainty_head(d, 77);
    std::mt19937_64 rng(7);
    std::vector<double> features(m * d);
    fill_gaussian(features, rng);
    std::vector<double> weights(m);
    fill_gaussian(weights, rng);

    // objective: weighted sum of head outputs
    auto objective = [&](bool with_grad) {
        HeadCache cache;
        head_forward(head, features, m, cache);
        double loss = 0.0;
        for (std::size_t i = 0; i < m; ++i) loss += weights[i] * cache.sigma[i];
        if (with_grad) head_backward(head, features, cache, weights);
        return loss;
    };
    const auto report = fd::check(head.params(), objective);
    INFO(report.where);
    REQUIRE(report.max_rel < 1e-4);
}

TEST_CASE("sigma head output floor") {
    UncertaintyHead head = make_uncertainty_head(3, 5);
    std::mt19937_64 rng(9);
    std::vector<double> v(3);
    for (int rep = 0; rep < 200; ++rep) {
        fill_gaussian(v, rng, 0.0, 10.0);
        const double s = head_sigma(head, v);
        REQUIRE(s >= 1e-3);
        REQUIRE(std::isfinite(s));
    }
}

TEST_CASE("dul_transform") {
    SECTION("standard normal at the origin has zero divergence") {
        const std::vector<double> v{0.0, 0.0, 0.0};
        const std::vector<double> sigma{1.0, 1.0, 1.0};
        const std::vector<double> eps{0.1, -0.2, 0.3};
        std::vector<double> vhat(3);
        REQUIRE(dul_transform(v, sigma, eps, vhat) == Approx(0.0).margin(1e-15));
        for (std::size_t k = 0; k < 3; ++k) REQUIRE(vhat[k] == Approx(sigma[k] * eps[k]));
    }
    SECTION("unit shift contributes half") {
        const std::vector<double> v{1.0, 0.0};
        const std::vector<double> sigma{1.0, 1.0};
        const std::vector<double> eps{0.0, 0.0};
        std::vector<double> vhat(2);
        REQUIRE(dul_transform(v, sigma, eps, vhat) == Approx(0.5).margin(1e-15));
    }
    SECTION("divergence is nonnegative") {
        std::mt19937_64 rng(31);
        std::normal_distribution<double> g(0.0, 2.0);
        std::uniform_real_distribution<double> su(0.05, 4.0);
        std::vector<double> v(8), sigma(8), eps(8), vhat(8);
        for (int rep = 0; rep < 10000; ++rep) {
            for (auto& x : v) x = g(rng);
            for (auto& s : sigma) s = su(rng);
            for (auto& e : eps) e = g(rng);
            REQUIRE(dul_transform(v, sigma, eps, vhat) >= 0.0);
        }
    }
    SECTION("nonpositive sigma component is rejected") {
        const std::vector<double> v{0.0};
        const std::vector<double> sigma{-1.0};
        const std::vector<double> eps{0.0};
        std::vector<double> vhat(1);
        REQUIRE_THROWS_AS(dul_transform(v, sigma, eps, vhat), std::invalid_argument);
    }
}

TEST_CASE("mcd_aggregate") {
    SECTION("single sample passes through") {
        const std::vector<std::vector<double>> samples{{1.0, 2.0, 3.0}};
        const auto agg = mcd_aggregate(samples);
        REQUIRE(agg.mean_logits == samples[0]);
    }
    SECTION("identical peaked samples have near-zero uncertainty") {
        const std::vector<std::vector<double>> samples(5, {50.0, 0.0, 0.0});
        REQUIRE(mcd_aggregate(samples).uncertainty < 1e-9);
    }
    SECTION("one peak per class saturates the uncertainty") {
        std::vector<std::vector<double>> samples;
        const int width = 5;
        for (int c = 0; c < width; ++c) {
            std::vector<double> z(width, 0.0);
            z[static_cast<std::size_t>(c)] = 60.0;
            samples.push_back(z);
        }
        REQUIRE(mcd_aggregate(samples).uncertainty == Approx(1.0).margin(1e-9));
    }
    SECTION("no samples is rejected") {
        REQUIRE_THROWS_AS(mcd_aggregate({}), std::invalid_argument);
    }
}
