#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <random>

#include "fd.hpp"
#include "reliocc/calib.hpp"
#include "reliocc/textio.hpp"

using namespace reliocc;
using Catch::Approx;

namespace {

// logits ~ N(0, scale^2), labels sampled from softmax(logits / label_temp);
// the NLL-optimal temperature is label_temp by proper-scoring consistency.
VoxelBatch synthetic_calib_batch(std::size_t n, int num_classes, double scale,
                                 double label_temp, std::uint64_t seed, bool with_features,
                                 bool with_depths) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g(0.0, scale);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const int width = num_classes + 1;
    VoxelBatch b;
    b.n = n;
    b.num_classes = num_classes;
    b.feature_dim = with_features ? 6 : 0;
    std::vector<double> z(static_cast<std::size_t>(width));
    for (std::size_t i = 0; i < n; ++i) {
        for (auto& v : z) v = g(rng);
        std::vector<double> scaled(z);
        for (auto& v : scaled) v /= label_temp;
        const auto p = softmax(scaled);
        const double u = unit(rng);
        double acc = 0.0;
        std::uint16_t label = 0;
        for (int c = 0; c < width; ++c) {
            acc += p[static_cast<std::size_t>(c)];
            if (u <= acc) {
                label = static_cast<std::uint16_t>(c);
                break;
            }
        }
        b.labels.push_back(label);
        for (double v : z) b.logits.push_back(static_cast<float>(v));
        if (with_features)
            for (int k = 0; k < b.feature_dim; ++k)
                b.features.push_back(static_cast<float>(g(rng) * 0.5));
        if (with_depths) b.depths.push_back(static_cast<float>(unit(rng) * 40.0));
    }
    b.validate();
    return b;
}

std::filesystem::path temp_file(const std::string& name) {
    return std::filesystem::temp_directory_path() / ("reliocc_test_" + name);
}

}  // namespace

TEST_CASE("temp_scale") {
    const std::vector<double> z{2.0, 0.0};
    SECTION("unit temperature is the identity") {
        REQUIRE(temp_scale(z, 1.0) == softmax(z));
    }
    SECTION("hand-computed halving") {
        const auto p = temp_scale(z, 2.0);
        REQUIRE(p[0] == Approx(0.731059).margin(1e-6));
        REQUIRE(p[1] == Approx(0.268941).margin(1e-6));
    }
    SECTION("huge temperature approaches uniform") {
        const auto p = temp_scale(z, 1e6);
        REQUIRE(p[0] == Approx(0.5).margin(1e-3));
        REQUIRE(p[1] == Approx(0.5).margin(1e-3));
    }
    SECTION("nonpositive temperature is rejected") {
        REQUIRE_THROWS_AS(temp_scale(z, 0.0), std::invalid_argument);
        REQUIRE_THROWS_AS(temp_scale(z, -1.0), std::invalid_argument);
    }
}

TEST_CASE("diri_scale") {
    SECTION("identity parameters reproduce the softmax") {
        const std::vector<double> z{0.7, -0.4, 1.2};
        std::vector<double> W(9, 0.0);
        W[0] = W[4] = W[8] = 1.0;
        const std::vector<double> b(3, 0.0);
        const auto p = diri_scale(z, W, b);
        const auto q = softmax(z);
        for (int c = 0; c < 3; ++c) REQUIRE(p[c] == Approx(q[c]).margin(1e-12));
    }
    SECTION("doubled diagonal squares the probabilities") {
        const std::vector<double> z{std::log(2.0), 0.0};
        const std::vector<double> W{2.0, 0.0, 0.0, 2.0};
        const std::vector<double> b(2, 0.0);
        const auto p = diri_scale(z, W, b);
        REQUIRE(p[0] == Approx(0.8).margin(1e-9));
        REQUIRE(p[1] == Approx(0.2).margin(1e-9));
    }
    SECTION("log floor keeps vanishing probabilities finite") {
        const std::vector<double> z{-1000.0, 0.0};
        std::vector<double> W{1.0, 0.0, 0.0, 1.0};
        const std::vector<double> b(2, 0.0);
        const auto p = diri_scale(z, W, b);
        REQUIRE(std::isfinite(p[0]));
        REQUIRE(std::isfinite(p[1]));
    }
    SECTION("matches a re-derived formula on random cases") {
        std::mt19937_64 rng(21);
        std::normal_distribution<double> g(0.0, 1.0);
        for (int rep = 0; rep < 100; ++rep) {
            std::vector<double> z(4), b(4), W(16);
            for (auto& v : z) v = 2.0 * g(rng);
            for (auto& v : b) v = 0.3 * g(rng);
            for (auto& v : W) v = 0.5 * g(rng);
            const auto p = diri_scale(z, W, b);
            // independent route: unnormalized products of powered probabilities
            const auto q = softmax(z);
            std::vector<double> a(4);
            for (int r = 0; r < 4; ++r) {
                double s = b[static_cast<std::size_t>(r)];
                for (int c = 0; c < 4; ++c)
                    s += W[static_cast<std::size_t>(r * 4 + c)] *
                         std::log(std::max(q[static_cast<std::size_t>(c)], 1e-12));
                a[static_cast<std::size_t>(r)] = s;
            }
            const auto expect = softmax(a);
            for (int c = 0; c < 4; ++c)
                REQUIRE(p[static_cast<std::size_t>(c)] ==
                        Approx(expect[static_cast<std::size_t>(c)]).margin(1e-12));
        }
    }
    SECTION("dimension mismatch is rejected") {
        const std::vector<double> z{0.0, 0.0};
        const std::vector<double> W(3, 1.0);
        const std::vector<double> b(2, 0.0);
        REQUIRE_THROWS_AS(diri_scale(z, W, b), std::invalid_argument);
    }
}

TEST_CASE("meta_scale") {
    SECTION("confident predictions take the temperature branch") {
        const std::vector<double> z{10.0, 0.0, 0.0};
        const auto q = temp_scale(z, 2.0);
        REQUIRE(meta_scale(z, 2.0, 0.2) == q[0]);
    }
    SECTION("uncertain predictions collapse to the uniform value") {
        const std::vector<double> z{0.1, 0.0, 0.05};
        REQUIRE(meta_scale(z, 2.0, 1e-6) == Approx(1.0 / 3.0).margin(1e-15));
    }
    SECTION("nineteen object classes give a five percent floor") {
        std::vector<double> z(20, 0.0);
        REQUIRE(meta_scale(z, 1.0, 1e-9) == Approx(0.05).margin(1e-15));
    }
}

TEST_CASE("depts_scale") {
    const std::vector<double> z{1.0, -0.5, 0.2};
    SECTION("identity reduction") {
        const auto p = depts_scale(z, 12.0, 0.0, 1.0, 1.0, 1.0, 0.2);
        const auto q = softmax(z);
        for (int c = 0; c < 3; ++c) REQUIRE(p[c] == Approx(q[c]).margin(1e-15));
    }
    SECTION("reduces to two-temperature entropy gating when depth is ignored") {
        // high-entropy input goes through T1, confident input through T2
        const std::vector<double> flat{0.1, 0.0, 0.05};
        const auto p_flat = depts_scale(flat, 5.0, 0.0, 1.0, 3.0, 1.0, 1e-6);
        const auto q1 = temp_scale(flat, 3.0);
        for (int c = 0; c < 3; ++c) REQUIRE(p_flat[c] == Approx(q1[c]).margin(1e-15));
        const std::vector<double> peaked{9.0, 0.0, 0.0};
        const auto p_peak = depts_scale(peaked, 5.0, 0.0, 1.0, 3.0, 1.0, 0.2);
        const auto q2 = temp_scale(peaked, 1.0);
        for (int c = 0; c < 3; ++c) REQUIRE(p_peak[c] == Approx(q2[c]).margin(1e-15));
    }
    SECTION("doubling the depth halves the effective logits") {
        const double d0 = 7.0;
        const auto a = depts_scale(z, 2.0 * d0, 1.0, 0.0, 1.3, 1.3, 0.2);
        std::vector<double> half(z);
        for (auto& v : half) v *= 0.5;
        const auto b = depts_scale(half, d0, 1.0, 0.0, 1.3, 1.3, 0.2);
        for (int c = 0; c < 3; ++c) REQUIRE(a[c] == Approx(b[c]).margin(1e-15));
    }
    SECTION("alpha clamp handles nonpositive depth maps") {
        REQUIRE_NOTHROW(depts_scale(z, 5.0, -1.0, 0.0, 1.0, 1.0, 0.2));
    }
}

TEST_CASE("reliocc_scale") {
    const std::vector<double> z{2.0, 0.0};
    const std::vector<double> w{1.0, 1.0};
    const std::vector<double> b{0.0, 0.0};
    SECTION("identity parameters reproduce the softmax") {
        const auto p = reliocc_scale(z, 0.5, 0.0, 1.0, w, b);
        REQUIRE(p == softmax(z));
    }
    SECTION("sigma of one with unit slope equals temperature two") {
        const auto p = reliocc_scale(z, 1.0, 1.0, 1.0, w, b);
        REQUIRE(p[0] == Approx(0.731059).margin(1e-6));
        REQUIRE(p[1] == Approx(0.268941).margin(1e-6));
    }
    SECTION("larger sigma lowers the max confidence") {
        double prev = 1.0;
        for (double sigma : {0.25, 0.5, 1.0, 2.0, 4.0}) {
            const auto p = reliocc_scale(z, sigma, 1.0, 0.5, w, b);
            REQUIRE(p[0] < prev);
            prev = p[0];
        }
    }
    SECTION("temperature clamp handles degenerate slopes") {
        REQUIRE_NOTHROW(reliocc_scale(z, 1.0, -5.0, 0.0, w, b));
    }
}

TEST_CASE("calibrator objective gradients match central differences") {
    using namespace calib_detail;
    const VoxelBatch batch = synthetic_calib_batch(200, 3, 2.0, 1.0, 99, true, true);
    const EvalView view = make_view(batch);

    SECTION("temperature") {
        std::vector<double> T{1.37}, gT{0.0};
        std::vector<ParamRef> params{{"T", &T, &gT}};
        auto objective = [&](bool with_grad) {
            double g = 0.0;
            const double v = temps_nll_grad(view, T[0], with_grad ? &g : nullptr);
            if (with_grad) gT[0] += g;
            return v;
        };
        const auto report = fd::check(params, objective);
        INFO(report.where);
        REQUIRE(report.max_rel < 1e-4);
    }

    SECTION("dirichlet") {
        std::vector<double> W(16, 0.0), b(4, 0.0);
        std::mt19937_64 rng(12);
        std::normal_distribution<double> g(0.0, 0.2);
        for (int c = 0; c < 4; ++c) W[static_cast<std::size_t>(c * 4 + c)] = 1.0;
        for (auto& v : W) v += g(rng);
        for (auto& v : b) v = g(rng);
        std::vector<double> gW(16, 0.0), gb(4, 0.0);
        std::vector<ParamRef> params{{"W", &W, &gW}, {"b", &b, &gb}};
        auto objective = [&](bool with_grad) {
            if (with_grad) return diris_nll_grad(view, W, b, gW, gb);
            return diris_nll_grad(view, W, b, {}, {});
        };
        const auto report = fd::check(params, objective);
        INFO(report.where);
        REQUIRE(report.max_rel < 1e-4);
    }

    SECTION("entropy-gated temperature") {
        const double eta = 0.2 * std::log(4.0);
        std::vector<double> T{1.21}, gT{0.0};
        std::vector<ParamRef> params{{"T", &T, &gT}};
        auto objective = [&](bool with_grad) {
            double g = 0.0;
            const double v = metac_nll_grad(view, T[0], eta, with_grad ? &g : nullptr);
            if (with_grad) gT[0] += g;
            return v;
        };
        const auto report = fd::check(params, objective);
        INFO(report.where);
        REQUIRE(report.max_rel < 1e-4);
    }

    SECTION("depth-aware") {
        const double eta = 0.3 * std::log(4.0);
        std::vector<double> theta{0.02, 0.9, 1.6, 1.1};
        std::vector<double> gtheta(4, 0.0);
        std::vector<ParamRef> params{{"theta", &theta, &gtheta}};
        auto objective = [&](bool with_grad) {
            if (with_grad)
                return depts_nll_grad(view, theta[0], theta[1], theta[2], theta[3], eta,
                                      &gtheta[0], &gtheta[1], &gtheta[2], &gtheta[3]);
            return depts_nll_grad(view, theta[0], theta[1], theta[2], theta[3], eta, nullptr,
                                  nullptr, nullptr, nullptr);
        };
        const auto report = fd::check(params, objective);
        INFO(report.where);
        REQUIRE(report.max_rel < 1e-4);
    }

    SECTION("uncertainty-aware scaler, full chain through lambda") {
        FitConfig config;
        config.seed = 5;
        ReliOccFitState state = make_reliocc_state(view, config);
        // move off the symmetric init point
        std::mt19937_64 rng(8);
        std::normal_distribution<double> g(0.0, 0.1);
        state.kvec[0] = 0.4;
        for (auto& v : state.w_diag) v += g(rng);
        for (auto& v : state.b) v += g(rng);
        std::mt19937_64 noise_rng(3);
        const ReliOccStepNoise noise = draw_reliocc_noise(view.m, view.width, noise_rng);
        auto objective = [&](bool with_grad) {
            return reliocc_objective_grad(view, state, noise, config, with_grad).total;
        };
        const auto report = fd::check(state.params(), objective);
        INFO(report.where);
        REQUIRE(report.max_rel < 1e-4);
    }
}

TEST_CASE("temperature fitting recovers the label temperature") {
    const VoxelBatch calibrated = synthetic_calib_batch(20000, 3, 2.0, 1.0, 2025, false, false);
    std::vector<double> epoch_nll;
    const CalibratorParams p1 = fit_calibrator(CalibratorKind::TempS, calibrated, {}, &epoch_nll);

    SECTION("already calibrated logits keep T near one") {
        REQUIRE(p1.T > 0.95);
        REQUIRE(p1.T < 1.05);
        REQUIRE(p1.fit_log.iterations == 2000);
    }
    SECTION("nll never increases across epochs") {
        REQUIRE(epoch_nll.size() == 20);
        for (std::size_t e = 1; e < epoch_nll.size(); ++e)
            REQUIRE(epoch_nll[e] <= epoch_nll[e - 1] + 1e-6);
    }
    SECTION("doubled logits fit T near two") {
        VoxelBatch scaled = calibrated;
        for (auto& z : scaled.logits) z *= 2.0f;
        const CalibratorParams p2 = fit_calibrator(CalibratorKind::TempS, scaled);
        REQUIRE(p2.T > 1.8);
        REQUIRE(p2.T < 2.2);
    }
}

TEST_CASE("fitting requires the fields the kind depends on") {
    const VoxelBatch plain = synthetic_calib_batch(100, 2, 1.5, 1.0, 3, false, false);
    REQUIRE_THROWS_AS(fit_calibrator(CalibratorKind::DeptS, plain), std::invalid_argument);
    REQUIRE_THROWS_AS(fit_calibrator(CalibratorKind::ReliOccScaler, plain),
                      std::invalid_argument);
    VoxelBatch ignored = plain;
    for (auto& y : ignored.labels) y = kIgnoreLabel;
    REQUIRE_THROWS_AS(fit_calibrator(CalibratorKind::TempS, ignored), std::invalid_argument);
}

TEST_CASE("apply_calibrator") {
    const VoxelBatch batch = synthetic_calib_batch(800, 3, 2.0, 1.4, 31, true, true);
    const ProbBatch raw = predict(batch);

    SECTION("labels are pinned to the raw argmax for every kind") {
        FitConfig quick;
        quick.epochs = 2;
        quick.steps_per_epoch = 20;
        for (CalibratorKind kind :
             {CalibratorKind::TempS, CalibratorKind::DiriS, CalibratorKind::MetaC,
              CalibratorKind::DeptS, CalibratorKind::ReliOccScaler}) {
            const CalibratorParams params = fit_calibrator(kind, batch, quick);
            const ProbBatch calibrated = apply_calibrator(params, batch);
            REQUIRE(calibrated.pred_label == raw.pred_label);
            // calibrated rows stay on the simplex
            for (std::size_t i = 0; i < calibrated.n; ++i) {
                double sum = 0.0;
                for (double v : calibrated.prob_row(i)) {
                    REQUIRE(v >= 0.0);
                    sum += v;
                }
                REQUIRE(sum == Approx(1.0).margin(1e-6));
            }
        }
    }

    SECTION("identity parameters leave confidences unchanged") {
        CalibratorParams identity;
        identity.kind = CalibratorKind::TempS;
        identity.num_classes = 3;
        identity.T = 1.0;
        const ProbBatch out = apply_calibrator(identity, batch);
        REQUIRE(out.confidence == raw.confidence);

        CalibratorParams scaler;
        scaler.kind = CalibratorKind::ReliOccScaler;
        scaler.num_classes = 3;
        scaler.k1 = 0.0;
        scaler.k2 = 1.0;
        scaler.W.assign(4, 1.0);
        scaler.b.assign(4, 0.0);
        VoxelBatch with_sigma = batch;
        with_sigma.features.clear();
        with_sigma.feature_dim = 0;
        with_sigma.sigmas.assign(batch.n, 1.0f);
        const ProbBatch out2 = apply_calibrator(scaler, with_sigma);
        REQUIRE(out2.confidence == raw.confidence);
    }

    SECTION("missing required fields are rejected") {
        CalibratorParams depts;
        depts.kind = CalibratorKind::DeptS;
        depts.num_classes = 3;
        depts.eta = 0.2;
        VoxelBatch no_depth = batch;
        no_depth.depths.clear();
        REQUIRE_THROWS_AS(apply_calibrator(depts, no_depth), std::invalid_argument);

        CalibratorParams scaler;
        scaler.kind = CalibratorKind::ReliOccScaler;
        scaler.num_classes = 3;
        scaler.W.assign(4, 1.0);
        scaler.b.assign(4, 0.0);
        VoxelBatch bare = batch;
        bare.features.clear();
        bare.feature_dim = 0;
        REQUIRE_THROWS_AS(apply_calibrator(scaler, bare), std::invalid_argument);
    }
}

TEST_CASE("calibrator files round-trip exactly") {
    const VoxelBatch batch = synthetic_calib_batch(300, 2, 1.8, 1.3, 77, true, true);
    FitConfig quick;
    quick.epochs = 2;
    quick.steps_per_epoch = 10;
    int file_id = 0;
    for (CalibratorKind kind : {CalibratorKind::TempS, CalibratorKind::DiriS,
                                CalibratorKind::MetaC, CalibratorKind::DeptS,
                                CalibratorKind::ReliOccScaler}) {
        const CalibratorParams params = fit_calibrator(kind, batch, quick);
        const auto path = temp_file("calib_" + std::to_string(file_id++) + ".txt");
        save_calibrator(params, path.string());
        const CalibratorParams loaded = load_calibrator(path.string());
        REQUIRE(loaded.kind == params.kind);
        REQUIRE(loaded.num_classes == params.num_classes);
        REQUIRE(loaded.T == params.T);
        REQUIRE(loaded.T1 == params.T1);
        REQUIRE(loaded.T2 == params.T2);
        REQUIRE(loaded.eta == params.eta);
        REQUIRE(loaded.k1 == params.k1);
        REQUIRE(loaded.k2 == params.k2);
        REQUIRE(loaded.W == params.W);
        REQUIRE(loaded.b == params.b);
        REQUIRE(loaded.fit_log.final_nll == params.fit_log.final_nll);
        REQUIRE(loaded.fit_log.iterations == params.fit_log.iterations);
        if (kind == CalibratorKind::ReliOccScaler) {
            REQUIRE(loaded.sigma_head.w1 == params.sigma_head.w1);
            REQUIRE(loaded.sigma_head.b1 == params.sigma_head.b1);
            REQUIRE(loaded.sigma_head.w2 == params.sigma_head.w2);
            REQUIRE(loaded.sigma_head.b2 == params.sigma_head.b2);
            // the loaded head drives apply_calibrator identically
            const ProbBatch a = apply_calibrator(params, batch);
            const ProbBatch b = apply_calibrator(loaded, batch);
            REQUIRE(a.confidence == b.confidence);
        }
        std::filesystem::remove(path);
    }
}

TEST_CASE("reliocc offline fit keeps the monitored nll non-increasing") {
    // overconfident batch, the representative calibration workload
    VoxelBatch batch = synthetic_calib_batch(2000, 3, 2.0, 1.0, 404, true, false);
    for (auto& z : batch.logits) z *= 2.0f;
    FitConfig config;
    config.epochs = 10;
    config.steps_per_epoch = 50;
    std::vector<double> epoch_nll;
    const CalibratorParams params =
        fit_calibrator(CalibratorKind::ReliOccScaler, batch, config, &epoch_nll);
    REQUIRE(epoch_nll.size() == 10);
    for (std::size_t e = 1; e < epoch_nll.size(); ++e)
        REQUIRE(epoch_nll[e] <= epoch_nll[e - 1] + 1e-6);
    REQUIRE(std::isfinite(params.fit_log.final_nll));
}
