// Offline scaling calibrators: forward transforms, NLL fitting on validation
// dumps, and application to new batches. Predicted labels always come from
// the raw logits; calibration remaps confidence only, so accuracy metrics
// are unchanged by construction.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "reliocc/core.hpp"
#include "reliocc/optim.hpp"
#include "reliocc/rng.hpp"
#include "reliocc/uncert.hpp"

namespace reliocc {

inline constexpr double kLogFloor = 1e-12;   // probability floor under log
inline constexpr double kAlphaFloor = 1e-3;  // depth-scale floor
inline constexpr double kTempFloor = 1e-3;   // temperature floor

enum class CalibratorKind { TempS, DiriS, MetaC, DeptS, ReliOccScaler };

inline const char* calibrator_kind_name(CalibratorKind kind) {
    switch (kind) {
        case CalibratorKind::TempS: return "temps";
        case CalibratorKind::DiriS: return "diris";
        case CalibratorKind::MetaC: return "metac";
        case CalibratorKind::DeptS: return "depts";
        case CalibratorKind::ReliOccScaler: return "reliocc";
    }
    return "?";
}

inline CalibratorKind calibrator_kind_from_name(const std::string& name) {
    if (name == "temps") return CalibratorKind::TempS;
    if (name == "diris") return CalibratorKind::DiriS;
    if (name == "metac") return CalibratorKind::MetaC;
    if (name == "depts") return CalibratorKind::DeptS;
    if (name == "reliocc") return CalibratorKind::ReliOccScaler;
    throw std::invalid_argument("unknown calibrator kind: " + name);
}

struct FitLog {
    double final_nll = std::numeric_limits<double>::quiet_NaN();
    std::size_t iterations = 0;
};

struct CalibratorParams {
    CalibratorKind kind = CalibratorKind::TempS;
    int num_classes = 0;

    double T = 1.0;            // TempS, MetaC
    double T1 = 1.5, T2 = 1.0; // DeptS, T1 starts above T2
    double eta = 0.0;          // MetaC, DeptS entropy threshold
    double k1 = 0.0, k2 = 1.0; // DeptS depth map / ReliOccScaler sigma map

    std::vector<double> W;  // DiriS: full (S+1)^2 row-major; ReliOccScaler: diagonal (S+1)
    std::vector<double> b;  // S+1

    UncertaintyHead sigma_head;  // ReliOccScaler only; fitted jointly

    FitLog fit_log;

    int width() const { return num_classes + 1; }
};

// ---------------------------------------------------------------------------
// Forward transforms (single voxel)
// ---------------------------------------------------------------------------

inline std::vector<double> temp_scale(std::span<const double> z, double T) {
    if (!(T > 0.0)) throw std::invalid_argument("temp_scale: temperature must be positive");
    std::vector<double> scaled(z.size());
    for (std::size_t c = 0; c < z.size(); ++c) scaled[c] = z[c] / T;
    return softmax(scaled);
}

inline std::vector<double> diri_scale(std::span<const double> z, std::span<const double> W,
                                      std::span<const double> b) {
    const std::size_t width = z.size();
    if (W.size() != width * width || b.size() != width)
        throw std::invalid_argument("diri_scale: dimension mismatch");
    const std::vector<double> p = softmax(z);
    std::vector<double> u(width);
    for (std::size_t c = 0; c < width; ++c) u[c] = std::log(std::max(p[c], kLogFloor));
    std::vector<double> a(width);
    for (std::size_t r = 0; r < width; ++r) {
        double s = b[r];
        for (std::size_t c = 0; c < width; ++c) s += W[r * width + c] * u[c];
        a[r] = s;
    }
    return softmax(a);
}

// Entropy-gated temperature scaling; returns the calibrated confidence for
// the raw-argmax class. Low-entropy predictions go through the fitted
// temperature, the rest collapse to the uniform value 1/(S+1).
inline double meta_scale(std::span<const double> z, double T, double eta) {
    if (!(T > 0.0)) throw std::invalid_argument("meta_scale: temperature must be positive");
    if (!(eta > 0.0)) throw std::invalid_argument("meta_scale: eta must be positive");
    const std::vector<double> p = softmax(z);
    const double c = p[static_cast<std::size_t>(argmax_low(p))];
    if (-c * std::log(c) < eta) {
        const std::vector<double> q = temp_scale(z, T);
        return q[static_cast<std::size_t>(argmax_low(q))];
    }
    return 1.0 / static_cast<double>(z.size());
}

inline std::vector<double> depts_scale(std::span<const double> z, double depth, double k1,
                                       double k2, double T1, double T2, double eta) {
    if (!(T1 > 0.0) || !(T2 > 0.0))
        throw std::invalid_argument("depts_scale: temperatures must be positive");
    const double alpha = std::max(k1 * depth + k2, kAlphaFloor);
    const std::vector<double> p = softmax(z);
    const double c = p[static_cast<std::size_t>(argmax_low(p))];
    const double temp = (-c * std::log(c) > eta) ? T1 : T2;
    std::vector<double> scaled(z.size());
    for (std::size_t i = 0; i < z.size(); ++i) scaled[i] = z[i] / (alpha * temp);
    return softmax(scaled);
}

inline std::vector<double> reliocc_scale(std::span<const double> z, double sigma, double k1,
                                         double k2, std::span<const double> w_diag,
                                         std::span<const double> b) {
    const std::size_t width = z.size();
    if (w_diag.size() != width || b.size() != width)
        throw std::invalid_argument("reliocc_scale: dimension mismatch");
    const double t_sigma = std::max(k1 * sigma + k2, kTempFloor);
    std::vector<double> a(width);
    for (std::size_t c = 0; c < width; ++c) a[c] = (w_diag[c] * z[c] + b[c]) / t_sigma;
    return softmax(a);
}

// ---------------------------------------------------------------------------
// Fitting
// ---------------------------------------------------------------------------

struct FitConfig {
    int epochs = 20;
    int steps_per_epoch = 100;  // full-batch gradient steps per epoch
    double lr = 1e-3;
    double weight_decay = 0.0;
    std::uint64_t seed = 42;
    // ReliOccScaler objective weights for L_au, L_ru, L_calib.
    double alpha = 1.5;
    double beta = 1.0;
    double gamma = 4.0;
    int sigma_hidden = 32;
    // Entropy thresholds tried for MetaC/DeptS, as fractions of ln(S+1).
    std::vector<double> eta_grid_factors = {0.05, 0.1, 0.2, 0.3, 0.5};
};

namespace calib_detail {

// Double-precision view of the non-ignored voxels of a batch.
struct EvalView {
    std::size_t m = 0;
    int width = 0;
    int feature_dim = 0;
    std::vector<double> logits;         // m x width
    std::vector<std::uint16_t> labels;  // m
    std::vector<double> depths;         // m or empty
    std::vector<double> features;       // m x feature_dim or empty
    std::vector<double> raw_probs;      // m x width, softmax of raw logits
    std::vector<double> raw_conf;       // m, max raw probability

    std::span<const double> logit_row(std::size_t i) const {
        return {logits.data() + i * static_cast<std::size_t>(width),
                static_cast<std::size_t>(width)};
    }
    std::span<const double> feature_row(std::size_t i) const {
        return {features.data() + i * static_cast<std::size_t>(feature_dim),
                static_cast<std::size_t>(feature_dim)};
    }
};

inline EvalView make_view(const VoxelBatch& batch) {
    EvalView view;
    view.width = batch.logit_width();
    view.feature_dim = batch.has_features() ? batch.feature_dim : 0;
    const auto width = static_cast<std::size_t>(view.width);
    for (std::size_t i = 0; i < batch.n; ++i) {
        if (batch.labels[i] == kIgnoreLabel) continue;
        view.labels.push_back(batch.labels[i]);
        const auto row = batch.logit_row(i);
        for (float z : row) view.logits.push_back(z);
        if (batch.has_depths()) view.depths.push_back(batch.depths[i]);
        if (batch.has_features())
            for (float f : batch.feature_row(i)) view.features.push_back(f);
    }
    view.m = view.labels.size();
    if (view.m == 0) throw std::invalid_argument("fit_calibrator: no labeled voxels");
    view.raw_probs.resize(view.m * width);
    view.raw_conf.resize(view.m);
    for (std::size_t i = 0; i < view.m; ++i) {
        std::span<double> p{view.raw_probs.data() + i * width, width};
        softmax(view.logit_row(i), p);
        view.raw_conf[i] = p[static_cast<std::size_t>(argmax_low(p))];
    }
    return view;
}

// Mean NLL of softmax(z/T) with d/dT.
inline double temps_nll_grad(const EvalView& view, double T, double* gT) {
    const auto width = static_cast<std::size_t>(view.width);
    std::vector<double> scaled(width), p(width);
    double nll = 0.0, grad = 0.0;
    for (std::size_t i = 0; i < view.m; ++i) {
        const auto z = view.logit_row(i);
        for (std::size_t c = 0; c < width; ++c) scaled[c] = z[c] / T;
        softmax(scaled, p);
        const auto y = static_cast<std::size_t>(view.labels[i]);
        nll += cross_entropy(scaled, static_cast<int>(y));
        if (gT) {
            double ez = 0.0;
            for (std::size_t c = 0; c < width; ++c) ez += p[c] * z[c];
            grad += (z[y] - ez) / (T * T);
        }
    }
    if (gT) *gT = grad / static_cast<double>(view.m);
    return nll / static_cast<double>(view.m);
}

// Mean NLL of softmax(W log(p_raw) + b) with gradients.
inline double diris_nll_grad(const EvalView& view, std::span<const double> W,
                             std::span<const double> b, std::span<double> gW,
                             std::span<double> gb) {
    const auto width = static_cast<std::size_t>(view.width);
    std::vector<double> u(width), a(width), p(width);
    double nll = 0.0;
    const double inv_m = 1.0 / static_cast<double>(view.m);
    for (std::size_t i = 0; i < view.m; ++i) {
        const double* praw = view.raw_probs.data() + i * width;
        for (std::size_t c = 0; c < width; ++c) u[c] = std::log(std::max(praw[c], kLogFloor));
        for (std::size_t r = 0; r < width; ++r) {
            double s = b[r];
            for (std::size_t c = 0; c < width; ++c) s += W[r * width + c] * u[c];
            a[r] = s;
        }
        softmax(a, p);
        const auto y = static_cast<std::size_t>(view.labels[i]);
        nll += cross_entropy(a, static_cast<int>(y));
        if (!gW.empty()) {
            for (std::size_t r = 0; r < width; ++r) {
                const double g = (p[r] - (r == y ? 1.0 : 0.0)) * inv_m;
                gb[r] += g;
                for (std::size_t c = 0; c < width; ++c) gW[r * width + c] += g * u[c];
            }
        }
    }
    return nll * inv_m;
}

// Mean NLL of the entropy-gated mixture: temp branch contributes a scaled
// cross-entropy, the constant branch contributes ln(S+1) and no gradient.
inline double metac_nll_grad(const EvalView& view, double T, double eta, double* gT) {
    const auto width = static_cast<std::size_t>(view.width);
    std::vector<double> scaled(width), p(width);
    double nll = 0.0, grad = 0.0;
    for (std::size_t i = 0; i < view.m; ++i) {
        const double c = view.raw_conf[i];
        if (-c * std::log(c) < eta) {
            const auto z = view.logit_row(i);
            for (std::size_t k = 0; k < width; ++k) scaled[k] = z[k] / T;
            softmax(scaled, p);
            const auto y = static_cast<std::size_t>(view.labels[i]);
            nll += cross_entropy(scaled, static_cast<int>(y));
            if (gT) {
                double ez = 0.0;
                for (std::size_t k = 0; k < width; ++k) ez += p[k] * z[k];
                grad += (z[y] - ez) / (T * T);
            }
        } else {
            nll += std::log(static_cast<double>(width));
        }
    }
    if (gT) *gT = grad / static_cast<double>(view.m);
    return nll / static_cast<double>(view.m);
}

// Mean NLL of softmax(z / (alpha * T_branch)) with gradients for k1, k2, T1, T2.
inline double depts_nll_grad(const EvalView& view, double k1, double k2, double T1, double T2,
                             double eta, double* gk1, double* gk2, double* gT1, double* gT2) {
    if (view.depths.empty()) throw std::invalid_argument("depts fit: batch has no depths");
    const auto width = static_cast<std::size_t>(view.width);
    std::vector<double> scaled(width), p(width);
    double nll = 0.0, a_k1 = 0.0, a_k2 = 0.0, a_T1 = 0.0, a_T2 = 0.0;
    const double inv_m = 1.0 / static_cast<double>(view.m);
    for (std::size_t i = 0; i < view.m; ++i) {
        const double c = view.raw_conf[i];
        const bool high_entropy = -c * std::log(c) > eta;
        const double T = high_entropy ? T1 : T2;
        const double alpha_raw = k1 * view.depths[i] + k2;
        const bool clamped = alpha_raw < kAlphaFloor;
        const double alpha = clamped ? kAlphaFloor : alpha_raw;
        const double tau = alpha * T;
        const auto z = view.logit_row(i);
        for (std::size_t k = 0; k < width; ++k) scaled[k] = z[k] / tau;
        softmax(scaled, p);
        const auto y = static_cast<std::size_t>(view.labels[i]);
        nll += cross_entropy(scaled, static_cast<int>(y));
        double ez = 0.0;
        for (std::size_t k = 0; k < width; ++k) ez += p[k] * z[k];
        const double dtau = (z[y] - ez) / (tau * tau);  // dNLL_i / dtau
        if (high_entropy) a_T1 += dtau * alpha;
        else a_T2 += dtau * alpha;
        if (!clamped) {
            a_k1 += dtau * T * view.depths[i];
            a_k2 += dtau * T;
        }
    }
    if (gk1) *gk1 = a_k1 * inv_m;
    if (gk2) *gk2 = a_k2 * inv_m;
    if (gT1) *gT1 = a_T1 * inv_m;
    if (gT2) *gT2 = a_T2 * inv_m;
    return nll * inv_m;
}

// Trainable state of the uncertainty-aware scaler.
struct ReliOccFitState {
    std::vector<double> kvec{0.0, 1.0};  // {k1, k2}; T_sigma = k1*sigma + k2
    std::vector<double> w_diag, b;
    UncertaintyHead head;
    std::vector<double> gkvec{0.0, 0.0}, gw_diag, gb;

    std::vector<ParamRef> params() {
        std::vector<ParamRef> out = {{"scaler.k", &kvec, &gkvec},
                                     {"scaler.w_diag", &w_diag, &gw_diag},
                                     {"scaler.b", &b, &gb}};
        for (auto& p : head.params()) out.push_back(p);
        return out;
    }
};

inline ReliOccFitState make_reliocc_state(const EvalView& view, const FitConfig& config) {
    if (view.features.empty())
        throw std::invalid_argument("reliocc fit: batch has no features for the sigma head");
    ReliOccFitState state;
    state.w_diag.assign(static_cast<std::size_t>(view.width), 1.0);
    state.b.assign(static_cast<std::size_t>(view.width), 0.0);
    state.gw_diag.assign(state.w_diag.size(), 0.0);
    state.gb.assign(state.b.size(), 0.0);
    state.head = make_uncertainty_head(view.feature_dim, derive_seed(config.seed, 0x68656164),
                                       config.sigma_hidden);
    return state;
}

struct ReliOccStepNoise {
    std::vector<double> au_noise;   // m x width
    std::vector<std::size_t> perm;  // pairing permutation of 0..m-1
};

inline ReliOccStepNoise draw_reliocc_noise(std::size_t m, int width, std::mt19937_64& rng) {
    ReliOccStepNoise noise;
    noise.au_noise.resize(m * static_cast<std::size_t>(width));
    fill_gaussian(noise.au_noise, rng);
    noise.perm = shuffled_permutation(m, rng);
    return noise;
}

struct ReliOccLosses {
    double l_au = 0.0, l_ru = 0.0, l_calib = 0.0, total = 0.0;
};

// Weighted objective alpha*L_au + beta*L_ru + gamma*L_calib with gradients
// accumulated into the state. The network is frozen, so the mixed logits of
// a pair are the lambda-blend of the pair's logits (the completion head that
// produced them is affine in the features).
inline ReliOccLosses reliocc_objective_grad(const EvalView& view, ReliOccFitState& state,
                                            const ReliOccStepNoise& noise, const FitConfig& config,
                                            bool with_grad) {
    const auto width = static_cast<std::size_t>(view.width);
    const std::size_t m = view.m;
    const double inv_m = 1.0 / static_cast<double>(m);
    HeadCache head_cache;
    head_forward(state.head, view.features, m, head_cache);
    std::vector<double> dsigma(m, 0.0);

    ReliOccLosses losses;
    std::vector<double> a(width), scaled(width), p(width), zhat(width);

    // L_calib: NLL of softmax((W z + b) / T_sigma)
    for (std::size_t i = 0; i < m; ++i) {
        const auto z = view.logit_row(i);
        const double sigma = head_cache.sigma[i];
        const double t_raw = state.kvec[0] * sigma + state.kvec[1];
        const bool clamped = t_raw < kTempFloor;
        const double t_sigma = clamped ? kTempFloor : t_raw;
        for (std::size_t c = 0; c < width; ++c) {
            a[c] = state.w_diag[c] * z[c] + state.b[c];
            scaled[c] = a[c] / t_sigma;
        }
        softmax(scaled, p);
        const auto y = static_cast<std::size_t>(view.labels[i]);
        losses.l_calib += cross_entropy(scaled, static_cast<int>(y));
        if (with_grad) {
            double dt = 0.0;
            for (std::size_t c = 0; c < width; ++c) {
                const double g = (p[c] - (c == y ? 1.0 : 0.0)) * inv_m * config.gamma;
                state.gw_diag[c] += g * z[c] / t_sigma;
                state.gb[c] += g / t_sigma;
                dt -= g * a[c] / (t_sigma * t_sigma);
            }
            if (!clamped) {
                state.gkvec[0] += dt * sigma;
                state.gkvec[1] += dt;
                dsigma[i] += dt * state.kvec[0];
            }
        }
    }
    losses.l_calib *= inv_m;

    // L_au: cross-entropy of logits perturbed by scalar sigma noise
    for (std::size_t i = 0; i < m; ++i) {
        const auto z = view.logit_row(i);
        const double sigma = head_cache.sigma[i];
        const double* eps = noise.au_noise.data() + i * width;
        for (std::size_t c = 0; c < width; ++c) zhat[c] = z[c] + sigma * eps[c];
        softmax(zhat, p);
        const auto y = static_cast<std::size_t>(view.labels[i]);
        losses.l_au += cross_entropy(zhat, static_cast<int>(y));
        if (with_grad) {
            double ds = 0.0;
            for (std::size_t c = 0; c < width; ++c)
                ds += (p[c] - (c == y ? 1.0 : 0.0)) * eps[c];
            dsigma[i] += ds * inv_m * config.alpha;
        }
    }
    losses.l_au *= inv_m;

    // L_ru: two-hot cross-entropy of lambda-blended logits
    for (std::size_t i = 0; i < m; ++i) {
        const std::size_t j = noise.perm[i];
        const double si = head_cache.sigma[i];
        const double sj = head_cache.sigma[j];
        const double lambda = mix_lambda(si, sj);
        const auto zi = view.logit_row(i);
        const auto zj = view.logit_row(j);
        for (std::size_t c = 0; c < width; ++c)
            zhat[c] = lambda * zi[c] + (1.0 - lambda) * zj[c];
        softmax(zhat, p);
        const auto yi = static_cast<std::size_t>(view.labels[i]);
        const auto yj = static_cast<std::size_t>(view.labels[j]);
        const double lse = log_sum_exp(zhat);
        losses.l_ru += (lse - zhat[yi]) + (lse - zhat[yj]);
        if (with_grad) {
            double dlambda = 0.0;
            for (std::size_t c = 0; c < width; ++c) {
                double t = (c == yi ? 1.0 : 0.0) + (c == yj ? 1.0 : 0.0);
                dlambda += (2.0 * p[c] - t) * (zi[c] - zj[c]);
            }
            dlambda *= inv_m * config.beta;
            const double denom = (si + sj) * (si + sj);
            dsigma[i] += dlambda * sj / denom;
            dsigma[j] -= dlambda * si / denom;
        }
    }
    losses.l_ru *= inv_m;

    if (with_grad) head_backward(state.head, view.features, head_cache, dsigma);
    losses.total = config.alpha * losses.l_au + config.beta * losses.l_ru +
                   config.gamma * losses.l_calib;
    return losses;
}

// Calibrated-distribution NLL under the current reliocc state (no noise).
inline double reliocc_nll(const EvalView& view, ReliOccFitState& state, const FitConfig& config) {
    FitConfig probe = config;
    ReliOccStepNoise no_noise;
    no_noise.au_noise.assign(view.m * static_cast<std::size_t>(view.width), 0.0);
    no_noise.perm.resize(view.m);
    for (std::size_t i = 0; i < view.m; ++i) no_noise.perm[i] = i;
    return reliocc_objective_grad(view, state, no_noise, probe, false).l_calib;
}

inline void check_finite_nll(double nll, std::size_t iteration) {
    if (!std::isfinite(nll))
        throw std::runtime_error("fit_calibrator: NLL diverged at iteration " +
                                 std::to_string(iteration));
}

}  // namespace calib_detail

// Minimizes the mean NLL of the calibrated distribution on the non-ignored
// voxels of `val_batch` (for ReliOccScaler, the hybrid objective
// alpha*L_au + beta*L_ru + gamma*L_calib). Deterministic given config.seed.
// `epoch_nll`, when provided, receives the calibrated NLL after each epoch.
inline CalibratorParams fit_calibrator(CalibratorKind kind, const VoxelBatch& val_batch,
                                       const FitConfig& config = {},
                                       std::vector<double>* epoch_nll = nullptr) {
    using namespace calib_detail;
    const EvalView view = make_view(val_batch);
    const auto width = static_cast<std::size_t>(view.width);

    CalibratorParams out;
    out.kind = kind;
    out.num_classes = view.width - 1;
    const std::size_t total_steps =
        static_cast<std::size_t>(config.epochs) * static_cast<std::size_t>(config.steps_per_epoch);
    if (epoch_nll) epoch_nll->clear();

    auto run_adam = [&](const std::vector<ParamRef>& params, auto&& grad_fn, auto&& nll_fn,
                        std::vector<double>* nll_out) -> double {
        Adam adam;
        adam.lr = config.lr;
        adam.weight_decay = config.weight_decay;
        std::size_t it = 0;
        double nll = nll_fn();
        for (int e = 0; e < config.epochs; ++e) {
            for (int s = 0; s < config.steps_per_epoch; ++s) {
                zero_grads(params);
                const double step_nll = grad_fn(it);
                check_finite_nll(step_nll, it);
                adam.step(params);
                ++it;
            }
            nll = nll_fn();
            check_finite_nll(nll, it);
            if (nll_out) nll_out->push_back(nll);
        }
        return nll;
    };

    switch (kind) {
        case CalibratorKind::TempS: {
            std::vector<double> T{1.0}, gT{0.0};
            std::vector<ParamRef> params{{"T", &T, &gT}};
            const double nll = run_adam(
                params,
                [&](std::size_t) {
                    double g = 0.0;
                    const double v = temps_nll_grad(view, T[0], &g);
                    gT[0] = g;
                    return v;
                },
                [&] {
                    T[0] = std::max(T[0], kTempFloor);
                    return temps_nll_grad(view, T[0], nullptr);
                },
                epoch_nll);
            out.T = T[0];
            out.fit_log = {nll, total_steps};
            break;
        }
        case CalibratorKind::DiriS: {
            std::vector<double> W(width * width, 0.0), b(width, 0.0);
            for (std::size_t c = 0; c < width; ++c) W[c * width + c] = 1.0;
            std::vector<double> gW(W.size(), 0.0), gb(b.size(), 0.0);
            std::vector<ParamRef> params{{"W", &W, &gW}, {"b", &b, &gb}};
            const double nll = run_adam(
                params, [&](std::size_t) { return diris_nll_grad(view, W, b, gW, gb); },
                [&] { return diris_nll_grad(view, W, b, {}, {}); }, epoch_nll);
            out.W = W;
            out.b = b;
            out.fit_log = {nll, total_steps};
            break;
        }
        case CalibratorKind::MetaC:
        case CalibratorKind::DeptS: {
            if (kind == CalibratorKind::DeptS && view.depths.empty())
                throw std::invalid_argument("fit_calibrator: depts requires depths");
            double best_nll = std::numeric_limits<double>::infinity();
            CalibratorParams best = out;
            std::vector<double> best_epochs;
            for (double factor : config.eta_grid_factors) {
                const double eta = factor * std::log(static_cast<double>(width));
                std::vector<double> epochs_here;
                CalibratorParams cand = out;
                cand.eta = eta;
                double nll = 0.0;
                if (kind == CalibratorKind::MetaC) {
                    std::vector<double> T{1.0}, gT{0.0};
                    std::vector<ParamRef> params{{"T", &T, &gT}};
                    nll = run_adam(
                        params,
                        [&](std::size_t) {
                            double g = 0.0;
                            const double v = metac_nll_grad(view, T[0], eta, &g);
                            gT[0] = g;
                            return v;
                        },
                        [&] {
                            T[0] = std::max(T[0], kTempFloor);
                            return metac_nll_grad(view, T[0], eta, nullptr);
                        },
                        &epochs_here);
                    cand.T = T[0];
                } else {
                    std::vector<double> theta{0.0, 1.0, 1.5, 1.0};  // k1, k2, T1, T2
                    std::vector<double> gtheta(4, 0.0);
                    std::vector<ParamRef> params{{"theta", &theta, &gtheta}};
                    nll = run_adam(
                        params,
                        [&](std::size_t) {
                            return depts_nll_grad(view, theta[0], theta[1], theta[2], theta[3],
                                                  eta, &gtheta[0], &gtheta[1], &gtheta[2],
                                                  &gtheta[3]);
                        },
                        [&] {
                            theta[2] = std::max(theta[2], kTempFloor);
                            theta[3] = std::max(theta[3], kTempFloor);
                            return depts_nll_grad(view, theta[0], theta[1], theta[2], theta[3],
                                                  eta, nullptr, nullptr, nullptr, nullptr);
                        },
                        &epochs_here);
                    cand.k1 = theta[0];
                    cand.k2 = theta[1];
                    cand.T1 = theta[2];
                    cand.T2 = theta[3];
                }
                cand.fit_log = {nll, total_steps};
                if (nll < best_nll) {
                    best_nll = nll;
                    best = cand;
                    best_epochs = epochs_here;
                }
            }
            if (epoch_nll) *epoch_nll = best_epochs;
            out = best;
            break;
        }
        case CalibratorKind::ReliOccScaler: {
            ReliOccFitState state = make_reliocc_state(view, config);
            const std::vector<ParamRef> params = state.params();
            Adam adam;
            adam.lr = config.lr;
            adam.weight_decay = config.weight_decay;
            std::size_t it = 0;
            double nll = reliocc_nll(view, state, config);
            for (int e = 0; e < config.epochs; ++e) {
                for (int s = 0; s < config.steps_per_epoch; ++s) {
                    std::mt19937_64 rng =
                        make_rng(derive_seed(config.seed, static_cast<std::uint64_t>(e),
                                             static_cast<std::uint64_t>(s)));
                    const ReliOccStepNoise noise = draw_reliocc_noise(view.m, view.width, rng);
                    zero_grads(params);
                    const ReliOccLosses losses =
                        reliocc_objective_grad(view, state, noise, config, true);
                    check_finite_nll(losses.total, it);
                    adam.step(params);
                    ++it;
                }
                nll = reliocc_nll(view, state, config);
                check_finite_nll(nll, it);
                if (epoch_nll) epoch_nll->push_back(nll);
            }
            out.k1 = state.kvec[0];
            out.k2 = state.kvec[1];
            out.W = state.w_diag;
            out.b = state.b;
            out.sigma_head = state.head;
            out.fit_log = {nll, total_steps};
            break;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Application
// ---------------------------------------------------------------------------

// Calibrated probabilities with the predicted label pinned to the raw
// argmax, so IoU/mIoU are identical before and after calibration.
inline ProbBatch apply_calibrator(const CalibratorParams& params, const VoxelBatch& batch) {
    if (batch.logit_width() != params.width())
        throw std::invalid_argument("apply_calibrator: class count mismatch");
    const auto width = static_cast<std::size_t>(params.width());
    const bool head_usable = !params.sigma_head.empty() && batch.has_features() &&
                             params.sigma_head.input_dim == batch.feature_dim;
    if (params.kind == CalibratorKind::DeptS && !batch.has_depths())
        throw std::invalid_argument("apply_calibrator: depts requires depths");
    if (params.kind == CalibratorKind::ReliOccScaler && !head_usable && !batch.has_sigmas())
        throw std::invalid_argument(
            "apply_calibrator: reliocc requires features (for the fitted sigma head) or sigmas");

    ProbBatch out;
    out.n = batch.n;
    out.num_classes = batch.num_classes;
    out.probs.resize(batch.n * width);
    out.pred_label.resize(batch.n);
    out.confidence.resize(batch.n);

    std::vector<double> z(width), feat;
    for (std::size_t i = 0; i < batch.n; ++i) {
        const auto row = batch.logit_row(i);
        for (std::size_t c = 0; c < width; ++c) z[c] = row[c];
        const int raw_pred = argmax_low(z);
        std::vector<double> p;
        switch (params.kind) {
            case CalibratorKind::TempS:
                p = temp_scale(z, params.T);
                break;
            case CalibratorKind::DiriS:
                p = diri_scale(z, params.W, params.b);
                break;
            case CalibratorKind::MetaC: {
                const std::vector<double> raw = softmax(z);
                const double c = raw[static_cast<std::size_t>(argmax_low(raw))];
                if (-c * std::log(c) < params.eta) p = temp_scale(z, params.T);
                else p.assign(width, 1.0 / static_cast<double>(width));
                break;
            }
            case CalibratorKind::DeptS:
                p = depts_scale(z, batch.depths[i], params.k1, params.k2, params.T1, params.T2,
                                params.eta);
                break;
            case CalibratorKind::ReliOccScaler: {
                double sigma;
                if (head_usable) {
                    const auto f = batch.feature_row(i);
                    feat.assign(f.begin(), f.end());
                    sigma = head_sigma(params.sigma_head, feat);
                } else {
                    sigma = batch.sigmas[i];
                }
                p = reliocc_scale(z, sigma, params.k1, params.k2, params.W, params.b);
                break;
            }
        }
        std::copy(p.begin(), p.end(), out.probs.begin() + static_cast<std::ptrdiff_t>(i * width));
        out.pred_label[i] = static_cast<std::uint16_t>(raw_pred);
        out.confidence[i] = p[static_cast<std::size_t>(raw_pred)];
    }
    return out;
}

}  // namespace reliocc
