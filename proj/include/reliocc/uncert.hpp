// Online uncertainty-learning building blocks: the scalar sigma head,
// logit-noise sampling with its cross-entropy objective, mix-up pairing with
// the relative-uncertainty objective, per-dimension feature Gaussians with
// their KL regularizer, and dropout-sample aggregation.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

#include "reliocc/core.hpp"
#include "reliocc/optim.hpp"
#include "reliocc/rng.hpp"

namespace reliocc {

inline double softplus(double x) {
    if (x > 30.0) return x;
    if (x < -30.0) return std::exp(x);
    return std::log1p(std::exp(x));
}

inline double sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

// ---------------------------------------------------------------------------
// Sigma head: feature -> hidden (rectifier) -> scalar, softplus + floor so
// the output stays strictly positive.
// ---------------------------------------------------------------------------

struct UncertaintyHead {
    int input_dim = 0;
    int hidden_dim = 32;
    double sigma_floor = 1e-3;

    std::vector<double> w1, b1, w2, b2;      // w1: hidden x input, w2: hidden, b2: 1
    std::vector<double> gw1, gb1, gw2, gb2;  // gradient accumulators

    bool empty() const { return input_dim == 0; }

    std::vector<ParamRef> params() {
        return {{"head.w1", &w1, &gw1},
                {"head.b1", &b1, &gb1},
                {"head.w2", &w2, &gw2},
                {"head.b2", &b2, &gb2}};
    }
};

inline UncertaintyHead make_uncertainty_head(int input_dim, std::uint64_t seed,
                                             int hidden_dim = 32) {
    UncertaintyHead h;
    h.input_dim = input_dim;
    h.hidden_dim = hidden_dim;
    std::mt19937_64 rng = make_rng(seed);
    const std::size_t n1 = static_cast<std::size_t>(hidden_dim) * static_cast<std::size_t>(input_dim);
    h.w1.resize(n1);
    h.b1.assign(static_cast<std::size_t>(hidden_dim), 0.0);
    h.w2.resize(static_cast<std::size_t>(hidden_dim));
    h.b2.assign(1, 0.0);
    fill_gaussian(h.w1, rng, 0.0, std::sqrt(2.0 / input_dim));
    fill_gaussian(h.w2, rng, 0.0, std::sqrt(2.0 / hidden_dim));
    h.gw1.assign(h.w1.size(), 0.0);
    h.gb1.assign(h.b1.size(), 0.0);
    h.gw2.assign(h.w2.size(), 0.0);
    h.gb2.assign(1, 0.0);
    return h;
}

// Activations kept for the backward pass, m voxels at a time.
struct HeadCache {
    std::size_t m = 0;
    std::vector<double> hidden_pre;  // m x hidden
    std::vector<double> out_pre;     // m
    std::vector<double> sigma;       // m
};

inline void head_forward(const UncertaintyHead& h, std::span<const double> features,
                         std::size_t m, HeadCache& cache) {
    const auto d = static_cast<std::size_t>(h.input_dim);
    const auto hid = static_cast<std::size_t>(h.hidden_dim);
    cache.m = m;
    cache.hidden_pre.assign(m * hid, 0.0);
    cache.out_pre.assign(m, 0.0);
    cache.sigma.assign(m, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        const double* x = features.data() + i * d;
        double* a = cache.hidden_pre.data() + i * hid;
        double out = h.b2[0];
        for (std::size_t k = 0; k < hid; ++k) {
            double s = h.b1[k];
            const double* w = h.w1.data() + k * d;
            for (std::size_t j = 0; j < d; ++j) s += w[j] * x[j];
            a[k] = s;
            out += h.w2[k] * (s > 0.0 ? s : 0.0);
        }
        cache.out_pre[i] = out;
        cache.sigma[i] = h.sigma_floor + softplus(out);
    }
}

// Accumulates parameter gradients for dL/dsigma over the cached batch.
inline void head_backward(UncertaintyHead& h, std::span<const double> features,
                          const HeadCache& cache, std::span<const double> dsigma) {
    const auto d = static_cast<std::size_t>(h.input_dim);
    const auto hid = static_cast<std::size_t>(h.hidden_dim);
    for (std::size_t i = 0; i < cache.m; ++i) {
        const double g_out = dsigma[i] * sigmoid(cache.out_pre[i]);
        if (g_out == 0.0) continue;
        const double* x = features.data() + i * d;
        const double* a = cache.hidden_pre.data() + i * hid;
        h.gb2[0] += g_out;
        for (std::size_t k = 0; k < hid; ++k) {
            const double relu = a[k] > 0.0 ? a[k] : 0.0;
            h.gw2[k] += g_out * relu;
            if (a[k] <= 0.0) continue;
            const double gh = g_out * h.w2[k];
            h.gb1[k] += gh;
            double* gw = h.gw1.data() + k * d;
            for (std::size_t j = 0; j < d; ++j) gw[j] += gh * x[j];
        }
    }
}

inline double head_sigma(const UncertaintyHead& h, std::span<const double> feature) {
    HeadCache cache;
    head_forward(h, feature, 1, cache);
    return cache.sigma[0];
}

// ---------------------------------------------------------------------------
// Absolute uncertainty: one scalar-noise sample per voxel
// ---------------------------------------------------------------------------

// zhat = z + sigma * eps with the scalar sigma broadcast over all entries.
inline void sample_absolute(std::span<const double> logits, double sigma,
                            std::span<const double> noise, std::span<double> out) {
    if (!(sigma > 0.0)) throw std::invalid_argument("sample_absolute: sigma must be positive");
    if (noise.size() != logits.size() || out.size() != logits.size())
        throw std::invalid_argument("sample_absolute: size mismatch");
    for (std::size_t c = 0; c < logits.size(); ++c) out[c] = logits[c] + sigma * noise[c];
}

inline double loss_absolute(std::span<const double> sampled_logits, std::uint16_t label) {
    if (label == kIgnoreLabel) throw std::invalid_argument("loss_absolute: ignored label");
    return cross_entropy(sampled_logits, label);
}

// ---------------------------------------------------------------------------
// Relative uncertainty: mix-up pairs weighted by sigma ratios
// ---------------------------------------------------------------------------

inline double mix_lambda(double sigma_i, double sigma_j) { return sigma_i / (sigma_i + sigma_j); }

struct MixPair {
    std::size_t i = 0;
    std::size_t j = 0;
    double lambda = 0.5;
    std::vector<double> mixed_feature;  // lambda*v_i + (1-lambda)*v_j; empty without features
    std::vector<double> target;         // onehot(y_i) + onehot(y_j), entries in {0,1,2}
};

// Seeded pairing (e[k], e[perm[k]]) over the non-ignored voxels.
inline std::vector<std::size_t> eligible_indices(std::span<const std::uint16_t> labels) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < labels.size(); ++i)
        if (labels[i] != kIgnoreLabel) idx.push_back(i);
    return idx;
}

inline std::vector<std::size_t> shuffled_permutation(std::size_t m, std::mt19937_64& rng) {
    std::vector<std::size_t> perm(m);
    for (std::size_t i = 0; i < m; ++i) perm[i] = i;
    std::shuffle(perm.begin(), perm.end(), rng);
    return perm;
}

inline std::vector<MixPair> make_pairs(const VoxelBatch& batch, std::span<const double> sigmas,
                                       std::mt19937_64& rng) {
    if (sigmas.size() != batch.n) throw std::invalid_argument("make_pairs: sigma size mismatch");
    const std::vector<std::size_t> idx = eligible_indices(batch.labels);
    if (idx.size() < 2) throw std::invalid_argument("make_pairs: fewer than 2 eligible voxels");
    const std::vector<std::size_t> perm = shuffled_permutation(idx.size(), rng);
    const auto width = static_cast<std::size_t>(batch.logit_width());
    std::vector<MixPair> pairs(idx.size());
    for (std::size_t k = 0; k < idx.size(); ++k) {
        MixPair& p = pairs[k];
        p.i = idx[k];
        p.j = idx[perm[k]];
        p.lambda = mix_lambda(sigmas[p.i], sigmas[p.j]);
        if (batch.has_features()) {
            const auto vi = batch.feature_row(p.i);
            const auto vj = batch.feature_row(p.j);
            p.mixed_feature.resize(vi.size());
            for (std::size_t c = 0; c < vi.size(); ++c)
                p.mixed_feature[c] = p.lambda * vi[c] + (1.0 - p.lambda) * vj[c];
        }
        p.target.assign(width, 0.0);
        p.target[batch.labels[p.i]] += 1.0;
        p.target[batch.labels[p.j]] += 1.0;
    }
    return pairs;
}

// -sum_c target_c * log softmax(mixed_logits)_c for one pair.
inline double loss_relative(std::span<const double> mixed_logits, std::span<const double> target) {
    if (target.size() != mixed_logits.size())
        throw std::invalid_argument("loss_relative: size mismatch");
    const double lse = log_sum_exp(mixed_logits);
    double total = 0.0;
    double loss = 0.0;
    for (std::size_t c = 0; c < target.size(); ++c) {
        total += target[c];
        if (target[c] != 0.0) loss += target[c] * (lse - mixed_logits[c]);
    }
    if (std::abs(total - 2.0) > 1e-9)
        throw std::invalid_argument("loss_relative: target must sum to 2");
    return loss;
}

// ---------------------------------------------------------------------------
// Per-dimension feature Gaussian with KL regularizer
// ---------------------------------------------------------------------------

// vhat = v + sigma (.) eps; kl = KL(N(v, diag sigma^2) || N(0, I)).
inline double dul_transform(std::span<const double> v, std::span<const double> sigma_vec,
                            std::span<const double> noise, std::span<double> vhat) {
    if (sigma_vec.size() != v.size() || noise.size() != v.size() || vhat.size() != v.size())
        throw std::invalid_argument("dul_transform: size mismatch");
    double kl = 0.0;
    for (std::size_t k = 0; k < v.size(); ++k) {
        const double s = sigma_vec[k];
        if (!(s > 0.0)) throw std::invalid_argument("dul_transform: sigma must be positive");
        vhat[k] = v[k] + s * noise[k];
        kl += s * s + v[k] * v[k] - 1.0 - std::log(s * s);
    }
    return 0.5 * kl;
}

// ---------------------------------------------------------------------------
// Dropout-sample aggregation
// ---------------------------------------------------------------------------

struct McdAggregate {
    std::vector<double> mean_logits;
    double uncertainty = 0.0;  // entropy of the mean predictive distribution / ln(S+1)
};

inline McdAggregate mcd_aggregate(const std::vector<std::vector<double>>& logit_samples) {
    if (logit_samples.empty()) throw std::invalid_argument("mcd_aggregate: no samples");
    const std::size_t width = logit_samples.front().size();
    McdAggregate out;
    out.mean_logits.assign(width, 0.0);
    std::vector<double> mean_probs(width, 0.0);
    std::vector<double> p(width);
    for (const auto& z : logit_samples) {
        if (z.size() != width) throw std::invalid_argument("mcd_aggregate: ragged samples");
        softmax(z, p);
        for (std::size_t c = 0; c < width; ++c) {
            out.mean_logits[c] += z[c];
            mean_probs[c] += p[c];
        }
    }
    const double k = static_cast<double>(logit_samples.size());
    double entropy = 0.0;
    for (std::size_t c = 0; c < width; ++c) {
        out.mean_logits[c] /= k;
        mean_probs[c] /= k;
        if (mean_probs[c] > 0.0) entropy -= mean_probs[c] * std::log(mean_probs[c]);
    }
    out.uncertainty = entropy / std::log(static_cast<double>(width));
    return out;
}

}  // namespace reliocc
