// Desk-scale substrate: a procedural voxel-scene generator and a small
// feed-forward classifier with hand-written reverse-mode gradients. The
// classifier exercises the online uncertainty objectives (logit-noise
// sampling, mix-up pairs, feature Gaussians, dropout) and produces dumps for
// offline calibration.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "reliocc/core.hpp"
#include "reliocc/optim.hpp"
#include "reliocc/rng.hpp"
#include "reliocc/uncert.hpp"

namespace reliocc {

// ---------------------------------------------------------------------------
// Synthetic scenes
// ---------------------------------------------------------------------------

// Classes: 0 empty, 1 ground, 2 car, 3 pole, 4 vegetation. Feature noise
// grows linearly with depth so the aleatoric structure the sigma head is
// supposed to capture actually exists in the data.
struct SceneConfig {
    int grid_l = 32, grid_w = 32, grid_h = 8;
    int feature_dim = 16;
    double noise_base = 1.0;
    double noise_depth_slope = 0.04;
    double ignore_fraction = 0.02;
    std::uint64_t prototype_seed = 9001;
    int scenes_train = 6, scenes_val = 2, scenes_test = 2;

    static constexpr int kNumClasses = 4;  // object classes; logit width is 5
};

struct SceneDataset {
    VoxelBatch train, val, test;
};

namespace toynet_detail {

inline std::vector<std::uint16_t> generate_scene_labels(const SceneConfig& cfg,
                                                        std::mt19937_64& rng) {
    const int L = cfg.grid_l, W = cfg.grid_w, H = cfg.grid_h;
    std::vector<std::uint16_t> labels(static_cast<std::size_t>(L) * W * H, 0);
    auto at = [&](int x, int y, int z) -> std::uint16_t& {
        return labels[(static_cast<std::size_t>(x) * W + y) * H + z];
    };
    auto uniform_int = [&](int lo, int hi) {
        return std::uniform_int_distribution<int>(lo, hi)(rng);
    };
    auto uniform_real = [&](double lo, double hi) {
        return std::uniform_real_distribution<double>(lo, hi)(rng);
    };

    for (int x = 0; x < L; ++x)
        for (int y = 0; y < W; ++y) at(x, y, 0) = 1;  // ground plane

    const int n_cars = uniform_int(2, 4);
    for (int c = 0; c < n_cars; ++c) {
        const int lx = uniform_int(3, 5), ly = uniform_int(2, 3), lz = 2;
        const int x0 = uniform_int(0, std::max(0, L - lx));
        const int y0 = uniform_int(0, std::max(0, W - ly));
        for (int x = x0; x < std::min(L, x0 + lx); ++x)
            for (int y = y0; y < std::min(W, y0 + ly); ++y)
                for (int z = 1; z < std::min(H, 1 + lz); ++z) at(x, y, z) = 2;
    }

    const int n_poles = uniform_int(3, 6);
    for (int c = 0; c < n_poles; ++c) {
        const int x = uniform_int(0, L - 1), y = uniform_int(0, W - 1);
        const int top = uniform_int(std::min(4, H - 1), H - 1);
        for (int z = 1; z <= top; ++z) at(x, y, z) = 3;
    }

    const int n_blobs = uniform_int(2, 4);
    for (int c = 0; c < n_blobs; ++c) {
        const double cx = uniform_real(0.0, L - 1.0);
        const double cy = uniform_real(0.0, W - 1.0);
        const double cz = uniform_real(2.0, std::max(2.0, H - 2.0));
        const double r = uniform_real(1.5, 3.0);
        const int x0 = std::max(0, static_cast<int>(cx - r)), x1 = std::min(L - 1, static_cast<int>(cx + r) + 1);
        const int y0 = std::max(0, static_cast<int>(cy - r)), y1 = std::min(W - 1, static_cast<int>(cy + r) + 1);
        const int z0 = std::max(1, static_cast<int>(cz - r)), z1 = std::min(H - 1, static_cast<int>(cz + r) + 1);
        for (int x = x0; x <= x1; ++x)
            for (int y = y0; y <= y1; ++y)
                for (int z = z0; z <= z1; ++z) {
                    const double dx = x - cx, dy = y - cy, dz = z - cz;
                    if (dx * dx + dy * dy + dz * dz <= r * r) at(x, y, z) = 4;
                }
    }
    return labels;
}

inline void append_scene(VoxelBatch& batch, const SceneConfig& cfg,
                         std::span<const double> prototypes, std::uint64_t scene_seed) {
    std::mt19937_64 rng = make_rng(scene_seed);
    const std::vector<std::uint16_t> labels = generate_scene_labels(cfg, rng);
    const int L = cfg.grid_l, W = cfg.grid_w, H = cfg.grid_h;
    const auto d = static_cast<std::size_t>(cfg.feature_dim);
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    std::size_t v = 0;
    for (int x = 0; x < L; ++x)
        for (int y = 0; y < W; ++y)
            for (int z = 0; z < H; ++z, ++v) {
                const std::uint16_t cls = labels[v];
                const double depth = std::sqrt((x + 0.5) * (x + 0.5) + (y + 0.5) * (y + 0.5) +
                                               (z + 0.5) * (z + 0.5));
                const double noise_std = cfg.noise_base + cfg.noise_depth_slope * depth;
                const double* proto = prototypes.data() + cls * d;
                for (std::size_t k = 0; k < d; ++k)
                    batch.features.push_back(
                        static_cast<float>(proto[k] + noise_std * gauss(rng)));
                batch.depths.push_back(static_cast<float>(depth));
                const bool ignored = unit(rng) < cfg.ignore_fraction;
                batch.labels.push_back(ignored ? kIgnoreLabel : cls);
                for (int c = 0; c <= SceneConfig::kNumClasses; ++c)
                    batch.logits.push_back(0.0f);
                ++batch.n;
            }
}

}  // namespace toynet_detail

// Procedural train/val/test scene splits, fully reproducible per seed.
// Generated batches carry labels, features and depths; logits are zero until
// a model fills them.
inline SceneDataset generate_scenes(const SceneConfig& cfg, std::uint64_t seed) {
    if (cfg.grid_l < 1 || cfg.grid_w < 1 || cfg.grid_h < 2)
        throw std::invalid_argument("generate_scenes: degenerate grid dims");
    if (cfg.feature_dim < 1) throw std::invalid_argument("generate_scenes: feature_dim < 1");
    if (cfg.noise_base < 0.0 || cfg.noise_depth_slope < 0.0)
        throw std::invalid_argument("generate_scenes: negative noise parameters");

    const auto d = static_cast<std::size_t>(cfg.feature_dim);
    std::vector<double> prototypes((SceneConfig::kNumClasses + 1) * d);
    std::mt19937_64 proto_rng = make_rng(cfg.prototype_seed);
    fill_gaussian(prototypes, proto_rng);

    SceneDataset ds;
    for (VoxelBatch* split : {&ds.train, &ds.val, &ds.test}) {
        split->num_classes = SceneConfig::kNumClasses;
        split->feature_dim = cfg.feature_dim;
    }
    std::uint64_t scene_index = 0;
    auto fill_split = [&](VoxelBatch& split, int count) {
        for (int s = 0; s < count; ++s, ++scene_index)
            toynet_detail::append_scene(split, cfg, prototypes,
                                        derive_seed(seed, 0x7363656E, scene_index));
        split.validate();
    };
    fill_split(ds.train, cfg.scenes_train);
    fill_split(ds.val, cfg.scenes_val);
    fill_split(ds.test, cfg.scenes_test);
    return ds;
}

// ---------------------------------------------------------------------------
// The classifier
// ---------------------------------------------------------------------------

struct DenseLayer {
    int in = 0, out = 0;
    std::vector<double> w, b;    // w: out x in, row-major
    std::vector<double> gw, gb;
};

inline DenseLayer make_dense(int in, int out, std::mt19937_64& rng) {
    DenseLayer l;
    l.in = in;
    l.out = out;
    l.w.resize(static_cast<std::size_t>(in) * out);
    l.b.assign(static_cast<std::size_t>(out), 0.0);
    fill_gaussian(l.w, rng, 0.0, std::sqrt(2.0 / in));
    l.gw.assign(l.w.size(), 0.0);
    l.gb.assign(l.b.size(), 0.0);
    return l;
}

enum class TrainMode { Baseline, Hau, Dul, Mcd, ReliOcc };

inline const char* train_mode_name(TrainMode m) {
    switch (m) {
        case TrainMode::Baseline: return "baseline";
        case TrainMode::Hau: return "hau";
        case TrainMode::Dul: return "dul";
        case TrainMode::Mcd: return "mcd";
        case TrainMode::ReliOcc: return "reliocc";
    }
    return "?";
}

inline TrainMode train_mode_from_name(const std::string& name) {
    if (name == "baseline") return TrainMode::Baseline;
    if (name == "hau") return TrainMode::Hau;
    if (name == "dul") return TrainMode::Dul;
    if (name == "mcd") return TrainMode::Mcd;
    if (name == "reliocc") return TrainMode::ReliOcc;
    throw std::invalid_argument("unknown train mode: " + name);
}

// Per-dimension sigma predictor used by the feature-Gaussian mode: one
// linear layer with softplus and a floor.
struct DulHead {
    int dim = 0;
    std::vector<double> w, b, gw, gb;  // w: dim x dim
    double sigma_floor = 1e-3;
};

struct ToyNet {
    int feature_dim = 0;
    int num_classes = 0;
    int hidden = 32;
    double dropout_p = 0.2;

    DenseLayer l1, l2, l3;
    UncertaintyHead head;
    DulHead dul;
    std::vector<double> class_weights;  // S+1, mean 1; set by train()
    Adam opt;

    int width() const { return num_classes + 1; }

    std::vector<ParamRef> trainable_params(TrainMode mode) {
        std::vector<ParamRef> out = {{"l1.w", &l1.w, &l1.gw}, {"l1.b", &l1.b, &l1.gb},
                                     {"l2.w", &l2.w, &l2.gw}, {"l2.b", &l2.b, &l2.gb},
                                     {"l3.w", &l3.w, &l3.gw}, {"l3.b", &l3.b, &l3.gb}};
        if (mode == TrainMode::Hau || mode == TrainMode::ReliOcc)
            for (auto& p : head.params()) out.push_back(p);
        if (mode == TrainMode::Dul) {
            out.push_back({"dul.w", &dul.w, &dul.gw});
            out.push_back({"dul.b", &dul.b, &dul.gb});
        }
        return out;
    }
};

inline ToyNet make_toynet(int feature_dim, int num_classes, std::uint64_t seed,
                          double dropout_p = 0.2) {
    ToyNet net;
    net.feature_dim = feature_dim;
    net.num_classes = num_classes;
    net.dropout_p = dropout_p;
    std::mt19937_64 rng = make_rng(derive_seed(seed, 0x6E6574));
    net.l1 = make_dense(feature_dim, net.hidden, rng);
    net.l2 = make_dense(net.hidden, net.hidden, rng);
    net.l3 = make_dense(net.hidden, num_classes + 1, rng);
    net.head = make_uncertainty_head(feature_dim, derive_seed(seed, 0x68656164));
    net.dul.dim = feature_dim;
    net.dul.w.resize(static_cast<std::size_t>(feature_dim) * feature_dim);
    net.dul.b.assign(static_cast<std::size_t>(feature_dim), 0.0);
    std::mt19937_64 dul_rng = make_rng(derive_seed(seed, 0x64756C));
    fill_gaussian(net.dul.w, dul_rng, 0.0, 0.01);
    net.dul.gw.assign(net.dul.w.size(), 0.0);
    net.dul.gb.assign(net.dul.b.size(), 0.0);
    net.class_weights.assign(static_cast<std::size_t>(num_classes) + 1, 1.0);
    net.opt.lr = 2e-4;
    return net;
}

// Bernoulli keep masks for both hidden layers; the kept activations are
// scaled by 1/(1-p) so the expected forward matches the deterministic one.
struct DropoutMasks {
    std::vector<std::uint8_t> h1, h2;  // m x hidden each
};

inline DropoutMasks draw_dropout_masks(std::size_t m, int hidden, double p,
                                       std::mt19937_64& rng) {
    DropoutMasks masks;
    masks.h1.resize(m * static_cast<std::size_t>(hidden));
    masks.h2.resize(m * static_cast<std::size_t>(hidden));
    std::bernoulli_distribution keep(1.0 - p);
    for (auto& v : masks.h1) v = keep(rng) ? 1 : 0;
    for (auto& v : masks.h2) v = keep(rng) ? 1 : 0;
    return masks;
}

struct NetCache {
    std::size_t m = 0;
    std::vector<double> x;               // m x d
    std::vector<double> a1, h1, a2, h2;  // pre-activation and (dropped) activation
    std::vector<double> z;               // m x (S+1)
    const DropoutMasks* masks = nullptr;
    double keep_scale = 1.0;
};

inline void net_forward(const ToyNet& net, std::span<const double> x, std::size_t m,
                        NetCache& cache, const DropoutMasks* masks = nullptr) {
    const auto d = static_cast<std::size_t>(net.feature_dim);
    const auto hid = static_cast<std::size_t>(net.hidden);
    const auto width = static_cast<std::size_t>(net.width());
    if (x.size() != m * d) throw std::invalid_argument("net_forward: feature width mismatch");
    cache.m = m;
    cache.x.assign(x.begin(), x.end());
    cache.a1.assign(m * hid, 0.0);
    cache.h1.assign(m * hid, 0.0);
    cache.a2.assign(m * hid, 0.0);
    cache.h2.assign(m * hid, 0.0);
    cache.z.assign(m * width, 0.0);
    cache.masks = masks;
    cache.keep_scale = masks ? 1.0 / (1.0 - net.dropout_p) : 1.0;
    if (masks && net.dropout_p >= 1.0)
        throw std::invalid_argument("net_forward: dropout_p must be < 1");

    for (std::size_t i = 0; i < m; ++i) {
        const double* xi = cache.x.data() + i * d;
        double* a1 = cache.a1.data() + i * hid;
        double* h1 = cache.h1.data() + i * hid;
        for (std::size_t k = 0; k < hid; ++k) {
            double s = net.l1.b[k];
            const double* w = net.l1.w.data() + k * d;
            for (std::size_t j = 0; j < d; ++j) s += w[j] * xi[j];
            a1[k] = s;
            double h = s > 0.0 ? s : 0.0;
            if (masks) h *= masks->h1[i * hid + k] ? cache.keep_scale : 0.0;
            h1[k] = h;
        }
        double* a2 = cache.a2.data() + i * hid;
        double* h2 = cache.h2.data() + i * hid;
        for (std::size_t k = 0; k < hid; ++k) {
            double s = net.l2.b[k];
            const double* w = net.l2.w.data() + k * hid;
            for (std::size_t j = 0; j < hid; ++j) s += w[j] * h1[j];
            a2[k] = s;
            double h = s > 0.0 ? s : 0.0;
            if (masks) h *= masks->h2[i * hid + k] ? cache.keep_scale : 0.0;
            h2[k] = h;
        }
        double* z = cache.z.data() + i * width;
        for (std::size_t c = 0; c < width; ++c) {
            double s = net.l3.b[c];
            const double* w = net.l3.w.data() + c * hid;
            for (std::size_t j = 0; j < hid; ++j) s += w[j] * h2[j];
            z[c] = s;
        }
    }
}

// Accumulates parameter gradients for dL/dz; optionally returns dL/dx.
inline void net_backward(ToyNet& net, const NetCache& cache, std::span<const double> dz,
                         std::vector<double>* dx_out = nullptr) {
    const auto d = static_cast<std::size_t>(net.feature_dim);
    const auto hid = static_cast<std::size_t>(net.hidden);
    const auto width = static_cast<std::size_t>(net.width());
    if (dx_out) dx_out->assign(cache.m * d, 0.0);
    std::vector<double> dh2(hid), dh1(hid);
    for (std::size_t i = 0; i < cache.m; ++i) {
        const double* dzi = dz.data() + i * width;
        const double* h2 = cache.h2.data() + i * hid;
        const double* h1 = cache.h1.data() + i * hid;
        const double* a2 = cache.a2.data() + i * hid;
        const double* a1 = cache.a1.data() + i * hid;
        const double* xi = cache.x.data() + i * d;

        std::fill(dh2.begin(), dh2.end(), 0.0);
        for (std::size_t c = 0; c < width; ++c) {
            const double g = dzi[c];
            if (g == 0.0) continue;
            net.l3.gb[c] += g;
            double* gw = net.l3.gw.data() + c * hid;
            const double* w = net.l3.w.data() + c * hid;
            for (std::size_t j = 0; j < hid; ++j) {
                gw[j] += g * h2[j];
                dh2[j] += g * w[j];
            }
        }
        std::fill(dh1.begin(), dh1.end(), 0.0);
        for (std::size_t k = 0; k < hid; ++k) {
            double g = dh2[k];
            if (cache.masks) g *= cache.masks->h2[i * hid + k] ? cache.keep_scale : 0.0;
            if (a2[k] <= 0.0) g = 0.0;
            if (g == 0.0) continue;
            net.l2.gb[k] += g;
            double* gw = net.l2.gw.data() + k * hid;
            const double* w = net.l2.w.data() + k * hid;
            for (std::size_t j = 0; j < hid; ++j) {
                gw[j] += g * h1[j];
                dh1[j] += g * w[j];
            }
        }
        double* dxi = dx_out ? dx_out->data() + i * d : nullptr;
        for (std::size_t k = 0; k < hid; ++k) {
            double g = dh1[k];
            if (cache.masks) g *= cache.masks->h1[i * hid + k] ? cache.keep_scale : 0.0;
            if (a1[k] <= 0.0) g = 0.0;
            if (g == 0.0) continue;
            net.l1.gb[k] += g;
            double* gw = net.l1.gw.data() + k * d;
            const double* w = net.l1.w.data() + k * d;
            for (std::size_t j = 0; j < d; ++j) {
                gw[j] += g * xi[j];
                if (dxi) dxi[j] += g * w[j];
            }
        }
    }
}

struct ForwardOutput {
    std::size_t m = 0;
    std::vector<double> logits;  // m x (S+1)
    std::vector<double> sigmas;  // m, from the attached head
};

inline ForwardOutput forward(const ToyNet& net, std::span<const float> features, std::size_t m,
                             const DropoutMasks* masks = nullptr) {
    const auto d = static_cast<std::size_t>(net.feature_dim);
    if (features.size() != m * d) throw std::invalid_argument("forward: feature width mismatch");
    std::vector<double> x(features.begin(), features.end());
    NetCache cache;
    net_forward(net, x, m, cache, masks);
    HeadCache head_cache;
    head_forward(net.head, x, m, head_cache);
    return {m, std::move(cache.z), std::move(head_cache.sigma)};
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

inline constexpr double kOnlineAuWeight = 4.0;
inline constexpr double kOnlineRuWeight = 6.0;
inline constexpr double kDulKlWeight = 0.01;

struct OnlineLossWeights {
    double au = 0.0;
    double ru = 0.0;
};

inline OnlineLossWeights default_loss_weights(TrainMode mode) {
    if (mode == TrainMode::Hau) return {1.0, 0.0};
    if (mode == TrainMode::ReliOcc) return {kOnlineAuWeight, kOnlineRuWeight};
    return {0.0, 0.0};
}

struct MiniBatch {
    std::size_t m = 0;  // eligible (non-ignored) voxels only
    int feature_dim = 0;
    int num_classes = 0;
    std::vector<double> features;
    std::vector<std::uint16_t> labels;
};

inline MiniBatch gather_minibatch(const VoxelBatch& data, std::span<const std::size_t> indices) {
    MiniBatch mb;
    mb.feature_dim = data.feature_dim;
    mb.num_classes = data.num_classes;
    if (!data.has_features()) throw std::invalid_argument("gather_minibatch: batch has no features");
    for (std::size_t idx : indices) {
        if (data.labels[idx] == kIgnoreLabel) continue;
        const auto row = data.feature_row(idx);
        mb.features.insert(mb.features.end(), row.begin(), row.end());
        mb.labels.push_back(data.labels[idx]);
        ++mb.m;
    }
    return mb;
}

struct StepRandomness {
    std::vector<double> au_noise;   // m x (S+1)
    std::vector<std::size_t> perm;  // pairing permutation of 0..m-1
    DropoutMasks masks;
    std::vector<double> dul_noise;  // m x d
};

inline StepRandomness draw_step_randomness(TrainMode mode, const MiniBatch& mb, const ToyNet& net,
                                           std::mt19937_64& rng) {
    StepRandomness r;
    if (mode == TrainMode::Hau || mode == TrainMode::ReliOcc) {
        r.au_noise.resize(mb.m * static_cast<std::size_t>(net.width()));
        fill_gaussian(r.au_noise, rng);
    }
    if (mode == TrainMode::ReliOcc) r.perm = shuffled_permutation(mb.m, rng);
    if (mode == TrainMode::Mcd) r.masks = draw_dropout_masks(mb.m, net.hidden, net.dropout_p, rng);
    if (mode == TrainMode::Dul) {
        r.dul_noise.resize(mb.m * static_cast<std::size_t>(net.feature_dim));
        fill_gaussian(r.dul_noise, rng);
    }
    return r;
}

struct StepLosses {
    double occ = 0.0, au = 0.0, ru = 0.0, kl = 0.0, total = 0.0;
};

// Evaluates the mode's full objective on a minibatch with fixed randomness,
// optionally accumulating gradients into the network. Kept separate from the
// optimizer update so finite-difference checks can re-evaluate it.
inline StepLosses compute_step(ToyNet& net, const MiniBatch& mb, TrainMode mode,
                               const StepRandomness& rnd, bool with_grad,
                               const OnlineLossWeights& weights) {
    if (mb.m < 2) throw std::invalid_argument("train_step: fewer than 2 non-ignored voxels");
    const std::size_t m = mb.m;
    const auto width = static_cast<std::size_t>(net.width());
    const auto d = static_cast<std::size_t>(net.feature_dim);
    const double inv_m = 1.0 / static_cast<double>(m);
    StepLosses losses;
    std::vector<double> p(width), zhat(width);

    if (mode == TrainMode::Dul) {
        // sigma per feature dimension, then the weighted CE runs on the
        // noised features; KL keeps the Gaussians near the standard normal.
        std::vector<double> a(m * d), sigma(m * d), vhat(m * d);
        for (std::size_t i = 0; i < m; ++i) {
            const double* x = mb.features.data() + i * d;
            for (std::size_t k = 0; k < d; ++k) {
                double s = net.dul.b[k];
                const double* w = net.dul.w.data() + k * d;
                for (std::size_t j = 0; j < d; ++j) s += w[j] * x[j];
                a[i * d + k] = s;
                sigma[i * d + k] = net.dul.sigma_floor + softplus(s);
            }
            const double kl = dul_transform(
                std::span<const double>(x, d), std::span<const double>(sigma.data() + i * d, d),
                std::span<const double>(rnd.dul_noise.data() + i * d, d),
                std::span<double>(vhat.data() + i * d, d));
            losses.kl += kl;
        }
        losses.kl *= kDulKlWeight * inv_m;
        NetCache cache;
        net_forward(net, vhat, m, cache);
        std::vector<double> dz(m * width, 0.0);
        for (std::size_t i = 0; i < m; ++i) {
            const auto y = static_cast<std::size_t>(mb.labels[i]);
            const double wy = net.class_weights[y];
            std::span<const double> z{cache.z.data() + i * width, width};
            losses.occ += wy * cross_entropy(z, static_cast<int>(y));
            if (with_grad) {
                softmax(z, p);
                for (std::size_t c = 0; c < width; ++c)
                    dz[i * width + c] = wy * inv_m * (p[c] - (c == y ? 1.0 : 0.0));
            }
        }
        losses.occ *= inv_m;
        if (with_grad) {
            std::vector<double> dx;
            net_backward(net, cache, dz, &dx);
            for (std::size_t i = 0; i < m; ++i) {
                const double* x = mb.features.data() + i * d;
                for (std::size_t k = 0; k < d; ++k) {
                    const double s = sigma[i * d + k];
                    double ds = dx[i * d + k] * rnd.dul_noise[i * d + k];
                    ds += kDulKlWeight * inv_m * (s - 1.0 / s);
                    const double ga = ds * sigmoid(a[i * d + k]);
                    net.dul.gb[k] += ga;
                    double* gw = net.dul.gw.data() + k * d;
                    for (std::size_t j = 0; j < d; ++j) gw[j] += ga * x[j];
                }
            }
        }
        losses.total = losses.occ + losses.kl;
        return losses;
    }

    const DropoutMasks* masks = (mode == TrainMode::Mcd) ? &rnd.masks : nullptr;
    NetCache cache;
    net_forward(net, mb.features, m, cache, masks);
    std::vector<double> dz(m * width, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        const auto y = static_cast<std::size_t>(mb.labels[i]);
        const double wy = net.class_weights[y];
        std::span<const double> z{cache.z.data() + i * width, width};
        losses.occ += wy * cross_entropy(z, static_cast<int>(y));
        if (with_grad) {
            softmax(z, p);
            for (std::size_t c = 0; c < width; ++c)
                dz[i * width + c] = wy * inv_m * (p[c] - (c == y ? 1.0 : 0.0));
        }
    }
    losses.occ *= inv_m;

    const bool uses_head = mode == TrainMode::Hau || mode == TrainMode::ReliOcc;
    HeadCache head_cache;
    std::vector<double> dsigma;
    if (uses_head) {
        head_forward(net.head, mb.features, m, head_cache);
        dsigma.assign(m, 0.0);

        for (std::size_t i = 0; i < m; ++i) {
            const double sigma = head_cache.sigma[i];
            std::span<const double> z{cache.z.data() + i * width, width};
            sample_absolute(z, sigma, {rnd.au_noise.data() + i * width, width}, zhat);
            const auto y = static_cast<std::size_t>(mb.labels[i]);
            losses.au += cross_entropy(zhat, static_cast<int>(y));
            if (with_grad && weights.au != 0.0) {
                softmax(zhat, p);
                double ds = 0.0;
                for (std::size_t c = 0; c < width; ++c) {
                    const double g = weights.au * inv_m * (p[c] - (c == y ? 1.0 : 0.0));
                    dz[i * width + c] += g;
                    ds += g * rnd.au_noise[i * width + c];
                }
                dsigma[i] += ds;
            }
        }
        losses.au *= inv_m;
    }

    if (mode == TrainMode::ReliOcc) {
        // Mixed features pass through the shared network; gradients reach
        // the sigma head through the mixing weight lambda.
        std::vector<double> vhat(m * d);
        std::vector<double> lambdas(m);
        for (std::size_t k = 0; k < m; ++k) {
            const std::size_t jdx = rnd.perm[k];
            const double lambda = mix_lambda(head_cache.sigma[k], head_cache.sigma[jdx]);
            lambdas[k] = lambda;
            const double* vi = mb.features.data() + k * d;
            const double* vj = mb.features.data() + jdx * d;
            for (std::size_t c = 0; c < d; ++c)
                vhat[k * d + c] = lambda * vi[c] + (1.0 - lambda) * vj[c];
        }
        NetCache mix_cache;
        net_forward(net, vhat, m, mix_cache);
        std::vector<double> dzmix(m * width, 0.0);
        for (std::size_t k = 0; k < m; ++k) {
            const std::size_t jdx = rnd.perm[k];
            const auto yi = static_cast<std::size_t>(mb.labels[k]);
            const auto yj = static_cast<std::size_t>(mb.labels[jdx]);
            std::span<const double> z{mix_cache.z.data() + k * width, width};
            const double lse = log_sum_exp(z);
            losses.ru += (lse - z[yi]) + (lse - z[yj]);
            if (with_grad && weights.ru != 0.0) {
                softmax(z, p);
                for (std::size_t c = 0; c < width; ++c) {
                    const double t = (c == yi ? 1.0 : 0.0) + (c == yj ? 1.0 : 0.0);
                    dzmix[k * width + c] = weights.ru * inv_m * (2.0 * p[c] - t);
                }
            }
        }
        losses.ru *= inv_m;
        if (with_grad && weights.ru != 0.0) {
            std::vector<double> dvhat;
            net_backward(net, mix_cache, dzmix, &dvhat);
            for (std::size_t k = 0; k < m; ++k) {
                const std::size_t jdx = rnd.perm[k];
                const double* vi = mb.features.data() + k * d;
                const double* vj = mb.features.data() + jdx * d;
                double dlambda = 0.0;
                for (std::size_t c = 0; c < d; ++c)
                    dlambda += dvhat[k * d + c] * (vi[c] - vj[c]);
                const double si = head_cache.sigma[k];
                const double sj = head_cache.sigma[jdx];
                const double denom = (si + sj) * (si + sj);
                dsigma[k] += dlambda * sj / denom;
                dsigma[jdx] -= dlambda * si / denom;
            }
        }
    }

    if (with_grad) {
        if (uses_head) head_backward(net.head, mb.features, head_cache, dsigma);
        net_backward(net, cache, dz);
    }
    losses.total = losses.occ + weights.au * losses.au + weights.ru * losses.ru;
    return losses;
}

// Draws the step's randomness, computes the objective with gradients and
// applies one optimizer update. Loss terms are returned unweighted.
inline StepLosses train_step(ToyNet& net, const MiniBatch& mb, TrainMode mode,
                             std::mt19937_64& rng, const OnlineLossWeights* weights = nullptr) {
    const OnlineLossWeights w = weights ? *weights : default_loss_weights(mode);
    const StepRandomness rnd = draw_step_randomness(mode, mb, net, rng);
    const std::vector<ParamRef> params = net.trainable_params(mode);
    zero_grads(params);
    const StepLosses losses = compute_step(net, mb, mode, rnd, true, w);
    if (!std::isfinite(losses.total))
        throw std::runtime_error("train_step: non-finite loss");
    net.opt.step(params);
    return losses;
}

inline std::vector<double> inverse_frequency_weights(const VoxelBatch& split, int num_classes) {
    const auto width = static_cast<std::size_t>(num_classes) + 1;
    std::vector<std::size_t> freq(width, 0);
    std::size_t total = 0;
    for (std::uint16_t y : split.labels) {
        if (y == kIgnoreLabel) continue;
        ++freq[y];
        ++total;
    }
    std::vector<double> w(width, 0.0);
    double sum = 0.0;
    std::size_t present = 0;
    for (std::size_t c = 0; c < width; ++c) {
        if (freq[c] == 0) continue;
        w[c] = static_cast<double>(total) / static_cast<double>(freq[c]);
        sum += w[c];
        ++present;
    }
    if (present == 0) throw std::invalid_argument("inverse_frequency_weights: no labeled voxels");
    const double mean = sum / static_cast<double>(present);
    for (std::size_t c = 0; c < width; ++c) w[c] = freq[c] ? w[c] / mean : 1.0;
    return w;
}

struct TrainOptions {
    int batch_size = 512;
};

// One row per epoch: mean loss terms across the epoch's steps.
struct EpochLosses {
    double occ = 0.0, au = 0.0, ru = 0.0, kl = 0.0, total = 0.0;
};

inline std::vector<EpochLosses> train(ToyNet& net, const VoxelBatch& train_split, int epochs,
                                      TrainMode mode, std::uint64_t seed,
                                      const TrainOptions& opts = {}) {
    train_split.validate();
    net.class_weights = inverse_frequency_weights(train_split, net.num_classes);
    std::vector<std::size_t> indices(train_split.n);
    for (std::size_t i = 0; i < indices.size(); ++i) indices[i] = i;

    std::vector<EpochLosses> curve;
    for (int e = 0; e < epochs; ++e) {
        std::mt19937_64 shuffle_rng = make_rng(derive_seed(seed, 0x73687566, static_cast<std::uint64_t>(e)));
        std::shuffle(indices.begin(), indices.end(), shuffle_rng);
        EpochLosses epoch;
        std::size_t steps = 0;
        for (std::size_t start = 0; start < indices.size();
             start += static_cast<std::size_t>(opts.batch_size)) {
            const std::size_t stop =
                std::min(indices.size(), start + static_cast<std::size_t>(opts.batch_size));
            const MiniBatch mb = gather_minibatch(
                train_split, std::span<const std::size_t>(indices.data() + start, stop - start));
            if (mb.m < 2) continue;
            std::mt19937_64 step_rng = make_rng(
                derive_seed(seed, 0x6E6F6973 + static_cast<std::uint64_t>(e) * 1000003ull,
                            static_cast<std::uint64_t>(steps)));
            StepLosses losses;
            try {
                losses = train_step(net, mb, mode, step_rng);
            } catch (const std::runtime_error& err) {
                throw std::runtime_error(std::string(err.what()) + " (epoch " +
                                         std::to_string(e) + ", step " + std::to_string(steps) + ")");
            }
            epoch.occ += losses.occ;
            epoch.au += losses.au;
            epoch.ru += losses.ru;
            epoch.kl += losses.kl;
            epoch.total += losses.total;
            ++steps;
        }
        if (steps == 0) throw std::runtime_error("train: no usable minibatches");
        const double inv = 1.0 / static_cast<double>(steps);
        epoch.occ *= inv;
        epoch.au *= inv;
        epoch.ru *= inv;
        epoch.kl *= inv;
        epoch.total *= inv;
        curve.push_back(epoch);
    }
    return curve;
}

// ---------------------------------------------------------------------------
// Inference dumps and perturbations
// ---------------------------------------------------------------------------

// Deterministic forward over the whole batch; uncertainty learning never
// alters the inference graph. Dropout mode runs `mcd_samples` stochastic
// passes with a seeded mask stream and stores the mean logits plus the
// normalized-entropy uncertainty.
inline VoxelBatch predict_dump(const ToyNet& net, const VoxelBatch& input, TrainMode mode,
                               std::uint64_t seed = 0, int mcd_samples = 40) {
    input.validate();
    if (!input.has_features()) throw std::invalid_argument("predict_dump: batch has no features");
    if (input.feature_dim != net.feature_dim || input.num_classes != net.num_classes)
        throw std::invalid_argument("predict_dump: batch does not match network");
    const auto width = static_cast<std::size_t>(net.width());
    const auto d = static_cast<std::size_t>(net.feature_dim);

    VoxelBatch out;
    out.n = input.n;
    out.num_classes = input.num_classes;
    out.feature_dim = input.feature_dim;
    out.labels = input.labels;
    out.features = input.features;
    out.depths = input.depths;
    out.logits.resize(input.n * width);
    const bool head_sigma_out = mode == TrainMode::Hau || mode == TrainMode::ReliOcc;
    if (head_sigma_out || mode == TrainMode::Mcd) out.sigmas.resize(input.n);

    const std::size_t chunk = 16384;
    std::mt19937_64 mask_rng = make_rng(derive_seed(seed, 0x6D6173 /* mask stream */));
    std::vector<double> x;
    for (std::size_t start = 0; start < input.n; start += chunk) {
        const std::size_t m = std::min(chunk, input.n - start);
        x.assign(input.features.begin() + static_cast<std::ptrdiff_t>(start * d),
                 input.features.begin() + static_cast<std::ptrdiff_t>((start + m) * d));
        if (mode == TrainMode::Mcd) {
            if (mcd_samples < 1) throw std::invalid_argument("predict_dump: mcd_samples < 1");
            std::vector<std::vector<std::vector<double>>> per_voxel(
                m, std::vector<std::vector<double>>());
            NetCache cache;
            for (int k = 0; k < mcd_samples; ++k) {
                const DropoutMasks masks = draw_dropout_masks(m, net.hidden, net.dropout_p, mask_rng);
                net_forward(net, x, m, cache, &masks);
                for (std::size_t i = 0; i < m; ++i)
                    per_voxel[i].emplace_back(cache.z.begin() + static_cast<std::ptrdiff_t>(i * width),
                                              cache.z.begin() + static_cast<std::ptrdiff_t>((i + 1) * width));
            }
            for (std::size_t i = 0; i < m; ++i) {
                const McdAggregate agg = mcd_aggregate(per_voxel[i]);
                for (std::size_t c = 0; c < width; ++c)
                    out.logits[(start + i) * width + c] = static_cast<float>(agg.mean_logits[c]);
                out.sigmas[start + i] = static_cast<float>(std::max(agg.uncertainty, 1e-12));
            }
        } else {
            NetCache cache;
            net_forward(net, x, m, cache);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t c = 0; c < width; ++c)
                    out.logits[(start + i) * width + c] = static_cast<float>(cache.z[i * width + c]);
            if (head_sigma_out) {
                HeadCache head_cache;
                head_forward(net.head, x, m, head_cache);
                for (std::size_t i = 0; i < m; ++i)
                    out.sigmas[start + i] = static_cast<float>(head_cache.sigma[i]);
            }
        }
    }
    out.validate();
    return out;
}

enum class PerturbKind { FeatureNoise, LogitNoise, BlockDrop };

inline const char* perturb_kind_name(PerturbKind k) {
    switch (k) {
        case PerturbKind::FeatureNoise: return "feature_noise";
        case PerturbKind::LogitNoise: return "logit_noise";
        case PerturbKind::BlockDrop: return "block_drop";
    }
    return "?";
}

inline PerturbKind perturb_kind_from_name(const std::string& name) {
    if (name == "feature_noise") return PerturbKind::FeatureNoise;
    if (name == "logit_noise") return PerturbKind::LogitNoise;
    if (name == "block_drop") return PerturbKind::BlockDrop;
    throw std::invalid_argument("unknown perturbation kind: " + name);
}

// Out-of-domain perturbation harness. feature_noise/logit_noise add seeded
// Gaussian noise of the given std; block_drop zeroes features in contiguous
// index blocks covering round(magnitude * n) voxels. Labels are untouched.
inline VoxelBatch perturb(const VoxelBatch& batch, PerturbKind kind, double magnitude,
                          std::uint64_t seed) {
    if (magnitude < 0.0) throw std::invalid_argument("perturb: negative magnitude");
    VoxelBatch out = batch;
    if (magnitude == 0.0) return out;
    std::mt19937_64 rng = make_rng(derive_seed(seed, 0x70657274, static_cast<std::uint64_t>(kind)));
    switch (kind) {
        case PerturbKind::FeatureNoise: {
            if (!batch.has_features()) throw std::invalid_argument("perturb: batch has no features");
            std::normal_distribution<double> gauss(0.0, magnitude);
            for (float& f : out.features) f = static_cast<float>(f + gauss(rng));
            break;
        }
        case PerturbKind::LogitNoise: {
            std::normal_distribution<double> gauss(0.0, magnitude);
            for (float& z : out.logits) z = static_cast<float>(z + gauss(rng));
            break;
        }
        case PerturbKind::BlockDrop: {
            if (!batch.has_features()) throw std::invalid_argument("perturb: batch has no features");
            if (magnitude > 1.0) throw std::invalid_argument("perturb: block_drop fraction > 1");
            const std::size_t target =
                static_cast<std::size_t>(std::llround(magnitude * static_cast<double>(batch.n)));
            const std::size_t tile = 256;
            const std::size_t n_tiles = (batch.n + tile - 1) / tile;
            std::vector<std::size_t> order = shuffled_permutation(n_tiles, rng);
            const auto d = static_cast<std::size_t>(batch.feature_dim);
            std::size_t dropped = 0;
            for (std::size_t t : order) {
                if (dropped >= target) break;
                const std::size_t lo = t * tile;
                const std::size_t hi = std::min(batch.n, lo + tile);
                for (std::size_t i = lo; i < hi && dropped < target; ++i, ++dropped)
                    for (std::size_t k = 0; k < d; ++k) out.features[i * d + k] = 0.0f;
            }
            break;
        }
    }
    return out;
}

}  // namespace reliocc
