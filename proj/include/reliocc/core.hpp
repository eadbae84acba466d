// Core domain types for voxel occupancy prediction: per-voxel label/logit
// batches, softmax prediction, and the binary (occupied / empty) view derived
// from the semantic probabilities.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace reliocc {

// Voxels carrying this label are excluded from every loss and metric.
inline constexpr std::uint16_t kIgnoreLabel = 0xFFFF;

// Per-voxel predictions and ground truth for N voxels over S+1 classes
// (class 0 means "empty"). Optional arrays are empty when absent.
struct VoxelBatch {
    std::size_t n = 0;
    int num_classes = 0;  // S; the logit vector has width S+1
    int feature_dim = 0;  // 0 when features are absent

    std::vector<std::uint16_t> labels;  // n, values in {0..S} or kIgnoreLabel
    std::vector<float> logits;          // n x (S+1), row-major
    std::vector<float> features;        // n x feature_dim, optional
    std::vector<float> sigmas;          // n, optional, all > 0
    std::vector<float> depths;          // n, optional, all >= 0

    int logit_width() const { return num_classes + 1; }
    bool has_features() const { return !features.empty(); }
    bool has_sigmas() const { return !sigmas.empty(); }
    bool has_depths() const { return !depths.empty(); }

    std::span<const float> logit_row(std::size_t i) const {
        return {logits.data() + i * static_cast<std::size_t>(logit_width()),
                static_cast<std::size_t>(logit_width())};
    }
    std::span<const float> feature_row(std::size_t i) const {
        return {features.data() + i * static_cast<std::size_t>(feature_dim),
                static_cast<std::size_t>(feature_dim)};
    }

    // Throws std::invalid_argument on any structural or value invariant
    // violation. Cheap enough to run before serialization and after reads.
    void validate() const {
        const std::size_t width = static_cast<std::size_t>(logit_width());
        if (num_classes < 1)
            throw std::invalid_argument("VoxelBatch: num_classes must be >= 1");
        if (labels.size() != n)
            throw std::invalid_argument("VoxelBatch: labels size mismatch");
        if (logits.size() != n * width)
            throw std::invalid_argument("VoxelBatch: logits size mismatch");
        if (!features.empty() && (feature_dim <= 0 ||
                                  features.size() != n * static_cast<std::size_t>(feature_dim)))
            throw std::invalid_argument("VoxelBatch: features size mismatch");
        if (features.empty() && feature_dim != 0)
            throw std::invalid_argument("VoxelBatch: feature_dim nonzero but features absent");
        if (!sigmas.empty() && sigmas.size() != n)
            throw std::invalid_argument("VoxelBatch: sigmas size mismatch");
        if (!depths.empty() && depths.size() != n)
            throw std::invalid_argument("VoxelBatch: depths size mismatch");
        for (std::size_t i = 0; i < n; ++i) {
            if (labels[i] != kIgnoreLabel && labels[i] >= width)
                throw std::invalid_argument("VoxelBatch: label out of range at voxel " +
                                            std::to_string(i));
        }
        for (float z : logits)
            if (!std::isfinite(z))
                throw std::invalid_argument("VoxelBatch: non-finite logit");
        for (float f : features)
            if (!std::isfinite(f))
                throw std::invalid_argument("VoxelBatch: non-finite feature");
        for (float s : sigmas)
            if (!(s > 0.0f) || !std::isfinite(s))
                throw std::invalid_argument("VoxelBatch: sigma must be positive and finite");
        for (float d : depths)
            if (d < 0.0f || !std::isfinite(d))
                throw std::invalid_argument("VoxelBatch: depth must be nonnegative and finite");
    }
};

// Softmax outputs plus the derived hard prediction per voxel. `confidence`
// is probs[pred_label] for raw predictions; calibrators overwrite it with
// the calibrated probability of the raw-argmax class.
struct ProbBatch {
    std::size_t n = 0;
    int num_classes = 0;
    std::vector<double> probs;               // n x (S+1)
    std::vector<std::uint16_t> pred_label;   // n, argmax of raw logits
    std::vector<double> confidence;          // n

    int width() const { return num_classes + 1; }
    std::span<const double> prob_row(std::size_t i) const {
        return {probs.data() + i * static_cast<std::size_t>(width()),
                static_cast<std::size_t>(width())};
    }
};

// Lowest index wins ties so predictions are deterministic.
inline int argmax_low(std::span<const double> v) {
    int best = 0;
    for (int c = 1; c < static_cast<int>(v.size()); ++c)
        if (v[c] > v[best]) best = c;
    return best;
}

// Numerically stable softmax (max subtraction). Rejects non-finite input.
inline void softmax(std::span<const double> z, std::span<double> out) {
    if (z.empty()) throw std::invalid_argument("softmax: empty input");
    double zmax = z[0];
    for (double v : z) {
        if (!std::isfinite(v)) throw std::invalid_argument("softmax: non-finite logit");
        zmax = std::max(zmax, v);
    }
    double sum = 0.0;
    for (std::size_t c = 0; c < z.size(); ++c) {
        out[c] = std::exp(z[c] - zmax);
        sum += out[c];
    }
    for (std::size_t c = 0; c < z.size(); ++c) out[c] /= sum;
}

inline std::vector<double> softmax(std::span<const double> z) {
    std::vector<double> out(z.size());
    softmax(z, out);
    return out;
}

// log(sum(exp(z))) with max subtraction.
inline double log_sum_exp(std::span<const double> z) {
    double zmax = z[0];
    for (double v : z) zmax = std::max(zmax, v);
    double sum = 0.0;
    for (double v : z) sum += std::exp(v - zmax);
    return zmax + std::log(sum);
}

// -log softmax(logits)[label], computed without materializing the softmax.
inline double cross_entropy(std::span<const double> logits, int label) {
    return log_sum_exp(logits) - logits[static_cast<std::size_t>(label)];
}

inline ProbBatch predict(const VoxelBatch& batch) {
    const int width = batch.logit_width();
    ProbBatch out;
    out.n = batch.n;
    out.num_classes = batch.num_classes;
    out.probs.resize(batch.n * static_cast<std::size_t>(width));
    out.pred_label.resize(batch.n);
    out.confidence.resize(batch.n);
    std::vector<double> z(static_cast<std::size_t>(width));
    for (std::size_t i = 0; i < batch.n; ++i) {
        auto row = batch.logit_row(i);
        for (int c = 0; c < width; ++c) z[static_cast<std::size_t>(c)] = row[c];
        std::span<double> p{out.probs.data() + i * static_cast<std::size_t>(width),
                            static_cast<std::size_t>(width)};
        softmax(z, p);
        const int pred = argmax_low(p);
        out.pred_label[i] = static_cast<std::uint16_t>(pred);
        out.confidence[i] = p[static_cast<std::size_t>(pred)];
    }
    return out;
}

// Binary occupied/empty view of a semantic prediction. The confidence is the
// max of the induced two-way distribution: p_empty for predicted-empty
// voxels, 1 - p_empty otherwise.
struct GeometricView {
    std::vector<std::uint8_t> pred_occupied;  // n
    std::vector<double> confidence;           // n
};

inline GeometricView geometric_view(const ProbBatch& p) {
    GeometricView out;
    out.pred_occupied.resize(p.n);
    out.confidence.resize(p.n);
    for (std::size_t i = 0; i < p.n; ++i) {
        const double p_empty = p.prob_row(i)[0];
        const bool occupied = p.pred_label[i] != 0;
        out.pred_occupied[i] = occupied ? 1 : 0;
        out.confidence[i] = occupied ? 1.0 - p_empty : p_empty;
    }
    return out;
}

}  // namespace reliocc
