// Accuracy (IoU, mIoU) and reliability (ECE, PRR, rejection curves,
// reliability diagrams) metrics over geometric and semantic views of a voxel
// batch.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "reliocc/core.hpp"

namespace reliocc {

// ---------------------------------------------------------------------------
// Calibration binning
// ---------------------------------------------------------------------------

struct BinStats {
    int bin_index = 0;
    std::size_t count = 0;
    double mean_conf = 0.0;
    double mean_acc = 0.0;
};

// Equal-width bins over [0,1], right-open except the last, which is closed.
// floor(c*M) can land one bin off when c sits on a bin edge that is not
// exactly representable, so the result is corrected against the defining
// comparisons.
inline int confidence_bin(double c, int num_bins) {
    int b = static_cast<int>(std::floor(c * num_bins));
    if (b < 0) b = 0;
    if (b >= num_bins) b = num_bins - 1;
    while (b > 0 && c < static_cast<double>(b) / num_bins) --b;
    while (b < num_bins - 1 && c >= static_cast<double>(b + 1) / num_bins) ++b;
    return b;
}

inline std::vector<BinStats> reliability_diagram(std::span<const double> confidences,
                                                 std::span<const std::uint8_t> correct,
                                                 int num_bins) {
    if (confidences.empty()) throw std::invalid_argument("reliability_diagram: no samples");
    if (correct.size() != confidences.size())
        throw std::invalid_argument("reliability_diagram: size mismatch");
    if (num_bins < 1) throw std::invalid_argument("reliability_diagram: num_bins must be >= 1");

    std::vector<std::size_t> count(static_cast<std::size_t>(num_bins), 0);
    std::vector<double> conf_sum(static_cast<std::size_t>(num_bins), 0.0);
    std::vector<double> acc_sum(static_cast<std::size_t>(num_bins), 0.0);
    for (std::size_t i = 0; i < confidences.size(); ++i) {
        const double c = confidences[i];
        if (!(c >= 0.0 && c <= 1.0))
            throw std::invalid_argument("reliability_diagram: confidence outside [0,1]");
        const auto b = static_cast<std::size_t>(confidence_bin(c, num_bins));
        ++count[b];
        conf_sum[b] += c;
        acc_sum[b] += correct[i] ? 1.0 : 0.0;
    }
    std::vector<BinStats> bins(static_cast<std::size_t>(num_bins));
    for (int b = 0; b < num_bins; ++b) {
        auto& s = bins[static_cast<std::size_t>(b)];
        s.bin_index = b;
        s.count = count[static_cast<std::size_t>(b)];
        if (s.count > 0) {
            s.mean_conf = conf_sum[static_cast<std::size_t>(b)] / static_cast<double>(s.count);
            s.mean_acc = acc_sum[static_cast<std::size_t>(b)] / static_cast<double>(s.count);
        }
    }
    return bins;
}

inline double ece_from_bins(std::span<const BinStats> bins, std::size_t n) {
    if (n == 0) throw std::invalid_argument("ece: no samples");
    double e = 0.0;
    for (const auto& b : bins) {
        if (b.count == 0) continue;
        e += (static_cast<double>(b.count) / static_cast<double>(n)) *
             std::abs(b.mean_acc - b.mean_conf);
    }
    return e;
}

inline double ece(std::span<const double> confidences, std::span<const std::uint8_t> correct,
                  int num_bins) {
    const auto bins = reliability_diagram(confidences, correct, num_bins);
    return ece_from_bins(bins, confidences.size());
}

// ---------------------------------------------------------------------------
// Misclassification detection
// ---------------------------------------------------------------------------

struct RejectionPoint {
    double rejection_rate = 0.0;
    double normalized_error = 0.0;
};

struct RejectionCurve {
    std::vector<RejectionPoint> points;
    double auc = 0.0;
};

// Rejection curve over samples sorted by uncertainty, most uncertain first.
// Samples with equal uncertainty are rejected as one block; the curve is
// evaluated at block boundaries with linear interpolation between them. The
// error axis is normalized by the base error so the curve starts at 1 and a
// random ranking integrates to 0.5.
inline RejectionCurve rejection_curve(std::span<const double> uncertainties,
                                      std::span<const std::uint8_t> correct) {
    const std::size_t n = uncertainties.size();
    if (n == 0) throw std::invalid_argument("rejection_curve: no samples");
    if (correct.size() != n) throw std::invalid_argument("rejection_curve: size mismatch");

    std::size_t total_errors = 0;
    for (std::size_t i = 0; i < n; ++i)
        if (!correct[i]) ++total_errors;
    if (total_errors == 0)
        throw std::domain_error("PRR undefined: zero base error");

    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return uncertainties[a] > uncertainties[b];
    });

    RejectionCurve curve;
    curve.points.push_back({0.0, 1.0});
    std::size_t rejected = 0;
    std::size_t errors_rejected = 0;
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j < n && uncertainties[order[j]] == uncertainties[order[i]]) {
            if (!correct[order[j]]) ++errors_rejected;
            ++j;
        }
        rejected += j - i;
        curve.points.push_back(
            {static_cast<double>(rejected) / static_cast<double>(n),
             static_cast<double>(total_errors - errors_rejected) / static_cast<double>(total_errors)});
        i = j;
    }
    double auc = 0.0;
    for (std::size_t k = 1; k < curve.points.size(); ++k) {
        const auto& a = curve.points[k - 1];
        const auto& b = curve.points[k];
        auc += (b.rejection_rate - a.rejection_rate) * (a.normalized_error + b.normalized_error) * 0.5;
    }
    curve.auc = auc;
    return curve;
}

// (AUC_random - AUC_uncertainty) / (AUC_random - AUC_oracle), with
// AUC_random = 0.5 on the normalized error axis and AUC_oracle taken from
// the curve that rejects every error first.
inline double prr(std::span<const double> uncertainties, std::span<const std::uint8_t> correct) {
    const std::size_t n = uncertainties.size();
    if (n == 0) throw std::invalid_argument("prr: no samples");
    std::size_t errors = 0;
    for (std::size_t i = 0; i < n; ++i)
        if (!correct[i]) ++errors;
    if (errors == 0) throw std::domain_error("PRR undefined: zero base error");
    if (errors == n) throw std::domain_error("PRR undefined: all samples incorrect");

    const RejectionCurve curve = rejection_curve(uncertainties, correct);
    std::vector<double> oracle(n);
    for (std::size_t i = 0; i < n; ++i) oracle[i] = correct[i] ? 0.0 : 1.0;
    const RejectionCurve oracle_curve = rejection_curve(oracle, correct);
    return (0.5 - curve.auc) / (0.5 - oracle_curve.auc);
}

// ---------------------------------------------------------------------------
// Accuracy
// ---------------------------------------------------------------------------

inline double iou_binary(std::span<const std::uint8_t> pred_occupied,
                         std::span<const std::uint8_t> gt_occupied,
                         std::span<const std::uint8_t> mask) {
    const std::size_t n = pred_occupied.size();
    if (gt_occupied.size() != n || mask.size() != n)
        throw std::invalid_argument("iou_binary: size mismatch");
    std::size_t tp = 0, fp = 0, fn = 0, seen = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (!mask[i]) continue;
        ++seen;
        const bool p = pred_occupied[i] != 0;
        const bool g = gt_occupied[i] != 0;
        if (p && g) ++tp;
        else if (p && !g) ++fp;
        else if (!p && g) ++fn;
    }
    if (seen == 0) throw std::domain_error("iou_binary: empty evaluation set");
    const std::size_t denom = tp + fp + fn;
    if (denom == 0) throw std::domain_error("iou_binary: no occupied voxels in prediction or truth");
    return static_cast<double>(tp) / static_cast<double>(denom);
}

struct SemanticIoU {
    std::vector<double> per_class;  // classes 1..S; NaN when absent from pred and gt
    double miou = 0.0;
};

// Per-class IoU over classes 1..S (class 0 excluded). Classes absent from
// both prediction and ground truth are excluded from the mean.
inline SemanticIoU miou_semantic(std::span<const std::uint16_t> pred_labels,
                                 std::span<const std::uint16_t> gt_labels, int num_classes,
                                 std::span<const std::uint8_t> mask) {
    const std::size_t n = pred_labels.size();
    if (gt_labels.size() != n || mask.size() != n)
        throw std::invalid_argument("miou_semantic: size mismatch");
    const int width = num_classes + 1;
    std::vector<std::size_t> tp(static_cast<std::size_t>(width), 0);
    std::vector<std::size_t> fp(static_cast<std::size_t>(width), 0);
    std::vector<std::size_t> fn(static_cast<std::size_t>(width), 0);
    for (std::size_t i = 0; i < n; ++i) {
        if (!mask[i]) continue;
        const int p = pred_labels[i];
        const int g = gt_labels[i];
        if (p >= width || g >= width)
            throw std::invalid_argument("miou_semantic: label out of range");
        if (p == g) ++tp[static_cast<std::size_t>(p)];
        else {
            ++fp[static_cast<std::size_t>(p)];
            ++fn[static_cast<std::size_t>(g)];
        }
    }
    SemanticIoU out;
    out.per_class.assign(static_cast<std::size_t>(num_classes),
                         std::numeric_limits<double>::quiet_NaN());
    double sum = 0.0;
    std::size_t present = 0;
    for (int c = 1; c < width; ++c) {
        const std::size_t denom = tp[static_cast<std::size_t>(c)] + fp[static_cast<std::size_t>(c)] +
                                  fn[static_cast<std::size_t>(c)];
        if (denom == 0) continue;  // absent everywhere
        const double iou = static_cast<double>(tp[static_cast<std::size_t>(c)]) /
                           static_cast<double>(denom);
        out.per_class[static_cast<std::size_t>(c - 1)] = iou;
        sum += iou;
        ++present;
    }
    if (present == 0) throw std::domain_error("miou_semantic: no class present");
    out.miou = sum / static_cast<double>(present);
    return out;
}

// ---------------------------------------------------------------------------
// Combined report
// ---------------------------------------------------------------------------

enum class UncertaintySource {
    OneMinusConfidence,  // u = 1 - confidence of the evaluated view
    ExplicitSigma,       // u = batch sigma (requires sigmas present)
};

struct EvalOptions {
    int num_bins = 15;
    // Restrict the semantic reliability metrics (ECE/PRR/diagram/curve) to
    // ground-truth-occupied voxels. Accuracy metrics are unaffected.
    bool sem_gt_occupied_only = false;
};

struct MetricReport {
    std::size_t n_eval = 0;  // non-ignored voxels
    double iou = 0.0;
    double miou = 0.0;
    std::vector<double> per_class_iou;
    double ece_geo = 0.0;
    double ece_sem = 0.0;
    std::optional<double> prr_geo;  // empty when undefined (zero base error)
    std::optional<double> prr_sem;
    std::vector<BinStats> diagram_geo;
    std::vector<BinStats> diagram_sem;
    std::optional<RejectionCurve> rejection_geo;
    std::optional<RejectionCurve> rejection_sem;
};

// Full evaluation of a (possibly calibrated) prediction against the batch
// labels. Semantic metrics use the (S+1)-way prediction; geometric metrics
// use the occupied/empty view.
inline MetricReport evaluate(const VoxelBatch& batch, const ProbBatch& probs,
                             UncertaintySource source, const EvalOptions& opts = {}) {
    if (probs.n != batch.n || probs.num_classes != batch.num_classes)
        throw std::invalid_argument("evaluate: prediction does not match batch");
    if (source == UncertaintySource::ExplicitSigma && !batch.has_sigmas())
        throw std::invalid_argument("evaluate: explicit sigma requested but batch has no sigmas");

    const std::size_t n = batch.n;
    std::vector<std::uint8_t> mask(n, 0);
    std::size_t n_eval = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (batch.labels[i] != kIgnoreLabel) {
            mask[i] = 1;
            ++n_eval;
        }
    }
    if (n_eval == 0) throw std::domain_error("evaluate: empty evaluation set");

    const GeometricView geo = geometric_view(probs);
    std::vector<std::uint8_t> gt_occupied(n, 0);
    for (std::size_t i = 0; i < n; ++i)
        gt_occupied[i] = (mask[i] && batch.labels[i] != 0) ? 1 : 0;

    MetricReport report;
    report.n_eval = n_eval;
    report.iou = iou_binary(geo.pred_occupied, gt_occupied, mask);
    const SemanticIoU sem_iou = miou_semantic(probs.pred_label, batch.labels, batch.num_classes, mask);
    report.miou = sem_iou.miou;
    report.per_class_iou = sem_iou.per_class;

    // Flatten the masked views into dense sample arrays.
    std::vector<double> conf_sem, conf_geo, u_sem, u_geo;
    std::vector<std::uint8_t> correct_sem, correct_geo;
    conf_sem.reserve(n_eval);
    conf_geo.reserve(n_eval);
    for (std::size_t i = 0; i < n; ++i) {
        if (!mask[i]) continue;
        const double cg = geo.confidence[i];
        const bool ok_geo = (geo.pred_occupied[i] != 0) == (batch.labels[i] != 0);
        conf_geo.push_back(cg);
        correct_geo.push_back(ok_geo ? 1 : 0);
        u_geo.push_back(source == UncertaintySource::ExplicitSigma
                            ? static_cast<double>(batch.sigmas[i])
                            : 1.0 - cg);
        if (opts.sem_gt_occupied_only && batch.labels[i] == 0) continue;
        const double cs = probs.confidence[i];
        conf_sem.push_back(cs);
        correct_sem.push_back(probs.pred_label[i] == batch.labels[i] ? 1 : 0);
        u_sem.push_back(source == UncertaintySource::ExplicitSigma
                            ? static_cast<double>(batch.sigmas[i])
                            : 1.0 - cs);
    }
    if (conf_sem.empty()) throw std::domain_error("evaluate: empty semantic evaluation set");

    report.diagram_sem = reliability_diagram(conf_sem, correct_sem, opts.num_bins);
    report.diagram_geo = reliability_diagram(conf_geo, correct_geo, opts.num_bins);
    report.ece_sem = ece_from_bins(report.diagram_sem, conf_sem.size());
    report.ece_geo = ece_from_bins(report.diagram_geo, conf_geo.size());

    try {
        report.rejection_sem = rejection_curve(u_sem, correct_sem);
    } catch (const std::domain_error&) {
    }
    try {
        report.prr_sem = prr(u_sem, correct_sem);
    } catch (const std::domain_error&) {
    }
    try {
        report.rejection_geo = rejection_curve(u_geo, correct_geo);
    } catch (const std::domain_error&) {
    }
    try {
        report.prr_geo = prr(u_geo, correct_geo);
    } catch (const std::domain_error&) {
    }
    return report;
}

inline MetricReport evaluate(const VoxelBatch& batch, UncertaintySource source,
                             const EvalOptions& opts = {}) {
    return evaluate(batch, predict(batch), source, opts);
}

}  // namespace reliocc
