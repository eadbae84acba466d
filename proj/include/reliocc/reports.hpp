// Metric report emitters: flat metrics CSV, reliability-diagram and
// rejection-curve CSVs, and matching static SVG charts. Every numeric CSV
// value is written with round-trip precision.
#pragma once

#include <filesystem>
#include <fstream>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>

#include "reliocc/metrics.hpp"
#include "reliocc/textio.hpp"

namespace reliocc {

namespace reports_detail {

inline std::ofstream open_out(const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
    return out;
}

// Plot geometry shared by both chart types.
inline constexpr double kPlotX = 70.0, kPlotY = 30.0, kPlotW = 420.0, kPlotH = 320.0;
inline constexpr double kSvgW = 540.0, kSvgH = 410.0;

inline double sx(double v) { return kPlotX + v * kPlotW; }
inline double sy(double v) { return kPlotY + (1.0 - v) * kPlotH; }

inline void write_axes(std::ostream& out, const std::string& x_label,
                       const std::string& y_label) {
    out << "  <rect x=\"" << kPlotX << "\" y=\"" << kPlotY << "\" width=\"" << kPlotW
        << "\" height=\"" << kPlotH << "\" fill=\"none\" stroke=\"#444\"/>\n";
    for (double t : {0.0, 0.25, 0.5, 0.75, 1.0}) {
        out << "  <text x=\"" << sx(t) << "\" y=\"" << kPlotY + kPlotH + 18
            << "\" font-size=\"11\" text-anchor=\"middle\">" << t << "</text>\n";
        out << "  <text x=\"" << kPlotX - 8 << "\" y=\"" << sy(t) + 4
            << "\" font-size=\"11\" text-anchor=\"end\">" << t << "</text>\n";
    }
    out << "  <text x=\"" << kPlotX + kPlotW / 2 << "\" y=\"" << kPlotY + kPlotH + 38
        << "\" font-size=\"13\" text-anchor=\"middle\">" << x_label << "</text>\n";
    out << "  <text x=\"16\" y=\"" << kPlotY + kPlotH / 2
        << "\" font-size=\"13\" text-anchor=\"middle\" transform=\"rotate(-90 16 "
        << kPlotY + kPlotH / 2 << ")\">" << y_label << "</text>\n";
}

}  // namespace reports_detail

inline void write_metrics_csv(const MetricReport& report, const std::string& path) {
    auto out = reports_detail::open_out(path);
    const double nan = std::numeric_limits<double>::quiet_NaN();
    out << "name,value\n";
    out << "n_eval," << report.n_eval << '\n';
    out << "iou," << format_full(report.iou) << '\n';
    out << "miou," << format_full(report.miou) << '\n';
    for (std::size_t c = 0; c < report.per_class_iou.size(); ++c)
        out << "per_class_iou_" << (c + 1) << ',' << format_full(report.per_class_iou[c]) << '\n';
    out << "ece_geo," << format_full(report.ece_geo) << '\n';
    out << "ece_sem," << format_full(report.ece_sem) << '\n';
    out << "prr_geo," << format_full(report.prr_geo.value_or(nan)) << '\n';
    out << "prr_sem," << format_full(report.prr_sem.value_or(nan)) << '\n';
}

inline void write_diagram_csv(std::span<const BinStats> bins, const std::string& path) {
    auto out = reports_detail::open_out(path);
    out << "bin_index,count,mean_conf,mean_acc\n";
    for (const auto& b : bins)
        out << b.bin_index << ',' << b.count << ',' << format_full(b.mean_conf) << ','
            << format_full(b.mean_acc) << '\n';
}

inline void write_curve_csv(const RejectionCurve* curve, const std::string& path) {
    auto out = reports_detail::open_out(path);
    out << "rejection_rate,normalized_error\n";
    if (!curve) return;  // undefined curve (no base errors): header only
    for (const auto& p : curve->points)
        out << format_full(p.rejection_rate) << ',' << format_full(p.normalized_error) << '\n';
}

// Per-bin accuracy bars against the identity diagonal, with the gap between
// mean accuracy and mean confidence shaded per bin.
inline void write_diagram_svg(std::span<const BinStats> bins, double ece_value,
                              const std::string& title, const std::string& path) {
    using namespace reports_detail;
    auto out = open_out(path);
    const int num_bins = static_cast<int>(bins.size());
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kSvgW << "\" height=\""
        << kSvgH << "\" viewBox=\"0 0 " << kSvgW << ' ' << kSvgH << "\">\n";
    out << "  <text x=\"" << kPlotX << "\" y=\"18\" font-size=\"14\">" << title
        << " (ECE = " << format_full(ece_value) << ")</text>\n";
    write_axes(out, "confidence", "accuracy");
    for (const auto& b : bins) {
        if (b.count == 0) continue;
        const double x0 = sx(static_cast<double>(b.bin_index) / num_bins);
        const double bar_w = kPlotW / num_bins;
        out << "  <rect class=\"acc\" x=\"" << x0 << "\" y=\"" << sy(b.mean_acc)
            << "\" width=\"" << bar_w << "\" height=\"" << b.mean_acc * kPlotH
            << "\" fill=\"#4878a8\" stroke=\"#2f4f6f\" stroke-width=\"0.5\"/>\n";
        const double gap = std::abs(b.mean_acc - b.mean_conf);
        const double top = std::max(b.mean_acc, b.mean_conf);
        out << "  <rect class=\"gap\" x=\"" << x0 << "\" y=\"" << sy(top) << "\" width=\""
            << bar_w << "\" height=\"" << gap * kPlotH
            << "\" fill=\"#d9534f\" fill-opacity=\"0.45\"/>\n";
    }
    out << "  <line x1=\"" << sx(0.0) << "\" y1=\"" << sy(0.0) << "\" x2=\"" << sx(1.0)
        << "\" y2=\"" << sy(1.0) << "\" stroke=\"#222\" stroke-dasharray=\"5,4\"/>\n";
    out << "</svg>\n";
}

inline void write_curve_svg(const RejectionCurve* curve, const std::string& title,
                            const std::string& path) {
    using namespace reports_detail;
    auto out = open_out(path);
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kSvgW << "\" height=\""
        << kSvgH << "\" viewBox=\"0 0 " << kSvgW << ' ' << kSvgH << "\">\n";
    if (curve) {
        out << "  <text x=\"" << kPlotX << "\" y=\"18\" font-size=\"14\">" << title
            << " (AUC = " << format_full(curve->auc) << ")</text>\n";
    } else {
        out << "  <text x=\"" << kPlotX << "\" y=\"18\" font-size=\"14\">" << title
            << " (undefined: no base errors)</text>\n";
    }
    write_axes(out, "rejection rate", "normalized error");
    out << "  <line x1=\"" << sx(0.0) << "\" y1=\"" << sy(1.0) << "\" x2=\"" << sx(1.0)
        << "\" y2=\"" << sy(0.0) << "\" stroke=\"#999\" stroke-dasharray=\"5,4\"/>\n";
    if (curve) {
        out << "  <polyline fill=\"none\" stroke=\"#c05020\" stroke-width=\"1.5\" points=\"";
        for (const auto& p : curve->points)
            out << sx(p.rejection_rate) << ',' << sy(p.normalized_error) << ' ';
        out << "\"/>\n";
    }
    out << "</svg>\n";
}

// Writes the full report file set into `out_dir` (created if needed):
// metrics.csv, reliability_{sem,geo}.{csv,svg}, rejection_{sem,geo}.{csv,svg}.
inline void emit_reports(const MetricReport& report, const std::string& out_dir) {
    namespace fs = std::filesystem;
    const fs::path dir(out_dir);
    fs::create_directories(dir);
    write_metrics_csv(report, (dir / "metrics.csv").string());
    write_diagram_csv(report.diagram_sem, (dir / "reliability_sem.csv").string());
    write_diagram_csv(report.diagram_geo, (dir / "reliability_geo.csv").string());
    write_diagram_svg(report.diagram_sem, report.ece_sem, "semantic reliability",
                      (dir / "reliability_sem.svg").string());
    write_diagram_svg(report.diagram_geo, report.ece_geo, "geometric reliability",
                      (dir / "reliability_geo.svg").string());
    const RejectionCurve* sem = report.rejection_sem ? &*report.rejection_sem : nullptr;
    const RejectionCurve* geo = report.rejection_geo ? &*report.rejection_geo : nullptr;
    write_curve_csv(sem, (dir / "rejection_sem.csv").string());
    write_curve_csv(geo, (dir / "rejection_geo.csv").string());
    write_curve_svg(sem, "semantic rejection curve", (dir / "rejection_sem.svg").string());
    write_curve_svg(geo, "geometric rejection curve", (dir / "rejection_geo.svg").string());
}

}  // namespace reliocc
