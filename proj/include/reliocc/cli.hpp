// Command-line surface tying scene generation, training, evaluation,
// calibration, perturbation and reporting together. Exposed as a function of
// argv so tests can drive whole pipelines in-process.
#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "reliocc/calib.hpp"
#include "reliocc/dump.hpp"
#include "reliocc/metrics.hpp"
#include "reliocc/reports.hpp"
#include "reliocc/textio.hpp"
#include "reliocc/toynet.hpp"

namespace reliocc {

namespace cli_detail {

inline void write_loss_curve_csv(const std::vector<EpochLosses>& curve, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    out << "epoch,l_occ,l_au,l_ru,total\n";
    for (std::size_t e = 0; e < curve.size(); ++e)
        out << e << ',' << format_full(curve[e].occ) << ',' << format_full(curve[e].au) << ','
            << format_full(curve[e].ru) << ',' << format_full(curve[e].total) << '\n';
}

struct GenArgs {
    std::string config, out;
    std::uint64_t seed = 1;
};

struct TrainArgs {
    std::string data, mode = "baseline", out_model, out_dump;
    int epochs = 30;
    int batch_size = 512;
    std::uint64_t seed = 1;
};

struct EvalArgs {
    std::string dump, uncertainty = "conf", out_dir;
    int bins = 15;
};

struct CalibrateArgs {
    std::string kind, fit_dump, apply_dump, out_params, out_dir;
    int epochs = 20;
    int steps = 100;
    std::uint64_t seed = 42;
};

struct PerturbArgs {
    std::string dump, kind, out;
    double magnitude = 0.0;
    std::uint64_t seed = 1;
};

struct ReportArgs {
    std::string dump, out_dir;
    int bins = 15;
};

inline void run_gen(const GenArgs& a) {
    SceneConfig cfg;
    if (!a.config.empty()) cfg = parse_scene_config(a.config);
    const SceneDataset ds = generate_scenes(cfg, a.seed);
    std::filesystem::create_directories(a.out);
    const std::filesystem::path dir(a.out);
    write_dump(ds.train, (dir / "train.occd").string());
    write_dump(ds.val, (dir / "val.occd").string());
    write_dump(ds.test, (dir / "test.occd").string());
    std::cout << "wrote " << ds.train.n << " train / " << ds.val.n << " val / " << ds.test.n
              << " test voxels to " << a.out << "\n";
}

inline void run_train(const TrainArgs& a) {
    const TrainMode mode = train_mode_from_name(a.mode);
    const std::filesystem::path data(a.data);
    const VoxelBatch train_split = read_dump((data / "train.occd").string());
    const VoxelBatch val_split = read_dump((data / "val.occd").string());
    const VoxelBatch test_split = read_dump((data / "test.occd").string());
    if (!train_split.has_features())
        throw std::runtime_error("train: training dump has no features");

    ToyNet net = make_toynet(train_split.feature_dim, train_split.num_classes, a.seed);
    TrainOptions opts;
    opts.batch_size = a.batch_size;
    const std::vector<EpochLosses> curve = train(net, train_split, a.epochs, mode, a.seed, opts);

    std::filesystem::create_directories(a.out_dump);
    const std::filesystem::path dump_dir(a.out_dump);
    const std::uint64_t dump_seed = derive_seed(a.seed, 0x64756D70);
    write_dump(predict_dump(net, val_split, mode, dump_seed), (dump_dir / "val.occd").string());
    write_dump(predict_dump(net, test_split, mode, dump_seed + 1),
               (dump_dir / "test.occd").string());
    write_loss_curve_csv(curve, (dump_dir / "losses.csv").string());
    if (!a.out_model.empty()) save_toynet(net, a.out_model);
    std::cout << "trained mode=" << a.mode << " for " << a.epochs
              << " epochs; final loss " << format_full(curve.back().total) << "\n";
}

inline void run_eval(const EvalArgs& a) {
    const VoxelBatch batch = read_dump(a.dump);
    UncertaintySource source;
    if (a.uncertainty == "conf") source = UncertaintySource::OneMinusConfidence;
    else if (a.uncertainty == "sigma") source = UncertaintySource::ExplicitSigma;
    else throw std::runtime_error("eval: --uncertainty must be 'conf' or 'sigma'");
    EvalOptions opts;
    opts.num_bins = a.bins;
    const MetricReport report = evaluate(batch, source, opts);
    emit_reports(report, a.out_dir);
    std::cout << "evaluated " << report.n_eval << " voxels; reports in " << a.out_dir << "\n";
}

inline void run_calibrate(const CalibrateArgs& a) {
    const CalibratorKind kind = calibrator_kind_from_name(a.kind);
    const VoxelBatch fit_batch = read_dump(a.fit_dump);
    const VoxelBatch apply_batch = read_dump(a.apply_dump);
    FitConfig config;
    config.epochs = a.epochs;
    config.steps_per_epoch = a.steps;
    config.seed = a.seed;
    const CalibratorParams params = fit_calibrator(kind, fit_batch, config);
    if (!a.out_params.empty()) save_calibrator(params, a.out_params);
    const ProbBatch calibrated = apply_calibrator(params, apply_batch);
    const MetricReport report =
        evaluate(apply_batch, calibrated, UncertaintySource::OneMinusConfidence);
    emit_reports(report, a.out_dir);
    std::cout << "calibrated kind=" << a.kind << "; fit NLL "
              << format_full(params.fit_log.final_nll) << "; reports in " << a.out_dir << "\n";
}

inline void run_perturb(const PerturbArgs& a) {
    const VoxelBatch batch = read_dump(a.dump);
    const VoxelBatch out = perturb(batch, perturb_kind_from_name(a.kind), a.magnitude, a.seed);
    write_dump(out, a.out);
    std::cout << "perturbed " << a.kind << " magnitude " << a.magnitude << " -> " << a.out << "\n";
}

inline void run_report(const ReportArgs& a) {
    const VoxelBatch batch = read_dump(a.dump);
    const UncertaintySource source = batch.has_sigmas() ? UncertaintySource::ExplicitSigma
                                                        : UncertaintySource::OneMinusConfidence;
    EvalOptions opts;
    opts.num_bins = a.bins;
    const MetricReport report = evaluate(batch, source, opts);
    emit_reports(report, a.out_dir);
    std::cout << "report for " << a.dump << " in " << a.out_dir << "\n";
}

}  // namespace cli_detail

// Returns the process exit code: 0 on success, 2 on usage errors, 1 on
// runtime failures.
inline int run_cli(std::vector<std::string> args) {
    using namespace cli_detail;
    CLI::App app{"reliability evaluation and calibration for voxel occupancy predictions"};
    app.name("reliocc");
    app.require_subcommand(1);

    GenArgs gen_args;
    auto* gen = app.add_subcommand("gen-scenes", "generate synthetic scene splits");
    gen->add_option("--config", gen_args.config, "scene config file (key = value lines)");
    gen->add_option("--seed", gen_args.seed, "generation seed");
    gen->add_option("--out", gen_args.out, "output directory for train/val/test dumps")
        ->required();

    TrainArgs train_args;
    auto* tr = app.add_subcommand("train", "train the toy classifier and dump predictions");
    tr->add_option("--data", train_args.data, "directory with train/val/test dumps")->required();
    tr->add_option("--mode", train_args.mode, "baseline|hau|dul|mcd|reliocc")
        ->check(CLI::IsMember({"baseline", "hau", "dul", "mcd", "reliocc"}));
    tr->add_option("--epochs", train_args.epochs, "training epochs");
    tr->add_option("--batch-size", train_args.batch_size, "minibatch size in voxels");
    tr->add_option("--seed", train_args.seed, "training seed");
    tr->add_option("--out-model", train_args.out_model, "model weight file");
    tr->add_option("--out-dump", train_args.out_dump,
                   "directory for val/test prediction dumps and the loss curve")
        ->required();

    EvalArgs eval_args;
    auto* ev = app.add_subcommand("eval", "evaluate a prediction dump");
    ev->add_option("--dump", eval_args.dump, "prediction dump")->required();
    ev->add_option("--uncertainty", eval_args.uncertainty, "conf|sigma")
        ->check(CLI::IsMember({"conf", "sigma"}));
    ev->add_option("--bins", eval_args.bins, "calibration bins");
    ev->add_option("--out-dir", eval_args.out_dir, "report directory")->required();

    CalibrateArgs cal_args;
    auto* cal = app.add_subcommand("calibrate", "fit a scaling calibrator and apply it");
    cal->add_option("--kind", cal_args.kind, "temps|diris|metac|depts|reliocc")
        ->required()
        ->check(CLI::IsMember({"temps", "diris", "metac", "depts", "reliocc"}));
    cal->add_option("--fit-dump", cal_args.fit_dump, "dump to fit on (validation)")->required();
    cal->add_option("--apply-dump", cal_args.apply_dump, "dump to calibrate and evaluate")
        ->required();
    cal->add_option("--out-params", cal_args.out_params, "calibrator parameter file");
    cal->add_option("--out-dir", cal_args.out_dir, "report directory")->required();
    cal->add_option("--epochs", cal_args.epochs, "fitting epochs");
    cal->add_option("--steps", cal_args.steps, "full-batch gradient steps per epoch");
    cal->add_option("--seed", cal_args.seed, "fitting seed");

    PerturbArgs pert_args;
    auto* pert = app.add_subcommand("perturb", "apply an out-of-domain perturbation to a dump");
    pert->add_option("--dump", pert_args.dump, "input dump")->required();
    pert->add_option("--kind", pert_args.kind, "feature_noise|logit_noise|block_drop")
        ->required()
        ->check(CLI::IsMember({"feature_noise", "logit_noise", "block_drop"}));
    pert->add_option("--magnitude", pert_args.magnitude, "noise std or drop fraction")
        ->required();
    pert->add_option("--seed", pert_args.seed, "perturbation seed");
    pert->add_option("--out", pert_args.out, "output dump")->required();

    ReportArgs report_args;
    auto* rep = app.add_subcommand("report", "evaluate a dump with automatic uncertainty source");
    rep->add_option("--dump", report_args.dump, "prediction dump")->required();
    rep->add_option("--bins", report_args.bins, "calibration bins");
    rep->add_option("--out-dir", report_args.out_dir, "report directory")->required();

    std::reverse(args.begin(), args.end());  // CLI11 consumes args back to front
    try {
        app.parse(args);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n\n" << app.help() << std::flush;
        return 2;
    }

    try {
        if (gen->parsed()) run_gen(gen_args);
        else if (tr->parsed()) run_train(train_args);
        else if (ev->parsed()) run_eval(eval_args);
        else if (cal->parsed()) run_calibrate(cal_args);
        else if (pert->parsed()) run_perturb(pert_args);
        else if (rep->parsed()) run_report(report_args);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

}  // namespace reliocc
