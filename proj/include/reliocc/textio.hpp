// Versioned key-value text files for calibrator parameters and model
// weights, plus the scene-config reader. Floats are written with 17
// significant digits so saved values round-trip bit-exactly.
#pragma once

#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "reliocc/calib.hpp"
#include "reliocc/toynet.hpp"

namespace reliocc {

inline std::string format_full(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

namespace textio_detail {

class TokenReader {
public:
    explicit TokenReader(const std::string& path) : in_(path), path_(path) {
        if (!in_) throw std::runtime_error("cannot open: " + path);
    }
    std::string word() {
        std::string t;
        if (!(in_ >> t)) throw std::runtime_error("unexpected end of file: " + path_);
        return t;
    }
    void expect(const std::string& key) {
        const std::string t = word();
        if (t != key)
            throw std::runtime_error("expected '" + key + "' but found '" + t + "': " + path_);
    }
    double number() {
        const std::string t = word();
        try {
            std::size_t pos = 0;
            const double v = std::stod(t, &pos);
            if (pos != t.size()) throw std::invalid_argument(t);
            return v;
        } catch (const std::exception&) {
            throw std::runtime_error("bad number '" + t + "': " + path_);
        }
    }
    long long integer() {
        const std::string t = word();
        try {
            std::size_t pos = 0;
            const long long v = std::stoll(t, &pos);
            if (pos != t.size()) throw std::invalid_argument(t);
            return v;
        } catch (const std::exception&) {
            throw std::runtime_error("bad integer '" + t + "': " + path_);
        }
    }
    std::vector<double> numbers(const std::string& key, std::size_t count) {
        expect(key);
        std::vector<double> out(count);
        for (double& v : out) v = number();
        return out;
    }

private:
    std::ifstream in_;
    std::string path_;
};

inline void write_vector(std::ostream& out, const std::string& key,
                         const std::vector<double>& values) {
    out << key;
    for (double v : values) out << ' ' << format_full(v);
    out << '\n';
}

inline void write_head(std::ostream& out, const UncertaintyHead& head) {
    out << "head " << head.input_dim << ' ' << head.hidden_dim << ' '
        << format_full(head.sigma_floor) << '\n';
    write_vector(out, "head_w1", head.w1);
    write_vector(out, "head_b1", head.b1);
    write_vector(out, "head_w2", head.w2);
    write_vector(out, "head_b2", head.b2);
}

inline UncertaintyHead read_head(TokenReader& reader) {
    reader.expect("head");
    UncertaintyHead head;
    head.input_dim = static_cast<int>(reader.integer());
    head.hidden_dim = static_cast<int>(reader.integer());
    head.sigma_floor = reader.number();
    const auto n1 = static_cast<std::size_t>(head.hidden_dim) *
                    static_cast<std::size_t>(head.input_dim);
    head.w1 = reader.numbers("head_w1", n1);
    head.b1 = reader.numbers("head_b1", static_cast<std::size_t>(head.hidden_dim));
    head.w2 = reader.numbers("head_w2", static_cast<std::size_t>(head.hidden_dim));
    head.b2 = reader.numbers("head_b2", 1);
    head.gw1.assign(head.w1.size(), 0.0);
    head.gb1.assign(head.b1.size(), 0.0);
    head.gw2.assign(head.w2.size(), 0.0);
    head.gb2.assign(1, 0.0);
    return head;
}

}  // namespace textio_detail

// ---------------------------------------------------------------------------
// Calibrator parameters
// ---------------------------------------------------------------------------

inline void save_calibrator(const CalibratorParams& params, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    out << "reliocc-calib 1\n";
    out << "kind " << calibrator_kind_name(params.kind) << '\n';
    out << "num_classes " << params.num_classes << '\n';
    switch (params.kind) {
        case CalibratorKind::TempS:
            out << "T " << format_full(params.T) << '\n';
            break;
        case CalibratorKind::DiriS:
            textio_detail::write_vector(out, "W", params.W);
            textio_detail::write_vector(out, "b", params.b);
            break;
        case CalibratorKind::MetaC:
            out << "T " << format_full(params.T) << '\n';
            out << "eta " << format_full(params.eta) << '\n';
            break;
        case CalibratorKind::DeptS:
            out << "k1 " << format_full(params.k1) << '\n';
            out << "k2 " << format_full(params.k2) << '\n';
            out << "T1 " << format_full(params.T1) << '\n';
            out << "T2 " << format_full(params.T2) << '\n';
            out << "eta " << format_full(params.eta) << '\n';
            break;
        case CalibratorKind::ReliOccScaler:
            out << "k1 " << format_full(params.k1) << '\n';
            out << "k2 " << format_full(params.k2) << '\n';
            textio_detail::write_vector(out, "W_diag", params.W);
            textio_detail::write_vector(out, "b", params.b);
            textio_detail::write_head(out, params.sigma_head);
            break;
    }
    out << "final_nll " << format_full(params.fit_log.final_nll) << '\n';
    out << "iterations " << params.fit_log.iterations << '\n';
    if (!out) throw std::runtime_error("write failed: " + path);
}

inline CalibratorParams load_calibrator(const std::string& path) {
    textio_detail::TokenReader reader(path);
    reader.expect("reliocc-calib");
    const long long version = reader.integer();
    if (version != 1)
        throw std::runtime_error("unsupported calibrator file version " +
                                 std::to_string(version) + ": " + path);
    CalibratorParams params;
    reader.expect("kind");
    params.kind = calibrator_kind_from_name(reader.word());
    reader.expect("num_classes");
    params.num_classes = static_cast<int>(reader.integer());
    const auto width = static_cast<std::size_t>(params.width());
    switch (params.kind) {
        case CalibratorKind::TempS:
            reader.expect("T");
            params.T = reader.number();
            break;
        case CalibratorKind::DiriS:
            params.W = reader.numbers("W", width * width);
            params.b = reader.numbers("b", width);
            break;
        case CalibratorKind::MetaC:
            reader.expect("T");
            params.T = reader.number();
            reader.expect("eta");
            params.eta = reader.number();
            break;
        case CalibratorKind::DeptS:
            reader.expect("k1");
            params.k1 = reader.number();
            reader.expect("k2");
            params.k2 = reader.number();
            reader.expect("T1");
            params.T1 = reader.number();
            reader.expect("T2");
            params.T2 = reader.number();
            reader.expect("eta");
            params.eta = reader.number();
            break;
        case CalibratorKind::ReliOccScaler:
            reader.expect("k1");
            params.k1 = reader.number();
            reader.expect("k2");
            params.k2 = reader.number();
            params.W = reader.numbers("W_diag", width);
            params.b = reader.numbers("b", width);
            params.sigma_head = textio_detail::read_head(reader);
            break;
    }
    reader.expect("final_nll");
    params.fit_log.final_nll = reader.number();
    reader.expect("iterations");
    params.fit_log.iterations = static_cast<std::size_t>(reader.integer());
    return params;
}

// ---------------------------------------------------------------------------
// Model weights
// ---------------------------------------------------------------------------

inline void save_toynet(const ToyNet& net, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    out << "reliocc-model 1\n";
    out << "feature_dim " << net.feature_dim << '\n';
    out << "num_classes " << net.num_classes << '\n';
    out << "hidden " << net.hidden << '\n';
    out << "dropout_p " << format_full(net.dropout_p) << '\n';
    textio_detail::write_vector(out, "class_weights", net.class_weights);
    for (const auto* layer : {&net.l1, &net.l2, &net.l3}) {
        textio_detail::write_vector(out, "w", layer->w);
        textio_detail::write_vector(out, "b", layer->b);
    }
    textio_detail::write_head(out, net.head);
    textio_detail::write_vector(out, "dul_w", net.dul.w);
    textio_detail::write_vector(out, "dul_b", net.dul.b);
    if (!out) throw std::runtime_error("write failed: " + path);
}

inline ToyNet load_toynet(const std::string& path) {
    textio_detail::TokenReader reader(path);
    reader.expect("reliocc-model");
    const long long version = reader.integer();
    if (version != 1)
        throw std::runtime_error("unsupported model file version " + std::to_string(version) +
                                 ": " + path);
    reader.expect("feature_dim");
    const int feature_dim = static_cast<int>(reader.integer());
    reader.expect("num_classes");
    const int num_classes = static_cast<int>(reader.integer());
    reader.expect("hidden");
    const int hidden = static_cast<int>(reader.integer());
    reader.expect("dropout_p");
    const double dropout_p = reader.number();
    ToyNet net = make_toynet(feature_dim, num_classes, 0, dropout_p);
    if (hidden != net.hidden)
        throw std::runtime_error("unsupported hidden width in model file: " + path);
    net.class_weights =
        reader.numbers("class_weights", static_cast<std::size_t>(num_classes) + 1);
    for (auto* layer : {&net.l1, &net.l2, &net.l3}) {
        layer->w = reader.numbers("w", layer->w.size());
        layer->b = reader.numbers("b", layer->b.size());
    }
    net.head = textio_detail::read_head(reader);
    net.dul.w = reader.numbers("dul_w", net.dul.w.size());
    net.dul.b = reader.numbers("dul_b", net.dul.b.size());
    return net;
}

// ---------------------------------------------------------------------------
// Scene config files: `key = value` lines, '#' comments, all keys optional
// ---------------------------------------------------------------------------

inline SceneConfig parse_scene_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config: " + path);
    SceneConfig cfg;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        std::istringstream ls(line);
        std::string key, eq, value;
        if (!(ls >> key)) continue;  // blank line
        if (!(ls >> eq) || eq != "=" || !(ls >> value))
            throw std::runtime_error("config line " + std::to_string(line_no) +
                                     ": expected 'key = value'");
        auto as_int = [&] { return std::stoi(value); };
        auto as_double = [&] { return std::stod(value); };
        if (key == "grid_l") cfg.grid_l = as_int();
        else if (key == "grid_w") cfg.grid_w = as_int();
        else if (key == "grid_h") cfg.grid_h = as_int();
        else if (key == "feature_dim") cfg.feature_dim = as_int();
        else if (key == "noise_base") cfg.noise_base = as_double();
        else if (key == "noise_depth_slope") cfg.noise_depth_slope = as_double();
        else if (key == "ignore_fraction") cfg.ignore_fraction = as_double();
        else if (key == "prototype_seed") cfg.prototype_seed = std::stoull(value);
        else if (key == "scenes_train") cfg.scenes_train = as_int();
        else if (key == "scenes_val") cfg.scenes_val = as_int();
        else if (key == "scenes_test") cfg.scenes_test = as_int();
        else
            throw std::runtime_error("config line " + std::to_string(line_no) +
                                     ": unknown key '" + key + "'");
    }
    return cfg;
}

}  // namespace reliocc
