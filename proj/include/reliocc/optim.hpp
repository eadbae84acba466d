// Adam with optional decoupled weight decay, operating on a registry of
// named parameter tensors. Updates run in registry order so results are
// reproducible.
#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace reliocc {

struct ParamRef {
    std::string name;
    std::vector<double>* value = nullptr;
    std::vector<double>* grad = nullptr;
};

struct Adam {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;  // decoupled; 0 reduces to plain Adam

    std::size_t t = 0;
    std::vector<std::vector<double>> m, v;

    void step(const std::vector<ParamRef>& params) {
        if (m.empty()) {
            m.resize(params.size());
            v.resize(params.size());
            for (std::size_t k = 0; k < params.size(); ++k) {
                m[k].assign(params[k].value->size(), 0.0);
                v[k].assign(params[k].value->size(), 0.0);
            }
        }
        if (m.size() != params.size())
            throw std::logic_error("Adam: parameter registry changed between steps");
        ++t;
        const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
        const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
        for (std::size_t k = 0; k < params.size(); ++k) {
            auto& value = *params[k].value;
            auto& grad = *params[k].grad;
            if (value.size() != m[k].size())
                throw std::logic_error("Adam: tensor '" + params[k].name + "' resized");
            for (std::size_t j = 0; j < value.size(); ++j) {
                m[k][j] = beta1 * m[k][j] + (1.0 - beta1) * grad[j];
                v[k][j] = beta2 * v[k][j] + (1.0 - beta2) * grad[j] * grad[j];
                const double mhat = m[k][j] / bc1;
                const double vhat = v[k][j] / bc2;
                value[j] -= lr * (mhat / (std::sqrt(vhat) + eps) + weight_decay * value[j]);
            }
        }
    }

    void reset() {
        t = 0;
        m.clear();
        v.clear();
    }
};

inline void zero_grads(const std::vector<ParamRef>& params) {
    for (const auto& p : params)
        for (double& g : *p.grad) g = 0.0;
}

}  // namespace reliocc
