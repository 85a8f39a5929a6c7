#include "topotta/optim.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace topotta {

void adam_step(std::vector<Tensor>& params, AdamState& state, double lr) {
    if (state.m.empty() && state.t == 0) {
        state.m.resize(params.size());
        state.v.resize(params.size());
        for (std::size_t i = 0; i < params.size(); ++i) {
            state.m[i].assign(params[i].numel(), 0.0);
            state.v[i].assign(params[i].numel(), 0.0);
        }
    }
    if (state.m.size() != params.size())
        throw std::invalid_argument("adam_step: parameter count changed since first step (" +
                                    std::to_string(state.m.size()) + " vs " +
                                    std::to_string(params.size()) + ")");

    state.t += 1;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));

    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& p = params[i];
        if (state.m[i].size() != static_cast<std::size_t>(p.numel()))
            throw std::invalid_argument("adam_step: parameter " + std::to_string(i) +
                                        " changed size since first step");
        const std::vector<double>& g = p.grad_buffer();
        std::vector<double>& m = state.m[i];
        std::vector<double>& v = state.v[i];
        std::vector<double>& w = p.raw();
        for (std::size_t k = 0; k < w.size(); ++k) {
            m[k] = state.beta1 * m[k] + (1.0 - state.beta1) * g[k];
            v[k] = state.beta2 * v[k] + (1.0 - state.beta2) * g[k] * g[k];
            const double mhat = m[k] / bc1;
            const double vhat = v[k] / bc2;
            w[k] -= lr * mhat / (std::sqrt(vhat) + state.eps);
        }
    }
}

}  // namespace topotta
