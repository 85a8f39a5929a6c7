#pragma once

#include <cstdint>
#include <vector>

#include "topotta/tensor.hpp"

namespace topotta {

// Adam with bias correction. Moment buffers are allocated on the first step
// and are keyed by position, so the caller must pass the same parameter list
// (same order, same shapes) on every step.
struct AdamState {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::int64_t t = 0;
    std::vector<std::vector<double>> m, v;
};

// One update step in place. Parameters without a populated gradient buffer are
// treated as having zero gradient. Gradients are read, not cleared.
void adam_step(std::vector<Tensor>& params, AdamState& state, double lr);

}  // namespace topotta
