#pragma once

#include <array>

#include "topotta/tensor.hpp"

namespace topotta {

// Differentiable primitives. Conventions shared by all of them:
//  - inputs are never mutated; every output is a fresh node on the tape
//  - spatial ops use zero padding for out-of-bounds reads
//  - shape mismatches throw std::invalid_argument, non-finite results
//    std::runtime_error
// Convolution reads with a minus: out(r) = sum_off w(off) * x(r - off),
// off in {-1,0,1}^2 laid out row-major in the kernel's last two dims.

Tensor conv3x3(const Tensor& x, const Tensor& w);                    // x [N,C,H,W], w [O,C,3,3]
Tensor conv3x3(const Tensor& x, const Tensor& w, const Tensor& bias);  // bias [O]
Tensor conv1x1(const Tensor& x, const Tensor& w);                    // w [O,C,1,1]
Tensor conv1x1(const Tensor& x, const Tensor& w, const Tensor& bias);

Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);  // overflow-safe at |x| large

// Normalizes with the given per-channel statistics as constants; gradients
// flow to x, gamma, beta only. eps must be > 0, var entries >= 0.
Tensor batchnorm_inference(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                           const std::vector<double>& mean, const std::vector<double>& var,
                           double eps);

Tensor maxpool2x2(const Tensor& x);  // H, W must be even; ties keep the first in scan order

// Half-pixel bilinear resampling, edge-clamped.
Tensor resize_bilinear(const Tensor& x, int out_h, int out_w);
Tensor upsample_bilinear(const Tensor& x, int factor);

Tensor concat_channels(const Tensor& a, const Tensor& b);
Tensor flip_h(const Tensor& x);  // mirrors the W axis
Tensor flip_v(const Tensor& x);  // mirrors the H axis

// out(y,x) = in(y-dy, x-dx), zeros shifted in.
Tensor shift2d(const Tensor& x, int dy, int dx);

// Keeps the top-left out_h x out_w corner of every plane.
Tensor crop_spatial(const Tensor& x, int out_h, int out_w);

// Per-pixel channel mixing: out[n,o,y,x] = sum_c m[o,c] * x[n,c,y,x]; m [O,C].
Tensor channel_mix(const Tensor& x, const Tensor& m);

// Sums kernel taps selected by mask (row-major 3x3) into an [O,C] tensor.
Tensor kernel_subset_sum(const Tensor& w, const std::array<bool, 9>& mask);

// out = s[idx] * x, with gradients to both x and the indexed entry of s.
Tensor scale_by_entry(const Tensor& x, const Tensor& s, std::size_t idx);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double c);
Tensor mul_mask(const Tensor& x, const std::vector<double>& mask);  // constant elementwise factor
Tensor clamp(const Tensor& x, double lo, double hi);  // zero gradient where clamped
Tensor sum_all(const Tensor& x);  // -> shape {1}

// Losses (each returns shape {1}). target / teacher / weights are constants
// and must not require grad.
//
// Entropy of a per-pixel binary distribution summed over all entries;
// probabilities clamped to [log_eps, 1-log_eps] before the logs, clamped
// entries contribute zero gradient.
Tensor entropy_loss(const Tensor& pred, double log_eps = 1e-7);

// Soft Dice loss plus mean binary cross entropy.
Tensor dice_bce_loss(const Tensor& pred, const Tensor& target,
                     double dice_eps = 1e-7, double log_eps = 1e-7);

// Symmetric weighted cross entropy between teacher and student probability
// maps: L = sum_i w_i * -(t log s^ + (1-t) log(1-s^) + s log t^ + (1-s) log(1-t^)).
Tensor weighted_consistency_loss(const Tensor& teacher, const Tensor& student,
                                 const Tensor& weights, double log_eps = 1e-7);

}  // namespace topotta
