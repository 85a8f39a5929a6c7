#pragma once

#include <array>
#include <vector>

#include "topotta/tensor.hpp"

namespace topotta {

// Topology-aware correction of 3x3 convolutions. Eight "directions" each
// describe a local connectivity pattern: a direction d has a read set R_d of
// three kernel offsets and a designated bridge offset b_d inside it. The
// corrected response for direction d keeps the vanilla convolution everywhere
// except that the R_d taps collapse onto the center pixel and the bridge tap
// reads from the offset b_d:
//
//   C_d(r) = x(r) * (S - S_d) + x(r - b_d) * S_d,   S   = sum of all 9 taps,
//                                                   S_d = sum of taps in R_d.
//
// A learned per-patch coefficient delta(j, d) mixes these corrections into the
// conv output on an n x n grid of output patches:
//
//   out(r) = conv(x)(r) - sum_d delta(j(r), d) * C_d(x)(r).

struct DirectionSpec {
    std::array<std::pair<int, int>, 3> reads;  // (dy, dx) offsets forming R_d
    std::pair<int, int> bridge;                // b_d, always a member of R_d
};

// The eight direction specs, index 0..7 for directions 1..8.
const std::array<DirectionSpec, 8>& direction_specs();

// R_d as a 3x3 tap mask (row-major, tap k = (dy+1)*3 + (dx+1)).
std::array<bool, 9> direction_read_mask(int d);

// Patch index of an output pixel on an n x n grid; the last row/column of
// patches absorbs the remainder when H or W is not divisible by n.
int patch_of(int y, int x, int h, int w, int n);

// Central (fully collapsed) variant: every tap reads the center pixel.
Tensor cdc_central(const Tensor& x, const Tensor& w);

// Single-direction corrected convolution C_d, built compositionally from
// differentiable primitives. d in [0, 8).
Tensor topomdc_direct(const Tensor& x, const Tensor& w, int d);

// Full corrected layer, fused: per patch the nine correction terms fold into
// one equivalent spatially varying 3x3 kernel, with reads crossing patch
// borders. delta is [n*n, 8]. Gradients flow to x, w and delta.
Tensor topomdc_fused(const Tensor& x, const Tensor& w, const Tensor& delta, int n);

// Reference evaluation of the same quantity via conv3x3 / topomdc_direct /
// per-patch masking. Slow; exists as an independently wired path for tests.
Tensor topomdc_combine_direct(const Tensor& x, const Tensor& w, const Tensor& delta, int n);

// Per-layer mixing coefficients for a wrapped encoder. One [n*n, 8] leaf per
// replaced conv layer, shared between any models wrapped with the same
// instance (teacher and student see the same deltas).
struct RouterParams {
    int n = 4;
    std::vector<Tensor> delta;            // one per replaced layer, shape [n*n, 8]
    std::vector<std::string> layer_names;  // parameter name of each replaced conv

    std::size_t count() const;   // total number of delta entries
    void reset_zero();           // back to neutral (vanilla conv behavior)
    void set_requires_grad(bool rg);
};

}  // namespace topotta
