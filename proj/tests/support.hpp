#pragma once

// Shared test utilities: independent oracles and the gradient sweep that both
// the unit tests and the acceptance gate run. Everything here is deliberately
// written the dumb way (literal nested sums, no reuse of library loops) so it
// can act as an oracle for the real implementations.

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "topotta/ops.hpp"
#include "topotta/rng.hpp"
#include "topotta/tensor.hpp"

namespace support {

using topotta::Rng;
using topotta::Shape;
using topotta::Tensor;

inline std::vector<double> rand_vec(std::size_t n, Rng& rng, double lo = -1.0, double hi = 1.0) {
    std::vector<double> v(n);
    for (auto& e : v) e = rng.uniform(lo, hi);
    return v;
}

inline Tensor rand_tensor(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0, bool rg = false) {
    auto d = rand_vec(topotta::shape_numel(s), rng, lo, hi);
    return Tensor::from_data(std::move(s), std::move(d), rg);
}

// Random values kept a fixed distance away from the given kink points, for
// finite-difference checks of piecewise ops.
inline Tensor rand_tensor_away(Shape s, Rng& rng, std::vector<double> kinks,
                               double margin = 1e-2, double lo = -1.0, double hi = 1.0) {
    auto d = rand_vec(topotta::shape_numel(s), rng, lo, hi);
    for (auto& v : d)
        for (double k : kinks)
            if (std::abs(v - k) < margin) v = k + (v >= k ? margin : -margin) * 2.0;
    return Tensor::from_data(std::move(s), std::move(d), false);
}

inline Tensor rand_prob(Shape s, Rng& rng, double lo = 0.05, double hi = 0.95) {
    return rand_tensor(std::move(s), rng, lo, hi, false);
}

// Literal transcription of the convolution definition with zero padding:
// out(n,o,y,x) = bias(o) + sum_{c} sum_{dy,dx in {-1,0,1}} w(o,c,dy,dx) * in(n,c,y-dy,x-dx).
inline std::vector<double> conv3x3_ref(const std::vector<double>& x, int N, int C, int H, int W,
                                       const std::vector<double>& w, int O,
                                       const std::vector<double>* bias) {
    std::vector<double> out(static_cast<std::size_t>(N) * O * H * W, 0.0);
    for (int n = 0; n < N; ++n)
        for (int o = 0; o < O; ++o)
            for (int y = 0; y < H; ++y)
                for (int xx = 0; xx < W; ++xx) {
                    double acc = bias ? (*bias)[o] : 0.0;
                    for (int c = 0; c < C; ++c)
                        for (int dy = -1; dy <= 1; ++dy)
                            for (int dx = -1; dx <= 1; ++dx) {
                                const int sy = y - dy, sx = xx - dx;
                                if (sy < 0 || sy >= H || sx < 0 || sx >= W) continue;
                                acc += w[((static_cast<std::size_t>(o) * C + c) * 3 + (dy + 1)) * 3 +
                                         (dx + 1)] *
                                       x[((static_cast<std::size_t>(n) * C + c) * H + sy) * W + sx];
                            }
                    out[((static_cast<std::size_t>(n) * O + o) * H + y) * W + xx] = acc;
                }
    return out;
}

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

// ---------------------------------------------------------------------------
// gradient sweep

struct GradResult {
    std::string name;
    double err;
};

// Runs grad_check for every primitive, one perturbed input at a time,
// `points` random starting points per case. Returns worst relative error per
// case; the acceptance gate requires all of them below 1e-4.
inline std::vector<GradResult> core_gradient_cases(int points, std::uint64_t seed) {
    using namespace topotta;
    std::vector<GradResult> out;
    Rng root(seed);

    auto quad = [](const Tensor& t) { return sum_all(mul(t, t)); };

    auto run = [&](const std::string& name,
                   const std::function<Tensor(Rng&)>& make_point,
                   const std::function<Tensor(const Tensor&)>& f) {
        double worst = 0.0;
        for (int p = 0; p < points; ++p) {
            Rng r = root.fork(std::hash<std::string>{}(name) * 1000003ull + p);
            Tensor pt = make_point(r);
            worst = std::max(worst, grad_check(f, pt));
        }
        out.push_back({name, worst});
    };

    // convolution family
    {
        Rng r0 = root.fork(1);
        Tensor w = rand_tensor({4, 3, 3, 3}, r0);
        Tensor b = rand_tensor({4}, r0);
        Tensor x = rand_tensor({2, 3, 5, 6}, r0);
        run("conv3x3/x", [=](Rng& r) { return rand_tensor({2, 3, 5, 6}, r); },
            [=](const Tensor& t) { return quad(conv3x3(t, w, b)); });
        run("conv3x3/w", [=](Rng& r) { return rand_tensor({4, 3, 3, 3}, r); },
            [=](const Tensor& t) { return quad(conv3x3(x, t, b)); });
        run("conv3x3/bias", [=](Rng& r) { return rand_tensor({4}, r); },
            [=](const Tensor& t) { return quad(conv3x3(x, w, t)); });
        Tensor w1 = rand_tensor({4, 3, 1, 1}, r0);
        run("conv1x1/x", [=](Rng& r) { return rand_tensor({2, 3, 5, 6}, r); },
            [=](const Tensor& t) { return quad(conv1x1(t, w1, b)); });
        run("conv1x1/w", [=](Rng& r) { return rand_tensor({4, 3, 1, 1}, r); },
            [=](const Tensor& t) { return quad(conv1x1(x, t, b)); });
        run("conv1x1/bias", [=](Rng& r) { return rand_tensor({4}, r); },
            [=](const Tensor& t) { return quad(conv1x1(x, w1, t)); });
    }

    // pointwise
    run("relu", [](Rng& r) { return rand_tensor_away({2, 2, 4, 5}, r, {0.0}); },
        [&](const Tensor& t) { return quad(relu(t)); });
    run("sigmoid", [](Rng& r) { return rand_tensor({2, 2, 4, 5}, r, -3.0, 3.0); },
        [&](const Tensor& t) { return quad(sigmoid(t)); });
    {
        Rng r0 = root.fork(2);
        Tensor gamma = rand_tensor({3}, r0, 0.5, 1.5);
        Tensor beta = rand_tensor({3}, r0);
        std::vector<double> mean = rand_vec(3, r0, -1.0, 1.0);
        std::vector<double> var = rand_vec(3, r0, 0.2, 2.0);
        Tensor x = rand_tensor({2, 3, 4, 5}, r0);
        const double eps = 1e-5;
        run("batchnorm/x", [=](Rng& r) { return rand_tensor({2, 3, 4, 5}, r); },
            [=](const Tensor& t) { return quad(batchnorm_inference(t, gamma, beta, mean, var, eps)); });
        run("batchnorm/gamma", [=](Rng& r) { return rand_tensor({3}, r, 0.5, 1.5); },
            [=](const Tensor& t) { return quad(batchnorm_inference(x, t, beta, mean, var, eps)); });
        run("batchnorm/beta", [=](Rng& r) { return rand_tensor({3}, r); },
            [=](const Tensor& t) { return quad(batchnorm_inference(x, gamma, t, mean, var, eps)); });
    }
    run("maxpool2x2", [](Rng& r) { return rand_tensor({2, 3, 4, 6}, r); },
        [&](const Tensor& t) { return quad(maxpool2x2(t)); });

    // resampling / layout
    run("resize_bilinear/up", [](Rng& r) { return rand_tensor({1, 2, 4, 5}, r); },
        [&](const Tensor& t) { return quad(resize_bilinear(t, 7, 9)); });
    run("resize_bilinear/down", [](Rng& r) { return rand_tensor({1, 2, 6, 8}, r); },
        [&](const Tensor& t) { return quad(resize_bilinear(t, 3, 5)); });
    run("upsample_bilinear", [](Rng& r) { return rand_tensor({1, 2, 3, 4}, r); },
        [&](const Tensor& t) { return quad(upsample_bilinear(t, 2)); });
    {
        Rng r0 = root.fork(3);
        Tensor other = rand_tensor({2, 2, 4, 5}, r0);
        run("concat_channels/a", [=](Rng& r) { return rand_tensor({2, 3, 4, 5}, r); },
            [=](const Tensor& t) { return quad(concat_channels(t, other)); });
        run("concat_channels/b", [=](Rng& r) { return rand_tensor({2, 3, 4, 5}, r); },
            [=](const Tensor& t) { return quad(concat_channels(other, t)); });
    }
    run("flip_h", [](Rng& r) { return rand_tensor({2, 2, 4, 5}, r); },
        [&](const Tensor& t) { return quad(flip_h(t)); });
    run("flip_v", [](Rng& r) { return rand_tensor({2, 2, 4, 5}, r); },
        [&](const Tensor& t) { return quad(flip_v(t)); });
    run("shift2d", [](Rng& r) { return rand_tensor({2, 2, 4, 5}, r); },
        [&](const Tensor& t) { return quad(shift2d(t, 1, -2)); });
    run("crop_spatial", [](Rng& r) { return rand_tensor({2, 2, 5, 6}, r); },
        [&](const Tensor& t) { return quad(crop_spatial(t, 3, 4)); });
    {
        Rng r0 = root.fork(4);
        Tensor m = rand_tensor({4, 3}, r0);
        Tensor x = rand_tensor({2, 3, 4, 5}, r0);
        run("channel_mix/x", [=](Rng& r) { return rand_tensor({2, 3, 4, 5}, r); },
            [=](const Tensor& t) { return quad(channel_mix(t, m)); });
        run("channel_mix/m", [=](Rng& r) { return rand_tensor({4, 3}, r); },
            [=](const Tensor& t) { return quad(channel_mix(x, t)); });
    }
    {
        std::array<bool, 9> mask{true, false, true, true, false, false, false, true, false};
        run("kernel_subset_sum", [](Rng& r) { return rand_tensor({3, 2, 3, 3}, r); },
            [=](const Tensor& t) { return quad(kernel_subset_sum(t, mask)); });
    }
    {
        Rng r0 = root.fork(5);
        Tensor s = rand_tensor({6}, r0);
        Tensor x = rand_tensor({1, 2, 3, 4}, r0);
        run("scale_by_entry/x", [=](Rng& r) { return rand_tensor({1, 2, 3, 4}, r); },
            [=](const Tensor& t) { return quad(scale_by_entry(t, s, 2)); });
        run("scale_by_entry/s", [=](Rng& r) { return rand_tensor({6}, r); },
            [=](const Tensor& t) { return quad(scale_by_entry(x, t, 2)); });
    }

    // elementwise arithmetic
    {
        Rng r0 = root.fork(6);
        Tensor other = rand_tensor({3, 7}, r0);
        std::vector<double> mask = rand_vec(21, r0);
        run("add", [=](Rng& r) { return rand_tensor({3, 7}, r); },
            [=](const Tensor& t) { return quad(add(t, other)); });
        run("sub", [=](Rng& r) { return rand_tensor({3, 7}, r); },
            [=](const Tensor& t) { return quad(sub(other, t)); });
        run("mul", [=](Rng& r) { return rand_tensor({3, 7}, r); },
            [=](const Tensor& t) { return quad(mul(t, other)); });
        run("scale", [=](Rng& r) { return rand_tensor({3, 7}, r); },
            [=](const Tensor& t) { return quad(scale(t, -2.5)); });
        run("mul_mask", [=](Rng& r) { return rand_tensor({3, 7}, r); },
            [=](const Tensor& t) { return quad(mul_mask(t, mask)); });
        run("clamp", [=](Rng& r) { return rand_tensor_away({3, 7}, r, {-0.5, 0.5}); },
            [=](const Tensor& t) { return quad(clamp(t, -0.5, 0.5)); });
        run("sum_all", [=](Rng& r) { return rand_tensor({3, 7}, r); },
            [=](const Tensor& t) { return mul(sum_all(t), sum_all(t)); });
    }

    // losses
    run("entropy_loss", [](Rng& r) { return rand_prob({1, 1, 4, 5}, r); },
        [&](const Tensor& t) { return topotta::entropy_loss(t); });
    {
        Rng r0 = root.fork(7);
        std::vector<double> tv(20);
        for (auto& v : tv) v = r0.bernoulli(0.5) ? 1.0 : 0.0;
        Tensor target = Tensor::from_data({1, 1, 4, 5}, tv);
        run("dice_bce_loss/pred", [](Rng& r) { return rand_prob({1, 1, 4, 5}, r); },
            [=](const Tensor& t) { return dice_bce_loss(t, target); });
    }
    {
        Rng r0 = root.fork(8);
        Tensor teacher = rand_prob({1, 1, 4, 5}, r0);
        std::vector<double> wv(20);
        for (auto& v : wv) v = r0.bernoulli(0.3) ? 10.0 : 1.0;
        Tensor weights = Tensor::from_data({1, 1, 4, 5}, wv);
        run("consistency_loss/student", [](Rng& r) { return rand_prob({1, 1, 4, 5}, r); },
            [=](const Tensor& t) { return weighted_consistency_loss(teacher, t, weights); });
    }

    return out;
}

}  // namespace support
