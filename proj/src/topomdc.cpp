#include "topotta/topomdc.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "topotta/ops.hpp"

namespace topotta {

namespace {

constexpr int kTap(int dy, int dx) { return (dy + 1) * 3 + (dx + 1); }

void require(bool ok, const std::string& msg) {
    if (!ok) throw std::invalid_argument(msg);
}

}  // namespace

const std::array<DirectionSpec, 8>& direction_specs() {
    // Read sets and bridge offsets for the eight connectivity directions,
    // (dy, dx) order. The bridges enumerate exactly the eight non-center taps.
    static const std::array<DirectionSpec, 8> specs = {{
        {{{{-1, -1}, {-1, 0}, {0, -1}}}, {-1, -1}},
        {{{{0, -1}, {-1, -1}, {1, -1}}}, {0, -1}},
        {{{{1, -1}, {0, -1}, {1, 0}}}, {1, -1}},
        {{{{-1, 0}, {-1, -1}, {-1, 1}}}, {-1, 0}},
        {{{{1, 0}, {1, 1}, {1, -1}}}, {1, 0}},
        {{{{-1, 1}, {-1, 0}, {0, 1}}}, {-1, 1}},
        {{{{0, 1}, {1, 1}, {-1, 1}}}, {0, 1}},
        {{{{1, 1}, {0, 1}, {1, 0}}}, {1, 1}},
    }};
    return specs;
}

std::array<bool, 9> direction_read_mask(int d) {
    require(d >= 0 && d < 8, "direction_read_mask: direction must be in [0,8)");
    std::array<bool, 9> m{};
    for (const auto& [dy, dx] : direction_specs()[d].reads) m[kTap(dy, dx)] = true;
    return m;
}

int patch_of(int y, int x, int h, int w, int n) {
    require(n >= 1, "patch_of: grid must be >= 1");
    require(h >= n && w >= n, "patch_of: image " + std::to_string(h) + "x" + std::to_string(w) +
                                  " smaller than " + std::to_string(n) + "x" + std::to_string(n) +
                                  " patch grid");
    const int pr = std::min(n - 1, y / (h / n));
    const int pc = std::min(n - 1, x / (w / n));
    return pr * n + pc;
}

Tensor cdc_central(const Tensor& x, const Tensor& w) {
    std::array<bool, 9> all;
    all.fill(true);
    return channel_mix(x, kernel_subset_sum(w, all));
}

Tensor topomdc_direct(const Tensor& x, const Tensor& w, int d) {
    require(d >= 0 && d < 8, "topomdc_direct: direction must be in [0,8)");
    const DirectionSpec& spec = direction_specs()[d];
    std::array<bool, 9> all;
    all.fill(true);
    Tensor s = kernel_subset_sum(w, all);
    Tensor sd = kernel_subset_sum(w, direction_read_mask(d));
    Tensor center = channel_mix(x, sub(s, sd));
    Tensor bridged = channel_mix(shift2d(x, spec.bridge.first, spec.bridge.second), sd);
    return add(center, bridged);
}

Tensor topomdc_combine_direct(const Tensor& x, const Tensor& w, const Tensor& delta, int n) {
    require(delta.shape() == Shape{n * n, 8},
            "topomdc_combine_direct: delta must be [n*n,8], got " + shape_str(delta.shape()));
    const int N = x.dim(0), H = x.dim(2), W = x.dim(3);
    const int O = w.dim(0);
    require(H >= n && W >= n, "topomdc_combine_direct: image smaller than patch grid");

    Tensor out = conv3x3(x, w);
    for (int d = 0; d < 8; ++d) {
        Tensor cd = topomdc_direct(x, w, d);
        for (int j = 0; j < n * n; ++j) {
            std::vector<double> mask(static_cast<std::size_t>(N) * O * H * W, 0.0);
            for (int y = 0; y < H; ++y)
                for (int xx = 0; xx < W; ++xx)
                    if (patch_of(y, xx, H, W, n) == j)
                        for (int nn = 0; nn < N; ++nn)
                            for (int o = 0; o < O; ++o)
                                mask[((static_cast<std::size_t>(nn) * O + o) * H + y) * W + xx] = 1.0;
            out = sub(out, mul_mask(scale_by_entry(cd, delta, static_cast<std::size_t>(j) * 8 + d), mask));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// fused path

namespace {

struct PatchGrid {
    int n, h, w, bh, bw;
    int r0(int pr) const { return pr * bh; }
    int r1(int pr) const { return pr == n - 1 ? h : (pr + 1) * bh; }
    int c0(int pc) const { return pc * bw; }
    int c1(int pc) const { return pc == n - 1 ? w : (pc + 1) * bw; }
};

// Per-patch effective kernels. For patch j the nine correction terms fold
// into the taps themselves:
//   center tap:   w(0)  - sum_d delta(j,d) * (S - S_d)
//   bridge tap d: w(b_d) - delta(j,d) * S_d
// With delta = 0 this is exactly w, so the wrapped layer starts neutral.
std::vector<double> effective_kernels(const std::vector<double>& w, const std::vector<double>& delta,
                                      int OC, int n) {
    const auto& specs = direction_specs();
    std::array<int, 8> bridge_tap;
    std::array<std::array<bool, 9>, 8> in_read{};
    for (int d = 0; d < 8; ++d) {
        bridge_tap[d] = kTap(specs[d].bridge.first, specs[d].bridge.second);
        for (const auto& [dy, dx] : specs[d].reads) in_read[d][kTap(dy, dx)] = true;
    }
    std::vector<double> weff(static_cast<std::size_t>(n) * n * OC * 9);
    for (int j = 0; j < n * n; ++j) {
        const double* dj = &delta[static_cast<std::size_t>(j) * 8];
        double* wj = &weff[static_cast<std::size_t>(j) * OC * 9];
        for (int oc = 0; oc < OC; ++oc) {
            const double* w9 = &w[static_cast<std::size_t>(oc) * 9];
            double s = 0.0;
            for (int k = 0; k < 9; ++k) s += w9[k];
            double* e9 = &wj[static_cast<std::size_t>(oc) * 9];
            for (int k = 0; k < 9; ++k) e9[k] = w9[k];
            for (int d = 0; d < 8; ++d) {
                double sd = 0.0;
                for (int k = 0; k < 9; ++k)
                    if (in_read[d][k]) sd += w9[k];
                e9[4] -= dj[d] * (s - sd);
                e9[bridge_tap[d]] -= dj[d] * sd;
            }
        }
    }
    return weff;
}

}  // namespace

Tensor topomdc_fused(const Tensor& x, const Tensor& w, const Tensor& delta, int n) {
    require(x.shape().size() == 4, "topomdc_fused: expected NCHW input, got " + shape_str(x.shape()));
    require(w.shape().size() == 4 && w.dim(2) == 3 && w.dim(3) == 3,
            "topomdc_fused: kernel must be [O,C,3,3], got " + shape_str(w.shape()));
    require(n >= 1, "topomdc_fused: patch grid must be >= 1");
    require(delta.shape() == Shape{n * n, 8},
            "topomdc_fused: delta must be [" + std::to_string(n * n) + ",8], got " +
                shape_str(delta.shape()));
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int O = w.dim(0);
    require(w.dim(1) == C, "topomdc_fused: kernel channels " + std::to_string(w.dim(1)) +
                               " vs input channels " + std::to_string(C));
    require(H >= n && W >= n, "topomdc_fused: image " + std::to_string(H) + "x" + std::to_string(W) +
                                  " smaller than " + std::to_string(n) + "x" + std::to_string(n) +
                                  " patch grid");

    const PatchGrid grid{n, H, W, H / n, W / n};
    const int OC = O * C;
    const std::size_t plane = static_cast<std::size_t>(H) * W;
    const std::vector<double> weff = effective_kernels(w.data(), delta.data(), OC, n);

    std::vector<double> out(static_cast<std::size_t>(N) * O * plane, 0.0);
    const double* X = x.data().data();
    for (int nn = 0; nn < N; ++nn)
        for (int o = 0; o < O; ++o) {
            double* op_ = &out[(static_cast<std::size_t>(nn) * O + o) * plane];
            for (int pr = 0; pr < n; ++pr)
                for (int pc = 0; pc < n; ++pc) {
                    const int j = pr * n + pc;
                    const double* wj = &weff[static_cast<std::size_t>(j) * OC * 9];
                    for (int c = 0; c < C; ++c) {
                        const double* xp = &X[(static_cast<std::size_t>(nn) * C + c) * plane];
                        const double* e9 = &wj[(static_cast<std::size_t>(o) * C + c) * 9];
                        for (int k = 0; k < 9; ++k) {
                            const int dy = k / 3 - 1, dx = k % 3 - 1;
                            const double wv = e9[k];
                            // output range: patch rectangle clipped against the
                            // zero-padding bounds; reads stay global so they
                            // cross patch borders
                            const int y0 = std::max(grid.r0(pr), dy > 0 ? dy : 0);
                            const int y1 = std::min(grid.r1(pr), H + (dy < 0 ? dy : 0));
                            const int x0 = std::max(grid.c0(pc), dx > 0 ? dx : 0);
                            const int x1 = std::min(grid.c1(pc), W + (dx < 0 ? dx : 0));
                            for (int y = y0; y < y1; ++y) {
                                double* orow = op_ + static_cast<std::size_t>(y) * W;
                                const double* xrow = xp + static_cast<std::size_t>(y - dy) * W - dx;
                                for (int xx = x0; xx < x1; ++xx) orow[xx] += wv * xrow[xx];
                            }
                        }
                    }
                }
        }

    auto xn = x.node();
    auto wn = w.node();
    auto dn = delta.node();
    auto fn = [xn, wn, dn, N, C, H, W, O, OC, n, grid, plane](TensorNode& self) {
        const double* G = self.grad.data();
        const double* X = xn->value.data();
        const double* Wv = wn->value.data();
        const double* D = dn->value.data();

        const auto& specs = direction_specs();
        std::array<int, 8> bridge_tap;
        std::array<std::array<bool, 9>, 8> in_read{};
        for (int d = 0; d < 8; ++d) {
            bridge_tap[d] = kTap(specs[d].bridge.first, specs[d].bridge.second);
            for (const auto& [dy, dx] : specs[d].reads) in_read[d][kTap(dy, dx)] = true;
        }

        if (xn->requires_grad) {
            const std::vector<double> weff = effective_kernels(wn->value, dn->value, OC, n);
            for (int nn = 0; nn < N; ++nn)
                for (int pr = 0; pr < n; ++pr)
                    for (int pc = 0; pc < n; ++pc) {
                        const int j = pr * n + pc;
                        const double* wj = &weff[static_cast<std::size_t>(j) * OC * 9];
                        for (int c = 0; c < C; ++c) {
                            double* gx = &xn->grad[(static_cast<std::size_t>(nn) * C + c) * plane];
                            for (int o = 0; o < O; ++o) {
                                const double* gp = &G[(static_cast<std::size_t>(nn) * O + o) * plane];
                                const double* e9 = &wj[(static_cast<std::size_t>(o) * C + c) * 9];
                                for (int k = 0; k < 9; ++k) {
                                    const int dy = k / 3 - 1, dx = k % 3 - 1;
                                    const double wv = e9[k];
                                    const int y0 = std::max(grid.r0(pr), dy > 0 ? dy : 0);
                                    const int y1 = std::min(grid.r1(pr), H + (dy < 0 ? dy : 0));
                                    const int x0 = std::max(grid.c0(pc), dx > 0 ? dx : 0);
                                    const int x1 = std::min(grid.c1(pc), W + (dx < 0 ? dx : 0));
                                    for (int y = y0; y < y1; ++y) {
                                        double* gxrow = gx + static_cast<std::size_t>(y - dy) * W - dx;
                                        const double* grow = gp + static_cast<std::size_t>(y) * W;
                                        for (int xx = x0; xx < x1; ++xx) gxrow[xx] += wv * grow[xx];
                                    }
                                }
                            }
                        }
                    }
        }

        if (wn->requires_grad || dn->requires_grad) {
            // Per-patch correlation sums: gsum(j,o,c,k) = sum over the patch of
            // grad(r) * x(r - off_k); both the kernel and delta gradients are
            // linear contractions of these.
            std::vector<double> gsum(static_cast<std::size_t>(n) * n * OC * 9, 0.0);
            for (int nn = 0; nn < N; ++nn)
                for (int pr = 0; pr < n; ++pr)
                    for (int pc = 0; pc < n; ++pc) {
                        const int j = pr * n + pc;
                        double* gj = &gsum[static_cast<std::size_t>(j) * OC * 9];
                        for (int o = 0; o < O; ++o) {
                            const double* gp = &G[(static_cast<std::size_t>(nn) * O + o) * plane];
                            for (int c = 0; c < C; ++c) {
                                const double* xp = &X[(static_cast<std::size_t>(nn) * C + c) * plane];
                                double* g9 = &gj[(static_cast<std::size_t>(o) * C + c) * 9];
                                for (int k = 0; k < 9; ++k) {
                                    const int dy = k / 3 - 1, dx = k % 3 - 1;
                                    const int y0 = std::max(grid.r0(pr), dy > 0 ? dy : 0);
                                    const int y1 = std::min(grid.r1(pr), H + (dy < 0 ? dy : 0));
                                    const int x0 = std::max(grid.c0(pc), dx > 0 ? dx : 0);
                                    const int x1 = std::min(grid.c1(pc), W + (dx < 0 ? dx : 0));
                                    double a0 = 0, a1 = 0, a2 = 0, a3 = 0;
                                    for (int y = y0; y < y1; ++y) {
                                        const double* grow = gp + static_cast<std::size_t>(y) * W;
                                        const double* xrow = xp + static_cast<std::size_t>(y - dy) * W - dx;
                                        int xx = x0;
                                        for (; xx + 4 <= x1; xx += 4) {
                                            a0 += grow[xx] * xrow[xx];
                                            a1 += grow[xx + 1] * xrow[xx + 1];
                                            a2 += grow[xx + 2] * xrow[xx + 2];
                                            a3 += grow[xx + 3] * xrow[xx + 3];
                                        }
                                        for (; xx < x1; ++xx) a0 += grow[xx] * xrow[xx];
                                    }
                                    g9[k] += ((a0 + a1) + (a2 + a3));
                                }
                            }
                        }
                    }

            if (dn->requires_grad) {
                // d out / d delta(j,d) = -C_d(x) on patch j, so
                // g_delta(j,d) = -sum_oc [(S - S_d) * gsum(center) + S_d * gsum(b_d)]
                for (int j = 0; j < n * n; ++j) {
                    const double* gj = &gsum[static_cast<std::size_t>(j) * OC * 9];
                    for (int d = 0; d < 8; ++d) {
                        double acc = 0.0;
                        for (int oc = 0; oc < OC; ++oc) {
                            const double* w9 = &Wv[static_cast<std::size_t>(oc) * 9];
                            double s = 0.0, sd = 0.0;
                            for (int k = 0; k < 9; ++k) {
                                s += w9[k];
                                if (in_read[d][k]) sd += w9[k];
                            }
                            const double* g9 = &gj[static_cast<std::size_t>(oc) * 9];
                            acc += (s - sd) * g9[4] + sd * g9[bridge_tap[d]];
                        }
                        dn->grad[static_cast<std::size_t>(j) * 8 + d] -= acc;
                    }
                }
            }

            if (wn->requires_grad) {
                // Direct conv part plus the dependence of S and S_d on w:
                // tap k in R_d contributes via S_d at the bridge, otherwise via
                // (S - S_d) at the center.
                for (int oc = 0; oc < OC; ++oc) {
                    double* gw9 = &wn->grad[static_cast<std::size_t>(oc) * 9];
                    for (int j = 0; j < n * n; ++j) {
                        const double* g9 = &gsum[(static_cast<std::size_t>(j) * OC + oc) * 9];
                        const double* dj = &D[static_cast<std::size_t>(j) * 8];
                        for (int k = 0; k < 9; ++k) {
                            double v = g9[k];
                            for (int d = 0; d < 8; ++d)
                                v -= dj[d] * (in_read[d][k] ? g9[bridge_tap[d]] : g9[4]);
                            gw9[k] += v;
                        }
                    }
                }
            }
        }
    };

    // make_node lives in ops.cpp; assemble the node manually here.
    auto node = std::make_shared<TensorNode>();
    node->op = "topomdc_fused";
    node->shape = Shape{N, O, H, W};
    node->value = std::move(out);
    node->parents = {x.node(), w.node(), delta.node()};
    node->requires_grad = x.requires_grad() || w.requires_grad() || delta.requires_grad();
    if (node->requires_grad) node->backward_fn = std::move(fn);
    for (double v : node->value)
        if (!std::isfinite(v)) throw std::runtime_error("non-finite value out of op 'topomdc_fused'");
    return Tensor::wrap(std::move(node));
}

// ---------------------------------------------------------------------------
// router params

std::size_t RouterParams::count() const {
    std::size_t total = 0;
    for (const auto& t : delta) total += t.numel();
    return total;
}

void RouterParams::reset_zero() {
    for (auto& t : delta) {
        auto& v = t.raw();
        std::fill(v.begin(), v.end(), 0.0);
        t.zero_grad();
    }
}

void RouterParams::set_requires_grad(bool rg) {
    for (auto& t : delta) t.set_requires_grad(rg);
}

}  // namespace topotta
