#include "topotta/ops.hpp"

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <utility>

namespace topotta {

namespace {

void check_finite(const char* op, const std::vector<double>& v) {
    for (double e : v)
        if (!std::isfinite(e))
            throw std::runtime_error(std::string("non-finite value out of op '") + op + "'");
}

using NodePtr = std::shared_ptr<TensorNode>;

Tensor make_node(const char* op, Shape shape, std::vector<double> value,
                 std::vector<NodePtr> parents, std::function<void(TensorNode&)> fn) {
    auto n = std::make_shared<TensorNode>();
    n->op = op;
    n->shape = std::move(shape);
    n->value = std::move(value);
    n->parents = std::move(parents);
    for (const auto& p : n->parents)
        if (p->requires_grad) { n->requires_grad = true; break; }
    if (n->requires_grad) n->backward_fn = std::move(fn);
    check_finite(op, n->value);
    return Tensor::wrap(std::move(n));
}

void require(bool ok, const std::string& msg) {
    if (!ok) throw std::invalid_argument(msg);
}

void require_4d(const Tensor& x, const char* op) {
    require(x.shape().size() == 4, std::string(op) + ": expected NCHW tensor, got " + shape_str(x.shape()));
}

void require_const(const Tensor& t, const char* op, const char* what) {
    if (t.requires_grad())
        throw std::invalid_argument(std::string(op) + ": " + what + " must not require grad");
}

// Strict-interior rule shared by clamp and the clamped-log losses: an entry
// sitting on or beyond a bound passes no gradient.
inline bool interior(double v, double lo, double hi) { return v > lo && v < hi; }

}  // namespace

// ---------------------------------------------------------------------------
// convolution family

static Tensor conv3x3_impl(const Tensor& x, const Tensor& w, const Tensor* bias) {
    require_4d(x, "conv3x3");
    require(w.shape().size() == 4 && w.dim(2) == 3 && w.dim(3) == 3,
            "conv3x3: kernel must be [O,C,3,3], got " + shape_str(w.shape()));
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int O = w.dim(0);
    require(w.dim(1) == C, "conv3x3: kernel channels " + std::to_string(w.dim(1)) +
                               " vs input channels " + std::to_string(C));
    if (bias) require(bias->shape() == Shape{O}, "conv3x3: bias must be [O]");

    const std::size_t plane = static_cast<std::size_t>(H) * W;
    std::vector<double> out(static_cast<std::size_t>(N) * O * plane, 0.0);
    const double* X = x.data().data();
    const double* K = w.data().data();
    const double* B = bias ? bias->data().data() : nullptr;

    for (int n = 0; n < N; ++n)
        for (int o = 0; o < O; ++o) {
            double* op_ = &out[(static_cast<std::size_t>(n) * O + o) * plane];
            if (B) {
                const double bv = B[o];
                for (std::size_t i = 0; i < plane; ++i) op_[i] = bv;
            }
            for (int c = 0; c < C; ++c) {
                const double* xp = &X[(static_cast<std::size_t>(n) * C + c) * plane];
                const double* k9 = &K[(static_cast<std::size_t>(o) * C + c) * 9];
                for (int k = 0; k < 9; ++k) {
                    const int dy = k / 3 - 1, dx = k % 3 - 1;
                    const double wv = k9[k];
                    const int y0 = dy > 0 ? dy : 0, y1 = H + (dy < 0 ? dy : 0);
                    const int x0 = dx > 0 ? dx : 0, x1 = W + (dx < 0 ? dx : 0);
                    for (int y = y0; y < y1; ++y) {
                        double* orow = op_ + static_cast<std::size_t>(y) * W;
                        const double* xrow = xp + static_cast<std::size_t>(y - dy) * W - dx;
                        for (int xx = x0; xx < x1; ++xx) orow[xx] += wv * xrow[xx];
                    }
                }
            }
        }

    std::vector<NodePtr> parents{x.node(), w.node()};
    if (bias) parents.push_back(bias->node());
    NodePtr xn = x.node(), wn = w.node(), bn = bias ? bias->node() : nullptr;

    auto fn = [xn, wn, bn, N, C, H, W, O, plane](TensorNode& self) {
        const double* G = self.grad.data();
        const double* X = xn->value.data();
        const double* K = wn->value.data();
        if (xn->requires_grad) {
            double* GX = xn->grad.data();
            // x(q) feeds out(q + off) with weight w(off)
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c) {
                    double* gxp = &GX[(static_cast<std::size_t>(n) * C + c) * plane];
                    for (int o = 0; o < O; ++o) {
                        const double* gp = &G[(static_cast<std::size_t>(n) * O + o) * plane];
                        const double* k9 = &K[(static_cast<std::size_t>(o) * C + c) * 9];
                        for (int k = 0; k < 9; ++k) {
                            const int dy = k / 3 - 1, dx = k % 3 - 1;
                            const double wv = k9[k];
                            const int y0 = dy < 0 ? -dy : 0, y1 = H - (dy > 0 ? dy : 0);
                            const int x0 = dx < 0 ? -dx : 0, x1 = W - (dx > 0 ? dx : 0);
                            for (int y = y0; y < y1; ++y) {
                                double* grow = gxp + static_cast<std::size_t>(y) * W;
                                const double* gout = gp + static_cast<std::size_t>(y + dy) * W + dx;
                                for (int xx = x0; xx < x1; ++xx) grow[xx] += wv * gout[xx];
                            }
                        }
                    }
                }
        }
        if (wn->requires_grad) {
            double* GW = wn->grad.data();
            for (int n = 0; n < N; ++n)
                for (int o = 0; o < O; ++o) {
                    const double* gp = &G[(static_cast<std::size_t>(n) * O + o) * plane];
                    for (int c = 0; c < C; ++c) {
                        const double* xp = &X[(static_cast<std::size_t>(n) * C + c) * plane];
                        double* gk = &GW[(static_cast<std::size_t>(o) * C + c) * 9];
                        // one pass per kernel row: the three horizontal taps
                        // share the same grad/input rows, so compute their dot
                        // products together. Unrolled into independent lanes in
                        // a fixed order (deterministic, vectorizable).
                        for (int dy = -1; dy <= 1; ++dy) {
                            const int y0 = dy > 0 ? dy : 0, y1 = H + (dy < 0 ? dy : 0);
                            double m0 = 0, m1 = 0, m2 = 0, m3 = 0;  // dx = -1
                            double c0 = 0, c1 = 0, c2 = 0, c3 = 0;  // dx = 0
                            double p0 = 0, p1 = 0, p2 = 0, p3 = 0;  // dx = +1
                            if (W == 1) {
                                for (int y = y0; y < y1; ++y)
                                    c0 += gp[static_cast<std::size_t>(y)] * xp[static_cast<std::size_t>(y - dy)];
                                gk[(dy + 1) * 3 + 1] += c0;
                                continue;
                            }
                            for (int y = y0; y < y1; ++y) {
                                const double* grow = gp + static_cast<std::size_t>(y) * W;
                                const double* xr = xp + static_cast<std::size_t>(y - dy) * W;
                                c0 += grow[0] * xr[0];
                                m0 += grow[0] * xr[1];
                                int xx = 1;
                                for (; xx + 4 <= W - 1; xx += 4) {
                                    p0 += grow[xx] * xr[xx - 1];
                                    c0 += grow[xx] * xr[xx];
                                    m0 += grow[xx] * xr[xx + 1];
                                    p1 += grow[xx + 1] * xr[xx];
                                    c1 += grow[xx + 1] * xr[xx + 1];
                                    m1 += grow[xx + 1] * xr[xx + 2];
                                    p2 += grow[xx + 2] * xr[xx + 1];
                                    c2 += grow[xx + 2] * xr[xx + 2];
                                    m2 += grow[xx + 2] * xr[xx + 3];
                                    p3 += grow[xx + 3] * xr[xx + 2];
                                    c3 += grow[xx + 3] * xr[xx + 3];
                                    m3 += grow[xx + 3] * xr[xx + 4];
                                }
                                for (; xx < W - 1; ++xx) {
                                    p0 += grow[xx] * xr[xx - 1];
                                    c0 += grow[xx] * xr[xx];
                                    m0 += grow[xx] * xr[xx + 1];
                                }
                                p0 += grow[W - 1] * xr[W - 2];
                                c0 += grow[W - 1] * xr[W - 1];
                            }
                            double* row = gk + (dy + 1) * 3;
                            row[0] += ((m0 + m1) + (m2 + m3));
                            row[1] += ((c0 + c1) + (c2 + c3));
                            row[2] += ((p0 + p1) + (p2 + p3));
                        }
                    }
                }
        }
        if (bn && bn->requires_grad) {
            double* GB = bn->grad.data();
            for (int n = 0; n < N; ++n)
                for (int o = 0; o < O; ++o) {
                    const double* gp = &G[(static_cast<std::size_t>(n) * O + o) * plane];
                    double acc = 0.0;
                    for (std::size_t i = 0; i < plane; ++i) acc += gp[i];
                    GB[o] += acc;
                }
        }
    };
    return make_node("conv3x3", Shape{N, O, H, W}, std::move(out), std::move(parents), std::move(fn));
}

Tensor conv3x3(const Tensor& x, const Tensor& w) { return conv3x3_impl(x, w, nullptr); }
Tensor conv3x3(const Tensor& x, const Tensor& w, const Tensor& bias) { return conv3x3_impl(x, w, &bias); }

static Tensor conv1x1_impl(const Tensor& x, const Tensor& w, const Tensor* bias) {
    require_4d(x, "conv1x1");
    require(w.shape().size() == 4 && w.dim(2) == 1 && w.dim(3) == 1,
            "conv1x1: kernel must be [O,C,1,1], got " + shape_str(w.shape()));
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int O = w.dim(0);
    require(w.dim(1) == C, "conv1x1: channel mismatch");
    if (bias) require(bias->shape() == Shape{O}, "conv1x1: bias must be [O]");

    const std::size_t plane = static_cast<std::size_t>(H) * W;
    std::vector<double> out(static_cast<std::size_t>(N) * O * plane, 0.0);
    const double* X = x.data().data();
    const double* M = w.data().data();
    const double* B = bias ? bias->data().data() : nullptr;
    for (int n = 0; n < N; ++n)
        for (int o = 0; o < O; ++o) {
            double* op_ = &out[(static_cast<std::size_t>(n) * O + o) * plane];
            if (B) {
                const double bv = B[o];
                for (std::size_t i = 0; i < plane; ++i) op_[i] = bv;
            }
            for (int c = 0; c < C; ++c) {
                const double mv = M[static_cast<std::size_t>(o) * C + c];
                const double* xp = &X[(static_cast<std::size_t>(n) * C + c) * plane];
                for (std::size_t i = 0; i < plane; ++i) op_[i] += mv * xp[i];
            }
        }

    std::vector<NodePtr> parents{x.node(), w.node()};
    if (bias) parents.push_back(bias->node());
    NodePtr xn = x.node(), wn = w.node(), bn = bias ? bias->node() : nullptr;
    auto fn = [xn, wn, bn, N, C, O, plane](TensorNode& self) {
        const double* G = self.grad.data();
        const double* X = xn->value.data();
        const double* M = wn->value.data();
        for (int n = 0; n < N; ++n)
            for (int o = 0; o < O; ++o) {
                const double* gp = &G[(static_cast<std::size_t>(n) * O + o) * plane];
                for (int c = 0; c < C; ++c) {
                    const std::size_t xoff = (static_cast<std::size_t>(n) * C + c) * plane;
                    if (xn->requires_grad) {
                        const double mv = M[static_cast<std::size_t>(o) * C + c];
                        double* gx = &xn->grad[xoff];
                        for (std::size_t i = 0; i < plane; ++i) gx[i] += mv * gp[i];
                    }
                    if (wn->requires_grad) {
                        const double* xp = &X[xoff];
                        double acc = 0.0;
                        for (std::size_t i = 0; i < plane; ++i) acc += gp[i] * xp[i];
                        wn->grad[static_cast<std::size_t>(o) * C + c] += acc;
                    }
                }
                if (bn && bn->requires_grad) {
                    double acc = 0.0;
                    for (std::size_t i = 0; i < plane; ++i) acc += gp[i];
                    bn->grad[o] += acc;
                }
            }
    };
    return make_node("conv1x1", Shape{N, O, H, W}, std::move(out), std::move(parents), std::move(fn));
}

Tensor conv1x1(const Tensor& x, const Tensor& w) { return conv1x1_impl(x, w, nullptr); }
Tensor conv1x1(const Tensor& x, const Tensor& w, const Tensor& bias) { return conv1x1_impl(x, w, &bias); }

// ---------------------------------------------------------------------------
// pointwise

Tensor relu(const Tensor& x) {
    std::vector<double> out(x.numel());
    const auto& v = x.data();
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] > 0.0 ? v[i] : 0.0;
    NodePtr xn = x.node();
    auto fn = [xn](TensorNode& self) {
        if (!xn->requires_grad) return;
        const double* v = xn->value.data();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
            if (v[i] > 0.0) xn->grad[i] += self.grad[i];
    };
    return make_node("relu", x.shape(), std::move(out), {x.node()}, std::move(fn));
}

Tensor sigmoid(const Tensor& x) {
    std::vector<double> out(x.numel());
    const auto& v = x.data();
    for (std::size_t i = 0; i < v.size(); ++i) {
        const double t = v[i];
        if (t >= 0.0) {
            out[i] = 1.0 / (1.0 + std::exp(-t));
        } else {
            const double e = std::exp(t);
            out[i] = e / (1.0 + e);
        }
    }
    NodePtr xn = x.node();
    auto fn = [xn](TensorNode& self) {
        if (!xn->requires_grad) return;
        const double* s = self.value.data();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
            xn->grad[i] += self.grad[i] * s[i] * (1.0 - s[i]);
    };
    return make_node("sigmoid", x.shape(), std::move(out), {x.node()}, std::move(fn));
}

Tensor batchnorm_inference(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                           const std::vector<double>& mean, const std::vector<double>& var,
                           double eps) {
    require_4d(x, "batchnorm_inference");
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    require(gamma.shape() == Shape{C} && beta.shape() == Shape{C},
            "batchnorm_inference: gamma/beta must be [C]");
    require(static_cast<int>(mean.size()) == C && static_cast<int>(var.size()) == C,
            "batchnorm_inference: stats must have C entries");
    if (eps <= 0.0) throw std::invalid_argument("batchnorm_inference: eps must be > 0");
    std::vector<double> inv(C);
    for (int c = 0; c < C; ++c) {
        if (!std::isfinite(var[c]) || var[c] < 0.0 || !std::isfinite(mean[c]))
            throw std::runtime_error("batchnorm_inference: invalid running statistics");
        inv[c] = 1.0 / std::sqrt(var[c] + eps);
    }

    const std::size_t plane = static_cast<std::size_t>(H) * W;
    std::vector<double> out(x.numel());
    const double* X = x.data().data();
    const double* Ga = gamma.data().data();
    const double* Be = beta.data().data();
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const double a = Ga[c] * inv[c];
            const double b = Be[c] - Ga[c] * inv[c] * mean[c];
            const std::size_t off = (static_cast<std::size_t>(n) * C + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) out[off + i] = a * X[off + i] + b;
        }

    NodePtr xn = x.node(), gn = gamma.node(), bn = beta.node();
    auto fn = [xn, gn, bn, inv, mean, N, C, plane](TensorNode& self) {
        const double* G = self.grad.data();
        const double* X = xn->value.data();
        const double* Ga = gn->value.data();
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                const std::size_t off = (static_cast<std::size_t>(n) * C + c) * plane;
                if (xn->requires_grad) {
                    const double a = Ga[c] * inv[c];
                    for (std::size_t i = 0; i < plane; ++i) xn->grad[off + i] += a * G[off + i];
                }
                if (gn->requires_grad) {
                    double acc = 0.0;
                    for (std::size_t i = 0; i < plane; ++i)
                        acc += G[off + i] * (X[off + i] - mean[c]) * inv[c];
                    gn->grad[c] += acc;
                }
                if (bn->requires_grad) {
                    double acc = 0.0;
                    for (std::size_t i = 0; i < plane; ++i) acc += G[off + i];
                    bn->grad[c] += acc;
                }
            }
    };
    return make_node("batchnorm_inference", x.shape(), std::move(out),
                     {x.node(), gamma.node(), beta.node()}, std::move(fn));
}

Tensor maxpool2x2(const Tensor& x) {
    require_4d(x, "maxpool2x2");
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    require(H % 2 == 0 && W % 2 == 0, "maxpool2x2: H and W must be even, got " + shape_str(x.shape()));
    const int Ho = H / 2, Wo = W / 2;
    const std::size_t plane = static_cast<std::size_t>(H) * W;
    const std::size_t oplane = static_cast<std::size_t>(Ho) * Wo;
    std::vector<double> out(static_cast<std::size_t>(N) * C * oplane);
    std::vector<int> argmax(out.size());  // flat offset within the input plane
    const double* X = x.data().data();
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const double* xp = &X[(static_cast<std::size_t>(n) * C + c) * plane];
            const std::size_t obase = (static_cast<std::size_t>(n) * C + c) * oplane;
            for (int y = 0; y < Ho; ++y)
                for (int xx = 0; xx < Wo; ++xx) {
                    // scan order fixed; ties keep the earliest hit
                    int best = (2 * y) * W + 2 * xx;
                    double bv = xp[best];
                    const int cand[3] = {(2 * y) * W + 2 * xx + 1, (2 * y + 1) * W + 2 * xx,
                                         (2 * y + 1) * W + 2 * xx + 1};
                    for (int idx : cand)
                        if (xp[idx] > bv) { bv = xp[idx]; best = idx; }
                    out[obase + static_cast<std::size_t>(y) * Wo + xx] = bv;
                    argmax[obase + static_cast<std::size_t>(y) * Wo + xx] = best;
                }
        }
    NodePtr xn = x.node();
    auto fn = [xn, argmax, N, C, plane, oplane](TensorNode& self) {
        if (!xn->requires_grad) return;
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                const std::size_t obase = (static_cast<std::size_t>(n) * C + c) * oplane;
                const std::size_t ibase = (static_cast<std::size_t>(n) * C + c) * plane;
                for (std::size_t i = 0; i < oplane; ++i)
                    xn->grad[ibase + argmax[obase + i]] += self.grad[obase + i];
            }
    };
    return make_node("maxpool2x2", Shape{N, C, Ho, Wo}, std::move(out), {x.node()}, std::move(fn));
}

// ---------------------------------------------------------------------------
// resampling and layout

namespace {
struct Taps {
    std::vector<int> i0, i1;
    std::vector<double> f;  // weight of i1
};

// Half-pixel source coordinates, edge-clamped.
Taps make_taps(int in, int out) {
    Taps t;
    t.i0.resize(out);
    t.i1.resize(out);
    t.f.resize(out);
    const double r = static_cast<double>(in) / out;
    for (int o = 0; o < out; ++o) {
        double s = (o + 0.5) * r - 0.5;
        if (s <= 0.0) {
            t.i0[o] = t.i1[o] = 0;
            t.f[o] = 0.0;
        } else if (s >= in - 1) {
            t.i0[o] = t.i1[o] = in - 1;
            t.f[o] = 0.0;
        } else {
            const int lo = static_cast<int>(s);
            t.i0[o] = lo;
            t.i1[o] = lo + 1;
            t.f[o] = s - lo;
        }
    }
    return t;
}
}  // namespace

Tensor resize_bilinear(const Tensor& x, int out_h, int out_w) {
    require_4d(x, "resize_bilinear");
    require(out_h > 0 && out_w > 0, "resize_bilinear: output dims must be positive");
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const Taps ty = make_taps(H, out_h), tx = make_taps(W, out_w);
    const std::size_t plane = static_cast<std::size_t>(H) * W;
    const std::size_t oplane = static_cast<std::size_t>(out_h) * out_w;
    std::vector<double> out(static_cast<std::size_t>(N) * C * oplane);
    const double* X = x.data().data();
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const double* xp = &X[(static_cast<std::size_t>(n) * C + c) * plane];
            double* op_ = &out[(static_cast<std::size_t>(n) * C + c) * oplane];
            for (int y = 0; y < out_h; ++y) {
                const double* r0 = xp + static_cast<std::size_t>(ty.i0[y]) * W;
                const double* r1 = xp + static_cast<std::size_t>(ty.i1[y]) * W;
                const double fy = ty.f[y];
                for (int xx = 0; xx < out_w; ++xx) {
                    const double fx = tx.f[xx];
                    const double a = r0[tx.i0[xx]] * (1 - fx) + r0[tx.i1[xx]] * fx;
                    const double b = r1[tx.i0[xx]] * (1 - fx) + r1[tx.i1[xx]] * fx;
                    op_[static_cast<std::size_t>(y) * out_w + xx] = a * (1 - fy) + b * fy;
                }
            }
        }
    NodePtr xn = x.node();
    auto fn = [xn, ty, tx, N, C, W, out_h, out_w, plane, oplane](TensorNode& self) {
        if (!xn->requires_grad) return;
        const double* G = self.grad.data();
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                double* gx = &xn->grad[(static_cast<std::size_t>(n) * C + c) * plane];
                const double* gp = &G[(static_cast<std::size_t>(n) * C + c) * oplane];
                for (int y = 0; y < out_h; ++y) {
                    const double fy = ty.f[y];
                    double* r0 = gx + static_cast<std::size_t>(ty.i0[y]) * W;
                    double* r1 = gx + static_cast<std::size_t>(ty.i1[y]) * W;
                    for (int xx = 0; xx < out_w; ++xx) {
                        const double fx = tx.f[xx];
                        const double g = gp[static_cast<std::size_t>(y) * out_w + xx];
                        r0[tx.i0[xx]] += g * (1 - fy) * (1 - fx);
                        r0[tx.i1[xx]] += g * (1 - fy) * fx;
                        r1[tx.i0[xx]] += g * fy * (1 - fx);
                        r1[tx.i1[xx]] += g * fy * fx;
                    }
                }
            }
    };
    return make_node("resize_bilinear", Shape{N, C, out_h, out_w}, std::move(out), {x.node()}, std::move(fn));
}

Tensor upsample_bilinear(const Tensor& x, int factor) {
    require_4d(x, "upsample_bilinear");
    require(factor >= 1, "upsample_bilinear: factor must be >= 1");
    return resize_bilinear(x, x.dim(2) * factor, x.dim(3) * factor);
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
    require_4d(a, "concat_channels");
    require_4d(b, "concat_channels");
    require(a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2) && a.dim(3) == b.dim(3),
            "concat_channels: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const int N = a.dim(0), Ca = a.dim(1), Cb = b.dim(1), H = a.dim(2), W = a.dim(3);
    const std::size_t plane = static_cast<std::size_t>(H) * W;
    std::vector<double> out(static_cast<std::size_t>(N) * (Ca + Cb) * plane);
    const double* A = a.data().data();
    const double* B = b.data().data();
    for (int n = 0; n < N; ++n) {
        std::copy(A + static_cast<std::size_t>(n) * Ca * plane,
                  A + static_cast<std::size_t>(n + 1) * Ca * plane,
                  out.begin() + static_cast<std::size_t>(n) * (Ca + Cb) * plane);
        std::copy(B + static_cast<std::size_t>(n) * Cb * plane,
                  B + static_cast<std::size_t>(n + 1) * Cb * plane,
                  out.begin() + (static_cast<std::size_t>(n) * (Ca + Cb) + Ca) * plane);
    }
    NodePtr an = a.node(), bn = b.node();
    auto fn = [an, bn, N, Ca, Cb, plane](TensorNode& self) {
        for (int n = 0; n < N; ++n) {
            const std::size_t base = static_cast<std::size_t>(n) * (Ca + Cb) * plane;
            if (an->requires_grad)
                for (std::size_t i = 0; i < static_cast<std::size_t>(Ca) * plane; ++i)
                    an->grad[static_cast<std::size_t>(n) * Ca * plane + i] += self.grad[base + i];
            if (bn->requires_grad)
                for (std::size_t i = 0; i < static_cast<std::size_t>(Cb) * plane; ++i)
                    bn->grad[static_cast<std::size_t>(n) * Cb * plane + i] +=
                        self.grad[base + static_cast<std::size_t>(Ca) * plane + i];
        }
    };
    return make_node("concat_channels", Shape{N, Ca + Cb, H, W}, std::move(out),
                     {a.node(), b.node()}, std::move(fn));
}

static Tensor flip_impl(const Tensor& x, bool horizontal, const char* name) {
    require_4d(x, name);
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::size_t plane = static_cast<std::size_t>(H) * W;
    std::vector<double> out(x.numel());
    const double* X = x.data().data();
    for (std::size_t p = 0; p < static_cast<std::size_t>(N) * C; ++p)
        for (int y = 0; y < H; ++y)
            for (int xx = 0; xx < W; ++xx) {
                const int sy = horizontal ? y : H - 1 - y;
                const int sx = horizontal ? W - 1 - xx : xx;
                out[p * plane + static_cast<std::size_t>(y) * W + xx] =
                    X[p * plane + static_cast<std::size_t>(sy) * W + sx];
            }
    NodePtr xn = x.node();
    auto fn = [xn, horizontal, N, C, H, W, plane](TensorNode& self) {
        if (!xn->requires_grad) return;
        for (std::size_t p = 0; p < static_cast<std::size_t>(N) * C; ++p)
            for (int y = 0; y < H; ++y)
                for (int xx = 0; xx < W; ++xx) {
                    const int sy = horizontal ? y : H - 1 - y;
                    const int sx = horizontal ? W - 1 - xx : xx;
                    xn->grad[p * plane + static_cast<std::size_t>(sy) * W + sx] +=
                        self.grad[p * plane + static_cast<std::size_t>(y) * W + xx];
                }
    };
    return make_node(name, x.shape(), std::move(out), {x.node()}, std::move(fn));
}

Tensor flip_h(const Tensor& x) { return flip_impl(x, true, "flip_h"); }
Tensor flip_v(const Tensor& x) { return flip_impl(x, false, "flip_v"); }

Tensor crop_spatial(const Tensor& x, int out_h, int out_w) {
    require_4d(x, "crop_spatial");
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    require(out_h >= 1 && out_h <= H && out_w >= 1 && out_w <= W,
            "crop_spatial: output must fit inside the input");
    const std::size_t in_plane = static_cast<std::size_t>(H) * W;
    const std::size_t out_plane = static_cast<std::size_t>(out_h) * out_w;
    std::vector<double> out(static_cast<std::size_t>(N) * C * out_plane);
    const double* X = x.data().data();
    for (std::size_t p = 0; p < static_cast<std::size_t>(N) * C; ++p)
        for (int y = 0; y < out_h; ++y)
            for (int xx = 0; xx < out_w; ++xx)
                out[p * out_plane + static_cast<std::size_t>(y) * out_w + xx] =
                    X[p * in_plane + static_cast<std::size_t>(y) * W + xx];
    NodePtr xn = x.node();
    auto fn = [xn, N, C, W, out_h, out_w, in_plane, out_plane](TensorNode& self) {
        if (!xn->requires_grad) return;
        for (std::size_t p = 0; p < static_cast<std::size_t>(N) * C; ++p)
            for (int y = 0; y < out_h; ++y)
                for (int xx = 0; xx < out_w; ++xx)
                    xn->grad[p * in_plane + static_cast<std::size_t>(y) * W + xx] +=
                        self.grad[p * out_plane + static_cast<std::size_t>(y) * out_w + xx];
    };
    return make_node("crop_spatial", Shape{N, C, out_h, out_w}, std::move(out), {x.node()},
                     std::move(fn));
}

Tensor shift2d(const Tensor& x, int dy, int dx) {
    require_4d(x, "shift2d");
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::size_t plane = static_cast<std::size_t>(H) * W;
    std::vector<double> out(x.numel(), 0.0);
    const double* X = x.data().data();
    for (std::size_t p = 0; p < static_cast<std::size_t>(N) * C; ++p)
        for (int y = 0; y < H; ++y) {
            const int sy = y - dy;
            if (sy < 0 || sy >= H) continue;
            for (int xx = 0; xx < W; ++xx) {
                const int sx = xx - dx;
                if (sx < 0 || sx >= W) continue;
                out[p * plane + static_cast<std::size_t>(y) * W + xx] =
                    X[p * plane + static_cast<std::size_t>(sy) * W + sx];
            }
        }
    NodePtr xn = x.node();
    auto fn = [xn, dy, dx, N, C, H, W, plane](TensorNode& self) {
        if (!xn->requires_grad) return;
        for (std::size_t p = 0; p < static_cast<std::size_t>(N) * C; ++p)
            for (int y = 0; y < H; ++y) {
                const int sy = y - dy;
                if (sy < 0 || sy >= H) continue;
                for (int xx = 0; xx < W; ++xx) {
                    const int sx = xx - dx;
                    if (sx < 0 || sx >= W) continue;
                    xn->grad[p * plane + static_cast<std::size_t>(sy) * W + sx] +=
                        self.grad[p * plane + static_cast<std::size_t>(y) * W + xx];
                }
            }
    };
    return make_node("shift2d", x.shape(), std::move(out), {x.node()}, std::move(fn));
}

Tensor channel_mix(const Tensor& x, const Tensor& m) {
    require_4d(x, "channel_mix");
    require(m.shape().size() == 2, "channel_mix: mixing matrix must be [O,C]");
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int O = m.dim(0);
    require(m.dim(1) == C, "channel_mix: matrix columns " + std::to_string(m.dim(1)) +
                               " vs input channels " + std::to_string(C));
    const std::size_t plane = static_cast<std::size_t>(H) * W;
    std::vector<double> out(static_cast<std::size_t>(N) * O * plane, 0.0);
    const double* X = x.data().data();
    const double* M = m.data().data();
    for (int n = 0; n < N; ++n)
        for (int o = 0; o < O; ++o) {
            double* op_ = &out[(static_cast<std::size_t>(n) * O + o) * plane];
            for (int c = 0; c < C; ++c) {
                const double mv = M[static_cast<std::size_t>(o) * C + c];
                const double* xp = &X[(static_cast<std::size_t>(n) * C + c) * plane];
                for (std::size_t i = 0; i < plane; ++i) op_[i] += mv * xp[i];
            }
        }
    NodePtr xn = x.node(), mn = m.node();
    auto fn = [xn, mn, N, C, O, plane](TensorNode& self) {
        const double* G = self.grad.data();
        const double* X = xn->value.data();
        const double* M = mn->value.data();
        for (int n = 0; n < N; ++n)
            for (int o = 0; o < O; ++o) {
                const double* gp = &G[(static_cast<std::size_t>(n) * O + o) * plane];
                for (int c = 0; c < C; ++c) {
                    const std::size_t xoff = (static_cast<std::size_t>(n) * C + c) * plane;
                    if (xn->requires_grad) {
                        const double mv = M[static_cast<std::size_t>(o) * C + c];
                        for (std::size_t i = 0; i < plane; ++i) xn->grad[xoff + i] += mv * gp[i];
                    }
                    if (mn->requires_grad) {
                        double acc = 0.0;
                        const double* xp = &X[xoff];
                        for (std::size_t i = 0; i < plane; ++i) acc += gp[i] * xp[i];
                        mn->grad[static_cast<std::size_t>(o) * C + c] += acc;
                    }
                }
            }
    };
    return make_node("channel_mix", Shape{N, O, H, W}, std::move(out), {x.node(), m.node()}, std::move(fn));
}

Tensor kernel_subset_sum(const Tensor& w, const std::array<bool, 9>& mask) {
    require(w.shape().size() == 4 && w.dim(2) == 3 && w.dim(3) == 3,
            "kernel_subset_sum: expected [O,C,3,3] kernel, got " + shape_str(w.shape()));
    const int O = w.dim(0), C = w.dim(1);
    std::vector<double> out(static_cast<std::size_t>(O) * C, 0.0);
    const double* K = w.data().data();
    for (std::size_t oc = 0; oc < out.size(); ++oc)
        for (int k = 0; k < 9; ++k)
            if (mask[k]) out[oc] += K[oc * 9 + k];
    NodePtr wn = w.node();
    auto fn = [wn, mask](TensorNode& self) {
        if (!wn->requires_grad) return;
        for (std::size_t oc = 0; oc < self.grad.size(); ++oc)
            for (int k = 0; k < 9; ++k)
                if (mask[k]) wn->grad[oc * 9 + k] += self.grad[oc];
    };
    return make_node("kernel_subset_sum", Shape{O, C}, std::move(out), {w.node()}, std::move(fn));
}

Tensor scale_by_entry(const Tensor& x, const Tensor& s, std::size_t idx) {
    require(idx < s.numel(), "scale_by_entry: index " + std::to_string(idx) +
                                 " out of range for " + shape_str(s.shape()));
    const double sv = s.data()[idx];
    std::vector<double> out(x.numel());
    const auto& v = x.data();
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = sv * v[i];
    NodePtr xn = x.node(), sn = s.node();
    auto fn = [xn, sn, idx, sv](TensorNode& self) {
        if (xn->requires_grad)
            for (std::size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += sv * self.grad[i];
        if (sn->requires_grad) {
            double acc = 0.0;
            const double* xv = xn->value.data();
            for (std::size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * xv[i];
            sn->grad[idx] += acc;
        }
    };
    return make_node("scale_by_entry", x.shape(), std::move(out), {x.node(), s.node()}, std::move(fn));
}

// ---------------------------------------------------------------------------
// elementwise arithmetic

static void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    require(a.shape() == b.shape(),
            std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    NodePtr an = a.node(), bn = b.node();
    auto fn = [an, bn](TensorNode& self) {
        if (an->requires_grad)
            for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
        if (bn->requires_grad)
            for (std::size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] += self.grad[i];
    };
    return make_node("add", a.shape(), std::move(out), {a.node(), b.node()}, std::move(fn));
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
    NodePtr an = a.node(), bn = b.node();
    auto fn = [an, bn](TensorNode& self) {
        if (an->requires_grad)
            for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
        if (bn->requires_grad)
            for (std::size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] -= self.grad[i];
    };
    return make_node("sub", a.shape(), std::move(out), {a.node(), b.node()}, std::move(fn));
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
    NodePtr an = a.node(), bn = b.node();
    auto fn = [an, bn](TensorNode& self) {
        if (an->requires_grad)
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                an->grad[i] += self.grad[i] * bn->value[i];
        if (bn->requires_grad)
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                bn->grad[i] += self.grad[i] * an->value[i];
    };
    return make_node("mul", a.shape(), std::move(out), {a.node(), b.node()}, std::move(fn));
}

Tensor scale(const Tensor& x, double c) {
    if (!std::isfinite(c)) throw std::invalid_argument("scale: factor must be finite");
    std::vector<double> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * x.data()[i];
    NodePtr xn = x.node();
    auto fn = [xn, c](TensorNode& self) {
        if (!xn->requires_grad) return;
        for (std::size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += c * self.grad[i];
    };
    return make_node("scale", x.shape(), std::move(out), {x.node()}, std::move(fn));
}

Tensor mul_mask(const Tensor& x, const std::vector<double>& mask) {
    require(mask.size() == x.numel(), "mul_mask: mask size " + std::to_string(mask.size()) +
                                          " vs tensor " + shape_str(x.shape()));
    std::vector<double> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = mask[i] * x.data()[i];
    NodePtr xn = x.node();
    auto fn = [xn, mask](TensorNode& self) {
        if (!xn->requires_grad) return;
        for (std::size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += mask[i] * self.grad[i];
    };
    return make_node("mul_mask", x.shape(), std::move(out), {x.node()}, std::move(fn));
}

Tensor clamp(const Tensor& x, double lo, double hi) {
    require(lo < hi && std::isfinite(lo) && std::isfinite(hi), "clamp: need finite lo < hi");
    std::vector<double> out(x.numel());
    const auto& v = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = v[i] < lo ? lo : (v[i] > hi ? hi : v[i]);
    NodePtr xn = x.node();
    auto fn = [xn, lo, hi](TensorNode& self) {
        if (!xn->requires_grad) return;
        const double* v = xn->value.data();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
            if (interior(v[i], lo, hi)) xn->grad[i] += self.grad[i];
    };
    return make_node("clamp", x.shape(), std::move(out), {x.node()}, std::move(fn));
}

Tensor sum_all(const Tensor& x) {
    double acc = 0.0;
    for (double v : x.data()) acc += v;
    NodePtr xn = x.node();
    auto fn = [xn](TensorNode& self) {
        if (!xn->requires_grad) return;
        const double g = self.grad[0];
        for (std::size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += g;
    };
    return make_node("sum_all", Shape{1}, {acc}, {x.node()}, std::move(fn));
}

// ---------------------------------------------------------------------------
// losses

Tensor entropy_loss(const Tensor& pred, double log_eps) {
    require(log_eps > 0.0 && log_eps < 0.5, "entropy_loss: log_eps must be in (0, 0.5)");
    const double lo = log_eps, hi = 1.0 - log_eps;
    double acc = 0.0;
    for (double p : pred.data()) {
        const double pc = p < lo ? lo : (p > hi ? hi : p);
        acc += -(pc * std::log(pc) + (1.0 - pc) * std::log(1.0 - pc));
    }
    NodePtr pn = pred.node();
    auto fn = [pn, lo, hi](TensorNode& self) {
        if (!pn->requires_grad) return;
        const double g = self.grad[0];
        const double* p = pn->value.data();
        for (std::size_t i = 0; i < pn->grad.size(); ++i)
            if (interior(p[i], lo, hi)) pn->grad[i] += g * std::log((1.0 - p[i]) / p[i]);
    };
    return make_node("entropy_loss", Shape{1}, {acc}, {pred.node()}, std::move(fn));
}

Tensor dice_bce_loss(const Tensor& pred, const Tensor& target, double dice_eps, double log_eps) {
    require_same_shape(pred, target, "dice_bce_loss");
    require_const(target, "dice_bce_loss", "target");
    require(dice_eps > 0.0, "dice_bce_loss: dice_eps must be > 0");
    require(log_eps > 0.0 && log_eps < 0.5, "dice_bce_loss: log_eps must be in (0, 0.5)");
    const double lo = log_eps, hi = 1.0 - log_eps;
    const double M = static_cast<double>(pred.numel());

    double inter = 0.0, psum = 0.0, tsum = 0.0, bce = 0.0;
    const double* P = pred.data().data();
    const double* T = target.data().data();
    for (std::size_t i = 0; i < pred.numel(); ++i) {
        inter += P[i] * T[i];
        psum += P[i];
        tsum += T[i];
        const double pc = P[i] < lo ? lo : (P[i] > hi ? hi : P[i]);
        bce += -(T[i] * std::log(pc) + (1.0 - T[i]) * std::log(1.0 - pc));
    }
    const double num = 2.0 * inter + dice_eps;
    const double den = psum + tsum + dice_eps;
    const double loss = (1.0 - num / den) + bce / M;

    NodePtr pn = pred.node(), tn = target.node();
    auto fn = [pn, tn, num, den, M, lo, hi](TensorNode& self) {
        if (!pn->requires_grad) return;
        const double g = self.grad[0];
        const double* P = pn->value.data();
        const double* T = tn->value.data();
        for (std::size_t i = 0; i < pn->grad.size(); ++i) {
            double d = (num - 2.0 * T[i] * den) / (den * den);  // soft-Dice part
            if (interior(P[i], lo, hi)) d += (-T[i] / P[i] + (1.0 - T[i]) / (1.0 - P[i])) / M;
            pn->grad[i] += g * d;
        }
    };
    return make_node("dice_bce_loss", Shape{1}, {loss}, {pred.node(), target.node()}, std::move(fn));
}

Tensor weighted_consistency_loss(const Tensor& teacher, const Tensor& student,
                                 const Tensor& weights, double log_eps) {
    require_same_shape(teacher, student, "weighted_consistency_loss");
    require_same_shape(teacher, weights, "weighted_consistency_loss");
    require_const(teacher, "weighted_consistency_loss", "teacher");
    require_const(weights, "weighted_consistency_loss", "weights");
    require(log_eps > 0.0 && log_eps < 0.5, "weighted_consistency_loss: log_eps must be in (0, 0.5)");
    const double lo = log_eps, hi = 1.0 - log_eps;
    auto cl = [lo, hi](double v) { return v < lo ? lo : (v > hi ? hi : v); };

    const double* T = teacher.data().data();
    const double* S = student.data().data();
    const double* Wt = weights.data().data();
    double acc = 0.0;
    for (std::size_t i = 0; i < teacher.numel(); ++i) {
        const double tc = cl(T[i]), sc = cl(S[i]);
        acc += -Wt[i] * (T[i] * std::log(sc) + (1.0 - T[i]) * std::log(1.0 - sc) +
                         S[i] * std::log(tc) + (1.0 - S[i]) * std::log(1.0 - tc));
    }
    NodePtr tn = teacher.node(), sn = student.node(), wn = weights.node();
    auto fn = [tn, sn, wn, lo, hi, cl](TensorNode& self) {
        if (!sn->requires_grad) return;
        const double g = self.grad[0];
        const double* T = tn->value.data();
        const double* S = sn->value.data();
        const double* Wt = wn->value.data();
        for (std::size_t i = 0; i < sn->grad.size(); ++i) {
            const double tc = cl(T[i]);
            double d = -(std::log(tc) - std::log(1.0 - tc));  // student appears linearly here
            if (interior(S[i], lo, hi)) d += -(T[i] / S[i] - (1.0 - T[i]) / (1.0 - S[i]));
            sn->grad[i] += g * Wt[i] * d;
        }
    };
    return make_node("weighted_consistency_loss", Shape{1}, {acc},
                     {teacher.node(), student.node(), weights.node()}, std::move(fn));
}

}  // namespace topotta
