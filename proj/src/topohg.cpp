#include "topotta/topohg.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include "topotta/rng.hpp"

namespace topotta {

namespace {

using cd = std::complex<double>;

void require_square(const ImageF& p, const char* who) {
    if (p.h != p.w || p.h < 1)
        throw std::invalid_argument(std::string(who) + ": patch must be square and non-empty");
}

void require_same_shape(const ImageF& a, const ImageF& b, const char* who) {
    if (a.h != b.h || a.w != b.w)
        throw std::invalid_argument(std::string(who) + ": patch shapes differ");
}

ImageF crop(const ImageF& img, const Rect& r) {
    ImageF out(r.side, r.side);
    for (int y = 0; y < r.side; ++y)
        for (int x = 0; x < r.side; ++x) out.at(y, x) = img.at(r.top + y, r.left + x);
    return out;
}

void paste(ImageF& img, const Rect& r, const ImageF& patch) {
    for (int y = 0; y < r.side; ++y)
        for (int x = 0; x < r.side; ++x) img.at(r.top + y, r.left + x) = patch.at(y, x);
}

// e^{-2*pi*i*j/s} for j in [0, s); forward transform twiddles, conjugate for inverse.
std::vector<cd> twiddles(int s) {
    std::vector<cd> w(s);
    for (int j = 0; j < s; ++j) {
        const double a = -2.0 * std::numbers::pi * j / s;
        w[j] = cd(std::cos(a), std::sin(a));
    }
    return w;
}

// Separable direct transform; conj=false forward, conj=true inverse (no scaling).
std::vector<cd> dft2_core(const std::vector<cd>& in, int s, bool conj) {
    const auto w = twiddles(s);
    auto tw = [&](long long j) { return conj ? std::conj(w[j % s]) : w[j % s]; };

    std::vector<cd> rows(static_cast<std::size_t>(s) * s), out(rows.size());
    for (int y = 0; y < s; ++y)
        for (int kx = 0; kx < s; ++kx) {
            cd acc = 0.0;
            for (int x = 0; x < s; ++x) acc += in[static_cast<std::size_t>(y) * s + x] * tw(static_cast<long long>(kx) * x);
            rows[static_cast<std::size_t>(y) * s + kx] = acc;
        }
    for (int kx = 0; kx < s; ++kx)
        for (int ky = 0; ky < s; ++ky) {
            cd acc = 0.0;
            for (int y = 0; y < s; ++y) acc += rows[static_cast<std::size_t>(y) * s + kx] * tw(static_cast<long long>(ky) * y);
            out[static_cast<std::size_t>(ky) * s + kx] = acc;
        }
    return out;
}

}  // namespace

HgVariant parse_variant(const std::string& name) {
    if (name == "frequency-swap") return HgVariant::frequency_swap;
    if (name == "blur") return HgVariant::blur;
    if (name == "noise") return HgVariant::noise;
    if (name == "image-swap") return HgVariant::image_swap;
    throw std::invalid_argument("unknown augmentation variant: " + name);
}

std::string variant_name(HgVariant v) {
    switch (v) {
        case HgVariant::frequency_swap: return "frequency-swap";
        case HgVariant::blur: return "blur";
        case HgVariant::noise: return "noise";
        case HgVariant::image_swap: return "image-swap";
    }
    throw std::invalid_argument("unknown augmentation variant value");
}

void validate_hg(const HgConfig& cfg) {
    auto fail = [](const std::string& why) { throw std::invalid_argument("HgConfig: " + why); };
    if (!(cfg.tau > 0.0 && cfg.tau < 1.0)) fail("tau must lie in (0,1)");
    if (!(cfg.k > 0.0 && cfg.k <= 1.0)) fail("k must lie in (0,1]");
    if (cfg.s < 3) fail("window side s must be >= 3");
    if (!(cfg.tau_bg >= 0.0 && cfg.tau_bg < 1.0)) fail("tau_bg must lie in [0,1)");
    if (!(cfg.low_freq_ratio > 0.0 && cfg.low_freq_ratio < 1.0))
        fail("low_freq_ratio must lie in (0,1)");
}

std::vector<Point> select_keypoints(const ImageF& teacher_pred, const HgConfig& cfg, Rng& rng) {
    std::vector<Point> pool;
    for (int u = 0; u < teacher_pred.h; ++u)
        for (int v = 0; v < teacher_pred.w; ++v)
            if (teacher_pred.at(u, v) > cfg.tau) pool.push_back({u, v});
    if (pool.empty()) return {};

    const auto want = static_cast<std::size_t>(
        std::ceil(cfg.k * static_cast<double>(pool.size())));
    const std::size_t n = std::min(want, pool.size());
    // partial Fisher-Yates: the first n slots become a uniform sample without replacement
    for (std::size_t i = 0; i < n; ++i) {
        const auto j = static_cast<std::size_t>(
            rng.uniform_int(static_cast<std::int64_t>(i), static_cast<std::int64_t>(pool.size()) - 1));
        std::swap(pool[i], pool[j]);
    }
    pool.resize(n);
    return pool;
}

std::optional<Rect> fg_window_at(Point kp, int s, int h, int w) {
    const Rect r{kp.u - s / 2, kp.v - s / 2, s};
    if (!r.inside(h, w)) return std::nullopt;
    return r;
}

std::optional<Rect> sliding_search(const ImageF& teacher_pred, Point kp, const HgConfig& cfg) {
    const auto fg = fg_window_at(kp, cfg.s, teacher_pred.h, teacher_pred.w);
    if (!fg) return std::nullopt;

    bool have = false;
    Rect best{};
    double best_sum = 0.0;
    for (int dy = -cfg.s; dy <= cfg.s; dy += cfg.s)
        for (int dx = -cfg.s; dx <= cfg.s; dx += cfg.s) {
            if (dy == 0 && dx == 0) continue;
            const Rect cand{fg->top + dy, fg->left + dx, cfg.s};
            if (!cand.inside(teacher_pred.h, teacher_pred.w)) continue;
            double sum = 0.0;
            for (int y = 0; y < cfg.s; ++y)
                for (int x = 0; x < cfg.s; ++x) sum += teacher_pred.at(cand.top + y, cand.left + x);
            // scan order is already (row, col)-sorted, so strict < keeps the
            // smallest (row, col) window among ties
            if (!have || sum < best_sum) {
                have = true;
                best = cand;
                best_sum = sum;
            }
        }
    if (!have) return std::nullopt;

    int fg_px = 0;
    for (int y = 0; y < cfg.s; ++y)
        for (int x = 0; x < cfg.s; ++x)
            if (teacher_pred.at(best.top + y, best.left + x) > 0.5) ++fg_px;
    const double ratio = static_cast<double>(fg_px) / (static_cast<double>(cfg.s) * cfg.s);
    if (ratio > cfg.tau_bg) return std::nullopt;
    return best;
}

std::vector<cd> dft2(const ImageF& patch) {
    require_square(patch, "dft2");
    std::vector<cd> in(patch.v.begin(), patch.v.end());
    return dft2_core(in, patch.h, false);
}

std::vector<cd> idft2(const std::vector<cd>& freq, int side) {
    if (side < 1 || freq.size() != static_cast<std::size_t>(side) * side)
        throw std::invalid_argument("idft2: size does not match the stated side");
    auto out = dft2_core(freq, side, true);
    const double scale = 1.0 / (static_cast<double>(side) * side);
    for (cd& c : out) c *= scale;
    return out;
}

std::vector<double> low_freq_mask(int s, int mask_side) {
    if (s < 1) throw std::invalid_argument("low_freq_mask: side must be >= 1");
    int L = std::clamp(mask_side, 0, s);
    if (L > 0 && L < s && L % 2 == 0) --L;  // keep the centered square Hermitian-symmetric

    std::vector<double> m(static_cast<std::size_t>(s) * s, 0.0);
    if (L == 0) return m;
    if (L >= s) {
        std::fill(m.begin(), m.end(), 1.0);
        return m;
    }
    const int c = s / 2, half = (L - 1) / 2;  // centered-spectrum coordinates
    for (int ky = 0; ky < s; ++ky)
        for (int kx = 0; kx < s; ++kx) {
            const int sy = (ky + c) % s, sx = (kx + c) % s;  // position after centering shift
            if (std::abs(sy - c) <= half && std::abs(sx - c) <= half)
                m[static_cast<std::size_t>(ky) * s + kx] = 1.0;
        }
    return m;
}

ImageF low_freq_swap_masked(const ImageF& x_fg, const ImageF& x_bg, int mask_side) {
    require_square(x_fg, "low_freq_swap");
    require_same_shape(x_fg, x_bg, "low_freq_swap");
    const int s = x_fg.h;

    const auto f_fg = dft2(x_fg);
    const auto f_bg = dft2(x_bg);
    const auto m = low_freq_mask(s, mask_side);
    std::vector<cd> mixed(f_fg.size());
    for (std::size_t i = 0; i < mixed.size(); ++i)
        mixed[i] = f_fg[i] * (1.0 - m[i]) + f_bg[i] * m[i];

    const auto back = idft2(mixed, s);
    ImageF out(s, s);
    for (std::size_t i = 0; i < back.size(); ++i) {
        if (std::abs(back[i].imag()) >= 1e-9)
            throw std::runtime_error("low_freq_swap: inverse transform is not real");
        out.v[i] = back[i].real();
    }
    return out;
}

ImageF low_freq_swap(const ImageF& x_fg, const ImageF& x_bg, double low_freq_ratio) {
    require_square(x_fg, "low_freq_swap");
    const int side = std::max(1, static_cast<int>(std::lround(low_freq_ratio * x_fg.h)));
    return low_freq_swap_masked(x_fg, x_bg, side);
}

ImageF compose_pseudobreak(const ImageF& x_fg, const ImageF& x_swap, const ImageF& yp_patch) {
    require_same_shape(x_fg, x_swap, "compose_pseudobreak");
    require_same_shape(x_fg, yp_patch, "compose_pseudobreak");
    ImageF out(x_fg.h, x_fg.w);
    for (std::size_t i = 0; i < out.v.size(); ++i) {
        const double y = yp_patch.v[i];
        if (y < 0.0 || y > 1.0)
            throw std::invalid_argument("compose_pseudobreak: pseudo-label values must lie in [0,1]");
        out.v[i] = x_swap.v[i] * y + x_fg.v[i] * (1.0 - y);
    }
    return out;
}

ImageF variant_augment(const ImageF& x_fg, const ImageF& x_bg, HgVariant variant, Rng& rng) {
    require_square(x_fg, "variant_augment");
    require_same_shape(x_fg, x_bg, "variant_augment");
    switch (variant) {
        case HgVariant::frequency_swap:
            throw std::invalid_argument(
                "variant_augment: frequency-swap is the primary path, not an ablation");
        case HgVariant::blur: {
            // fixed 5x5 separable gaussian, sigma 2, edge-renormalized
            const int radius = 2;
            double k[5];
            for (int i = -radius; i <= radius; ++i) k[i + radius] = std::exp(-0.5 * i * i / 4.0);
            ImageF tmp(x_fg.h, x_fg.w), out(x_fg.h, x_fg.w);
            for (int y = 0; y < x_fg.h; ++y)
                for (int x = 0; x < x_fg.w; ++x) {
                    double acc = 0.0, wsum = 0.0;
                    for (int i = -radius; i <= radius; ++i)
                        if (x + i >= 0 && x + i < x_fg.w) {
                            acc += k[i + radius] * x_fg.at(y, x + i);
                            wsum += k[i + radius];
                        }
                    tmp.at(y, x) = acc / wsum;
                }
            for (int y = 0; y < x_fg.h; ++y)
                for (int x = 0; x < x_fg.w; ++x) {
                    double acc = 0.0, wsum = 0.0;
                    for (int i = -radius; i <= radius; ++i)
                        if (y + i >= 0 && y + i < x_fg.h) {
                            acc += k[i + radius] * tmp.at(y + i, x);
                            wsum += k[i + radius];
                        }
                    out.at(y, x) = acc / wsum;
                }
            return out;
        }
        case HgVariant::noise: {
            const auto [mn, mx] = std::minmax_element(x_fg.v.begin(), x_fg.v.end());
            const double sigma = 0.2 * (*mx - *mn);
            ImageF out = x_fg;
            if (sigma > 0.0)
                for (double& v : out.v) v += sigma * rng.normal();
            return out;
        }
        case HgVariant::image_swap:
            return x_bg;
    }
    throw std::invalid_argument("variant_augment: unknown variant value");
}

PseudoBreakPlan build_plan(const Tensor& image, const Tensor& teacher_pred, const HgConfig& cfg,
                           Rng& rng) {
    validate_hg(cfg);
    const ImageF img = image_from_tensor(image);
    const ImageF pred = image_from_tensor(teacher_pred);
    if (img.h != pred.h || img.w != pred.w)
        throw std::invalid_argument("build_plan: image and prediction shapes differ");

    PseudoBreakPlan plan;
    ImageF hard = img;
    const auto candidates = select_keypoints(pred, cfg, rng);

    for (const Point& kp : candidates) {
        const auto fg = fg_window_at(kp, cfg.s, img.h, img.w);
        const auto bg = fg ? sliding_search(pred, kp, cfg) : std::nullopt;
        const bool overlap =
            fg && std::any_of(plan.fg_windows.begin(), plan.fg_windows.end(),
                              [&](const Rect& r) { return r.overlaps(*fg); });
        if (!fg || !bg || overlap) {
            ++plan.rejected_count;
            continue;
        }

        const ImageF x_fg = crop(img, *fg);
        const ImageF x_bg = crop(img, *bg);
        const ImageF yp = crop(pred, *fg);
        const ImageF x_sub = cfg.variant == HgVariant::frequency_swap
                                 ? low_freq_swap(x_fg, x_bg, cfg.low_freq_ratio)
                                 : variant_augment(x_fg, x_bg, cfg.variant, rng);
        paste(hard, *fg, compose_pseudobreak(x_fg, x_sub, yp));

        plan.keypoints.push_back(kp);
        plan.fg_windows.push_back(*fg);
        plan.bg_windows.push_back(*bg);
    }

    ImageF weights(img.h, img.w, 1.0);
    for (const Rect& r : plan.fg_windows)
        for (int y = r.top; y < r.top + r.side; ++y)
            for (int x = r.left; x < r.left + r.side; ++x)
                if (pred.at(y, x) > 0.5) weights.at(y, x) = 10.0;

    plan.hard_image = tensor_from_image(hard);
    plan.weight_map = tensor_from_image(weights);
    return plan;
}

}  // namespace topotta
