#include "topotta/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

#include "topotta/rng.hpp"

namespace topotta {

namespace {

void stamp_disk(BinaryMask& m, double cy, double cx, double radius) {
    const int y0 = std::max(0, static_cast<int>(std::floor(cy - radius)));
    const int y1 = std::min(m.h - 1, static_cast<int>(std::ceil(cy + radius)));
    const int x0 = std::max(0, static_cast<int>(std::floor(cx - radius)));
    const int x1 = std::min(m.w - 1, static_cast<int>(std::ceil(cx + radius)));
    const double r2 = radius * radius;
    for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x)
            if ((y - cy) * (y - cy) + (x - cx) * (x - cx) <= r2) m.at(y, x) = 1;
    // the nearest cell is always painted; with unit walk steps this keeps
    // consecutive stamps 8-adjacent even at sub-pixel radii
    const int ry = std::clamp(static_cast<int>(std::lround(cy)), 0, m.h - 1);
    const int rx = std::clamp(static_cast<int>(std::lround(cx)), 0, m.w - 1);
    m.at(ry, rx) = 1;
}

struct WalkPoint {
    double y, x, heading;
};

// Random-heading walk with border bounces, one unit step per point.
std::vector<WalkPoint> walk(Rng& rng, double y, double x, double heading, int steps, int size,
                            double curvature) {
    std::vector<WalkPoint> pts;
    pts.reserve(steps + 1);
    pts.push_back({y, x, heading});
    for (int s = 0; s < steps; ++s) {
        heading += curvature * rng.normal();
        double ny = y + std::sin(heading), nx = x + std::cos(heading);
        if (ny < 1.0 || ny > size - 2.0) {
            heading = -heading;
            ny = y + std::sin(heading);
        }
        if (nx < 1.0 || nx > size - 2.0) {
            heading = std::numbers::pi - heading;
            nx = x + std::cos(heading);
        }
        y = std::clamp(ny, 1.0, size - 2.0);
        x = std::clamp(nx, 1.0, size - 2.0);
        pts.push_back({y, x, heading});
    }
    return pts;
}

// One structure: a main curve, possibly with a single fork partway along.
// The fork starts on the main trajectory, so the structure stays connected.
BinaryMask draw_structure(int size, Rng& rng, const DomainSpec& spec) {
    BinaryMask m(size, size);
    const double margin = std::max(2.0, spec.thickness_max);
    const double y0 = rng.uniform(margin, size - 1 - margin);
    const double x0 = rng.uniform(margin, size - 1 - margin);
    const double heading = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const int steps = static_cast<int>(rng.uniform(0.6, 1.2) * size);
    const double radius = 0.5 * rng.uniform(spec.thickness_min, spec.thickness_max);

    const auto main_pts = walk(rng, y0, x0, heading, steps, size, spec.curvature);
    for (const auto& p : main_pts) stamp_disk(m, p.y, p.x, radius);

    if (rng.bernoulli(spec.branch_prob)) {
        const std::size_t at = 1 + static_cast<std::size_t>(
                                       rng.uniform_int(0, static_cast<std::int64_t>(main_pts.size()) - 2));
        const double side = rng.bernoulli(0.5) ? 1.0 : -1.0;
        const WalkPoint& f = main_pts[at];
        const int branch_steps = static_cast<int>(main_pts.size() - at) / 2 + 4;
        const auto branch_pts =
            walk(rng, f.y, f.x, f.heading + side * rng.uniform(0.5, 1.1), branch_steps, size,
                 spec.curvature);
        for (const auto& p : branch_pts) stamp_disk(m, p.y, p.x, radius);
    }
    return m;
}

bool touches(const BinaryMask& candidate, const BinaryMask& existing) {
    // reject when the candidate dilated by one pixel (8-connectivity) overlaps
    for (int y = 0; y < candidate.h; ++y)
        for (int x = 0; x < candidate.w; ++x) {
            if (!candidate.at(y, x)) continue;
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx) {
                    const int ny = y + dy, nx = x + dx;
                    if (ny >= 0 && ny < existing.h && nx >= 0 && nx < existing.w &&
                        existing.at(ny, nx))
                        return true;
                }
        }
    return false;
}

}  // namespace

void validate_spec(const DomainSpec& spec) {
    auto fail = [](const std::string& why) { throw std::invalid_argument("DomainSpec: " + why); };
    if (spec.size < 16 || spec.size % 4 != 0) fail("size must be >= 16 and divisible by 4");
    if (spec.n_curves_min < 1 || spec.n_curves_max < spec.n_curves_min)
        fail("curve count range must satisfy 1 <= min <= max");
    if (spec.thickness_min < 1.0 || spec.thickness_max < spec.thickness_min)
        fail("thickness range must satisfy 1 <= min <= max");
    if (spec.thickness_max > spec.size / 4.0) fail("thickness too large for the image size");
    if (spec.fg_intensity < 0.0 || spec.fg_intensity > 1.0 || spec.bg_intensity < 0.0 ||
        spec.bg_intensity > 1.0)
        fail("intensities must lie in [0,1]");
    if (spec.curvature < 0.0) fail("curvature must be >= 0");
    if (spec.branch_prob < 0.0 || spec.branch_prob > 1.0) fail("branch_prob must lie in [0,1]");
    if (spec.gamma <= 0.0) fail("gamma must be > 0");
    if (spec.blur_sigma < 0.0) fail("blur_sigma must be >= 0");
    if (spec.noise_sigma < 0.0) fail("noise_sigma must be >= 0");
}

ImageF gaussian_blur(const ImageF& img, double sigma) {
    if (sigma <= 0.0) return img;
    const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    std::vector<double> k(2 * radius + 1);
    for (int i = -radius; i <= radius; ++i) k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));

    ImageF tmp(img.h, img.w), out(img.h, img.w);
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x) {
            double acc = 0.0, wsum = 0.0;
            for (int i = -radius; i <= radius; ++i) {
                const int xx = x + i;
                if (xx < 0 || xx >= img.w) continue;
                acc += k[i + radius] * img.at(y, xx);
                wsum += k[i + radius];
            }
            tmp.at(y, x) = acc / wsum;
        }
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x) {
            double acc = 0.0, wsum = 0.0;
            for (int i = -radius; i <= radius; ++i) {
                const int yy = y + i;
                if (yy < 0 || yy >= img.h) continue;
                acc += k[i + radius] * tmp.at(yy, x);
                wsum += k[i + radius];
            }
            out.at(y, x) = acc / wsum;
        }
    return out;
}

SynthSample generate_sample(const DomainSpec& spec, std::uint64_t seed, std::uint64_t index) {
    validate_spec(spec);
    Rng rng = Rng(seed).fork(index);

    SynthSample s;
    s.label = BinaryMask(spec.size, spec.size);
    const int target = static_cast<int>(rng.uniform_int(spec.n_curves_min, spec.n_curves_max));

    Rng curves = rng.fork(1);
    for (int c = 0; c < target; ++c) {
        bool placed = false;
        for (int attempt = 0; attempt < 40 && !placed; ++attempt) {
            Rng draw = curves.fork(c * 64 + attempt);
            const BinaryMask cand = draw_structure(spec.size, draw, spec);
            if (s.n_structures == 0 || !touches(cand, s.label)) {
                for (std::size_t i = 0; i < cand.v.size(); ++i) s.label.v[i] |= cand.v[i];
                ++s.n_structures;
                placed = true;
            }
        }
        // an unplaceable curve is skipped; the count stays consistent
    }

    ImageF img(spec.size, spec.size);
    for (std::size_t i = 0; i < img.v.size(); ++i)
        img.v[i] = s.label.v[i] ? spec.fg_intensity : spec.bg_intensity;
    img = gaussian_blur(img, spec.blur_sigma);
    if (spec.gamma != 1.0)
        for (double& v : img.v) v = std::pow(std::max(v, 0.0), spec.gamma);
    if (spec.noise_sigma > 0.0) {
        Rng noise = rng.fork(2);
        for (double& v : img.v) v += spec.noise_sigma * noise.normal();
    }
    if (spec.invert)
        for (double& v : img.v) v = 1.0 - v;
    for (double& v : img.v) v = std::clamp(v, 0.0, 1.0);
    s.image = std::move(img);
    return s;
}

std::vector<SynthSample> generate_dataset(const DomainSpec& spec, int n_images, std::uint64_t seed) {
    if (n_images < 1) throw std::invalid_argument("generate_dataset: n_images must be >= 1");
    std::vector<SynthSample> out;
    out.reserve(n_images);
    for (int i = 0; i < n_images; ++i) out.push_back(generate_sample(spec, seed, i));
    return out;
}

DomainSpec source_domain() { return DomainSpec{}; }

DomainSpec shifted_domain() {
    DomainSpec d;
    d.invert = true;
    d.noise_sigma = 0.15;
    d.thickness_min = 3.0;
    d.thickness_max = 6.0;
    return d;
}

}  // namespace topotta
