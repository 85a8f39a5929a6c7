#include "topotta/topology.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <vector>

namespace topotta {

namespace {

void require_same_shape(const BinaryMask& a, const BinaryMask& b, const char* who) {
    if (a.h != b.h || a.w != b.w)
        throw std::invalid_argument(std::string(who) + ": mask shapes differ (" +
                                    std::to_string(a.h) + "x" + std::to_string(a.w) + " vs " +
                                    std::to_string(b.h) + "x" + std::to_string(b.w) + ")");
}

// Ring cell offsets in clockwise order starting north. Bit i of a
// neighborhood mask corresponds to ring[i].
constexpr std::array<std::pair<int, int>, 8> kRing = {{
    {-1, 0}, {-1, 1}, {0, 1}, {1, 1}, {1, 0}, {1, -1}, {0, -1}, {-1, -1},
}};

// A center pixel may be deleted without changing the mask's topology iff its
// foreground ring cells form exactly one 8-connected component and its
// background ring cells form exactly one 4-connected component that touches a
// direct (N/E/S/W) neighbor. Precomputed for all 256 neighborhoods.
const std::array<bool, 256>& simple_point_lut() {
    static const std::array<bool, 256> lut = [] {
        std::array<bool, 256> t{};
        for (int mask = 0; mask < 256; ++mask) {
            auto adj = [](int i, int j, bool diag) {
                const int dy = std::abs(kRing[i].first - kRing[j].first);
                const int dx = std::abs(kRing[i].second - kRing[j].second);
                return diag ? (dy <= 1 && dx <= 1) : (dy + dx == 1);
            };
            auto components = [&](bool fg, bool diag) {
                std::array<int, 8> comp;
                comp.fill(-1);
                int n = 0;
                for (int i = 0; i < 8; ++i) {
                    if ((((mask >> i) & 1) != 0) != fg || comp[i] >= 0) continue;
                    comp[i] = n;
                    std::array<int, 8> stack{};
                    int top = 0;
                    stack[top++] = i;
                    while (top > 0) {
                        const int u = stack[--top];
                        for (int v = 0; v < 8; ++v)
                            if ((((mask >> v) & 1) != 0) == fg && comp[v] < 0 && adj(u, v, diag)) {
                                comp[v] = n;
                                stack[top++] = v;
                            }
                    }
                    ++n;
                }
                return std::make_pair(n, comp);
            };
            const int fg_comps = components(true, true).first;
            auto [bg_n, bg_comp] = components(false, false);
            // direct neighbors sit at ring indices 0, 2, 4, 6
            std::array<bool, 8> touches{};
            for (int i : {0, 2, 4, 6})
                if (((mask >> i) & 1) == 0) touches[bg_comp[i]] = true;
            int bg_touching = 0;
            for (int c = 0; c < bg_n; ++c) bg_touching += touches[c];
            t[mask] = fg_comps == 1 && bg_touching == 1;
        }
        return t;
    }();
    return lut;
}

int neighborhood_mask(const BinaryMask& m, int y, int x) {
    int bits = 0;
    for (int i = 0; i < 8; ++i) {
        const int ny = y + kRing[i].first, nx = x + kRing[i].second;
        if (ny >= 0 && ny < m.h && nx >= 0 && nx < m.w && m.at(ny, nx)) bits |= 1 << i;
    }
    return bits;
}

// 0 -> 1 transitions walking the ring clockwise (the crossing number).
int ring_transitions(int mask) {
    int t = 0;
    for (int i = 0; i < 8; ++i) {
        const int a = (mask >> i) & 1, b = (mask >> ((i + 1) & 7)) & 1;
        t += (a == 0 && b == 1);
    }
    return t;
}

int flood_count(const BinaryMask& m, bool fg, bool diag, std::vector<std::uint8_t>* outside = nullptr) {
    const int h = m.h, w = m.w;
    std::vector<std::uint8_t> seen(static_cast<std::size_t>(h) * w, 0);
    std::vector<int> stack;
    auto want = [&](int y, int x) {
        return (m.at(y, x) != 0) == fg && !seen[static_cast<std::size_t>(y) * w + x];
    };
    auto fill = [&](int sy, int sx) {
        stack.push_back(sy * w + sx);
        seen[static_cast<std::size_t>(sy) * w + sx] = 1;
        while (!stack.empty()) {
            const int cur = stack.back();
            stack.pop_back();
            const int y = cur / w, x = cur % w;
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx) {
                    if ((dy == 0 && dx == 0) || (!diag && dy != 0 && dx != 0)) continue;
                    const int ny = y + dy, nx = x + dx;
                    if (ny < 0 || ny >= h || nx < 0 || nx >= w || !want(ny, nx)) continue;
                    seen[static_cast<std::size_t>(ny) * w + nx] = 1;
                    stack.push_back(ny * w + nx);
                }
        }
    };

    if (outside) {
        // pre-mark everything reachable from the border; those are not counted
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                if ((y == 0 || y == h - 1 || x == 0 || x == w - 1) && want(y, x)) fill(y, x);
        *outside = seen;
        return 0;
    }
    int count = 0;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            if (want(y, x)) {
                fill(y, x);
                ++count;
            }
    return count;
}

}  // namespace

double dice_score(const BinaryMask& a, const BinaryMask& b) {
    require_same_shape(a, b, "dice_score");
    std::size_t inter = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.v.size(); ++i) {
        na += a.v[i] != 0;
        nb += b.v[i] != 0;
        inter += a.v[i] && b.v[i];
    }
    if (na + nb == 0) return 1.0;
    return 2.0 * static_cast<double>(inter) / static_cast<double>(na + nb);
}

BettiPair betti_numbers(const BinaryMask& m) {
    BettiPair out;
    out.b0 = flood_count(m, true, true);

    // holes: 4-connected background components that never reach the border
    std::vector<std::uint8_t> outside;
    flood_count(m, false, false, &outside);
    BinaryMask interior_bg(m.h, m.w);
    for (std::size_t i = 0; i < m.v.size(); ++i) interior_bg.v[i] = (m.v[i] == 0 && !outside[i]) ? 1 : 0;
    out.b1 = flood_count(interior_bg, true, false);
    return out;
}

int betti_error(const BinaryMask& pred, const BinaryMask& gt) {
    require_same_shape(pred, gt, "betti_error");
    const BettiPair p = betti_numbers(pred), g = betti_numbers(gt);
    return std::abs(p.b0 - g.b0) + std::abs(p.b1 - g.b1);
}

double betti_error_patched(const BinaryMask& pred, const BinaryMask& gt, int patch) {
    require_same_shape(pred, gt, "betti_error_patched");
    if (patch < 1) throw std::invalid_argument("betti_error_patched: patch must be >= 1");
    const int ty = std::max(1, pred.h / patch), tx = std::max(1, pred.w / patch);
    double sum = 0.0;
    int tiles = 0;
    for (int py = 0; py < ty; ++py)
        for (int px = 0; px < tx; ++px) {
            const int y0 = py * patch, x0 = px * patch;
            const int y1 = py == ty - 1 ? pred.h : y0 + patch;
            const int x1 = px == tx - 1 ? pred.w : x0 + patch;
            BinaryMask tp(y1 - y0, x1 - x0), tg(y1 - y0, x1 - x0);
            for (int y = y0; y < y1; ++y)
                for (int x = x0; x < x1; ++x) {
                    tp.at(y - y0, x - x0) = pred.at(y, x);
                    tg.at(y - y0, x - x0) = gt.at(y, x);
                }
            sum += betti_error(tp, tg);
            ++tiles;
        }
    return sum / tiles;
}

BinaryMask skeletonize(const BinaryMask& m) {
    BinaryMask img = m;
    const auto& simple = simple_point_lut();
    std::vector<std::pair<int, int>> cand;

    auto run_pass = [&](int sub) {
        cand.clear();
        for (int y = 0; y < img.h; ++y)
            for (int x = 0; x < img.w; ++x) {
                if (!img.at(y, x)) continue;
                const int nm = neighborhood_mask(img, y, x);
                const int b = std::popcount(static_cast<unsigned>(nm));
                if (b < 2 || b > 6 || ring_transitions(nm) != 1) continue;
                // ring bits: 0=N 2=E 4=S 6=W
                const bool n = nm & 1, e = nm & 4, s = nm & 16, w = nm & 64;
                if (sub == 0 ? ((n && e && s) || (e && s && w)) : ((n && e && w) || (n && s && w)))
                    continue;
                cand.emplace_back(y, x);
            }
        bool changed = false;
        for (auto [y, x] : cand) {
            const int nm = neighborhood_mask(img, y, x);
            if (std::popcount(static_cast<unsigned>(nm)) >= 2 && simple[nm]) {
                img.at(y, x) = 0;
                changed = true;
            }
        }
        return changed;
    };

    bool changed = true;
    while (changed) changed = run_pass(0) | run_pass(1);

    // Residue cleanup: thin leftover fully-foreground 2x2 blocks, still only
    // through verified simple points, until none remain.
    changed = true;
    while (changed) {
        changed = false;
        for (int y = 0; y < img.h; ++y)
            for (int x = 0; x < img.w; ++x) {
                if (!img.at(y, x)) continue;
                bool in_square = false;
                for (int sy = std::max(0, y - 1); sy <= y && sy + 1 < img.h && !in_square; ++sy)
                    for (int sx = std::max(0, x - 1); sx <= x && sx + 1 < img.w; ++sx)
                        if (img.at(sy, sx) && img.at(sy, sx + 1) && img.at(sy + 1, sx) &&
                            img.at(sy + 1, sx + 1)) {
                            in_square = true;
                            break;
                        }
                if (!in_square) continue;
                const int nm = neighborhood_mask(img, y, x);
                if (std::popcount(static_cast<unsigned>(nm)) >= 2 && simple[nm]) {
                    img.at(y, x) = 0;
                    changed = true;
                }
            }
    }
    return img;
}

ClDice cl_dice(const BinaryMask& pred, const BinaryMask& gt) {
    require_same_shape(pred, gt, "cl_dice");
    const BinaryMask sp = skeletonize(pred), sg = skeletonize(gt);
    const std::size_t np = sp.count(), ng = sg.count();
    if (np == 0 || ng == 0) return {0.0, false};

    std::size_t pg = 0, gp = 0;
    for (std::size_t i = 0; i < sp.v.size(); ++i) {
        pg += sp.v[i] && gt.v[i];
        gp += sg.v[i] && pred.v[i];
    }
    const double tprec = static_cast<double>(pg) / static_cast<double>(np);
    const double tsens = static_cast<double>(gp) / static_cast<double>(ng);
    if (tprec + tsens == 0.0) return {0.0, true};
    return {2.0 * tprec * tsens / (tprec + tsens), true};
}

std::vector<double> area_interpolate(const BinaryMask& m, int out_h, int out_w) {
    if (out_h < 1 || out_w < 1) throw std::invalid_argument("area_interpolate: target size must be >= 1");
    const double sy = static_cast<double>(m.h) / out_h, sx = static_cast<double>(m.w) / out_w;

    // rows first: rows[oy][x] = integral of column x over output row oy's span
    std::vector<double> rows(static_cast<std::size_t>(out_h) * m.w, 0.0);
    for (int oy = 0; oy < out_h; ++oy) {
        const double y0 = oy * sy, y1 = y0 + sy;
        const int first = static_cast<int>(y0), last = std::min(m.h - 1, static_cast<int>(std::ceil(y1)) - 1);
        for (int y = first; y <= last; ++y) {
            const double cover = std::min<double>(y + 1, y1) - std::max<double>(y, y0);
            if (cover <= 0.0) continue;
            for (int x = 0; x < m.w; ++x)
                if (m.at(y, x)) rows[static_cast<std::size_t>(oy) * m.w + x] += cover;
        }
    }
    std::vector<double> out(static_cast<std::size_t>(out_h) * out_w, 0.0);
    for (int ox = 0; ox < out_w; ++ox) {
        const double x0 = ox * sx, x1 = x0 + sx;
        const int first = static_cast<int>(x0), last = std::min(m.w - 1, static_cast<int>(std::ceil(x1)) - 1);
        for (int x = first; x <= last; ++x) {
            const double cover = std::min<double>(x + 1, x1) - std::max<double>(x, x0);
            if (cover <= 0.0) continue;
            for (int oy = 0; oy < out_h; ++oy)
                out[static_cast<std::size_t>(oy) * out_w + ox] +=
                    cover * rows[static_cast<std::size_t>(oy) * m.w + x];
        }
    }
    const double cell = sy * sx;
    for (double& v : out) v /= cell;
    return out;
}

BinaryMask resize_label(const BinaryMask& m, int out_h, int out_w) {
    const std::vector<double> area = area_interpolate(m, out_h, out_w);
    BinaryMask majority(out_h, out_w), support(out_h, out_w);
    for (std::size_t i = 0; i < area.size(); ++i) {
        majority.v[i] = area[i] > 0.5 ? 1 : 0;
        support.v[i] = area[i] > 0.0 ? 1 : 0;
    }
    const BinaryMask spine = skeletonize(support);
    BinaryMask out(out_h, out_w);
    for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] = (majority.v[i] || spine.v[i]) ? 1 : 0;
    return out;
}

TopologyReport evaluate_pair(const BinaryMask& pred, const BinaryMask& gt) {
    require_same_shape(pred, gt, "evaluate_pair");
    TopologyReport r;
    r.dice = dice_score(pred, gt);
    r.cldice = cl_dice(pred, gt);
    r.betti_pred = betti_numbers(pred);
    r.betti_gt = betti_numbers(gt);
    r.betti_err = std::abs(r.betti_pred.b0 - r.betti_gt.b0) + std::abs(r.betti_pred.b1 - r.betti_gt.b1);
    return r;
}

std::string format_report(const std::vector<std::string>& names,
                          const std::vector<TopologyReport>& reports) {
    if (names.size() != reports.size())
        throw std::invalid_argument("format_report: names/reports size mismatch");
    std::ostringstream os;
    os << "# topology metrics\n";
    os << "# convention: whole-image Betti error; foreground 8-connected, holes 4-connected\n";
    os << "# columns: name dice cldice betti_err b0_pred b1_pred b0_gt b1_gt\n";
    os.setf(std::ios::fixed);
    os.precision(6);
    double dsum = 0.0, csum = 0.0, bsum = 0.0;
    std::size_t cdef = 0;
    for (std::size_t i = 0; i < reports.size(); ++i) {
        const TopologyReport& r = reports[i];
        os << names[i] << " " << r.dice << " ";
        if (r.cldice.defined) {
            os << r.cldice.value;
            csum += r.cldice.value;
            ++cdef;
        } else {
            os << "undefined";
        }
        os << " " << r.betti_err << " " << r.betti_pred.b0 << " " << r.betti_pred.b1 << " "
           << r.betti_gt.b0 << " " << r.betti_gt.b1 << "\n";
        dsum += r.dice;
        bsum += r.betti_err;
    }
    const double n = static_cast<double>(reports.size());
    os << "# aggregate: n=" << reports.size() << " mean_dice=" << (reports.empty() ? 0.0 : dsum / n)
       << " mean_cldice=" << (cdef ? csum / static_cast<double>(cdef) : 0.0) << " (over " << cdef
       << " defined, " << (reports.size() - cdef) << " undefined)"
       << " mean_betti_err=" << (reports.empty() ? 0.0 : bsum / n) << "\n";
    return os.str();
}

}  // namespace topotta
