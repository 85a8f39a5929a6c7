#pragma once

#include <complex>
#include <optional>
#include <string>
#include <vector>

#include "topotta/image.hpp"
#include "topotta/tensor.hpp"

namespace topotta {

class Rng;

// ---------------------------------------------------------------------------
// Hard-sample generation: plant local "pseudo-breaks" in confidently predicted
// tube regions so a consistency loss can push the segmenter to keep those
// regions connected. Pipeline per image:
//   1. sample keypoints among pixels whose teacher confidence exceeds tau,
//   2. slide an s x s background window around each keypoint's foreground
//      window and keep the least-confident neighbor (reject when it still
//      contains too much foreground),
//   3. swap the low-frequency band of the foreground window with that of the
//      background window and blend the result in only where the pseudo-label
//      is foreground.
// The plan records the edited image and a weight map that upweights the
// edited foreground pixels (10 vs 1) for the consistency loss.
// ---------------------------------------------------------------------------

enum class HgVariant { frequency_swap, blur, noise, image_swap };

HgVariant parse_variant(const std::string& name);
std::string variant_name(HgVariant v);

struct HgConfig {
    double tau = 0.95;           // keypoint confidence threshold, in (0,1)
    double k = 0.002;            // keypoint fraction of confident pixels, in (0,1]
    int s = 30;                  // window side, >= 3
    double tau_bg = 0.05;        // max foreground-pixel ratio in a background window, in [0,1)
    double low_freq_ratio = 0.3; // swapped-mask side as a fraction of s, in (0,1)
    HgVariant variant = HgVariant::frequency_swap;
};

// Throws std::invalid_argument when a field is out of range.
void validate_hg(const HgConfig& cfg);

struct Point {
    int u = 0, v = 0;  // (row, col)
    bool operator==(const Point&) const = default;
};

// Closed axis-aligned square window: rows [top, top+side), cols [left, left+side).
struct Rect {
    int top = 0, left = 0, side = 0;
    bool contains(int u, int v) const {
        return u >= top && u < top + side && v >= left && v < left + side;
    }
    bool overlaps(const Rect& o) const {
        return top < o.top + o.side && o.top < top + side && left < o.left + o.side &&
               o.left < left + side;
    }
    bool inside(int h, int w) const {
        return top >= 0 && left >= 0 && top + side <= h && left + side <= w;
    }
    bool operator==(const Rect&) const = default;
};

struct PseudoBreakPlan {
    std::vector<Point> keypoints;  // accepted keypoints, in draw order
    std::vector<Rect> fg_windows;  // same order; pairwise non-overlapping, in bounds
    std::vector<Rect> bg_windows;  // chosen background window per keypoint
    Tensor hard_image;             // [1,1,H,W]; equals the input outside fg windows
    Tensor weight_map;             // [1,1,H,W]; 10 on edited foreground, 1 elsewhere
    int rejected_count = 0;        // keypoints dropped by border/background/overlap checks
};

// Pixels above cfg.tau form the candidate set P (row-major scan order);
// ceil(cfg.k * |P|) points are drawn uniformly without replacement.
std::vector<Point> select_keypoints(const ImageF& teacher_pred, const HgConfig& cfg, Rng& rng);

// Foreground window for a keypoint: top-left at (u - s/2, v - s/2).
// Returns nothing when it does not fit in an h x w image.
std::optional<Rect> fg_window_at(Point kp, int s, int h, int w);

// Picks among the up-to-8 in-bounds s x s windows tiled around the keypoint's
// foreground window (offsets {-s,0,s}^2 minus the center) the one with the
// smallest confidence sum, ties broken by smallest (row, col). Returns nothing
// when the foreground window does not fit, no candidate is in bounds, or the
// winner's foreground-pixel ratio (fraction of pixels > 0.5) exceeds tau_bg.
std::optional<Rect> sliding_search(const ImageF& teacher_pred, Point kp, const HgConfig& cfg);

// Direct 2D DFT of a square patch (row-major, size side*side) and its inverse.
// idft2 scales by 1/side^2 so idft2(dft2(x)) == x up to rounding.
std::vector<std::complex<double>> dft2(const ImageF& patch);
std::vector<std::complex<double>> idft2(const std::vector<std::complex<double>>& freq, int side);

// Low-frequency band mask after centering the spectrum, as a flat 0/1 vector in
// unshifted frequency coordinates. The side is clamped to [0, s] and rounded
// down to odd when even: an even square cannot be centered symmetrically, and
// the asymmetry would make the recombined spectrum non-Hermitian (complex
// output). side 0 means "swap nothing", side >= s "swap everything".
std::vector<double> low_freq_mask(int s, int mask_side);

// Swaps the masked low-frequency band of x_fg with x_bg's. The imaginary part
// of the inverse transform must stay below 1e-9 in magnitude (guaranteed by
// the odd-sided centered mask) and is then discarded.
ImageF low_freq_swap_masked(const ImageF& x_fg, const ImageF& x_bg, int mask_side);
ImageF low_freq_swap(const ImageF& x_fg, const ImageF& x_bg, double low_freq_ratio);

// Per-pixel convex blend: x_swap where the pseudo-label is foreground,
// x_fg where it is background. yp values must lie in [0,1].
ImageF compose_pseudobreak(const ImageF& x_fg, const ImageF& x_swap, const ImageF& yp_patch);

// Ablation substitutes for the frequency swap: fixed 5x5 sigma-2 gaussian blur
// of the foreground patch, additive gaussian noise with sigma = 0.2 of the
// patch's dynamic range, or the background patch verbatim (spatial swap).
// The frequency-swap variant is the primary path, not an ablation: rejected.
ImageF variant_augment(const ImageF& x_fg, const ImageF& x_bg, HgVariant variant, Rng& rng);

// Full pipeline on [1,1,H,W] tensors. Keypoints whose windows fall outside the
// image, whose best background window is still too foreground-heavy, or whose
// foreground window overlaps an earlier accepted one are counted in
// rejected_count. All patches are cropped from the pristine input image; only
// foreground windows are pasted back. An empty plan returns the image
// unchanged and a weight map of ones.
PseudoBreakPlan build_plan(const Tensor& image, const Tensor& teacher_pred, const HgConfig& cfg,
                           Rng& rng);

}  // namespace topotta
