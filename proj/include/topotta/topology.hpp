#pragma once

#include <string>
#include <vector>

#include "topotta/image.hpp"

namespace topotta {

// ---------------------------------------------------------------------------
// Topology-aware metrics on binary masks.
//
// Connectivity convention used throughout (declared in every metric report):
// foreground components are 8-connected, holes are 4-connected background
// components with no path to the image border. Betti error is the
// whole-image |delta b0| + |delta b1| unless the patched variant is used.
// ---------------------------------------------------------------------------

struct BettiPair {
    int b0 = 0;  // 8-connected foreground components
    int b1 = 0;  // 4-connected enclosed background components (holes)
    bool operator==(const BettiPair&) const = default;
};

// 2|A n B| / (|A| + |B|); both masks empty -> 1.
double dice_score(const BinaryMask& a, const BinaryMask& b);

BettiPair betti_numbers(const BinaryMask& m);

// |b0_pred - b0_gt| + |b1_pred - b1_gt| on the whole image.
int betti_error(const BinaryMask& pred, const BinaryMask& gt);

// Mean per-tile Betti error over non-overlapping patch x patch tiles (the
// last row/column of tiles absorbs any remainder).
double betti_error_patched(const BinaryMask& pred, const BinaryMask& gt, int patch);

// Connectivity-preserving thinning to a 1-pixel-wide, 8-connected skeleton.
// Two-subcycle candidate selection; each candidate is re-verified as a simple
// point on the current image before removal, so b0 and b1 never change and a
// 2x2 block keeps a thin remnant instead of vanishing.
BinaryMask skeletonize(const BinaryMask& m);

// Centerline Dice. Undefined exactly when either skeleton is empty (i.e.
// either mask has no foreground).
struct ClDice {
    double value = 0.0;
    bool defined = false;
};
ClDice cl_dice(const BinaryMask& pred, const BinaryMask& gt);

// Area-based resize that keeps thin structures connected: area-interpolate
// the mask, binarize at > 0.5, OR with the skeleton of the > 0 binarization.
BinaryMask resize_label(const BinaryMask& m, int out_h, int out_w);

// Fractional box-coverage average of a mask onto an out_h x out_w grid,
// values in [0,1]. Exposed for tests of resize_label's interpolation step.
std::vector<double> area_interpolate(const BinaryMask& m, int out_h, int out_w);

// Everything above for one prediction/ground-truth pair.
struct TopologyReport {
    double dice = 0.0;
    ClDice cldice;
    int betti_err = 0;
    BettiPair betti_pred, betti_gt;
};
TopologyReport evaluate_pair(const BinaryMask& pred, const BinaryMask& gt);

// One line per report plus an aggregate footer with means and the count of
// undefined clDice entries; header names the connectivity convention.
std::string format_report(const std::vector<std::string>& names,
                          const std::vector<TopologyReport>& reports);

}  // namespace topotta
