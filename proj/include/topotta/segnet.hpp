#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "topotta/rng.hpp"
#include "topotta/tensor.hpp"
#include "topotta/topomdc.hpp"

namespace topotta {

// ---------------------------------------------------------------------------
// U-shaped binary segmentation net.
//
// Encoder: `levels` blocks of [3x3 conv (no bias) -> BN -> ReLU] x2, each
// followed by 2x2 max pooling except the deepest. Channel widths double per
// level starting from base_channels. Decoder mirrors with bilinear x2
// upsampling + skip concatenation. Head is a 1x1 conv with bias + sigmoid.
// Inputs are NCHW with H and W divisible by 2^(levels-1).
//
// Parameters live in an ordered map; BN running statistics are plain buffers
// kept outside the graph. The encoder 3x3 convs (both convs of every encoder
// block, deepest included) form the replaceable set: wrap_encoder swaps them
// for the patch-mixed corrected convolution, one [n*n, 8] delta row each,
// without touching any weight. With all deltas zero the wrapped forward is
// bit-identical to the plain one.
// ---------------------------------------------------------------------------

struct BnStats {
    std::vector<double> mean, var;
};

struct SegModel {
    int levels = 3;
    int base_channels = 8;
    int in_channels = 1;
    std::map<std::string, Tensor> params;   // deterministic (lexicographic) order
    std::map<std::string, BnStats> stats;   // keyed by BN prefix, e.g. "enc0.bn1"
    std::shared_ptr<RouterParams> router;   // non-null while the encoder is wrapped

    bool wrapped() const { return static_cast<bool>(router); }
    std::vector<std::string> param_names() const;
    std::vector<Tensor> param_list() const;  // same order as param_names()
};

// Seeded He-normal init for conv weights; BN gamma=1 beta=0, running mean=0
// var=1, head bias 0.
SegModel make_seg_model(int levels, int base_channels, int in_channels, std::uint64_t seed);

// Encoder 3x3 conv parameter names in forward order (the replaceable set).
std::vector<std::string> encoder_conv_names(const SegModel& m);

struct ForwardOpts {
    // When set, BN normalizes each batch with its own statistics (entering the
    // graph as constants) and folds them into the running buffers; otherwise
    // the stored running statistics are used.
    bool train_bn = false;
    double bn_momentum = 0.1;
};

Tensor seg_forward(SegModel& m, const Tensor& x, const ForwardOpts& opts = {});

// Attach a fresh all-zero router (one delta row per encoder conv, grads on).
// Throws if already wrapped.
std::shared_ptr<RouterParams> wrap_encoder(SegModel& m, int patch_grid);
// Attach an existing router so two models (teacher/student) share deltas.
void wrap_encoder_with(SegModel& m, std::shared_ptr<RouterParams> router);
// Detach; the model is bitwise back to its pre-wrap behavior.
void unwrap_encoder(SegModel& m);

// Deep copy of parameters and statistics. The router is not carried over.
SegModel clone_model(const SegModel& m);

// teacher <- rate * teacher + (1 - rate) * student for every parameter;
// running BN statistics are copied from the student verbatim.
void ema_update(SegModel& teacher, const SegModel& student, double rate);

// Checkpoints use the tensor container format (see image_io.hpp) with
// kind "checkpoint", meta keys levels/base_channels/in_channels, every
// parameter under its own name and BN statistics as "stats.<bn>.mean"/".var".
void save_checkpoint(const std::string& path, const SegModel& m);
SegModel load_checkpoint(const std::string& path);

// ---------------------------------------------------------------------------
// Supervised source training
// ---------------------------------------------------------------------------

struct LabeledImage {
    Tensor image;  // [1,1,H,W], values in [0,1]
    Tensor label;  // [1,1,H,W], values in {0,1}
};

struct TrainConfig {
    int epochs = 30;
    int batch_size = 4;
    double lr = 5e-4;
    double val_fraction = 0.1;  // held out for best-epoch selection
    bool flip_augment = true;   // random horizontal/vertical flips
    double bn_momentum = 0.1;
    std::uint64_t seed = 1;
};

struct TrainReport {
    std::vector<double> epoch_loss;  // mean train batch loss per epoch
    std::vector<double> val_dice;    // mean validation Dice per epoch
    int best_epoch = -1;             // 0-based; the weights left in the model
    double best_val_dice = 0.0;
};

// Adam on soft-Dice + BCE. The model is left at the best-validation-Dice
// epoch (parameters and BN statistics). Throws if the loss goes non-finite.
TrainReport train_source(SegModel& m, const std::vector<LabeledImage>& data, const TrainConfig& cfg);

}  // namespace topotta
