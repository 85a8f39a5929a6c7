#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "topotta/image.hpp"
#include "topotta/optim.hpp"
#include "topotta/rng.hpp"
#include "topotta/segnet.hpp"
#include "topotta/topohg.hpp"

namespace topotta {

// ---------------------------------------------------------------------------
// Two-stage test-time adaptation of a source-trained segmenter, one sample at
// a time:
//   Stage 1 wraps the encoder convolutions with the patch-routed corrected
//   convolution and minimizes prediction entropy over the router deltas only
//   (all network weights frozen, deltas reset to zero per sample).
//   Stage 2 keeps the deltas fixed and aligns an augmented student against an
//   augmentation-averaged teacher on hard-sample edits of the input, updating
//   the student weights by Adam and the teacher by EMA.
// The final output is a plain student forward of the unmodified image.
// ---------------------------------------------------------------------------

struct AdaptConfig {
    int iterations = 6;       // per sample, split evenly between the stages
    double lr_stage1 = 0.01;  // router-delta learning rate
    double lr_stage2 = 1e-4;  // student weight learning rate
    double ema_rate = 0.999;  // teacher <- rate*teacher + (1-rate)*student
    int teacher_rounds = 4;   // augmentation rounds averaged into the pseudo-label
    int student_rounds = 1;   // augmentation rounds averaged into the stage-2 loss
    std::vector<double> scales = {0.5, 1.0, 1.25, 1.5};
    int patch_grid = 4;       // router regions per axis
    bool continual = true;    // carry student/teacher/optimizer across the stream
    double binarize_threshold = 0.5;
    double log_eps = 1e-7;
    HgConfig hg;              // hard-sample generation settings
};

// Throws std::invalid_argument when a field is out of range.
void validate_adapt(const AdaptConfig& cfg);

struct StageOneRecord {
    std::vector<double> em;  // entropy loss before each delta step
    double em_final = 0.0;   // entropy re-evaluated after the last step
};

struct StageTwoRecord {
    std::vector<double> ce;      // consistency loss per iteration
    std::vector<int> keypoints;  // accepted pseudo-break keypoints per iteration
    std::vector<int> rejected;   // rejected keypoints per iteration
};

struct SampleRecord {
    int index = 0;
    StageOneRecord stage1;
    StageTwoRecord stage2;
};

// One line per sample: index, per-step entropies, final entropy, per-step
// consistency losses, keypoint counts.
std::string format_record(const SampleRecord& rec);

struct AdaptState {
    SegModel student;            // wrapped; weights update in stage 2
    SegModel teacher;            // wrapped over the same router; EMA only
    SegModel source;             // pristine unwrapped copy for episodic resets
    AdamState delta_adam;        // reset per sample together with the deltas
    AdamState theta_adam;        // persists across samples in continual mode
    int samples_seen = 0;
};

// Clones the source model into a shared-router student/teacher pair. The
// source model must be unwrapped; teacher parameters never require gradients.
AdaptState make_adapt_state(const SegModel& source, const AdaptConfig& cfg);

// iterations/2 Adam steps on the router deltas; every student weight is
// bitwise untouched. Deltas are expected to be freshly zeroed by the caller
// (adapt_sample does this). Throws std::runtime_error on non-finite loss.
StageOneRecord adapt_stage1(AdaptState& st, const Tensor& image, const AdaptConfig& cfg);

// Mean teacher probability map over teacher_rounds random flip/scale rounds,
// each mapped back into the original frame. Plain buffer, no graph.
ImageF teacher_pseudolabel(AdaptState& st, const ImageF& image, const AdaptConfig& cfg, Rng& rng);

// iterations/2 rounds of: pseudo-label -> pseudo-break plan -> augmented
// student forward mapped back to the original frame -> weighted consistency
// step on the student weights -> teacher EMA. Deltas are read, never written.
StageTwoRecord adapt_stage2(AdaptState& st, const ImageF& image, const AdaptConfig& cfg, Rng& rng);

// Full per-sample pipeline: delta reset, stage 1, stage 2, final forward of
// the unmodified image. In episodic mode (continual = false) the student,
// teacher and weight optimizer are first restored from the source snapshot.
ImageF adapt_sample(AdaptState& st, const ImageF& image, const AdaptConfig& cfg, Rng& rng,
                    SampleRecord* rec = nullptr);

struct StreamResult {
    std::vector<ImageF> prob_maps;      // final per-sample probability maps
    std::vector<SampleRecord> records;  // per-sample adaptation traces
};

// Adapts over an ordered stream. Per-sample randomness comes from
// Rng(seed).fork(sample index), so the run is reproducible bitwise.
StreamResult adapt_stream(const SegModel& source, const std::vector<ImageF>& images,
                          const AdaptConfig& cfg, std::uint64_t seed);

// Plain forwards with the source model, no adaptation (the baseline).
std::vector<ImageF> predict_stream(const SegModel& source, const std::vector<ImageF>& images);

}  // namespace topotta
