#pragma once

#include <cstdint>
#include <vector>

#include "topotta/image.hpp"

namespace topotta {

// ---------------------------------------------------------------------------
// Seeded generator of synthetic tubular images with controllable appearance.
//
// Labels are unions of smooth random-walk curves (optional single fork per
// curve) stamped at a sampled thickness. Curves are placed with a one-pixel
// separation margin, so the label's 8-connected component count equals the
// number of structures kept. Images are formed as
//   intensity(label) -> gaussian blur -> gamma -> additive noise -> optional
//   inversion -> clamp to [0,1],
// all from one per-sample random stream, so a sample is reproducible from
// (spec, seed, index) alone.
// ---------------------------------------------------------------------------

struct DomainSpec {
    int size = 96;                  // square images; must be divisible by 4
    int n_curves_min = 1;
    int n_curves_max = 3;
    double thickness_min = 2.0;     // stamped stroke diameter, pixels
    double thickness_max = 4.0;
    double curvature = 0.25;        // heading jitter per unit step, radians
    double branch_prob = 0.3;       // chance a curve forks once
    double fg_intensity = 0.85;
    double bg_intensity = 0.2;
    double gamma = 1.0;
    double blur_sigma = 0.7;
    double noise_sigma = 0.04;
    bool invert = false;
};

// Throws std::invalid_argument when a field is out of range.
void validate_spec(const DomainSpec& spec);

struct SynthSample {
    ImageF image;
    BinaryMask label;
    int n_structures = 0;  // equals the label's 8-connected component count
};

SynthSample generate_sample(const DomainSpec& spec, std::uint64_t seed, std::uint64_t index);
std::vector<SynthSample> generate_dataset(const DomainSpec& spec, int n_images, std::uint64_t seed);

// The default appearance pair used by the end-to-end experiment: a clean-ish
// source domain and a strongly shifted target (inverted contrast, heavy
// noise, 1.5x thickness).
DomainSpec source_domain();
DomainSpec shifted_domain();

// Edge-renormalized separable gaussian blur (no border darkening);
// sigma <= 0 returns the input unchanged. Exposed for reuse and tests.
ImageF gaussian_blur(const ImageF& img, double sigma);

}  // namespace topotta
