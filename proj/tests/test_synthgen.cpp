#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "topotta/image.hpp"
#include "topotta/synthgen.hpp"
#include "topotta/topology.hpp"

using namespace topotta;

namespace {

bool same_mask(const BinaryMask& a, const BinaryMask& b) {
    return a.h == b.h && a.w == b.w && a.v == b.v;
}

bool same_image(const ImageF& a, const ImageF& b) {
    return a.h == b.h && a.w == b.w && a.v == b.v;  // bitwise, no tolerance
}

double mean_at(const ImageF& img, const BinaryMask& label, std::uint8_t wanted) {
    double acc = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < img.v.size(); ++i)
        if (label.v[i] == wanted) { acc += img.v[i]; ++n; }
    REQUIRE(n > 0);
    return acc / static_cast<double>(n);
}

DomainSpec clean_spec() {
    DomainSpec d;
    d.fg_intensity = 1.0;
    d.bg_intensity = 0.0;
    d.blur_sigma = 0.0;
    d.noise_sigma = 0.0;
    return d;
}

}  // namespace

TEST_CASE("samples are a pure function of spec, seed and index") {
    const DomainSpec spec = source_domain();
    const SynthSample a = generate_sample(spec, 42, 7);
    const SynthSample b = generate_sample(spec, 42, 7);
    CHECK(same_image(a.image, b.image));
    CHECK(same_mask(a.label, b.label));
    CHECK(a.n_structures == b.n_structures);

    const SynthSample c = generate_sample(spec, 43, 7);
    const SynthSample d = generate_sample(spec, 42, 8);
    CHECK_FALSE(same_mask(a.label, c.label));
    CHECK_FALSE(same_mask(a.label, d.label));

    // a dataset is exactly the per-index samples, so streams can be resumed
    const auto set = generate_dataset(spec, 5, 42);
    REQUIRE(set.size() == 5);
    for (int i = 0; i < 5; ++i) {
        const SynthSample s = generate_sample(spec, 42, i);
        CHECK(same_image(set[i].image, s.image));
        CHECK(same_mask(set[i].label, s.label));
        CHECK(set[i].n_structures == s.n_structures);
    }
}

TEST_CASE("structure count equals the label's connected component count") {
    DomainSpec thin;
    thin.thickness_min = 1.0;
    thin.thickness_max = 1.0;
    thin.n_curves_max = 3;
    thin.curvature = 0.35;
    thin.branch_prob = 0.5;

    DomainSpec thick;
    thick.thickness_min = 4.0;
    thick.thickness_max = 6.0;
    thick.n_curves_max = 2;

    DomainSpec branchy;
    branchy.n_curves_min = 2;
    branchy.n_curves_max = 4;
    branchy.branch_prob = 1.0;
    branchy.thickness_min = 2.0;
    branchy.thickness_max = 3.0;

    const std::vector<DomainSpec> specs = {source_domain(), shifted_domain(), thin, thick, branchy};
    for (std::size_t si = 0; si < specs.size(); ++si) {
        const DomainSpec& spec = specs[si];
        for (std::uint64_t i = 0; i < 8; ++i) {
            CAPTURE(si);
            CAPTURE(i);
            const SynthSample s = generate_sample(spec, 1000 + si, i);
            REQUIRE(s.n_structures >= 1);
            CHECK(s.n_structures <= spec.n_curves_max);
            const BettiPair bp = betti_numbers(s.label);
            CHECK(bp.b0 == s.n_structures);
            CHECK(s.label.count() > 0);
            CHECK(skeletonize(s.label).count() > 0);
        }
    }
}

TEST_CASE("with no blur, noise or gamma the image is exactly the label") {
    const DomainSpec spec = clean_spec();
    for (std::uint64_t i = 0; i < 6; ++i) {
        const SynthSample s = generate_sample(spec, 5, i);
        for (double v : s.image.v) CHECK((v == 0.0 || v == 1.0));
        CHECK(same_mask(binarize(s.image, 0.5), s.label));
    }
}

TEST_CASE("image values stay in [0,1] and labels stay binary") {
    for (const DomainSpec& spec : {source_domain(), shifted_domain()}) {
        for (std::uint64_t i = 0; i < 6; ++i) {
            const SynthSample s = generate_sample(spec, 9, i);
            for (double v : s.image.v) {
                CHECK(v >= 0.0);
                CHECK(v <= 1.0);
            }
            for (auto b : s.label.v) CHECK((b == 0 || b == 1));
        }
    }
}

TEST_CASE("gaussian blur: identity cases and interior impulse behavior") {
    ImageF ramp(9, 13);
    for (int y = 0; y < 9; ++y)
        for (int x = 0; x < 13; ++x) ramp.at(y, x) = 0.1 * y + 0.05 * x;

    CHECK(same_image(gaussian_blur(ramp, 0.0), ramp));
    CHECK(same_image(gaussian_blur(ramp, -1.0), ramp));

    // edge renormalization keeps constants exactly constant
    const ImageF flat(7, 7, 0.37);
    const ImageF bf = gaussian_blur(flat, 1.3);
    for (double v : bf.v) CHECK(v == doctest::Approx(0.37).epsilon(1e-12));

    // an impulse far from borders spreads symmetrically and keeps unit mass
    ImageF imp(21, 21);
    imp.at(10, 10) = 1.0;
    const ImageF bi = gaussian_blur(imp, 1.0);
    double mass = 0.0;
    for (double v : bi.v) mass += v;
    CHECK(mass == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(bi.at(10, 10) > bi.at(10, 11));
    for (int d = 1; d <= 3; ++d) {
        CHECK(bi.at(10, 10 + d) == doctest::Approx(bi.at(10, 10 - d)).epsilon(1e-12));
        CHECK(bi.at(10 + d, 10) == doctest::Approx(bi.at(10, 10 + d)).epsilon(1e-12));
    }
}

TEST_CASE("appearance controls act as documented") {
    // contrast: source curves are brighter than background, inverted ones darker
    const SynthSample src = generate_sample(source_domain(), 11, 0);
    CHECK(mean_at(src.image, src.label, 1) > mean_at(src.image, src.label, 0) + 0.2);

    const SynthSample tgt = generate_sample(shifted_domain(), 11, 0);
    CHECK(mean_at(tgt.image, tgt.label, 1) < mean_at(tgt.image, tgt.label, 0) - 0.1);

    // gamma < 1 brightens midtones
    DomainSpec g = clean_spec();
    g.fg_intensity = 0.5;
    g.bg_intensity = 0.5;
    g.gamma = 0.5;
    const SynthSample gs = generate_sample(g, 3, 0);
    for (double v : gs.image.v) CHECK(v == doctest::Approx(std::sqrt(0.5)).epsilon(1e-12));

    // thicker strokes cover more area (same curve counts)
    DomainSpec thin = clean_spec(), thick = clean_spec();
    thin.thickness_min = thin.thickness_max = 1.0;
    thick.thickness_min = thick.thickness_max = 4.0;
    thin.n_curves_min = thin.n_curves_max = 2;
    thick.n_curves_min = thick.n_curves_max = 2;
    std::size_t thin_px = 0, thick_px = 0;
    for (std::uint64_t i = 0; i < 5; ++i) {
        thin_px += generate_sample(thin, 21, i).label.count();
        thick_px += generate_sample(thick, 21, i).label.count();
    }
    CHECK(thick_px > 2 * thin_px);

    // the shifted preset really is the documented triple
    const DomainSpec sd = shifted_domain();
    CHECK(sd.invert);
    CHECK(sd.noise_sigma == doctest::Approx(0.15));
    CHECK(sd.thickness_min == doctest::Approx(1.5 * source_domain().thickness_min));
    CHECK(sd.thickness_max == doctest::Approx(1.5 * source_domain().thickness_max));
}

TEST_CASE("spec validation rejects out-of-range fields") {
    auto broken = [](auto&& mutate) {
        DomainSpec d;
        mutate(d);
        return d;
    };
    CHECK_THROWS_AS(validate_spec(broken([](DomainSpec& d) { d.size = 30; })), std::invalid_argument);
    CHECK_THROWS_AS(validate_spec(broken([](DomainSpec& d) { d.size = 12; })), std::invalid_argument);
    CHECK_THROWS_AS(validate_spec(broken([](DomainSpec& d) { d.n_curves_min = 0; })), std::invalid_argument);
    CHECK_THROWS_AS(validate_spec(broken([](DomainSpec& d) { d.n_curves_max = 0; })), std::invalid_argument);
    CHECK_THROWS_AS(validate_spec(broken([](DomainSpec& d) { d.thickness_min = 0.5; })), std::invalid_argument);
    CHECK_THROWS_AS(validate_spec(broken([](DomainSpec& d) { d.thickness_max = 1.0; })), std::invalid_argument);
    CHECK_THROWS_AS(validate_spec(broken([](DomainSpec& d) { d.thickness_max = 30.0; })), std::invalid_argument);
    CHECK_THROWS_AS(validate_spec(broken([](DomainSpec& d) { d.fg_intensity = 1.2; })), std::invalid_argument);
    CHECK_THROWS_AS(validate_spec(broken([](DomainSpec& d) { d.bg_intensity = -0.1; })), std::invalid_argument);
    CHECK_THROWS_AS(validate_spec(broken([](DomainSpec& d) { d.curvature = -0.01; })), std::invalid_argument);
    CHECK_THROWS_AS(validate_spec(broken([](DomainSpec& d) { d.branch_prob = 1.5; })), std::invalid_argument);
    CHECK_THROWS_AS(validate_spec(broken([](DomainSpec& d) { d.gamma = 0.0; })), std::invalid_argument);
    CHECK_THROWS_AS(validate_spec(broken([](DomainSpec& d) { d.blur_sigma = -1.0; })), std::invalid_argument);
    CHECK_THROWS_AS(validate_spec(broken([](DomainSpec& d) { d.noise_sigma = -1.0; })), std::invalid_argument);
    CHECK_NOTHROW(validate_spec(DomainSpec{}));

    CHECK_THROWS_AS(generate_sample(broken([](DomainSpec& d) { d.gamma = -1.0; }), 1, 0),
                    std::invalid_argument);
    CHECK_THROWS_AS(generate_dataset(DomainSpec{}, 0, 1), std::invalid_argument);
}
