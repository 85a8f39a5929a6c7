#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "support.hpp"
#include "topotta/adapt.hpp"
#include "topotta/image.hpp"
#include "topotta/ops.hpp"
#include "topotta/rng.hpp"
#include "topotta/segnet.hpp"
#include "topotta/synthgen.hpp"

using namespace topotta;
using support::rand_tensor;

namespace {

SegModel small_model(std::uint64_t seed = 11) { return make_seg_model(2, 4, 1, seed); }

ImageF test_image(std::uint64_t seed = 3) {
    Rng rng(seed);
    ImageF img(24, 24);
    for (double& v : img.v) v = rng.uniform(0.0, 1.0);
    return img;
}

AdaptConfig small_cfg() {
    AdaptConfig cfg;
    cfg.patch_grid = 2;
    cfg.scales = {1.0};
    cfg.teacher_rounds = 2;
    return cfg;
}

std::map<std::string, std::vector<double>> snapshot_params(const SegModel& m) {
    std::map<std::string, std::vector<double>> s;
    for (const auto& [name, p] : m.params) s[name] = p.data();
    return s;
}

std::vector<std::vector<double>> snapshot_deltas(const SegModel& m) {
    std::vector<std::vector<double>> s;
    for (const Tensor& d : m.router->delta) s.push_back(d.data());
    return s;
}

std::uint64_t find_seed(const std::function<bool(Rng&)>& want) {
    for (std::uint64_t s = 0; s < 100000; ++s) {
        Rng r(s);
        if (want(r)) return s;
    }
    REQUIRE_MESSAGE(false, "no seed satisfies the transform predicate");
    return 0;
}

// one teacher round consumes: bernoulli(flip_h), bernoulli(flip_v), scale index
bool round_draws(Rng& r, bool fh, bool fv) {
    const bool a = r.bernoulli(0.5), b = r.bernoulli(0.5);
    r.uniform_int(0, 0);
    return a == fh && b == fv;
}

// Source model trained once on tiny synthetic tubes and reused by the
// integration cases below.
const SegModel& trained_model() {
    static const SegModel m = [] {
        DomainSpec spec = source_domain();
        spec.size = 24;
        spec.thickness_min = 2.0;
        spec.thickness_max = 3.0;
        spec.n_curves_max = 2;
        const auto data = generate_dataset(spec, 32, 99);
        std::vector<LabeledImage> set;
        for (const auto& s : data)
            set.push_back({tensor_from_image(s.image), tensor_from_image(image_from_mask(s.label))});
        SegModel model = make_seg_model(2, 4, 1, 11);
        TrainConfig cfg;
        cfg.epochs = 80;
        cfg.batch_size = 4;
        cfg.lr = 2e-2;
        cfg.val_fraction = 0.125;
        cfg.seed = 5;
        const TrainReport rep = train_source(model, set, cfg);
        REQUIRE(rep.best_val_dice > 0.9);
        return model;
    }();
    return m;
}

DomainSpec tiny_source_spec() {
    DomainSpec spec = source_domain();
    spec.size = 24;
    spec.thickness_min = 2.0;
    spec.thickness_max = 3.0;
    spec.n_curves_max = 2;
    return spec;
}

}  // namespace

TEST_CASE("config validation") {
    CHECK_NOTHROW(validate_adapt(AdaptConfig{}));
    auto broken = [](auto&& mutate) {
        AdaptConfig c;
        mutate(c);
        return c;
    };
    CHECK_THROWS_AS(validate_adapt(broken([](AdaptConfig& c) { c.iterations = 5; })),
                    std::invalid_argument);
    CHECK_THROWS_AS(validate_adapt(broken([](AdaptConfig& c) { c.iterations = 0; })),
                    std::invalid_argument);
    CHECK_THROWS_AS(validate_adapt(broken([](AdaptConfig& c) { c.lr_stage1 = -1e-3; })),
                    std::invalid_argument);
    CHECK_THROWS_AS(validate_adapt(broken([](AdaptConfig& c) { c.ema_rate = 0.0; })),
                    std::invalid_argument);
    CHECK_THROWS_AS(validate_adapt(broken([](AdaptConfig& c) { c.ema_rate = 1.1; })),
                    std::invalid_argument);
    CHECK_THROWS_AS(validate_adapt(broken([](AdaptConfig& c) { c.teacher_rounds = 0; })),
                    std::invalid_argument);
    CHECK_THROWS_AS(validate_adapt(broken([](AdaptConfig& c) { c.scales.clear(); })),
                    std::invalid_argument);
    CHECK_THROWS_AS(validate_adapt(broken([](AdaptConfig& c) { c.scales = {1.0, 0.0}; })),
                    std::invalid_argument);
    CHECK_THROWS_AS(validate_adapt(broken([](AdaptConfig& c) { c.binarize_threshold = 1.0; })),
                    std::invalid_argument);
    CHECK_THROWS_AS(validate_adapt(broken([](AdaptConfig& c) { c.log_eps = 0.7; })),
                    std::invalid_argument);
    CHECK_THROWS_AS(validate_adapt(broken([](AdaptConfig& c) { c.patch_grid = 0; })),
                    std::invalid_argument);
    CHECK_THROWS_AS(validate_adapt(broken([](AdaptConfig& c) { c.hg.s = 2; })),
                    std::invalid_argument);
}

TEST_CASE("spatial crop: values and gradient") {
    Rng rng(2);
    const Tensor x = rand_tensor({1, 2, 4, 5}, rng);
    const Tensor c = crop_spatial(x, 3, 2);
    REQUIRE(c.shape() == Shape{1, 2, 3, 2});
    for (int ch = 0; ch < 2; ++ch)
        for (int y = 0; y < 3; ++y)
            for (int xx = 0; xx < 2; ++xx)
                CHECK(c.data()[(static_cast<std::size_t>(ch) * 3 + y) * 2 + xx] ==
                      x.data()[(static_cast<std::size_t>(ch) * 4 + y) * 5 + xx]);
    CHECK_THROWS_AS(crop_spatial(x, 5, 2), std::invalid_argument);

    auto quad = [](const Tensor& t) { return sum_all(mul(t, t)); };
    const double err = grad_check(
        [&](const Tensor& t) { return quad(resize_bilinear(crop_spatial(t, 3, 4), 6, 7)); },
        rand_tensor({1, 2, 5, 6}, rng));
    CHECK(err < 1e-4);
}

TEST_CASE("loss values match scalar-loop transcriptions") {
    Rng rng(4);
    const Tensor p = support::rand_prob({1, 1, 6, 7}, rng, 0.02, 0.98);

    double h = 0.0;
    for (double v : p.data()) h += -(v * std::log(v) + (1.0 - v) * std::log(1.0 - v));
    CHECK(entropy_loss(p).item() == doctest::Approx(h).epsilon(1e-12));

    // saturated prediction contributes (almost) nothing
    const Tensor sat = Tensor::from_data({1}, {1.0 - 1e-7});
    CHECK(entropy_loss(sat).item() < 2e-6);
    CHECK(entropy_loss(Tensor::from_data({1}, {0.5})).item() ==
          doctest::Approx(std::log(2.0)).epsilon(1e-15));

    const Tensor t = support::rand_prob({1, 1, 6, 7}, rng, 0.02, 0.98);
    const Tensor s = support::rand_prob({1, 1, 6, 7}, rng, 0.02, 0.98);
    std::vector<double> wv(42);
    for (auto& v : wv) v = rng.bernoulli(0.3) ? 10.0 : 1.0;
    const Tensor w = Tensor::from_data({1, 1, 6, 7}, wv);
    double ce = 0.0;
    for (std::size_t i = 0; i < 42; ++i) {
        const double tv = t.data()[i], sv = s.data()[i];
        ce += -wv[i] * (tv * std::log(sv) + (1.0 - tv) * std::log(1.0 - sv) +
                        sv * std::log(tv) + (1.0 - sv) * std::log(1.0 - tv));
    }
    CHECK(weighted_consistency_loss(t, s, w).item() == doctest::Approx(ce).epsilon(1e-12));

    // doubling one pixel's weight doubles exactly that pixel's contribution
    std::vector<double> w2 = wv;
    w2[10] *= 2.0;
    const double base = weighted_consistency_loss(t, s, w).item();
    const double boosted =
        weighted_consistency_loss(t, s, Tensor::from_data({1, 1, 6, 7}, w2)).item();
    const double tv = t.data()[10], sv = s.data()[10];
    const double pix = -(tv * std::log(sv) + (1.0 - tv) * std::log(1.0 - sv) +
                         sv * std::log(tv) + (1.0 - sv) * std::log(1.0 - tv));
    CHECK(boosted - base == doctest::Approx(wv[10] * pix).epsilon(1e-9));

    // 0.5 everywhere, weight 1, single pixel -> 2 ln 2
    const Tensor half = Tensor::from_data({1}, {0.5});
    CHECK(weighted_consistency_loss(half, half, Tensor::from_data({1}, {1.0})).item() ==
          doctest::Approx(2.0 * std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("adam matches a hand-stepped trace on x^2") {
    Tensor x = Tensor::from_data({1}, {1.0}, true);
    std::vector<Tensor> ps{x};
    AdamState st;
    double xs = 1.0, m = 0.0, v = 0.0;
    for (int t = 1; t <= 3; ++t) {
        x.zero_grad();
        backward(mul(x, x));
        adam_step(ps, st, 0.1);

        const double g = 2.0 * xs;
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        const double mh = m / (1.0 - std::pow(0.9, t));
        const double vh = v / (1.0 - std::pow(0.999, t));
        xs -= 0.1 * mh / (std::sqrt(vh) + 1e-8);
        CHECK(x.data()[0] == doctest::Approx(xs).epsilon(1e-12));
    }
    CHECK(ps[0].data()[0] < 0.75);  // three near-lr steps from 1.0
}

TEST_CASE("adapt state wiring") {
    const SegModel src = small_model();
    const AdaptConfig cfg = small_cfg();
    AdaptState st = make_adapt_state(src, cfg);

    CHECK(st.student.wrapped());
    CHECK(st.teacher.wrapped());
    CHECK(st.student.router == st.teacher.router);  // shared deltas
    CHECK_FALSE(st.source.wrapped());
    for (const auto& [name, p] : st.teacher.params) CHECK_FALSE(p.requires_grad());
    for (const auto& [name, p] : st.student.params) CHECK(p.requires_grad());

    SegModel wrapped_src = clone_model(src);
    wrap_encoder(wrapped_src, 2);
    CHECK_THROWS_AS(make_adapt_state(wrapped_src, cfg), std::invalid_argument);
}

TEST_CASE("zero learning rates reproduce the source prediction bitwise") {
    const SegModel src = small_model();
    AdaptConfig cfg = small_cfg();
    cfg.lr_stage1 = 0.0;
    cfg.lr_stage2 = 0.0;
    AdaptState st = make_adapt_state(src, cfg);

    // plant garbage in the deltas: adapt_sample must reset them before use
    for (Tensor& d : st.student.router->delta)
        for (double& v : d.raw()) v = 0.37;

    const ImageF img = test_image();
    Rng rng(5);
    SampleRecord rec;
    const ImageF out = adapt_sample(st, img, cfg, rng, &rec);

    const std::vector<ImageF> base = predict_stream(src, {img});
    CHECK(out.v == base[0].v);

    REQUIRE(rec.stage1.em.size() == 3);
    REQUIRE(rec.stage2.ce.size() == 3);
    CHECK(rec.stage2.keypoints.size() == 3);
    CHECK(rec.stage1.em_final == rec.stage1.em[0]);  // deltas never moved
    for (const Tensor& d : st.student.router->delta)
        for (double v : d.data()) CHECK(v == 0.0);
}

TEST_CASE("stage 1 only moves deltas; stage 2 only moves weights") {
    const SegModel src = small_model();
    AdaptConfig cfg = small_cfg();
    cfg.lr_stage1 = 0.05;
    cfg.lr_stage2 = 1e-3;
    AdaptState st = make_adapt_state(src, cfg);
    const ImageF img = test_image();
    const Tensor img_t = tensor_from_image(img);

    const auto theta_before = snapshot_params(st.student);
    const auto stats_before = st.student.stats;
    const StageOneRecord s1 = adapt_stage1(st, img_t, cfg);
    REQUIRE(s1.em.size() == 3);
    for (const auto& [name, p] : st.student.params)
        CHECK(p.data() == theta_before.at(name));  // bitwise frozen
    double dmax = 0.0;
    for (const Tensor& d : st.student.router->delta)
        for (double v : d.data()) dmax = std::max(dmax, std::abs(v));
    CHECK(dmax > 0.0);

    const auto delta_before = snapshot_deltas(st.student);
    Rng rng(9);
    const StageTwoRecord s2 = adapt_stage2(st, img, cfg, rng);
    REQUIRE(s2.ce.size() == 3);
    CHECK(snapshot_deltas(st.student) == delta_before);  // bitwise frozen
    bool theta_moved = false;
    for (const auto& [name, p] : st.student.params)
        if (p.data() != theta_before.at(name)) theta_moved = true;
    CHECK(theta_moved);

    // evaluation-mode adaptation never touches the BN statistics
    for (const auto& [key, bs] : st.student.stats) {
        CHECK(bs.mean == stats_before.at(key).mean);
        CHECK(bs.var == stats_before.at(key).var);
    }
    // teacher statistics follow the student verbatim after EMA
    for (const auto& [key, bs] : st.teacher.stats) CHECK(bs.mean == st.student.stats.at(key).mean);
}

TEST_CASE("teacher pseudo-label transform paths match manual compositions") {
    const SegModel src = small_model(21);
    AdaptConfig cfg = small_cfg();
    cfg.teacher_rounds = 1;
    AdaptState st = make_adapt_state(src, cfg);
    const ImageF img = test_image(7);

    SUBCASE("identity round equals the plain forward") {
        const auto seed = find_seed([](Rng& r) { return round_draws(r, false, false); });
        Rng rng(seed);
        const ImageF pl = teacher_pseudolabel(st, img, cfg, rng);
        const Tensor plain = seg_forward(st.teacher, tensor_from_image(img));
        CHECK(pl.v == plain.data());
    }

    SUBCASE("flip rounds invert exactly") {
        for (const auto [fh, fv] : {std::pair{true, false}, {false, true}, {true, true}}) {
            const auto seed = find_seed([=](Rng& r) { return round_draws(r, fh, fv); });
            Rng rng(seed);
            const ImageF pl = teacher_pseudolabel(st, img, cfg, rng);

            ImageF flipped(img.h, img.w);
            for (int y = 0; y < img.h; ++y)
                for (int x = 0; x < img.w; ++x)
                    flipped.at(y, x) = img.at(fv ? img.h - 1 - y : y, fh ? img.w - 1 - x : x);
            Tensor back = seg_forward(st.teacher, tensor_from_image(flipped));
            if (fv) back = flip_v(back);
            if (fh) back = flip_h(back);
            CHECK(pl.v == back.data());
        }
    }

    SUBCASE("downscale round resizes there and back") {
        AdaptConfig half = cfg;
        half.scales = {0.5};
        const auto seed = find_seed([](Rng& r) { return round_draws(r, false, false); });
        Rng rng(seed);
        const ImageF pl = teacher_pseudolabel(st, img, half, rng);

        const Tensor small = resize_bilinear(tensor_from_image(img), 12, 12);
        const Tensor back = resize_bilinear(seg_forward(st.teacher, small), 24, 24);
        CHECK(pl.v == back.data());
    }

    SUBCASE("non-divisible scaled size is padded then cropped") {
        AdaptConfig odd = cfg;
        odd.scales = {0.55};  // 24 -> 13, padded to 14 for the stride-2 net
        const auto seed = find_seed([](Rng& r) { return round_draws(r, false, false); });
        Rng rng(seed);
        const ImageF pl = teacher_pseudolabel(st, img, odd, rng);

        const Tensor small = resize_bilinear(tensor_from_image(img), 13, 13);
        ImageF padded(14, 14, 0.0);
        for (int y = 0; y < 13; ++y)
            for (int x = 0; x < 13; ++x)
                padded.at(y, x) = small.data()[static_cast<std::size_t>(y) * 13 + x];
        const Tensor pred = seg_forward(st.teacher, tensor_from_image(padded));
        const Tensor back = resize_bilinear(crop_spatial(pred, 13, 13), 24, 24);
        CHECK(pl.v == back.data());
    }

    SUBCASE("averaging identical rounds returns that round") {
        AdaptConfig four = cfg;
        four.teacher_rounds = 4;
        const auto seed = find_seed([](Rng& r) {
            for (int i = 0; i < 4; ++i)
                if (!round_draws(r, false, false)) return false;
            return true;
        });
        Rng rng(seed);
        const ImageF pl = teacher_pseudolabel(st, img, four, rng);
        const Tensor plain = seg_forward(st.teacher, tensor_from_image(img));
        for (std::size_t i = 0; i < pl.v.size(); ++i)
            CHECK(pl.v[i] == doctest::Approx(plain.data()[i]).epsilon(1e-15));
    }
}

TEST_CASE("ema trajectory matches the closed form over five steps") {
    const SegModel src = small_model(31);
    SegModel teacher = clone_model(src);
    SegModel student = clone_model(src);
    const double r = 0.999;

    // independent replay with plain vectors
    std::map<std::string, std::vector<double>> expect = snapshot_params(teacher);
    Rng rng(13);
    for (int step = 0; step < 5; ++step) {
        for (auto& [name, p] : student.params)
            for (double& v : p.raw()) v += rng.uniform(-0.01, 0.01);
        ema_update(teacher, student, r);
        for (auto& [name, e] : expect) {
            const auto& s = student.params.at(name).data();
            for (std::size_t i = 0; i < e.size(); ++i) e[i] = r * e[i] + (1.0 - r) * s[i];
        }
    }
    for (const auto& [name, p] : teacher.params) {
        const auto& e = expect.at(name);
        const auto& got = p.data();
        for (std::size_t i = 0; i < e.size(); ++i)
            CHECK(got[i] == doctest::Approx(e[i]).epsilon(1e-12));
    }
}

TEST_CASE("stage 2 with no accepted keypoints still updates the student") {
    const SegModel src = small_model(41);
    AdaptConfig cfg = small_cfg();
    cfg.lr_stage2 = 1e-3;
    AdaptState st = make_adapt_state(src, cfg);  // untrained: nothing clears tau=0.95
    const ImageF img = test_image(9);

    const auto before = snapshot_params(st.student);
    Rng rng(3);
    const StageTwoRecord rec = adapt_stage2(st, img, cfg, rng);
    for (int k : rec.keypoints) CHECK(k == 0);
    for (double c : rec.ce) CHECK(std::isfinite(c));
    bool moved = false;
    for (const auto& [name, p] : st.student.params)
        if (p.data() != before.at(name)) moved = true;
    CHECK(moved);

    // after the first EMA step the teacher sits exactly between source and student
    // teacher_1 = r*theta_src + (1-r)*theta_1 composed over the three iterations is
    // checked in the dedicated closed-form case; here just confirm it moved off source
    bool teacher_moved = false;
    for (const auto& [name, p] : st.teacher.params)
        if (p.data() != before.at(name)) teacher_moved = true;
    CHECK(teacher_moved);
}

TEST_CASE("episodic mode replays identically; continual mode drifts") {
    const SegModel src = small_model(51);
    const ImageF img = test_image(12);

    AdaptConfig epi = small_cfg();
    epi.continual = false;
    epi.lr_stage1 = 0.05;
    epi.lr_stage2 = 1e-3;
    AdaptState st = make_adapt_state(src, epi);
    Rng r1(77), r2(77);
    SampleRecord a, b;
    const ImageF out_a = adapt_sample(st, img, epi, r1, &a);
    const ImageF out_b = adapt_sample(st, img, epi, r2, &b);
    CHECK(out_a.v == out_b.v);
    CHECK(a.stage1.em == b.stage1.em);
    CHECK(a.stage2.ce == b.stage2.ce);
    CHECK(a.index == 0);
    CHECK(b.index == 1);

    AdaptConfig con = epi;
    con.continual = true;
    AdaptState st2 = make_adapt_state(src, con);
    Rng r3(77), r4(77);
    SampleRecord c, d;
    const ImageF out_c = adapt_sample(st2, img, con, r3, &c);
    const ImageF out_d = adapt_sample(st2, img, con, r4, &d);
    CHECK(out_c.v == out_a.v);  // first samples agree across modes
    CHECK(out_c.v != out_d.v);  // carried-over weights change the second pass
}

TEST_CASE("stream adaptation is reproducible bitwise") {
    const SegModel src = small_model(61);
    AdaptConfig cfg = small_cfg();
    cfg.lr_stage1 = 0.02;
    cfg.lr_stage2 = 1e-3;
    cfg.scales = {0.5, 1.0};
    std::vector<ImageF> stream = {test_image(1), test_image(2), test_image(3)};

    const StreamResult x = adapt_stream(src, stream, cfg, 2024);
    const StreamResult y = adapt_stream(src, stream, cfg, 2024);
    const StreamResult z = adapt_stream(src, stream, cfg, 2025);
    REQUIRE(x.prob_maps.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(x.prob_maps[i].v == y.prob_maps[i].v);
        CHECK(x.records[i].stage1.em == y.records[i].stage1.em);
        CHECK(x.records[i].stage2.ce == y.records[i].stage2.ce);
        CHECK(static_cast<int>(i) == x.records[i].index);
        for (double v : x.prob_maps[i].v) {
            CHECK(v > 0.0);
            CHECK(v < 1.0);
        }
    }
    bool differs = false;
    for (std::size_t i = 0; i < 3; ++i)
        if (x.prob_maps[i].v != z.prob_maps[i].v) differs = true;
    CHECK(differs);

    const std::string line = format_record(x.records[0]);
    CHECK(line.find("sample 0 em ") == 0);
    CHECK(line.find(" em_final ") != std::string::npos);
    CHECK(line.find(" keypoints ") != std::string::npos);
}

TEST_CASE("trained model: hard samples engage and entropy descends") {
    const SegModel& src = trained_model();

    AdaptConfig cfg = small_cfg();
    cfg.lr_stage1 = 0.01;
    cfg.lr_stage2 = 1e-4;
    cfg.hg.tau = 0.9;
    cfg.hg.k = 0.05;
    cfg.hg.s = 6;

    SUBCASE("keypoints are accepted on confident tube predictions") {
        AdaptState st = make_adapt_state(src, cfg);
        const SynthSample sample = generate_sample(tiny_source_spec(), 99, 100);
        Rng rng(15);
        SampleRecord rec;
        const ImageF out = adapt_sample(st, sample.image, cfg, rng, &rec);
        int accepted = 0;
        for (int k : rec.stage2.keypoints) accepted += k;
        CHECK(accepted >= 1);
        for (double c : rec.stage2.ce) CHECK(std::isfinite(c));
        CHECK(out.v.size() == sample.image.v.size());
    }

    SUBCASE("stage 1 reduces prediction entropy on a shifted sample") {
        DomainSpec shifted = tiny_source_spec();
        shifted.invert = true;
        shifted.noise_sigma = 0.1;
        const SynthSample sample = generate_sample(shifted, 7, 0);

        AdaptState st = make_adapt_state(src, cfg);
        st.student.router->reset_zero();
        const StageOneRecord rec = adapt_stage1(st, tensor_from_image(sample.image), cfg);
        CHECK(rec.em_final < rec.em.front());
    }

    SUBCASE("weighted consistency pulls the emphasized pixels toward the pseudo-label") {
        AdaptState st = make_adapt_state(src, cfg);
        const SynthSample sample = generate_sample(tiny_source_spec(), 99, 101);
        Rng rng(5);
        const ImageF yprime = teacher_pseudolabel(st, sample.image, cfg, rng);
        const Tensor teacher_map = tensor_from_image(yprime);
        const PseudoBreakPlan plan =
            build_plan(tensor_from_image(sample.image), teacher_map, cfg.hg, rng);
        REQUIRE(plan.keypoints.size() >= 1);

        SegModel student = clone_model(src);
        std::vector<Tensor> params;
        for (auto& [name, p] : student.params) {
            p.set_requires_grad(true);
            params.push_back(p);
        }
        AdamState adam;
        auto emphasized_gap = [&]() {
            const Tensor pred = seg_forward(student, plan.hard_image);
            double acc = 0.0;
            int n = 0;
            const auto& w = plan.weight_map.data();
            for (std::size_t i = 0; i < w.size(); ++i)
                if (w[i] == 10.0) {
                    acc += std::abs(pred.data()[i] - yprime.v[i]);
                    ++n;
                }
            REQUIRE(n > 0);
            return acc / n;
        };

        const double before = emphasized_gap();
        for (int step = 0; step < 3; ++step) {
            for (Tensor& p : params) p.zero_grad();
            const Tensor pred = seg_forward(student, plan.hard_image);
            backward(weighted_consistency_loss(teacher_map, pred, plan.weight_map));
            adam_step(params, adam, 1e-3);
        }
        CHECK(emphasized_gap() < before);
    }
}
