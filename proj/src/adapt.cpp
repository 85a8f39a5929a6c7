#include "topotta/adapt.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>
#include <stdexcept>

#include "topotta/ops.hpp"

namespace topotta {

namespace {

// --- augmentation plumbing --------------------------------------------------

struct AugDraw {
    bool flip_h_on = false, flip_v_on = false;
    double scale = 1.0;
};

AugDraw draw_round(const AdaptConfig& cfg, Rng& rng) {
    AugDraw d;
    d.flip_h_on = rng.bernoulli(0.5);
    d.flip_v_on = rng.bernoulli(0.5);
    d.scale = cfg.scales[static_cast<std::size_t>(
        rng.uniform_int(0, static_cast<std::int64_t>(cfg.scales.size()) - 1))];
    return d;
}

ImageF flip_image(const ImageF& img, bool fh, bool fv) {
    ImageF out(img.h, img.w);
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x)
            out.at(y, x) = img.at(fv ? img.h - 1 - y : y, fh ? img.w - 1 - x : x);
    return out;
}

struct AugInput {
    Tensor x;          // flipped, scaled, zero-padded to a stride multiple
    int s0h = 0, s0w = 0;  // scaled size before padding
};

int pad_to(int v, int stride) { return ((v + stride - 1) / stride) * stride; }

// Flip -> bilinear scale -> bottom/right zero pad. All constant buffers; the
// differentiable path starts at the network parameters, not the input.
AugInput transform_in(const ImageF& img, const AugDraw& d, int stride) {
    AugInput out;
    ImageF work = (d.flip_h_on || d.flip_v_on) ? flip_image(img, d.flip_h_on, d.flip_v_on) : img;
    out.s0h = std::max(1, static_cast<int>(std::lround(d.scale * img.h)));
    out.s0w = std::max(1, static_cast<int>(std::lround(d.scale * img.w)));

    Tensor t = tensor_from_image(work);
    if (out.s0h != img.h || out.s0w != img.w) t = resize_bilinear(t, out.s0h, out.s0w);

    const int ph = pad_to(out.s0h, stride), pw = pad_to(out.s0w, stride);
    if (ph != out.s0h || pw != out.s0w) {
        ImageF padded(ph, pw, 0.0);
        const auto& src = t.data();
        for (int y = 0; y < out.s0h; ++y)
            for (int x = 0; x < out.s0w; ++x)
                padded.at(y, x) = src[static_cast<std::size_t>(y) * out.s0w + x];
        t = tensor_from_image(padded);
    }
    out.x = t;
    return out;
}

// Inverse map of a prediction back into the original frame: crop the padding,
// scale back, undo the flips. Differentiable end to end.
Tensor inverse_out(const Tensor& pred, const AugInput& aug, const AugDraw& d, int h, int w) {
    Tensor y = pred;
    if (pred.dim(2) != aug.s0h || pred.dim(3) != aug.s0w) y = crop_spatial(y, aug.s0h, aug.s0w);
    if (aug.s0h != h || aug.s0w != w) y = resize_bilinear(y, h, w);
    if (d.flip_v_on) y = flip_v(y);
    if (d.flip_h_on) y = flip_h(y);
    return y;
}

// --- state helpers -----------------------------------------------------------

void zero_all_grads(AdaptState& st) {
    for (auto& [name, p] : st.student.params) p.zero_grad();
    for (Tensor& d : st.student.router->delta) d.zero_grad();
}

void copy_weights(SegModel& dst, const SegModel& src) {
    auto di = dst.params.begin();
    auto si = src.params.begin();
    for (; di != dst.params.end() && si != src.params.end(); ++di, ++si) {
        if (di->first != si->first || di->second.numel() != si->second.numel())
            throw std::invalid_argument("copy_weights: parameter sets differ");
        di->second.raw() = si->second.data();
    }
    if (di != dst.params.end() || si != src.params.end())
        throw std::invalid_argument("copy_weights: parameter sets differ");
    dst.stats = src.stats;
}

ImageF forward_map(SegModel& m, const Tensor& image) {
    const Tensor pred = seg_forward(m, image);
    ImageF out(pred.dim(2), pred.dim(3));
    out.v = pred.data();
    return out;
}

double finite_or_throw(double v, const char* stage) {
    if (!std::isfinite(v)) throw std::runtime_error(std::string("adaptation diverged in ") + stage);
    return v;
}

}  // namespace

void validate_adapt(const AdaptConfig& cfg) {
    auto fail = [](const std::string& why) { throw std::invalid_argument("AdaptConfig: " + why); };
    if (cfg.iterations < 2 || cfg.iterations % 2 != 0) fail("iterations must be even and >= 2");
    if (cfg.lr_stage1 < 0.0 || cfg.lr_stage2 < 0.0) fail("learning rates must be >= 0");
    if (!(cfg.ema_rate > 0.0 && cfg.ema_rate <= 1.0)) fail("ema_rate must lie in (0,1]");
    if (cfg.teacher_rounds < 1) fail("teacher_rounds must be >= 1");
    if (cfg.student_rounds < 1) fail("student_rounds must be >= 1");
    if (cfg.scales.empty()) fail("scales must be non-empty");
    for (double s : cfg.scales)
        if (!(s > 0.0)) fail("scales must be positive");
    if (!(cfg.binarize_threshold > 0.0 && cfg.binarize_threshold < 1.0))
        fail("binarize_threshold must lie in (0,1)");
    if (!(cfg.log_eps > 0.0 && cfg.log_eps < 0.5)) fail("log_eps must lie in (0, 0.5)");
    if (cfg.patch_grid < 1) fail("patch_grid must be >= 1");
    validate_hg(cfg.hg);
}

std::string format_record(const SampleRecord& rec) {
    std::ostringstream os;
    os << std::setprecision(10);
    os << "sample " << rec.index << " em";
    for (double v : rec.stage1.em) os << ' ' << v;
    os << " em_final " << rec.stage1.em_final << " ce";
    for (double v : rec.stage2.ce) os << ' ' << v;
    os << " keypoints";
    for (int v : rec.stage2.keypoints) os << ' ' << v;
    os << " rejected";
    for (int v : rec.stage2.rejected) os << ' ' << v;
    return os.str();
}

AdaptState make_adapt_state(const SegModel& source, const AdaptConfig& cfg) {
    validate_adapt(cfg);
    if (source.wrapped())
        throw std::invalid_argument("make_adapt_state: source model must be unwrapped");
    AdaptState st;
    st.source = clone_model(source);
    st.student = clone_model(source);
    st.teacher = clone_model(source);
    wrap_encoder(st.student, cfg.patch_grid);
    wrap_encoder_with(st.teacher, st.student.router);
    for (auto& [name, p] : st.student.params) p.set_requires_grad(true);
    for (auto& [name, p] : st.teacher.params) p.set_requires_grad(false);
    return st;
}

StageOneRecord adapt_stage1(AdaptState& st, const Tensor& image, const AdaptConfig& cfg) {
    validate_adapt(cfg);
    StageOneRecord rec;
    const int steps = cfg.iterations / 2;

    // weights stay frozen for the whole stage; only the deltas learn
    for (auto& [name, p] : st.student.params) p.set_requires_grad(false);
    st.student.router->set_requires_grad(true);
    std::vector<Tensor> deltas = st.student.router->delta;

    for (int step = 0; step < steps; ++step) {
        zero_all_grads(st);
        const Tensor loss = entropy_loss(seg_forward(st.student, image), cfg.log_eps);
        rec.em.push_back(finite_or_throw(loss.item(), "stage 1"));
        backward(loss);
        adam_step(deltas, st.delta_adam, cfg.lr_stage1);
    }
    rec.em_final =
        finite_or_throw(entropy_loss(seg_forward(st.student, image), cfg.log_eps).item(), "stage 1");

    for (auto& [name, p] : st.student.params) p.set_requires_grad(true);
    return rec;
}

ImageF teacher_pseudolabel(AdaptState& st, const ImageF& image, const AdaptConfig& cfg, Rng& rng) {
    const int stride = 1 << (st.teacher.levels - 1);
    ImageF acc(image.h, image.w, 0.0);
    for (int round = 0; round < cfg.teacher_rounds; ++round) {
        const AugDraw d = draw_round(cfg, rng);
        const AugInput aug = transform_in(image, d, stride);
        const Tensor pred = seg_forward(st.teacher, aug.x);
        const Tensor back = inverse_out(pred, aug, d, image.h, image.w);
        const auto& v = back.data();
        for (std::size_t i = 0; i < acc.v.size(); ++i) acc.v[i] += v[i];
    }
    const double inv = 1.0 / cfg.teacher_rounds;
    for (double& v : acc.v) v *= inv;
    return acc;
}

StageTwoRecord adapt_stage2(AdaptState& st, const ImageF& image, const AdaptConfig& cfg, Rng& rng) {
    validate_adapt(cfg);
    StageTwoRecord rec;
    const int steps = cfg.iterations / 2;
    const int stride = 1 << (st.student.levels - 1);
    const Tensor img_t = tensor_from_image(image);
    std::vector<Tensor> params = st.student.param_list();
    for (Tensor& p : params) p.set_requires_grad(true);

    for (int step = 0; step < steps; ++step) {
        const ImageF yprime = teacher_pseudolabel(st, image, cfg, rng);
        const Tensor teacher_map = tensor_from_image(yprime);
        const PseudoBreakPlan plan = build_plan(img_t, teacher_map, cfg.hg, rng);
        rec.keypoints.push_back(static_cast<int>(plan.keypoints.size()));
        rec.rejected.push_back(plan.rejected_count);
        const ImageF hard = image_from_tensor(plan.hard_image);

        zero_all_grads(st);
        std::vector<Tensor> losses;
        for (int sr = 0; sr < cfg.student_rounds; ++sr) {
            const AugDraw d = draw_round(cfg, rng);
            const AugInput aug = transform_in(hard, d, stride);
            const Tensor pred = seg_forward(st.student, aug.x);
            const Tensor mapped = inverse_out(pred, aug, d, image.h, image.w);
            losses.push_back(
                weighted_consistency_loss(teacher_map, mapped, plan.weight_map, cfg.log_eps));
        }
        Tensor loss = losses[0];
        for (std::size_t i = 1; i < losses.size(); ++i) loss = add(loss, losses[i]);
        if (losses.size() > 1) loss = scale(loss, 1.0 / static_cast<double>(losses.size()));

        rec.ce.push_back(finite_or_throw(loss.item(), "stage 2"));
        backward(loss);
        adam_step(params, st.theta_adam, cfg.lr_stage2);
        ema_update(st.teacher, st.student, cfg.ema_rate);
    }
    return rec;
}

ImageF adapt_sample(AdaptState& st, const ImageF& image, const AdaptConfig& cfg, Rng& rng,
                    SampleRecord* rec) {
    validate_adapt(cfg);
    if (!cfg.continual && st.samples_seen > 0) {
        copy_weights(st.student, st.source);
        copy_weights(st.teacher, st.source);
        st.theta_adam = AdamState{};
    }
    st.student.router->reset_zero();
    st.delta_adam = AdamState{};

    SampleRecord local;
    SampleRecord& r = rec ? *rec : local;
    r.index = st.samples_seen;
    const Tensor img_t = tensor_from_image(image);
    r.stage1 = adapt_stage1(st, img_t, cfg);
    r.stage2 = adapt_stage2(st, image, cfg, rng);

    ImageF out = forward_map(st.student, img_t);
    ++st.samples_seen;
    return out;
}

StreamResult adapt_stream(const SegModel& source, const std::vector<ImageF>& images,
                          const AdaptConfig& cfg, std::uint64_t seed) {
    AdaptState st = make_adapt_state(source, cfg);
    StreamResult res;
    res.prob_maps.reserve(images.size());
    res.records.reserve(images.size());
    const Rng root(seed);
    for (std::size_t i = 0; i < images.size(); ++i) {
        Rng rng = root.fork(i);
        SampleRecord rec;
        res.prob_maps.push_back(adapt_sample(st, images[i], cfg, rng, &rec));
        res.records.push_back(std::move(rec));
    }
    return res;
}

std::vector<ImageF> predict_stream(const SegModel& source, const std::vector<ImageF>& images) {
    SegModel m = clone_model(source);
    std::vector<ImageF> out;
    out.reserve(images.size());
    for (const ImageF& img : images) out.push_back(forward_map(m, tensor_from_image(img)));
    return out;
}

}  // namespace topotta
