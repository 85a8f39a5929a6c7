#include "topotta/segnet.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <utility>

#include "topotta/image_io.hpp"
#include "topotta/ops.hpp"
#include "topotta/optim.hpp"

namespace topotta {

namespace {

constexpr double kBnEps = 1e-5;

int enc_out_ch(const SegModel& m, int level) { return m.base_channels << level; }
int enc_in_ch(const SegModel& m, int level) {
    return level == 0 ? m.in_channels : enc_out_ch(m, level - 1);
}

// Per-channel mean and biased variance over N,H,W.
void batch_stats(const Tensor& x, std::vector<double>& mean, std::vector<double>& var) {
    const int N = x.dim(0), C = x.dim(1);
    const std::size_t plane = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
    const std::size_t count = static_cast<std::size_t>(N) * plane;
    mean.assign(C, 0.0);
    var.assign(C, 0.0);
    const double* X = x.data().data();
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const double* p = X + (static_cast<std::size_t>(n) * C + c) * plane;
            double s = 0.0;
            for (std::size_t i = 0; i < plane; ++i) s += p[i];
            mean[c] += s;
        }
    for (int c = 0; c < C; ++c) mean[c] /= static_cast<double>(count);
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const double* p = X + (static_cast<std::size_t>(n) * C + c) * plane;
            double s = 0.0;
            for (std::size_t i = 0; i < plane; ++i) {
                const double d = p[i] - mean[c];
                s += d * d;
            }
            var[c] += s;
        }
    for (int c = 0; c < C; ++c) var[c] /= static_cast<double>(count);
}

Tensor he_conv(Rng& rng, int out_ch, int in_ch, int k) {
    const double std = std::sqrt(2.0 / (static_cast<double>(in_ch) * k * k));
    std::vector<double> w(static_cast<std::size_t>(out_ch) * in_ch * k * k);
    for (auto& v : w) v = rng.normal(0.0, std);
    return Tensor::from_data({out_ch, in_ch, k, k}, std::move(w), true);
}

void add_bn(SegModel& m, const std::string& prefix, int ch) {
    m.params.emplace(prefix + ".gamma", Tensor::full({ch}, 1.0, true));
    m.params.emplace(prefix + ".beta", Tensor::zeros({ch}, true));
    BnStats st;
    st.mean.assign(ch, 0.0);
    st.var.assign(ch, 1.0);
    m.stats.emplace(prefix, std::move(st));
}

}  // namespace

std::vector<std::string> SegModel::param_names() const {
    std::vector<std::string> names;
    names.reserve(params.size());
    for (const auto& [k, v] : params) names.push_back(k);
    return names;
}

std::vector<Tensor> SegModel::param_list() const {
    std::vector<Tensor> out;
    out.reserve(params.size());
    for (const auto& [k, v] : params) out.push_back(v);
    return out;
}

SegModel make_seg_model(int levels, int base_channels, int in_channels, std::uint64_t seed) {
    if (levels < 1 || base_channels < 1 || in_channels < 1)
        throw std::invalid_argument("make_seg_model: levels, base_channels, in_channels must be >= 1");

    SegModel m;
    m.levels = levels;
    m.base_channels = base_channels;
    m.in_channels = in_channels;

    Rng rng(seed);
    for (int l = 0; l < levels; ++l) {
        const std::string p = "enc" + std::to_string(l);
        const int ci = enc_in_ch(m, l), co = enc_out_ch(m, l);
        m.params.emplace(p + ".conv1.w", he_conv(rng, co, ci, 3));
        add_bn(m, p + ".bn1", co);
        m.params.emplace(p + ".conv2.w", he_conv(rng, co, co, 3));
        add_bn(m, p + ".bn2", co);
    }
    for (int l = levels - 2; l >= 0; --l) {
        const std::string p = "dec" + std::to_string(l);
        const int skip = enc_out_ch(m, l), deep = enc_out_ch(m, l + 1);
        m.params.emplace(p + ".conv1.w", he_conv(rng, skip, deep + skip, 3));
        add_bn(m, p + ".bn1", skip);
        m.params.emplace(p + ".conv2.w", he_conv(rng, skip, skip, 3));
        add_bn(m, p + ".bn2", skip);
    }
    m.params.emplace("head.w", he_conv(rng, 1, base_channels, 1));
    m.params.emplace("head.b", Tensor::zeros({1}, true));
    return m;
}

std::vector<std::string> encoder_conv_names(const SegModel& m) {
    std::vector<std::string> names;
    for (int l = 0; l < m.levels; ++l) {
        names.push_back("enc" + std::to_string(l) + ".conv1.w");
        names.push_back("enc" + std::to_string(l) + ".conv2.w");
    }
    return names;
}

Tensor seg_forward(SegModel& m, const Tensor& x, const ForwardOpts& opts) {
    if (!x.defined() || x.shape().size() != 4)
        throw std::invalid_argument("seg_forward: input must be [N,C,H,W]");
    if (x.dim(1) != m.in_channels)
        throw std::invalid_argument("seg_forward: expected " + std::to_string(m.in_channels) +
                                    " input channels, got " + std::to_string(x.dim(1)));
    const int div = 1 << (m.levels - 1);
    if (x.dim(2) % div != 0 || x.dim(3) % div != 0)
        throw std::invalid_argument("seg_forward: H and W must be divisible by " + std::to_string(div) +
                                    " for " + std::to_string(m.levels) + " levels, got " +
                                    std::to_string(x.dim(2)) + "x" + std::to_string(x.dim(3)));
    if (opts.train_bn && (opts.bn_momentum < 0.0 || opts.bn_momentum > 1.0))
        throw std::invalid_argument("seg_forward: bn_momentum must be in [0,1]");

    int rep = 0;  // index into the router's delta list, forward order
    auto enc_conv = [&](const Tensor& in, const std::string& name) {
        const Tensor& w = m.params.at(name);
        Tensor out = m.router ? topomdc_fused(in, w, m.router->delta[rep], m.router->n)
                              : conv3x3(in, w);
        ++rep;
        return out;
    };
    auto bn_relu = [&](const Tensor& in, const std::string& bn) {
        const Tensor& gamma = m.params.at(bn + ".gamma");
        const Tensor& beta = m.params.at(bn + ".beta");
        BnStats& st = m.stats.at(bn);
        if (!opts.train_bn)
            return relu(batchnorm_inference(in, gamma, beta, st.mean, st.var, kBnEps));
        std::vector<double> bm, bv;
        batch_stats(in, bm, bv);
        const double mom = opts.bn_momentum;
        for (std::size_t c = 0; c < bm.size(); ++c) {
            st.mean[c] = (1.0 - mom) * st.mean[c] + mom * bm[c];
            st.var[c] = (1.0 - mom) * st.var[c] + mom * bv[c];
        }
        return relu(batchnorm_inference(in, gamma, beta, bm, bv, kBnEps));
    };

    std::vector<Tensor> skips;
    Tensor cur = x;
    for (int l = 0; l < m.levels; ++l) {
        const std::string p = "enc" + std::to_string(l);
        cur = bn_relu(enc_conv(cur, p + ".conv1.w"), p + ".bn1");
        cur = bn_relu(enc_conv(cur, p + ".conv2.w"), p + ".bn2");
        if (l < m.levels - 1) {
            skips.push_back(cur);
            cur = maxpool2x2(cur);
        }
    }
    for (int l = m.levels - 2; l >= 0; --l) {
        const std::string p = "dec" + std::to_string(l);
        cur = concat_channels(upsample_bilinear(cur, 2), skips[l]);
        cur = bn_relu(conv3x3(cur, m.params.at(p + ".conv1.w")), p + ".bn1");
        cur = bn_relu(conv3x3(cur, m.params.at(p + ".conv2.w")), p + ".bn2");
    }
    return sigmoid(conv1x1(cur, m.params.at("head.w"), m.params.at("head.b")));
}

std::shared_ptr<RouterParams> wrap_encoder(SegModel& m, int patch_grid) {
    if (m.router) throw std::runtime_error("wrap_encoder: encoder is already wrapped");
    if (patch_grid < 1) throw std::invalid_argument("wrap_encoder: patch_grid must be >= 1");
    auto r = std::make_shared<RouterParams>();
    r->n = patch_grid;
    r->layer_names = encoder_conv_names(m);
    r->delta.reserve(r->layer_names.size());
    for (std::size_t i = 0; i < r->layer_names.size(); ++i)
        r->delta.push_back(Tensor::zeros({patch_grid * patch_grid, 8}, true));
    m.router = r;
    return r;
}

void wrap_encoder_with(SegModel& m, std::shared_ptr<RouterParams> router) {
    if (m.router) throw std::runtime_error("wrap_encoder_with: encoder is already wrapped");
    if (!router) throw std::invalid_argument("wrap_encoder_with: null router");
    if (router->layer_names != encoder_conv_names(m))
        throw std::invalid_argument("wrap_encoder_with: router was built for a different encoder layout");
    if (router->delta.size() != router->layer_names.size())
        throw std::invalid_argument("wrap_encoder_with: router delta list is inconsistent");
    m.router = std::move(router);
}

void unwrap_encoder(SegModel& m) {
    if (!m.router) throw std::runtime_error("unwrap_encoder: encoder is not wrapped");
    m.router.reset();
}

SegModel clone_model(const SegModel& m) {
    SegModel c;
    c.levels = m.levels;
    c.base_channels = m.base_channels;
    c.in_channels = m.in_channels;
    for (const auto& [name, t] : m.params)
        c.params.emplace(name, Tensor::from_data(t.shape(), t.data(), t.requires_grad()));
    c.stats = m.stats;
    return c;
}

void ema_update(SegModel& teacher, const SegModel& student, double rate) {
    if (rate < 0.0 || rate > 1.0) throw std::invalid_argument("ema_update: rate must be in [0,1]");
    auto ti = teacher.params.begin();
    auto si = student.params.begin();
    for (; ti != teacher.params.end() && si != student.params.end(); ++ti, ++si) {
        if (ti->first != si->first || ti->second.numel() != si->second.numel())
            throw std::invalid_argument("ema_update: models have different parameter sets");
        std::vector<double>& t = ti->second.raw();
        const std::vector<double>& s = si->second.data();
        for (std::size_t k = 0; k < t.size(); ++k) t[k] = rate * t[k] + (1.0 - rate) * s[k];
    }
    if (ti != teacher.params.end() || si != student.params.end())
        throw std::invalid_argument("ema_update: models have different parameter sets");
    // running statistics are not learned, so they follow the student verbatim
    teacher.stats = student.stats;
}

void save_checkpoint(const std::string& path, const SegModel& m) {
    TensorFile tf;
    tf.kind = "checkpoint";
    tf.meta.emplace_back("levels", std::to_string(m.levels));
    tf.meta.emplace_back("base_channels", std::to_string(m.base_channels));
    tf.meta.emplace_back("in_channels", std::to_string(m.in_channels));
    for (const auto& [name, t] : m.params) tf.tensors.emplace_back(name, t.detach());
    for (const auto& [bn, st] : m.stats) {
        tf.tensors.emplace_back("stats." + bn + ".mean",
                                Tensor::from_data({static_cast<int>(st.mean.size())}, st.mean));
        tf.tensors.emplace_back("stats." + bn + ".var",
                                Tensor::from_data({static_cast<int>(st.var.size())}, st.var));
    }
    write_tensor_file(path, tf);
}

SegModel load_checkpoint(const std::string& path) {
    TensorFile tf = read_tensor_file(path);
    auto bad = [&](const std::string& why) -> std::runtime_error {
        return std::runtime_error("checkpoint '" + path + "': " + why);
    };
    if (tf.kind != "checkpoint") throw bad("kind is '" + tf.kind + "', expected 'checkpoint'");
    auto meta_int = [&](const char* key) {
        const std::string* v = tf.find_meta(key);
        if (!v) throw bad(std::string("missing meta key '") + key + "'");
        return std::stoi(*v);
    };
    SegModel m = make_seg_model(meta_int("levels"), meta_int("base_channels"), meta_int("in_channels"), 0);

    std::size_t used = 0;
    for (auto& [name, t] : m.params) {
        const Tensor* src = tf.find(name);
        if (!src) throw bad("missing tensor '" + name + "'");
        if (src->shape() != t.shape())
            throw bad("tensor '" + name + "' has shape " + shape_str(src->shape()) +
                      ", expected " + shape_str(t.shape()));
        t.raw() = src->data();
        ++used;
    }
    for (auto& [bn, st] : m.stats) {
        for (const char* which : {".mean", ".var"}) {
            const std::string name = "stats." + bn + which;
            const Tensor* src = tf.find(name);
            if (!src) throw bad("missing tensor '" + name + "'");
            if (src->numel() != st.mean.size())
                throw bad("tensor '" + name + "' has the wrong size");
            (which[1] == 'm' ? st.mean : st.var) = src->data();
            ++used;
        }
    }
    if (used != tf.tensors.size()) throw bad("file contains tensors this model layout does not use");
    return m;
}

// ---------------------------------------------------------------------------
// Source training
// ---------------------------------------------------------------------------

namespace {

void fy_shuffle(std::vector<int>& v, Rng& rng) {
    for (std::size_t i = v.size(); i > 1; --i)
        std::swap(v[i - 1], v[rng.uniform_int(0, static_cast<std::int64_t>(i) - 1)]);
}

// src/dst are [H,W] buffers laid row-major inside a larger array.
void copy_flipped(const double* src, double* dst, int h, int w, bool fh, bool fv) {
    for (int y = 0; y < h; ++y) {
        const int sy = fv ? h - 1 - y : y;
        for (int x = 0; x < w; ++x)
            dst[static_cast<std::size_t>(y) * w + x] =
                src[static_cast<std::size_t>(sy) * w + (fh ? w - 1 - x : x)];
    }
}

double dice_of_masks(const std::vector<double>& pred, const std::vector<double>& label, double thr) {
    std::size_t inter = 0, a = 0, b = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const bool pa = pred[i] > thr, pb = label[i] > thr;
        a += pa;
        b += pb;
        inter += pa && pb;
    }
    if (a + b == 0) return 1.0;
    return 2.0 * static_cast<double>(inter) / static_cast<double>(a + b);
}

}  // namespace

TrainReport train_source(SegModel& m, const std::vector<LabeledImage>& data, const TrainConfig& cfg) {
    if (data.empty()) throw std::invalid_argument("train_source: empty dataset");
    if (cfg.epochs < 1 || cfg.batch_size < 1)
        throw std::invalid_argument("train_source: epochs and batch_size must be >= 1");
    if (cfg.val_fraction < 0.0 || cfg.val_fraction >= 1.0)
        throw std::invalid_argument("train_source: val_fraction must be in [0,1)");
    if (m.wrapped()) throw std::runtime_error("train_source: unwrap the encoder first");

    const int H = data[0].image.dim(2), W = data[0].image.dim(3);
    for (const auto& s : data) {
        if (s.image.shape() != Shape{1, 1, H, W} || s.label.shape() != Shape{1, 1, H, W})
            throw std::invalid_argument("train_source: all samples must be [1,1," + std::to_string(H) +
                                        "," + std::to_string(W) + "]");
        for (double v : s.label.data())
            if (v != 0.0 && v != 1.0)
                throw std::invalid_argument("train_source: labels must be binary");
    }

    Rng rng(cfg.seed);
    const int n = static_cast<int>(data.size());
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    fy_shuffle(order, rng);

    int val_n = cfg.val_fraction > 0.0
                    ? static_cast<int>(std::llround(cfg.val_fraction * n))
                    : 0;
    val_n = std::min(std::max(val_n, cfg.val_fraction > 0.0 ? 1 : 0), n - 1);
    std::vector<int> val_idx(order.begin(), order.begin() + val_n);
    std::vector<int> train_idx(order.begin() + val_n, order.end());

    std::vector<Tensor> plist = m.param_list();
    AdamState opt;
    TrainReport report;

    std::map<std::string, std::vector<double>> best_params;
    std::map<std::string, BnStats> best_stats;
    const std::size_t plane = static_cast<std::size_t>(H) * W;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        fy_shuffle(train_idx, rng);
        double loss_sum = 0.0;
        int batches = 0;
        for (std::size_t start = 0; start < train_idx.size(); start += cfg.batch_size) {
            const int bsz = static_cast<int>(std::min<std::size_t>(cfg.batch_size, train_idx.size() - start));
            std::vector<double> xs(static_cast<std::size_t>(bsz) * plane);
            std::vector<double> ys(xs.size());
            for (int b = 0; b < bsz; ++b) {
                const LabeledImage& s = data[train_idx[start + b]];
                const bool fh = cfg.flip_augment && rng.bernoulli(0.5);
                const bool fv = cfg.flip_augment && rng.bernoulli(0.5);
                copy_flipped(s.image.data().data(), xs.data() + b * plane, H, W, fh, fv);
                copy_flipped(s.label.data().data(), ys.data() + b * plane, H, W, fh, fv);
            }
            Tensor x = Tensor::from_data({bsz, 1, H, W}, std::move(xs));
            Tensor y = Tensor::from_data({bsz, 1, H, W}, std::move(ys));
            Tensor pred = seg_forward(m, x, {.train_bn = true, .bn_momentum = cfg.bn_momentum});
            Tensor loss = dice_bce_loss(pred, y);
            const double lv = loss.item();
            if (!std::isfinite(lv)) throw std::runtime_error("train_source: training diverged (non-finite loss)");
            for (auto& p : plist) p.zero_grad();
            backward(loss);
            adam_step(plist, opt, cfg.lr);
            loss_sum += lv;
            ++batches;
        }
        report.epoch_loss.push_back(loss_sum / std::max(batches, 1));

        if (val_n > 0) {
            double dsum = 0.0;
            for (int i : val_idx) {
                Tensor pred = seg_forward(m, data[i].image);
                dsum += dice_of_masks(pred.data(), data[i].label.data(), 0.5);
            }
            const double vd = dsum / val_n;
            report.val_dice.push_back(vd);
            if (report.best_epoch < 0 || vd > report.best_val_dice) {
                report.best_epoch = epoch;
                report.best_val_dice = vd;
                best_params.clear();
                for (const auto& [k, t] : m.params) best_params[k] = t.data();
                best_stats = m.stats;
            }
        }
    }

    if (val_n > 0) {
        for (auto& [k, t] : m.params) t.raw() = best_params.at(k);
        m.stats = best_stats;
    } else {
        report.best_epoch = cfg.epochs - 1;
    }
    return report;
}

}  // namespace topotta
