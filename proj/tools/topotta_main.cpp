// Command-line driver: train a source segmenter, adapt it over a target
// stream, and inspect or measure the artifacts. All images are binary PGM
// (P5); probability and weight maps use the tensor container format.

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "topotta/adapt.hpp"
#include "topotta/config.hpp"
#include "topotta/image.hpp"
#include "topotta/image_io.hpp"
#include "topotta/segnet.hpp"
#include "topotta/synthgen.hpp"
#include "topotta/topohg.hpp"
#include "topotta/topology.hpp"

namespace fs = std::filesystem;
using namespace topotta;

namespace {

// Exit codes: 0 success, 1 numeric failure (divergence, non-finite values),
// 2 usage or I/O errors. The library throws std::runtime_error for numeric
// trouble inside compute sections, so those calls are wrapped explicitly.
struct NumericFailure : std::runtime_error {
    using std::runtime_error::runtime_error;
};

template <class F>
decltype(auto) numeric_section(F&& f) {
    try {
        return std::forward<F>(f)();
    } catch (const std::runtime_error& e) {
        throw NumericFailure(e.what());
    }
}

std::string dbl_str(double v) {
    char buf[64];
    const int n = std::snprintf(buf, sizeof buf, "%g", v);
    return {buf, static_cast<std::size_t>(n)};
}

std::string numbered(const char* prefix, int i, const char* ext) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%s_%04d%s", prefix, i, ext);
    return buf;
}

// Writes every log line to stdout and, when a path is given, to a file.
class Tee {
public:
    explicit Tee(const std::string& path) {
        if (!path.empty()) {
            file_.open(path, std::ios::binary | std::ios::trunc);
            if (!file_) throw std::invalid_argument("cannot open log file '" + path + "'");
        }
    }
    void line(const std::string& s) {
        std::cout << s << "\n";
        if (file_.is_open()) file_ << s << "\n";
    }

private:
    std::ofstream file_;
};

std::vector<std::string> list_pgms(const std::string& dir, const std::string& prefix) {
    if (!fs::is_directory(dir))
        throw std::invalid_argument("dataset directory not found: '" + dir + "'");
    std::vector<std::string> names;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (!e.is_regular_file()) continue;
        const std::string name = e.path().filename().string();
        if (name.size() < 4 || name.substr(name.size() - 4) != ".pgm") continue;
        if (!prefix.empty() && name.rfind(prefix, 0) != 0) continue;
        names.push_back(name);
    }
    std::sort(names.begin(), names.end());
    return names;
}

// image_0001.pgm -> label_0001.pgm
std::string label_name_for(const std::string& image_name) {
    return "label" + image_name.substr(5);
}

void write_sample_pair(const std::string& dir, int i, const ImageF& img, const BinaryMask& lbl) {
    write_pgm(dir + "/" + numbered("image", i, ".pgm"), img);
    write_pgm_mask(dir + "/" + numbered("label", i, ".pgm"), lbl);
}

void ensure_out_dir(const std::string& dir) {
    if (dir.empty()) throw std::invalid_argument("an output directory is required (--out)");
    fs::create_directories(dir);
}

void check_model_meta(const RunConfig& cfg, const SegModel& m, const std::string& path) {
    if (!cfg.model_meta_explicit) return;
    if (cfg.levels == m.levels && cfg.base_channels == m.base_channels &&
        cfg.in_channels == m.in_channels)
        return;
    throw std::invalid_argument(
        "checkpoint/model-meta mismatch: '" + path + "' holds levels=" + std::to_string(m.levels) +
        " base_channels=" + std::to_string(m.base_channels) +
        " in_channels=" + std::to_string(m.in_channels) + " but the config requests levels=" +
        std::to_string(cfg.levels) + " base_channels=" + std::to_string(cfg.base_channels) +
        " in_channels=" + std::to_string(cfg.in_channels));
}

DomainSpec domain_preset(const std::string& name, int size) {
    DomainSpec spec;
    if (name == "source")
        spec = source_domain();
    else if (name == "shifted")
        spec = shifted_domain();
    else
        throw std::invalid_argument("unknown domain '" + name + "' (want source or shifted)");
    spec.size = size;
    return spec;
}

// ---------------------------------------------------------------------------
// option plumbing
// ---------------------------------------------------------------------------

struct CommonOpts {
    std::string config_path;
    std::vector<std::string> sets;
    std::uint64_t seed = 0;
    CLI::Option* seed_opt = nullptr;
};

void add_common(CLI::App* cmd, CommonOpts& co) {
    cmd->add_option("--config", co.config_path, "key = value configuration file");
    cmd->add_option("--set", co.sets, "override a config key (repeatable)")->type_name("KEY=VALUE");
    co.seed_opt = cmd->add_option("--seed", co.seed, "run seed (overrides the config)");
}

RunConfig resolve_config(const CommonOpts& co) {
    RunConfig cfg = co.config_path.empty() ? RunConfig{} : load_config_file(co.config_path);
    for (const std::string& kv : co.sets) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos || eq == 0)
            throw std::invalid_argument("--set expects KEY=VALUE, got '" + kv + "'");
        apply_config(cfg, kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (co.seed_opt && co.seed_opt->count()) cfg.seed = co.seed;
    validate_config(cfg);
    return cfg;
}

// ---------------------------------------------------------------------------
// train-source
// ---------------------------------------------------------------------------

struct TrainOpts {
    CommonOpts common;
    std::string data_dir;
    int synth_n = 0;
    std::string domain = "source";
    int size = 96;
    std::string out;
    std::string log_path;
};

int cmd_train(const TrainOpts& o) {
    RunConfig cfg = resolve_config(o.common);
    if (!o.data_dir.empty()) cfg.data_dir = o.data_dir;
    if ((cfg.data_dir.empty()) == (o.synth_n == 0))
        throw std::invalid_argument("train-source needs exactly one of --data DIR or --synth N");
    if (o.out.empty()) throw std::invalid_argument("train-source needs --out CHECKPOINT");

    std::vector<LabeledImage> set;
    std::string data_desc;
    if (o.synth_n > 0) {
        const DomainSpec spec = domain_preset(o.domain, o.size);
        for (const SynthSample& s : generate_dataset(spec, o.synth_n, cfg.seed))
            set.push_back({tensor_from_image(s.image), tensor_from_image(image_from_mask(s.label))});
        data_desc = "data synth " + o.domain + " n " + std::to_string(o.synth_n) + " size " +
                    std::to_string(o.size);
    } else {
        const auto names = list_pgms(cfg.data_dir, "image_");
        if (names.empty())
            throw std::invalid_argument("no image_*.pgm files in '" + cfg.data_dir + "'");
        for (const std::string& name : names) {
            const std::string lbl = cfg.data_dir + "/" + label_name_for(name);
            if (!fs::is_regular_file(lbl))
                throw std::invalid_argument("missing label file '" + lbl + "' for '" + name + "'");
            set.push_back({tensor_from_image(read_pgm(cfg.data_dir + "/" + name)),
                           tensor_from_image(image_from_mask(read_pgm_mask(lbl)))});
        }
        data_desc = "data dir " + cfg.data_dir + " n " + std::to_string(set.size());
    }

    const std::string log_path = o.log_path.empty() ? o.out + ".log" : o.log_path;
    Tee log(log_path);
    log.line("train-source lr " + dbl_str(cfg.train.lr) + " batch " +
             std::to_string(cfg.train.batch_size) + " epochs " + std::to_string(cfg.train.epochs) +
             " seed " + std::to_string(cfg.seed));
    log.line("model levels " + std::to_string(cfg.levels) + " base_channels " +
             std::to_string(cfg.base_channels) + " in_channels " + std::to_string(cfg.in_channels) +
             " model_seed " + std::to_string(cfg.model_seed));
    log.line(data_desc);

    SegModel model = make_seg_model(cfg.levels, cfg.base_channels, cfg.in_channels, cfg.model_seed);
    TrainConfig tc = cfg.train;
    tc.seed = cfg.seed;
    const TrainReport rep = numeric_section([&] { return train_source(model, set, tc); });

    for (std::size_t e = 0; e < rep.epoch_loss.size(); ++e) {
        std::string line = "epoch " + std::to_string(e) + " loss " + dbl_str(rep.epoch_loss[e]);
        if (e < rep.val_dice.size()) line += " val_dice " + dbl_str(rep.val_dice[e]);
        log.line(line);
    }
    log.line("best epoch " + std::to_string(rep.best_epoch) + " val_dice " +
             dbl_str(rep.best_val_dice));

    save_checkpoint(o.out, model);
    log.line("checkpoint " + o.out);
    return 0;
}

// ---------------------------------------------------------------------------
// adapt
// ---------------------------------------------------------------------------

struct AdaptOpts {
    CommonOpts common;
    std::string checkpoint;
    std::string data_dir;
    std::string out;
    bool no_adapt = false;
};

int cmd_adapt(const AdaptOpts& o) {
    RunConfig cfg = resolve_config(o.common);
    if (!o.checkpoint.empty()) cfg.checkpoint = o.checkpoint;
    if (!o.data_dir.empty()) cfg.data_dir = o.data_dir;
    if (!o.out.empty()) cfg.out_dir = o.out;
    if (cfg.checkpoint.empty()) throw std::invalid_argument("adapt needs --checkpoint FILE");
    if (cfg.data_dir.empty()) throw std::invalid_argument("adapt needs --data DIR");
    ensure_out_dir(cfg.out_dir);

    const SegModel model = load_checkpoint(cfg.checkpoint);
    check_model_meta(cfg, model, cfg.checkpoint);

    const auto names = list_pgms(cfg.data_dir, "image_");
    if (names.empty()) throw std::invalid_argument("no image_*.pgm files in '" + cfg.data_dir + "'");
    std::vector<ImageF> stream;
    for (const std::string& name : names) stream.push_back(read_pgm(cfg.data_dir + "/" + name));

    Tee log(cfg.out_dir + "/adapt.log");
    const int half = cfg.adapt.iterations / 2;
    const std::string split = std::to_string(half) + "+" + std::to_string(half);
    log.line(std::string("adapt mode ") + (o.no_adapt ? "no-adapt" : "adapt") + " checkpoint " +
             cfg.checkpoint + " seed " + std::to_string(cfg.seed));
    log.line("iterations " + std::to_string(cfg.adapt.iterations) + " stage_split " + split +
             " continual " + (cfg.adapt.continual ? "true" : "false") + " binarize_threshold " +
             dbl_str(cfg.adapt.binarize_threshold));
    log.line("model levels " + std::to_string(model.levels) + " base_channels " +
             std::to_string(model.base_channels) + " in_channels " +
             std::to_string(model.in_channels));
    log.line("stream n " + std::to_string(stream.size()) + " from " + cfg.data_dir);

    std::vector<ImageF> probs;
    if (o.no_adapt) {
        probs = numeric_section([&] { return predict_stream(model, stream); });
    } else {
        StreamResult res =
            numeric_section([&] { return adapt_stream(model, stream, cfg.adapt, cfg.seed); });
        probs = std::move(res.prob_maps);
        for (const SampleRecord& rec : res.records)
            log.line("stages " + split + " " + format_record(rec));
    }

    std::vector<BinaryMask> masks;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        masks.push_back(binarize(probs[i], cfg.adapt.binarize_threshold));
        write_pgm_mask(cfg.out_dir + "/" + numbered("mask", static_cast<int>(i), ".pgm"),
                       masks.back());
        TensorFile tf;
        tf.kind = "probability_map";
        tf.meta = {{"source", names[i]},
                   {"index", std::to_string(i)},
                   {"binarize_threshold", dbl_str(cfg.adapt.binarize_threshold)}};
        tf.tensors.emplace_back("prob", tensor_from_image(probs[i]));
        write_tensor_file(cfg.out_dir + "/" + numbered("prob", static_cast<int>(i), ".tt"), tf);
    }

    // topology report against ground truth, when every label is present
    bool have_labels = true;
    for (const std::string& name : names)
        if (!fs::is_regular_file(cfg.data_dir + "/" + label_name_for(name))) have_labels = false;
    if (have_labels) {
        std::vector<TopologyReport> reports;
        for (std::size_t i = 0; i < masks.size(); ++i) {
            const BinaryMask gt = read_pgm_mask(cfg.data_dir + "/" + label_name_for(names[i]));
            reports.push_back(evaluate_pair(masks[i], gt));
        }
        const std::string path = cfg.out_dir + "/report.txt";
        std::ofstream rf(path, std::ios::binary | std::ios::trunc);
        if (!rf) throw std::invalid_argument("cannot open report file '" + path + "'");
        rf << format_report(names, reports);
        log.line("report " + path);
    } else {
        log.line("report skipped (labels incomplete in " + cfg.data_dir + ")");
    }
    return 0;
}

// ---------------------------------------------------------------------------
// metrics
// ---------------------------------------------------------------------------

struct MetricsOpts {
    std::string pred_dir, truth_dir, out;
    int patch = 0;
};

int cmd_metrics(const MetricsOpts& o) {
    if (o.pred_dir.empty() || o.truth_dir.empty())
        throw std::invalid_argument("metrics needs --pred DIR and --truth DIR");
    const auto names = list_pgms(o.pred_dir, "");
    if (names.empty()) throw std::invalid_argument("no .pgm files in '" + o.pred_dir + "'");

    std::vector<TopologyReport> reports;
    double patched_sum = 0.0;
    for (const std::string& name : names) {
        const std::string tp = o.truth_dir + "/" + name;
        if (!fs::is_regular_file(tp))
            throw std::invalid_argument("missing ground-truth file '" + tp + "'");
        const BinaryMask pred = read_pgm_mask(o.pred_dir + "/" + name);
        const BinaryMask gt = read_pgm_mask(tp);
        reports.push_back(evaluate_pair(pred, gt));
        if (o.patch > 0) patched_sum += betti_error_patched(pred, gt, o.patch);
    }
    std::string text = format_report(names, reports);
    if (o.patch > 0)
        text += "patched_betti_error mean " + dbl_str(patched_sum / reports.size()) + " patch " +
                std::to_string(o.patch) + "\n";

    std::cout << text;
    if (!o.out.empty()) {
        std::ofstream f(o.out, std::ios::binary | std::ios::trunc);
        if (!f) throw std::invalid_argument("cannot open report file '" + o.out + "'");
        f << text;
    }
    return 0;
}

// ---------------------------------------------------------------------------
// generate-hard
// ---------------------------------------------------------------------------

struct HardOpts {
    CommonOpts common;
    std::string checkpoint;
    std::string image;
    std::string out;
};

int cmd_generate_hard(const HardOpts& o) {
    RunConfig cfg = resolve_config(o.common);
    if (!o.checkpoint.empty()) cfg.checkpoint = o.checkpoint;
    if (cfg.checkpoint.empty()) throw std::invalid_argument("generate-hard needs --checkpoint FILE");
    if (o.image.empty()) throw std::invalid_argument("generate-hard needs --image FILE");
    ensure_out_dir(o.out);

    SegModel model = load_checkpoint(cfg.checkpoint);
    check_model_meta(cfg, model, cfg.checkpoint);
    const ImageF img = read_pgm(o.image);
    const Tensor x = tensor_from_image(img);
    const Tensor pred = numeric_section([&] { return seg_forward(model, x); });

    Rng rng(cfg.seed);
    const PseudoBreakPlan plan = build_plan(x, pred, cfg.adapt.hg, rng);

    std::cout << "generate-hard image " << o.image << " seed " << cfg.seed << " variant "
              << variant_name(cfg.adapt.hg.variant) << " s " << cfg.adapt.hg.s << "\n";
    std::cout << "accepted " << plan.keypoints.size() << " rejected " << plan.rejected_count
              << "\n";

    write_pgm(o.out + "/hard.pgm", image_from_tensor(plan.hard_image));
    TensorFile wf;
    wf.kind = "weight_map";
    wf.meta = {{"source", o.image}};
    wf.tensors.emplace_back("weights", plan.weight_map);
    write_tensor_file(o.out + "/weights.tt", wf);
    ImageF wviz = image_from_tensor(plan.weight_map);
    for (double& v : wviz.v) v /= 10.0;  // emphasized pixels render bright
    write_pgm(o.out + "/weights.pgm", wviz);

    const ImageF hard = image_from_tensor(plan.hard_image);
    for (std::size_t i = 0; i < plan.keypoints.size(); ++i) {
        const Rect w = plan.fg_windows[i];
        ImageF before(w.side, w.side), after(w.side, w.side);
        for (int y = 0; y < w.side; ++y)
            for (int xx = 0; xx < w.side; ++xx) {
                before.at(y, xx) = img.at(w.top + y, w.left + xx);
                after.at(y, xx) = hard.at(w.top + y, w.left + xx);
            }
        write_pgm(o.out + "/" + numbered("patch_before", static_cast<int>(i), ".pgm"), before);
        write_pgm(o.out + "/" + numbered("patch_after", static_cast<int>(i), ".pgm"), after);
        std::cout << "keypoint " << i << " at (" << plan.keypoints[i].u << ","
                  << plan.keypoints[i].v << ") fg (" << w.top << "," << w.left << ") bg ("
                  << plan.bg_windows[i].top << "," << plan.bg_windows[i].left << ")\n";
    }
    return 0;
}

// ---------------------------------------------------------------------------
// resize-labels
// ---------------------------------------------------------------------------

struct ResizeOpts {
    std::string in_dir, out_dir;
    int size = 0;
};

int cmd_resize_labels(const ResizeOpts& o) {
    if (o.in_dir.empty() || o.out_dir.empty() || o.size < 1)
        throw std::invalid_argument("resize-labels needs --in DIR, --out DIR and --size N");
    const auto names = list_pgms(o.in_dir, "");
    if (names.empty()) throw std::invalid_argument("no .pgm files in '" + o.in_dir + "'");
    ensure_out_dir(o.out_dir);
    for (const std::string& name : names) {
        const BinaryMask m = read_pgm_mask(o.in_dir + "/" + name);
        write_pgm_mask(o.out_dir + "/" + name, resize_label(m, o.size, o.size));
    }
    std::cout << "resized " << names.size() << " labels to " << o.size << "x" << o.size << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

struct SynthOpts {
    std::string out;
    int n = 0;
    std::string domain = "source";
    int size = 96;
    std::uint64_t seed = 0;
};

int cmd_synth(const SynthOpts& o) {
    if (o.n < 1) throw std::invalid_argument("synth needs --n >= 1");
    ensure_out_dir(o.out);
    const DomainSpec spec = domain_preset(o.domain, o.size);
    const auto samples = generate_dataset(spec, o.n, o.seed);
    for (int i = 0; i < o.n; ++i) write_sample_pair(o.out, i, samples[i].image, samples[i].label);
    std::cout << "wrote " << o.n << " " << o.domain << " samples (size " << o.size << ", seed "
              << o.seed << ") to " << o.out << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"tubular-structure segmentation with topology-aware test-time adaptation"};
    app.require_subcommand(1);

    TrainOpts to;
    CLI::App* t = app.add_subcommand("train-source", "train the source segmenter on labeled pairs");
    add_common(t, to.common);
    t->add_option("--data", to.data_dir, "directory of image_*.pgm / label_*.pgm pairs");
    t->add_option("--synth", to.synth_n, "train on N generated samples instead of --data");
    t->add_option("--domain", to.domain, "synthetic domain preset (source|shifted)");
    t->add_option("--size", to.size, "synthetic image side");
    t->add_option("--out", to.out, "checkpoint output path")->required();
    t->add_option("--log", to.log_path, "training log path (default: <out>.log)");

    AdaptOpts ao;
    CLI::App* a = app.add_subcommand("adapt", "adapt over a target image stream and write masks");
    add_common(a, ao.common);
    a->add_option("--checkpoint", ao.checkpoint, "source checkpoint");
    a->add_option("--data", ao.data_dir, "directory of image_*.pgm stream files");
    a->add_option("--out", ao.out, "output directory");
    a->add_flag("--no-adapt", ao.no_adapt, "plain source predictions (baseline)");

    MetricsOpts mo;
    CLI::App* m = app.add_subcommand("metrics", "compare mask directories (Dice, clDice, Betti)");
    m->add_option("--pred", mo.pred_dir, "predicted mask directory")->required();
    m->add_option("--truth", mo.truth_dir, "ground-truth mask directory")->required();
    m->add_option("--out", mo.out, "also write the report to this file");
    m->add_option("--patch", mo.patch, "additionally report patched Betti error with this tile");

    HardOpts ho;
    CLI::App* h = app.add_subcommand("generate-hard", "emit hard-sample edits for inspection");
    add_common(h, ho.common);
    h->add_option("--checkpoint", ho.checkpoint, "source checkpoint");
    h->add_option("--image", ho.image, "input image (PGM)")->required();
    h->add_option("--out", ho.out, "output directory")->required();

    ResizeOpts ro;
    CLI::App* r = app.add_subcommand("resize-labels", "topology-preserving mask resize");
    r->add_option("--in", ro.in_dir, "input mask directory")->required();
    r->add_option("--out", ro.out_dir, "output mask directory")->required();
    r->add_option("--size", ro.size, "output side")->required();

    SynthOpts so;
    CLI::App* s = app.add_subcommand("synth", "write synthetic image/label pairs");
    s->add_option("--out", so.out, "output directory")->required();
    s->add_option("--n", so.n, "number of samples")->required();
    s->add_option("--domain", so.domain, "domain preset (source|shifted)");
    s->add_option("--size", so.size, "image side");
    s->add_option("--seed", so.seed, "generation seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (t->parsed()) return cmd_train(to);
        if (a->parsed()) return cmd_adapt(ao);
        if (m->parsed()) return cmd_metrics(mo);
        if (h->parsed()) return cmd_generate_hard(ho);
        if (r->parsed()) return cmd_resize_labels(ro);
        if (s->parsed()) return cmd_synth(so);
    } catch (const NumericFailure& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 2;  // unreachable: require_subcommand(1)
}
