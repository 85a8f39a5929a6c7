#include "topotta/config.hpp"

#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "topotta/topohg.hpp"

namespace topotta {

namespace {

[[noreturn]] void key_fail(const std::string& key, const std::string& why) {
    throw std::invalid_argument("config key '" + key + "': " + why);
}

std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

template <typename T>
T parse_num(const std::string& key, const std::string& value) {
    T out{};
    const char* first = value.data();
    const char* last = value.data() + value.size();
    const auto [ptr, ec] = std::from_chars(first, last, out);
    if (ec != std::errc{} || ptr != last)
        key_fail(key, "expected a number, got '" + value + "'");
    return out;
}

double parse_f64(const std::string& key, const std::string& value) {
    try {
        std::size_t used = 0;
        const double v = std::stod(value, &used);
        if (used != value.size()) throw std::invalid_argument("");
        return v;
    } catch (const std::exception&) {
        key_fail(key, "expected a number, got '" + value + "'");
    }
}

bool parse_bool(const std::string& key, const std::string& value) {
    if (value == "true" || value == "1") return true;
    if (value == "false" || value == "0") return false;
    key_fail(key, "expected true/false, got '" + value + "'");
}

std::vector<double> parse_list(const std::string& key, const std::string& value) {
    std::vector<double> out;
    std::stringstream ss(value);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (item.empty()) key_fail(key, "empty list element in '" + value + "'");
        out.push_back(parse_f64(key, item));
    }
    if (out.empty()) key_fail(key, "expected a comma-separated list, got '" + value + "'");
    return out;
}

std::string num_str(double v) {
    char buf[64];
    const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return {buf, ptr};
}

struct KeyDef {
    const char* name;
    std::function<void(RunConfig&, const std::string&)> set;
    std::function<std::string(const RunConfig&)> get;
};

const std::vector<KeyDef>& key_table() {
    static const std::vector<KeyDef> table = [] {
        std::vector<KeyDef> t;
        auto add = [&](const char* name, auto set, auto get) {
            t.push_back({name,
                         [name, set](RunConfig& c, const std::string& v) { set(c, name, v); },
                         std::move(get)});
        };

        // model architecture
        add("levels",
            [](RunConfig& c, const char* k, const std::string& v) {
                c.levels = parse_num<int>(k, v);
                c.model_meta_explicit = true;
            },
            [](const RunConfig& c) { return std::to_string(c.levels); });
        add("base_channels",
            [](RunConfig& c, const char* k, const std::string& v) {
                c.base_channels = parse_num<int>(k, v);
                c.model_meta_explicit = true;
            },
            [](const RunConfig& c) { return std::to_string(c.base_channels); });
        add("in_channels",
            [](RunConfig& c, const char* k, const std::string& v) {
                c.in_channels = parse_num<int>(k, v);
                c.model_meta_explicit = true;
            },
            [](const RunConfig& c) { return std::to_string(c.in_channels); });
        add("model_seed",
            [](RunConfig& c, const char* k, const std::string& v) {
                c.model_seed = parse_num<std::uint64_t>(k, v);
            },
            [](const RunConfig& c) { return std::to_string(c.model_seed); });

        // source training
        add("epochs",
            [](RunConfig& c, const char* k, const std::string& v) {
                c.train.epochs = parse_num<int>(k, v);
            },
            [](const RunConfig& c) { return std::to_string(c.train.epochs); });
        add("batch_size",
            [](RunConfig& c, const char* k, const std::string& v) {
                c.train.batch_size = parse_num<int>(k, v);
            },
            [](const RunConfig& c) { return std::to_string(c.train.batch_size); });
        add("lr",
            [](RunConfig& c, const char* k, const std::string& v) { c.train.lr = parse_f64(k, v); },
            [](const RunConfig& c) { return num_str(c.train.lr); });
        add("val_fraction",
            [](RunConfig& c, const char* k, const std::string& v) {
                c.train.val_fraction = parse_f64(k, v);
            },
            [](const RunConfig& c) { return num_str(c.train.val_fraction); });
        add("flip_augment",
            [](RunConfig& c, const char* k, const std::string& v) {
                c.train.flip_augment = parse_bool(k, v);
            },
            [](const RunConfig& c) { return c.train.flip_augment ? "true" : "false"; });
        add("bn_momentum",
            [](RunConfig& c, const char* k, const std::string& v) {
                c.train.bn_momentum = parse_f64(k, v);
            },
            [](const RunConfig& c) { return num_str(c.train.bn_momentum); });

        // adaptation
        add("iterations",
            [](RunConfig& c, const char* k, const std::string& v) {
                c.adapt.iterations = parse_num<int>(k, v);
            },
            [](const RunConfig& c) { return std::to_string(c.adapt.iterations); });
        add("lr_stage1",
            [](RunConfig& c, const char* k, const std::string& v) {
                c.adapt.lr_stage1 = parse_f64(k, v);
            },
            [](const RunConfig& c) { return num_str(c.adapt.lr_stage1); });
        add("lr_stage2",
            [](RunConfig& c, const char* k, const std::string& v) {
                c.adapt.lr_stage2 = parse_f64(k, v);
            },
            [](const RunConfig& c) { return num_str(c.adapt.lr_stage2); });
        add("ema_rate",
            [](RunConfig& c, const char* k, const std::string& v) {
                c.adapt.ema_rate = parse_f64(k, v);
            },
            [](const RunConfig& c) { return num_str(c.adapt.ema_rate); });
        add("teacher_rounds",
            [](RunConfig& c, const char* k, const std::string& v) {
                c.adapt.teacher_rounds = parse_num<int>(k, v);
            },
            [](const RunConfig& c) { return std::to_string(c.adapt.teacher_rounds); });
        add("student_rounds",
            [](RunConfig& c, const char* k, const std::string& v) {
                c.adapt.student_rounds = parse_num<int>(k, v);
            },
            [](const RunConfig& c) { return std::to_string(c.adapt.student_rounds); });
        add("scales",
            [](RunConfig& c, const char* k, const std::string& v) {
                c.adapt.scales = parse_list(k, v);
            },
            [](const RunConfig& c) {
                std::string s;
                for (double v : c.adapt.scales) {
                    if (!s.empty()) s += ",";
                    s += num_str(v);
                }
                return s;
            });
        add("patch_grid",
            [](RunConfig& c, const char* k, const std::string& v) {
                c.adapt.patch_grid = parse_num<int>(k, v);
            },
            [](const RunConfig& c) { return std::to_string(c.adapt.patch_grid); });
        add("continual",
            [](RunConfig& c, const char* k, const std::string& v) {
                c.adapt.continual = parse_bool(k, v);
            },
            [](const RunConfig& c) { return c.adapt.continual ? "true" : "false"; });
        add("binarize_threshold",
            [](RunConfig& c, const char* k, const std::string& v) {
                c.adapt.binarize_threshold = parse_f64(k, v);
            },
            [](const RunConfig& c) { return num_str(c.adapt.binarize_threshold); });
        add("log_eps",
            [](RunConfig& c, const char* k, const std::string& v) {
                c.adapt.log_eps = parse_f64(k, v);
            },
            [](const RunConfig& c) { return num_str(c.adapt.log_eps); });

        // hard-sample generation
        add("hg_tau",
            [](RunConfig& c, const char* k, const std::string& v) {
                c.adapt.hg.tau = parse_f64(k, v);
            },
            [](const RunConfig& c) { return num_str(c.adapt.hg.tau); });
        add("hg_k",
            [](RunConfig& c, const char* k, const std::string& v) {
                c.adapt.hg.k = parse_f64(k, v);
            },
            [](const RunConfig& c) { return num_str(c.adapt.hg.k); });
        add("hg_s",
            [](RunConfig& c, const char* k, const std::string& v) {
                c.adapt.hg.s = parse_num<int>(k, v);
            },
            [](const RunConfig& c) { return std::to_string(c.adapt.hg.s); });
        add("hg_tau_bg",
            [](RunConfig& c, const char* k, const std::string& v) {
                c.adapt.hg.tau_bg = parse_f64(k, v);
            },
            [](const RunConfig& c) { return num_str(c.adapt.hg.tau_bg); });
        add("hg_low_freq_ratio",
            [](RunConfig& c, const char* k, const std::string& v) {
                c.adapt.hg.low_freq_ratio = parse_f64(k, v);
            },
            [](const RunConfig& c) { return num_str(c.adapt.hg.low_freq_ratio); });
        add("hg_variant",
            [](RunConfig& c, const char* k, const std::string& v) {
                try {
                    c.adapt.hg.variant = parse_variant(v);
                } catch (const std::invalid_argument&) {
                    key_fail(k, "unknown variant '" + v + "'");
                }
            },
            [](const RunConfig& c) { return variant_name(c.adapt.hg.variant); });

        // run
        add("seed",
            [](RunConfig& c, const char* k, const std::string& v) {
                c.seed = parse_num<std::uint64_t>(k, v);
            },
            [](const RunConfig& c) { return std::to_string(c.seed); });
        add("data_dir",
            [](RunConfig& c, const char*, const std::string& v) { c.data_dir = v; },
            [](const RunConfig& c) { return c.data_dir; });
        add("checkpoint",
            [](RunConfig& c, const char*, const std::string& v) { c.checkpoint = v; },
            [](const RunConfig& c) { return c.checkpoint; });
        add("out_dir",
            [](RunConfig& c, const char*, const std::string& v) { c.out_dir = v; },
            [](const RunConfig& c) { return c.out_dir; });
        return t;
    }();
    return table;
}

}  // namespace

void apply_config(RunConfig& cfg, const std::string& key, const std::string& value) {
    for (const KeyDef& def : key_table()) {
        if (key == def.name) {
            def.set(cfg, value);
            return;
        }
    }
    throw std::invalid_argument("config: unknown key '" + key + "'");
}

RunConfig parse_config_text(const std::string& text) {
    RunConfig cfg;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("config line " + std::to_string(lineno) +
                                        ": expected 'key = value', got '" + line + "'");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty() || value.empty())
            throw std::invalid_argument("config line " + std::to_string(lineno) +
                                        ": expected 'key = value', got '" + line + "'");
        try {
            apply_config(cfg, key, value);
        } catch (const std::invalid_argument& e) {
            throw std::invalid_argument("config line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    return cfg;
}

RunConfig load_config_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::invalid_argument("config: cannot read '" + path + "'");
    std::ostringstream buf;
    buf << f.rdbuf();
    return parse_config_text(buf.str());
}

void validate_config(const RunConfig& cfg) {
    auto fail = [](const std::string& why) { throw std::invalid_argument("config: " + why); };
    if (cfg.levels < 1 || cfg.base_channels < 1 || cfg.in_channels < 1)
        fail("levels, base_channels, in_channels must be >= 1");
    if (cfg.train.epochs < 1) fail("epochs must be >= 1");
    if (cfg.train.batch_size < 1) fail("batch_size must be >= 1");
    if (!(cfg.train.lr > 0.0)) fail("lr must be > 0");
    if (cfg.train.val_fraction < 0.0 || cfg.train.val_fraction >= 1.0)
        fail("val_fraction must be in [0,1)");
    if (!(cfg.train.bn_momentum > 0.0) || cfg.train.bn_momentum > 1.0)
        fail("bn_momentum must be in (0,1]");
    validate_adapt(cfg.adapt);
}

std::string dump_config(const RunConfig& cfg) {
    std::string out;
    for (const KeyDef& def : key_table()) {
        const std::string v = def.get(cfg);
        if (v.empty()) continue;  // unset paths; an empty value would not re-parse
        out += def.name;
        out += " = ";
        out += v;
        out += "\n";
    }
    return out;
}

}  // namespace topotta
