#pragma once

#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <utility>
#include <sstream>
#include <string>
#include <vector>

#include "treenet/model_zoo.hpp"
#include "treenet/trainer.hpp"

// Line-structured "key: value" documents; a key with no value opens a section
// whose entries are indented deeper than the key. '#' starts a comment.
//
//   model:
//     arch: treenet-20      # optional base, explicit keys below override it
//     width_divisor: 4
//     stage2:
//       k: 32
//   train:
//     epochs: 20
//   data:
//     classes: 4
namespace treenet {

struct DataConfig {
    std::int64_t classes = 4;
    std::int64_t per_class = 32;
    std::int64_t val_per_class = 0;
    std::int64_t image_size = 64;
    std::uint64_t seed = 7;
    double signal = 1.0;
    double noise = 1.0;
    bool operator==(const DataConfig&) const = default;
};

struct ConfigDoc {
    ModelSpec model;
    TrainConfig train;
    DataConfig data;
    bool operator==(const ConfigDoc&) const = default;
};

class ConfigError : public Error {
public:
    ConfigError(int line, const std::string& msg)
        : Error("config:" + std::to_string(line) + ": " + msg), line_(line) {}
    int line() const { return line_; }

private:
    int line_;
};

namespace config_detail {

struct Entry {
    std::string key;
    std::string value;
    int line = 0;
    int indent = 0;
    std::vector<Entry> children;
    bool is_section() const { return value.empty(); }
};

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

inline std::vector<Entry> parse_entries(const std::string& text) {
    std::vector<Entry> flat;
    std::istringstream in(text);
    std::string raw;
    int lineno = 0;
    while (std::getline(in, raw)) {
        ++lineno;
        std::string line = raw;
        for (std::size_t i = 0; i < line.size(); ++i)
            if (line[i] == '#' && (i == 0 || line[i - 1] == ' ' || line[i - 1] == '\t')) {
                line.resize(i);
                break;
            }
        if (trim(line).empty()) continue;
        int indent = 0;
        while (indent < static_cast<int>(line.size()) && line[static_cast<std::size_t>(indent)] == ' ') ++indent;
        if (line[static_cast<std::size_t>(indent)] == '\t') throw ConfigError(lineno, "tabs are not allowed for indentation");
        const auto colon = line.find(':');
        if (colon == std::string::npos) throw ConfigError(lineno, "expected 'key: value'");
        Entry e;
        e.key = trim(line.substr(0, colon));
        e.value = trim(line.substr(colon + 1));
        e.line = lineno;
        e.indent = indent;
        if (e.key.empty()) throw ConfigError(lineno, "empty key");
        flat.push_back(std::move(e));
    }
    // Fold the flat list into a tree by indentation.
    std::function<std::vector<Entry>(std::size_t&, int)> fold = [&](std::size_t& i, int indent) {
        std::vector<Entry> level;
        while (i < flat.size() && flat[i].indent >= indent) {
            if (flat[i].indent != indent) throw ConfigError(flat[i].line, "unexpected indentation");
            Entry e = flat[i++];
            if (e.is_section() && i < flat.size() && flat[i].indent > indent) e.children = fold(i, flat[i].indent);
            level.push_back(std::move(e));
        }
        return level;
    };
    std::size_t i = 0;
    auto top = fold(i, flat.empty() ? 0 : flat[0].indent);
    if (i != flat.size()) throw ConfigError(flat[i].line, "unexpected indentation");
    return top;
}

inline std::int64_t as_int(const Entry& e) {
    std::int64_t v = 0;
    auto [p, ec] = std::from_chars(e.value.data(), e.value.data() + e.value.size(), v);
    if (ec != std::errc{} || p != e.value.data() + e.value.size())
        throw ConfigError(e.line, "'" + e.key + "' expects an integer, got '" + e.value + "'");
    return v;
}

inline double as_double(const Entry& e) {
    double v = 0;
    auto [p, ec] = std::from_chars(e.value.data(), e.value.data() + e.value.size(), v);
    if (ec != std::errc{} || p != e.value.data() + e.value.size())
        throw ConfigError(e.line, "'" + e.key + "' expects a number, got '" + e.value + "'");
    return v;
}

inline bool as_bool(const Entry& e) {
    if (e.value == "true") return true;
    if (e.value == "false") return false;
    throw ConfigError(e.line, "'" + e.key + "' expects true or false, got '" + e.value + "'");
}

inline std::string fmt_double(double v) {
    char buf[64];
    auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, p);
}

[[noreturn]] inline void unknown(const Entry& e, const std::string& section) {
    throw ConfigError(e.line, "unknown key '" + e.key + "' in section '" + section + "'");
}

inline void require_scalar(const Entry& e) {
    if (e.is_section()) throw ConfigError(e.line, "'" + e.key + "' expects a value");
}

inline void parse_block(const std::vector<Entry>& entries, const std::string& section, StageSpec& st) {
    for (const auto& e : entries) {
        require_scalar(e);
        auto& b = st.block;
        if (e.key == "blocks") st.blocks = as_int(e);
        else if (e.key == "downsample") st.downsample = as_bool(e);
        else if (e.key == "kind") {
            if (e.value == "tree") b.kind = BlockKind::Tree;
            else if (e.value == "osa") b.kind = BlockKind::Osa;
            else throw ConfigError(e.line, "kind must be 'tree' or 'osa'");
        } else if (e.key == "depth") b.depth = as_int(e);
        else if (e.key == "k") b.k = as_int(e);
        else if (e.key == "k_prime") b.k_prime = as_int(e);
        else if (e.key == "k_cat") b.k_cat = as_int(e);
        else if (e.key == "srb") b.use_srb = as_bool(e);
        else if (e.key == "residual") b.use_residual = as_bool(e);
        else if (e.key == "eca") b.use_eca = as_bool(e);
        else if (e.key == "eca_kernel") {
            if (e.value == "auto") b.eca_kernel.reset();
            else b.eca_kernel = as_int(e);
        } else unknown(e, section);
    }
}

inline void parse_model(const Entry& sec, ModelSpec& m) {
    // 'arch' and 'width_divisor' establish a base before explicit keys apply.
    std::int64_t divisor = 1;
    const Entry* arch = nullptr;
    for (const auto& e : sec.children) {
        if (e.key == "arch") arch = &e;
        if (e.key == "width_divisor") divisor = as_int(e);
    }
    if (arch) {
        try {
            m = treenet_spec(parse_variant(arch->value), divisor, m.num_classes);
        } catch (const ConfigError&) {
            throw;
        } catch (const Error& err) {
            throw ConfigError(arch->line, err.what());
        }
    } else if (divisor != 1) {
        throw ConfigError(sec.line, "width_divisor requires arch");
    }
    for (const auto& e : sec.children) {
        if (e.key == "arch" || e.key == "width_divisor") continue;
        if (e.key == "name") { require_scalar(e); m.name = e.value; }
        else if (e.key == "num_classes") { require_scalar(e); m.num_classes = as_int(e); }
        else if (e.key == "output_stride") { require_scalar(e); m.output_stride = as_int(e); }
        else if (e.key == "stem") {
            for (const auto& s : e.children) {
                require_scalar(s);
                if (s.key == "in_channels") m.stem.in_channels = as_int(s);
                else if (s.key == "width1") m.stem.width1 = as_int(s);
                else if (s.key == "width2") m.stem.width2 = as_int(s);
                else if (s.key == "width3") m.stem.width3 = as_int(s);
                else unknown(s, "model.stem");
            }
        } else if (e.key.rfind("stage", 0) == 0) {
            std::int64_t idx = -1;
            const auto digits = e.key.substr(5);
            auto [p, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), idx);
            if (ec != std::errc{} || p != digits.data() + digits.size() || idx < 2)
                unknown(e, "model");
            const auto pos = static_cast<std::size_t>(idx - 2);
            if (pos > m.stages.size())
                throw ConfigError(e.line, "stages must be numbered consecutively from stage2");
            if (pos == m.stages.size()) m.stages.push_back(pos == 0 ? StageSpec{} : m.stages.back());
            parse_block(e.children, "model." + e.key, m.stages[pos]);
        } else {
            unknown(e, "model");
        }
    }
}

inline void parse_train(const Entry& sec, TrainConfig& t) {
    for (const auto& e : sec.children) {
        require_scalar(e);
        if (e.key == "epochs") t.epochs = as_int(e);
        else if (e.key == "batch_size") t.batch_size = as_int(e);
        else if (e.key == "base_lr") t.base_lr = as_double(e);
        else if (e.key == "momentum") t.momentum = as_double(e);
        else if (e.key == "weight_decay") t.weight_decay = as_double(e);
        else if (e.key == "warmup_epochs") t.warmup_epochs = as_double(e);
        else if (e.key == "decay_interval") t.decay_interval = as_double(e);
        else if (e.key == "decay_factor") t.decay_factor = as_double(e);
        else if (e.key == "seed") t.seed = static_cast<std::uint64_t>(as_int(e));
        else if (e.key == "flip") t.flip = as_bool(e);
        else unknown(e, "train");
    }
}

inline void parse_data(const Entry& sec, DataConfig& d) {
    for (const auto& e : sec.children) {
        require_scalar(e);
        if (e.key == "classes") d.classes = as_int(e);
        else if (e.key == "per_class") d.per_class = as_int(e);
        else if (e.key == "val_per_class") d.val_per_class = as_int(e);
        else if (e.key == "image_size") d.image_size = as_int(e);
        else if (e.key == "seed") d.seed = static_cast<std::uint64_t>(as_int(e));
        else if (e.key == "signal") d.signal = as_double(e);
        else if (e.key == "noise") d.noise = as_double(e);
        else unknown(e, "data");
    }
}

}  // namespace config_detail

/// Parses a config document on top of `base` (defaults: desk-scale TreeNet-20).
inline ConfigDoc parse_config(const std::string& text, ConfigDoc base = {treenet_spec(20, 4, 4), desk_config(), {}}) {
    using namespace config_detail;
    ConfigDoc doc = std::move(base);
    for (const auto& sec : parse_entries(text)) {
        if (!sec.is_section()) throw ConfigError(sec.line, "top-level key '" + sec.key + "' must be a section");
        if (sec.key == "model") parse_model(sec, doc.model);
        else if (sec.key == "train") parse_train(sec, doc.train);
        else if (sec.key == "data") parse_data(sec, doc.data);
        else throw ConfigError(sec.line, "unknown section '" + sec.key + "'");
    }
    return doc;
}

inline ConfigDoc load_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw Error("cannot open config '" + path + "'");
    std::stringstream ss;
    ss << f.rdbuf();
    return parse_config(ss.str());
}

/// Training split followed by the optional validation split. Both come from one
/// generator call, so they share the class blobs and differ only in samples.
template <Scalar T>
std::pair<SyntheticDataset<T>, std::optional<SyntheticDataset<T>>> make_datasets(const DataConfig& d) {
    auto all = make_synthetic<T>(d.classes, d.per_class + d.val_per_class, d.image_size, d.seed,
                                 SyntheticOptions{d.signal, d.noise});
    if (d.val_per_class == 0) return {std::move(all), std::nullopt};
    const std::int64_t n = d.classes * d.per_class;
    return {all.slice(0, n), all.slice(n, all.size())};
}

/// Fully explicit rendering; parse_config(render_config(doc)) == doc.
inline std::string render_config(const ConfigDoc& doc) {
    using config_detail::fmt_double;
    std::ostringstream os;
    auto b = [](bool v) { return v ? "true" : "false"; };
    const auto& m = doc.model;
    os << "model:\n";
    os << "  name: " << m.name << '\n';
    os << "  num_classes: " << m.num_classes << '\n';
    os << "  output_stride: " << m.output_stride << '\n';
    os << "  stem:\n";
    os << "    in_channels: " << m.stem.in_channels << '\n';
    os << "    width1: " << m.stem.width1 << '\n';
    os << "    width2: " << m.stem.width2 << '\n';
    os << "    width3: " << m.stem.width3 << '\n';
    for (std::size_t s = 0; s < m.stages.size(); ++s) {
        const auto& st = m.stages[s];
        os << "  stage" << s + 2 << ":\n";
        os << "    blocks: " << st.blocks << '\n';
        os << "    downsample: " << b(st.downsample) << '\n';
        os << "    kind: " << (st.block.kind == BlockKind::Tree ? "tree" : "osa") << '\n';
        os << "    depth: " << st.block.depth << '\n';
        os << "    k: " << st.block.k << '\n';
        os << "    k_prime: " << st.block.k_prime << '\n';
        os << "    k_cat: " << st.block.k_cat << '\n';
        os << "    srb: " << b(st.block.use_srb) << '\n';
        os << "    residual: " << b(st.block.use_residual) << '\n';
        os << "    eca: " << b(st.block.use_eca) << '\n';
        os << "    eca_kernel: " << (st.block.eca_kernel ? std::to_string(*st.block.eca_kernel) : "auto") << '\n';
    }
    const auto& t = doc.train;
    os << "train:\n";
    os << "  epochs: " << t.epochs << '\n';
    os << "  batch_size: " << t.batch_size << '\n';
    os << "  base_lr: " << fmt_double(t.base_lr) << '\n';
    os << "  momentum: " << fmt_double(t.momentum) << '\n';
    os << "  weight_decay: " << fmt_double(t.weight_decay) << '\n';
    os << "  warmup_epochs: " << fmt_double(t.warmup_epochs) << '\n';
    os << "  decay_interval: " << fmt_double(t.decay_interval) << '\n';
    os << "  decay_factor: " << fmt_double(t.decay_factor) << '\n';
    os << "  seed: " << t.seed << '\n';
    os << "  flip: " << b(t.flip) << '\n';
    const auto& d = doc.data;
    os << "data:\n";
    os << "  classes: " << d.classes << '\n';
    os << "  per_class: " << d.per_class << '\n';
    os << "  val_per_class: " << d.val_per_class << '\n';
    os << "  image_size: " << d.image_size << '\n';
    os << "  seed: " << d.seed << '\n';
    os << "  signal: " << fmt_double(d.signal) << '\n';
    os << "  noise: " << fmt_double(d.noise) << '\n';
    return os.str();
}

}  // namespace treenet
