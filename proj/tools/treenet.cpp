#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "treenet.hpp"

namespace {

using namespace treenet;

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ModelSource {
    std::string arch;
    std::string config;
    std::int64_t width_divisor = 1;
    std::int64_t classes = 1000;
};

ConfigDoc load_doc(const std::string& path) {
    try {
        return load_config(path);
    } catch (const Error& e) {
        throw UsageError(e.what());
    }
}

ModelSpec resolve_model(const ModelSource& src) {
    if (!src.config.empty()) return load_doc(src.config).model;
    if (src.arch.empty()) throw UsageError("one of --arch or --config is required (valid arch: " + valid_variants_text() + ")");
    try {
        auto spec = treenet_spec(parse_variant(src.arch), src.width_divisor, src.classes);
        spec.validate();
        return spec;
    } catch (const Error& e) {
        throw UsageError(e.what());
    }
}

void add_model_options(CLI::App* cmd, ModelSource& src) {
    cmd->add_option("--arch", src.arch, "treenet-20 | treenet-40 | treenet-58 | treenet-100");
    cmd->add_option("--config", src.config, "model config file (overrides --arch)");
    cmd->add_option("--width-divisor", src.width_divisor, "divide every width by this factor")->check(CLI::PositiveNumber);
    cmd->add_option("--classes", src.classes, "classifier outputs")->check(CLI::PositiveNumber);
}

std::string extent(const Shape& s) {
    return std::to_string(s[2]) + "²×" + std::to_string(s[1]);
}

/// Left-aligns to `width` terminal columns, counting UTF-8 code points.
std::string pad(const std::string& text, std::size_t width) {
    std::size_t cols = 0;
    for (unsigned char c : text) cols += (c & 0xC0) != 0x80;
    return text + std::string(cols < width ? width - cols : 1, ' ');
}

// ---------------------------------------------------------------- summary

int cmd_summary(const ModelSource& src, std::int64_t input) {
    const ModelSpec spec = resolve_model(src);
    auto model = build_model<float>(spec, 0);
    const Shape in{1, spec.stem.in_channels, input, input};
    const auto report = analyze_graph(*model, in, spec.name);

    std::vector<Shape> outs;
    Trace t;
    Shape h = model->stem().trace(in, "", t);
    outs.push_back(h);
    for (auto& st : model->stages()) {
        if (st.downsample) h = {h[0], h[1], (h[2] - 1) / 2 + 1, (h[3] - 1) / 2 + 1};
        for (auto& b : st.blocks) h = b->trace(h, "", t);
        outs.push_back(h);
    }

    std::printf("%s  input %lld²×%lld\n", spec.name.c_str(), (long long)input, (long long)spec.stem.in_channels);
    std::printf("%-10s %-15s%-23s%-3s %-6s %-6s %s\n", "layer", "output", "blocks", "l", "k", "k'", "k_cat");
    std::printf("%-10s %s3x3 %lld/2, %lld/1, %lld/2\n", "stem", pad(extent(outs[0]), 15).c_str(),
                (long long)spec.stem.width1, (long long)spec.stem.width2, (long long)spec.stem.width3);
    for (std::size_t s = 0; s < spec.stages.size(); ++s) {
        const auto& st = spec.stages[s];
        std::string blocks = (st.block.kind == BlockKind::Tree ? "Tree block×" : "OSA block×") + std::to_string(st.blocks);
        if (st.downsample) blocks = "pool, " + blocks;
        std::printf("%-10s %s%s%-3lld %-6lld %-6lld %lld\n", ("stage" + std::to_string(s + 2)).c_str(),
                    pad(extent(outs[s + 1]), 15).c_str(), pad(blocks, 23).c_str(), (long long)st.block.depth, (long long)st.block.k,
                    (long long)(st.block.kind == BlockKind::Tree ? st.block.k_prime : st.block.k),
                    (long long)st.block.k_cat);
    }
    std::printf("%-10s %sGAP, %lld-d fc\n", "classifier", pad("1²×" + std::to_string(spec.num_classes), 15).c_str(),
                (long long)spec.num_classes);
    const auto& tot = report.totals;
    std::printf("params: %s (%s without classifier)\n", format_count(tot.params).c_str(),
                format_count(tot.params_no_classifier).c_str());
    std::printf("params with BN: %s (%s without classifier)\n", format_count(tot.params_with_bn).c_str(),
                format_count(tot.params_with_bn_no_classifier).c_str());
    std::printf("GFLOP-units: %.3f  output stride %lld\n", static_cast<double>(tot.flops) / 1e9,
                (long long)(input / outs.back()[2]));
    return kExitOk;
}

// ---------------------------------------------------------------- cost

struct BlockArgs {
    std::string kind;
    std::int64_t l = 3, k = 128, kp = 128, kin = 256, kcat = 256, hw = 56;
};

std::int64_t conv_weights(Module<float>& m) {
    std::int64_t n = 0;
    for (auto& t : m.named_tensors())
        if (t.kind == ParamKind::ConvWeight) n += t.tensor.numel();
    return n;
}

int cmd_cost(const ModelSource& src, const BlockArgs& ba, bool compare_osa, bool csv, std::int64_t input,
             std::size_t group) {
    if (!ba.kind.empty()) {
        BlockSpec b;
        if (ba.kind == "tree") b.kind = BlockKind::Tree;
        else if (ba.kind == "osa") b.kind = BlockKind::Osa;
        else throw UsageError("--block must be 'tree' or 'osa'");
        b.depth = ba.l;
        b.k = ba.k;
        b.k_prime = b.kind == BlockKind::Tree ? ba.kp : ba.k;
        b.k_in = ba.kin;
        b.k_cat = ba.kcat;
        try {
            b.validate();
        } catch (const Error& e) {
            throw UsageError(e.what());
        }
        Rng rng(0);
        auto block = build_block<float>(b, rng);
        const auto report = analyze_graph(*block, {1, b.k_in, ba.hw, ba.hw}, ba.kind + " block");
        if (csv) {
            std::cout << render_csv(report);
            return kExitOk;
        }
        std::cout << render_text(report);
        const std::int64_t analytic = b.kind == BlockKind::Tree ? tree_params(b.k_in, b.k, b.k_prime, b.depth, b.k_cat)
                                                                : osa_params(b.k_in, b.k, b.depth, b.k_cat);
        std::printf("conv weights: analytic %s  enumerated %s\n", format_count(analytic).c_str(),
                    format_count(conv_weights(*block)).c_str());
        if (compare_osa) {
            if (b.kind != BlockKind::Tree) throw UsageError("--compare-osa needs --block tree");
            auto osa = build_osa_block<float>(osa_reference_spec(b.depth, b.k, b.k_in, b.k_cat), rng);
            const std::int64_t enumerated = conv_weights(*osa) - conv_weights(*block);
            const std::int64_t predicted = osa_params(b.k_in, b.k, b.depth, b.k_cat) - analytic;
            std::printf("osa - tree: analytic %s  enumerated %s\n", format_count(predicted).c_str(),
                        format_count(enumerated).c_str());
            if (b.k_in == 2 * b.k && b.k_cat == 2 * b.k)
                std::printf("closed-form difference (k_in = k_cat = 2k): %s\n",
                            format_count(param_diff(b.k, b.k_prime, b.depth)).c_str());
        }
        return kExitOk;
    }
    if (compare_osa) throw UsageError("--compare-osa needs --block tree");
    const ModelSpec spec = resolve_model(src);
    auto model = build_model<float>(spec, 0);
    const auto report = analyze_graph(*model, {1, spec.stem.in_channels, input, input}, spec.name);
    if (csv) {
        std::cout << render_csv(report);
        return kExitOk;
    }
    std::cout << render_text(report, group);
    std::int64_t analytic = 0, enumerated = 0;
    for (auto& st : model->stages())
        for (auto& blk : st.blocks) {
            const auto* tb = dynamic_cast<TreeBlock<float>*>(blk.get());
            const auto* ob = dynamic_cast<OsaBlock<float>*>(blk.get());
            const BlockSpec& b = tb ? tb->spec() : ob->spec();
            analytic += b.kind == BlockKind::Tree ? tree_params(b.k_in, b.k, b.k_prime, b.depth, b.k_cat)
                                                  : osa_params(b.k_in, b.k, b.depth, b.k_cat);
            enumerated += conv_weights(*blk);
        }
    std::printf("block conv weights: analytic %s  enumerated %s\n", format_count(analytic).c_str(),
                format_count(enumerated).c_str());
    return kExitOk;
}

// ---------------------------------------------------------------- gradcheck

int cmd_gradcheck(std::uint64_t seed, double tolerance, bool inject_fault) {
    backward_fault_injection() = inject_fault;
    const auto results = run_all_gradchecks(seed, tolerance);
    backward_fault_injection() = false;
    std::cout << render_gradcheck(results, tolerance);
    const bool ok = std::all_of(results.begin(), results.end(), [](const auto& r) { return r.passed; });
    return ok ? kExitOk : kExitFailure;
}

// ---------------------------------------------------------------- train

int cmd_train(const std::string& config_path, const std::string& out_dir, std::uint64_t seed, bool seed_set) {
    ConfigDoc doc = config_path.empty() ? parse_config("") : load_doc(config_path);
    if (seed_set) doc.train.seed = seed;
    try {
        doc.model.validate();
        doc.train.validate();
    } catch (const Error& e) {
        throw UsageError(e.what());
    }
    if (doc.model.num_classes != doc.data.classes)
        throw UsageError("model num_classes (" + std::to_string(doc.model.num_classes) + ") != data classes (" +
                         std::to_string(doc.data.classes) + ")");
    std::filesystem::create_directories(out_dir);
    auto [train_set, val_set] = make_datasets<float>(doc.data);
    auto model = build_model<float>(doc.model, doc.train.seed);
    std::printf("training %s on %lld images (%lld classes, %lld²), %lld epochs\n", doc.model.name.c_str(),
                (long long)train_set.size(), (long long)doc.data.classes, (long long)doc.data.image_size,
                (long long)doc.train.epochs);
    const auto history = train(*model, train_set, doc.train, [](const EpochMetrics& m) {
        std::printf("epoch %3lld  lr %.5f  loss %.4f  top1 %.3f  top5 %.3f\n", (long long)m.epoch, m.lr, m.loss, m.top1,
                    m.top5);
        std::fflush(stdout);
    });
    const auto final_train = evaluate(*model, train_set);
    std::printf("train (eval mode): loss %.4f  top1 %.3f  top5 %.3f\n", final_train.loss, final_train.top1,
                final_train.top5);
    if (val_set) {
        const auto v = evaluate(*model, *val_set);
        std::printf("validation:        loss %.4f  top1 %.3f  top5 %.3f\n", v.loss, v.top1, v.top5);
    }
    const auto dir = std::filesystem::path(out_dir);
    save_checkpoint(*model, (dir / "model.trnw").string());
    std::ofstream((dir / "metrics.csv").string(), std::ios::binary) << metrics_csv(history);
    std::ofstream((dir / "config.txt").string(), std::ios::binary) << render_config(doc);
    std::printf("wrote %s, %s, %s\n", (dir / "model.trnw").c_str(), (dir / "metrics.csv").c_str(),
                (dir / "config.txt").c_str());
    return kExitOk;
}

// ---------------------------------------------------------------- predict

/// Plain or binary PPM (P3/P6), 8 or 16 bit; samples mapped to [-1, 1], CHW.
Tensor<float> read_ppm(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error("cannot open image '" + path + "'");
    auto token = [&]() {
        std::string t;
        char c;
        while (f.get(c)) {
            if (c == '#') {
                std::string skip;
                std::getline(f, skip);
                continue;
            }
            if (std::isspace(static_cast<unsigned char>(c))) {
                if (!t.empty()) break;
                continue;
            }
            t += c;
        }
        if (t.empty()) throw Error("image '" + path + "': truncated header");
        return t;
    };
    const std::string magic = token();
    if (magic != "P3" && magic != "P6") throw Error("image '" + path + "': only P3/P6 PPM is supported");
    std::int64_t w = 0, h = 0, maxval = 0;
    try {
        w = std::stoll(token());
        h = std::stoll(token());
        maxval = std::stoll(token());
    } catch (const std::logic_error&) {
        throw Error("image '" + path + "': malformed header");
    }
    if (w < 1 || h < 1 || maxval < 1 || maxval > 65535) throw Error("image '" + path + "': bad dimensions");
    Tensor<float> x(Shape{1, 3, h, w});
    auto px = x.data();
    for (std::int64_t i = 0; i < w * h; ++i)
        for (std::int64_t c = 0; c < 3; ++c) {
            std::int64_t v = 0;
            if (magic == "P3") {
                v = std::stoll(token());
            } else {
                unsigned char b[2] = {0, 0};
                f.read(reinterpret_cast<char*>(b), maxval > 255 ? 2 : 1);
                if (!f) throw Error("image '" + path + "': truncated pixel data");
                v = maxval > 255 ? (b[0] << 8 | b[1]) : b[0];
            }
            if (v > maxval) throw Error("image '" + path + "': sample exceeds maxval");
            px[static_cast<std::size_t>(c * h * w + i)] = 2.0f * static_cast<float>(v) / static_cast<float>(maxval) - 1.0f;
        }
    return x;
}

int cmd_predict(const std::string& config_path, const std::string& checkpoint, const std::string& input,
                bool print_logits) {
    const ConfigDoc doc = config_path.empty() ? parse_config("") : load_doc(config_path);
    auto model = build_model<float>(doc.model, doc.train.seed);
    if (!checkpoint.empty()) load_checkpoint(*model, checkpoint);
    model->set_training(false);
    const Tensor<float> x = read_ppm(input);
    NoGradGuard guard;
    const auto logits = model->forward(x);
    std::vector<std::int64_t> label{0};
    const auto probs = softmax_cross_entropy(logits, std::span<const std::int64_t>(label)).probs;
    const std::int64_t K = probs.dim(1);
    std::vector<std::int64_t> order(static_cast<std::size_t>(K));
    std::iota(order.begin(), order.end(), 0);
    auto p = probs.data();
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return p[a] > p[b]; });
    double total = 0;
    std::printf("class  probability\n");
    for (std::int64_t r = 0; r < std::min<std::int64_t>(5, K); ++r) {
        const auto c = order[static_cast<std::size_t>(r)];
        total += p[c];
        std::printf("%5lld  %.6f\n", (long long)c, static_cast<double>(p[c]));
    }
    std::printf("top-5 mass %.6f\n", total);
    if (print_logits) {
        std::printf("logits");
        for (float v : logits.data()) std::printf(" %a", static_cast<double>(v));
        std::printf("\n");
    }
    return kExitOk;
}

// ---------------------------------------------------------------- verify

int cmd_verify(std::uint64_t seed, const std::vector<int>& only) {
    VerifyOptions opt;
    opt.seed = seed;
    opt.only = only;
    opt.on_result = [](const CriterionResult& r) {
        std::cout << render_criterion(r) << std::flush;
    };
    opt.on_progress = [](const std::string& line) { std::cout << "       .. " << line << '\n' << std::flush; };
    const auto results = run_acceptance(opt);
    const auto passed = std::count_if(results.begin(), results.end(), [](const auto& r) { return r.passed; });
    std::printf("%lld/%zu criteria passed\n", (long long)passed, results.size());
    return passed == static_cast<long long>(results.size()) ? kExitOk : kExitFailure;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"TreeNet reference implementation: model summaries, cost analysis, training and checks"};
    app.require_subcommand(1);
    int threads = threads_from_env(1);
    std::uint64_t seed = 0;
    app.add_option("--threads", threads, "kernel worker threads (default TREENET_THREADS or 1)")
        ->check(CLI::PositiveNumber);
    auto* seed_opt = app.add_option("--seed", seed, "random seed");

    ModelSource summary_src, cost_src;
    std::int64_t summary_input = 224, cost_input = 224;
    auto* summary = app.add_subcommand("summary", "per-stage layout and parameter totals");
    add_model_options(summary, summary_src);
    summary->add_option("--input", summary_input, "input side length")->check(CLI::PositiveNumber);

    BlockArgs block;
    bool compare_osa = false, csv = false;
    std::size_t group = 2;
    auto* cost = app.add_subcommand("cost", "analytic and enumerated parameter, FLOP and MAC counts");
    add_model_options(cost, cost_src);
    cost->add_option("--input", cost_input, "input side length")->check(CLI::PositiveNumber);
    cost->add_option("--block", block.kind, "analyse a single block: tree | osa");
    cost->add_option("--l", block.l, "block depth");
    cost->add_option("--k", block.k, "branch width");
    cost->add_option("--kp", block.kp, "trunk width k'");
    cost->add_option("--kin", block.kin, "input channels");
    cost->add_option("--kcat", block.kcat, "transition output channels");
    cost->add_option("--hw", block.hw, "block input side length")->check(CLI::PositiveNumber);
    cost->add_flag("--compare-osa", compare_osa, "compare a tree block with the OSA block of the same geometry");
    cost->add_flag("--csv", csv, "emit per-layer CSV");
    cost->add_option("--group", group, "merge layer rows by the first N name components (0 = no merging)");

    double tolerance = 1e-4;
    bool inject = false;
    auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference checks of every op and block");
    gradcheck->add_option("--tolerance", tolerance, "relative error bound")->check(CLI::PositiveNumber);
    gradcheck->add_flag("--inject-fault", inject, "corrupt backward on purpose (the run must fail)");

    std::string train_config, out_dir = "run";
    auto* train_cmd = app.add_subcommand("train", "train on the synthetic dataset described by a config");
    train_cmd->add_option("--config", train_config, "config file (default: desk-scale treenet-20/w4)");
    train_cmd->add_option("--out", out_dir, "output directory for model.trnw, metrics.csv, config.txt");

    std::string predict_config, checkpoint, image;
    bool print_logits = false;
    auto* predict = app.add_subcommand("predict", "top-5 classes for a PPM image");
    predict->add_option("--config", predict_config, "config the checkpoint was trained with");
    predict->add_option("--checkpoint", checkpoint, "model.trnw (omit for a fresh random model)");
    predict->add_option("--input", image, "P3/P6 PPM image")->required();
    predict->add_flag("--logits", print_logits, "also print raw logits as hex floats");

    std::vector<int> only;
    auto* verify = app.add_subcommand("verify", "run the acceptance suite");
    verify->add_option("--only", only, "criterion numbers to run")->delimiter(',')->check(CLI::Range(1, 9));

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitUsage;
    }
    set_num_threads(threads);

    try {
        if (*summary) return cmd_summary(summary_src, summary_input);
        if (*cost) return cmd_cost(cost_src, block, compare_osa, csv, cost_input, group);
        if (*gradcheck) return cmd_gradcheck(seed, tolerance, inject);
        if (*train_cmd) return cmd_train(train_config, out_dir, seed, seed_opt->count() > 0);
        if (*predict) return cmd_predict(predict_config, checkpoint, image, print_logits);
        if (*verify) return cmd_verify(seed, only);
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitFailure;
    }
    return kExitUsage;
}
