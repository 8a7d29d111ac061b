#pragma once

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "treenet/checkpoint.hpp"
#include "treenet/config.hpp"
#include "treenet/cost_model.hpp"
#include "treenet/gradcheck.hpp"
#include "treenet/model_zoo.hpp"
#include "treenet/trainer.hpp"

// Acceptance suite shared by `treenet verify` and the acceptance test binary.
namespace treenet {

struct CriterionResult {
    int id = 0;
    std::string title;
    bool passed = false;
    double seconds = 0;
    double limit_seconds = 0;
    std::vector<std::string> details;
};

struct VerifyOptions {
    std::uint64_t seed = 0;
    std::vector<int> only;  // empty runs every criterion
    std::function<void(const CriterionResult&)> on_result;
    std::function<void(const std::string&)> on_progress;
};

struct PublishedFigures {
    int variant;
    double gflops;
    double params_m;
};

inline constexpr std::array<PublishedFigures, 4> kPublished{{
    {20, 4.20, 8.37},
    {40, 6.68, 17.33},
    {58, 7.91, 26.58},
    {100, 13.24, 43.42},
}};
inline constexpr double kTreeNet58GflopsAlt = 7.93;

namespace verify_detail {

template <class... A>
std::string fmt(const char* f, A... a) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, a...);
    return buf;
}

inline double rel(double measured, double target) { return std::abs(measured - target) / target; }

inline std::int64_t conv_weight_count(Module<float>& m) {
    std::int64_t n = 0;
    for (auto& t : m.named_tensors())
        if (t.kind == ParamKind::ConvWeight) n += t.tensor.numel();
    return n;
}

inline CriterionResult formula_enumeration(std::uint64_t seed) {
    CriterionResult r;
    r.id = 1;
    r.title = "formula-enumeration identity (100 random OSA/Tree blocks)";
    r.limit_seconds = 10;
    Rng rng(seed);
    std::uniform_int_distribution<std::int64_t> width(1, 24), depth(2, 6), coin(0, 1);
    int mismatches = 0, tree = 0, osa = 0;
    for (int i = 0; i < 100; ++i) {
        BlockSpec b;
        b.kind = coin(rng) ? BlockKind::Tree : BlockKind::Osa;
        b.depth = b.kind == BlockKind::Tree ? depth(rng) : depth(rng) - 1;
        b.k = width(rng);
        b.k_prime = b.kind == BlockKind::Tree ? width(rng) : b.k;
        b.k_in = width(rng);
        b.k_cat = width(rng) + 1;
        b.use_srb = coin(rng);
        b.use_residual = coin(rng);
        b.use_eca = coin(rng);
        auto block = build_block<float>(b, rng);
        const std::int64_t enumerated = conv_weight_count(*block);
        const std::int64_t analytic = b.kind == BlockKind::Tree ? tree_params(b.k_in, b.k, b.k_prime, b.depth, b.k_cat)
                                                                : osa_params(b.k_in, b.k, b.depth, b.k_cat);
        (b.kind == BlockKind::Tree ? tree : osa)++;
        if (enumerated != analytic) {
            ++mismatches;
            r.details.push_back(fmt("mismatch: %s l=%lld k=%lld k'=%lld k_in=%lld k_cat=%lld analytic=%lld enumerated=%lld",
                                    b.kind == BlockKind::Tree ? "tree" : "osa", (long long)b.depth, (long long)b.k,
                                    (long long)b.k_prime, (long long)b.k_in, (long long)b.k_cat, (long long)analytic,
                                    (long long)enumerated));
        }
    }
    r.details.push_back(fmt("%d tree + %d osa blocks, %d mismatches", tree, osa, mismatches));
    r.passed = mismatches == 0;
    return r;
}

inline CriterionResult param_difference() {
    CriterionResult r;
    r.id = 2;
    r.title = "parameter difference identity and sign";
    r.limit_seconds = 1;
    std::int64_t checked = 0, identity_fail = 0, sign_checked = 0, sign_fail = 0;
    for (std::int64_t depth = 2; depth <= 8; ++depth)
        for (std::int64_t k = 1; k <= 96; ++k)
            for (std::int64_t kp = 1; kp <= 96; ++kp) {
                const std::int64_t d = param_diff(k, kp, depth);
                ++checked;
                if (d != osa_params(2 * k, k, depth, 2 * k) - tree_params(2 * k, k, kp, depth, 2 * k)) ++identity_fail;
                if ((depth == 3 || depth == 5) && 18 * kp <= 17 * k) {
                    ++sign_checked;
                    if (d <= 0) ++sign_fail;
                }
            }
    r.details.push_back(fmt("identity: %lld grid points, %lld failures", (long long)checked, (long long)identity_fail));
    r.details.push_back(fmt("sign (k'/k <= 17/18, l in {3,5}): %lld points, %lld non-positive", (long long)sign_checked,
                            (long long)sign_fail));
    r.passed = identity_fail == 0 && sign_fail == 0;
    return r;
}

inline CriterionResult mac_identity() {
    CriterionResult r;
    r.id = 3;
    r.title = "memory-access increment identity and sign";
    r.limit_seconds = 1;
    std::int64_t checked = 0, identity_fail = 0, sign_checked = 0, sign_fail = 0;
    for (std::int64_t hw : {1, 2, 3, 5, 7, 14, 28, 56, 112}) {
        for (std::int64_t c : {1, 3, 8, 16, 64, 128, 256, 1024})
            for (std::int64_t k : {1, 2, 4, 8, 32, 128, 256})
                for (std::int64_t g : {1, 2, 4, 8, 16, 32}) {
                    if ((4 * k) % g) continue;
                    const std::int64_t inc = mac_increment(hw, hw, c, k, g);
                    ++checked;
                    if (inc != mac_group(hw, hw, c, 4 * k, g) - mac_standard(hw, hw, c, k)) ++identity_fail;
                    if (hw * hw > 3 * c && g >= 4) {
                        ++sign_checked;
                        if (inc <= 0) ++sign_fail;
                    }
                }
    }
    r.details.push_back(fmt("identity: %lld grid points, %lld failures", (long long)checked, (long long)identity_fail));
    r.details.push_back(fmt("sign (hw > 3c, g >= 4): %lld points, %lld non-positive", (long long)sign_checked,
                            (long long)sign_fail));
    r.passed = identity_fail == 0 && sign_fail == 0;
    return r;
}

/// Cost reports of the four full-size variants at 224x224, computed once.
inline const std::map<int, CostReport>& full_size_reports() {
    static const std::map<int, CostReport> reports = [] {
        std::map<int, CostReport> out;
        for (int v : kTreeNetVariants) {
            auto model = build_model<float>(treenet_spec(v), 0);
            out.emplace(v, analyze_graph(*model, {1, 3, 224, 224}, model->spec().name));
        }
        return out;
    }();
    return reports;
}

inline CriterionResult gflops() {
    CriterionResult r;
    r.id = 4;
    r.title = "GFLOP-units of the four variants at 224x224 within 5%";
    r.limit_seconds = 30;
    r.passed = true;
    for (const auto& pub : kPublished) {
        const auto& t = full_size_reports().at(pub.variant).totals;
        const double total = static_cast<double>(t.flops) / 1e9, compute = static_cast<double>(t.compute_flops) / 1e9;
        const bool ok = rel(total, pub.gflops) <= 0.05;
        r.passed = r.passed && ok;
        r.details.push_back(fmt("treenet-%-3d %-4s measured %.3f (compute %.3f + elementwise %.3f)  target %.2f  dev %+.1f%%",
                                pub.variant, ok ? "ok" : "FAIL", total, compute, total - compute, pub.gflops,
                                100 * (total - pub.gflops) / pub.gflops));
        if (pub.variant == 58)
            r.details.push_back(fmt("            alternate reference %.2f for the same model; the two published "
                                    "figures disagree by %.2f  dev vs alternate %+.1f%%",
                                    kTreeNet58GflopsAlt, kTreeNet58GflopsAlt - pub.gflops,
                                    100 * (total - kTreeNet58GflopsAlt) / kTreeNet58GflopsAlt));
    }
    return r;
}

inline CriterionResult params() {
    CriterionResult r;
    r.id = 5;
    r.title = "parameter totals within 3% (any of the four totals)";
    r.limit_seconds = 30;
    r.passed = true;
    for (const auto& pub : kPublished) {
        const auto& t = full_size_reports().at(pub.variant).totals;
        const std::array<std::pair<const char*, std::int64_t>, 4> totals{{
            {"weights+fc", t.params},
            {"weights", t.params_no_classifier},
            {"weights+bn+fc", t.params_with_bn},
            {"weights+bn", t.params_with_bn_no_classifier},
        }};
        const char* best = nullptr;
        double best_dev = 1e9;
        std::string breakdown;
        for (const auto& [label, v] : totals) {
            const double m = static_cast<double>(v) / 1e6, dev = rel(m, pub.params_m);
            breakdown += fmt("%s=%.3fM ", label, m);
            if (dev < best_dev) {
                best_dev = dev;
                best = label;
            }
        }
        const bool ok = best_dev <= 0.03;
        r.passed = r.passed && ok;
        r.details.push_back(fmt("treenet-%-3d %-4s target %.2fM  closest %s dev %.1f%%  [%s]", pub.variant,
                                ok ? "ok" : "FAIL", pub.params_m, best, 100 * best_dev, breakdown.c_str()));
    }
    return r;
}

inline CriterionResult gradients(std::uint64_t seed) {
    CriterionResult r;
    r.id = 6;
    r.title = "f64 gradient checks for every op and block (rel err < 1e-4)";
    r.limit_seconds = 120;
    const auto results = run_all_gradchecks(seed, 1e-4);
    r.passed = true;
    double worst = 0;
    for (const auto& g : results) {
        r.passed = r.passed && g.passed;
        worst = std::max(worst, g.max_rel_error);
        if (!g.passed) r.details.push_back(fmt("FAIL %s rel_err=%.3e", g.name.c_str(), g.max_rel_error));
    }
    r.details.push_back(fmt("%zu checks, worst rel err %.3e", results.size(), worst));
    return r;
}

inline CriterionResult shapes() {
    CriterionResult r;
    r.id = 7;
    r.title = "shape/stride suite: N x 3 x 224 x 224 -> N x 1000, stride 32";
    r.limit_seconds = 60;
    const std::vector<Shape> expected{{1, 128, 56, 56}, {1, 256, 56, 56}, {1, 512, 28, 28}, {1, 768, 14, 14}, {1, 1024, 7, 7}};
    r.passed = true;
    NoGradGuard guard;
    for (int v : kTreeNetVariants) {
        auto model = build_model<float>(treenet_spec(v), 0);
        model->set_training(false);
        const std::int64_t n = v == 20 ? 2 : 1;
        Tensor<float> x(Shape{n, 3, 224, 224}, 0.5f);
        auto feats = model->features(x);
        bool ok = feats.size() == expected.size();
        std::string sizes;
        for (std::size_t i = 0; ok && i < feats.size(); ++i) {
            Shape e = expected[i];
            e[0] = n;
            ok = feats[i].shape() == e;
            sizes += fmt("%lld^2x%lld ", (long long)feats[i].dim(2), (long long)feats[i].dim(1));
        }
        const auto logits = model->classifier().forward(feats.back());
        ok = ok && logits.shape() == Shape{n, 1000};
        const std::int64_t stride = 224 / feats.back().dim(2);
        ok = ok && stride == 32 && model->spec().output_stride == 32;
        r.passed = r.passed && ok;
        r.details.push_back(fmt("treenet-%-3d %-4s %slogits %s stride %lld", v, ok ? "ok" : "FAIL", sizes.c_str(),
                                to_string(logits.shape()).c_str(), (long long)stride));
    }
    return r;
}

struct DeskRun {
    double train_top1 = 0;
    double val_top1 = 0;
};

inline DeskRun desk_run(bool complete, std::uint64_t seed, const DataConfig& data) {
    auto [train_set, val_set] = make_datasets<float>(data);
    ModelSpec spec = treenet_spec(20, 4, data.classes);
    if (!complete) spec = with_block_options(spec, false, false, false);
    auto model = build_model<float>(spec, seed);
    TrainConfig cfg = desk_config();
    cfg.seed = seed;
    train(*model, train_set, cfg);
    DeskRun out;
    out.train_top1 = evaluate(*model, train_set).top1;
    if (val_set) out.val_top1 = evaluate(*model, *val_set).top1;
    return out;
}

inline double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline CriterionResult desk_training(std::uint64_t seed, const std::function<void(const std::string&)>& progress) {
    CriterionResult r;
    r.id = 8;
    r.title = "desk-scale training and block ablation";
    r.limit_seconds = 20 * 60;
    DataConfig data;
    data.val_per_class = 16;
    std::vector<double> complete, basic;
    double first_train = 0;
    for (std::uint64_t s = seed; s < seed + 5; ++s) {
        const auto c = desk_run(true, s, data);
        const auto b = desk_run(false, s, data);
        if (s == seed) first_train = c.train_top1;
        complete.push_back(c.val_top1);
        basic.push_back(b.val_top1);
        const auto line = fmt("seed %llu: complete train %.3f val %.3f | basic train %.3f val %.3f",
                              (unsigned long long)s, c.train_top1, c.val_top1, b.train_top1, b.val_top1);
        r.details.push_back(line);
        if (progress) progress(line);
    }
    const bool trained = first_train >= 0.95;
    const double mc = median(complete), mb = median(basic);
    r.details.push_back(fmt("%-4s width/4 treenet-20, 20 epochs: train top-1 %.3f (target >= 0.95)", trained ? "ok" : "FAIL",
                            first_train));
    r.details.push_back(fmt("%-4s median val top-1: complete %.3f vs basic %.3f", mc >= mb ? "ok" : "FAIL", mc, mb));
    r.passed = trained && mc >= mb;
    return r;
}

inline CriterionResult serialization(std::uint64_t seed) {
    CriterionResult r;
    r.id = 9;
    r.title = "checkpoint byte identity and bitwise logits after reload";
    r.limit_seconds = 10;
    const auto spec = treenet_spec(20, 4, 4);
    auto a = build_model<float>(spec, seed);
    {
        // Move the BN running statistics off their initial values.
        auto data = make_synthetic<float>(4, 4, 64, seed);
        NoGradGuard guard;
        a->set_training(true);
        a->forward(data.images);
        a->set_training(false);
    }
    const auto first = encode_checkpoint(snapshot(*a));
    auto b = build_model<float>(spec, seed + 1);
    restore(*b, decode_checkpoint(first));
    const auto second = encode_checkpoint(snapshot(*b));
    const bool bytes_equal = first == second;

    Tensor<float> x(Shape{2, 3, 64, 64});
    Rng rng(seed);
    std::normal_distribution<float> d(0.f, 1.f);
    for (auto& v : x.data()) v = d(rng);
    NoGradGuard guard;
    b->set_training(false);
    const auto la = a->forward(x), lb = b->forward(x);
    const bool logits_equal = std::memcmp(la.data().data(), lb.data().data(), sizeof(float) * la.data().size()) == 0;
    r.details.push_back(fmt("%-4s save -> load -> save: %zu bytes, identical=%s", bytes_equal ? "ok" : "FAIL",
                            first.size(), bytes_equal ? "yes" : "no"));
    r.details.push_back(fmt("%-4s reloaded logits bitwise equal=%s", logits_equal ? "ok" : "FAIL",
                            logits_equal ? "yes" : "no"));
    r.passed = bytes_equal && logits_equal;
    return r;
}

}  // namespace verify_detail

inline std::string render_criterion(const CriterionResult& r) {
    std::string s = verify_detail::fmt("[%s] %d. %s (%.2f s, limit %.0f s)\n", r.passed ? "PASS" : "FAIL", r.id,
                                       r.title.c_str(), r.seconds, r.limit_seconds);
    for (const auto& d : r.details) s += "       " + d + "\n";
    return s;
}

/// Runs the selected criteria in order. A criterion also fails when it
/// overruns its time limit or throws.
inline std::vector<CriterionResult> run_acceptance(const VerifyOptions& opt = {}) {
    using namespace verify_detail;
    const std::vector<std::pair<int, std::function<CriterionResult()>>> suite{
        {1, [&] { return formula_enumeration(opt.seed); }},
        {2, [] { return param_difference(); }},
        {3, [] { return mac_identity(); }},
        {4, [] { return gflops(); }},
        {5, [] { return params(); }},
        {6, [&] { return gradients(opt.seed); }},
        {7, [] { return shapes(); }},
        {8, [&] { return desk_training(opt.seed, opt.on_progress); }},
        {9, [&] { return serialization(opt.seed); }},
    };
    std::vector<CriterionResult> out;
    for (const auto& [id, fn] : suite) {
        if (!opt.only.empty() && std::find(opt.only.begin(), opt.only.end(), id) == opt.only.end()) continue;
        const auto t0 = std::chrono::steady_clock::now();
        CriterionResult r;
        try {
            r = fn();
        } catch (const std::exception& e) {
            r.id = id;
            r.title = "criterion " + std::to_string(id);
            r.passed = false;
            r.details.push_back(std::string("error: ") + e.what());
        }
        r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (r.limit_seconds > 0 && r.seconds > r.limit_seconds) {
            r.passed = false;
            r.details.push_back(fmt("FAIL runtime %.2f s exceeds %.0f s", r.seconds, r.limit_seconds));
        }
        if (opt.on_result) opt.on_result(r);
        out.push_back(std::move(r));
    }
    return out;
}

}  // namespace treenet
