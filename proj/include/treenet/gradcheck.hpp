#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "treenet/blocks.hpp"
#include "treenet/ops.hpp"

namespace treenet {

struct GradcheckResult {
    std::string name;
    double max_rel_error = 0;
    std::int64_t checked = 0;  // perturbed elements
    bool passed = false;
};

/// A scalar-valued function of a set of leaf tensors.
struct GradCase {
    std::string name;
    std::vector<Tensor<double>> leaves;
    std::function<Tensor<double>()> loss;
};

/// <grad, g> for a fixed random g; turns any tensor into a scalar whose
/// gradient reaches every element with a distinct weight.
inline Tensor<double> project(const Tensor<double>& x, const std::vector<double>& g) {
    if (static_cast<std::int64_t>(g.size()) != x.numel()) throw ShapeError("project: weight count mismatch");
    double acc = 0;
    auto xs = x.data();
    for (std::size_t i = 0; i < g.size(); ++i) acc += xs[i] * g[i];
    Tensor<double> out(Shape{}, acc);
    record(out, "project", {x}, [g](std::span<const double> go, std::span<std::span<double>> gi) {
        if (gi[0].empty()) return;
        for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += go[0] * g[i];
    });
    return out;
}

/// Central differences on every element of every leaf. The error of a leaf is
/// max|analytic - numeric| / max(max|analytic|, max|numeric|, 1e-12); a case
/// reports the worst leaf.
inline GradcheckResult run_gradcheck(GradCase& c, double tolerance = 1e-4, double step = 1e-6) {
    GradcheckResult res;
    res.name = c.name;
    for (auto& l : c.leaves) {
        l.set_requires_grad();
        l.zero_grad();
    }
    {
        Tensor<double> y = c.loss();
        backward(y);
    }
    for (auto& leaf : c.leaves) {
        std::vector<double> analytic(leaf.grad().begin(), leaf.grad().end());
        std::vector<double> numeric(analytic.size());
        NoGradGuard guard;
        auto w = leaf.data();
        for (std::size_t i = 0; i < w.size(); ++i) {
            const double saved = w[i];
            w[i] = saved + step;
            const double up = c.loss().item();
            w[i] = saved - step;
            const double down = c.loss().item();
            w[i] = saved;
            numeric[i] = (up - down) / (2 * step);
        }
        double diff = 0, scale = 1e-12;
        for (std::size_t i = 0; i < analytic.size(); ++i) {
            diff = std::max(diff, std::abs(analytic[i] - numeric[i]));
            scale = std::max({scale, std::abs(analytic[i]), std::abs(numeric[i])});
        }
        res.max_rel_error = std::max(res.max_rel_error, diff / scale);
        res.checked += static_cast<std::int64_t>(analytic.size());
    }
    res.passed = std::isfinite(res.max_rel_error) && res.max_rel_error < tolerance;
    return res;
}

namespace detail {

inline Tensor<double> randn(Shape s, Rng& rng, double scale = 1.0) {
    Tensor<double> t(std::move(s));
    std::normal_distribution<double> d(0.0, scale);
    for (auto& v : t.data()) v = d(rng);
    return t;
}

inline std::vector<double> randvec(std::int64_t n, Rng& rng) {
    std::vector<double> g(static_cast<std::size_t>(n));
    std::normal_distribution<double> d(0.0, 1.0);
    for (auto& v : g) v = d(rng);
    return g;
}

/// Wraps a unary tensor function into a case on a single random input.
inline GradCase unary_case(std::string name, Shape in, Rng& rng, std::function<Tensor<double>(const Tensor<double>&)> f,
                           Shape out) {
    GradCase c;
    c.name = std::move(name);
    c.leaves = {randn(std::move(in), rng)};
    auto g = randvec(numel(out), rng);
    auto x = c.leaves[0];
    c.loss = [x, f, g] { return project(f(x), g); };
    return c;
}

/// Case over a module: the input and every trainable tensor are leaves.
inline GradCase module_case(std::string name, std::shared_ptr<Module<double>> m, Shape in, Rng& rng) {
    GradCase c;
    c.name = std::move(name);
    auto x = randn(in, rng);
    c.leaves.push_back(x);
    for (auto& p : m->trainable_parameters()) c.leaves.push_back(p);
    Trace t;
    const Shape out = m->trace(in, "", t);
    auto g = randvec(numel(out), rng);
    c.loss = [m, x, g] { return project(m->forward(x), g); };
    return c;
}

}  // namespace detail

/// Every differentiable op plus the block-level modules at small sizes.
inline std::vector<GradCase> gradcheck_cases(std::uint64_t seed) {
    using detail::randn;
    using detail::randvec;
    Rng rng(seed);
    std::vector<GradCase> cases;

    auto conv_case = [&](std::string name, std::int64_t cin, std::int64_t cout, std::int64_t k, std::int64_t stride,
                         std::int64_t pad, std::int64_t groups, bool bias) {
        auto p = std::make_shared<ConvParams<double>>();
        p->in_channels = cin;
        p->out_channels = cout;
        p->kernel_h = p->kernel_w = k;
        p->stride = stride;
        p->padding = pad;
        p->groups = groups;
        p->weight = randn(Shape{cout, cin / groups, k, k}, rng, 0.5);
        if (bias) p->bias = randn(Shape{cout}, rng);
        GradCase c;
        c.name = std::move(name);
        auto x = randn(Shape{2, cin, 5, 6}, rng);
        c.leaves = {x, p->weight};
        if (bias) c.leaves.push_back(*p->bias);
        const Shape out{2, cout, p->out_extent(5, k), p->out_extent(6, k)};
        auto g = randvec(numel(out), rng);
        c.loss = [p, x, g] { return project(conv2d(x, *p), g); };
        cases.push_back(std::move(c));
    };
    conv_case("conv2d 3x3", 3, 4, 3, 1, 1, 1, true);
    conv_case("conv2d 3x3 stride 2", 4, 3, 3, 2, 1, 1, false);
    conv_case("conv2d 1x1", 5, 3, 1, 1, 0, 1, false);
    conv_case("conv2d grouped", 4, 6, 3, 1, 1, 2, true);

    auto bn_case = [&](std::string name, bool training, Shape in) {
        auto st = std::make_shared<BatchNormState<double>>(in[1]);
        st->training = training;
        st->gamma = randn(Shape{in[1]}, rng);
        st->beta = randn(Shape{in[1]}, rng);
        for (auto& v : st->running_mean.data()) v = std::normal_distribution<double>(0, 1)(rng);
        for (auto& v : st->running_var.data()) v = std::uniform_real_distribution<double>(0.5, 2)(rng);
        GradCase c;
        c.name = std::move(name);
        auto x = randn(in, rng);
        c.leaves = {x, st->gamma, st->beta};
        auto g = randvec(numel(in), rng);
        c.loss = [st, x, g] { return project(batch_norm(x, *st), g); };
        cases.push_back(std::move(c));
    };
    bn_case("batch_norm train", true, {3, 4, 3, 3});
    bn_case("batch_norm eval", false, {3, 4, 3, 3});
    bn_case("batch_norm train 2d", true, {5, 3});

    cases.push_back(detail::unary_case("relu", {2, 3, 4, 4}, rng, [](const auto& x) { return relu(x); }, {2, 3, 4, 4}));
    cases.push_back(detail::unary_case("sigmoid", {2, 3, 4, 4}, rng, [](const auto& x) { return sigmoid(x); }, {2, 3, 4, 4}));
    cases.push_back(detail::unary_case("max_pool2d", {2, 2, 7, 6}, rng,
                                       [](const auto& x) { return max_pool2d(x, 3, 2, 1); }, {2, 2, 4, 3}));
    cases.push_back(detail::unary_case("global_avg_pool", {2, 3, 4, 5}, rng,
                                       [](const auto& x) { return global_avg_pool(x); }, {2, 3}));
    cases.push_back(detail::unary_case("slice_channels", {2, 5, 3, 3}, rng,
                                       [](const auto& x) { return slice_channels(x, 1, 3); }, {2, 3, 3, 3}));
    cases.push_back(detail::unary_case("reshape", {2, 3, 2, 2}, rng,
                                       [](const auto& x) { return reshape(x, Shape{2, 12}); }, {2, 12}));
    cases.push_back(detail::unary_case("sum", {2, 3, 2, 2}, rng, [](const auto& x) { return sum(x); }, {}));

    {
        GradCase c;
        c.name = "add";
        auto a = randn({2, 3, 3, 3}, rng), b = randn({2, 3, 3, 3}, rng);
        c.leaves = {a, b};
        auto g = randvec(54, rng);
        c.loss = [a, b, g] { return project(add(a, b), g); };
        cases.push_back(std::move(c));
    }
    {
        GradCase c;
        c.name = "multiply_channelwise";
        auto x = randn({2, 3, 3, 4}, rng), w = randn({2, 3, 1, 1}, rng);
        c.leaves = {x, w};
        auto g = randvec(72, rng);
        c.loss = [x, w, g] { return project(multiply_channelwise(x, w), g); };
        cases.push_back(std::move(c));
    }
    {
        GradCase c;
        c.name = "concat_channels";
        auto a = randn({2, 2, 3, 3}, rng), b = randn({2, 3, 3, 3}, rng), d = randn({2, 1, 3, 3}, rng);
        c.leaves = {a, b, d};
        auto g = randvec(2 * 6 * 9, rng);
        c.loss = [a, b, d, g] { return project(concat_channels<double>({a, b, d}), g); };
        cases.push_back(std::move(c));
    }
    {
        GradCase c;
        c.name = "conv1d_channels";
        auto v = randn({2, 7}, rng), w = randn({3}, rng);
        c.leaves = {v, w};
        auto g = randvec(14, rng);
        c.loss = [v, w, g] { return project(conv1d_channels(v, w), g); };
        cases.push_back(std::move(c));
    }
    {
        GradCase c;
        c.name = "fully_connected";
        auto x = randn({3, 5}, rng), w = randn({5, 4}, rng), b = randn({4}, rng);
        c.leaves = {x, w, b};
        auto g = randvec(12, rng);
        c.loss = [x, w, b, g] { return project(fully_connected(x, w, b), g); };
        cases.push_back(std::move(c));
    }
    {
        GradCase c;
        c.name = "softmax_cross_entropy";
        auto x = randn({4, 5}, rng);
        c.leaves = {x};
        std::vector<std::int64_t> labels{0, 3, 4, 1};
        c.loss = [x, labels] { return softmax_cross_entropy(x, std::span<const std::int64_t>(labels)).loss; };
        cases.push_back(std::move(c));
    }

    std::shared_ptr<Module<double>> srb = build_srb<double>(4, 4, rng);
    cases.push_back(detail::module_case("srb", srb, {2, 4, 5, 5}, rng));
    std::shared_ptr<Module<double>> eca = build_eca<double>(8, rng);
    cases.push_back(detail::module_case("eca", eca, {2, 8, 3, 3}, rng));

    BlockSpec osa;
    osa.kind = BlockKind::Osa;
    osa.depth = 3;
    osa.k = 3;
    osa.k_in = 4;
    osa.k_cat = 6;
    std::shared_ptr<Module<double>> osa_block = build_osa_block<double>(osa, rng);
    cases.push_back(detail::module_case("osa block", osa_block, {2, 4, 4, 4}, rng));

    BlockSpec tree;
    tree.depth = 3;
    tree.k = 3;
    tree.k_prime = 2;
    tree.k_in = 12;
    tree.k_cat = 12;
    std::shared_ptr<Module<double>> basic = build_tree_block_basic<double>(tree, rng);
    cases.push_back(detail::module_case("tree block basic", basic, {2, 12, 4, 4}, rng));
    std::shared_ptr<Module<double>> complete = build_tree_block_complete<double>(tree, rng);
    cases.push_back(detail::module_case("tree block complete", complete, {2, 12, 4, 4}, rng));
    return cases;
}

inline std::vector<GradcheckResult> run_all_gradchecks(std::uint64_t seed = 0, double tolerance = 1e-4) {
    std::vector<GradcheckResult> out;
    for (auto& c : gradcheck_cases(seed)) out.push_back(run_gradcheck(c, tolerance));
    return out;
}

inline std::string render_gradcheck(const std::vector<GradcheckResult>& results, double tolerance) {
    std::string s;
    char line[160];
    for (const auto& r : results) {
        std::snprintf(line, sizeof line, "%-4s %-24s rel_err=%.3e  elements=%lld\n", r.passed ? "ok" : "FAIL",
                      r.name.c_str(), r.max_rel_error, static_cast<long long>(r.checked));
        s += line;
    }
    const auto failed = std::count_if(results.begin(), results.end(), [](const auto& r) { return !r.passed; });
    std::snprintf(line, sizeof line, "%zu checks, %lld failed, tolerance %.1e\n", results.size(),
                  static_cast<long long>(failed), tolerance);
    s += line;
    return s;
}

}  // namespace treenet
