#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>
#include <vector>

#include "treenet.hpp"

using namespace treenet;

namespace {

template <class T>
Tensor<T> random_tensor(Shape s, std::uint64_t seed, double scale = 1.0) {
    Rng rng(seed);
    std::normal_distribution<double> d(0.0, scale);
    Tensor<T> t(std::move(s));
    for (auto& v : t.data()) v = static_cast<T>(d(rng));
    return t;
}

// Direct six-loop convolution in double precision.
std::vector<double> naive_conv(const Tensor<double>& x, const ConvParams<double>& p) {
    const std::int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::int64_t O = p.out_channels, G = p.groups, cg = C / G, og = O / G;
    const std::int64_t Ho = (H + 2 * p.padding - p.kernel_h) / p.stride + 1;
    const std::int64_t Wo = (W + 2 * p.padding - p.kernel_w) / p.stride + 1;
    std::vector<double> out(static_cast<std::size_t>(N * O * Ho * Wo), 0.0);
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t o = 0; o < O; ++o) {
            const std::int64_t g = o / og;
            for (std::int64_t oy = 0; oy < Ho; ++oy)
                for (std::int64_t ox = 0; ox < Wo; ++ox) {
                    double s = p.bias ? (*p.bias)[static_cast<std::size_t>(o)] : 0.0;
                    for (std::int64_t c = 0; c < cg; ++c)
                        for (std::int64_t ky = 0; ky < p.kernel_h; ++ky)
                            for (std::int64_t kx = 0; kx < p.kernel_w; ++kx) {
                                const std::int64_t iy = oy * p.stride - p.padding + ky;
                                const std::int64_t ix = ox * p.stride - p.padding + kx;
                                if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                                const double xv = x[static_cast<std::size_t>(((n * C + g * cg + c) * H + iy) * W + ix)];
                                const double wv =
                                    p.weight[static_cast<std::size_t>(((o * cg + c) * p.kernel_h + ky) * p.kernel_w + kx)];
                                s += xv * wv;
                            }
                    out[static_cast<std::size_t>(((n * O + o) * Ho + oy) * Wo + ox)] = s;
                }
        }
    return out;
}

ConvParams<double> make_conv(std::int64_t cin, std::int64_t cout, std::int64_t k, std::int64_t stride,
                             std::int64_t pad, std::int64_t groups, bool bias, std::uint64_t seed) {
    ConvParams<double> p;
    p.in_channels = cin;
    p.out_channels = cout;
    p.kernel_h = p.kernel_w = k;
    p.stride = stride;
    p.padding = pad;
    p.groups = groups;
    p.weight = random_tensor<double>({cout, cin / groups, k, k}, seed);
    if (bias) p.bias = random_tensor<double>({cout}, seed + 1);
    return p;
}

struct ConvCase {
    std::int64_t cin, cout, k, stride, pad, groups;
    bool bias;
    std::int64_t h, w;
};

class ConvOracle : public ::testing::TestWithParam<ConvCase> {};

}  // namespace

TEST_P(ConvOracle, MatchesDirectLoops) {
    const auto c = GetParam();
    auto x = random_tensor<double>({2, c.cin, c.h, c.w}, 11);
    auto p = make_conv(c.cin, c.cout, c.k, c.stride, c.pad, c.groups, c.bias, 12);
    auto y = conv2d(x, p);
    auto ref = naive_conv(x, p);
    ASSERT_EQ(static_cast<std::size_t>(y.numel()), ref.size());
    for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y[i], ref[i], 1e-10) << "at " << i;
}

INSTANTIATE_TEST_SUITE_P(Geometries, ConvOracle,
                         ::testing::Values(ConvCase{3, 4, 3, 1, 1, 1, false, 7, 6}, ConvCase{3, 5, 3, 2, 1, 1, true, 9, 8},
                                           ConvCase{4, 6, 1, 1, 0, 1, false, 5, 5}, ConvCase{4, 6, 3, 1, 1, 2, true, 6, 6},
                                           ConvCase{6, 6, 3, 2, 0, 3, false, 7, 7}, ConvCase{2, 3, 5, 1, 2, 1, true, 4, 5},
                                           ConvCase{8, 4, 1, 2, 0, 4, false, 6, 6}));

TEST(Conv2d, IdentityOneByOneReproducesInput) {
    auto x = random_tensor<float>({2, 3, 5, 5}, 3);
    ConvParams<float> p;
    p.in_channels = p.out_channels = 3;
    p.weight = Tensor<float>({3, 3, 1, 1});
    for (int i = 0; i < 3; ++i) p.weight[static_cast<std::size_t>(i * 3 + i)] = 1.0f;
    auto y = conv2d(x, p);
    ASSERT_EQ(y.shape(), x.shape());
    for (std::int64_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y[static_cast<std::size_t>(i)], x[static_cast<std::size_t>(i)]);
}

TEST(Conv2d, ZeroInputGivesBias) {
    auto p = make_conv(3, 4, 3, 1, 1, 1, true, 5);
    auto y = conv2d(Tensor<double>({1, 3, 4, 4}), p);
    for (std::int64_t o = 0; o < 4; ++o)
        for (std::int64_t i = 0; i < 16; ++i) EXPECT_EQ(y[static_cast<std::size_t>(o * 16 + i)], (*p.bias)[static_cast<std::size_t>(o)]);
}

TEST(Conv2d, GroupedEqualsIndependentSlices) {
    auto x = random_tensor<double>({1, 4, 6, 6}, 21);
    auto p = make_conv(4, 6, 3, 1, 1, 2, false, 22);
    auto y = conv2d(x, p);
    for (std::int64_t g = 0; g < 2; ++g) {
        ConvParams<double> q;
        q.in_channels = 2;
        q.out_channels = 3;
        q.kernel_h = q.kernel_w = 3;
        q.padding = 1;
        q.weight = Tensor<double>({3, 2, 3, 3}, std::vector<double>(p.weight.data().begin() + g * 54,
                                                                    p.weight.data().begin() + (g + 1) * 54));
        auto part = conv2d(slice_channels(x, g * 2, 2), q);
        auto expect = slice_channels(y, g * 3, 3);
        for (std::int64_t i = 0; i < part.numel(); ++i)
            EXPECT_NEAR(part[static_cast<std::size_t>(i)], expect[static_cast<std::size_t>(i)], 1e-12);
    }
}

TEST(Conv2d, RejectsChannelMismatch) {
    auto p = make_conv(3, 4, 3, 1, 1, 1, false, 1);
    EXPECT_THROW(conv2d(Tensor<double>({1, 2, 4, 4}), p), ShapeError);
}

TEST(Conv2d, RejectsNonFiniteOutput) {
    auto p = make_conv(1, 1, 1, 1, 0, 1, false, 1);
    Tensor<double> x({1, 1, 2, 2}, std::numeric_limits<double>::infinity());
    EXPECT_THROW(conv2d(x, p), Error);
}

TEST(MaxPool, MatchesWindowScan) {
    auto x = random_tensor<double>({2, 3, 9, 7}, 8);
    auto y = max_pool2d(x, 3, 2, 1);
    const std::int64_t Ho = (9 + 2 - 3) / 2 + 1, Wo = (7 + 2 - 3) / 2 + 1;
    ASSERT_EQ(y.shape(), (Shape{2, 3, Ho, Wo}));
    for (std::int64_t nc = 0; nc < 6; ++nc)
        for (std::int64_t oy = 0; oy < Ho; ++oy)
            for (std::int64_t ox = 0; ox < Wo; ++ox) {
                double best = -std::numeric_limits<double>::infinity();
                for (std::int64_t ky = 0; ky < 3; ++ky)
                    for (std::int64_t kx = 0; kx < 3; ++kx) {
                        const std::int64_t iy = oy * 2 - 1 + ky, ix = ox * 2 - 1 + kx;
                        if (iy >= 0 && iy < 9 && ix >= 0 && ix < 7)
                            best = std::max(best, x[static_cast<std::size_t>((nc * 9 + iy) * 7 + ix)]);
                    }
                EXPECT_EQ(y[static_cast<std::size_t>((nc * Ho + oy) * Wo + ox)], best);
            }
}

TEST(MaxPool, HalvesStageResolution) {
    auto y = max_pool2d(Tensor<float>({1, 2, 56, 56}), 3, 2, 1);
    EXPECT_EQ(y.shape(), (Shape{1, 2, 28, 28}));
}

TEST(SoftmaxCrossEntropy, MatchesLogSumExp) {
    auto z = random_tensor<double>({4, 5}, 9, 3.0);
    std::vector<std::int64_t> labels{0, 3, 4, 1};
    auto r = softmax_cross_entropy(z, std::span<const std::int64_t>(labels));
    double expect = 0;
    for (std::int64_t n = 0; n < 4; ++n) {
        double s = 0;
        for (std::int64_t k = 0; k < 5; ++k) s += std::exp(z[static_cast<std::size_t>(n * 5 + k)]);
        expect += std::log(s) - z[static_cast<std::size_t>(n * 5 + labels[static_cast<std::size_t>(n)])];
        double mass = 0;
        for (std::int64_t k = 0; k < 5; ++k) mass += r.probs[static_cast<std::size_t>(n * 5 + k)];
        EXPECT_NEAR(mass, 1.0, 1e-12);
    }
    EXPECT_NEAR(r.loss.item(), expect / 4, 1e-12);
}

TEST(SoftmaxCrossEntropy, UniformLogitsGiveLogK) {
    std::vector<std::int64_t> labels{2, 0};
    auto r = softmax_cross_entropy(Tensor<double>({2, 7}, 0.25), std::span<const std::int64_t>(labels));
    EXPECT_NEAR(r.loss.item(), std::log(7.0), 1e-12);
}

TEST(SoftmaxCrossEntropy, StableForLargeLogits) {
    Tensor<float> z({1, 3}, std::vector<float>{1000.0f, 0.0f, 0.0f});
    std::vector<std::int64_t> labels{0};
    auto r = softmax_cross_entropy(z, std::span<const std::int64_t>(labels));
    EXPECT_TRUE(std::isfinite(r.loss.item()));
    EXPECT_NEAR(r.loss.item(), 0.0f, 1e-6f);
    labels[0] = 1;
    auto r2 = softmax_cross_entropy(z, std::span<const std::int64_t>(labels));
    EXPECT_NEAR(r2.loss.item(), 1000.0f, 1e-3f);
}

TEST(SoftmaxCrossEntropy, RejectsLabelOutOfRange) {
    std::vector<std::int64_t> labels{3};
    EXPECT_THROW(softmax_cross_entropy(Tensor<double>({1, 3}), std::span<const std::int64_t>(labels)), Error);
}

TEST(GlobalAvgPool, MatchesCompensatedSum) {
    auto x = random_tensor<double>({2, 3, 11, 13}, 4);
    auto y = global_avg_pool(x);
    ASSERT_EQ(y.shape(), (Shape{2, 3, 1, 1}));
    for (std::int64_t nc = 0; nc < 6; ++nc) {
        double s = 0, comp = 0;
        for (std::int64_t i = 0; i < 143; ++i) {
            const double v = x[static_cast<std::size_t>(nc * 143 + i)] - comp;
            const double t = s + v;
            comp = (t - s) - v;
            s = t;
        }
        EXPECT_NEAR(y[static_cast<std::size_t>(nc)], s / 143, 1e-13);
    }
}

TEST(GlobalAvgPool, SmallExample) {
    auto y = global_avg_pool(Tensor<float>({1, 1, 2, 2}, std::vector<float>{1, 2, 3, 4}));
    EXPECT_FLOAT_EQ(y.item(), 2.5f);
}

TEST(Conv1dChannels, ZeroPaddedMovingAverage) {
    Tensor<double> v({1, 4}, std::vector<double>{1, 2, 3, 4});
    Tensor<double> w({3}, 1.0 / 3.0);
    auto y = conv1d_channels(v, w);
    EXPECT_NEAR(y[0], 1.0, 1e-12);
    EXPECT_NEAR(y[1], 2.0, 1e-12);
    EXPECT_NEAR(y[2], 3.0, 1e-12);
    EXPECT_NEAR(y[3], 7.0 / 3.0, 1e-12);
}

TEST(Conv1dChannels, RejectsEvenKernel) {
    EXPECT_THROW(conv1d_channels(Tensor<double>({1, 4}), Tensor<double>({2})), ShapeError);
}

TEST(FullyConnected, SmallExample) {
    Tensor<double> x({1, 2}, std::vector<double>{1, 1});
    Tensor<double> w({2, 2}, std::vector<double>{1, 2, 3, 4});
    auto y = fully_connected(x, w);
    EXPECT_EQ(y[0], 4.0);
    EXPECT_EQ(y[1], 6.0);
    Tensor<double> b({2}, std::vector<double>{0.5, -1});
    auto yb = fully_connected(x, w, b);
    EXPECT_EQ(yb[0], 4.5);
    EXPECT_EQ(yb[1], 5.0);
}

TEST(BatchNorm, TrainingNormalizesEachChannel) {
    auto x = random_tensor<double>({4, 3, 5, 5}, 17, 4.0);
    for (auto& v : x.data()) v += 10.0;
    BatchNormState<double> bn(3);
    auto y = batch_norm(x, bn);
    for (std::int64_t c = 0; c < 3; ++c) {
        double mean = 0, sq = 0;
        for (std::int64_t n = 0; n < 4; ++n)
            for (std::int64_t i = 0; i < 25; ++i) mean += y[static_cast<std::size_t>((n * 3 + c) * 25 + i)];
        mean /= 100;
        for (std::int64_t n = 0; n < 4; ++n)
            for (std::int64_t i = 0; i < 25; ++i) {
                const double d = y[static_cast<std::size_t>((n * 3 + c) * 25 + i)] - mean;
                sq += d * d;
            }
        EXPECT_NEAR(mean, 0.0, 1e-5);
        EXPECT_NEAR(sq / 100, 1.0, 1e-3);
    }
    for (std::int64_t c = 0; c < 3; ++c) EXPECT_GT(bn.running_mean[static_cast<std::size_t>(c)], 0.5);
}

TEST(BatchNorm, EvalWithFreshStatisticsIsNearIdentity) {
    auto x = random_tensor<double>({2, 3, 4, 4}, 5);
    BatchNormState<double> bn(3);
    bn.training = false;
    auto y = batch_norm(x, bn);
    for (std::int64_t i = 0; i < x.numel(); ++i)
        EXPECT_NEAR(y[static_cast<std::size_t>(i)], x[static_cast<std::size_t>(i)] / std::sqrt(1 + 1e-5), 1e-12);
    EXPECT_EQ(bn.running_mean[0], 0.0);
    EXPECT_EQ(bn.running_var[0], 1.0);
}

TEST(Elementwise, ReluAndSigmoid) {
    Tensor<double> x({4}, std::vector<double>{-2, -0.0, 0.5, 3});
    auto r = relu(x);
    EXPECT_EQ(r[0], 0.0);
    EXPECT_EQ(r[1], 0.0);
    EXPECT_EQ(r[2], 0.5);
    EXPECT_EQ(r[3], 3.0);
    auto s = sigmoid(x);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(s[i], 1.0 / (1.0 + std::exp(-x[i])), 1e-15);
    EXPECT_EQ(sigmoid(Tensor<double>({1}, 0.0))[0], 0.5);
}

TEST(Elementwise, AddRejectsShapeMismatch) {
    EXPECT_THROW(add(Tensor<float>({1, 2}), Tensor<float>({2, 1})), ShapeError);
}

TEST(Channels, ConcatThenSliceIsExact) {
    auto a = random_tensor<float>({2, 3, 4, 5}, 1);
    auto b = random_tensor<float>({2, 5, 4, 5}, 2);
    auto c = concat_channels<float>({a, b});
    ASSERT_EQ(c.shape(), (Shape{2, 8, 4, 5}));
    auto a2 = slice_channels(c, 0, 3), b2 = slice_channels(c, 3, 5);
    for (std::int64_t i = 0; i < a.numel(); ++i) EXPECT_EQ(a2[static_cast<std::size_t>(i)], a[static_cast<std::size_t>(i)]);
    for (std::int64_t i = 0; i < b.numel(); ++i) EXPECT_EQ(b2[static_cast<std::size_t>(i)], b[static_cast<std::size_t>(i)]);
}

TEST(Autograd, SumGradientIsOnes) {
    auto x = random_tensor<double>({2, 3}, 1);
    x.set_requires_grad();
    backward(sum(x));
    ASSERT_TRUE(x.has_grad());
    for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Autograd, GradientsAccumulateAcrossCalls) {
    auto x = random_tensor<double>({3}, 1);
    x.set_requires_grad();
    backward(sum(x));
    backward(sum(x));
    for (double g : x.grad()) EXPECT_EQ(g, 2.0);
    x.zero_grad();
    for (double g : x.grad()) EXPECT_EQ(g, 0.0);
}

TEST(Autograd, RejectsNonScalarRoot) {
    auto x = random_tensor<double>({2, 2}, 1);
    x.set_requires_grad();
    EXPECT_THROW(backward(relu(x)), GraphError);
}

TEST(Autograd, RejectsUnrecordedRoot) {
    EXPECT_THROW(backward(Tensor<double>(Shape{}, 1.0)), GraphError);
}

TEST(Autograd, RejectsConsumedGraph) {
    auto x = random_tensor<double>({2, 2}, 1);
    x.set_requires_grad();
    auto loss = sum(relu(x));
    backward(loss);
    EXPECT_THROW(backward(loss), GraphError);
}

TEST(Autograd, NoGradGuardSkipsRecording) {
    auto x = random_tensor<double>({2, 2}, 1);
    x.set_requires_grad();
    Tensor<double> y;
    {
        NoGradGuard guard;
        y = sum(x);
    }
    EXPECT_FALSE(y.requires_grad());
    EXPECT_THROW(backward(y), GraphError);
}

TEST(Autograd, DisconnectedParameterReceivesNoGradient) {
    auto x = random_tensor<double>({3}, 1);
    auto unused = random_tensor<double>({3}, 2);
    x.set_requires_grad();
    unused.set_requires_grad();
    backward(sum(x));
    EXPECT_FALSE(unused.has_grad());
}

TEST(Autograd, SharedInputAccumulatesBothPaths) {
    auto x = random_tensor<double>({4}, 3);
    x.set_requires_grad();
    backward(sum(add(x, x)));
    for (double g : x.grad()) EXPECT_EQ(g, 2.0);
}

TEST(Gradcheck, EveryPrimitiveAndBlockPasses) {
    const auto results = run_all_gradchecks(0, 1e-4);
    EXPECT_GE(results.size(), 20u);
    for (const auto& r : results) {
        EXPECT_TRUE(r.passed) << r.name << " rel error " << r.max_rel_error;
        EXPECT_GT(r.checked, 0);
    }
}

TEST(Gradcheck, InjectedFaultIsDetected) {
    backward_fault_injection() = true;
    const auto results = run_all_gradchecks(0, 1e-4);
    backward_fault_injection() = false;
    for (const auto& r : results) EXPECT_FALSE(r.passed) << r.name;
}

TEST(Gradcheck, ReportIsDeterministic) {
    const auto a = render_gradcheck(run_all_gradchecks(3, 1e-4), 1e-4);
    const auto b = render_gradcheck(run_all_gradchecks(3, 1e-4), 1e-4);
    EXPECT_EQ(a, b);
}

TEST(Parallel, ResultsIndependentOfThreadCount) {
    auto x = random_tensor<float>({2, 16, 12, 12}, 31);
    ConvParams<float> p;
    p.in_channels = 16;
    p.out_channels = 24;
    p.kernel_h = p.kernel_w = 3;
    p.padding = 1;
    p.weight = random_tensor<float>({24, 16, 3, 3}, 32);
    p.weight.set_requires_grad();
    x.set_requires_grad();

    auto run = [&](int threads) {
        set_num_threads(threads);
        x.zero_grad();
        p.weight.zero_grad();
        auto y = conv2d(x, p);
        backward(sum(relu(y)));
        std::vector<float> out(y.data().begin(), y.data().end());
        out.insert(out.end(), x.grad().begin(), x.grad().end());
        out.insert(out.end(), p.weight.grad().begin(), p.weight.grad().end());
        return out;
    };
    const auto one = run(1);
    const auto four = run(4);
    set_num_threads(1);
    EXPECT_EQ(one, four);
}

TEST(Gemm, KernelsMatchNaiveProduct) {
    const std::int64_t M = 7, N = 300, K = 19;
    auto A = random_tensor<double>({M, K}, 1), B = random_tensor<double>({K, N}, 2);
    std::vector<double> ref(static_cast<std::size_t>(M * N), 0.0);
    for (std::int64_t i = 0; i < M; ++i)
        for (std::int64_t j = 0; j < N; ++j)
            for (std::int64_t k = 0; k < K; ++k)
                ref[static_cast<std::size_t>(i * N + j)] += A[static_cast<std::size_t>(i * K + k)] * B[static_cast<std::size_t>(k * N + j)];

    std::vector<double> C(ref.size(), 0.0);
    gemm::nn(M, N, K, A.data().data(), B.data().data(), C.data(), false);
    for (std::size_t i = 0; i < C.size(); ++i) EXPECT_NEAR(C[i], ref[i], 1e-12);

    std::vector<double> At(static_cast<std::size_t>(K * M)), Bt(static_cast<std::size_t>(N * K));
    for (std::int64_t i = 0; i < M; ++i)
        for (std::int64_t k = 0; k < K; ++k) At[static_cast<std::size_t>(k * M + i)] = A[static_cast<std::size_t>(i * K + k)];
    for (std::int64_t k = 0; k < K; ++k)
        for (std::int64_t j = 0; j < N; ++j) Bt[static_cast<std::size_t>(j * K + k)] = B[static_cast<std::size_t>(k * N + j)];

    std::fill(C.begin(), C.end(), 1.0);
    gemm::tn(M, N, K, At.data(), B.data().data(), C.data(), true);
    for (std::size_t i = 0; i < C.size(); ++i) EXPECT_NEAR(C[i], ref[i] + 1.0, 1e-12);

    gemm::nt(M, N, K, A.data().data(), Bt.data(), C.data(), false);
    for (std::size_t i = 0; i < C.size(); ++i) EXPECT_NEAR(C[i], ref[i], 1e-12);
}

TEST(TensorBasics, ShapeValidationAndItem) {
    EXPECT_THROW(Tensor<float>({2, -1}), ShapeError);
    EXPECT_THROW((Tensor<float>({2, 2}, std::vector<float>{1, 2, 3})), ShapeError);
    EXPECT_THROW(Tensor<float>({2}).item(), Error);
    Tensor<float> t({2, 3}, 1.5f);
    auto r = reshape(t, Shape{3, 2});
    EXPECT_EQ(r.shape(), (Shape{3, 2}));
    EXPECT_THROW(reshape(t, Shape{4, 2}), ShapeError);
}
