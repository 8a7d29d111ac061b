#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "treenet.hpp"

using namespace treenet;

namespace {

Tensor<float> noise(Shape s, std::uint64_t seed) {
    Rng rng(seed);
    std::normal_distribution<float> d(0.0f, 1.0f);
    Tensor<float> t(std::move(s));
    for (auto& v : t.data()) v = d(rng);
    return t;
}

BlockSpec spec(std::int64_t k_in, std::int64_t k, std::int64_t kp, std::int64_t l, std::int64_t k_cat) {
    BlockSpec b;
    b.k_in = k_in;
    b.k = k;
    b.k_prime = kp;
    b.depth = l;
    b.k_cat = k_cat;
    return b;
}

// Counts every conv/fc/eca weight element of a module by walking its tensors.
template <class M>
std::int64_t enumerate_weights(M& m) {
    std::int64_t n = 0;
    for (auto& nt : m.named_tensors())
        if (nt.kind == ParamKind::ConvWeight || nt.kind == ParamKind::EcaWeight || nt.kind == ParamKind::FcWeight ||
            nt.kind == ParamKind::FcBias)
            n += nt.tensor.numel();
    return n;
}

void neutralize(Module<float>& m) {
    for (auto& nt : m.named_tensors()) {
        if (nt.kind == ParamKind::ConvWeight || nt.kind == ParamKind::EcaWeight)
            for (auto& v : nt.tensor.data()) v = 0.0f;
    }
}

}  // namespace

TEST(Srb, CountsLikeAPlainConv) {
    Rng rng(1);
    for (std::int64_t c : {8, 32, 64}) {
        auto srb = build_srb<float>(c, c, rng);
        EXPECT_EQ(weight_parameter_count(*srb), 9 * c * c);
        EXPECT_TRUE(srb->has_identity_skip());
    }
    auto widen = build_srb<float>(16, 32, rng);
    EXPECT_EQ(weight_parameter_count(*widen), 9 * 16 * 32);
    EXPECT_FALSE(widen->has_identity_skip());
}

TEST(Srb, ZeroConvPassesNormalizedInput) {
    Rng rng(2);
    auto srb = build_srb<float>(4, 4, rng);
    neutralize(*srb);
    srb->set_training(false);
    auto x = noise({2, 4, 5, 5}, 3);
    auto y = srb->forward(x);
    const float s = 1.0f / std::sqrt(1.0f + 1e-5f);
    for (std::int64_t i = 0; i < x.numel(); ++i)
        EXPECT_NEAR(y[static_cast<std::size_t>(i)], std::max(0.0f, x[static_cast<std::size_t>(i)]) * s, 1e-6f);
}

TEST(Eca, AdaptiveKernelSize) {
    EXPECT_EQ(eca_kernel_size(1024), 5);
    EXPECT_EQ(eca_kernel_size(256), 5);
    EXPECT_EQ(eca_kernel_size(64), 3);
    for (std::int64_t c = 2; c <= 4096; c *= 2) EXPECT_EQ(eca_kernel_size(c) % 2, 1) << c;
    Rng rng(0);
    auto eca = build_eca<float>(1024, rng);
    EXPECT_EQ(eca->kernel_size(), 5);
    EXPECT_EQ(weight_parameter_count(*eca), 5);
    EXPECT_EQ(build_eca<float>(64, rng, 7)->kernel_size(), 7);
}

TEST(Eca, ZeroKernelHalvesInput) {
    Rng rng(4);
    auto eca = build_eca<float>(6, rng);
    neutralize(*eca);
    auto x = noise({2, 6, 3, 3}, 5);
    auto y = eca->forward(x);
    for (std::int64_t i = 0; i < x.numel(); ++i)
        EXPECT_FLOAT_EQ(y[static_cast<std::size_t>(i)], 0.5f * x[static_cast<std::size_t>(i)]);
}

TEST(Eca, AttentionStaysInUnitInterval) {
    Rng rng(6);
    auto eca = build_eca<float>(16, rng);
    Tensor<float> x({1, 16, 4, 4}, 1.0f);
    for (std::int64_t c = 0; c < 16; ++c)
        for (std::int64_t i = 0; i < 16; ++i) x[static_cast<std::size_t>(c * 16 + i)] = static_cast<float>(c - 8);
    auto y = eca->forward(x);
    for (std::int64_t c = 0; c < 16; ++c) {
        const float in = x[static_cast<std::size_t>(c * 16)];
        if (in == 0.0f) continue;
        const float ratio = y[static_cast<std::size_t>(c * 16)] / in;
        EXPECT_GT(ratio, 0.0f);
        EXPECT_LT(ratio, 1.0f);
    }
}

TEST(OsaBlock, ReferenceGeometry) {
    Rng rng(7);
    auto b = build_osa_block<float>(spec(128, 128, 128, 3, 256), rng);
    EXPECT_EQ(enumerate_weights(*b), 573440);
    EXPECT_EQ(b->concat_width(), 512);
    Trace t;
    EXPECT_EQ(b->trace({1, 128, 56, 56}, "", t), (Shape{1, 256, 56, 56}));
}

TEST(OsaBlock, ForwardShape) {
    Rng rng(8);
    auto b = build_osa_block<float>(spec(8, 4, 4, 3, 16), rng);
    EXPECT_EQ(b->forward(noise({2, 8, 6, 6}, 9)).shape(), (Shape{2, 16, 6, 6}));
}

TEST(TreeBlock, BasicReferenceGeometry) {
    Rng rng(10);
    auto b = build_tree_block_basic<float>(spec(128, 128, 128, 3, 256), rng);
    EXPECT_EQ(enumerate_weights(*b), 622592);
    EXPECT_EQ(b->concat_width(), 512);
    EXPECT_EQ(b->eca(), nullptr);
    auto five = build_tree_block_basic<float>(spec(64, 192, 64, 5, 64), rng);
    EXPECT_EQ(five->concat_width(), 1152);
}

TEST(TreeBlock, HasMoreLayersThanOsaAtEqualDepth) {
    Rng rng(11);
    for (std::int64_t l = 2; l <= 6; ++l) {
        auto tree = build_tree_block_basic<float>(spec(8, 8, 8, l, 16), rng);
        std::int64_t tree_layers = 0;
        for (auto& nt : tree->named_tensors()) tree_layers += nt.kind == ParamKind::ConvWeight;
        EXPECT_EQ(static_cast<std::size_t>(tree_layers), tree->layer_count());
        EXPECT_GT(tree_layers, l + 1);
    }
}

TEST(TreeBlock, CompleteAddsOnlyTheEcaKernel) {
    Rng rng(12);
    auto b = build_tree_block_complete<float>(spec(256, 128, 128, 3, 512), rng);
    ASSERT_NE(b->eca(), nullptr);
    EXPECT_EQ(enumerate_weights(*b), 917504 + b->eca()->kernel_size());
    EXPECT_FALSE(b->has_residual());
    EXPECT_FALSE(b->trunk(0).has_identity_skip());
    EXPECT_TRUE(b->trunk(1).has_identity_skip());
    EXPECT_TRUE(b->final_layer().has_identity_skip());
    auto narrow = build_tree_block_complete<float>(spec(16, 8, 12, 3, 16), rng);
    EXPECT_TRUE(narrow->trunk(1).has_identity_skip());
    EXPECT_FALSE(narrow->final_layer().has_identity_skip());
}

TEST(TreeBlock, CompleteForwardShapeWithoutResidual) {
    Rng rng(13);
    auto b = build_tree_block_complete<float>(spec(16, 8, 8, 3, 32), rng);
    EXPECT_EQ(b->forward(noise({1, 16, 7, 7}, 14)).shape(), (Shape{1, 32, 7, 7}));
    Trace t;
    b->trace({1, 16, 7, 7}, "b", t);
    for (const auto& op : t) EXPECT_NE(op.name, "b.residual");
}

TEST(TreeBlock, ZeroWeightsLeaveTheResidualPath) {
    Rng rng(15);
    auto b = build_tree_block_complete<float>(spec(16, 8, 8, 3, 16), rng);
    ASSERT_TRUE(b->has_residual());
    neutralize(*b);
    b->set_training(false);
    auto x = noise({2, 16, 5, 5}, 16);
    auto y = b->forward(x);
    for (std::int64_t i = 0; i < x.numel(); ++i)
        EXPECT_FLOAT_EQ(y[static_cast<std::size_t>(i)], x[static_cast<std::size_t>(i)]);
}

TEST(TreeBlock, RejectsShallowDepth) {
    Rng rng(17);
    EXPECT_THROW(build_tree_block_basic<float>(spec(8, 8, 8, 1, 16), rng), Error);
}

TEST(TreeBlock, EveryCompleteBlockParameterReceivesGradient) {
    Rng rng(18);
    auto b = build_tree_block_complete<float>(spec(8, 6, 5, 4, 8), rng);
    auto y = b->forward(noise({2, 8, 6, 6}, 19));
    backward(sum(relu(add(y, noise(y.shape(), 20)))));
    for (auto& nt : b->named_tensors()) {
        if (!is_trainable(nt.kind)) continue;
        ASSERT_TRUE(nt.tensor.has_grad()) << nt.name;
        double norm = 0;
        for (float g : nt.tensor.grad()) norm += static_cast<double>(g) * g;
        EXPECT_GT(norm, 0.0) << nt.name;
    }
}

TEST(BlockFormulas, RandomSpecsMatchClosedForms) {
    Rng rng(2024);
    std::uniform_int_distribution<std::int64_t> depth(2, 6), width(32, 512);
    for (int i = 0; i < 50; ++i) {
        const std::int64_t l = depth(rng), k_in = width(rng), k = width(rng), kp = width(rng), k_cat = width(rng);
        Rng init(static_cast<std::uint64_t>(i));
        auto tree = build_tree_block_basic<float>(spec(k_in, k, kp, l, k_cat), init);
        auto osa = build_osa_block<float>(spec(k_in, k, kp, l, k_cat), init);
        // Direct sums of each layer's kernel volume.
        std::int64_t tree_expect = k_in * k + 9 * k_in * kp + (l - 2) * (9 * kp * kp + kp * k) + kp * k + 9 * kp * k +
                                   (l + 1) * k * k_cat;
        std::int64_t osa_expect = 9 * k_in * k + (l - 1) * 9 * k * k + (k_in + l * k) * k_cat;
        EXPECT_EQ(enumerate_weights(*tree), tree_expect);
        EXPECT_EQ(enumerate_weights(*osa), osa_expect);
        EXPECT_EQ(tree_params(k_in, k, kp, l, k_cat), tree_expect);
        EXPECT_EQ(osa_params(k_in, k, l, k_cat), osa_expect);
        EXPECT_EQ(tree->concat_width(), (l + 1) * k);
        EXPECT_EQ(osa->concat_width(), k_in + l * k);
    }
}

TEST(Stem, ShapesAndCount) {
    Rng rng(21);
    auto stem = build_stem<float>(rng);
    EXPECT_EQ(enumerate_weights(*stem), 112320);
    Trace t;
    EXPECT_EQ(stem->trace({1, 3, 224, 224}, "", t), (Shape{1, 128, 56, 56}));
    EXPECT_EQ(stem->forward(noise({1, 3, 64, 64}, 22)).shape(), (Shape{1, 128, 16, 16}));
}

TEST(Classifier, CountAndConstantFeatures) {
    Rng rng(23);
    auto head = build_classifier<float>(rng);
    EXPECT_EQ(enumerate_weights(*head), 1025000);
    Trace t;
    EXPECT_EQ(head->trace({2, 1024, 7, 7}, "", t), (Shape{2, 1000}));

    auto small = build_classifier<double>(rng, 3, 2);
    for (std::size_t i = 0; i < 2; ++i) small->bias()[i] = 0.25 * static_cast<double>(i);
    Tensor<double> x({1, 3, 4, 4}, 2.0);
    auto y = small->forward(x);
    for (std::int64_t k = 0; k < 2; ++k) {
        double expect = small->bias()[static_cast<std::size_t>(k)];
        for (std::int64_t c = 0; c < 3; ++c) expect += 2.0 * small->weight()[static_cast<std::size_t>(c * 2 + k)];
        EXPECT_NEAR(y[static_cast<std::size_t>(k)], expect, 1e-12);
    }
}
