#include <gtest/gtest.h>

#include <random>
#include <set>

#include "treenet.hpp"

using namespace treenet;

namespace {

std::int64_t total_blocks(const ModelSpec& s) {
    std::int64_t n = 0;
    for (const auto& st : s.stages) n += st.blocks;
    return n;
}

// Stage output shapes collected from a shape trace: the last op of each stage prefix.
std::vector<Shape> stage_outputs(const Module<float>& m, const Shape& in) {
    Trace t;
    m.trace(in, "", t);
    std::vector<Shape> out;
    std::string current;
    Shape last;
    for (const auto& op : t) {
        const std::string stage = op.name.substr(0, op.name.find('.'));
        if (stage != current && !current.empty() && current != "classifier") out.push_back(last);
        current = stage;
        last = op.output;
    }
    return out;
}

}  // namespace

TEST(ModelSpec, BlockCountsPerVariant) {
    const std::vector<std::pair<int, std::vector<std::int64_t>>> table{
        {20, {1, 1, 1, 1}}, {40, {1, 1, 2, 2}}, {58, {1, 1, 4, 3}}, {100, {1, 3, 9, 3}}};
    for (const auto& [v, blocks] : table) {
        auto s = treenet_spec(v);
        ASSERT_EQ(s.stages.size(), 4u);
        for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(s.stages[i].blocks, blocks[i]) << v;
        EXPECT_EQ(s.stages[0].block.depth, v == 20 ? 3 : 5);
        EXPECT_EQ(s.feature_channels(), 1024);
        EXPECT_EQ(s.output_stride, 32);
        EXPECT_NO_THROW(s.validate());
    }
    EXPECT_EQ(total_blocks(treenet_spec(100)), 16);
}

TEST(ModelSpec, ParsesVariantNames) {
    EXPECT_EQ(parse_variant("treenet-58"), 58);
    EXPECT_EQ(parse_variant("TreeNet-20"), 20);
    EXPECT_EQ(parse_variant("100"), 100);
    EXPECT_THROW(parse_variant("treenet-30"), Error);
    EXPECT_THROW(treenet_spec(30), Error);
}

TEST(ModelSpec, WidthDivisorScalesEveryWidth) {
    auto s = treenet_spec(40, 4, 10);
    EXPECT_EQ(s.stem.width3, 32);
    EXPECT_EQ(s.stages[3].block.k_cat, 256);
    EXPECT_EQ(s.stages[3].block.k_prime, 64);
    EXPECT_EQ(s.num_classes, 10);
    EXPECT_THROW(treenet_spec(20, 0), Error);
}

TEST(ModelSpec, MismatchedStrideIsRejected) {
    auto s = treenet_spec(20);
    s.output_stride = 16;
    EXPECT_THROW(s.validate(), Error);
}

TEST(TreeNet, StageShapesAt224) {
    for (int v : kTreeNetVariants) {
        auto m = build_model<float>(treenet_spec(v, 8), 0);
        const auto shapes = stage_outputs(*m, {1, 3, 224, 224});
        ASSERT_EQ(shapes.size(), 5u) << v;
        const std::vector<std::int64_t> hw{56, 56, 28, 14, 7};
        const std::vector<std::int64_t> ch{128, 256, 512, 768, 1024};
        for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(shapes[i], (Shape{1, ch[i] / 8, hw[i], hw[i]})) << v << " " << i;
    }
}

TEST(TreeNet, FullWidthTraceEndsInClassLogits) {
    auto m = build_model<float>(treenet_spec(20), 0);
    Trace t;
    EXPECT_EQ(m->trace({2, 3, 224, 224}, "", t), (Shape{2, 1000}));
    EXPECT_EQ(224 / stage_outputs(*m, {1, 3, 224, 224}).back()[2], 32);
}

TEST(TreeNet, ForwardProducesLogitsPerSample) {
    auto m = build_model<float>(treenet_spec(20, 8, 5), 1);
    Tensor<float> x({3, 3, 32, 32}, 0.1f);
    EXPECT_EQ(m->forward(x).shape(), (Shape{3, 5}));
    EXPECT_THROW(m->forward(Tensor<float>({1, 1, 32, 32})), ShapeError);
}

TEST(TreeNet, SameSeedGivesIdenticalWeights) {
    auto a = build_model<float>(treenet_spec(40, 8, 4), 9);
    auto b = build_model<float>(treenet_spec(40, 8, 4), 9);
    auto c = build_model<float>(treenet_spec(40, 8, 4), 10);
    EXPECT_EQ(encode_checkpoint(snapshot(*a)), encode_checkpoint(snapshot(*b)));
    EXPECT_NE(encode_checkpoint(snapshot(*a)), encode_checkpoint(snapshot(*c)));
}

TEST(TreeNet, IdenticalImagesGiveIdenticalLogits) {
    auto m = build_model<float>(treenet_spec(20, 8, 4), 2);
    m->set_training(false);
    Rng rng(3);
    std::normal_distribution<float> d;
    Tensor<float> one({1, 3, 32, 32});
    for (auto& v : one.data()) v = d(rng);
    Tensor<float> two({2, 3, 32, 32});
    std::copy(one.data().begin(), one.data().end(), two.data().begin());
    std::copy(one.data().begin(), one.data().end(), two.data().begin() + one.numel());
    auto y = m->forward(two);
    for (std::int64_t k = 0; k < 4; ++k) EXPECT_EQ(y[static_cast<std::size_t>(k)], y[static_cast<std::size_t>(4 + k)]);
    auto single = m->forward(one);
    for (std::int64_t k = 0; k < 4; ++k) EXPECT_EQ(single[static_cast<std::size_t>(k)], y[static_cast<std::size_t>(k)]);
}

TEST(TreeNet, ResidualActiveOnlyAfterTheFirstBlockOfAStage) {
    auto m = build_model<float>(treenet_spec(100, 8), 0);
    for (auto& st : m->stages())
        for (std::size_t j = 0; j < st.blocks.size(); ++j) {
            auto* tree = dynamic_cast<TreeBlock<float>*>(st.blocks[j].get());
            ASSERT_NE(tree, nullptr);
            EXPECT_EQ(tree->has_residual(), j > 0);
            EXPECT_NE(tree->eca(), nullptr);
        }
}

TEST(TreeNet, BasicOptionsRemoveAttentionAndSkips) {
    auto m = build_model<float>(with_block_options(treenet_spec(40, 8), false, false, false), 0);
    for (auto& st : m->stages())
        for (auto& b : st.blocks) {
            auto* tree = dynamic_cast<TreeBlock<float>*>(b.get());
            ASSERT_NE(tree, nullptr);
            EXPECT_FALSE(tree->has_residual());
            EXPECT_EQ(tree->eca(), nullptr);
            EXPECT_FALSE(tree->trunk(1).has_identity_skip());
        }
}

TEST(TreeNet, ParameterNamesAreUnique) {
    auto m = build_model<float>(treenet_spec(58, 8), 0);
    std::set<std::string> names;
    for (auto& nt : m->named_tensors()) EXPECT_TRUE(names.insert(nt.name).second) << nt.name;
    EXPECT_TRUE(names.contains("stage4.block4.transition.conv.weight"));
    EXPECT_TRUE(names.contains("classifier.fc.bias"));
}

TEST(OsaReference, MatchesTreeGeometry) {
    auto b = osa_reference_spec(3, 128, 256, 256);
    EXPECT_EQ(b.kind, BlockKind::Osa);
    EXPECT_EQ(b.depth, 3);
    EXPECT_EQ(b.k, 128);
    EXPECT_EQ(b.k_in, 256);
    EXPECT_EQ(b.k_cat, 256);
    Rng rng(0);
    auto osa = build_block<float>(b, rng);
    EXPECT_EQ(weight_parameter_count(*osa), 753664);
}
