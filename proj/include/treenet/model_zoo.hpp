#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "treenet/blocks.hpp"

namespace treenet {

struct StageSpec {
    std::int64_t blocks = 1;
    BlockSpec block;  // template; k_in of the first block is the previous stage width
    bool downsample = false;
    bool operator==(const StageSpec&) const = default;
};

struct ModelSpec {
    std::string name;
    StemSpec stem;
    std::vector<StageSpec> stages;
    std::int64_t num_classes = 1000;
    std::int64_t output_stride = 32;
    bool operator==(const ModelSpec&) const = default;

    /// Expanded block list with k_in filled in; only the first block of a stage changes width.
    std::vector<std::vector<BlockSpec>> block_specs() const {
        std::vector<std::vector<BlockSpec>> out;
        std::int64_t c = stem.width3;
        for (const auto& st : stages) {
            auto& row = out.emplace_back();
            for (std::int64_t j = 0; j < st.blocks; ++j) {
                BlockSpec b = st.block;
                b.k_in = c;
                row.push_back(b);
                c = b.k_cat;
            }
        }
        return out;
    }

    std::int64_t feature_channels() const { return stages.empty() ? stem.width3 : stages.back().block.k_cat; }

    void validate() const {
        if (stages.empty()) throw Error("model spec '" + name + "': no stages");
        if (num_classes < 1) throw Error("model spec '" + name + "': num_classes must be positive");
        std::int64_t stride = 4;
        for (const auto& st : stages) {
            if (st.blocks < 1) throw Error("model spec '" + name + "': empty stage");
            if (st.downsample) stride *= 2;
        }
        if (stride != output_stride)
            throw Error("model spec '" + name + "': composed output stride " + std::to_string(stride) +
                        " != declared " + std::to_string(output_stride));
        for (const auto& row : block_specs())
            for (const auto& b : row) b.validate();
    }
};

inline constexpr std::array<int, 4> kTreeNetVariants{20, 40, 58, 100};

inline std::string valid_variants_text() { return "treenet-20, treenet-40, treenet-58, treenet-100"; }

/// Stage layout per variant: blocks per stage, l = 3 for the 20-layer model and
/// 5 otherwise; per-stage (k, k_cat) = (128,256) (128,512) (192,768) (256,1024)
/// and k' = max(128, k_cat / 4). `width_divisor` scales every width (stem included)
/// for desk-scale runs.
inline ModelSpec treenet_spec(int variant, std::int64_t width_divisor = 1, std::int64_t num_classes = 1000) {
    std::array<std::int64_t, 4> blocks;
    switch (variant) {
        case 20: blocks = {1, 1, 1, 1}; break;
        case 40: blocks = {1, 1, 2, 2}; break;
        case 58: blocks = {1, 1, 4, 3}; break;
        case 100: blocks = {1, 3, 9, 3}; break;
        default:
            throw Error("unknown TreeNet variant " + std::to_string(variant) + " (valid: " + valid_variants_text() + ")");
    }
    if (width_divisor < 1) throw Error("width divisor must be >= 1");
    const std::array<std::int64_t, 4> k{128, 128, 192, 256};
    const std::array<std::int64_t, 4> k_cat{256, 512, 768, 1024};
    const std::int64_t d = width_divisor;

    ModelSpec spec;
    spec.name = "treenet-" + std::to_string(variant);
    if (d != 1) spec.name += "/w" + std::to_string(d);
    spec.stem = {3, 64 / d, 64 / d, 128 / d};
    spec.num_classes = num_classes;
    for (std::size_t s = 0; s < 4; ++s) {
        StageSpec st;
        st.blocks = blocks[s];
        st.downsample = s > 0;
        st.block.kind = BlockKind::Tree;
        st.block.depth = variant == 20 ? 3 : 5;
        st.block.k = k[s] / d;
        st.block.k_cat = k_cat[s] / d;
        st.block.k_prime = std::max<std::int64_t>(128, k_cat[s] / 4) / d;
        st.block.use_srb = st.block.use_residual = st.block.use_eca = true;
        spec.stages.push_back(st);
    }
    return spec;
}

/// Same layout with the block options switched; all off gives the basic Tree block.
inline ModelSpec with_block_options(ModelSpec spec, bool srb, bool residual, bool eca) {
    for (auto& st : spec.stages) {
        st.block.use_srb = srb;
        st.block.use_residual = residual;
        st.block.use_eca = eca;
    }
    return spec;
}

/// Parses "treenet-58" / "58".
inline int parse_variant(const std::string& arch) {
    std::string s = arch;
    for (auto& ch : s) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    if (s.rfind("treenet-", 0) == 0) s = s.substr(8);
    for (int v : kTreeNetVariants)
        if (s == std::to_string(v)) return v;
    throw Error("unknown arch '" + arch + "' (valid: " + valid_variants_text() + ")");
}

/// Single OSA block used for cost comparison against a Tree block of the same geometry.
inline BlockSpec osa_reference_spec(std::int64_t depth, std::int64_t k, std::int64_t k_in, std::int64_t k_cat) {
    BlockSpec b;
    b.kind = BlockKind::Osa;
    b.depth = depth;
    b.k = k;
    b.k_prime = k;
    b.k_in = k_in;
    b.k_cat = k_cat;
    b.validate();
    return b;
}

/// Stem, four stages of blocks (max pool ahead of every downsampling stage) and the classifier.
template <Scalar T>
class TreeNet final : public Module<T> {
public:
    struct Stage {
        bool downsample = false;
        std::vector<std::unique_ptr<Module<T>>> blocks;
    };

    TreeNet(ModelSpec spec, std::uint64_t seed) : spec_(std::move(spec)) {
        spec_.validate();
        Rng rng(seed);
        stem_ = build_stem<T>(rng, spec_.stem);
        const auto blocks = spec_.block_specs();
        for (std::size_t s = 0; s < blocks.size(); ++s) {
            Stage st;
            st.downsample = spec_.stages[s].downsample;
            for (const auto& b : blocks[s]) st.blocks.push_back(build_block<T>(b, rng));
            stages_.push_back(std::move(st));
        }
        classifier_ = build_classifier<T>(rng, spec_.feature_channels(), spec_.num_classes);
    }

    static std::string stage_name(std::size_t s) { return "stage" + std::to_string(s + 2); }
    static std::string block_name(std::size_t s, std::size_t j) {
        return stage_name(s) + ".block" + std::to_string(j + 1);
    }

    /// Stem output followed by each stage output.
    std::vector<Tensor<T>> features(const Tensor<T>& x) {
        std::vector<Tensor<T>> out;
        Tensor<T> h = stem_->forward(x);
        out.push_back(h);
        for (auto& st : stages_) {
            if (st.downsample) h = max_pool2d(h, 3, 2, 1);
            for (auto& b : st.blocks) h = b->forward(h);
            out.push_back(h);
        }
        return out;
    }

    Tensor<T> forward(const Tensor<T>& x) override {
        if (x.rank() != 4 || x.dim(1) != spec_.stem.in_channels)
            throw ShapeError("model input must be N x " + std::to_string(spec_.stem.in_channels) +
                             " x H x W, got " + to_string(x.shape()));
        return classifier_->forward(features(x).back());
    }

    void collect(const std::string& prefix, std::vector<NamedTensor<T>>& out) override {
        stem_->collect(join_name(prefix, "stem"), out);
        for (std::size_t s = 0; s < stages_.size(); ++s)
            for (std::size_t j = 0; j < stages_[s].blocks.size(); ++j)
                stages_[s].blocks[j]->collect(join_name(prefix, block_name(s, j)), out);
        classifier_->collect(join_name(prefix, "classifier"), out);
    }

    Shape trace(const Shape& in, const std::string& prefix, Trace& out) const override {
        Shape h = stem_->trace(in, join_name(prefix, "stem"), out);
        for (std::size_t s = 0; s < stages_.size(); ++s) {
            if (stages_[s].downsample) {
                const Shape pooled{h[0], h[1], (h[2] + 2 - 3) / 2 + 1, (h[3] + 2 - 3) / 2 + 1};
                out.push_back({join_name(prefix, stage_name(s) + ".pool"), OpKind::MaxPool, {h}, pooled});
                h = pooled;
            }
            for (std::size_t j = 0; j < stages_[s].blocks.size(); ++j)
                h = stages_[s].blocks[j]->trace(h, join_name(prefix, block_name(s, j)), out);
        }
        return classifier_->trace(h, join_name(prefix, "classifier"), out);
    }

    void set_training(bool on) override {
        stem_->set_training(on);
        for (auto& st : stages_)
            for (auto& b : st.blocks) b->set_training(on);
        classifier_->set_training(on);
    }

    std::int64_t in_channels() const override { return spec_.stem.in_channels; }
    std::int64_t out_channels() const override { return spec_.num_classes; }

    const ModelSpec& spec() const { return spec_; }
    Stem<T>& stem() { return *stem_; }
    std::vector<Stage>& stages() { return stages_; }
    Classifier<T>& classifier() { return *classifier_; }

private:
    ModelSpec spec_;
    std::unique_ptr<Stem<T>> stem_;
    std::vector<Stage> stages_;
    std::unique_ptr<Classifier<T>> classifier_;
};

template <Scalar T>
std::unique_ptr<TreeNet<T>> build_model(const ModelSpec& spec, std::uint64_t seed = 0) {
    return std::make_unique<TreeNet<T>>(spec, seed);
}

}  // namespace treenet
