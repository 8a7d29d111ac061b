#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "treenet/module.hpp"

namespace treenet {

enum class BlockKind : std::uint8_t { Tree, Osa };

/// Geometry of one Tree or OSA block.
///   depth      number of 3x3 stages (l)
///   k          branch width: every 1x1 branch and the last 3x3 layer
///   k_prime    width of the intermediate 3x3 trunk layers (Tree only)
///   k_cat      transition output width
///   k_in       input channels
struct BlockSpec {
    BlockKind kind = BlockKind::Tree;
    std::int64_t depth = 3;
    std::int64_t k = 128;
    std::int64_t k_prime = 128;
    std::int64_t k_cat = 256;
    std::int64_t k_in = 128;
    bool use_srb = false;
    bool use_residual = false;
    bool use_eca = false;
    std::optional<std::int64_t> eca_kernel;

    bool operator==(const BlockSpec&) const = default;

    void validate() const {
        if (k <= 0 || k_cat <= 0 || k_in <= 0 || (kind == BlockKind::Tree && k_prime <= 0))
            throw Error("block spec: widths must be positive");
        if (kind == BlockKind::Tree && depth < 2)
            throw Error("tree block: depth must be >= 2, got " + std::to_string(depth));
        if (kind == BlockKind::Osa && depth < 1) throw Error("osa block: depth must be >= 1");
        if (eca_kernel && (*eca_kernel < 1 || *eca_kernel % 2 == 0))
            throw Error("eca kernel size must be a positive odd number");
    }
};

/// Odd kernel length for channel attention: t = int(|log2(C) + b| / gamma),
/// bumped to the next odd number when even.
inline std::int64_t eca_kernel_size(std::int64_t channels, double gamma = 2.0, double b = 1.0) {
    const auto t = static_cast<std::int64_t>(std::abs(std::log2(static_cast<double>(channels)) + b) / gamma);
    return t % 2 ? t : t + 1;
}

/// conv -> [identity add] -> BN -> ReLU. With a 3x3 kernel and matching widths
/// this is the shallow residual block; otherwise a plain conv-BN-ReLU layer.
template <Scalar T>
class ConvUnit final : public Module<T> {
public:
    ConvUnit(std::int64_t in_ch, std::int64_t out_ch, std::int64_t kernel, std::int64_t stride, bool identity_skip,
             Rng& rng)
        : bn_(out_ch), skip_(identity_skip && in_ch == out_ch && stride == 1) {
        conv_.in_channels = in_ch;
        conv_.out_channels = out_ch;
        conv_.kernel_h = conv_.kernel_w = kernel;
        conv_.stride = stride;
        conv_.padding = kernel / 2;
        conv_.weight = he_normal<T>(Shape{out_ch, in_ch, kernel, kernel}, in_ch * kernel * kernel, rng);
    }

    Tensor<T> forward(const Tensor<T>& x) override {
        Tensor<T> y = conv2d(x, conv_);
        if (skip_) y = add(y, x);
        return relu(batch_norm(y, bn_));
    }

    void collect(const std::string& prefix, std::vector<NamedTensor<T>>& out) override {
        out.push_back({join_name(prefix, "conv.weight"), conv_.weight, ParamKind::ConvWeight});
        out.push_back({join_name(prefix, "bn.weight"), bn_.gamma, ParamKind::BnGamma});
        out.push_back({join_name(prefix, "bn.bias"), bn_.beta, ParamKind::BnBeta});
        out.push_back({join_name(prefix, "bn.running_mean"), bn_.running_mean, ParamKind::BnRunningMean});
        out.push_back({join_name(prefix, "bn.running_var"), bn_.running_var, ParamKind::BnRunningVar});
    }

    Shape trace(const Shape& in, const std::string& prefix, Trace& out) const override {
        if (in.size() != 4 || in[1] != conv_.in_channels)
            throw ShapeError(prefix + ": trace input " + to_string(in) + " incompatible with conv in_channels " +
                             std::to_string(conv_.in_channels));
        const Shape o{in[0], conv_.out_channels, conv_.out_extent(in[2], conv_.kernel_h),
                      conv_.out_extent(in[3], conv_.kernel_w)};
        TraceOp c{join_name(prefix, "conv"), OpKind::Conv, {in}, o};
        c.kernel_h = conv_.kernel_h;
        c.kernel_w = conv_.kernel_w;
        c.groups = conv_.groups;
        c.weights = conv_.weight.numel();
        out.push_back(std::move(c));
        if (skip_) out.push_back({join_name(prefix, "add"), OpKind::Add, {o, in}, o});
        TraceOp b{join_name(prefix, "bn"), OpKind::BatchNorm, {o}, o};
        b.bn_params = 2 * conv_.out_channels;
        out.push_back(std::move(b));
        out.push_back({join_name(prefix, "relu"), OpKind::Relu, {o}, o});
        return o;
    }

    void set_training(bool on) override { bn_.training = on; }
    std::int64_t in_channels() const override { return conv_.in_channels; }
    std::int64_t out_channels() const override { return conv_.out_channels; }

    bool has_identity_skip() const { return skip_; }
    ConvParams<T>& conv() { return conv_; }
    BatchNormState<T>& bn() { return bn_; }

private:
    ConvParams<T> conv_;
    BatchNormState<T> bn_;
    bool skip_;
};

/// Efficient channel attention: GAP -> shared 1-D conv across channels -> sigmoid
/// -> rescale the input channels.
template <Scalar T>
class Eca final : public Module<T> {
public:
    Eca(std::int64_t channels, Rng& rng, std::optional<std::int64_t> kernel = std::nullopt) : channels_(channels) {
        if (channels < 2) throw Error("eca: needs at least 2 channels");
        const std::int64_t ks = kernel.value_or(eca_kernel_size(channels));
        weight_ = he_normal<T>(Shape{ks}, ks, rng);
    }

    Tensor<T> forward(const Tensor<T>& x) override {
        const std::int64_t N = x.dim(0), C = x.dim(1);
        Tensor<T> pooled = reshape(global_avg_pool(x), Shape{N, C});
        Tensor<T> attn = sigmoid(conv1d_channels(pooled, weight_));
        return multiply_channelwise(x, reshape(attn, Shape{N, C, 1, 1}));
    }

    void collect(const std::string& prefix, std::vector<NamedTensor<T>>& out) override {
        out.push_back({join_name(prefix, "weight"), weight_, ParamKind::EcaWeight});
    }

    Shape trace(const Shape& in, const std::string& prefix, Trace& out) const override {
        const Shape pooled{in[0], in[1], 1, 1};
        out.push_back({join_name(prefix, "gap"), OpKind::GlobalAvgPool, {in}, pooled});
        TraceOp c{join_name(prefix, "conv1d"), OpKind::Conv1dChannels, {pooled}, pooled};
        c.kernel_h = 1;
        c.kernel_w = weight_.numel();
        c.weights = weight_.numel();
        out.push_back(std::move(c));
        out.push_back({join_name(prefix, "sigmoid"), OpKind::Sigmoid, {pooled}, pooled});
        out.push_back({join_name(prefix, "scale"), OpKind::ChannelMul, {in, pooled}, in});
        return in;
    }

    void set_training(bool) override {}
    std::int64_t in_channels() const override { return channels_; }
    std::int64_t out_channels() const override { return channels_; }

    std::int64_t kernel_size() const { return weight_.numel(); }
    Tensor<T>& weight() { return weight_; }

private:
    std::int64_t channels_;
    Tensor<T> weight_;
};

/// l consecutive 3x3 layers, one-shot concatenation of the input and every layer
/// output, then a 1x1 transition.
template <Scalar T>
class OsaBlock final : public Module<T> {
public:
    OsaBlock(const BlockSpec& spec, Rng& rng) : spec_(spec) {
        spec_.validate();
        std::int64_t c = spec_.k_in;
        for (std::int64_t i = 0; i < spec_.depth; ++i) {
            layers_.push_back(std::make_unique<ConvUnit<T>>(c, spec_.k, 3, 1, false, rng));
            c = spec_.k;
        }
        transition_ = std::make_unique<ConvUnit<T>>(concat_width(), spec_.k_cat, 1, 1, false, rng);
    }

    std::int64_t concat_width() const { return spec_.k_in + spec_.depth * spec_.k; }

    Tensor<T> forward(const Tensor<T>& x) override {
        std::vector<Tensor<T>> outs{x};
        Tensor<T> h = x;
        for (auto& l : layers_) {
            h = l->forward(h);
            outs.push_back(h);
        }
        return transition_->forward(concat_channels(outs));
    }

    void collect(const std::string& prefix, std::vector<NamedTensor<T>>& out) override {
        for (std::size_t i = 0; i < layers_.size(); ++i)
            layers_[i]->collect(join_name(prefix, "layer" + std::to_string(i + 1)), out);
        transition_->collect(join_name(prefix, "transition"), out);
    }

    Shape trace(const Shape& in, const std::string& prefix, Trace& out) const override {
        std::vector<Shape> outs{in};
        Shape h = in;
        for (std::size_t i = 0; i < layers_.size(); ++i) {
            h = layers_[i]->trace(h, join_name(prefix, "layer" + std::to_string(i + 1)), out);
            outs.push_back(h);
        }
        Shape cat{in[0], concat_width(), in[2], in[3]};
        out.push_back({join_name(prefix, "concat"), OpKind::Concat, outs, cat});
        return transition_->trace(cat, join_name(prefix, "transition"), out);
    }

    void set_training(bool on) override {
        for (auto& l : layers_) l->set_training(on);
        transition_->set_training(on);
    }
    std::int64_t in_channels() const override { return spec_.k_in; }
    std::int64_t out_channels() const override { return spec_.k_cat; }
    const BlockSpec& spec() const { return spec_; }

private:
    BlockSpec spec_;
    std::vector<std::unique_ptr<ConvUnit<T>>> layers_;
    std::unique_ptr<ConvUnit<T>> transition_;
};

/// Tree block. The trunk runs l 3x3 layers (k_in->k', k'->k' ..., k'->k); every
/// trunk step except the last emits a 1x1 k'->k branch, the input emits a 1x1
/// k_in->k branch, and the last 3x3 layer is itself a branch. The l+1 branches
/// are concatenated (input branch, trunk branches in step order, final layer)
/// and compressed by a 1x1 transition. Optional: SRB skips on width-preserving
/// 3x3 layers, ECA on the transition output, identity residual when k_in == k_cat.
template <Scalar T>
class TreeBlock final : public Module<T> {
public:
    TreeBlock(const BlockSpec& spec, Rng& rng) : spec_(spec) {
        spec_.validate();
        const bool srb = spec_.use_srb;
        input_branch_ = std::make_unique<ConvUnit<T>>(spec_.k_in, spec_.k, 1, 1, false, rng);
        std::int64_t c = spec_.k_in;
        for (std::int64_t i = 1; i < spec_.depth; ++i) {
            trunk_.push_back(std::make_unique<ConvUnit<T>>(c, spec_.k_prime, 3, 1, srb, rng));
            branches_.push_back(std::make_unique<ConvUnit<T>>(spec_.k_prime, spec_.k, 1, 1, false, rng));
            c = spec_.k_prime;
        }
        final_ = std::make_unique<ConvUnit<T>>(spec_.k_prime, spec_.k, 3, 1, srb, rng);
        transition_ = std::make_unique<ConvUnit<T>>(concat_width(), spec_.k_cat, 1, 1, false, rng);
        if (spec_.use_eca) eca_ = std::make_unique<Eca<T>>(spec_.k_cat, rng, spec_.eca_kernel);
    }

    std::int64_t concat_width() const { return (spec_.depth + 1) * spec_.k; }
    bool has_residual() const { return spec_.use_residual && spec_.k_in == spec_.k_cat; }

    Tensor<T> forward(const Tensor<T>& x) override {
        std::vector<Tensor<T>> outs{input_branch_->forward(x)};
        Tensor<T> t = x;
        for (std::size_t i = 0; i < trunk_.size(); ++i) {
            t = trunk_[i]->forward(t);
            outs.push_back(branches_[i]->forward(t));
        }
        outs.push_back(final_->forward(t));
        Tensor<T> y = transition_->forward(concat_channels(outs));
        if (eca_) y = eca_->forward(y);
        if (has_residual()) y = add(y, x);
        return y;
    }

    void collect(const std::string& prefix, std::vector<NamedTensor<T>>& out) override {
        input_branch_->collect(join_name(prefix, "input_branch"), out);
        for (std::size_t i = 0; i < trunk_.size(); ++i) {
            trunk_[i]->collect(join_name(prefix, "trunk" + std::to_string(i + 1)), out);
            branches_[i]->collect(join_name(prefix, "branch" + std::to_string(i + 1)), out);
        }
        final_->collect(join_name(prefix, "final"), out);
        transition_->collect(join_name(prefix, "transition"), out);
        if (eca_) eca_->collect(join_name(prefix, "eca"), out);
    }

    Shape trace(const Shape& in, const std::string& prefix, Trace& out) const override {
        std::vector<Shape> outs{input_branch_->trace(in, join_name(prefix, "input_branch"), out)};
        Shape t = in;
        for (std::size_t i = 0; i < trunk_.size(); ++i) {
            t = trunk_[i]->trace(t, join_name(prefix, "trunk" + std::to_string(i + 1)), out);
            outs.push_back(branches_[i]->trace(t, join_name(prefix, "branch" + std::to_string(i + 1)), out));
        }
        outs.push_back(final_->trace(t, join_name(prefix, "final"), out));
        Shape cat{in[0], concat_width(), in[2], in[3]};
        out.push_back({join_name(prefix, "concat"), OpKind::Concat, outs, cat});
        Shape y = transition_->trace(cat, join_name(prefix, "transition"), out);
        if (eca_) y = eca_->trace(y, join_name(prefix, "eca"), out);
        if (has_residual()) out.push_back({join_name(prefix, "residual"), OpKind::Add, {y, in}, y});
        return y;
    }

    void set_training(bool on) override {
        input_branch_->set_training(on);
        for (auto& l : trunk_) l->set_training(on);
        for (auto& l : branches_) l->set_training(on);
        final_->set_training(on);
        transition_->set_training(on);
    }
    std::int64_t in_channels() const override { return spec_.k_in; }
    std::int64_t out_channels() const override { return spec_.k_cat; }

    const BlockSpec& spec() const { return spec_; }
    ConvUnit<T>& input_branch() { return *input_branch_; }
    ConvUnit<T>& trunk(std::size_t i) { return *trunk_.at(i); }
    ConvUnit<T>& branch(std::size_t i) { return *branches_.at(i); }
    ConvUnit<T>& final_layer() { return *final_; }
    ConvUnit<T>& transition() { return *transition_; }
    Eca<T>* eca() { return eca_.get(); }
    std::size_t layer_count() const { return 1 + trunk_.size() + branches_.size() + 2; }

private:
    BlockSpec spec_;
    std::unique_ptr<ConvUnit<T>> input_branch_;
    std::vector<std::unique_ptr<ConvUnit<T>>> trunk_;
    std::vector<std::unique_ptr<ConvUnit<T>>> branches_;
    std::unique_ptr<ConvUnit<T>> final_;
    std::unique_ptr<ConvUnit<T>> transition_;
    std::unique_ptr<Eca<T>> eca_;
};

struct StemSpec {
    std::int64_t in_channels = 3;
    std::int64_t width1 = 64;
    std::int64_t width2 = 64;
    std::int64_t width3 = 128;
    bool operator==(const StemSpec&) const = default;
};

/// Three 3x3 conv-BN-ReLU layers with strides 2, 1, 2.
template <Scalar T>
class Stem final : public Module<T> {
public:
    Stem(const StemSpec& spec, Rng& rng) : spec_(spec) {
        layers_.push_back(std::make_unique<ConvUnit<T>>(spec.in_channels, spec.width1, 3, 2, false, rng));
        layers_.push_back(std::make_unique<ConvUnit<T>>(spec.width1, spec.width2, 3, 1, false, rng));
        layers_.push_back(std::make_unique<ConvUnit<T>>(spec.width2, spec.width3, 3, 2, false, rng));
    }

    Tensor<T> forward(const Tensor<T>& x) override {
        Tensor<T> h = x;
        for (auto& l : layers_) h = l->forward(h);
        return h;
    }
    void collect(const std::string& prefix, std::vector<NamedTensor<T>>& out) override {
        for (std::size_t i = 0; i < layers_.size(); ++i)
            layers_[i]->collect(join_name(prefix, "conv" + std::to_string(i + 1)), out);
    }
    Shape trace(const Shape& in, const std::string& prefix, Trace& out) const override {
        Shape h = in;
        for (std::size_t i = 0; i < layers_.size(); ++i)
            h = layers_[i]->trace(h, join_name(prefix, "conv" + std::to_string(i + 1)), out);
        return h;
    }
    void set_training(bool on) override {
        for (auto& l : layers_) l->set_training(on);
    }
    std::int64_t in_channels() const override { return spec_.in_channels; }
    std::int64_t out_channels() const override { return spec_.width3; }

private:
    StemSpec spec_;
    std::vector<std::unique_ptr<ConvUnit<T>>> layers_;
};

/// Global average pool followed by a fully connected layer; emits logits.
template <Scalar T>
class Classifier final : public Module<T> {
public:
    Classifier(std::int64_t in_ch, std::int64_t classes, Rng& rng)
        : in_(in_ch), classes_(classes), weight_(he_normal<T>(Shape{in_ch, classes}, in_ch, rng)),
          bias_(Shape{classes}, T(0)) {
        bias_.set_requires_grad();
    }

    Tensor<T> forward(const Tensor<T>& x) override {
        return fully_connected(reshape(global_avg_pool(x), Shape{x.dim(0), x.dim(1)}), weight_, bias_);
    }
    void collect(const std::string& prefix, std::vector<NamedTensor<T>>& out) override {
        out.push_back({join_name(prefix, "fc.weight"), weight_, ParamKind::FcWeight});
        out.push_back({join_name(prefix, "fc.bias"), bias_, ParamKind::FcBias});
    }
    Shape trace(const Shape& in, const std::string& prefix, Trace& out) const override {
        if (in.size() != 4 || in[1] != in_) throw ShapeError(prefix + ": classifier input mismatch " + to_string(in));
        const Shape pooled{in[0], in[1], 1, 1};
        out.push_back({join_name(prefix, "gap"), OpKind::GlobalAvgPool, {in}, pooled});
        TraceOp fc{join_name(prefix, "fc"), OpKind::FullyConnected, {Shape{in[0], in_}}, Shape{in[0], classes_}};
        fc.weights = in_ * classes_;
        fc.bias = classes_;
        out.push_back(std::move(fc));
        return Shape{in[0], classes_};
    }
    void set_training(bool) override {}
    std::int64_t in_channels() const override { return in_; }
    std::int64_t out_channels() const override { return classes_; }

    Tensor<T>& weight() { return weight_; }
    Tensor<T>& bias() { return bias_; }

private:
    std::int64_t in_, classes_;
    Tensor<T> weight_, bias_;
};

template <Scalar T>
std::unique_ptr<ConvUnit<T>> build_srb(std::int64_t in_ch, std::int64_t out_ch, Rng& rng) {
    return std::make_unique<ConvUnit<T>>(in_ch, out_ch, 3, 1, true, rng);
}

template <Scalar T>
std::unique_ptr<Eca<T>> build_eca(std::int64_t channels, Rng& rng, std::optional<std::int64_t> kernel = std::nullopt) {
    return std::make_unique<Eca<T>>(channels, rng, kernel);
}

template <Scalar T>
std::unique_ptr<OsaBlock<T>> build_osa_block(BlockSpec spec, Rng& rng) {
    spec.kind = BlockKind::Osa;
    return std::make_unique<OsaBlock<T>>(spec, rng);
}

template <Scalar T>
std::unique_ptr<TreeBlock<T>> build_tree_block_basic(BlockSpec spec, Rng& rng) {
    spec.kind = BlockKind::Tree;
    spec.use_srb = spec.use_residual = spec.use_eca = false;
    return std::make_unique<TreeBlock<T>>(spec, rng);
}

template <Scalar T>
std::unique_ptr<TreeBlock<T>> build_tree_block_complete(BlockSpec spec, Rng& rng) {
    spec.kind = BlockKind::Tree;
    spec.use_srb = spec.use_residual = spec.use_eca = true;
    return std::make_unique<TreeBlock<T>>(spec, rng);
}

template <Scalar T>
std::unique_ptr<Module<T>> build_block(const BlockSpec& spec, Rng& rng) {
    if (spec.kind == BlockKind::Osa) return std::make_unique<OsaBlock<T>>(spec, rng);
    return std::make_unique<TreeBlock<T>>(spec, rng);
}

template <Scalar T>
std::unique_ptr<Stem<T>> build_stem(Rng& rng, const StemSpec& spec = {}) {
    return std::make_unique<Stem<T>>(spec, rng);
}

template <Scalar T>
std::unique_ptr<Classifier<T>> build_classifier(Rng& rng, std::int64_t in_ch = 1024, std::int64_t classes = 1000) {
    return std::make_unique<Classifier<T>>(in_ch, classes, rng);
}

}  // namespace treenet
