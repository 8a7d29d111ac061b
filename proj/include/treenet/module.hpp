#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "treenet/ops.hpp"

namespace treenet {

using Rng = std::mt19937_64;

enum class ParamKind : std::uint8_t {
    ConvWeight,
    ConvBias,
    BnGamma,
    BnBeta,
    BnRunningMean,
    BnRunningVar,
    EcaWeight,
    FcWeight,
    FcBias,
};

inline bool is_trainable(ParamKind k) { return k != ParamKind::BnRunningMean && k != ParamKind::BnRunningVar; }
inline bool is_bn(ParamKind k) {
    return k == ParamKind::BnGamma || k == ParamKind::BnBeta || k == ParamKind::BnRunningMean ||
           k == ParamKind::BnRunningVar;
}
/// Biases and BN affine terms are exempt from weight decay.
inline bool is_decayed(ParamKind k) {
    return k == ParamKind::ConvWeight || k == ParamKind::EcaWeight || k == ParamKind::FcWeight;
}

template <Scalar T>
struct NamedTensor {
    std::string name;
    Tensor<T> tensor;
    ParamKind kind;
};

/// Structural record of one primitive op, emitted by Module::trace. The cost
/// model turns these into parameter, FLOP and memory-access counts.
enum class OpKind : std::uint8_t {
    Conv,
    BatchNorm,
    Relu,
    Add,
    MaxPool,
    GlobalAvgPool,
    Concat,
    Conv1dChannels,
    Sigmoid,
    ChannelMul,
    FullyConnected,
};

inline const char* op_name(OpKind k) {
    switch (k) {
        case OpKind::Conv: return "conv";
        case OpKind::BatchNorm: return "bn";
        case OpKind::Relu: return "relu";
        case OpKind::Add: return "add";
        case OpKind::MaxPool: return "maxpool";
        case OpKind::GlobalAvgPool: return "gap";
        case OpKind::Concat: return "concat";
        case OpKind::Conv1dChannels: return "conv1d";
        case OpKind::Sigmoid: return "sigmoid";
        case OpKind::ChannelMul: return "scale";
        case OpKind::FullyConnected: return "fc";
    }
    return "?";
}

struct TraceOp {
    std::string name;
    OpKind kind;
    std::vector<Shape> inputs;
    Shape output;
    std::int64_t kernel_h = 0;
    std::int64_t kernel_w = 0;
    std::int64_t groups = 1;
    std::int64_t weights = 0;    // conv / fc / eca weight elements
    std::int64_t bias = 0;       // bias elements
    std::int64_t bn_params = 0;  // gamma + beta
};

using Trace = std::vector<TraceOp>;

inline std::string join_name(const std::string& prefix, const std::string& name) {
    return prefix.empty() ? name : prefix + "." + name;
}

template <Scalar T>
class Module {
public:
    virtual ~Module() = default;

    virtual Tensor<T> forward(const Tensor<T>& x) = 0;
    virtual void collect(const std::string& prefix, std::vector<NamedTensor<T>>& out) = 0;
    /// Propagates an input shape through the layer without computing values.
    virtual Shape trace(const Shape& in, const std::string& prefix, Trace& out) const = 0;
    virtual void set_training(bool on) = 0;

    virtual std::int64_t in_channels() const = 0;
    virtual std::int64_t out_channels() const = 0;

    std::vector<NamedTensor<T>> named_tensors(const std::string& prefix = "") {
        std::vector<NamedTensor<T>> out;
        collect(prefix, out);
        return out;
    }

    std::vector<Tensor<T>> trainable_parameters() {
        std::vector<Tensor<T>> out;
        for (auto& nt : named_tensors())
            if (is_trainable(nt.kind)) out.push_back(nt.tensor);
        return out;
    }

    void zero_grad() {
        for (auto& p : trainable_parameters()) p.zero_grad();
    }
};

/// Weight (+bias) elements, BN affine terms excluded.
template <Scalar T>
std::int64_t weight_parameter_count(Module<T>& m) {
    std::int64_t n = 0;
    for (auto& nt : m.named_tensors())
        if (is_trainable(nt.kind) && !is_bn(nt.kind)) n += nt.tensor.numel();
    return n;
}

template <Scalar T>
std::int64_t bn_parameter_count(Module<T>& m) {
    std::int64_t n = 0;
    for (auto& nt : m.named_tensors())
        if (nt.kind == ParamKind::BnGamma || nt.kind == ParamKind::BnBeta) n += nt.tensor.numel();
    return n;
}

/// Zero-mean normal with std sqrt(2 / fan_in).
template <Scalar T>
Tensor<T> he_normal(Shape shape, std::int64_t fan_in, Rng& rng) {
    Tensor<T> t(std::move(shape));
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
    for (auto& v : t.data()) v = static_cast<T>(dist(rng));
    t.set_requires_grad();
    return t;
}

}  // namespace treenet
