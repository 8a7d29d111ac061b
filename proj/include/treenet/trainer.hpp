#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "treenet/module.hpp"

namespace treenet {

/// Optimizer and schedule settings. Defaults are the full-scale ImageNet recipe;
/// desk_config() gives the synthetic-data variant.
struct TrainConfig {
    std::int64_t epochs = 100;
    std::int64_t batch_size = 256;
    double base_lr = 0.1;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    double warmup_epochs = 5;
    double decay_interval = 30;
    double decay_factor = 0.1;
    std::uint64_t seed = 0;
    bool flip = false;

    bool operator==(const TrainConfig&) const = default;

    void validate() const {
        if (epochs < 1 || batch_size < 1) throw Error("train config: epochs and batch_size must be >= 1");
        if (base_lr < 0 || momentum < 0 || weight_decay < 0 || warmup_epochs < 0 || decay_factor < 0)
            throw Error("train config: rates must be nonnegative");
        if (decay_interval <= 0) throw Error("train config: decay_interval must be positive");
        if (warmup_epochs >= static_cast<double>(epochs)) throw Error("train config: warm-up must be shorter than training");
    }
};

inline TrainConfig desk_config() {
    TrainConfig c;
    c.epochs = 20;
    c.batch_size = 32;
    c.base_lr = 0.05;
    c.warmup_epochs = 2;
    c.decay_interval = 10;
    return c;
}

/// Linear warm-up from 0 to base_lr, then a step decay by decay_factor every
/// decay_interval epochs counted from epoch 0.
inline double lr_at(const TrainConfig& c, double epoch) {
    if (epoch < 0) throw Error("lr_at: negative epoch");
    if (c.warmup_epochs > 0 && epoch < c.warmup_epochs) return c.base_lr * epoch / c.warmup_epochs;
    return c.base_lr * std::pow(c.decay_factor, std::floor(epoch / c.decay_interval));
}

/// SGD with momentum and decoupled-from-BN weight decay:
///   v <- momentum * v + grad + wd * param   (wd only on conv/fc/eca weights)
///   param <- param - lr * v
template <Scalar T>
class Sgd {
public:
    Sgd(std::vector<NamedTensor<T>> params, double momentum, double weight_decay)
        : momentum_(momentum), weight_decay_(weight_decay) {
        for (auto& p : params)
            if (is_trainable(p.kind)) params_.push_back(std::move(p));
        velocity_.resize(params_.size());
        for (std::size_t i = 0; i < params_.size(); ++i)
            velocity_[i].assign(static_cast<std::size_t>(params_[i].tensor.numel()), T(0));
    }

    void step(double lr) {
        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto& p = params_[i];
            if (!p.tensor.has_grad()) throw Error("sgd: parameter '" + p.name + "' has no gradient");
            const T wd = is_decayed(p.kind) ? static_cast<T>(weight_decay_) : T(0);
            const T mom = static_cast<T>(momentum_), eta = static_cast<T>(lr);
            auto w = p.tensor.data();
            auto g = p.tensor.grad();
            auto& v = velocity_[i];
            for (std::size_t j = 0; j < w.size(); ++j) {
                v[j] = mom * v[j] + g[j] + wd * w[j];
                w[j] -= eta * v[j];
            }
        }
    }

    void zero_grad() {
        for (auto& p : params_) p.tensor.zero_grad();
    }

    const std::vector<NamedTensor<T>>& parameters() const { return params_; }

private:
    double momentum_, weight_decay_;
    std::vector<NamedTensor<T>> params_;
    std::vector<std::vector<T>> velocity_;
};

template <Scalar T>
struct SyntheticDataset {
    Tensor<T> images;  // N x 3 x S x S
    std::vector<std::int64_t> labels;
    std::int64_t classes = 0;
    std::uint64_t seed = 0;

    std::int64_t size() const { return static_cast<std::int64_t>(labels.size()); }
    std::int64_t image_size() const { return images.dim(3); }

    /// Samples [lo, hi) as an independent dataset.
    SyntheticDataset slice(std::int64_t lo, std::int64_t hi) const {
        if (lo < 0 || hi > size() || lo >= hi) throw Error("dataset slice out of range");
        SyntheticDataset out;
        const std::int64_t per = images.numel() / size();
        Shape s = images.shape();
        s[0] = hi - lo;
        out.images = Tensor<T>(s, std::vector<T>(images.data().begin() + lo * per, images.data().begin() + hi * per));
        out.labels.assign(labels.begin() + lo, labels.begin() + hi);
        out.classes = classes;
        out.seed = seed;
        return out;
    }

    /// Copies the selected samples into a contiguous batch.
    std::pair<Tensor<T>, std::vector<std::int64_t>> batch(std::span<const std::int64_t> idx, bool flip = false,
                                                           Rng* rng = nullptr) const {
        const std::int64_t C = images.dim(1), H = images.dim(2), W = images.dim(3), per = C * H * W;
        Tensor<T> x(Shape{static_cast<std::int64_t>(idx.size()), C, H, W});
        std::vector<std::int64_t> y;
        std::bernoulli_distribution coin(0.5);
        for (std::size_t b = 0; b < idx.size(); ++b) {
            const T* src = images.data().data() + idx[b] * per;
            T* dst = x.data().data() + static_cast<std::int64_t>(b) * per;
            if (flip && rng && coin(*rng)) {
                for (std::int64_t r = 0; r < C * H; ++r)
                    for (std::int64_t c = 0; c < W; ++c) dst[r * W + c] = src[r * W + (W - 1 - c)];
            } else {
                std::copy(src, src + per, dst);
            }
            y.push_back(labels[static_cast<std::size_t>(idx[b])]);
        }
        return {x, y};
    }
};

struct SyntheticOptions {
    double signal = 1.0;  // blob amplitude; 0 makes the classes indistinguishable
    double noise = 1.0;   // per-pixel Gaussian noise std
};

/// Class-conditional Gaussian blobs: each class owns a blob centre, radius and
/// colour drawn from the seed; every image is its class blob (amplitude `signal`,
/// jittered by up to size/16 pixels) plus i.i.d. Gaussian noise. Labels cycle
/// 0..classes-1, so classes are exactly balanced.
template <Scalar T>
SyntheticDataset<T> make_synthetic(std::int64_t classes, std::int64_t per_class, std::int64_t size, std::uint64_t seed,
                                   SyntheticOptions opt = {}) {
    if (classes < 1 || per_class < 1 || size < 4) throw Error("make_synthetic: invalid dimensions");
    Rng rng(seed);
    std::uniform_real_distribution<double> centre(0.25 * static_cast<double>(size), 0.75 * static_cast<double>(size));
    std::uniform_real_distribution<double> colour(-1.0, 1.0);
    struct Blob {
        double cx, cy, sigma;
        double rgb[3];
    };
    std::vector<Blob> blobs;
    for (std::int64_t c = 0; c < classes; ++c) {
        Blob b{centre(rng), centre(rng), static_cast<double>(size) / 8.0, {}};
        for (double& v : b.rgb) v = colour(rng);
        blobs.push_back(b);
    }
    const std::int64_t N = classes * per_class;
    SyntheticDataset<T> ds;
    ds.classes = classes;
    ds.seed = seed;
    ds.images = Tensor<T>(Shape{N, 3, size, size});
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::uniform_real_distribution<double> jitter(-static_cast<double>(size) / 16.0, static_cast<double>(size) / 16.0);
    T* px = ds.images.data().data();
    for (std::int64_t i = 0; i < N; ++i) {
        const std::int64_t label = i % classes;
        ds.labels.push_back(label);
        const Blob& b = blobs[static_cast<std::size_t>(label)];
        const double cx = b.cx + jitter(rng), cy = b.cy + jitter(rng);
        for (std::int64_t ch = 0; ch < 3; ++ch)
            for (std::int64_t y = 0; y < size; ++y)
                for (std::int64_t x = 0; x < size; ++x) {
                    const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
                    const double blob = std::exp(-(dx * dx + dy * dy) / (2 * b.sigma * b.sigma));
                    *px++ = static_cast<T>(opt.signal * b.rgb[ch] * blob + opt.noise * gauss(rng));
                }
    }
    return ds;
}

struct EpochMetrics {
    std::int64_t epoch = 0;
    double lr = 0;
    double loss = 0;
    double top1 = 0;
    double top5 = 0;
};

inline std::string metrics_csv(const std::vector<EpochMetrics>& history) {
    std::ostringstream os;
    os.precision(9);
    os << "epoch,lr,loss,top1,top5\r\n";
    for (const auto& m : history) os << m.epoch << ',' << m.lr << ',' << m.loss << ',' << m.top1 << ',' << m.top5 << "\r\n";
    return os.str();
}

struct EvalResult {
    double loss = 0;
    double top1 = 0;
    double top5 = 0;
};

namespace detail {
/// Counts rows whose true label is the arg-max, and rows where it is in the top min(5, K).
template <Scalar T>
std::pair<std::int64_t, std::int64_t> topk_hits(const Tensor<T>& probs, std::span<const std::int64_t> labels) {
    const std::int64_t N = probs.dim(0), K = probs.dim(1), top = std::min<std::int64_t>(5, K);
    std::int64_t h1 = 0, h5 = 0;
    for (std::int64_t n = 0; n < N; ++n) {
        const T* row = probs.data().data() + n * K;
        const T truth = row[labels[static_cast<std::size_t>(n)]];
        std::int64_t above = 0;  // strictly larger, ties resolved towards the lower index
        for (std::int64_t k = 0; k < K; ++k)
            if (row[k] > truth || (row[k] == truth && k < labels[static_cast<std::size_t>(n)])) ++above;
        h1 += above == 0;
        h5 += above < top;
    }
    return {h1, h5};
}
}  // namespace detail

template <Scalar T>
EvalResult evaluate(Module<T>& model, const SyntheticDataset<T>& data, std::int64_t batch_size = 32) {
    if (data.size() == 0) throw Error("evaluate: empty dataset");
    NoGradGuard guard;
    model.set_training(false);
    EvalResult r;
    double loss = 0;
    std::int64_t h1 = 0, h5 = 0;
    std::vector<std::int64_t> idx(static_cast<std::size_t>(data.size()));
    std::iota(idx.begin(), idx.end(), 0);
    for (std::int64_t s = 0; s < data.size(); s += batch_size) {
        const std::int64_t e = std::min(data.size(), s + batch_size);
        auto [x, y] = data.batch(std::span<const std::int64_t>(idx).subspan(static_cast<std::size_t>(s), static_cast<std::size_t>(e - s)));
        auto out = softmax_cross_entropy(model.forward(x), std::span<const std::int64_t>(y));
        loss += static_cast<double>(out.loss.item()) * static_cast<double>(e - s);
        auto [a, b] = detail::topk_hits(out.probs, y);
        h1 += a;
        h5 += b;
    }
    const double n = static_cast<double>(data.size());
    r.loss = loss / n;
    r.top1 = static_cast<double>(h1) / n;
    r.top5 = static_cast<double>(h5) / n;
    return r;
}

/// Mini-batch SGD over shuffled epochs. The learning rate follows lr_at at the
/// fractional epoch of each step. The short final batch is used, except a batch
/// of one, which is skipped because batch statistics are undefined for it.
/// History rows carry the running training loss and accuracy of each epoch.
template <Scalar T>
std::vector<EpochMetrics> train(Module<T>& model, const SyntheticDataset<T>& data, const TrainConfig& config,
                                const std::function<void(const EpochMetrics&)>& on_epoch = {}) {
    config.validate();
    if (data.size() == 0) throw Error("train: empty dataset");
    Sgd<T> opt(model.named_tensors(), config.momentum, config.weight_decay);
    Rng rng(config.seed ^ 0x9e3779b97f4a7c15ULL);
    std::vector<std::int64_t> order(static_cast<std::size_t>(data.size()));
    std::iota(order.begin(), order.end(), 0);
    const std::int64_t steps = (data.size() + config.batch_size - 1) / config.batch_size;
    std::vector<EpochMetrics> history;
    for (std::int64_t epoch = 0; epoch < config.epochs; ++epoch) {
        model.set_training(true);
        std::shuffle(order.begin(), order.end(), rng);
        double loss_sum = 0;
        std::int64_t seen = 0, h1 = 0, h5 = 0;
        double lr = 0;
        for (std::int64_t s = 0; s < steps; ++s) {
            const std::int64_t lo = s * config.batch_size, hi = std::min(data.size(), lo + config.batch_size);
            if (hi - lo < 2) continue;
            lr = lr_at(config, static_cast<double>(epoch) + static_cast<double>(s) / static_cast<double>(steps));
            auto [x, y] = data.batch(std::span<const std::int64_t>(order).subspan(static_cast<std::size_t>(lo), static_cast<std::size_t>(hi - lo)),
                                     config.flip, &rng);
            opt.zero_grad();
            auto out = softmax_cross_entropy(model.forward(x), std::span<const std::int64_t>(y));
            backward(out.loss);
            opt.step(lr);
            loss_sum += static_cast<double>(out.loss.item()) * static_cast<double>(hi - lo);
            auto [a, b] = detail::topk_hits(out.probs, y);
            h1 += a;
            h5 += b;
            seen += hi - lo;
        }
        EpochMetrics m;
        m.epoch = epoch + 1;
        m.lr = lr;
        if (seen > 0) {
            m.loss = loss_sum / static_cast<double>(seen);
            m.top1 = static_cast<double>(h1) / static_cast<double>(seen);
            m.top5 = static_cast<double>(h5) / static_cast<double>(seen);
        }
        history.push_back(m);
        if (on_epoch) on_epoch(m);
    }
    model.set_training(false);
    return history;
}

}  // namespace treenet
