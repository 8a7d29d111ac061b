#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "treenet/autograd.hpp"
#include "treenet/gemm.hpp"
#include "treenet/tensor.hpp"

namespace treenet {

/// Convolution geometry plus its learnable tensors. Weight shape is
/// (out, in/groups, kh, kw); bias, when present, is (out).
template <Scalar T>
struct ConvParams {
    std::int64_t in_channels = 0;
    std::int64_t out_channels = 0;
    std::int64_t kernel_h = 1;
    std::int64_t kernel_w = 1;
    std::int64_t stride = 1;
    std::int64_t padding = 0;
    std::int64_t groups = 1;
    Tensor<T> weight;
    std::optional<Tensor<T>> bias;

    std::int64_t out_extent(std::int64_t in, std::int64_t kernel) const {
        return (in + 2 * padding - kernel) / stride + 1;
    }
};

/// Per-channel normalization state. gamma/beta are trainable; the running
/// statistics are buffers updated in training mode only.
template <Scalar T>
struct BatchNormState {
    Tensor<T> gamma;
    Tensor<T> beta;
    Tensor<T> running_mean;
    Tensor<T> running_var;
    double eps = 1e-5;
    double momentum = 0.1;
    bool training = true;

    BatchNormState() = default;
    explicit BatchNormState(std::int64_t channels)
        : gamma(Shape{channels}, T(1)),
          beta(Shape{channels}, T(0)),
          running_mean(Shape{channels}, T(0)),
          running_var(Shape{channels}, T(1)) {
        gamma.set_requires_grad();
        beta.set_requires_grad();
    }

    std::int64_t channels() const { return gamma.numel(); }
};

namespace detail {

template <Scalar T>
void check_finite(const Tensor<T>& t, const char* op) {
    for (T v : t.data())
        if (!std::isfinite(v)) throw Error(std::string(op) + ": non-finite value in output");
}

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw ShapeError(msg);
}

template <Scalar T>
void require_rank(const Tensor<T>& t, std::size_t rank, const char* op) {
    require(t.defined() && t.rank() == rank,
            std::string(op) + ": expected rank " + std::to_string(rank) + " input, got " +
                (t.defined() ? to_string(t.shape()) : std::string("<undefined>")));
}

// Gathers the receptive fields of one (sample, group) slice into a
// [cin * kh * kw, ho * wo] matrix.
template <class T>
void im2col(const T* x, std::int64_t cin, std::int64_t h, std::int64_t w, std::int64_t kh, std::int64_t kw,
            std::int64_t stride, std::int64_t pad, std::int64_t ho, std::int64_t wo, T* cols) {
    for (std::int64_t c = 0; c < cin; ++c)
        for (std::int64_t ki = 0; ki < kh; ++ki)
            for (std::int64_t kj = 0; kj < kw; ++kj) {
                T* row = cols + ((c * kh + ki) * kw + kj) * ho * wo;
                for (std::int64_t oy = 0; oy < ho; ++oy) {
                    const std::int64_t iy = oy * stride - pad + ki;
                    T* dst = row + oy * wo;
                    if (iy < 0 || iy >= h) {
                        std::fill(dst, dst + wo, T(0));
                        continue;
                    }
                    const T* src = x + (c * h + iy) * w;
                    for (std::int64_t ox = 0; ox < wo; ++ox) {
                        const std::int64_t ix = ox * stride - pad + kj;
                        dst[ox] = (ix >= 0 && ix < w) ? src[ix] : T(0);
                    }
                }
            }
}

template <class T>
void col2im(const T* cols, std::int64_t cin, std::int64_t h, std::int64_t w, std::int64_t kh, std::int64_t kw,
            std::int64_t stride, std::int64_t pad, std::int64_t ho, std::int64_t wo, T* x) {
    for (std::int64_t c = 0; c < cin; ++c)
        for (std::int64_t ki = 0; ki < kh; ++ki)
            for (std::int64_t kj = 0; kj < kw; ++kj) {
                const T* row = cols + ((c * kh + ki) * kw + kj) * ho * wo;
                for (std::int64_t oy = 0; oy < ho; ++oy) {
                    const std::int64_t iy = oy * stride - pad + ki;
                    if (iy < 0 || iy >= h) continue;
                    T* dst = x + (c * h + iy) * w;
                    for (std::int64_t ox = 0; ox < wo; ++ox) {
                        const std::int64_t ix = ox * stride - pad + kj;
                        if (ix >= 0 && ix < w) dst[ix] += row[oy * wo + ox];
                    }
                }
            }
}

}  // namespace detail

/// 2-D convolution via patch gather + GEMM.
template <Scalar T>
Tensor<T> conv2d(const Tensor<T>& input, const ConvParams<T>& p) {
    using detail::require;
    detail::require_rank(input, 4, "conv2d");
    require(p.groups > 0 && p.in_channels % p.groups == 0 && p.out_channels % p.groups == 0,
            "conv2d: channels (" + std::to_string(p.in_channels) + ", " + std::to_string(p.out_channels) +
                ") not divisible by groups " + std::to_string(p.groups));
    require(input.dim(1) == p.in_channels, "conv2d: input has " + std::to_string(input.dim(1)) +
                                               " channels, layer expects " + std::to_string(p.in_channels));
    const Shape wshape{p.out_channels, p.in_channels / p.groups, p.kernel_h, p.kernel_w};
    require(p.weight.defined() && p.weight.shape() == wshape,
            "conv2d: weight shape " + (p.weight.defined() ? to_string(p.weight.shape()) : std::string("<none>")) +
                " != " + to_string(wshape));
    require(p.stride > 0 && p.padding >= 0, "conv2d: invalid stride/padding");
    if (p.bias) require(p.bias->shape() == Shape{p.out_channels}, "conv2d: bias shape mismatch");

    const std::int64_t N = input.dim(0), H = input.dim(2), W = input.dim(3);
    const std::int64_t Ho = p.out_extent(H, p.kernel_h), Wo = p.out_extent(W, p.kernel_w);
    require(H + 2 * p.padding >= p.kernel_h && W + 2 * p.padding >= p.kernel_w && Ho > 0 && Wo > 0,
            "conv2d: non-positive output extent for input " + to_string(input.shape()));

    const std::int64_t G = p.groups, Cig = p.in_channels / G, Cog = p.out_channels / G;
    const std::int64_t CK = Cig * p.kernel_h * p.kernel_w, P = Ho * Wo;
    const bool pointwise = p.kernel_h == 1 && p.kernel_w == 1 && p.stride == 1 && p.padding == 0;

    Tensor<T> out(Shape{N, p.out_channels, Ho, Wo});
    std::vector<T> cols(pointwise ? 0 : static_cast<std::size_t>(CK * P));
    const T* x = input.data().data();
    const T* wt = p.weight.data().data();
    T* y = out.data().data();
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t g = 0; g < G; ++g) {
            const T* xs = x + (n * p.in_channels + g * Cig) * H * W;
            const T* B = xs;
            if (!pointwise) {
                detail::im2col(xs, Cig, H, W, p.kernel_h, p.kernel_w, p.stride, p.padding, Ho, Wo, cols.data());
                B = cols.data();
            }
            gemm::nn(Cog, P, CK, wt + g * Cog * CK, B, y + (n * p.out_channels + g * Cog) * P, false);
        }
    if (p.bias) {
        const T* b = p.bias->data().data();
        for (std::int64_t n = 0; n < N; ++n)
            for (std::int64_t c = 0; c < p.out_channels; ++c) {
                T* row = y + (n * p.out_channels + c) * P;
                for (std::int64_t i = 0; i < P; ++i) row[i] += b[c];
            }
    }
    detail::check_finite(out, "conv2d");

    std::vector<Tensor<T>> inputs{input, p.weight};
    if (p.bias) inputs.push_back(*p.bias);
    record(out, "conv2d", inputs,
           [input, weight = p.weight, geo = p, N, H, W, Ho, Wo, G, Cig, Cog, CK, P, pointwise](
               std::span<const T> gy, std::span<std::span<T>> gin) {
               const T* x = input.data().data();
               const T* wt = weight.data().data();
               std::vector<T> cols(static_cast<std::size_t>(CK * P));
               for (std::int64_t n = 0; n < N; ++n)
                   for (std::int64_t g = 0; g < G; ++g) {
                       const T* go = gy.data() + (n * geo.out_channels + g * Cog) * P;
                       const T* xs = x + (n * geo.in_channels + g * Cig) * H * W;
                       if (!gin[1].empty()) {
                           const T* B = xs;
                           if (!pointwise) {
                               detail::im2col(xs, Cig, H, W, geo.kernel_h, geo.kernel_w, geo.stride, geo.padding, Ho,
                                              Wo, cols.data());
                               B = cols.data();
                           }
                           gemm::nt(Cog, CK, P, go, B, gin[1].data() + g * Cog * CK, true);
                       }
                       if (!gin[0].empty()) {
                           T* gx = gin[0].data() + (n * geo.in_channels + g * Cig) * H * W;
                           if (pointwise) {
                               gemm::tn(CK, P, Cog, wt + g * Cog * CK, go, gx, true);
                           } else {
                               gemm::tn(CK, P, Cog, wt + g * Cog * CK, go, cols.data(), false);
                               detail::col2im(cols.data(), Cig, H, W, geo.kernel_h, geo.kernel_w, geo.stride,
                                              geo.padding, Ho, Wo, gx);
                           }
                       }
                   }
               if (gin.size() > 2 && !gin[2].empty())
                   for (std::int64_t n = 0; n < N; ++n)
                       for (std::int64_t c = 0; c < geo.out_channels; ++c) {
                           const T* row = gy.data() + (n * geo.out_channels + c) * P;
                           T s = 0;
                           for (std::int64_t i = 0; i < P; ++i) s += row[i];
                           gin[2][c] += s;
                       }
           });
    return out;
}

template <Scalar T>
Tensor<T> batch_norm(const Tensor<T>& input, BatchNormState<T>& state) {
    detail::require(input.defined() && (input.rank() == 4 || input.rank() == 2),
                    "batch_norm: expected NCHW or NC input");
    const std::int64_t N = input.dim(0), C = input.dim(1);
    detail::require(C == state.channels(), "batch_norm: input has " + std::to_string(C) +
                                               " channels, state has " + std::to_string(state.channels()));
    const std::int64_t S = input.rank() == 4 ? input.dim(2) * input.dim(3) : 1;
    const std::int64_t M = N * S;
    const T* x = input.data().data();
    Tensor<T> out(input.shape());
    T* y = out.data().data();
    const T* gamma = state.gamma.data().data();
    const T* beta = state.beta.data().data();

    std::vector<T> xhat(static_cast<std::size_t>(input.numel()));
    std::vector<T> inv_std(static_cast<std::size_t>(C));
    for (std::int64_t c = 0; c < C; ++c) {
        double mean, var;
        if (state.training) {
            double s = 0;
            for (std::int64_t n = 0; n < N; ++n)
                for (std::int64_t i = 0; i < S; ++i) s += x[(n * C + c) * S + i];
            mean = s / static_cast<double>(M);
            double q = 0;
            for (std::int64_t n = 0; n < N; ++n)
                for (std::int64_t i = 0; i < S; ++i) {
                    const double d = x[(n * C + c) * S + i] - mean;
                    q += d * d;
                }
            var = q / static_cast<double>(M);
            const double unbiased = M > 1 ? q / static_cast<double>(M - 1) : var;
            auto& rm = state.running_mean[static_cast<std::size_t>(c)];
            auto& rv = state.running_var[static_cast<std::size_t>(c)];
            rm = static_cast<T>((1 - state.momentum) * rm + state.momentum * mean);
            rv = static_cast<T>((1 - state.momentum) * rv + state.momentum * unbiased);
        } else {
            mean = state.running_mean[static_cast<std::size_t>(c)];
            var = state.running_var[static_cast<std::size_t>(c)];
        }
        const T is = static_cast<T>(1.0 / std::sqrt(var + state.eps));
        inv_std[static_cast<std::size_t>(c)] = is;
        const T m = static_cast<T>(mean);
        for (std::int64_t n = 0; n < N; ++n)
            for (std::int64_t i = 0; i < S; ++i) {
                const std::int64_t idx = (n * C + c) * S + i;
                xhat[static_cast<std::size_t>(idx)] = (x[idx] - m) * is;
                y[idx] = gamma[c] * xhat[static_cast<std::size_t>(idx)] + beta[c];
            }
    }
    detail::check_finite(out, "batch_norm");

    record(out, "batch_norm", {input, state.gamma, state.beta},
           [xhat = std::move(xhat), inv_std = std::move(inv_std), gamma_t = state.gamma, training = state.training,
            N, C, S, M](std::span<const T> gy, std::span<std::span<T>> gin) {
               const T* gamma = gamma_t.data().data();
               for (std::int64_t c = 0; c < C; ++c) {
                   double sum_g = 0, sum_gx = 0;
                   for (std::int64_t n = 0; n < N; ++n)
                       for (std::int64_t i = 0; i < S; ++i) {
                           const std::int64_t idx = (n * C + c) * S + i;
                           sum_g += gy[idx];
                           sum_gx += gy[idx] * xhat[static_cast<std::size_t>(idx)];
                       }
                   if (!gin[1].empty()) gin[1][c] += static_cast<T>(sum_gx);
                   if (!gin[2].empty()) gin[2][c] += static_cast<T>(sum_g);
                   if (gin[0].empty()) continue;
                   const T scale = gamma[c] * inv_std[static_cast<std::size_t>(c)];
                   const T mg = static_cast<T>(sum_g / static_cast<double>(M));
                   const T mgx = static_cast<T>(sum_gx / static_cast<double>(M));
                   for (std::int64_t n = 0; n < N; ++n)
                       for (std::int64_t i = 0; i < S; ++i) {
                           const std::int64_t idx = (n * C + c) * S + i;
                           gin[0][idx] += training
                                              ? scale * (gy[idx] - mg - xhat[static_cast<std::size_t>(idx)] * mgx)
                                              : scale * gy[idx];
                       }
               }
           });
    return out;
}

template <Scalar T>
Tensor<T> relu(const Tensor<T>& input) {
    Tensor<T> out(input.shape());
    auto x = input.data();
    auto y = out.data();
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
    record(out, "relu", {input}, [input](std::span<const T> gy, std::span<std::span<T>> gin) {
        auto x = input.data();
        for (std::size_t i = 0; i < x.size(); ++i)
            if (x[i] > T(0)) gin[0][i] += gy[i];
    });
    return out;
}

template <Scalar T>
Tensor<T> sigmoid(const Tensor<T>& input) {
    Tensor<T> out(input.shape());
    auto x = input.data();
    auto y = out.data();
    for (std::size_t i = 0; i < x.size(); ++i) {
        // Evaluate through exp(-|x|) so neither tail overflows.
        const T e = std::exp(-std::abs(x[i]));
        y[i] = x[i] >= T(0) ? T(1) / (T(1) + e) : e / (T(1) + e);
    }
    record(out, "sigmoid", {input}, [out_data = std::vector<T>(y.begin(), y.end())](
                                        std::span<const T> gy, std::span<std::span<T>> gin) {
        for (std::size_t i = 0; i < out_data.size(); ++i) gin[0][i] += gy[i] * out_data[i] * (T(1) - out_data[i]);
    });
    return out;
}

template <Scalar T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require(a.shape() == b.shape(), "add: shape mismatch " + to_string(a.shape()) + " vs " +
                                                to_string(b.shape()));
    Tensor<T> out(a.shape());
    auto x = a.data(), z = b.data();
    auto y = out.data();
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] + z[i];
    detail::check_finite(out, "add");
    record(out, "add", {a, b}, [](std::span<const T> gy, std::span<std::span<T>> gin) {
        for (auto& g : gin)
            if (!g.empty())
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i];
    });
    return out;
}

/// x[N,C,H,W] scaled per (n, c) by w[N,C,1,1].
template <Scalar T>
Tensor<T> multiply_channelwise(const Tensor<T>& x, const Tensor<T>& w) {
    detail::require_rank(x, 4, "multiply_channelwise");
    detail::require(w.defined() && w.shape() == Shape{x.dim(0), x.dim(1), 1, 1},
                    "multiply_channelwise: weight shape " + (w.defined() ? to_string(w.shape()) : std::string()) +
                        " incompatible with " + to_string(x.shape()));
    const std::int64_t NC = x.dim(0) * x.dim(1), S = x.dim(2) * x.dim(3);
    Tensor<T> out(x.shape());
    const T* xs = x.data().data();
    const T* ws = w.data().data();
    T* y = out.data().data();
    for (std::int64_t nc = 0; nc < NC; ++nc)
        for (std::int64_t i = 0; i < S; ++i) y[nc * S + i] = xs[nc * S + i] * ws[nc];
    record(out, "multiply_channelwise", {x, w}, [x, w, NC, S](std::span<const T> gy, std::span<std::span<T>> gin) {
        const T* xs = x.data().data();
        const T* ws = w.data().data();
        for (std::int64_t nc = 0; nc < NC; ++nc) {
            T s = 0;
            for (std::int64_t i = 0; i < S; ++i) {
                if (!gin[0].empty()) gin[0][nc * S + i] += gy[nc * S + i] * ws[nc];
                s += gy[nc * S + i] * xs[nc * S + i];
            }
            if (!gin[1].empty()) gin[1][nc] += s;
        }
    });
    return out;
}

template <Scalar T>
Tensor<T> max_pool2d(const Tensor<T>& input, std::int64_t kernel = 3, std::int64_t stride = 2,
                     std::int64_t padding = 1) {
    detail::require_rank(input, 4, "max_pool2d");
    const std::int64_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    detail::require(H >= 1 && W >= 1 && kernel > 0 && stride > 0 && padding >= 0 && padding < kernel,
                    "max_pool2d: degenerate input " + to_string(input.shape()));
    const std::int64_t Ho = (H + 2 * padding - kernel) / stride + 1;
    const std::int64_t Wo = (W + 2 * padding - kernel) / stride + 1;
    detail::require(Ho > 0 && Wo > 0, "max_pool2d: non-positive output extent");
    Tensor<T> out(Shape{N, C, Ho, Wo});
    std::vector<std::int64_t> argmax(static_cast<std::size_t>(out.numel()));
    const T* x = input.data().data();
    T* y = out.data().data();
    for (std::int64_t nc = 0; nc < N * C; ++nc)
        for (std::int64_t oy = 0; oy < Ho; ++oy)
            for (std::int64_t ox = 0; ox < Wo; ++ox) {
                T best = -std::numeric_limits<T>::infinity();
                std::int64_t where = -1;
                for (std::int64_t ky = 0; ky < kernel; ++ky) {
                    const std::int64_t iy = oy * stride - padding + ky;
                    if (iy < 0 || iy >= H) continue;
                    for (std::int64_t kx = 0; kx < kernel; ++kx) {
                        const std::int64_t ix = ox * stride - padding + kx;
                        if (ix < 0 || ix >= W) continue;
                        const std::int64_t idx = (nc * H + iy) * W + ix;
                        if (where < 0 || x[idx] > best) {
                            best = x[idx];
                            where = idx;
                        }
                    }
                }
                const std::int64_t o = (nc * Ho + oy) * Wo + ox;
                y[o] = best;
                argmax[static_cast<std::size_t>(o)] = where;
            }
    record(out, "max_pool2d", {input}, [argmax = std::move(argmax)](std::span<const T> gy, std::span<std::span<T>> gin) {
        for (std::size_t o = 0; o < argmax.size(); ++o) gin[0][static_cast<std::size_t>(argmax[o])] += gy[o];
    });
    return out;
}

template <Scalar T>
Tensor<T> global_avg_pool(const Tensor<T>& input) {
    detail::require_rank(input, 4, "global_avg_pool");
    const std::int64_t N = input.dim(0), C = input.dim(1), S = input.dim(2) * input.dim(3);
    detail::require(S > 0, "global_avg_pool: empty spatial extent");
    Tensor<T> out(Shape{N, C, 1, 1});
    const T* x = input.data().data();
    for (std::int64_t nc = 0; nc < N * C; ++nc) {
        double s = 0;
        for (std::int64_t i = 0; i < S; ++i) s += x[nc * S + i];
        out[static_cast<std::size_t>(nc)] = static_cast<T>(s / static_cast<double>(S));
    }
    record(out, "global_avg_pool", {input}, [N, C, S](std::span<const T> gy, std::span<std::span<T>> gin) {
        const T inv = T(1) / static_cast<T>(S);
        for (std::int64_t nc = 0; nc < N * C; ++nc)
            for (std::int64_t i = 0; i < S; ++i) gin[0][nc * S + i] += gy[nc] * inv;
    });
    return out;
}

/// Concatenates along channels in argument order.
template <Scalar T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& inputs) {
    detail::require(!inputs.empty(), "concat_channels: no inputs");
    for (const auto& t : inputs) detail::require_rank(t, 4, "concat_channels");
    const std::int64_t N = inputs[0].dim(0), H = inputs[0].dim(2), W = inputs[0].dim(3), S = H * W;
    std::int64_t C = 0;
    std::vector<std::int64_t> offsets;
    for (const auto& t : inputs) {
        detail::require(t.dim(0) == N && t.dim(2) == H && t.dim(3) == W,
                        "concat_channels: spatial mismatch " + to_string(t.shape()) + " vs " +
                            to_string(inputs[0].shape()));
        offsets.push_back(C);
        C += t.dim(1);
    }
    Tensor<T> out(Shape{N, C, H, W});
    T* y = out.data().data();
    std::vector<std::int64_t> widths;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        const std::int64_t Ck = inputs[k].dim(1);
        widths.push_back(Ck);
        const T* x = inputs[k].data().data();
        for (std::int64_t n = 0; n < N; ++n)
            std::copy(x + n * Ck * S, x + (n + 1) * Ck * S, y + (n * C + offsets[k]) * S);
    }
    record(out, "concat_channels", inputs,
           [offsets, widths, N, C, S](std::span<const T> gy, std::span<std::span<T>> gin) {
               for (std::size_t k = 0; k < gin.size(); ++k) {
                   if (gin[k].empty()) continue;
                   const std::int64_t Ck = widths[k];
                   for (std::int64_t n = 0; n < N; ++n)
                       for (std::int64_t i = 0; i < Ck * S; ++i)
                           gin[k][n * Ck * S + i] += gy[(n * C + offsets[k]) * S + i];
               }
           });
    return out;
}

template <Scalar T>
Tensor<T> slice_channels(const Tensor<T>& input, std::int64_t start, std::int64_t count) {
    detail::require_rank(input, 4, "slice_channels");
    const std::int64_t N = input.dim(0), C = input.dim(1), S = input.dim(2) * input.dim(3);
    detail::require(start >= 0 && count >= 0 && start + count <= C, "slice_channels: range out of bounds");
    Tensor<T> out(Shape{N, count, input.dim(2), input.dim(3)});
    const T* x = input.data().data();
    for (std::int64_t n = 0; n < N; ++n)
        std::copy(x + (n * C + start) * S, x + (n * C + start + count) * S, out.data().data() + n * count * S);
    record(out, "slice_channels", {input}, [N, C, S, start, count](std::span<const T> gy, std::span<std::span<T>> gin) {
        for (std::int64_t n = 0; n < N; ++n)
            for (std::int64_t i = 0; i < count * S; ++i) gin[0][(n * C + start) * S + i] += gy[n * count * S + i];
    });
    return out;
}

/// Same data, new shape; gradient passes through unchanged.
template <Scalar T>
Tensor<T> reshape(const Tensor<T>& input, Shape shape) {
    detail::require(numel(shape) == input.numel(),
                    "reshape: " + to_string(input.shape()) + " -> " + to_string(shape) + " changes element count");
    Tensor<T> out = input.reshaped(std::move(shape));
    record(out, "reshape", {input}, [](std::span<const T> gy, std::span<std::span<T>> gin) {
        for (std::size_t i = 0; i < gy.size(); ++i) gin[0][i] += gy[i];
    });
    return out;
}

/// One shared odd-length kernel slid across the channel axis of v[N,C], zero padded.
template <Scalar T>
Tensor<T> conv1d_channels(const Tensor<T>& v, const Tensor<T>& weight) {
    detail::require_rank(v, 2, "conv1d_channels");
    detail::require_rank(weight, 1, "conv1d_channels");
    const std::int64_t K = weight.numel();
    detail::require(K % 2 == 1, "conv1d_channels: kernel size must be odd, got " + std::to_string(K));
    const std::int64_t N = v.dim(0), C = v.dim(1), r = (K - 1) / 2;
    Tensor<T> out(Shape{N, C});
    const T* x = v.data().data();
    const T* w = weight.data().data();
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t c = 0; c < C; ++c) {
            T s = 0;
            for (std::int64_t j = 0; j < K; ++j) {
                const std::int64_t src = c + j - r;
                if (src >= 0 && src < C) s += w[j] * x[n * C + src];
            }
            out[static_cast<std::size_t>(n * C + c)] = s;
        }
    record(out, "conv1d_channels", {v, weight},
           [v, weight, N, C, K, r](std::span<const T> gy, std::span<std::span<T>> gin) {
               const T* x = v.data().data();
               const T* w = weight.data().data();
               for (std::int64_t n = 0; n < N; ++n)
                   for (std::int64_t c = 0; c < C; ++c)
                       for (std::int64_t j = 0; j < K; ++j) {
                           const std::int64_t src = c + j - r;
                           if (src < 0 || src >= C) continue;
                           const T g = gy[n * C + c];
                           if (!gin[0].empty()) gin[0][n * C + src] += g * w[j];
                           if (!gin[1].empty()) gin[1][j] += g * x[n * C + src];
                       }
           });
    return out;
}

/// y[N,K] = x[N,D] * weight[D,K] + bias[K]
template <Scalar T>
Tensor<T> fully_connected(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias = {}) {
    detail::require_rank(x, 2, "fully_connected");
    detail::require_rank(weight, 2, "fully_connected");
    const std::int64_t N = x.dim(0), D = x.dim(1), K = weight.dim(1);
    detail::require(weight.dim(0) == D, "fully_connected: input width " + std::to_string(D) +
                                            " != weight rows " + std::to_string(weight.dim(0)));
    if (bias.defined()) detail::require(bias.shape() == Shape{K}, "fully_connected: bias shape mismatch");
    Tensor<T> out(Shape{N, K});
    gemm::nn(N, K, D, x.data().data(), weight.data().data(), out.data().data(), false);
    if (bias.defined())
        for (std::int64_t n = 0; n < N; ++n)
            for (std::int64_t k = 0; k < K; ++k) out[static_cast<std::size_t>(n * K + k)] += bias[static_cast<std::size_t>(k)];
    detail::check_finite(out, "fully_connected");
    std::vector<Tensor<T>> inputs{x, weight};
    if (bias.defined()) inputs.push_back(bias);
    record(out, "fully_connected", inputs, [x, weight, N, D, K](std::span<const T> gy, std::span<std::span<T>> gin) {
        if (!gin[0].empty()) gemm::nt(N, D, K, gy.data(), weight.data().data(), gin[0].data(), true);
        if (!gin[1].empty()) gemm::tn(D, K, N, x.data().data(), gy.data(), gin[1].data(), true);
        if (gin.size() > 2 && !gin[2].empty())
            for (std::int64_t n = 0; n < N; ++n)
                for (std::int64_t k = 0; k < K; ++k) gin[2][k] += gy[n * K + k];
    });
    return out;
}

template <Scalar T>
Tensor<T> sum(const Tensor<T>& input) {
    double s = 0;
    for (T v : input.data()) s += v;
    Tensor<T> out(Shape{}, static_cast<T>(s));
    record(out, "sum", {input}, [](std::span<const T> gy, std::span<std::span<T>> gin) {
        for (auto& g : gin[0]) g += gy[0];
    });
    return out;
}

template <Scalar T>
struct LossResult {
    Tensor<T> loss;   // scalar, recorded
    Tensor<T> probs;  // [N, K], detached
};

/// Mean negative log-likelihood of integer labels under softmax(logits).
template <Scalar T>
LossResult<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const std::int64_t> labels) {
    detail::require_rank(logits, 2, "softmax_cross_entropy");
    const std::int64_t N = logits.dim(0), K = logits.dim(1);
    detail::require(static_cast<std::int64_t>(labels.size()) == N, "softmax_cross_entropy: label count mismatch");
    for (auto l : labels)
        if (l < 0 || l >= K)
            throw Error("softmax_cross_entropy: label " + std::to_string(l) + " outside [0, " + std::to_string(K) + ")");
    Tensor<T> probs(Shape{N, K});
    const T* z = logits.data().data();
    double total = 0;
    for (std::int64_t n = 0; n < N; ++n) {
        const T* row = z + n * K;
        T mx = row[0];
        for (std::int64_t k = 1; k < K; ++k) mx = std::max(mx, row[k]);
        double denom = 0;
        for (std::int64_t k = 0; k < K; ++k) denom += std::exp(static_cast<double>(row[k] - mx));
        const double log_denom = std::log(denom);
        for (std::int64_t k = 0; k < K; ++k)
            probs[static_cast<std::size_t>(n * K + k)] =
                static_cast<T>(std::exp(static_cast<double>(row[k] - mx) - log_denom));
        total += log_denom - static_cast<double>(row[labels[static_cast<std::size_t>(n)]] - mx);
    }
    Tensor<T> loss(Shape{}, static_cast<T>(total / static_cast<double>(N)));
    detail::check_finite(loss, "softmax_cross_entropy");
    record(loss, "softmax_cross_entropy", {logits},
           [probs, labels = std::vector<std::int64_t>(labels.begin(), labels.end()), N, K](
               std::span<const T> gy, std::span<std::span<T>> gin) {
               const T scale = gy[0] / static_cast<T>(N);
               for (std::int64_t n = 0; n < N; ++n)
                   for (std::int64_t k = 0; k < K; ++k) {
                       const T onehot = labels[static_cast<std::size_t>(n)] == k ? T(1) : T(0);
                       gin[0][n * K + k] += scale * (probs[static_cast<std::size_t>(n * K + k)] - onehot);
                   }
           });
    return {loss, probs};
}

}  // namespace treenet
