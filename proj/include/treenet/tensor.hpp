#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

namespace treenet {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Thrown when operand shapes, channel counts or groupings do not line up.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// Thrown for misuse of the recorded graph (non-scalar root, replayed backward).
class GraphError : public Error {
public:
    using Error::Error;
};

using Shape = std::vector<std::int64_t>;

inline std::int64_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::int64_t{1}, std::multiplies<>{});
}

inline std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

template <class T>
inline constexpr DType dtype_of = std::is_same_v<T, double> ? DType::f64 : DType::f32;

template <class T>
concept Scalar = std::is_same_v<T, float> || std::is_same_v<T, double>;

template <Scalar T>
struct Node;

template <Scalar T>
struct TensorImpl {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;  // empty until backward touches it
    bool requires_grad = false;
    std::shared_ptr<Node<T>> grad_fn;

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    }
};

/// Handle to a dense row-major array. Copies share storage; use clone() for a deep copy.
template <Scalar T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;

    explicit Tensor(Shape shape, T fill = T(0)) : impl_(std::make_shared<TensorImpl<T>>()) {
        validate(shape);
        impl_->data.assign(static_cast<std::size_t>(treenet::numel(shape)), fill);
        impl_->shape = std::move(shape);
    }

    Tensor(Shape shape, std::vector<T> values) : impl_(std::make_shared<TensorImpl<T>>()) {
        validate(shape);
        if (static_cast<std::int64_t>(values.size()) != treenet::numel(shape))
            throw ShapeError("tensor data length " + std::to_string(values.size()) +
                             " does not match shape " + to_string(shape));
        impl_->shape = std::move(shape);
        impl_->data = std::move(values);
    }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T(0)); }

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    std::size_t rank() const { return impl_->shape.size(); }
    std::int64_t dim(std::size_t i) const { return impl_->shape.at(i); }
    std::int64_t numel() const { return static_cast<std::int64_t>(impl_->data.size()); }

    std::span<T> data() { return impl_->data; }
    std::span<const T> data() const { return impl_->data; }
    T& operator[](std::size_t i) { return impl_->data[i]; }
    const T& operator[](std::size_t i) const { return impl_->data[i]; }

    T item() const {
        if (numel() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
        return impl_->data[0];
    }

    bool requires_grad() const { return impl_->requires_grad; }
    Tensor& set_requires_grad(bool on = true) {
        impl_->requires_grad = on;
        return *this;
    }

    bool has_grad() const { return impl_->grad.size() == impl_->data.size() && !impl_->data.empty(); }
    std::span<T> grad() {
        impl_->ensure_grad();
        return impl_->grad;
    }
    std::span<const T> grad() const { return impl_->grad; }
    void zero_grad() { std::fill(impl_->grad.begin(), impl_->grad.end(), T(0)); }

    Tensor clone() const {
        Tensor out(shape(), impl_->data);
        out.impl_->requires_grad = impl_->requires_grad;
        return out;
    }

    /// Detached copy with a new shape of equal element count.
    Tensor reshaped(Shape shape) const { return Tensor(std::move(shape), impl_->data); }

    const std::shared_ptr<TensorImpl<T>>& impl() const { return impl_; }
    explicit Tensor(std::shared_ptr<TensorImpl<T>> impl) : impl_(std::move(impl)) {}

private:
    static void validate(const Shape& shape) {
        if (shape.size() > 4) throw ShapeError("tensor rank above 4: " + to_string(shape));
        for (auto d : shape)
            if (d < 0) throw ShapeError("negative extent in shape " + to_string(shape));
    }

    std::shared_ptr<TensorImpl<T>> impl_;
};

}  // namespace treenet
