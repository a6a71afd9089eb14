#include "evax/tensor.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

namespace evax {

const char *category_name(ErrorCategory c) {
    switch (c) {
        case ErrorCategory::usage:
            return "usage";
        case ErrorCategory::config:
            return "config";
        case ErrorCategory::data:
            return "data";
        case ErrorCategory::numerical:
            return "numerical";
    }
    return "unknown";
}

std::int64_t shape_numel(const Shape &shape) {
    std::int64_t n = 1;
    for (auto e : shape) n *= e;
    return n;
}

std::string shape_str(const Shape &shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, T fill) : shape_(std::move(shape)) {
    for (auto e : shape_) {
        if (e <= 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape_));
    }
    data_.assign(static_cast<std::size_t>(shape_numel(shape_)), fill);
}

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, std::vector<T> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
    for (auto e : shape_) {
        if (e <= 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape_));
    }
    if (shape_numel(shape_) != static_cast<std::int64_t>(data_.size())) {
        throw ShapeError("shape " + shape_str(shape_) + " does not match " +
                         std::to_string(data_.size()) + " values");
    }
}

template <typename T>
BasicTensor<T> BasicTensor<T>::from(std::initializer_list<T> values) {
    std::vector<T> v(values);
    auto n = static_cast<std::int64_t>(v.size());
    return BasicTensor(Shape{n}, std::move(v));
}

template <typename T>
std::int64_t BasicTensor<T>::dim(int axis) const {
    if (axis < 0) axis += rank();
    if (axis < 0 || axis >= rank()) {
        throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape_));
    }
    return shape_[static_cast<std::size_t>(axis)];
}

template <typename T>
T BasicTensor<T>::item() const {
    if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape_));
    return data_[0];
}

template <typename T>
BasicTensor<T> BasicTensor<T>::reshaped(Shape shape) const {
    if (shape_numel(shape) != numel()) {
        throw ShapeError("reshape " + shape_str(shape_) + " -> " + shape_str(shape));
    }
    return BasicTensor(std::move(shape), data_);
}

template <typename T>
void BasicTensor<T>::fill(T v) {
    std::fill(data_.begin(), data_.end(), v);
}

template <typename T>
bool BasicTensor<T>::all_finite() const noexcept {
    for (T v : data_) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

template <typename T>
void require_finite(const BasicTensor<T> &t, const char *where) {
    if (!t.all_finite()) {
        throw NumericalError(std::string("non-finite value produced by ") + where + " (shape " +
                             shape_str(t.shape()) + ")");
    }
}

bool bitwise_equal(const Tensor &a, const Tensor &b) {
    if (a.shape() != b.shape()) return false;
    return std::memcmp(a.data(), b.data(), sizeof(float) * static_cast<std::size_t>(a.numel())) == 0;
}

template class BasicTensor<float>;
template class BasicTensor<double>;
template void require_finite(const BasicTensor<float> &, const char *);
template void require_finite(const BasicTensor<double> &, const char *);

}  // namespace evax
