#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "evax/error.hpp"

namespace evax {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape &shape);
std::string shape_str(const Shape &shape);

// Dense row-major array. T is float for everything that trains or ships;
// double instantiations exist so finite-difference oracles can evaluate the
// same kernels without f32 rounding noise.
template <typename T>
class BasicTensor {
   public:
    using value_type = T;

    BasicTensor() = default;
    explicit BasicTensor(Shape shape, T fill = T(0));
    BasicTensor(Shape shape, std::vector<T> data);

    static BasicTensor scalar(T v) { return BasicTensor(Shape{1}, std::vector<T>{v}); }
    static BasicTensor from(std::initializer_list<T> values);

    const Shape &shape() const noexcept { return shape_; }
    std::int64_t dim(int axis) const;
    int rank() const noexcept { return static_cast<int>(shape_.size()); }
    std::int64_t numel() const noexcept { return static_cast<std::int64_t>(data_.size()); }
    bool empty() const noexcept { return data_.empty(); }

    T *data() noexcept { return data_.data(); }
    const T *data() const noexcept { return data_.data(); }
    std::span<T> values() noexcept { return data_; }
    std::span<const T> values() const noexcept { return data_; }
    std::vector<T> &storage() noexcept { return data_; }
    const std::vector<T> &storage() const noexcept { return data_; }

    T &operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
    const T &operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

    // 2-D and 3-D element access; no bounds checks.
    T &at(std::int64_t i, std::int64_t j) { return data_[i * shape_[1] + j]; }
    const T &at(std::int64_t i, std::int64_t j) const { return data_[i * shape_[1] + j]; }
    T &at(std::int64_t c, std::int64_t i, std::int64_t j) {
        return data_[(c * shape_[1] + i) * shape_[2] + j];
    }
    const T &at(std::int64_t c, std::int64_t i, std::int64_t j) const {
        return data_[(c * shape_[1] + i) * shape_[2] + j];
    }

    T item() const;
    BasicTensor reshaped(Shape shape) const;
    void fill(T v);
    bool all_finite() const noexcept;

    template <typename U>
    BasicTensor<U> cast() const {
        std::vector<U> out(data_.begin(), data_.end());
        return BasicTensor<U>(shape_, std::move(out));
    }

    friend bool operator==(const BasicTensor &a, const BasicTensor &b) = default;

   private:
    Shape shape_;
    std::vector<T> data_;
};

using Tensor = BasicTensor<float>;
using TensorD = BasicTensor<double>;

extern template class BasicTensor<float>;
extern template class BasicTensor<double>;

// Throws NumericalError naming `where` if any value is NaN/Inf.
template <typename T>
void require_finite(const BasicTensor<T> &t, const char *where);

// Bitwise comparison of payloads (distinguishes -0.0 from 0.0 and NaN payloads).
bool bitwise_equal(const Tensor &a, const Tensor &b);

}  // namespace evax
