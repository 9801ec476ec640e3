#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "xqnet/errors.hpp"

namespace xqnet {

/// Extents of a rank-4 tensor in N, C, H, W order.
struct Shape {
    std::array<std::size_t, 4> dims{0, 0, 0, 0};

    Shape() = default;
    Shape(std::size_t n, std::size_t c, std::size_t h, std::size_t w) : dims{n, c, h, w} {}

    std::size_t n() const noexcept { return dims[0]; }
    std::size_t c() const noexcept { return dims[1]; }
    std::size_t h() const noexcept { return dims[2]; }
    std::size_t w() const noexcept { return dims[3]; }
    std::size_t numel() const noexcept { return dims[0] * dims[1] * dims[2] * dims[3]; }

    std::string to_string() const;

    friend bool operator==(const Shape&, const Shape&) = default;
};

/// True when a and b can be joined along the channel axis.
inline bool concat_compatible(const Shape& a, const Shape& b) noexcept {
    return a.n() == b.n() && a.h() == b.h() && a.w() == b.w();
}

/// Dense N,C,H,W row-major array. Storage is float for the network;
/// the double instantiation backs the finite-difference reference path.
template <class T>
class BasicTensor {
public:
    using value_type = T;

    BasicTensor() = default;
    explicit BasicTensor(Shape shape, T fill = T(0));
    BasicTensor(Shape shape, std::vector<T> values);

    const Shape& shape() const noexcept { return shape_; }
    std::size_t size() const noexcept { return data_.size(); }

    std::span<T> data() noexcept { return data_; }
    std::span<const T> data() const noexcept { return data_; }

    T& operator[](std::size_t i) noexcept { return data_[i]; }
    const T& operator[](std::size_t i) const noexcept { return data_[i]; }

    std::size_t offset(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const noexcept {
        return ((n * shape_.c() + c) * shape_.h() + h) * shape_.w() + w;
    }
    T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) noexcept {
        return data_[offset(n, c, h, w)];
    }
    const T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const noexcept {
        return data_[offset(n, c, h, w)];
    }

    void fill(T value);
    bool all_finite() const noexcept;

    template <class U>
    BasicTensor<U> cast() const {
        BasicTensor<U> out(shape_);
        for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
        return out;
    }

    /// Bitwise equality of shape and contents.
    bool identical(const BasicTensor& other) const noexcept;

private:
    Shape shape_;
    std::vector<T> data_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

template <class T>
BasicTensor<T> concat_channels(const BasicTensor<T>& a, const BasicTensor<T>& b);

/// Channels [begin, begin + count) of x.
template <class T>
BasicTensor<T> slice_channels(const BasicTensor<T>& x, std::size_t begin, std::size_t count);

template <class T>
BasicTensor<T> add_elementwise(const BasicTensor<T>& a, const BasicTensor<T>& b);

/// a += b, shapes must match.
template <class T>
void accumulate(BasicTensor<T>& a, const BasicTensor<T>& b);

/// Samples [begin, begin + count) along the batch axis.
template <class T>
BasicTensor<T> slice_batch(const BasicTensor<T>& x, std::size_t begin, std::size_t count);

template <class T>
BasicTensor<T> concat_batch(std::span<const BasicTensor<T>> parts);

}  // namespace xqnet
