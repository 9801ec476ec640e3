#include "xqnet/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace xqnet {

std::string Shape::to_string() const {
    return "(" + std::to_string(dims[0]) + "," + std::to_string(dims[1]) + "," +
           std::to_string(dims[2]) + "," + std::to_string(dims[3]) + ")";
}

template <class T>
BasicTensor<T>::BasicTensor(Shape shape, T fill) : shape_(shape), data_(shape.numel(), fill) {}

template <class T>
BasicTensor<T>::BasicTensor(Shape shape, std::vector<T> values) : shape_(shape), data_(std::move(values)) {
    if (data_.size() != shape_.numel()) {
        throw ShapeError("tensor construction: buffer length " + std::to_string(data_.size()) +
                         " does not match element count " + std::to_string(shape_.numel()) + " of " +
                         shape_.to_string());
    }
}

template <class T>
void BasicTensor<T>::fill(T value) {
    std::fill(data_.begin(), data_.end(), value);
}

template <class T>
bool BasicTensor<T>::all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
}

template <class T>
bool BasicTensor<T>::identical(const BasicTensor& other) const noexcept {
    return shape_ == other.shape_ &&
           (data_.empty() || std::memcmp(data_.data(), other.data_.data(), data_.size() * sizeof(T)) == 0);
}

template <class T>
BasicTensor<T> concat_channels(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (!concat_compatible(sa, sb)) {
        throw ShapeError("concat_channels: incompatible shapes " + sa.to_string() + " and " + sb.to_string());
    }
    BasicTensor<T> out(Shape(sa.n(), sa.c() + sb.c(), sa.h(), sa.w()));
    const std::size_t plane = sa.h() * sa.w();
    const std::size_t na = sa.c() * plane;
    const std::size_t nb = sb.c() * plane;
    auto src_a = a.data();
    auto src_b = b.data();
    auto dst = out.data();
    for (std::size_t n = 0; n < sa.n(); ++n) {
        std::copy_n(src_a.begin() + n * na, na, dst.begin() + n * (na + nb));
        std::copy_n(src_b.begin() + n * nb, nb, dst.begin() + n * (na + nb) + na);
    }
    return out;
}

template <class T>
BasicTensor<T> slice_channels(const BasicTensor<T>& x, std::size_t begin, std::size_t count) {
    const Shape& s = x.shape();
    if (begin + count > s.c()) {
        throw ShapeError("slice_channels: range [" + std::to_string(begin) + "," + std::to_string(begin + count) +
                         ") exceeds " + s.to_string());
    }
    BasicTensor<T> out(Shape(s.n(), count, s.h(), s.w()));
    const std::size_t plane = s.h() * s.w();
    for (std::size_t n = 0; n < s.n(); ++n) {
        std::copy_n(x.data().begin() + (n * s.c() + begin) * plane, count * plane,
                    out.data().begin() + n * count * plane);
    }
    return out;
}

template <class T>
BasicTensor<T> add_elementwise(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError("add_elementwise: shape mismatch " + a.shape().to_string() + " vs " + b.shape().to_string());
    }
    BasicTensor<T> out(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
    return out;
}

template <class T>
void accumulate(BasicTensor<T>& a, const BasicTensor<T>& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError("accumulate: shape mismatch " + a.shape().to_string() + " vs " + b.shape().to_string());
    }
    for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
}

template <class T>
BasicTensor<T> slice_batch(const BasicTensor<T>& x, std::size_t begin, std::size_t count) {
    const Shape& s = x.shape();
    if (begin + count > s.n()) {
        throw ShapeError("slice_batch: range exceeds batch of " + s.to_string());
    }
    const std::size_t per = s.c() * s.h() * s.w();
    BasicTensor<T> out(Shape(count, s.c(), s.h(), s.w()));
    std::copy_n(x.data().begin() + begin * per, count * per, out.data().begin());
    return out;
}

template <class T>
BasicTensor<T> concat_batch(std::span<const BasicTensor<T>> parts) {
    if (parts.empty()) return {};
    Shape s = parts.front().shape();
    std::size_t total = 0;
    for (const auto& p : parts) {
        const Shape& ps = p.shape();
        if (ps.c() != s.c() || ps.h() != s.h() || ps.w() != s.w()) {
            throw ShapeError("concat_batch: incompatible shapes " + s.to_string() + " and " + ps.to_string());
        }
        total += ps.n();
    }
    BasicTensor<T> out(Shape(total, s.c(), s.h(), s.w()));
    auto dst = out.data().begin();
    for (const auto& p : parts) dst = std::copy(p.data().begin(), p.data().end(), dst);
    return out;
}

#define XQNET_INSTANTIATE(T)                                                                     \
    template class BasicTensor<T>;                                                               \
    template BasicTensor<T> concat_channels(const BasicTensor<T>&, const BasicTensor<T>&);       \
    template BasicTensor<T> slice_channels(const BasicTensor<T>&, std::size_t, std::size_t);     \
    template BasicTensor<T> add_elementwise(const BasicTensor<T>&, const BasicTensor<T>&);       \
    template void accumulate(BasicTensor<T>&, const BasicTensor<T>&);                            \
    template BasicTensor<T> slice_batch(const BasicTensor<T>&, std::size_t, std::size_t);        \
    template BasicTensor<T> concat_batch(std::span<const BasicTensor<T>>);

XQNET_INSTANTIATE(float)
XQNET_INSTANTIATE(double)

#undef XQNET_INSTANTIATE

}  // namespace xqnet
