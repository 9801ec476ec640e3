#pragma once

// Independent reference implementations used only by tests. They follow
// the textbook definitions with plain nested loops and 64-bit accumulation
// and share no code with the library kernels.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <random>
#include <vector>

#include "xqnet/tensor.hpp"

namespace oracle {

using xqnet::Shape;
using xqnet::Tensor;

inline Tensor random_tensor(Shape s, std::mt19937& rng, float lo = -1.0f, float hi = 1.0f) {
    std::uniform_real_distribution<float> dist(lo, hi);
    Tensor t(s);
    for (float& v : t.data()) v = dist(rng);
    return t;
}

/// Direct cross-correlation with zero padding: six nested loops over
/// (n, co, oy, ox) x (ci in group, ky, kx).
inline Tensor naive_conv2d(const Tensor& x, const Tensor& w, std::size_t stride, std::size_t pad,
                           std::size_t groups) {
    const long N = static_cast<long>(x.shape().n()), C = static_cast<long>(x.shape().c());
    const long H = static_cast<long>(x.shape().h()), W = static_cast<long>(x.shape().w());
    const long CO = static_cast<long>(w.shape().n()), CIG = static_cast<long>(w.shape().c());
    const long KH = static_cast<long>(w.shape().h()), KW = static_cast<long>(w.shape().w());
    const long S = static_cast<long>(stride), P = static_cast<long>(pad);
    const long OH = (H + 2 * P - KH) / S + 1, OW = (W + 2 * P - KW) / S + 1;
    const long COG = CO / static_cast<long>(groups);
    (void)C;
    Tensor out(Shape(static_cast<std::size_t>(N), static_cast<std::size_t>(CO), static_cast<std::size_t>(OH),
                     static_cast<std::size_t>(OW)));
    for (long n = 0; n < N; ++n)
        for (long co = 0; co < CO; ++co)
            for (long oy = 0; oy < OH; ++oy)
                for (long ox = 0; ox < OW; ++ox) {
                    double acc = 0.0;
                    const long g = co / COG;
                    for (long cig = 0; cig < CIG; ++cig)
                        for (long ky = 0; ky < KH; ++ky)
                            for (long kx = 0; kx < KW; ++kx) {
                                const long iy = oy * S - P + ky, ix = ox * S - P + kx;
                                if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                                acc += static_cast<double>(w.at(co, cig, ky, kx)) *
                                       x.at(n, g * CIG + cig, iy, ix);
                            }
                    out.at(n, co, oy, ox) = static_cast<float>(acc);
                }
    return out;
}

enum class Pool { Max, Min, Avg };

inline Tensor naive_pool2d(const Tensor& x, std::size_t k, std::size_t stride, Pool mode) {
    const Shape& s = x.shape();
    const std::size_t oh = (s.h() - k) / stride + 1, ow = (s.w() - k) / stride + 1;
    Tensor out(Shape(s.n(), s.c(), oh, ow));
    for (std::size_t n = 0; n < s.n(); ++n)
        for (std::size_t c = 0; c < s.c(); ++c)
            for (std::size_t oy = 0; oy < oh; ++oy)
                for (std::size_t ox = 0; ox < ow; ++ox) {
                    std::vector<float> window;
                    for (std::size_t ky = 0; ky < k; ++ky)
                        for (std::size_t kx = 0; kx < k; ++kx)
                            window.push_back(x.at(n, c, oy * stride + ky, ox * stride + kx));
                    float v = 0.0f;
                    if (mode == Pool::Max) v = *std::max_element(window.begin(), window.end());
                    if (mode == Pool::Min) v = *std::min_element(window.begin(), window.end());
                    if (mode == Pool::Avg) {
                        double sum = 0.0;
                        for (float e : window) sum += e;
                        v = static_cast<float>(sum / static_cast<double>(window.size()));
                    }
                    out.at(n, c, oy, ox) = v;
                }
    return out;
}

/// Per-channel mean and biased variance over N, H, W by two passes.
inline void channel_moments(const Tensor& x, std::vector<double>& mean, std::vector<double>& var) {
    const Shape& s = x.shape();
    mean.assign(s.c(), 0.0);
    var.assign(s.c(), 0.0);
    const double count = static_cast<double>(s.n() * s.h() * s.w());
    for (std::size_t c = 0; c < s.c(); ++c) {
        for (std::size_t n = 0; n < s.n(); ++n)
            for (std::size_t y = 0; y < s.h(); ++y)
                for (std::size_t z = 0; z < s.w(); ++z) mean[c] += x.at(n, c, y, z);
        mean[c] /= count;
        for (std::size_t n = 0; n < s.n(); ++n)
            for (std::size_t y = 0; y < s.h(); ++y)
                for (std::size_t z = 0; z < s.w(); ++z) {
                    const double d = x.at(n, c, y, z) - mean[c];
                    var[c] += d * d;
                }
        var[c] /= count;
    }
}

/// max |a - b| / max(|b|, 1) over all elements.
inline double max_rel_diff(const Tensor& a, const Tensor& b) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = std::abs(static_cast<double>(a[i]) - b[i]);
        worst = std::max(worst, d / std::max(std::abs(static_cast<double>(b[i])), 1.0));
    }
    return worst;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        worst = std::max(worst, std::abs(static_cast<double>(a[i]) - b[i]));
    }
    return worst;
}

}  // namespace oracle
