#include "xqnet/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace xqnet {

namespace {

void require_same(const Shape& a, const Shape& b, const char* op) {
    if (a != b) {
        throw ShapeError(std::string(op) + ": shape mismatch " + a.to_string() + " vs " + b.to_string());
    }
}

void require_vector(const Shape& s, std::size_t channels, const char* op, const char* what) {
    if (s.n() != 1 || s.c() != channels || s.h() != 1 || s.w() != 1) {
        throw ConfigError(std::string(op) + ": " + what + " has shape " + s.to_string() + ", expected (1," +
                          std::to_string(channels) + ",1,1)");
    }
}

// Range of output positions o with 0 <= o*stride - pad + k < extent.
struct Span1D {
    std::size_t lo;
    std::size_t hi;
};

Span1D valid_outputs(std::size_t out_extent, std::size_t in_extent, std::size_t stride, std::size_t pad,
                     std::size_t k) {
    // need o*stride + k >= pad  and  o*stride + k - pad <= in_extent - 1
    std::size_t lo = 0;
    if (k < pad) lo = (pad - k + stride - 1) / stride;
    std::size_t hi = 0;
    if (in_extent + pad > k) {
        hi = (in_extent - 1 + pad - k) / stride + 1;
    }
    hi = std::min(hi, out_extent);
    if (lo > hi) lo = hi;
    return {lo, hi};
}

}  // namespace

Shape conv2d_output_shape(const Shape& input, const Shape& weight, const ConvGeometry& g) {
    if (g.stride == 0 || g.groups == 0) throw ConfigError("conv2d: stride and groups must be positive");
    const std::size_t c_out = weight.n();
    const std::size_t c_in = weight.c() * g.groups;
    if (c_out % g.groups != 0) {
        throw ConfigError("conv2d: output channels " + std::to_string(c_out) + " not divisible by groups " +
                          std::to_string(g.groups));
    }
    if (input.c() != c_in) {
        throw ConfigError("conv2d: input has " + std::to_string(input.c()) + " channels, weight " +
                          weight.to_string() + " with groups " + std::to_string(g.groups) + " expects " +
                          std::to_string(c_in));
    }
    const std::size_t kh = weight.h();
    const std::size_t kw = weight.w();
    if (input.h() + 2 * g.pad < kh || input.w() + 2 * g.pad < kw) {
        throw ShapeError("conv2d: kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                         " larger than padded input " + input.to_string());
    }
    const std::size_t oh = (input.h() + 2 * g.pad - kh) / g.stride + 1;
    const std::size_t ow = (input.w() + 2 * g.pad - kw) / g.stride + 1;
    return Shape(input.n(), c_out, oh, ow);
}

template <class T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& weight, const BasicTensor<T>* bias,
                      const ConvGeometry& g) {
    const Shape out_shape = conv2d_output_shape(x.shape(), weight.shape(), g);
    const Shape& in = x.shape();
    const std::size_t c_out = out_shape.c();
    if (bias) require_vector(bias->shape(), c_out, "conv2d", "bias");

    BasicTensor<T> out(out_shape);
    const std::size_t cin_g = weight.shape().c();
    const std::size_t cout_g = c_out / g.groups;
    const std::size_t kh = weight.shape().h();
    const std::size_t kw = weight.shape().w();
    const std::size_t H = in.h(), W = in.w(), OH = out_shape.h(), OW = out_shape.w();
    const T* xp = x.data().data();
    const T* wp = weight.data().data();
    T* op = out.data().data();

    const bool pointwise = kh == 1 && kw == 1 && g.stride == 1 && g.pad == 0;
    for (std::size_t n = 0; n < in.n(); ++n) {
        for (std::size_t co = 0; co < c_out; ++co) {
            T* orow = op + (n * c_out + co) * OH * OW;
            if (bias) std::fill_n(orow, OH * OW, (*bias)[co]);
            const std::size_t grp = co / cout_g;
            for (std::size_t cig = 0; cig < cin_g; ++cig) {
                const std::size_t ci = grp * cin_g + cig;
                const T* xplane = xp + (n * in.c() + ci) * H * W;
                const T* wk = wp + (co * cin_g + cig) * kh * kw;
                if (pointwise) {
                    const T wv = wk[0];
                    for (std::size_t i = 0; i < H * W; ++i) orow[i] += wv * xplane[i];
                    continue;
                }
                for (std::size_t ky = 0; ky < kh; ++ky) {
                    const Span1D ys = valid_outputs(OH, H, g.stride, g.pad, ky);
                    for (std::size_t kx = 0; kx < kw; ++kx) {
                        const Span1D xs = valid_outputs(OW, W, g.stride, g.pad, kx);
                        const T wv = wk[ky * kw + kx];
                        for (std::size_t oy = ys.lo; oy < ys.hi; ++oy) {
                            const T* xrow = xplane + (oy * g.stride + ky - g.pad) * W;
                            T* dst = orow + oy * OW;
                            if (g.stride == 1) {
                                for (std::size_t ox = xs.lo; ox < xs.hi; ++ox) dst[ox] += wv * xrow[ox + kx - g.pad];
                            } else {
                                for (std::size_t ox = xs.lo; ox < xs.hi; ++ox) {
                                    dst[ox] += wv * xrow[ox * g.stride + kx - g.pad];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    return out;
}

template <class T>
void conv2d_backward(const BasicTensor<T>& x, const BasicTensor<T>& weight, const ConvGeometry& g,
                     const BasicTensor<T>& grad_out, BasicTensor<T>* grad_x, BasicTensor<T>* grad_weight,
                     BasicTensor<T>* grad_bias) {
    const Shape out_shape = conv2d_output_shape(x.shape(), weight.shape(), g);
    require_same(grad_out.shape(), out_shape, "conv2d_backward");
    if (grad_x) require_same(grad_x->shape(), x.shape(), "conv2d_backward");
    if (grad_weight) require_same(grad_weight->shape(), weight.shape(), "conv2d_backward");

    const Shape& in = x.shape();
    const std::size_t c_out = out_shape.c();
    if (grad_bias) require_vector(grad_bias->shape(), c_out, "conv2d_backward", "bias gradient");
    const std::size_t cin_g = weight.shape().c();
    const std::size_t cout_g = c_out / g.groups;
    const std::size_t kh = weight.shape().h();
    const std::size_t kw = weight.shape().w();
    const std::size_t H = in.h(), W = in.w(), OH = out_shape.h(), OW = out_shape.w();
    const T* xp = x.data().data();
    const T* wp = weight.data().data();
    const T* gp = grad_out.data().data();
    T* gxp = grad_x ? grad_x->data().data() : nullptr;
    T* gwp = grad_weight ? grad_weight->data().data() : nullptr;

    for (std::size_t n = 0; n < in.n(); ++n) {
        for (std::size_t co = 0; co < c_out; ++co) {
            const T* grow = gp + (n * c_out + co) * OH * OW;
            if (grad_bias) {
                T s = 0;
                for (std::size_t i = 0; i < OH * OW; ++i) s += grow[i];
                (*grad_bias)[co] += s;
            }
            const std::size_t grp = co / cout_g;
            for (std::size_t cig = 0; cig < cin_g; ++cig) {
                const std::size_t ci = grp * cin_g + cig;
                const std::size_t plane = (n * in.c() + ci) * H * W;
                const std::size_t wbase = (co * cin_g + cig) * kh * kw;
                for (std::size_t ky = 0; ky < kh; ++ky) {
                    const Span1D ys = valid_outputs(OH, H, g.stride, g.pad, ky);
                    for (std::size_t kx = 0; kx < kw; ++kx) {
                        const Span1D xs = valid_outputs(OW, W, g.stride, g.pad, kx);
                        const T wv = wp[wbase + ky * kw + kx];
                        T wacc = 0;
                        for (std::size_t oy = ys.lo; oy < ys.hi; ++oy) {
                            const std::size_t row = plane + (oy * g.stride + ky - g.pad) * W;
                            const T* gsrc = grow + oy * OW;
                            for (std::size_t ox = xs.lo; ox < xs.hi; ++ox) {
                                const std::size_t idx = row + ox * g.stride + kx - g.pad;
                                if (gxp) gxp[idx] += wv * gsrc[ox];
                                wacc += gsrc[ox] * xp[idx];
                            }
                        }
                        if (gwp) gwp[wbase + ky * kw + kx] += wacc;
                    }
                }
            }
        }
    }
}

Shape pool2d_output_shape(const Shape& input, std::size_t k, std::size_t stride) {
    if (k == 0 || stride == 0) throw ConfigError("pool2d: window and stride must be positive");
    if (input.h() < k || input.w() < k) {
        throw ShapeError("pool2d: window " + std::to_string(k) + " larger than input " + input.to_string());
    }
    return Shape(input.n(), input.c(), (input.h() - k) / stride + 1, (input.w() - k) / stride + 1);
}

template <class T>
PoolResult<T> pool2d_with_source(const BasicTensor<T>& x, std::size_t k, std::size_t stride, PoolMode mode) {
    const Shape os = pool2d_output_shape(x.shape(), k, stride);
    const Shape& is = x.shape();
    PoolResult<T> r{BasicTensor<T>(os), {}};
    if (mode != PoolMode::Avg) r.source.resize(os.numel());
    const T inv = T(1) / static_cast<T>(k * k);
    std::size_t o = 0;
    for (std::size_t nc = 0; nc < is.n() * is.c(); ++nc) {
        const std::size_t plane = nc * is.h() * is.w();
        for (std::size_t oy = 0; oy < os.h(); ++oy) {
            for (std::size_t ox = 0; ox < os.w(); ++ox, ++o) {
                const std::size_t first = plane + oy * stride * is.w() + ox * stride;
                if (mode == PoolMode::Avg) {
                    T s = 0;
                    for (std::size_t ky = 0; ky < k; ++ky)
                        for (std::size_t kx = 0; kx < k; ++kx) s += x[first + ky * is.w() + kx];
                    r.out[o] = s * inv;
                    continue;
                }
                // Row-major scan with strict comparison: ties keep the lowest index.
                std::size_t best = first;
                for (std::size_t ky = 0; ky < k; ++ky) {
                    for (std::size_t kx = 0; kx < k; ++kx) {
                        const std::size_t idx = first + ky * is.w() + kx;
                        const bool better = mode == PoolMode::Max ? x[idx] > x[best] : x[idx] < x[best];
                        if (better) best = idx;
                    }
                }
                r.out[o] = x[best];
                r.source[o] = static_cast<std::uint32_t>(best);
            }
        }
    }
    return r;
}

template <class T>
void pool2d_backward(const Shape& input, std::size_t k, std::size_t stride, PoolMode mode,
                     std::span<const std::uint32_t> source, const BasicTensor<T>& grad_out,
                     BasicTensor<T>& grad_x) {
    const Shape os = pool2d_output_shape(input, k, stride);
    require_same(grad_out.shape(), os, "pool2d_backward");
    require_same(grad_x.shape(), input, "pool2d_backward");
    if (mode != PoolMode::Avg) {
        if (source.size() != os.numel()) throw ContractError("pool2d_backward: source index size mismatch");
        for (std::size_t o = 0; o < os.numel(); ++o) grad_x[source[o]] += grad_out[o];
        return;
    }
    const T inv = T(1) / static_cast<T>(k * k);
    std::size_t o = 0;
    for (std::size_t nc = 0; nc < input.n() * input.c(); ++nc) {
        const std::size_t plane = nc * input.h() * input.w();
        for (std::size_t oy = 0; oy < os.h(); ++oy) {
            for (std::size_t ox = 0; ox < os.w(); ++ox, ++o) {
                const std::size_t first = plane + oy * stride * input.w() + ox * stride;
                const T g = grad_out[o] * inv;
                for (std::size_t ky = 0; ky < k; ++ky)
                    for (std::size_t kx = 0; kx < k; ++kx) grad_x[first + ky * input.w() + kx] += g;
            }
        }
    }
}

template <class T>
BasicTensor<T> global_avg_pool(const BasicTensor<T>& x) {
    const Shape& s = x.shape();
    const std::size_t hw = s.h() * s.w();
    if (hw == 0) throw ShapeError("global_avg_pool: empty spatial extent " + s.to_string());
    BasicTensor<T> out(Shape(s.n(), s.c(), 1, 1));
    for (std::size_t nc = 0; nc < s.n() * s.c(); ++nc) {
        T acc = 0;
        for (std::size_t i = 0; i < hw; ++i) acc += x[nc * hw + i];
        out[nc] = acc / static_cast<T>(hw);
    }
    return out;
}

template <class T>
void global_avg_pool_backward(const BasicTensor<T>& grad_out, BasicTensor<T>& grad_x) {
    const Shape& s = grad_x.shape();
    require_same(grad_out.shape(), Shape(s.n(), s.c(), 1, 1), "global_avg_pool_backward");
    const std::size_t hw = s.h() * s.w();
    for (std::size_t nc = 0; nc < s.n() * s.c(); ++nc) {
        const T g = grad_out[nc] / static_cast<T>(hw);
        for (std::size_t i = 0; i < hw; ++i) grad_x[nc * hw + i] += g;
    }
}

template <class T>
NormParams<T> NormParams<T>::identity(std::size_t channels) {
    const Shape v(1, channels, 1, 1);
    return NormParams{BasicTensor<T>(v, T(1)), BasicTensor<T>(v, T(0)), BasicTensor<T>(v, T(0)),
                      BasicTensor<T>(v, T(1))};
}

template <class T>
BasicTensor<T> batch_norm_train(const BasicTensor<T>& x, const BasicTensor<T>& gamma, const BasicTensor<T>& beta,
                                T eps, BatchNormStats<T>* stats) {
    const Shape& s = x.shape();
    require_vector(gamma.shape(), s.c(), "batch_norm", "gamma");
    require_vector(beta.shape(), s.c(), "batch_norm", "beta");
    const std::size_t hw = s.h() * s.w();
    const std::size_t count = s.n() * hw;
    if (count == 0) throw ShapeError("batch_norm: empty batch " + s.to_string());
    BatchNormStats<T> local;
    BatchNormStats<T>& st = stats ? *stats : local;
    st.mean.assign(s.c(), T(0));
    st.inv_std.assign(s.c(), T(0));
    st.unbiased_var.assign(s.c(), T(0));
    BasicTensor<T> out(s);
    for (std::size_t c = 0; c < s.c(); ++c) {
        double sum = 0;
        for (std::size_t n = 0; n < s.n(); ++n) {
            const T* p = x.data().data() + (n * s.c() + c) * hw;
            for (std::size_t i = 0; i < hw; ++i) sum += p[i];
        }
        const double mean = sum / static_cast<double>(count);
        double sq = 0;
        for (std::size_t n = 0; n < s.n(); ++n) {
            const T* p = x.data().data() + (n * s.c() + c) * hw;
            for (std::size_t i = 0; i < hw; ++i) {
                const double d = p[i] - mean;
                sq += d * d;
            }
        }
        const double var = sq / static_cast<double>(count);
        const T m = static_cast<T>(mean);
        const T istd = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
        st.mean[c] = m;
        st.inv_std[c] = istd;
        st.unbiased_var[c] = count > 1 ? static_cast<T>(sq / static_cast<double>(count - 1)) : T(0);
        const T ga = gamma[c], be = beta[c];
        for (std::size_t n = 0; n < s.n(); ++n) {
            const std::size_t base = (n * s.c() + c) * hw;
            for (std::size_t i = 0; i < hw; ++i) out[base + i] = (x[base + i] - m) * istd * ga + be;
        }
    }
    return out;
}

template <class T>
BasicTensor<T> batch_norm_infer(const BasicTensor<T>& x, const BasicTensor<T>& gamma, const BasicTensor<T>& beta,
                                const BasicTensor<T>& running_mean, const BasicTensor<T>& running_var, T eps) {
    const Shape& s = x.shape();
    require_vector(gamma.shape(), s.c(), "batch_norm", "gamma");
    require_vector(beta.shape(), s.c(), "batch_norm", "beta");
    require_vector(running_mean.shape(), s.c(), "batch_norm", "running_mean");
    require_vector(running_var.shape(), s.c(), "batch_norm", "running_var");
    const std::size_t hw = s.h() * s.w();
    BasicTensor<T> out(s);
    for (std::size_t c = 0; c < s.c(); ++c) {
        const T scale = gamma[c] / std::sqrt(running_var[c] + eps);
        const T shift = beta[c] - running_mean[c] * scale;
        for (std::size_t n = 0; n < s.n(); ++n) {
            const std::size_t base = (n * s.c() + c) * hw;
            for (std::size_t i = 0; i < hw; ++i) out[base + i] = x[base + i] * scale + shift;
        }
    }
    return out;
}

template <class T>
void update_running_stats(BasicTensor<T>& running_mean, BasicTensor<T>& running_var, const BatchNormStats<T>& stats,
                          T momentum) {
    for (std::size_t c = 0; c < stats.mean.size(); ++c) {
        running_mean[c] = (T(1) - momentum) * running_mean[c] + momentum * stats.mean[c];
        running_var[c] = (T(1) - momentum) * running_var[c] + momentum * stats.unbiased_var[c];
    }
}

template <class T>
BasicTensor<T> batch_norm(const BasicTensor<T>& x, NormParams<T>& p, Mode mode) {
    if (x.shape().c() != p.channels()) {
        throw ConfigError("batch_norm: input has " + std::to_string(x.shape().c()) + " channels, parameters have " +
                          std::to_string(p.channels()));
    }
    if (mode == Mode::Infer) {
        return batch_norm_infer(x, p.gamma, p.beta, p.running_mean, p.running_var, p.eps);
    }
    BatchNormStats<T> stats;
    BasicTensor<T> out = batch_norm_train(x, p.gamma, p.beta, p.eps, &stats);
    update_running_stats(p.running_mean, p.running_var, stats, p.momentum);
    return out;
}

template <class T>
void batch_norm_backward(const BasicTensor<T>& x, const BasicTensor<T>& gamma, const BatchNormStats<T>& stats,
                         const BasicTensor<T>& grad_out, BasicTensor<T>* grad_x, BasicTensor<T>* grad_gamma,
                         BasicTensor<T>* grad_beta) {
    const Shape& s = x.shape();
    require_same(grad_out.shape(), s, "batch_norm_backward");
    const std::size_t hw = s.h() * s.w();
    const T count = static_cast<T>(s.n() * hw);
    for (std::size_t c = 0; c < s.c(); ++c) {
        const T m = stats.mean[c], istd = stats.inv_std[c];
        T sum_g = 0, sum_gx = 0;
        for (std::size_t n = 0; n < s.n(); ++n) {
            const std::size_t base = (n * s.c() + c) * hw;
            for (std::size_t i = 0; i < hw; ++i) {
                const T g = grad_out[base + i];
                sum_g += g;
                sum_gx += g * (x[base + i] - m) * istd;
            }
        }
        if (grad_gamma) (*grad_gamma)[c] += sum_gx;
        if (grad_beta) (*grad_beta)[c] += sum_g;
        if (!grad_x) continue;
        const T k = gamma[c] * istd / count;
        for (std::size_t n = 0; n < s.n(); ++n) {
            const std::size_t base = (n * s.c() + c) * hw;
            for (std::size_t i = 0; i < hw; ++i) {
                const T xhat = (x[base + i] - m) * istd;
                (*grad_x)[base + i] += k * (count * grad_out[base + i] - sum_g - xhat * sum_gx);
            }
        }
    }
}

template <class T>
BasicTensor<T> layer_norm_channels(const BasicTensor<T>& x, const BasicTensor<T>& gamma, const BasicTensor<T>& beta,
                                   T eps) {
    const Shape& s = x.shape();
    if (s.h() * s.w() != 1) {
        throw ShapeError("layer_norm_channels: expects a squeezed (N,C,1,1) input, got " + s.to_string());
    }
    require_vector(gamma.shape(), s.c(), "layer_norm_channels", "gamma");
    require_vector(beta.shape(), s.c(), "layer_norm_channels", "beta");
    BasicTensor<T> out(s);
    const std::size_t C = s.c();
    for (std::size_t n = 0; n < s.n(); ++n) {
        const T* p = x.data().data() + n * C;
        double sum = 0;
        for (std::size_t c = 0; c < C; ++c) sum += p[c];
        const double mean = sum / static_cast<double>(C);
        double sq = 0;
        for (std::size_t c = 0; c < C; ++c) sq += (p[c] - mean) * (p[c] - mean);
        const T istd = static_cast<T>(1.0 / std::sqrt(sq / static_cast<double>(C) + static_cast<double>(eps)));
        const T m = static_cast<T>(mean);
        for (std::size_t c = 0; c < C; ++c) out[n * C + c] = (p[c] - m) * istd * gamma[c] + beta[c];
    }
    return out;
}

template <class T>
void layer_norm_channels_backward(const BasicTensor<T>& x, const BasicTensor<T>& gamma, T eps,
                                  const BasicTensor<T>& grad_out, BasicTensor<T>* grad_x,
                                  BasicTensor<T>* grad_gamma, BasicTensor<T>* grad_beta) {
    const Shape& s = x.shape();
    require_same(grad_out.shape(), s, "layer_norm_channels_backward");
    const std::size_t C = s.c();
    std::vector<T> xhat(C);
    for (std::size_t n = 0; n < s.n(); ++n) {
        const T* p = x.data().data() + n * C;
        const T* g = grad_out.data().data() + n * C;
        double sum = 0;
        for (std::size_t c = 0; c < C; ++c) sum += p[c];
        const double mean = sum / static_cast<double>(C);
        double sq = 0;
        for (std::size_t c = 0; c < C; ++c) sq += (p[c] - mean) * (p[c] - mean);
        const T istd = static_cast<T>(1.0 / std::sqrt(sq / static_cast<double>(C) + static_cast<double>(eps)));
        T sum_dh = 0, sum_dh_xhat = 0;
        for (std::size_t c = 0; c < C; ++c) {
            xhat[c] = (p[c] - static_cast<T>(mean)) * istd;
            const T dh = g[c] * gamma[c];
            sum_dh += dh;
            sum_dh_xhat += dh * xhat[c];
            if (grad_gamma) (*grad_gamma)[c] += g[c] * xhat[c];
            if (grad_beta) (*grad_beta)[c] += g[c];
        }
        if (!grad_x) continue;
        const T invC = T(1) / static_cast<T>(C);
        for (std::size_t c = 0; c < C; ++c) {
            const T dh = g[c] * gamma[c];
            (*grad_x)[n * C + c] += istd * (dh - invC * sum_dh - xhat[c] * invC * sum_dh_xhat);
        }
    }
}

template <class T>
BasicTensor<T> hard_swish(const BasicTensor<T>& x) {
    BasicTensor<T> out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const T v = x[i];
        // saturated pieces are exact
        if (v <= T(-3)) out[i] = T(0);
        else if (v >= T(3)) out[i] = v;
        else out[i] = v * (v + T(3)) / T(6);
    }
    return out;
}

template <class T>
void hard_swish_backward(const BasicTensor<T>& x, const BasicTensor<T>& grad_out, BasicTensor<T>& grad_x) {
    require_same(grad_out.shape(), x.shape(), "hard_swish_backward");
    for (std::size_t i = 0; i < x.size(); ++i) {
        const T v = x[i];
        T d;
        if (v <= T(-3)) d = T(0);
        else if (v >= T(3)) d = T(1);
        else d = (T(2) * v + T(3)) / T(6);
        grad_x[i] += d * grad_out[i];
    }
}

template <class T>
BasicTensor<T> relu(const BasicTensor<T>& x) {
    BasicTensor<T> out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
    return out;
}

template <class T>
void relu_backward(const BasicTensor<T>& x, const BasicTensor<T>& grad_out, BasicTensor<T>& grad_x) {
    require_same(grad_out.shape(), x.shape(), "relu_backward");
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (x[i] > T(0)) grad_x[i] += grad_out[i];
    }
}

template <class T>
BasicTensor<T> sigmoid(const BasicTensor<T>& x) {
    BasicTensor<T> out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const T v = x[i];
        // Split by sign so exp never overflows.
        if (v >= T(0)) {
            out[i] = T(1) / (T(1) + std::exp(-v));
        } else {
            const T e = std::exp(v);
            out[i] = e / (T(1) + e);
        }
    }
    return out;
}

template <class T>
void sigmoid_backward(const BasicTensor<T>& y, const BasicTensor<T>& grad_out, BasicTensor<T>& grad_x) {
    require_same(grad_out.shape(), y.shape(), "sigmoid_backward");
    for (std::size_t i = 0; i < y.size(); ++i) grad_x[i] += grad_out[i] * y[i] * (T(1) - y[i]);
}

template <class T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& weight, const BasicTensor<T>* bias) {
    const Shape& s = x.shape();
    const std::size_t c_out = weight.shape().n();
    const std::size_t c_in = weight.shape().c();
    if (s.h() * s.w() != 1) throw ShapeError("linear: expects (N,C,1,1) input, got " + s.to_string());
    if (weight.shape().h() * weight.shape().w() != 1 || s.c() != c_in) {
        throw ConfigError("linear: input " + s.to_string() + " incompatible with weight " +
                          weight.shape().to_string());
    }
    if (bias) require_vector(bias->shape(), c_out, "linear", "bias");
    BasicTensor<T> out(Shape(s.n(), c_out, 1, 1));
    for (std::size_t n = 0; n < s.n(); ++n) {
        const T* xr = x.data().data() + n * c_in;
        for (std::size_t o = 0; o < c_out; ++o) {
            const T* wr = weight.data().data() + o * c_in;
            T acc = bias ? (*bias)[o] : T(0);
            for (std::size_t i = 0; i < c_in; ++i) acc += wr[i] * xr[i];
            out[n * c_out + o] = acc;
        }
    }
    return out;
}

template <class T>
void linear_backward(const BasicTensor<T>& x, const BasicTensor<T>& weight, const BasicTensor<T>& grad_out,
                     BasicTensor<T>* grad_x, BasicTensor<T>* grad_weight, BasicTensor<T>* grad_bias) {
    const std::size_t N = x.shape().n();
    const std::size_t c_out = weight.shape().n();
    const std::size_t c_in = weight.shape().c();
    require_same(grad_out.shape(), Shape(N, c_out, 1, 1), "linear_backward");
    for (std::size_t n = 0; n < N; ++n) {
        const T* xr = x.data().data() + n * c_in;
        for (std::size_t o = 0; o < c_out; ++o) {
            const T g = grad_out[n * c_out + o];
            if (grad_bias) (*grad_bias)[o] += g;
            const T* wr = weight.data().data() + o * c_in;
            if (grad_weight) {
                T* gw = grad_weight->data().data() + o * c_in;
                for (std::size_t i = 0; i < c_in; ++i) gw[i] += g * xr[i];
            }
            if (grad_x) {
                T* gx = grad_x->data().data() + n * c_in;
                for (std::size_t i = 0; i < c_in; ++i) gx[i] += g * wr[i];
            }
        }
    }
}

template <class T>
BasicTensor<T> scale_channels(const BasicTensor<T>& x, const BasicTensor<T>& scale) {
    const Shape& s = x.shape();
    require_same(scale.shape(), Shape(s.n(), s.c(), 1, 1), "scale_channels");
    const std::size_t hw = s.h() * s.w();
    BasicTensor<T> out(s);
    for (std::size_t nc = 0; nc < s.n() * s.c(); ++nc) {
        const T k = scale[nc];
        for (std::size_t i = 0; i < hw; ++i) out[nc * hw + i] = x[nc * hw + i] * k;
    }
    return out;
}

template <class T>
void scale_channels_backward(const BasicTensor<T>& x, const BasicTensor<T>& scale, const BasicTensor<T>& grad_out,
                             BasicTensor<T>* grad_x, BasicTensor<T>* grad_scale) {
    const Shape& s = x.shape();
    require_same(grad_out.shape(), s, "scale_channels_backward");
    const std::size_t hw = s.h() * s.w();
    for (std::size_t nc = 0; nc < s.n() * s.c(); ++nc) {
        T acc = 0;
        for (std::size_t i = 0; i < hw; ++i) {
            const std::size_t idx = nc * hw + i;
            if (grad_x) (*grad_x)[idx] += grad_out[idx] * scale[nc];
            acc += grad_out[idx] * x[idx];
        }
        if (grad_scale) (*grad_scale)[nc] += acc;
    }
}

template <class T>
DropoutResult<T> dropout(const BasicTensor<T>& x, double p, std::mt19937_64& rng, Mode mode) {
    if (!(p >= 0.0 && p < 1.0)) throw ConfigError("dropout: rate " + std::to_string(p) + " outside [0,1)");
    DropoutResult<T> r{x, BasicTensor<T>(x.shape(), T(1))};
    if (mode == Mode::Infer || p == 0.0) return r;
    const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
    for (std::size_t i = 0; i < x.size(); ++i) {
        // 53 random bits mapped to [0,1); portable across standard libraries.
        const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
        const T m = u < p ? T(0) : keep_scale;
        r.mask[i] = m;
        r.out[i] = x[i] * m;
    }
    return r;
}

template <class T>
CrossEntropyResult<T> softmax_cross_entropy(const BasicTensor<T>& logits, std::span<const int> labels) {
    const Shape& s = logits.shape();
    if (s.h() * s.w() != 1) throw ShapeError("softmax_cross_entropy: logits must be (N,K,1,1), got " + s.to_string());
    if (labels.size() != s.n()) {
        throw DataError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for batch of " +
                        std::to_string(s.n()));
    }
    const std::size_t K = s.c();
    CrossEntropyResult<T> r{T(0), BasicTensor<T>(s)};
    double total = 0;
    for (std::size_t n = 0; n < s.n(); ++n) {
        const int label = labels[n];
        if (label < 0 || static_cast<std::size_t>(label) >= K) {
            throw DataError("softmax_cross_entropy: label " + std::to_string(label) + " at index " +
                            std::to_string(n) + " outside [0," + std::to_string(K) + ")");
        }
        const T* z = logits.data().data() + n * K;
        const T zmax = *std::max_element(z, z + K);
        double denom = 0;
        for (std::size_t k = 0; k < K; ++k) denom += std::exp(static_cast<double>(z[k] - zmax));
        const double log_denom = std::log(denom);
        for (std::size_t k = 0; k < K; ++k) {
            r.probs[n * K + k] = static_cast<T>(std::exp(static_cast<double>(z[k] - zmax) - log_denom));
        }
        total += log_denom - static_cast<double>(z[label] - zmax);
    }
    r.loss = static_cast<T>(total / static_cast<double>(s.n()));
    return r;
}

template <class T>
void softmax_cross_entropy_backward(const BasicTensor<T>& probs, std::span<const int> labels, T grad_loss,
                                   BasicTensor<T>& grad_logits) {
    const Shape& s = probs.shape();
    require_same(grad_logits.shape(), s, "softmax_cross_entropy_backward");
    const std::size_t K = s.c();
    const T k = grad_loss / static_cast<T>(s.n());
    for (std::size_t n = 0; n < s.n(); ++n) {
        for (std::size_t c = 0; c < K; ++c) {
            const T onehot = static_cast<std::size_t>(labels[n]) == c ? T(1) : T(0);
            grad_logits[n * K + c] += k * (probs[n * K + c] - onehot);
        }
    }
}

#define XQNET_INSTANTIATE(T)                                                                                       \
    template BasicTensor<T> conv2d(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>*,          \
                                   const ConvGeometry&);                                                         \
    template void conv2d_backward(const BasicTensor<T>&, const BasicTensor<T>&, const ConvGeometry&,             \
                                  const BasicTensor<T>&, BasicTensor<T>*, BasicTensor<T>*, BasicTensor<T>*);     \
    template PoolResult<T> pool2d_with_source(const BasicTensor<T>&, std::size_t, std::size_t, PoolMode);       \
    template void pool2d_backward(const Shape&, std::size_t, std::size_t, PoolMode,                              \
                                  std::span<const std::uint32_t>, const BasicTensor<T>&, BasicTensor<T>&);       \
    template BasicTensor<T> global_avg_pool(const BasicTensor<T>&);                                              \
    template void global_avg_pool_backward(const BasicTensor<T>&, BasicTensor<T>&);                              \
    template struct NormParams<T>;                                                                               \
    template BasicTensor<T> batch_norm_train(const BasicTensor<T>&, const BasicTensor<T>&,                      \
                                             const BasicTensor<T>&, T, BatchNormStats<T>*);                      \
    template BasicTensor<T> batch_norm_infer(const BasicTensor<T>&, const BasicTensor<T>&,                      \
                                             const BasicTensor<T>&, const BasicTensor<T>&,                      \
                                             const BasicTensor<T>&, T);                                          \
    template void update_running_stats(BasicTensor<T>&, BasicTensor<T>&, const BatchNormStats<T>&, T);          \
    template BasicTensor<T> batch_norm(const BasicTensor<T>&, NormParams<T>&, Mode);                             \
    template void batch_norm_backward(const BasicTensor<T>&, const BasicTensor<T>&, const BatchNormStats<T>&,   \
                                      const BasicTensor<T>&, BasicTensor<T>*, BasicTensor<T>*,                  \
                                      BasicTensor<T>*);                                                          \
    template BasicTensor<T> layer_norm_channels(const BasicTensor<T>&, const BasicTensor<T>&,                   \
                                                const BasicTensor<T>&, T);                                       \
    template void layer_norm_channels_backward(const BasicTensor<T>&, const BasicTensor<T>&, T,                 \
                                               const BasicTensor<T>&, BasicTensor<T>*, BasicTensor<T>*,         \
                                               BasicTensor<T>*);                                                 \
    template BasicTensor<T> hard_swish(const BasicTensor<T>&);                                                   \
    template void hard_swish_backward(const BasicTensor<T>&, const BasicTensor<T>&, BasicTensor<T>&);            \
    template BasicTensor<T> relu(const BasicTensor<T>&);                                                         \
    template void relu_backward(const BasicTensor<T>&, const BasicTensor<T>&, BasicTensor<T>&);                  \
    template BasicTensor<T> sigmoid(const BasicTensor<T>&);                                                      \
    template void sigmoid_backward(const BasicTensor<T>&, const BasicTensor<T>&, BasicTensor<T>&);               \
    template BasicTensor<T> linear(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>*);         \
    template void linear_backward(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&,          \
                                  BasicTensor<T>*, BasicTensor<T>*, BasicTensor<T>*);                            \
    template BasicTensor<T> scale_channels(const BasicTensor<T>&, const BasicTensor<T>&);                       \
    template void scale_channels_backward(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&,  \
                                          BasicTensor<T>*, BasicTensor<T>*);                                     \
    template DropoutResult<T> dropout(const BasicTensor<T>&, double, std::mt19937_64&, Mode);                    \
    template CrossEntropyResult<T> softmax_cross_entropy(const BasicTensor<T>&, std::span<const int>);           \
    template void softmax_cross_entropy_backward(const BasicTensor<T>&, std::span<const int>, T,                 \
                                                 BasicTensor<T>&);

XQNET_INSTANTIATE(float)
XQNET_INSTANTIATE(double)

#undef XQNET_INSTANTIATE

}  // namespace xqnet
