#pragma once

// Forward and backward kernels for every operator the network uses.
// All kernels are pure functions; backward kernels accumulate (+=) into
// the gradient tensors they are handed, which must already be shaped.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "xqnet/tensor.hpp"

namespace xqnet {

enum class Mode { Train, Infer };

struct ConvGeometry {
    std::size_t stride = 1;
    std::size_t pad = 0;
    std::size_t groups = 1;
};

/// weight is (C_out, C_in / groups, kH, kW); bias, when present, is (1, C_out, 1, 1).
template <class T>
struct ConvParams {
    BasicTensor<T> weight;
    std::optional<BasicTensor<T>> bias;
    ConvGeometry geometry;

    std::size_t out_channels() const noexcept { return weight.shape().n(); }
    std::size_t in_channels() const noexcept { return weight.shape().c() * geometry.groups; }
    bool depthwise() const noexcept {
        return geometry.groups == in_channels() && geometry.groups == out_channels();
    }
    bool pointwise() const noexcept {
        return weight.shape().h() == 1 && weight.shape().w() == 1 && geometry.groups == 1;
    }
    std::size_t param_count() const noexcept {
        return weight.size() + (bias ? bias->size() : 0);
    }
};

/// Validates channels/groups/extents and returns the output shape.
Shape conv2d_output_shape(const Shape& input, const Shape& weight, const ConvGeometry& g);

template <class T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& weight, const BasicTensor<T>* bias,
                      const ConvGeometry& g);

template <class T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const ConvParams<T>& p) {
    return conv2d(x, p.weight, p.bias ? &*p.bias : nullptr, p.geometry);
}

template <class T>
void conv2d_backward(const BasicTensor<T>& x, const BasicTensor<T>& weight, const ConvGeometry& g,
                     const BasicTensor<T>& grad_out, BasicTensor<T>* grad_x, BasicTensor<T>* grad_weight,
                     BasicTensor<T>* grad_bias);

enum class PoolMode { Max, Min, Avg };

Shape pool2d_output_shape(const Shape& input, std::size_t k, std::size_t stride);

/// For Max/Min, `source` holds the flat input index each output was taken from.
template <class T>
struct PoolResult {
    BasicTensor<T> out;
    std::vector<std::uint32_t> source;
};

template <class T>
PoolResult<T> pool2d_with_source(const BasicTensor<T>& x, std::size_t k, std::size_t stride, PoolMode mode);

template <class T>
BasicTensor<T> pool2d(const BasicTensor<T>& x, std::size_t k, std::size_t stride, PoolMode mode) {
    return pool2d_with_source(x, k, stride, mode).out;
}

template <class T>
void pool2d_backward(const Shape& input, std::size_t k, std::size_t stride, PoolMode mode,
                     std::span<const std::uint32_t> source, const BasicTensor<T>& grad_out,
                     BasicTensor<T>& grad_x);

template <class T>
BasicTensor<T> global_avg_pool(const BasicTensor<T>& x);

template <class T>
void global_avg_pool_backward(const BasicTensor<T>& grad_out, BasicTensor<T>& grad_x);

/// gamma/beta/running stats are (1, C, 1, 1).
template <class T>
struct NormParams {
    BasicTensor<T> gamma;
    BasicTensor<T> beta;
    BasicTensor<T> running_mean;
    BasicTensor<T> running_var;
    T eps = T(1e-5);
    T momentum = T(0.1);

    static NormParams identity(std::size_t channels);
    std::size_t channels() const noexcept { return gamma.size(); }
    std::size_t trainable_count() const noexcept { return gamma.size() + beta.size(); }
};

template <class T>
struct BatchNormStats {
    std::vector<T> mean;
    std::vector<T> inv_std;
    std::vector<T> unbiased_var;
};

/// Batch-statistics normalization. Running statistics are not touched.
template <class T>
BasicTensor<T> batch_norm_train(const BasicTensor<T>& x, const BasicTensor<T>& gamma, const BasicTensor<T>& beta,
                                T eps, BatchNormStats<T>* stats);

template <class T>
BasicTensor<T> batch_norm_infer(const BasicTensor<T>& x, const BasicTensor<T>& gamma, const BasicTensor<T>& beta,
                                const BasicTensor<T>& running_mean, const BasicTensor<T>& running_var, T eps);

/// Exponential moving average update: r = (1 - momentum) r + momentum * batch.
template <class T>
void update_running_stats(BasicTensor<T>& running_mean, BasicTensor<T>& running_var, const BatchNormStats<T>& stats,
                          T momentum);

/// Train mode normalizes by batch statistics and updates p's running stats.
template <class T>
BasicTensor<T> batch_norm(const BasicTensor<T>& x, NormParams<T>& p, Mode mode);

template <class T>
void batch_norm_backward(const BasicTensor<T>& x, const BasicTensor<T>& gamma, const BatchNormStats<T>& stats,
                         const BasicTensor<T>& grad_out, BasicTensor<T>* grad_x, BasicTensor<T>* grad_gamma,
                         BasicTensor<T>* grad_beta);

/// Per-sample normalization of a squeezed (N, C, 1, 1) vector across C.
template <class T>
BasicTensor<T> layer_norm_channels(const BasicTensor<T>& x, const BasicTensor<T>& gamma, const BasicTensor<T>& beta,
                                   T eps);

template <class T>
void layer_norm_channels_backward(const BasicTensor<T>& x, const BasicTensor<T>& gamma, T eps,
                                  const BasicTensor<T>& grad_out, BasicTensor<T>* grad_x,
                                  BasicTensor<T>* grad_gamma, BasicTensor<T>* grad_beta);

template <class T>
BasicTensor<T> hard_swish(const BasicTensor<T>& x);
template <class T>
void hard_swish_backward(const BasicTensor<T>& x, const BasicTensor<T>& grad_out, BasicTensor<T>& grad_x);

template <class T>
BasicTensor<T> relu(const BasicTensor<T>& x);
template <class T>
void relu_backward(const BasicTensor<T>& x, const BasicTensor<T>& grad_out, BasicTensor<T>& grad_x);

template <class T>
BasicTensor<T> sigmoid(const BasicTensor<T>& x);
/// Takes the forward output y, since dy/dx = y (1 - y).
template <class T>
void sigmoid_backward(const BasicTensor<T>& y, const BasicTensor<T>& grad_out, BasicTensor<T>& grad_x);

/// x is (N, C_in, 1, 1); weight is (C_out, C_in, 1, 1); bias (1, C_out, 1, 1) or null.
template <class T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& weight, const BasicTensor<T>* bias);
template <class T>
void linear_backward(const BasicTensor<T>& x, const BasicTensor<T>& weight, const BasicTensor<T>& grad_out,
                     BasicTensor<T>* grad_x, BasicTensor<T>* grad_weight, BasicTensor<T>* grad_bias);

/// Multiplies every (n, c) plane of x by scale[n, c]; scale is (N, C, 1, 1).
template <class T>
BasicTensor<T> scale_channels(const BasicTensor<T>& x, const BasicTensor<T>& scale);
template <class T>
void scale_channels_backward(const BasicTensor<T>& x, const BasicTensor<T>& scale, const BasicTensor<T>& grad_out,
                             BasicTensor<T>* grad_x, BasicTensor<T>* grad_scale);

/// The mask holds 0 for dropped elements and 1 / (1 - p) for survivors.
template <class T>
struct DropoutResult {
    BasicTensor<T> out;
    BasicTensor<T> mask;
};

template <class T>
DropoutResult<T> dropout(const BasicTensor<T>& x, double p, std::mt19937_64& rng, Mode mode);

template <class T>
struct CrossEntropyResult {
    T loss;
    BasicTensor<T> probs;
};

template <class T>
CrossEntropyResult<T> softmax_cross_entropy(const BasicTensor<T>& logits, std::span<const int> labels);

/// Gradient of the mean loss w.r.t. the logits, scaled by grad_loss.
template <class T>
void softmax_cross_entropy_backward(const BasicTensor<T>& probs, std::span<const int> labels, T grad_loss,
                                   BasicTensor<T>& grad_logits);

}  // namespace xqnet
