#pragma once

// Building blocks of the network. A block registers its tensors in a
// ParamStore at construction and afterwards only holds their indices, so
// the same block object runs against a float store (training) or a
// double copy of it (gradient reference).

#include <cstddef>
#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "xqnet/autodiff.hpp"
#include "xqnet/params.hpp"

namespace xqnet {

template <class T>
struct ForwardContext {
    Mode mode = Mode::Infer;
    /// Dropout masks are drawn from here in train mode.
    std::mt19937_64* rng = nullptr;
    /// Receives batch-norm running-statistic updates in train mode; may be
    /// null, in which case running statistics are left untouched.
    BasicParamStore<T>* stats = nullptr;
};

/// Uniform on [-bound, bound] from 53 random bits, identical on every
/// standard library.
float uniform_symmetric(std::mt19937_64& rng, double bound);

class ConvUnit;

class Layer {
public:
    virtual ~Layer() = default;

    /// Operator label as it appears in the architecture table.
    virtual std::string op_name() const = 0;
    /// Output shape for `input`; throws ShapeError/ConfigError when invalid.
    virtual Shape output_shape(const Shape& input) const = 0;
    /// Trainable parameter count from the block's closed-form formula.
    virtual std::size_t expected_trainable() const = 0;

    virtual Var forward(Tape<float>& t, const BasicParamStore<float>& store, Var x,
                        ForwardContext<float>& ctx) const = 0;
    virtual Var forward(Tape<double>& t, const BasicParamStore<double>& store, Var x,
                        ForwardContext<double>& ctx) const = 0;

    /// Store indices owned by this layer, in registration order.
    const std::vector<std::size_t>& param_indices() const noexcept { return owned_; }
    std::size_t trainable_count(const ParamStore& store) const;
    std::size_t buffer_count(const ParamStore& store) const;

protected:
    /// Throws ContractError when the registered tensors disagree with
    /// expected_trainable(); called at the end of every constructor.
    void verify_count(const ParamStore& store) const;

    std::size_t own(std::size_t index) {
        owned_.push_back(index);
        return index;
    }
    void own(const ConvUnit& unit);
    void own(const Layer& nested);

private:
    std::vector<std::size_t> owned_;
};

/// Generates both precision overloads from Derived::run<T>.
template <class Derived>
class LayerImpl : public Layer {
public:
    Var forward(Tape<float>& t, const BasicParamStore<float>& store, Var x,
                ForwardContext<float>& ctx) const override {
        return static_cast<const Derived*>(this)->template run<float>(t, store, x, ctx);
    }
    Var forward(Tape<double>& t, const BasicParamStore<double>& store, Var x,
                ForwardContext<double>& ctx) const override {
        return static_cast<const Derived*>(this)->template run<double>(t, store, x, ctx);
    }
};

/// Bias-free convolution, optionally followed by batch norm.
class ConvUnit {
public:
    ConvUnit() = default;
    ConvUnit(ParamStore& store, const std::string& name, std::size_t c_in, std::size_t c_out, std::size_t kernel,
             ConvGeometry geometry, bool with_bn, std::mt19937_64& rng);

    template <class T>
    Var run(Tape<T>& t, const BasicParamStore<T>& store, Var x, ForwardContext<T>& ctx) const;

    std::size_t weight_index() const noexcept { return weight_; }
    const ConvGeometry& geometry() const noexcept { return geometry_; }
    std::size_t kernel() const noexcept { return kernel_; }
    std::size_t out_channels() const noexcept { return c_out_; }
    /// Every store index this unit registered, weight first.
    std::vector<std::size_t> indices() const;

private:
    std::size_t weight_ = 0;
    std::size_t gamma_ = 0, beta_ = 0, mean_ = 0, var_ = 0;
    std::size_t c_out_ = 0;
    std::size_t kernel_ = 1;
    ConvGeometry geometry_;
    bool bn_ = false;
};

enum class GateKind { SE, LN };

/// Squeeze-and-excitation gate: GAP, two bias-free FCs around a ReLU,
/// sigmoid, per-channel scaling. Hidden width is ceil(C / ratio).
class SeBlock : public LayerImpl<SeBlock> {
public:
    SeBlock(ParamStore& store, const std::string& name, std::size_t channels, std::size_t ratio,
            std::mt19937_64& rng);

    std::string op_name() const override { return "SE"; }
    Shape output_shape(const Shape& input) const override;
    std::size_t expected_trainable() const override;

    template <class T>
    Var run(Tape<T>& t, const BasicParamStore<T>& store, Var x, ForwardContext<T>& ctx) const;

    std::size_t hidden() const noexcept { return hidden_; }
    std::size_t fc1_index() const noexcept { return fc1_; }
    std::size_t fc2_index() const noexcept { return fc2_; }

private:
    std::size_t channels_;
    std::size_t hidden_;
    std::size_t fc1_ = 0, fc2_ = 0;
};

/// SE variant whose two FCs are replaced by one layer norm over the
/// squeezed channel vector: sigmoid(LN(GAP(x))) scales x. 2C parameters.
class SeLnBlock : public LayerImpl<SeLnBlock> {
public:
    SeLnBlock(ParamStore& store, const std::string& name, std::size_t channels);

    std::string op_name() const override { return "SE-LN"; }
    Shape output_shape(const Shape& input) const override;
    std::size_t expected_trainable() const override { return 2 * channels_; }

    template <class T>
    Var run(Tape<T>& t, const BasicParamStore<T>& store, Var x, ForwardContext<T>& ctx) const;

    std::size_t gamma_index() const noexcept { return gamma_; }
    std::size_t beta_index() const noexcept { return beta_; }

private:
    std::size_t channels_;
    std::size_t gamma_ = 0, beta_ = 0;
};

/// Downsampler: 2x2 max pool, then BN(pointwise C_in -> C_out).
class MeBlock : public LayerImpl<MeBlock> {
public:
    MeBlock(ParamStore& store, const std::string& name, std::size_t c_in, std::size_t c_out, std::mt19937_64& rng);

    std::string op_name() const override { return "ME"; }
    Shape output_shape(const Shape& input) const override;
    std::size_t expected_trainable() const override { return c_in_ * c_out_ + 2 * c_out_; }

    template <class T>
    Var run(Tape<T>& t, const BasicParamStore<T>& store, Var x, ForwardContext<T>& ctx) const;

private:
    std::size_t c_in_, c_out_;
    ConvUnit proj_;
};

/// concat(maxpool2x2(x), minpool2x2(x)) along channels, max first.
/// Keeps the two extremes of every 2x2 window.
template <class T>
BasicTensor<T> extreme_values(const BasicTensor<T>& x);

/// Extreme-value downsampler: BN(pointwise 2*C_in -> C_out) over extreme_values(x).
class EveBlock : public LayerImpl<EveBlock> {
public:
    EveBlock(ParamStore& store, const std::string& name, std::size_t c_in, std::size_t c_out,
             std::mt19937_64& rng);

    std::string op_name() const override { return "EVE"; }
    Shape output_shape(const Shape& input) const override;
    std::size_t expected_trainable() const override { return 2 * c_in_ * c_out_ + 2 * c_out_; }

    template <class T>
    Var run(Tape<T>& t, const BasicParamStore<T>& store, Var x, ForwardContext<T>& ctx) const;

private:
    std::size_t c_in_, c_out_;
    ConvUnit proj_;
};

/// Input block for 3-channel images: a stride-2 4x4 depthwise conv joined
/// with the max/min pooled image (3 + 3 + 3 channels), then BN(pointwise 9 -> C_out).
class FctBlock : public LayerImpl<FctBlock> {
public:
    FctBlock(ParamStore& store, const std::string& name, std::size_t c_out, std::mt19937_64& rng);

    std::string op_name() const override { return "FCT"; }
    Shape output_shape(const Shape& input) const override;
    std::size_t expected_trainable() const override { return 48 + 9 * c_out_ + 2 * c_out_; }

    template <class T>
    Var run(Tape<T>& t, const BasicParamStore<T>& store, Var x, ForwardContext<T>& ctx) const;

    std::size_t depthwise_weight_index() const noexcept { return dw_.weight_index(); }

private:
    std::size_t c_out_;
    ConvUnit dw_;
    ConvUnit proj_;
};

/// Residual unit, channel- and resolution-preserving:
///   u = gate(hswish(BN(pw(BN(dw3x3(x))))))
///   out = x + BN(pw(BN(dw3x3(u))))
class Dfsebv2Block : public LayerImpl<Dfsebv2Block> {
public:
    Dfsebv2Block(ParamStore& store, const std::string& name, std::size_t channels, GateKind gate,
                 std::size_t se_ratio, std::mt19937_64& rng);

    std::string op_name() const override { return "DFSEBV2"; }
    Shape output_shape(const Shape& input) const override;
    std::size_t expected_trainable() const override;

    template <class T>
    Var run(Tape<T>& t, const BasicParamStore<T>& store, Var x, ForwardContext<T>& ctx) const;

    GateKind gate_kind() const noexcept { return gate_kind_; }
    /// Pointwise weights of the second (residual-branch) unit.
    std::size_t residual_pointwise_index() const noexcept { return pw2_.weight_index(); }

private:
    std::size_t channels_;
    GateKind gate_kind_;
    std::size_t se_ratio_;
    ConvUnit dw1_, pw1_, dw2_, pw2_;
    std::unique_ptr<Layer> gate_;
};

/// Closed-form trainable count of a DFSEBV2 block.
std::size_t dfsebv2_param_count(std::size_t channels, GateKind gate, std::size_t se_ratio = 3);

/// Standalone depthwise conv (k x k, stride 1, same padding) followed by BN.
class DepthwiseConvLayer : public LayerImpl<DepthwiseConvLayer> {
public:
    DepthwiseConvLayer(ParamStore& store, const std::string& name, std::size_t channels, std::size_t kernel,
                       std::mt19937_64& rng);

    std::string op_name() const override { return "Depthwise Conv"; }
    Shape output_shape(const Shape& input) const override;
    std::size_t expected_trainable() const override { return kernel_ * kernel_ * channels_ + 2 * channels_; }

    template <class T>
    Var run(Tape<T>& t, const BasicParamStore<T>& store, Var x, ForwardContext<T>& ctx) const;

private:
    std::size_t channels_, kernel_;
    ConvUnit conv_;
};

class HardSwishLayer : public LayerImpl<HardSwishLayer> {
public:
    std::string op_name() const override { return "Hard Swish"; }
    Shape output_shape(const Shape& input) const override { return input; }
    std::size_t expected_trainable() const override { return 0; }

    template <class T>
    Var run(Tape<T>& t, const BasicParamStore<T>&, Var x, ForwardContext<T>&) const {
        return ad::hard_swish(t, x);
    }
};

class GlobalAvgPoolLayer : public LayerImpl<GlobalAvgPoolLayer> {
public:
    std::string op_name() const override { return "Average pooling"; }
    Shape output_shape(const Shape& input) const override;
    std::size_t expected_trainable() const override { return 0; }

    template <class T>
    Var run(Tape<T>& t, const BasicParamStore<T>&, Var x, ForwardContext<T>&) const {
        return ad::global_avg_pool(t, x);
    }
};

class DropoutLayer : public LayerImpl<DropoutLayer> {
public:
    explicit DropoutLayer(double rate);

    std::string op_name() const override { return "Dropout"; }
    Shape output_shape(const Shape& input) const override { return input; }
    std::size_t expected_trainable() const override { return 0; }
    double rate() const noexcept { return rate_; }

    template <class T>
    Var run(Tape<T>& t, const BasicParamStore<T>& store, Var x, ForwardContext<T>& ctx) const;

private:
    double rate_;
};

/// Fully-connected classifier head with bias.
class LinearLayer : public LayerImpl<LinearLayer> {
public:
    LinearLayer(ParamStore& store, const std::string& name, std::size_t c_in, std::size_t c_out,
                std::mt19937_64& rng);

    std::string op_name() const override { return "FC"; }
    Shape output_shape(const Shape& input) const override;
    std::size_t expected_trainable() const override { return c_in_ * c_out_ + c_out_; }

    template <class T>
    Var run(Tape<T>& t, const BasicParamStore<T>& store, Var x, ForwardContext<T>& ctx) const;

private:
    std::size_t c_in_, c_out_;
    std::size_t weight_ = 0, bias_ = 0;
};

/// Runs one layer on a value-only tape and returns the output tensor.
template <class T>
BasicTensor<T> run_layer(const Layer& layer, const BasicParamStore<T>& store, const BasicTensor<T>& x,
                         Mode mode = Mode::Infer);

}  // namespace xqnet
