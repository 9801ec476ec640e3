#include "xqnet/blocks.hpp"

#include <cmath>
#include <string>

namespace xqnet {

namespace {

Tensor uniform_tensor(Shape shape, double bound, std::mt19937_64& rng) {
    Tensor t(shape);
    for (float& v : t.data()) v = uniform_symmetric(rng, bound);
    return t;
}

void require_channels(const Shape& s, std::size_t channels, const std::string& who) {
    if (s.c() != channels) {
        throw ConfigError(who + ": input has " + std::to_string(s.c()) + " channels, block expects " +
                          std::to_string(channels));
    }
}

void require_even(const Shape& s, const std::string& who) {
    if (s.h() % 2 != 0 || s.w() % 2 != 0 || s.h() == 0 || s.w() == 0) {
        throw ShapeError(who + ": spatial extents of " + s.to_string() + " must be even and non-zero");
    }
}

}  // namespace

float uniform_symmetric(std::mt19937_64& rng, double bound) {
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    return static_cast<float>((2.0 * u - 1.0) * bound);
}

std::size_t Layer::trainable_count(const ParamStore& store) const {
    std::size_t n = 0;
    for (std::size_t i : owned_) n += store[i].trainable ? store[i].value.size() : 0;
    return n;
}

std::size_t Layer::buffer_count(const ParamStore& store) const {
    std::size_t n = 0;
    for (std::size_t i : owned_) n += store[i].trainable ? 0 : store[i].value.size();
    return n;
}

void Layer::verify_count(const ParamStore& store) const {
    const std::size_t actual = trainable_count(store);
    if (actual != expected_trainable()) {
        throw ContractError(op_name() + ": registered " + std::to_string(actual) +
                            " trainable parameters, closed form gives " + std::to_string(expected_trainable()));
    }
}

void Layer::own(const ConvUnit& unit) {
    for (std::size_t i : unit.indices()) own(i);
}

void Layer::own(const Layer& nested) {
    for (std::size_t i : nested.param_indices()) own(i);
}

ConvUnit::ConvUnit(ParamStore& store, const std::string& name, std::size_t c_in, std::size_t c_out,
                   std::size_t kernel, ConvGeometry geometry, bool with_bn, std::mt19937_64& rng)
    : c_out_(c_out), kernel_(kernel), geometry_(geometry), bn_(with_bn) {
    if (c_in % geometry.groups != 0 || c_out % geometry.groups != 0) {
        throw ConfigError(name + ": channels " + std::to_string(c_in) + "->" + std::to_string(c_out) +
                          " not divisible by groups " + std::to_string(geometry.groups));
    }
    const std::size_t fan_in = c_in / geometry.groups * kernel * kernel;
    weight_ = store.add(name + ".weight",
                        uniform_tensor(Shape(c_out, c_in / geometry.groups, kernel, kernel),
                                       1.0 / std::sqrt(static_cast<double>(fan_in)), rng));
    if (bn_) {
        const Shape v(1, c_out, 1, 1);
        gamma_ = store.add(name + ".bn.gamma", Tensor(v, 1.0f));
        beta_ = store.add(name + ".bn.beta", Tensor(v, 0.0f));
        mean_ = store.add(name + ".bn.running_mean", Tensor(v, 0.0f), false);
        var_ = store.add(name + ".bn.running_var", Tensor(v, 1.0f), false);
    }
}

std::vector<std::size_t> ConvUnit::indices() const {
    if (bn_) return {weight_, gamma_, beta_, mean_, var_};
    return {weight_};
}

template <class T>
Var ConvUnit::run(Tape<T>& t, const BasicParamStore<T>& store, Var x, ForwardContext<T>& ctx) const {
    Var y = ad::conv2d(t, x, t.param(store, weight_), geometry_);
    if (!bn_) return y;
    ad::BatchNormState<T> st;
    if (ctx.mode == Mode::Infer) {
        st.running_mean = &store.value(mean_);
        st.running_var = &store.value(var_);
    } else if (ctx.stats) {
        st.update_mean = &ctx.stats->value(mean_);
        st.update_var = &ctx.stats->value(var_);
    }
    return ad::batch_norm(t, y, t.param(store, gamma_), t.param(store, beta_), st, ctx.mode);
}

// SE ------------------------------------------------------------------------

SeBlock::SeBlock(ParamStore& store, const std::string& name, std::size_t channels, std::size_t ratio,
                 std::mt19937_64& rng)
    : channels_(channels), hidden_(0) {
    if (ratio == 0 || channels == 0) throw ConfigError(name + ": SE needs positive channels and ratio");
    hidden_ = (channels + ratio - 1) / ratio;
    const double b1 = 1.0 / std::sqrt(static_cast<double>(channels));
    const double b2 = 1.0 / std::sqrt(static_cast<double>(hidden_));
    fc1_ = own(store.add(name + ".fc1.weight", uniform_tensor(Shape(hidden_, channels, 1, 1), b1, rng)));
    fc2_ = own(store.add(name + ".fc2.weight", uniform_tensor(Shape(channels, hidden_, 1, 1), b2, rng)));
    verify_count(store);
}

Shape SeBlock::output_shape(const Shape& input) const {
    require_channels(input, channels_, "SE");
    return input;
}

std::size_t SeBlock::expected_trainable() const { return 2 * channels_ * hidden_; }

template <class T>
Var SeBlock::run(Tape<T>& t, const BasicParamStore<T>& store, Var x, ForwardContext<T>&) const {
    output_shape(t.value(x).shape());
    Var s = ad::global_avg_pool(t, x);
    s = ad::relu(t, ad::linear(t, s, t.param(store, fc1_)));
    s = ad::sigmoid(t, ad::linear(t, s, t.param(store, fc2_)));
    return ad::scale_channels(t, x, s);
}

// SE-LN ---------------------------------------------------------------------

SeLnBlock::SeLnBlock(ParamStore& store, const std::string& name, std::size_t channels) : channels_(channels) {
    const Shape v(1, channels, 1, 1);
    gamma_ = own(store.add(name + ".ln.gamma", Tensor(v, 1.0f)));
    beta_ = own(store.add(name + ".ln.beta", Tensor(v, 0.0f)));
    verify_count(store);
}

Shape SeLnBlock::output_shape(const Shape& input) const {
    require_channels(input, channels_, "SE-LN");
    return input;
}

template <class T>
Var SeLnBlock::run(Tape<T>& t, const BasicParamStore<T>& store, Var x, ForwardContext<T>&) const {
    output_shape(t.value(x).shape());
    Var s = ad::global_avg_pool(t, x);
    s = ad::layer_norm_channels(t, s, t.param(store, gamma_), t.param(store, beta_));
    s = ad::sigmoid(t, s);
    return ad::scale_channels(t, x, s);
}

// ME ------------------------------------------------------------------------

MeBlock::MeBlock(ParamStore& store, const std::string& name, std::size_t c_in, std::size_t c_out,
                 std::mt19937_64& rng)
    : c_in_(c_in), c_out_(c_out), proj_(store, name + ".pw", c_in, c_out, 1, {}, true, rng) {
    own(proj_);
    verify_count(store);
}

Shape MeBlock::output_shape(const Shape& input) const {
    require_channels(input, c_in_, "ME");
    require_even(input, "ME");
    return Shape(input.n(), c_out_, input.h() / 2, input.w() / 2);
}

template <class T>
Var MeBlock::run(Tape<T>& t, const BasicParamStore<T>& store, Var x, ForwardContext<T>& ctx) const {
    output_shape(t.value(x).shape());
    return proj_.run(t, store, ad::pool2d(t, x, 2, 2, PoolMode::Max), ctx);
}

// EVE -----------------------------------------------------------------------

template <class T>
BasicTensor<T> extreme_values(const BasicTensor<T>& x) {
    return concat_channels(pool2d(x, 2, 2, PoolMode::Max), pool2d(x, 2, 2, PoolMode::Min));
}

EveBlock::EveBlock(ParamStore& store, const std::string& name, std::size_t c_in, std::size_t c_out,
                   std::mt19937_64& rng)
    : c_in_(c_in), c_out_(c_out), proj_(store, name + ".pw", 2 * c_in, c_out, 1, {}, true, rng) {
    own(proj_);
    verify_count(store);
}

Shape EveBlock::output_shape(const Shape& input) const {
    require_channels(input, c_in_, "EVE");
    require_even(input, "EVE");
    return Shape(input.n(), c_out_, input.h() / 2, input.w() / 2);
}

template <class T>
Var EveBlock::run(Tape<T>& t, const BasicParamStore<T>& store, Var x, ForwardContext<T>& ctx) const {
    output_shape(t.value(x).shape());
    Var hi = ad::pool2d(t, x, 2, 2, PoolMode::Max);
    Var lo = ad::pool2d(t, x, 2, 2, PoolMode::Min);
    return proj_.run(t, store, ad::concat_channels(t, hi, lo), ctx);
}

// FCT -----------------------------------------------------------------------

FctBlock::FctBlock(ParamStore& store, const std::string& name, std::size_t c_out, std::mt19937_64& rng)
    : c_out_(c_out),
      dw_(store, name + ".dw", 3, 3, 4, ConvGeometry{2, 1, 3}, false, rng),
      proj_(store, name + ".pw", 9, c_out, 1, {}, true, rng) {
    own(dw_);
    own(proj_);
    verify_count(store);
}

Shape FctBlock::output_shape(const Shape& input) const {
    if (input.c() != 3) {
        throw ConfigError("FCT: input block requires 3 input channels, got " + std::to_string(input.c()));
    }
    require_even(input, "FCT");
    const Shape dw = conv2d_output_shape(input, Shape(3, 1, 4, 4), dw_.geometry());
    const Shape pooled = pool2d_output_shape(input, 2, 2);
    if (dw.h() != pooled.h() || dw.w() != pooled.w()) {
        throw ShapeError("FCT: depthwise branch " + dw.to_string() + " and pooled branch " + pooled.to_string() +
                         " differ spatially");
    }
    return Shape(input.n(), c_out_, pooled.h(), pooled.w());
}

template <class T>
Var FctBlock::run(Tape<T>& t, const BasicParamStore<T>& store, Var x, ForwardContext<T>& ctx) const {
    output_shape(t.value(x).shape());
    Var d = dw_.run(t, store, x, ctx);
    Var hi = ad::pool2d(t, x, 2, 2, PoolMode::Max);
    Var lo = ad::pool2d(t, x, 2, 2, PoolMode::Min);
    Var joined = ad::concat_channels(t, d, ad::concat_channels(t, hi, lo));
    return proj_.run(t, store, joined, ctx);
}

// DFSEBV2 -------------------------------------------------------------------

std::size_t dfsebv2_param_count(std::size_t channels, GateKind gate, std::size_t se_ratio) {
    const std::size_t c = channels;
    const std::size_t units = 2 * (9 * c + 2 * c + c * c + 2 * c);
    const std::size_t hidden = (c + se_ratio - 1) / se_ratio;
    return units + (gate == GateKind::LN ? 2 * c : 2 * c * hidden);
}

Dfsebv2Block::Dfsebv2Block(ParamStore& store, const std::string& name, std::size_t channels, GateKind gate,
                           std::size_t se_ratio, std::mt19937_64& rng)
    : channels_(channels),
      gate_kind_(gate),
      se_ratio_(se_ratio),
      dw1_(store, name + ".dw1", channels, channels, 3, ConvGeometry{1, 1, channels}, true, rng),
      pw1_(store, name + ".pw1", channels, channels, 1, {}, true, rng) {
    own(dw1_);
    own(pw1_);
    if (gate == GateKind::LN) {
        gate_ = std::make_unique<SeLnBlock>(store, name + ".gate", channels);
    } else {
        gate_ = std::make_unique<SeBlock>(store, name + ".gate", channels, se_ratio, rng);
    }
    own(*gate_);
    dw2_ = ConvUnit(store, name + ".dw2", channels, channels, 3, ConvGeometry{1, 1, channels}, true, rng);
    pw2_ = ConvUnit(store, name + ".pw2", channels, channels, 1, {}, true, rng);
    own(dw2_);
    own(pw2_);
    verify_count(store);
}

Shape Dfsebv2Block::output_shape(const Shape& input) const {
    require_channels(input, channels_, "DFSEBV2");
    if (input.h() == 0 || input.w() == 0) throw ShapeError("DFSEBV2: empty input " + input.to_string());
    return input;
}

std::size_t Dfsebv2Block::expected_trainable() const {
    return dfsebv2_param_count(channels_, gate_kind_, se_ratio_);
}

template <class T>
Var Dfsebv2Block::run(Tape<T>& t, const BasicParamStore<T>& store, Var x, ForwardContext<T>& ctx) const {
    output_shape(t.value(x).shape());
    Var u = pw1_.run(t, store, dw1_.run(t, store, x, ctx), ctx);
    u = ad::hard_swish(t, u);
    u = gate_->forward(t, store, u, ctx);
    Var v = pw2_.run(t, store, dw2_.run(t, store, u, ctx), ctx);
    return ad::add(t, x, v);
}

// Tail ----------------------------------------------------------------------

DepthwiseConvLayer::DepthwiseConvLayer(ParamStore& store, const std::string& name, std::size_t channels,
                                       std::size_t kernel, std::mt19937_64& rng)
    : channels_(channels),
      kernel_(kernel),
      conv_(store, name, channels, channels, kernel, ConvGeometry{1, kernel / 2, channels}, true, rng) {
    if (kernel % 2 == 0) throw ConfigError(name + ": depthwise kernel must be odd to preserve extents");
    own(conv_);
    verify_count(store);
}

Shape DepthwiseConvLayer::output_shape(const Shape& input) const {
    require_channels(input, channels_, "Depthwise Conv");
    return conv2d_output_shape(input, Shape(channels_, 1, kernel_, kernel_), conv_.geometry());
}

template <class T>
Var DepthwiseConvLayer::run(Tape<T>& t, const BasicParamStore<T>& store, Var x, ForwardContext<T>& ctx) const {
    return conv_.run(t, store, x, ctx);
}

Shape GlobalAvgPoolLayer::output_shape(const Shape& input) const {
    if (input.h() == 0 || input.w() == 0) throw ShapeError("Average pooling: empty input " + input.to_string());
    return Shape(input.n(), input.c(), 1, 1);
}

DropoutLayer::DropoutLayer(double rate) : rate_(rate) {
    if (!(rate >= 0.0 && rate < 1.0)) throw ConfigError("Dropout: rate " + std::to_string(rate) + " outside [0,1)");
}

template <class T>
Var DropoutLayer::run(Tape<T>& t, const BasicParamStore<T>&, Var x, ForwardContext<T>& ctx) const {
    if (ctx.mode == Mode::Infer || rate_ == 0.0) return x;
    if (!ctx.rng) throw ContractError("Dropout: train mode requires a random generator");
    return ad::dropout(t, x, rate_, *ctx.rng, ctx.mode);
}

LinearLayer::LinearLayer(ParamStore& store, const std::string& name, std::size_t c_in, std::size_t c_out,
                         std::mt19937_64& rng)
    : c_in_(c_in), c_out_(c_out) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(c_in));
    weight_ = own(store.add(name + ".weight", uniform_tensor(Shape(c_out, c_in, 1, 1), bound, rng)));
    bias_ = own(store.add(name + ".bias", uniform_tensor(Shape(1, c_out, 1, 1), bound, rng)));
    verify_count(store);
}

Shape LinearLayer::output_shape(const Shape& input) const {
    if (input.c() != c_in_ || input.h() * input.w() != 1) {
        throw ConfigError("FC: input " + input.to_string() + " incompatible with " + std::to_string(c_in_) +
                          " input features");
    }
    return Shape(input.n(), c_out_, 1, 1);
}

template <class T>
Var LinearLayer::run(Tape<T>& t, const BasicParamStore<T>& store, Var x, ForwardContext<T>&) const {
    output_shape(t.value(x).shape());
    return ad::linear(t, x, t.param(store, weight_), t.param(store, bias_));
}

template <class T>
BasicTensor<T> run_layer(const Layer& layer, const BasicParamStore<T>& store, const BasicTensor<T>& x, Mode mode) {
    Tape<T> t(false);
    ForwardContext<T> ctx;
    ctx.mode = mode;
    return t.value(layer.forward(t, store, t.input(x), ctx));
}

template BasicTensor<float> extreme_values(const BasicTensor<float>&);
template BasicTensor<double> extreme_values(const BasicTensor<double>&);
template Tensor run_layer(const Layer&, const ParamStore&, const Tensor&, Mode);
template Tensor64 run_layer(const Layer&, const BasicParamStore<double>&, const Tensor64&, Mode);

#define XQNET_INSTANTIATE_RUN(Cls, T) \
    template Var Cls::run<T>(Tape<T>&, const BasicParamStore<T>&, Var, ForwardContext<T>&) const;
#define XQNET_INSTANTIATE_ALL(T)                   \
    XQNET_INSTANTIATE_RUN(ConvUnit, T)             \
    XQNET_INSTANTIATE_RUN(SeBlock, T)              \
    XQNET_INSTANTIATE_RUN(SeLnBlock, T)            \
    XQNET_INSTANTIATE_RUN(MeBlock, T)              \
    XQNET_INSTANTIATE_RUN(EveBlock, T)             \
    XQNET_INSTANTIATE_RUN(FctBlock, T)             \
    XQNET_INSTANTIATE_RUN(Dfsebv2Block, T)         \
    XQNET_INSTANTIATE_RUN(DepthwiseConvLayer, T)   \
    XQNET_INSTANTIATE_RUN(DropoutLayer, T)         \
    XQNET_INSTANTIATE_RUN(LinearLayer, T)

XQNET_INSTANTIATE_ALL(float)
XQNET_INSTANTIATE_ALL(double)

#undef XQNET_INSTANTIATE_ALL
#undef XQNET_INSTANTIATE_RUN

}  // namespace xqnet
