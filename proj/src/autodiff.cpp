#include "xqnet/autodiff.hpp"

#include <cmath>
#include <memory>
#include <string>

namespace xqnet {

template <class T>
Var Tape<T>::input(BasicTensor<T> value) {
    Node n;
    n.owned = std::move(value);
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
}

template <class T>
Var Tape<T>::param(const BasicParamStore<T>& store, std::size_t index) {
    if (index >= store.size()) throw ContractError("tape: parameter index out of range");
    if (!store[index].trainable) {
        throw ContractError("tape: '" + store[index].name + "' is a buffer, not a trainable parameter");
    }
    Node n;
    n.alias = &store.value(index);
    n.param_index = index;
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
}

template <class T>
Var Tape<T>::push(BasicTensor<T> value, ForwardFn forward, BackwardFn backward) {
    Node n;
    n.owned = std::move(value);
    if (record_) {
        n.forward = std::move(forward);
        n.backward = std::move(backward);
    }
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
}

template <class T>
const BasicTensor<T>& Tape<T>::value(Var v) const {
    if (v.id >= nodes_.size()) throw ContractError("tape: invalid variable handle");
    const Node& n = nodes_[v.id];
    return n.alias ? *n.alias : n.owned;
}

template <class T>
std::size_t Tape<T>::recorded_ops() const noexcept {
    std::size_t count = 0;
    for (const auto& n : nodes_) count += n.backward ? 1 : 0;
    return count;
}

template <class T>
BasicTensor<T>& Tape<T>::grad_buffer(Var v) {
    if (v.id >= nodes_.size()) throw ContractError("tape: invalid variable handle");
    Node& n = nodes_[v.id];
    if (n.param_index != Var::npos) {
        if (!active_grads_) throw ContractError("tape: parameter gradient requested outside backward()");
        return (*active_grads_)[n.param_index];
    }
    if (!n.grad) n.grad.emplace(value(v).shape());
    return *n.grad;
}

template <class T>
const BasicTensor<T>* Tape<T>::grad(Var v) const {
    if (v.id >= nodes_.size()) throw ContractError("tape: invalid variable handle");
    const Node& n = nodes_[v.id];
    return n.grad ? &*n.grad : nullptr;
}

template <class T>
void Tape<T>::backward(Var loss, BasicGradStore<T>& grads) {
    if (!record_) throw ContractError("backward: tape was created without recording");
    if (value(loss).size() != 1) {
        throw ContractError("backward: loss must be scalar, got " + value(loss).shape().to_string());
    }
    for (auto& n : nodes_) n.grad.reset();
    visit_order_.clear();
    active_grads_ = &grads;
    grad_buffer(loss)[0] += T(1);
    for (std::size_t id = loss.id + 1; id-- > 0;) {
        Node& n = nodes_[id];
        if (n.param_index != Var::npos || !n.grad) continue;
        visit_order_.push_back(id);
        if (n.backward) n.backward(*this, *n.grad);
    }
    active_grads_ = nullptr;
}

template <class T>
BasicGradStore<T> Tape<T>::backward(Var loss, const BasicParamStore<T>& params) {
    BasicGradStore<T> grads = params.make_grads();
    backward(loss, grads);
    return grads;
}

template <class T>
bool Tape<T>::replay_matches() const {
    for (std::size_t id = 0; id < nodes_.size(); ++id) {
        const Node& n = nodes_[id];
        if (!n.forward) continue;
        if (!n.forward(*this).identical(n.owned)) return false;
    }
    return true;
}

namespace ad {

namespace {

template <class T>
const BasicTensor<T>* optional_value(const Tape<T>& t, Var v) {
    return v.valid() ? &t.value(v) : nullptr;
}

}  // namespace

template <class T>
Var conv2d(Tape<T>& t, Var x, Var weight, const ConvGeometry& g, Var bias) {
    auto fwd = [x, weight, bias, g](const Tape<T>& tp) {
        return xqnet::conv2d(tp.value(x), tp.value(weight), optional_value(tp, bias), g);
    };
    auto bwd = [x, weight, bias, g](Tape<T>& tp, const BasicTensor<T>& go) {
        BasicTensor<T>& gx = tp.grad_buffer(x);
        BasicTensor<T>& gw = tp.grad_buffer(weight);
        BasicTensor<T>* gb = bias.valid() ? &tp.grad_buffer(bias) : nullptr;
        conv2d_backward(tp.value(x), tp.value(weight), g, go, &gx, &gw, gb);
    };
    BasicTensor<T> out = fwd(t);
    return t.push(std::move(out), fwd, bwd);
}

template <class T>
Var pool2d(Tape<T>& t, Var x, std::size_t k, std::size_t stride, PoolMode mode) {
    PoolResult<T> r = pool2d_with_source(t.value(x), k, stride, mode);
    auto source = std::make_shared<const std::vector<std::uint32_t>>(std::move(r.source));
    auto fwd = [x, k, stride, mode](const Tape<T>& tp) { return xqnet::pool2d(tp.value(x), k, stride, mode); };
    auto bwd = [x, k, stride, mode, source](Tape<T>& tp, const BasicTensor<T>& go) {
        pool2d_backward(tp.value(x).shape(), k, stride, mode, *source, go, tp.grad_buffer(x));
    };
    return t.push(std::move(r.out), fwd, bwd);
}

template <class T>
Var global_avg_pool(Tape<T>& t, Var x) {
    auto fwd = [x](const Tape<T>& tp) { return xqnet::global_avg_pool(tp.value(x)); };
    auto bwd = [x](Tape<T>& tp, const BasicTensor<T>& go) { global_avg_pool_backward(go, tp.grad_buffer(x)); };
    BasicTensor<T> out = fwd(t);
    return t.push(std::move(out), fwd, bwd);
}

template <class T>
Var batch_norm(Tape<T>& t, Var x, Var gamma, Var beta, const BatchNormState<T>& state, Mode mode) {
    const T eps = state.eps;
    if (mode == Mode::Infer) {
        if (!state.running_mean || !state.running_var) {
            throw ContractError("batch_norm: infer mode needs running statistics");
        }
        // Snapshot so replay is independent of later running-stat updates.
        const BasicTensor<T> rm = *state.running_mean;
        const BasicTensor<T> rv = *state.running_var;
        auto fwd = [x, gamma, beta, rm, rv, eps](const Tape<T>& tp) {
            return batch_norm_infer(tp.value(x), tp.value(gamma), tp.value(beta), rm, rv, eps);
        };
        auto bwd = [x, gamma, beta, rm, rv, eps](Tape<T>& tp, const BasicTensor<T>& go) {
            const BasicTensor<T>& xv = tp.value(x);
            const Shape& s = xv.shape();
            const std::size_t hw = s.h() * s.w();
            BasicTensor<T>& gx = tp.grad_buffer(x);
            BasicTensor<T>& gg = tp.grad_buffer(gamma);
            BasicTensor<T>& gb = tp.grad_buffer(beta);
            const BasicTensor<T>& ga = tp.value(gamma);
            for (std::size_t c = 0; c < s.c(); ++c) {
                const T istd = T(1) / std::sqrt(rv[c] + eps);
                for (std::size_t n = 0; n < s.n(); ++n) {
                    const std::size_t base = (n * s.c() + c) * hw;
                    for (std::size_t i = 0; i < hw; ++i) {
                        const T g = go[base + i];
                        gx[base + i] += g * ga[c] * istd;
                        gg[c] += g * (xv[base + i] - rm[c]) * istd;
                        gb[c] += g;
                    }
                }
            }
        };
        BasicTensor<T> out = fwd(t);
        return t.push(std::move(out), fwd, bwd);
    }

    auto stats = std::make_shared<BatchNormStats<T>>();
    BasicTensor<T> out = batch_norm_train(t.value(x), t.value(gamma), t.value(beta), eps, stats.get());
    if (state.update_mean && state.update_var) {
        update_running_stats(*state.update_mean, *state.update_var, *stats, state.momentum);
    }
    auto fwd = [x, gamma, beta, eps](const Tape<T>& tp) {
        return batch_norm_train<T>(tp.value(x), tp.value(gamma), tp.value(beta), eps, nullptr);
    };
    auto bwd = [x, gamma, beta, stats](Tape<T>& tp, const BasicTensor<T>& go) {
        batch_norm_backward(tp.value(x), tp.value(gamma), *stats, go, &tp.grad_buffer(x), &tp.grad_buffer(gamma),
                            &tp.grad_buffer(beta));
    };
    return t.push(std::move(out), fwd, bwd);
}

template <class T>
Var layer_norm_channels(Tape<T>& t, Var x, Var gamma, Var beta, T eps) {
    auto fwd = [x, gamma, beta, eps](const Tape<T>& tp) {
        return xqnet::layer_norm_channels(tp.value(x), tp.value(gamma), tp.value(beta), eps);
    };
    auto bwd = [x, gamma, beta, eps](Tape<T>& tp, const BasicTensor<T>& go) {
        layer_norm_channels_backward(tp.value(x), tp.value(gamma), eps, go, &tp.grad_buffer(x),
                                     &tp.grad_buffer(gamma), &tp.grad_buffer(beta));
    };
    BasicTensor<T> out = fwd(t);
    return t.push(std::move(out), fwd, bwd);
}

template <class T>
Var hard_swish(Tape<T>& t, Var x) {
    auto fwd = [x](const Tape<T>& tp) { return xqnet::hard_swish(tp.value(x)); };
    auto bwd = [x](Tape<T>& tp, const BasicTensor<T>& go) {
        hard_swish_backward(tp.value(x), go, tp.grad_buffer(x));
    };
    BasicTensor<T> out = fwd(t);
    return t.push(std::move(out), fwd, bwd);
}

template <class T>
Var relu(Tape<T>& t, Var x) {
    auto fwd = [x](const Tape<T>& tp) { return xqnet::relu(tp.value(x)); };
    auto bwd = [x](Tape<T>& tp, const BasicTensor<T>& go) { relu_backward(tp.value(x), go, tp.grad_buffer(x)); };
    BasicTensor<T> out = fwd(t);
    return t.push(std::move(out), fwd, bwd);
}

template <class T>
Var sigmoid(Tape<T>& t, Var x) {
    auto fwd = [x](const Tape<T>& tp) { return xqnet::sigmoid(tp.value(x)); };
    BasicTensor<T> out = fwd(t);
    const Var self{t.size()};
    auto bwd = [x, self](Tape<T>& tp, const BasicTensor<T>& go) {
        sigmoid_backward(tp.value(self), go, tp.grad_buffer(x));
    };
    return t.push(std::move(out), fwd, bwd);
}

template <class T>
Var linear(Tape<T>& t, Var x, Var weight, Var bias) {
    auto fwd = [x, weight, bias](const Tape<T>& tp) {
        return xqnet::linear(tp.value(x), tp.value(weight), optional_value(tp, bias));
    };
    auto bwd = [x, weight, bias](Tape<T>& tp, const BasicTensor<T>& go) {
        BasicTensor<T>* gb = bias.valid() ? &tp.grad_buffer(bias) : nullptr;
        linear_backward(tp.value(x), tp.value(weight), go, &tp.grad_buffer(x), &tp.grad_buffer(weight), gb);
    };
    BasicTensor<T> out = fwd(t);
    return t.push(std::move(out), fwd, bwd);
}

template <class T>
Var scale_channels(Tape<T>& t, Var x, Var scale) {
    auto fwd = [x, scale](const Tape<T>& tp) { return xqnet::scale_channels(tp.value(x), tp.value(scale)); };
    auto bwd = [x, scale](Tape<T>& tp, const BasicTensor<T>& go) {
        scale_channels_backward(tp.value(x), tp.value(scale), go, &tp.grad_buffer(x), &tp.grad_buffer(scale));
    };
    BasicTensor<T> out = fwd(t);
    return t.push(std::move(out), fwd, bwd);
}

template <class T>
Var add(Tape<T>& t, Var a, Var b) {
    auto fwd = [a, b](const Tape<T>& tp) { return add_elementwise(tp.value(a), tp.value(b)); };
    auto bwd = [a, b](Tape<T>& tp, const BasicTensor<T>& go) {
        accumulate(tp.grad_buffer(a), go);
        accumulate(tp.grad_buffer(b), go);
    };
    BasicTensor<T> out = fwd(t);
    return t.push(std::move(out), fwd, bwd);
}

template <class T>
Var concat_channels(Tape<T>& t, Var a, Var b) {
    auto fwd = [a, b](const Tape<T>& tp) { return xqnet::concat_channels(tp.value(a), tp.value(b)); };
    auto bwd = [a, b](Tape<T>& tp, const BasicTensor<T>& go) {
        const std::size_t ca = tp.value(a).shape().c();
        const std::size_t cb = tp.value(b).shape().c();
        accumulate(tp.grad_buffer(a), slice_channels(go, 0, ca));
        accumulate(tp.grad_buffer(b), slice_channels(go, ca, cb));
    };
    BasicTensor<T> out = fwd(t);
    return t.push(std::move(out), fwd, bwd);
}

template <class T>
Var dropout(Tape<T>& t, Var x, double p, std::mt19937_64& rng, Mode mode) {
    DropoutResult<T> r = xqnet::dropout(t.value(x), p, rng, mode);
    auto mask = std::make_shared<const BasicTensor<T>>(std::move(r.mask));
    auto fwd = [x, mask](const Tape<T>& tp) {
        const BasicTensor<T>& xv = tp.value(x);
        BasicTensor<T> out(xv.shape());
        for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] * (*mask)[i];
        return out;
    };
    auto bwd = [x, mask](Tape<T>& tp, const BasicTensor<T>& go) {
        BasicTensor<T>& gx = tp.grad_buffer(x);
        for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i] * (*mask)[i];
    };
    return t.push(std::move(r.out), fwd, bwd);
}

template <class T>
Var softmax_cross_entropy(Tape<T>& t, Var logits, std::span<const int> labels) {
    auto owned = std::make_shared<const std::vector<int>>(labels.begin(), labels.end());
    CrossEntropyResult<T> r = xqnet::softmax_cross_entropy(t.value(logits), std::span<const int>(*owned));
    auto probs = std::make_shared<const BasicTensor<T>>(std::move(r.probs));
    auto fwd = [logits, owned](const Tape<T>& tp) {
        const T loss = xqnet::softmax_cross_entropy(tp.value(logits), std::span<const int>(*owned)).loss;
        return BasicTensor<T>(Shape(1, 1, 1, 1), loss);
    };
    auto bwd = [logits, owned, probs](Tape<T>& tp, const BasicTensor<T>& go) {
        softmax_cross_entropy_backward(*probs, std::span<const int>(*owned), go[0], tp.grad_buffer(logits));
    };
    return t.push(BasicTensor<T>(Shape(1, 1, 1, 1), r.loss), fwd, bwd);
}

template <class T>
Var sum(Tape<T>& t, Var x) {
    auto fwd = [x](const Tape<T>& tp) {
        T s = 0;
        for (T v : tp.value(x).data()) s += v;
        return BasicTensor<T>(Shape(1, 1, 1, 1), s);
    };
    auto bwd = [x](Tape<T>& tp, const BasicTensor<T>& go) {
        BasicTensor<T>& gx = tp.grad_buffer(x);
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += go[0];
    };
    BasicTensor<T> out = fwd(t);
    return t.push(std::move(out), fwd, bwd);
}

template <class T>
Var weighted_sum(Tape<T>& t, Var x, BasicTensor<T> weights) {
    if (weights.shape() != t.value(x).shape()) {
        throw ShapeError("weighted_sum: weights " + weights.shape().to_string() + " vs input " +
                         t.value(x).shape().to_string());
    }
    auto w = std::make_shared<const BasicTensor<T>>(std::move(weights));
    auto fwd = [x, w](const Tape<T>& tp) {
        const BasicTensor<T>& xv = tp.value(x);
        T s = 0;
        for (std::size_t i = 0; i < xv.size(); ++i) s += xv[i] * (*w)[i];
        return BasicTensor<T>(Shape(1, 1, 1, 1), s);
    };
    auto bwd = [x, w](Tape<T>& tp, const BasicTensor<T>& go) {
        BasicTensor<T>& gx = tp.grad_buffer(x);
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += go[0] * (*w)[i];
    };
    BasicTensor<T> out = fwd(t);
    return t.push(std::move(out), fwd, bwd);
}

}  // namespace ad

#define XQNET_INSTANTIATE(T)                                                                           \
    template class Tape<T>;                                                                            \
    template Var ad::conv2d(Tape<T>&, Var, Var, const ConvGeometry&, Var);                             \
    template Var ad::pool2d(Tape<T>&, Var, std::size_t, std::size_t, PoolMode);                        \
    template Var ad::global_avg_pool(Tape<T>&, Var);                                                   \
    template Var ad::batch_norm(Tape<T>&, Var, Var, Var, const ad::BatchNormState<T>&, Mode);          \
    template Var ad::layer_norm_channels(Tape<T>&, Var, Var, Var, T);                                  \
    template Var ad::hard_swish(Tape<T>&, Var);                                                        \
    template Var ad::relu(Tape<T>&, Var);                                                              \
    template Var ad::sigmoid(Tape<T>&, Var);                                                           \
    template Var ad::linear(Tape<T>&, Var, Var, Var);                                                  \
    template Var ad::scale_channels(Tape<T>&, Var, Var);                                               \
    template Var ad::add(Tape<T>&, Var, Var);                                                          \
    template Var ad::concat_channels(Tape<T>&, Var, Var);                                              \
    template Var ad::dropout(Tape<T>&, Var, double, std::mt19937_64&, Mode);                           \
    template Var ad::softmax_cross_entropy(Tape<T>&, Var, std::span<const int>);                       \
    template Var ad::sum(Tape<T>&, Var);                                                               \
    template Var ad::weighted_sum(Tape<T>&, Var, BasicTensor<T>);

XQNET_INSTANTIATE(float)
XQNET_INSTANTIATE(double)

#undef XQNET_INSTANTIATE

}  // namespace xqnet
