#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "xqnet/ops.hpp"
#include "xqnet/params.hpp"

namespace xqnet {

/// Handle to a value recorded on a Tape.
struct Var {
    static constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();
    std::size_t id = npos;

    bool valid() const noexcept { return id != npos; }
};

/// Records forward computations for reverse-mode differentiation.
///
/// Nodes are appended in execution order, so the node list is already a
/// topological order. A tape created with `record = false` keeps values
/// only: no closures are stored and backward() is rejected.
template <class T>
class Tape {
public:
    using ForwardFn = std::function<BasicTensor<T>(const Tape&)>;
    using BackwardFn = std::function<void(Tape&, const BasicTensor<T>& grad_out)>;

    explicit Tape(bool record = true) : record_(record) {}

    bool recording() const noexcept { return record_; }

    /// Leaf holding data; its gradient is kept on the tape after backward().
    Var input(BasicTensor<T> value);

    /// Leaf aliasing entry `index` of `store`; gradients land in the GradStore
    /// passed to backward(). The store must outlive the tape.
    Var param(const BasicParamStore<T>& store, std::size_t index);

    Var push(BasicTensor<T> value, ForwardFn forward, BackwardFn backward);

    const BasicTensor<T>& value(Var v) const;
    std::size_t size() const noexcept { return nodes_.size(); }

    /// Number of nodes carrying a backward closure.
    std::size_t recorded_ops() const noexcept;

    /// Accumulates d(loss)/d(param) into `grads` and keeps input-leaf and
    /// intermediate gradients on the tape. Gradients not reached stay zero.
    void backward(Var loss, BasicGradStore<T>& grads);

    BasicGradStore<T> backward(Var loss, const BasicParamStore<T>& params);

    /// Gradient of the last backward() w.r.t. a non-parameter node, or null.
    const BasicTensor<T>* grad(Var v) const;

    /// Gradient buffer used by backward closures; lazily zero-initialised.
    BasicTensor<T>& grad_buffer(Var v);

    /// Node ids in the order the last backward() visited them.
    const std::vector<std::size_t>& backward_order() const noexcept { return visit_order_; }

    /// Re-executes every recorded node from its recorded inputs and checks
    /// the result is bitwise identical to the stored value.
    bool replay_matches() const;

private:
    struct Node {
        BasicTensor<T> owned;
        const BasicTensor<T>* alias = nullptr;
        std::size_t param_index = Var::npos;
        ForwardFn forward;
        BackwardFn backward;
        std::optional<BasicTensor<T>> grad;
    };

    bool record_;
    std::deque<Node> nodes_;
    std::vector<std::size_t> visit_order_;
    BasicGradStore<T>* active_grads_ = nullptr;
};

/// Differentiable wrappers over the kernels in ops.hpp.
namespace ad {

template <class T>
Var conv2d(Tape<T>& t, Var x, Var weight, const ConvGeometry& g, Var bias = {});

template <class T>
Var pool2d(Tape<T>& t, Var x, std::size_t k, std::size_t stride, PoolMode mode);

template <class T>
Var global_avg_pool(Tape<T>& t, Var x);

/// Infer mode reads running_mean/running_var. Train mode normalizes by
/// batch statistics and, when update_mean/update_var are set, folds them in.
template <class T>
struct BatchNormState {
    const BasicTensor<T>* running_mean = nullptr;
    const BasicTensor<T>* running_var = nullptr;
    BasicTensor<T>* update_mean = nullptr;
    BasicTensor<T>* update_var = nullptr;
    T eps = T(1e-5);
    T momentum = T(0.1);
};

template <class T>
Var batch_norm(Tape<T>& t, Var x, Var gamma, Var beta, const BatchNormState<T>& state, Mode mode);

template <class T>
Var layer_norm_channels(Tape<T>& t, Var x, Var gamma, Var beta, T eps = T(1e-5));

template <class T>
Var hard_swish(Tape<T>& t, Var x);

template <class T>
Var relu(Tape<T>& t, Var x);

template <class T>
Var sigmoid(Tape<T>& t, Var x);

template <class T>
Var linear(Tape<T>& t, Var x, Var weight, Var bias = {});

template <class T>
Var scale_channels(Tape<T>& t, Var x, Var scale);

template <class T>
Var add(Tape<T>& t, Var a, Var b);

template <class T>
Var concat_channels(Tape<T>& t, Var a, Var b);

/// The mask is drawn once at record time; replay reuses it.
template <class T>
Var dropout(Tape<T>& t, Var x, double p, std::mt19937_64& rng, Mode mode);

/// Mean cross-entropy over the batch as a (1,1,1,1) node.
template <class T>
Var softmax_cross_entropy(Tape<T>& t, Var logits, std::span<const int> labels);

/// Sum of all elements as a (1,1,1,1) node.
template <class T>
Var sum(Tape<T>& t, Var x);

/// sum(x * weights) for a fixed weight tensor; used to project outputs to
/// a scalar when checking gradients.
template <class T>
Var weighted_sum(Tape<T>& t, Var x, BasicTensor<T> weights);

}  // namespace ad

}  // namespace xqnet
