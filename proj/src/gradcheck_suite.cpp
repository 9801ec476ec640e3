#include <algorithm>
#include <cmath>
#include <numeric>

#include "xqnet/blocks.hpp"
#include "xqnet/gradcheck.hpp"

namespace xqnet {

namespace {

template <class T>
T scalar_of(const BasicParamStore<T>&);

template <class Store>
using scalar_t = decltype(scalar_of(std::declval<const Store&>()));

double uniform(std::mt19937_64& rng, double lo, double hi) {
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    return lo + (hi - lo) * u;
}

Tensor random_tensor(Shape s, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t(s);
    for (float& v : t.data()) v = static_cast<float>(uniform(rng, lo, hi));
    return t;
}

// Values stay away from the given kinks by at least `gap`.
Tensor away_from(Shape s, std::mt19937_64& rng, std::vector<double> kinks, double gap, double span) {
    Tensor t(s);
    for (float& v : t.data()) {
        double x = 0.0;
        bool ok = false;
        while (!ok) {
            x = uniform(rng, -span, span);
            ok = std::all_of(kinks.begin(), kinks.end(), [&](double k) { return std::abs(x - k) > gap; });
        }
        v = static_cast<float>(x);
    }
    return t;
}

// Distinct values on a 0.01 grid, shuffled, so no perturbation can create a tie.
Tensor tie_free(Shape s, std::mt19937_64& rng) {
    Tensor t(s);
    std::vector<std::size_t> order(t.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = 0.01f * static_cast<float>(order[i]) - 1.0f;
    return t;
}

GradCheckRow row(const std::string& name, const GradCheckReport& r, double tol) {
    return GradCheckRow{name, r.max_rel_error, tol};
}

// The loss projects the op output onto fixed random weights so no
// gradient is identically zero by symmetry.
template <class Build>
GradCheckReport check_op(ParamStore store, Shape out_shape, std::mt19937_64& rng, Build build,
                         const GradCheckOptions& opts) {
    const Tensor w = random_tensor(out_shape, rng);
    auto loss = [&](auto& tape, auto& st) {
        using T = scalar_t<std::decay_t<decltype(st)>>;
        Var y = build(tape, st);
        return ad::weighted_sum(tape, y, w.template cast<T>());
    };
    return finite_diff_check<double, double>(loss, store.cast<double>(), opts);
}

}  // namespace

std::vector<GradCheckRow> run_gradcheck_suite(std::uint64_t seed) {
    constexpr double op_tol = 1e-3;
    constexpr double block_tol = 1e-2;
    std::mt19937_64 rng(seed);
    GradCheckOptions opts;
    opts.seed = seed;
    std::vector<GradCheckRow> rows;

    {
        ParamStore s;
        s.add("x", random_tensor(Shape(2, 4, 6, 5), rng));
        s.add("w", random_tensor(Shape(6, 4, 3, 3), rng));
        s.add("b", random_tensor(Shape(1, 6, 1, 1), rng));
        const ConvGeometry g{1, 1, 1};
        auto r = check_op(s, Shape(2, 6, 6, 5), rng, [&](auto& t, auto& st) {
            return ad::conv2d(t, t.param(st, 0), t.param(st, 1), g, t.param(st, 2));
        }, opts);
        rows.push_back(row("conv2d", r, op_tol));
    }
    {
        ParamStore s;
        s.add("x", random_tensor(Shape(2, 3, 8, 8), rng));
        s.add("w", random_tensor(Shape(3, 1, 4, 4), rng));
        const ConvGeometry g{2, 1, 3};
        auto r = check_op(s, Shape(2, 3, 4, 4), rng, [&](auto& t, auto& st) {
            return ad::conv2d(t, t.param(st, 0), t.param(st, 1), g);
        }, opts);
        rows.push_back(row("conv2d_depthwise_s2", r, op_tol));
    }
    {
        ParamStore s;
        s.add("x", random_tensor(Shape(2, 5, 3, 3), rng));
        s.add("w", random_tensor(Shape(4, 5, 1, 1), rng));
        auto r = check_op(s, Shape(2, 4, 3, 3), rng, [&](auto& t, auto& st) {
            return ad::conv2d(t, t.param(st, 0), t.param(st, 1), ConvGeometry{});
        }, opts);
        rows.push_back(row("conv2d_pointwise", r, op_tol));
    }
    for (auto [name, mode] : {std::pair{"max_pool", PoolMode::Max}, std::pair{"min_pool", PoolMode::Min},
                              std::pair{"avg_pool", PoolMode::Avg}}) {
        ParamStore s;
        s.add("x", tie_free(Shape(2, 3, 6, 6), rng));
        const PoolMode m = mode;
        auto r = check_op(s, Shape(2, 3, 3, 3), rng, [&](auto& t, auto& st) {
            return ad::pool2d(t, t.param(st, 0), 2, 2, m);
        }, opts);
        rows.push_back(row(name, r, op_tol));
    }
    {
        ParamStore s;
        s.add("x", random_tensor(Shape(2, 4, 3, 5), rng));
        auto r = check_op(s, Shape(2, 4, 1, 1), rng,
                          [&](auto& t, auto& st) { return ad::global_avg_pool(t, t.param(st, 0)); }, opts);
        rows.push_back(row("global_avg_pool", r, op_tol));
    }
    for (Mode mode : {Mode::Train, Mode::Infer}) {
        ParamStore s;
        s.add("x", random_tensor(Shape(3, 4, 3, 3), rng, -2.0, 2.0));
        s.add("gamma", random_tensor(Shape(1, 4, 1, 1), rng, 0.5, 1.5));
        s.add("beta", random_tensor(Shape(1, 4, 1, 1), rng));
        s.add("running_mean", random_tensor(Shape(1, 4, 1, 1), rng), false);
        s.add("running_var", random_tensor(Shape(1, 4, 1, 1), rng, 0.5, 2.0), false);
        auto r = check_op(s, Shape(3, 4, 3, 3), rng, [&](auto& t, auto& st) {
            using T = scalar_t<std::decay_t<decltype(st)>>;
            ad::BatchNormState<T> bn;
            bn.running_mean = &st.value(3);
            bn.running_var = &st.value(4);
            return ad::batch_norm(t, t.param(st, 0), t.param(st, 1), t.param(st, 2), bn, mode);
        }, opts);
        rows.push_back(row(mode == Mode::Train ? "batch_norm_train" : "batch_norm_infer", r, op_tol));
    }
    {
        ParamStore s;
        s.add("x", random_tensor(Shape(3, 6, 1, 1), rng, -2.0, 2.0));
        s.add("gamma", random_tensor(Shape(1, 6, 1, 1), rng, 0.5, 1.5));
        s.add("beta", random_tensor(Shape(1, 6, 1, 1), rng));
        auto r = check_op(s, Shape(3, 6, 1, 1), rng, [&](auto& t, auto& st) {
            return ad::layer_norm_channels(t, t.param(st, 0), t.param(st, 1), t.param(st, 2));
        }, opts);
        rows.push_back(row("layer_norm", r, op_tol));
    }
    {
        ParamStore s;
        s.add("x", away_from(Shape(2, 4, 4, 4), rng, {-3.0, 3.0}, 0.1, 5.0));
        auto r = check_op(s, Shape(2, 4, 4, 4), rng,
                          [&](auto& t, auto& st) { return ad::hard_swish(t, t.param(st, 0)); }, opts);
        rows.push_back(row("hard_swish", r, op_tol));
    }
    {
        ParamStore s;
        s.add("x", away_from(Shape(2, 4, 3, 3), rng, {0.0}, 0.1, 2.0));
        auto r = check_op(s, Shape(2, 4, 3, 3), rng,
                          [&](auto& t, auto& st) { return ad::relu(t, t.param(st, 0)); }, opts);
        rows.push_back(row("relu", r, op_tol));
    }
    {
        ParamStore s;
        s.add("x", random_tensor(Shape(2, 4, 3, 3), rng, -4.0, 4.0));
        auto r = check_op(s, Shape(2, 4, 3, 3), rng,
                          [&](auto& t, auto& st) { return ad::sigmoid(t, t.param(st, 0)); }, opts);
        rows.push_back(row("sigmoid", r, op_tol));
    }
    {
        ParamStore s;
        s.add("x", random_tensor(Shape(3, 5, 1, 1), rng));
        s.add("w", random_tensor(Shape(4, 5, 1, 1), rng));
        s.add("b", random_tensor(Shape(1, 4, 1, 1), rng));
        auto r = check_op(s, Shape(3, 4, 1, 1), rng, [&](auto& t, auto& st) {
            return ad::linear(t, t.param(st, 0), t.param(st, 1), t.param(st, 2));
        }, opts);
        rows.push_back(row("linear", r, op_tol));
    }
    {
        ParamStore s;
        s.add("x", random_tensor(Shape(2, 3, 4, 4), rng));
        s.add("s", random_tensor(Shape(2, 3, 1, 1), rng));
        auto r = check_op(s, Shape(2, 3, 4, 4), rng, [&](auto& t, auto& st) {
            return ad::scale_channels(t, t.param(st, 0), t.param(st, 1));
        }, opts);
        rows.push_back(row("scale_channels", r, op_tol));
    }
    {
        ParamStore s;
        s.add("a", random_tensor(Shape(2, 3, 3, 3), rng));
        s.add("b", random_tensor(Shape(2, 3, 3, 3), rng));
        auto r = check_op(s, Shape(2, 3, 3, 3), rng, [&](auto& t, auto& st) {
            return ad::add(t, t.param(st, 0), t.param(st, 1));
        }, opts);
        rows.push_back(row("add", r, op_tol));
    }
    {
        ParamStore s;
        s.add("a", random_tensor(Shape(2, 2, 3, 3), rng));
        s.add("b", random_tensor(Shape(2, 3, 3, 3), rng));
        auto r = check_op(s, Shape(2, 5, 3, 3), rng, [&](auto& t, auto& st) {
            return ad::concat_channels(t, t.param(st, 0), t.param(st, 1));
        }, opts);
        rows.push_back(row("concat_channels", r, op_tol));
    }
    {
        ParamStore s;
        s.add("x", random_tensor(Shape(2, 4, 3, 3), rng));
        const std::uint64_t mask_seed = rng();
        auto r = check_op(s, Shape(2, 4, 3, 3), rng, [&](auto& t, auto& st) {
            std::mt19937_64 local(mask_seed);
            return ad::dropout(t, t.param(st, 0), 0.3, local, Mode::Train);
        }, opts);
        rows.push_back(row("dropout", r, op_tol));
    }
    {
        ParamStore s;
        s.add("z", random_tensor(Shape(4, 6, 1, 1), rng, -3.0, 3.0));
        const std::vector<int> labels{0, 5, 2, 2};
        auto loss = [&](auto& t, auto& st) {
            return ad::softmax_cross_entropy(t, t.param(st, 0), std::span<const int>(labels));
        };
        rows.push_back(row("softmax_cross_entropy", finite_diff_check<double, double>(loss, s.cast<double>(), opts),
                           op_tol));
    }

    // Composite residual blocks: float tape against a 64-bit reference.
    for (GateKind gate : {GateKind::LN, GateKind::SE}) {
        ParamStore s;
        const std::size_t x_index = s.add("x", random_tensor(Shape(2, 6, 5, 5), rng, -2.0, 2.0));
        const Dfsebv2Block block(s, "block", 6, gate, 3, rng);
        const Tensor w = random_tensor(Shape(2, 6, 5, 5), rng);
        auto loss = [&](auto& t, auto& st) {
            using T = scalar_t<std::decay_t<decltype(st)>>;
            ForwardContext<T> ctx;
            ctx.mode = Mode::Train;
            Var y = block.forward(t, st, t.param(st, x_index), ctx);
            return ad::weighted_sum(t, y, w.template cast<T>());
        };
        GradCheckOptions o = opts;
        o.eps = 1e-4;
        o.floor = 1e-3;
        auto r = finite_diff_check<float, double>(loss, s, o);
        rows.push_back(row(gate == GateKind::LN ? "dfsebv2_ln_f32" : "dfsebv2_se_f32", r, block_tol));
    }
    return rows;
}

}  // namespace xqnet
