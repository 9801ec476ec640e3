#pragma once

// Central-difference verification of tape gradients.
//
// The loss closure is generic over the scalar type: it is run once in the
// analytic precision to obtain backward() gradients, and repeatedly in the
// reference precision (64-bit by default) to form
//     (f(theta + eps e_i) - f(theta - eps e_i)) / (2 eps)
// for a seeded subset of coordinates of every trainable tensor.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "xqnet/autodiff.hpp"

namespace xqnet {

struct GradCheckOptions {
    double eps = 1e-3;
    std::size_t samples_per_tensor = 64;
    std::uint64_t seed = 0;
    /// Lower bound on the relative-error denominator. Coordinates whose
    /// true gradient is structurally zero (a shift absorbed by a following
    /// batch norm) otherwise compare rounding noise against itself.
    double floor = 1e-8;
};

struct GradCheckReport {
    struct TensorError {
        std::string name;
        double max_rel_error = 0.0;
        std::size_t coordinates = 0;
    };

    double max_rel_error = 0.0;
    std::size_t coordinates = 0;
    std::vector<TensorError> tensors;
};

inline double relative_error(double analytic, double numeric, double floor = 1e-8) {
    const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
    return std::abs(analytic - numeric) / denom;
}

/// `loss(tape, store)` must register parameters via tape.param(store, i),
/// return a scalar Var, and be deterministic for fixed parameters.
template <class Analytic, class Reference = double, class LossFn>
GradCheckReport finite_diff_check(LossFn&& loss, const BasicParamStore<Analytic>& params,
                                  const GradCheckOptions& opts = {}) {
    if (!(opts.eps > 0.0)) throw ContractError("finite_diff_check: eps must be positive");

    BasicParamStore<Analytic> working = params.template cast<Analytic>();
    Tape<Analytic> tape;
    const Var out = loss(tape, working);
    const BasicGradStore<Analytic> analytic = tape.backward(out, working);

    BasicParamStore<Reference> ref = params.template cast<Reference>();
    auto evaluate = [&]() -> double {
        Tape<Reference> t(false);
        const Var v = loss(t, ref);
        const auto& value = t.value(v);
        if (value.size() != 1) throw ContractError("finite_diff_check: loss must be scalar");
        return static_cast<double>(value[0]);
    };
    const double first = evaluate();
    const double second = evaluate();
    if (std::memcmp(&first, &second, sizeof(double)) != 0) {
        throw ContractError("finite_diff_check: loss closure is not deterministic");
    }

    GradCheckReport report;
    std::mt19937_64 rng(opts.seed);
    for (std::size_t i = 0; i < ref.size(); ++i) {
        if (!ref[i].trainable) continue;
        BasicTensor<Reference>& theta = ref.value(i);
        std::vector<std::size_t> coords(theta.size());
        std::iota(coords.begin(), coords.end(), std::size_t{0});
        if (coords.size() > opts.samples_per_tensor) {
            std::shuffle(coords.begin(), coords.end(), rng);
            coords.resize(opts.samples_per_tensor);
            std::sort(coords.begin(), coords.end());
        }
        GradCheckReport::TensorError te{ref[i].name, 0.0, coords.size()};
        for (std::size_t j : coords) {
            const Reference saved = theta[j];
            theta[j] = saved + static_cast<Reference>(opts.eps);
            const double plus = evaluate();
            theta[j] = saved - static_cast<Reference>(opts.eps);
            const double minus = evaluate();
            theta[j] = saved;
            const double numeric = (plus - minus) / (2.0 * opts.eps);
            const double err = relative_error(static_cast<double>(analytic[i][j]), numeric, opts.floor);
            te.max_rel_error = std::max(te.max_rel_error, err);
        }
        report.max_rel_error = std::max(report.max_rel_error, te.max_rel_error);
        report.coordinates += te.coordinates;
        report.tensors.push_back(std::move(te));
    }
    return report;
}

}  // namespace xqnet

namespace xqnet {

/// One line of the built-in verification suite.
struct GradCheckRow {
    std::string check;
    double max_rel_error = 0.0;
    double tolerance = 0.0;
    bool passed() const noexcept { return max_rel_error <= tolerance; }
};

/// Per-op checks (64-bit throughout, tolerance 1e-3) followed by the two
/// DFSEBV2 composites (32-bit analytic gradients, tolerance 1e-2).
std::vector<GradCheckRow> run_gradcheck_suite(std::uint64_t seed = 0);

}  // namespace xqnet
