#include "doctest.h"

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "xqnet/ops.hpp"

using namespace xqnet;
using oracle::random_tensor;

namespace {
const Tensor* const no_bias = nullptr;
}

TEST_CASE("conv2d output extents") {
    // 4x4 stride-2 pad-1 kernel halves a 224 map.
    CHECK(conv2d_output_shape(Shape(1, 3, 224, 224), Shape(3, 1, 4, 4), ConvGeometry{2, 1, 3}) ==
          Shape(1, 3, 112, 112));
    CHECK_THROWS_AS(conv2d_output_shape(Shape(1, 4, 8, 8), Shape(6, 2, 3, 3), ConvGeometry{1, 1, 3}),
                    ConfigError);
    CHECK_THROWS_AS(conv2d_output_shape(Shape(1, 1, 2, 2), Shape(1, 1, 5, 5), ConvGeometry{1, 0, 1}), ShapeError);
}

TEST_CASE("identity pointwise conv returns its input") {
    std::mt19937 rng(10);
    Tensor x = random_tensor(Shape(2, 4, 5, 3), rng);
    Tensor w(Shape(4, 4, 1, 1), 0.0f);
    for (std::size_t c = 0; c < 4; ++c) w.at(c, c, 0, 0) = 1.0f;
    CHECK(conv2d(x, w, no_bias, ConvGeometry{}).identical(x));
}

TEST_CASE("depthwise 3x3 conv matches the direct loop oracle") {
    std::mt19937 rng(11);
    Tensor x = random_tensor(Shape(1, 3, 5, 5), rng);
    Tensor w = random_tensor(Shape(3, 1, 3, 3), rng);
    Tensor got = conv2d(x, w, no_bias, ConvGeometry{1, 1, 3});
    Tensor want = oracle::naive_conv2d(x, w, 1, 1, 3);
    CHECK(got.shape() == want.shape());
    CHECK(oracle::max_rel_diff(got, want) <= 1e-5);
}

TEST_CASE("conv2d with bias adds per output channel") {
    Tensor x(Shape(1, 1, 2, 2), 0.0f);
    Tensor w(Shape(2, 1, 1, 1), 1.0f);
    Tensor b(Shape(1, 2, 1, 1), {0.5f, -1.5f});
    Tensor y = conv2d(x, w, &b, ConvGeometry{});
    CHECK(y.at(0, 0, 1, 1) == 0.5f);
    CHECK(y.at(0, 1, 0, 0) == -1.5f);
}

TEST_CASE("conv2d matches the oracle on random configurations") {
    std::mt19937 rng(12);
    std::uniform_int_distribution<std::size_t> pick(1, 4);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t groups = trial % 3 == 0 ? pick(rng) : 1;
        const std::size_t cin = groups * pick(rng), cout = groups * pick(rng);
        const std::size_t k = pick(rng), stride = pick(rng) % 3 + 1, pad = pick(rng) % 3;
        const std::size_t h = k + pick(rng) + 2, w = k + pick(rng);
        Tensor x = random_tensor(Shape(pick(rng) % 2 + 1, cin, h, w), rng);
        Tensor wt = random_tensor(Shape(cout, cin / groups, k, k), rng);
        Tensor got = conv2d(x, wt, no_bias, ConvGeometry{stride, pad, groups});
        Tensor want = oracle::naive_conv2d(x, wt, stride, pad, groups);
        REQUIRE(got.shape() == want.shape());
        CHECK(oracle::max_rel_diff(got, want) <= 1e-5);
    }
}

TEST_CASE("pool2d window values") {
    Tensor x(Shape(1, 1, 2, 2), {1.0f, 2.0f, 3.0f, 4.0f});
    CHECK(pool2d(x, 2, 2, PoolMode::Max)[0] == 4.0f);
    CHECK(pool2d(x, 2, 2, PoolMode::Min)[0] == 1.0f);
    CHECK(pool2d(x, 2, 2, PoolMode::Avg)[0] == 2.5f);

    Tensor k(Shape(1, 2, 4, 4), 1.75f);
    for (PoolMode m : {PoolMode::Max, PoolMode::Min, PoolMode::Avg}) {
        const Tensor pooled = pool2d(k, 2, 2, m);
        for (float v : pooled.data()) CHECK(v == 1.75f);
    }
    CHECK_THROWS_AS(pool2d(Tensor(Shape(1, 1, 1, 4)), 2, 2, PoolMode::Max), ShapeError);
}

TEST_CASE("min pooling is negated max pooling of the negated input, bitwise") {
    std::mt19937 rng(13);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor x = random_tensor(Shape(1, 2, 8, 8), rng);
        Tensor neg(x.shape());
        for (std::size_t i = 0; i < x.size(); ++i) neg[i] = -x[i];
        Tensor mn = pool2d(x, 2, 2, PoolMode::Min);
        Tensor mx = pool2d(neg, 2, 2, PoolMode::Max);
        for (std::size_t i = 0; i < mn.size(); ++i) CHECK(mn[i] == -mx[i]);
    }
}

TEST_CASE("max/min pool outputs are members of their windows and match the oracle") {
    std::mt19937 rng(14);
    std::uniform_int_distribution<std::size_t> pick(1, 3);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t k = pick(rng) + 1, stride = pick(rng);
        Tensor x = random_tensor(Shape(pick(rng), pick(rng), k + 2 * pick(rng), k + pick(rng)), rng);
        for (auto [mode, ref] : {std::pair{PoolMode::Max, oracle::Pool::Max}, std::pair{PoolMode::Min, oracle::Pool::Min},
                                 std::pair{PoolMode::Avg, oracle::Pool::Avg}}) {
            PoolResult<float> r = pool2d_with_source(x, k, stride, mode);
            Tensor want = oracle::naive_pool2d(x, k, stride, ref);
            REQUIRE(r.out.shape() == want.shape());
            CHECK(oracle::max_rel_diff(r.out, want) <= 1e-5);
            if (mode == PoolMode::Avg) continue;
            for (std::size_t o = 0; o < r.out.size(); ++o) CHECK(x[r.source[o]] == r.out[o]);
        }
    }
}

TEST_CASE("pool ties resolve to the first index in row-major order") {
    Tensor x(Shape(1, 1, 2, 2), {5.0f, 5.0f, 5.0f, 5.0f});
    CHECK(pool2d_with_source(x, 2, 2, PoolMode::Max).source[0] == 0);
    CHECK(pool2d_with_source(x, 2, 2, PoolMode::Min).source[0] == 0);
    Tensor y(Shape(1, 1, 2, 2), {1.0f, 7.0f, 7.0f, 1.0f});
    CHECK(pool2d_with_source(y, 2, 2, PoolMode::Max).source[0] == 1);
    CHECK(pool2d_with_source(y, 2, 2, PoolMode::Min).source[0] == 0);
}

TEST_CASE("global_avg_pool") {
    CHECK(global_avg_pool(Tensor(Shape(1, 384, 7, 7))).shape() == Shape(1, 384, 1, 1));
    CHECK(global_avg_pool(Tensor(Shape(2, 3, 4, 4), 0.25f))[5] == 0.25f);
    CHECK(global_avg_pool(Tensor(Shape(1, 1, 2, 2), {1.0f, 2.0f, 3.0f, 4.0f}))[0] == 2.5f);
}

TEST_CASE("batch_norm infer with identity statistics is the identity") {
    std::mt19937 rng(15);
    Tensor x = random_tensor(Shape(2, 3, 4, 4), rng, -3.0f, 3.0f);
    NormParams<float> p = NormParams<float>::identity(3);
    p.eps = 0.0f;
    Tensor y = batch_norm(x, p, Mode::Infer);
    CHECK(oracle::max_abs_diff(y, x) <= 1e-6);
    CHECK_THROWS_AS(batch_norm(Tensor(Shape(1, 2, 2, 2)), p, Mode::Infer), ConfigError);
}

TEST_CASE("batch_norm train normalizes each channel and matches two-pass statistics") {
    std::mt19937 rng(16);
    Tensor x = random_tensor(Shape(4, 3, 5, 5), rng, -2.0f, 6.0f);
    NormParams<float> p = NormParams<float>::identity(3);
    Tensor y = batch_norm(x, p, Mode::Train);

    std::vector<double> mean, var;
    oracle::channel_moments(y, mean, var);
    for (std::size_t c = 0; c < 3; ++c) {
        CHECK(std::abs(mean[c]) <= 1e-5);
        CHECK(std::abs(var[c] - 1.0) <= 1e-3);
    }

    oracle::channel_moments(x, mean, var);
    double worst = 0.0;
    for (std::size_t n = 0; n < 4; ++n)
        for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t i = 0; i < 5; ++i)
                for (std::size_t j = 0; j < 5; ++j) {
                    const double want = (x.at(n, c, i, j) - mean[c]) / std::sqrt(var[c] + 1e-5);
                    worst = std::max(worst, std::abs(want - y.at(n, c, i, j)));
                }
    CHECK(worst <= 1e-5);

    // running = 0.9 * init + 0.1 * batch (unbiased variance)
    const double count = 4 * 25;
    for (std::size_t c = 0; c < 3; ++c) {
        CHECK(p.running_mean[c] == doctest::Approx(0.1 * mean[c]).epsilon(1e-5));
        CHECK(p.running_var[c] == doctest::Approx(0.9 + 0.1 * var[c] * count / (count - 1)).epsilon(1e-5));
        CHECK(p.running_var[c] >= 0.0f);
    }
}

TEST_CASE("layer_norm_channels") {
    Tensor x(Shape(1, 3, 1, 1), {1.0f, 2.0f, 3.0f});
    Tensor g(Shape(1, 3, 1, 1), 1.0f), b(Shape(1, 3, 1, 1), 0.0f);
    Tensor y = layer_norm_channels(x, g, b, 1e-5f);
    // mean 2, biased variance 2/3
    const double s = 1.0 / std::sqrt(2.0 / 3.0 + 1e-5);
    CHECK(y[0] == doctest::Approx(-s).epsilon(1e-6));
    CHECK(y[1] == doctest::Approx(0.0).epsilon(1e-6));
    CHECK(y[2] == doctest::Approx(s).epsilon(1e-6));
    CHECK(y[0] == doctest::Approx(-1.2247).epsilon(1e-4));

    Tensor flat(Shape(2, 4, 1, 1), 3.0f);
    Tensor beta(Shape(1, 4, 1, 1), {0.1f, 0.2f, 0.3f, 0.4f});
    Tensor yc = layer_norm_channels(flat, Tensor(Shape(1, 4, 1, 1), 1.0f), beta, 1e-5f);
    for (std::size_t n = 0; n < 2; ++n)
        for (std::size_t c = 0; c < 4; ++c) CHECK(yc[n * 4 + c] == beta[c]);

    CHECK_THROWS_AS(layer_norm_channels(Tensor(Shape(1, 3, 2, 1)), g, b, 1e-5f), ShapeError);
    CHECK(NormParams<float>::identity(384).trainable_count() == 768);
}

TEST_CASE("hard_swish") {
    Tensor x(Shape(1, 5, 1, 1), {0.0f, 3.0f, -3.0f, 1.0f, 7.5f});
    Tensor y = hard_swish(x);
    CHECK(y[0] == 0.0f);
    CHECK(y[1] == 3.0f);
    CHECK(y[2] == 0.0f);
    CHECK(y[3] == doctest::Approx(4.0 / 6.0).epsilon(1e-4));
    CHECK(y[4] == 7.5f);

    Tensor grid(Shape(1, 1, 1, 2001));
    for (std::size_t i = 0; i < grid.size(); ++i) grid[i] = -10.0f + 0.01f * static_cast<float>(i);
    Tensor hg = hard_swish(grid);
    double lipschitz = 0.0;
    for (std::size_t i = 0; i < grid.size(); ++i) {
        if (grid[i] >= 3.0f) CHECK(hg[i] == grid[i]);
        if (grid[i] <= -3.0f) CHECK(hg[i] == 0.0f);
        if (i > 0) lipschitz = std::max(lipschitz, std::abs(double(hg[i]) - hg[i - 1]) / (double(grid[i]) - grid[i - 1]));
    }
    CHECK(lipschitz <= 2.5);
}

TEST_CASE("sigmoid") {
    Tensor x(Shape(1, 4, 1, 1), {0.0f, 2.0f, 100.0f, -100.0f});
    Tensor y = sigmoid(x);
    CHECK(y[0] == 0.5f);
    CHECK(y[1] == doctest::Approx(0.8808).epsilon(1e-4));
    CHECK(y[2] == doctest::Approx(1.0));
    CHECK(y[3] == doctest::Approx(0.0));
    CHECK(y.all_finite());

    Tensor grid(Shape(1, 1, 1, 401));
    for (std::size_t i = 0; i < grid.size(); ++i) grid[i] = -20.0f + 0.1f * static_cast<float>(i);
    Tensor sg = sigmoid(grid);
    for (std::size_t i = 0; i < sg.size(); ++i) {
        CHECK(sg[i] >= 0.0f);
        CHECK(sg[i] <= 1.0f);
        if (i > 0) CHECK(sg[i] >= sg[i - 1]);
    }
}

TEST_CASE("linear") {
    Tensor x(Shape(2, 2, 1, 1), {1.0f, -2.0f, 0.5f, 3.0f});
    Tensor eye(Shape(2, 2, 1, 1), {1.0f, 0.0f, 0.0f, 1.0f});
    CHECK(linear(x, eye, no_bias).identical(x));

    // 3x2 weights against a hand matvec.
    Tensor w(Shape(3, 2, 1, 1), {1.0f, 2.0f, -1.0f, 0.5f, 0.0f, 4.0f});
    Tensor b(Shape(1, 3, 1, 1), {0.25f, 0.0f, -1.0f});
    Tensor y = linear(x, w, &b);
    const float want[2][3] = {{1 - 4 + 0.25f, -1 - 1, -8 - 1}, {0.5f + 6 + 0.25f, -0.5f + 1.5f, 12 - 1}};
    for (std::size_t n = 0; n < 2; ++n)
        for (std::size_t o = 0; o < 3; ++o) CHECK(y[n * 3 + o] == want[n][o]);

    CHECK_THROWS_AS(linear(Tensor(Shape(1, 3, 1, 1)), w, no_bias), ConfigError);
    // 384 -> 1000 classifier head with bias
    CHECK(ConvParams<float>{Tensor(Shape(1000, 384, 1, 1)), Tensor(Shape(1, 1000, 1, 1)), {}}.param_count() ==
          385000);
}

TEST_CASE("dropout") {
    std::mt19937_64 rng(17);
    std::mt19937 frng(17);
    Tensor x = random_tensor(Shape(1, 1, 1, 1000), frng);
    CHECK(dropout(x, 0.0, rng, Mode::Train).out.identical(x));
    CHECK(dropout(x, 0.7, rng, Mode::Infer).out.identical(x));
    CHECK_THROWS_AS(dropout(x, 1.0, rng, Mode::Train), ConfigError);
    CHECK_THROWS_AS(dropout(x, -0.1, rng, Mode::Train), ConfigError);

    Tensor big(Shape(1, 1, 1, 100000), 1.0f);
    DropoutResult<float> r = dropout(big, 0.5, rng, Mode::Train);
    std::size_t kept = 0;
    double mean = 0.0;
    for (std::size_t i = 0; i < big.size(); ++i) {
        kept += r.out[i] != 0.0f;
        mean += r.out[i];
    }
    mean /= static_cast<double>(big.size());
    // binomial: sigma of the kept fraction = sqrt(p(1-p)/n); output values are 0 or 2
    const double sigma = std::sqrt(0.25 / 1e5);
    CHECK(std::abs(static_cast<double>(kept) / 1e5 - 0.5) <= 3 * sigma);
    CHECK(std::abs(mean - 1.0) <= 3 * 2 * sigma);

    std::mt19937_64 a(99), b(99);
    CHECK(dropout(big, 0.3, a, Mode::Train).out.identical(dropout(big, 0.3, b, Mode::Train).out));
}

TEST_CASE("softmax_cross_entropy") {
    std::vector<int> labels{3};
    auto uniform = softmax_cross_entropy(Tensor(Shape(1, 10, 1, 1), 0.7f), labels);
    CHECK(uniform.loss == doctest::Approx(std::log(10.0)).epsilon(1e-6));

    Tensor sharp(Shape(1, 10, 1, 1), 0.0f);
    sharp[3] = 1000.0f;
    auto s = softmax_cross_entropy(sharp, labels);
    CHECK(s.loss == doctest::Approx(0.0));
    CHECK(s.probs.all_finite());

    std::mt19937 rng(18);
    Tensor z = random_tensor(Shape(2, 4, 1, 1), rng, -3.0f, 3.0f);
    std::vector<int> lab{2, 0};
    auto r = softmax_cross_entropy(z, lab);
    double want = 0.0;
    for (std::size_t n = 0; n < 2; ++n) {
        double denom = 0.0;
        for (std::size_t k = 0; k < 4; ++k) denom += std::exp(static_cast<double>(z[n * 4 + k]));
        want += -std::log(std::exp(static_cast<double>(z[n * 4 + lab[n]])) / denom);
        double row = 0.0;
        for (std::size_t k = 0; k < 4; ++k) row += r.probs[n * 4 + k];
        CHECK(std::abs(row - 1.0) <= 1e-6);
    }
    CHECK(std::abs(r.loss - want / 2.0) <= 1e-6);

    std::vector<int> bad{0, 4};
    try {
        softmax_cross_entropy(z, bad);
        FAIL("expected DataError");
    } catch (const DataError& e) {
        CHECK(std::string(e.what()).find("index 1") != std::string::npos);
    }
}
