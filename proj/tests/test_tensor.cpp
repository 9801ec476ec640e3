#include "doctest.h"

#include <random>

#include "xqnet/tensor.hpp"

using namespace xqnet;

namespace {

Tensor random_tensor(Shape s, std::mt19937& rng) {
    std::uniform_real_distribution<float> dist(-5.0f, 5.0f);
    Tensor t(s);
    for (float& v : t.data()) v = dist(rng);
    return t;
}

}  // namespace

TEST_CASE("tensor_new fills and round-trips") {
    Tensor zeros(Shape(1, 1, 2, 2), 0.0f);
    CHECK(zeros.size() == 4);
    for (float v : zeros.data()) CHECK(v == 0.0f);

    std::vector<float> values(12);
    for (std::size_t i = 0; i < values.size(); ++i) values[i] = 0.5f * static_cast<float>(i) - 3.0f;
    Tensor t(Shape(1, 3, 2, 2), values);
    for (std::size_t i = 0; i < values.size(); ++i) CHECK(t[i] == values[i]);
    CHECK(t.at(0, 2, 1, 0) == values[10]);
}

TEST_CASE("tensor_new rejects a buffer of the wrong length") {
    try {
        Tensor bad(Shape(1, 1, 2, 2), std::vector<float>(3, 1.0f));
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        CHECK(msg.find('3') != std::string::npos);
        CHECK(msg.find('4') != std::string::npos);
    }
}

TEST_CASE("zero extents are representable") {
    Tensor empty(Shape(0, 3, 4, 4));
    CHECK(empty.size() == 0);
}

TEST_CASE("concat_channels joins along C in order") {
    std::mt19937 rng(1);
    Tensor a = random_tensor(Shape(1, 3, 4, 4), rng);
    Tensor b = random_tensor(Shape(1, 3, 4, 4), rng);
    Tensor c = concat_channels(a, b);
    CHECK(c.shape() == Shape(1, 6, 4, 4));
    CHECK(c.at(0, 0, 1, 2) == a.at(0, 0, 1, 2));
    CHECK(c.at(0, 4, 3, 3) == b.at(0, 1, 3, 3));

    CHECK(concat_channels(Tensor(Shape(1, 12, 56, 56)), Tensor(Shape(1, 12, 56, 56))).shape() ==
          Shape(1, 24, 56, 56));
    CHECK_THROWS_AS(concat_channels(Tensor(Shape(1, 3, 4, 4)), Tensor(Shape(1, 3, 5, 4))), ShapeError);
}

TEST_CASE("concat then slice recovers both operands bitwise") {
    std::mt19937 rng(2);
    for (int trial = 0; trial < 20; ++trial) {
        std::uniform_int_distribution<std::size_t> ext(1, 5);
        const std::size_t n = ext(rng), h = ext(rng), w = ext(rng);
        Tensor a = random_tensor(Shape(n, ext(rng), h, w), rng);
        Tensor b = random_tensor(Shape(n, ext(rng), h, w), rng);
        Tensor c = concat_channels(a, b);
        CHECK(slice_channels(c, 0, a.shape().c()).identical(a));
        CHECK(slice_channels(c, a.shape().c(), b.shape().c()).identical(b));
    }
}

TEST_CASE("add_elementwise") {
    Tensor a(Shape(1, 2, 1, 1), {1.0f, 2.0f});
    Tensor b(Shape(1, 2, 1, 1), {3.0f, 4.0f});
    Tensor c = add_elementwise(a, b);
    CHECK(c[0] == 4.0f);
    CHECK(c[1] == 6.0f);

    std::mt19937 rng(3);
    Tensor x = random_tensor(Shape(2, 3, 4, 5), rng);
    Tensor y = random_tensor(Shape(2, 3, 4, 5), rng);
    CHECK(add_elementwise(x, Tensor(x.shape(), 0.0f)).identical(x));
    CHECK(add_elementwise(x, y).identical(add_elementwise(y, x)));
    CHECK_THROWS_AS(add_elementwise(Tensor(Shape(1, 2, 2, 2)), Tensor(Shape(1, 2, 2, 3))), ShapeError);
}

TEST_CASE("batch slicing and stacking are inverse") {
    std::mt19937 rng(4);
    Tensor x = random_tensor(Shape(5, 2, 3, 3), rng);
    std::vector<Tensor> parts{slice_batch(x, 0, 2), slice_batch(x, 2, 3)};
    CHECK(concat_batch<float>(parts).identical(x));
}
