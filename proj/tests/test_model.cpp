#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "oracles.hpp"
#include "xqnet/model.hpp"

using namespace xqnet;
namespace fs = std::filesystem;

namespace {

// Closed-form trainable counts per row, written out independently of the
// block code: bias-free convs, 2C per batch norm.
std::size_t bn(std::size_t c) { return 2 * c; }
std::size_t dfsebv2(std::size_t c, bool se) {
    const std::size_t unit = 9 * c + bn(c) + c * c + bn(c);
    return 2 * unit + (se ? 2 * c * ((c + 2) / 3) : 2 * c);
}
std::vector<std::size_t> expected_rows(bool se, std::size_t classes) {
    return {16 * 3 + 9 * 12 + bn(12), dfsebv2(12, se),  24 * 48 + bn(48),   dfsebv2(48, se),
            48 * 96 + bn(96),         dfsebv2(96, se),  96 * 192 + bn(192), dfsebv2(192, se),
            192 * 384 + bn(384),      dfsebv2(384, se), 9 * 384 + bn(384),  0,
            0,                        0,                384 * classes + classes};
}

fs::path temp_file(const std::string& name) { return fs::temp_directory_path() / ("xqnet_test_" + name); }

Tensor random_images(std::size_t n, std::size_t hw, std::uint32_t seed) {
    std::mt19937 rng(seed);
    return oracle::random_tensor(Shape(n, 3, hw, hw), rng, 0.0f, 1.0f);
}

}  // namespace

TEST_CASE("standard spec mirrors the architecture table") {
    const ModelSpec s = ModelSpec::standard(Variant::LN);
    REQUIRE(s.layers.size() == 15);
    const std::vector<std::size_t> chain{12, 12, 48, 48, 96, 96, 192, 192, 384, 384, 384};
    for (std::size_t i = 0; i < chain.size(); ++i) CHECK(s.layers[i].channels == chain[i]);
    CHECK(s.dropout_rate == 0.2);
    CHECK(s.num_classes == 1000);
}

TEST_CASE("parameter counts for 1000 classes") {
    const Model ln = Model::build(ModelSpec::standard(Variant::LN), 1);
    const Model se = Model::build(ModelSpec::standard(Variant::SE), 1);
    const ParamCount a = ln.param_count(), b = se.param_count();

    const auto rows_ln = expected_rows(false, 1000), rows_se = expected_rows(true, 1000);
    REQUIRE(a.layers.size() == 15);
    std::size_t sum_ln = 0, sum_se = 0;
    for (std::size_t i = 0; i < 15; ++i) {
        CHECK(a.layers[i].trainable == rows_ln[i]);
        CHECK(b.layers[i].trainable == rows_se[i]);
        sum_ln += rows_ln[i];
        sum_se += rows_se[i];
    }
    CHECK(a.trainable == sum_ln);
    CHECK(b.trainable == sum_se);
    CHECK(a.trainable == 901228);
    CHECK(b.trainable == 1030420);
    CHECK(b.trainable - a.trainable == 129192);

    CHECK(std::abs(double(a.trainable) - 899300.0) / 899300.0 <= 0.02);
    CHECK(std::abs(double(b.trainable) - 1028500.0) / 1028500.0 <= 0.02);
    CHECK(a.trainable < b.trainable);
    CHECK(b.trainable < 1235400);

    // running mean and variance: 2C per batch norm, never trainable
    const std::size_t buffers = bn(12) + 4 * bn(12) + bn(48) + 4 * bn(48) + bn(96) + 4 * bn(96) + bn(192) +
                                4 * bn(192) + bn(384) + 4 * bn(384) + bn(384);
    CHECK(a.buffers == buffers);
    CHECK(ln.params().trainable_count() == a.trainable);
    CHECK(ln.params().buffer_count() == a.buffers);
}

TEST_CASE("every stored tensor belongs to exactly one layer") {
    const Model m = Model::build(ModelSpec::standard(Variant::SE, 10), 2);
    std::vector<int> owners(m.params().size(), 0);
    for (const auto& layer : m.layers())
        for (std::size_t i : layer->param_indices()) owners[i]++;
    for (int o : owners) CHECK(o == 1);
}

TEST_CASE("builds are deterministic per seed") {
    const ModelSpec s = ModelSpec::standard(Variant::LN, 10);
    const Model a = Model::build(s, 7), b = Model::build(s, 7), c = Model::build(s, 8);
    CHECK(a.params().identical(b.params()));
    CHECK_FALSE(a.params().identical(c.params()));
}

TEST_CASE("invalid channel chains are rejected with the offending row") {
    const ModelSpec s = ModelSpec::parse("eve out=48\nfct out=12\n");
    try {
        Model::build(s, 1);
        FAIL("expected SpecError");
    } catch (const SpecError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("row 2") != std::string::npos);
        CHECK(msg.find("3 input channels") != std::string::npos);
    }

    ModelSpec t = ModelSpec::standard(Variant::LN, 10);
    t.layers[3].channels = 40;
    try {
        Model::build(t, 1);
        FAIL("expected SpecError");
    } catch (const SpecError& e) {
        CHECK(std::string(e.what()).find("row 4") != std::string::npos);
    }
}

TEST_CASE("shape trace at 224 reproduces the table") {
    const Model m = Model::build(ModelSpec::standard(Variant::LN), 3);
    const auto rows = m.shape_trace(Shape(1, 3, 224, 224));
    struct Want {
        const char* input;
        const char* op;
        const char* out;
    };
    const Want want[15] = {{"224^2x3", "FCT", "12"},         {"112^2x12", "DFSEBV2", "12"},
                           {"112^2x12", "EVE", "48"},        {"56^2x48", "DFSEBV2", "48"},
                           {"56^2x48", "ME", "96"},          {"28^2x96", "DFSEBV2", "96"},
                           {"28^2x96", "ME", "192"},         {"14^2x192", "DFSEBV2", "192"},
                           {"14^2x192", "ME", "384"},        {"7^2x384", "DFSEBV2", "384"},
                           {"7^2x384", "Depthwise Conv", "384"}, {"7^2x384", "Hard Swish", "384"},
                           {"7^2x384", "Average pooling", "384"}, {"1^2x384", "Dropout", "384"},
                           {"1^2x384", "FC", "-"}};
    REQUIRE(rows.size() == 15);
    for (std::size_t i = 0; i < 15; ++i) {
        CHECK(table_shape(rows[i].input) == want[i].input);
        CHECK(rows[i].op == want[i].op);
        CHECK((rows[i].out_channels ? std::to_string(*rows[i].out_channels) : "-") == want[i].out);
        if (i + 1 < 15) CHECK(rows[i].output == rows[i + 1].input);
    }
    CHECK(rows.back().output == Shape(1, 1000, 1, 1));
}

TEST_CASE("shape trace at other sizes") {
    const Model m = Model::build(ModelSpec::standard(Variant::LN, 10), 3);
    const auto rows = m.shape_trace(Shape(1, 3, 32, 32));
    CHECK(rows[12].input == Shape(1, 384, 1, 1));
    for (std::size_t hw : {64, 96, 160}) {
        const auto r = m.shape_trace(Shape(2, 3, hw, hw));
        for (std::size_t i = 0; i + 1 < r.size(); ++i) CHECK(r[i].output == r[i + 1].input);
    }
    CHECK_THROWS_AS(m.shape_trace(Shape(1, 3, 20, 20)), ShapeError);
    CHECK_THROWS_AS(m.shape_trace(Shape(1, 1, 32, 32)), ShapeError);
}

TEST_CASE("forward") {
    Model m = Model::build(ModelSpec::standard(Variant::LN, 10), 4);
    const Tensor zero(Shape(1, 3, 32, 32), 0.0f);
    const Tensor logits = m.infer(zero);
    CHECK(logits.shape() == Shape(1, 10, 1, 1));
    CHECK(logits.all_finite());

    const Tensor x = random_images(2, 32, 4);
    const Tensor y = m.infer(x);
    CHECK(y.identical(m.infer(x)));

    // batch independence with running statistics
    const Tensor y0 = m.infer(slice_batch(x, 0, 1));
    const Tensor y1 = m.infer(slice_batch(x, 1, 1));
    std::vector<Tensor> parts{y0, y1};
    CHECK(oracle::max_abs_diff(y, concat_batch<float>(parts)) <= 1e-5);

    // dropout is the identity at inference
    const Model no_drop = Model::build(ModelSpec::standard(Variant::LN, 10, 0.0), 4);
    const Model heavy = Model::build(ModelSpec::standard(Variant::LN, 10, 0.9), 4);
    CHECK(no_drop.infer(x).identical(y));
    CHECK(heavy.infer(x).identical(y));

    CHECK_THROWS_AS(m.infer(Tensor(Shape(1, 3, 20, 20))), ShapeError);

    std::mt19937_64 rng(4);
    const Tensor t = m.forward(x, Mode::Train, &rng);
    CHECK(t.all_finite());
    // train mode moved the running statistics
    CHECK_FALSE(m.infer(x).identical(y));
}

TEST_CASE("model description text") {
    const ModelSpec s = ModelSpec::standard(Variant::SE, 10, 0.3);
    const ModelSpec p = ModelSpec::parse(s.to_text());
    CHECK(p.to_text() == s.to_text());
    CHECK(p.variant == Variant::SE);
    CHECK(p.num_classes == 10);
    CHECK(p.dropout_rate == 0.3);
    CHECK(Model::build(p, 1).params().identical(Model::build(s, 1).params()));

    const std::string text = "# tiny\nfct out=12\n\ndfsebv2 c=12 gate=ln size=3\n";
    try {
        ModelSpec::parse(text);
        FAIL("expected SpecError");
    } catch (const SpecError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("line 4") != std::string::npos);
        CHECK(msg.find("size") != std::string::npos);
    }
    CHECK_THROWS_AS(ModelSpec::parse("conv out=3\n"), SpecError);
    CHECK_THROWS_AS(ModelSpec::parse("fct\n"), SpecError);
    CHECK_THROWS_AS(ModelSpec::parse("fct out=-2\n"), SpecError);
    CHECK_THROWS_AS(ModelSpec::parse("dfsebv2 c=3 gate=ln\ndfsebv2 c=3 gate=se\n"), SpecError);
    CHECK_THROWS_AS(ModelSpec::parse("dropout p=1.5\n"), SpecError);
    CHECK_THROWS_AS(ModelSpec::parse("# nothing\n"), SpecError);
}

TEST_CASE("checkpoint round trip and load errors") {
    const Model m = Model::build(ModelSpec::standard(Variant::LN, 10), 5);
    const fs::path path = temp_file("ln.ckpt");
    save_weights(m, path.string());

    Model other = Model::build(ModelSpec::standard(Variant::LN, 10), 6);
    load_weights(other, path.string());
    CHECK(other.params().identical(m.params()));

    const Checkpoint ck = load_checkpoint(path.string());
    CHECK(ck.variant == Variant::LN);
    CHECK(ck.num_classes == 10);

    // truncated
    const auto size = fs::file_size(path);
    const fs::path cut = temp_file("cut.ckpt");
    fs::copy_file(path, cut, fs::copy_options::overwrite_existing);
    fs::resize_file(cut, size - 7);
    Model fresh = Model::build(ModelSpec::standard(Variant::LN, 10), 6);
    const Model pristine = Model::build(ModelSpec::standard(Variant::LN, 10), 6);
    try {
        load_weights(fresh, cut.string());
        FAIL("expected LoadError");
    } catch (const LoadError& e) {
        CHECK(e.kind() == LoadError::Kind::Truncated);
    }
    CHECK(fresh.params().identical(pristine.params()));

    // magic and version
    auto patch = [&](std::size_t offset, char byte) {
        const fs::path p = temp_file("patched.ckpt");
        fs::copy_file(path, p, fs::copy_options::overwrite_existing);
        std::fstream f(p, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(static_cast<std::streamoff>(offset));
        f.put(byte);
        return p.string();
    };
    try {
        load_checkpoint(patch(0, 'Y'));
        FAIL("expected LoadError");
    } catch (const LoadError& e) {
        CHECK(e.kind() == LoadError::Kind::BadMagic);
    }
    try {
        load_checkpoint(patch(4, 9));
        FAIL("expected LoadError");
    } catch (const LoadError& e) {
        CHECK(e.kind() == LoadError::Kind::BadVersion);
    }
    try {
        load_checkpoint(temp_file("missing.ckpt").string());
        FAIL("expected LoadError");
    } catch (const LoadError& e) {
        CHECK(e.kind() == LoadError::Kind::Io);
    }

    // SE weights into an LN model
    const Model se = Model::build(ModelSpec::standard(Variant::SE, 10), 5);
    const fs::path se_path = temp_file("se.ckpt");
    save_weights(se, se_path.string());
    try {
        load_weights(fresh, se_path.string());
        FAIL("expected LoadError");
    } catch (const LoadError& e) {
        CHECK(e.kind() == LoadError::Kind::ShapeMismatch);
        CHECK(std::string(e.what()).find("layers.1.dfsebv2.gate") != std::string::npos);
    }
    CHECK(fresh.params().identical(pristine.params()));

    for (const auto& p : {path, cut, se_path, temp_file("patched.ckpt")}) fs::remove(p);
}
