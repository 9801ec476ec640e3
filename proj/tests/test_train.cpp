#include "doctest.h"

#include <cmath>
#include <cstring>
#include <random>
#include <sstream>

#include "xqnet/train.hpp"

using namespace xqnet;

namespace {

ParamStore scalar_store(float v) {
    ParamStore s;
    s.add("theta", Tensor(Shape(1, 1, 1, 1), v));
    return s;
}

GradStore scalar_grad(float g) {
    GradStore gs;
    gs.grads.emplace_back(Shape(1, 1, 1, 1), g);
    return gs;
}

ModelSpec tiny_spec(std::size_t classes) { return ModelSpec::standard(Variant::LN, classes); }

}  // namespace

TEST_CASE("default configuration") {
    const TrainConfig c;
    CHECK(c.initial_lr == 0.05);
    CHECK(c.lr_factor == 0.1);
    CHECK(c.patience == 5);
    CHECK(c.max_epochs == 150);
    CHECK(c.target_loss == 0.01);
    CHECK(c.batch_size == 50);
    CHECK(c.momentum == 0.0);
    CHECK(TrainConfig::cifar10().batch_size == 64);
}

TEST_CASE("sgd_step") {
    std::vector<Tensor> vel;
    ParamStore s = scalar_store(1.0f);
    sgd_step(s, scalar_grad(1.0f), 0.05, 0.0, vel);
    CHECK(s.value(0)[0] == 0.95f);

    ParamStore z = scalar_store(0.3f);
    sgd_step(z, scalar_grad(0.0f), 0.05, 0.0, vel);
    CHECK(z.value(0)[0] == 0.3f);

    // v = 1, then v = 0.9 + 1 = 1.9
    std::vector<Tensor> v2;
    ParamStore m = scalar_store(0.0f);
    sgd_step(m, scalar_grad(1.0f), 0.1, 0.9, v2);
    sgd_step(m, scalar_grad(1.0f), 0.1, 0.9, v2);
    CHECK(m.value(0)[0] == doctest::Approx(-0.29).epsilon(1e-6));

    GradStore bad;
    bad.grads.emplace_back(Shape(1, 2, 1, 1));
    CHECK_THROWS_AS(sgd_step(s, bad, 0.1, 0.0, vel), ContractError);

    // buffers are never touched
    ParamStore b;
    b.add("running_var", Tensor(Shape(1, 1, 1, 1), 1.0f), false);
    GradStore none = b.make_grads();
    sgd_step(b, none, 0.1, 0.0, vel);
    CHECK(b.value(0)[0] == 1.0f);
}

TEST_CASE("plateau schedule hand trace") {
    const TrainConfig cfg;
    SchedulerState s = SchedulerState::start(cfg);
    const double losses[7] = {1.0, 0.9, 0.91, 0.92, 0.93, 0.94, 0.95};
    const double lr_after[7] = {0.05, 0.05, 0.05, 0.05, 0.05, 0.05, 0.005};
    for (int i = 0; i < 7; ++i) {
        CHECK(scheduler_update(s, losses[i], cfg) == doctest::Approx(lr_after[i]).epsilon(1e-12));
    }
    CHECK(s.epochs_since_improvement == 0);
    CHECK(s.best_loss == 0.9);

    SchedulerState d = SchedulerState::start(cfg);
    for (int i = 0; i < 40; ++i) CHECK(scheduler_update(d, 1.0 - 0.01 * i, cfg) == 0.05);

    // equal loss is not an improvement
    SchedulerState e = SchedulerState::start(cfg);
    for (int i = 0; i < 11; ++i) scheduler_update(e, 0.5, cfg);
    CHECK(e.current_lr == doctest::Approx(0.0005).epsilon(1e-12));
}

TEST_CASE("learning rate stays on the 0.05 * 0.1^k ladder and never rises") {
    const TrainConfig cfg;
    std::mt19937_64 rng(40);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    SchedulerState s = SchedulerState::start(cfg);
    double prev = cfg.initial_lr;
    for (int i = 0; i < 200; ++i) {
        const double lr = scheduler_update(s, u(rng), cfg);
        CHECK(lr <= prev);
        const double k = std::log10(cfg.initial_lr / lr);
        CHECK(std::abs(k - std::round(k)) <= 1e-9);
        prev = lr;
    }
}

TEST_CASE("stop condition branches") {
    const TrainConfig cfg;
    CHECK(stop_reason(0.009, 3, cfg) == std::optional<std::string>("target_loss"));
    CHECK(stop_reason(0.5, 150, cfg) == std::optional<std::string>("epochs"));
    CHECK(stop_reason(0.005, 150, cfg) == std::optional<std::string>("target_loss"));
    CHECK_FALSE(stop_reason(0.01, 149, cfg).has_value());
    CHECK_FALSE(stop_reason(0.5, 1, cfg).has_value());
}

TEST_CASE("train_loop bookkeeping and determinism") {
    const Dataset ds = synth_dataset(12, 3, 32, 41);
    TrainConfig cfg;
    cfg.max_epochs = 1;
    cfg.batch_size = 5;
    cfg.seed = 3;

    Model m = Model::build(tiny_spec(3), 41);
    const History h = train_loop(m, ds, cfg);
    REQUIRE(h.epochs.size() == 1);
    CHECK(h.stop_reason == "epochs");
    CHECK(h.epochs[0].lr == 0.05);
    CHECK(std::isfinite(h.epochs[0].loss));

    cfg.max_epochs = 2;
    Model a = Model::build(tiny_spec(3), 41), b = Model::build(tiny_spec(3), 41);
    const History ha = train_loop(a, ds, cfg), hb = train_loop(b, ds, cfg);
    REQUIRE(ha.epochs.size() == 2);
    for (std::size_t i = 0; i < 2; ++i) CHECK(std::memcmp(&ha.epochs[i].loss, &hb.epochs[i].loss, sizeof(double)) == 0);
    CHECK(a.params().identical(b.params()));

    TrainConfig easy = cfg;
    easy.target_loss = 100.0;
    Model c = Model::build(tiny_spec(3), 41);
    const History hc = train_loop(c, ds, easy);
    CHECK(hc.epochs.size() == 1);
    CHECK(hc.stop_reason == "target_loss");

    std::ostringstream csv;
    ha.write_csv(csv);
    CHECK(csv.str().rfind("epoch,loss,lr,seconds\n", 0) == 0);
}

TEST_CASE("train_loop aborts on a non-finite loss") {
    const Dataset ds = synth_dataset(6, 3, 32, 42);
    Model m = Model::build(tiny_spec(3), 42);
    const std::size_t fc = *m.params().find("layers.14.fc.bias");
    m.params().value(fc)[0] = std::numeric_limits<float>::quiet_NaN();
    TrainConfig cfg;
    cfg.batch_size = 4;
    try {
        train_loop(m, ds, cfg);
        FAIL("expected TrainingError");
    } catch (const TrainingError& e) {
        CHECK(e.epoch() == 1);
        CHECK(e.batch() == 0);
    }
}

TEST_CASE("predict breaks ties toward the lowest class") {
    const Tensor t(Shape(3, 4, 1, 1), {0, 0, 0, 0, 1, 3, 3, 2, -1, -2, -0.5f, -3});
    CHECK(predict(t) == std::vector<int>{0, 1, 2});
}

TEST_CASE("evaluate") {
    const Dataset ds = synth_dataset(20, 10, 32, 43);
    Model m = Model::build(tiny_spec(10), 43);

    // recount by hand, one image at a time
    std::size_t hits = 0;
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const std::size_t idx[1] = {i};
        const Tensor logits = m.infer(ds.batch(idx));
        std::size_t best = 0;
        for (std::size_t k = 1; k < 10; ++k)
            if (logits[k] > logits[best]) best = k;
        hits += static_cast<int>(best) == ds.labels[i];
    }
    const double acc = evaluate(m, ds, 7);
    CHECK(acc == doctest::Approx(static_cast<double>(hits) / 20.0));
    CHECK(evaluate(m, ds, 3, 3) == acc);

    // constant logits: everything is predicted as class 0
    m.params().value(*m.params().find("layers.14.fc.weight")).fill(0.0f);
    m.params().value(*m.params().find("layers.14.fc.bias")).fill(0.0f);
    CHECK(evaluate(m, ds) == doctest::Approx(0.1));
}
