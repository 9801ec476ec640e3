#include "xqnet/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <random>
#include <thread>

namespace xqnet {

double scheduler_update(SchedulerState& state, double epoch_loss, const TrainConfig& cfg) {
    if (epoch_loss < state.best_loss) {
        state.best_loss = epoch_loss;
        state.epochs_since_improvement = 0;
    } else if (++state.epochs_since_improvement >= cfg.patience) {
        state.current_lr *= cfg.lr_factor;
        state.epochs_since_improvement = 0;
    }
    return state.current_lr;
}

std::optional<std::string> stop_reason(double epoch_loss, int epoch, const TrainConfig& cfg) {
    if (epoch_loss < cfg.target_loss) return std::string("target_loss");
    if (epoch >= cfg.max_epochs) return std::string("epochs");
    return std::nullopt;
}

void sgd_step(ParamStore& params, const GradStore& grads, double lr, double momentum,
              std::vector<Tensor>& velocity) {
    if (grads.size() != params.size()) throw ContractError("sgd_step: gradient store does not match parameters");
    const bool use_velocity = momentum != 0.0;
    if (use_velocity && velocity.empty()) {
        for (const auto& e : params.entries()) velocity.emplace_back(e.trainable ? e.value.shape() : Shape());
    }
    const float rate = static_cast<float>(lr), mu = static_cast<float>(momentum);
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (!params[i].trainable) continue;
        Tensor& theta = params.value(i);
        const Tensor& g = grads[i];
        if (g.shape() != theta.shape()) {
            throw ContractError("sgd_step: gradient for '" + params[i].name + "' has shape " + g.shape().to_string() +
                                ", parameter has " + theta.shape().to_string());
        }
        if (use_velocity) {
            Tensor& v = velocity[i];
            for (std::size_t j = 0; j < theta.size(); ++j) {
                v[j] = mu * v[j] + g[j];
                theta[j] -= rate * v[j];
            }
        } else {
            for (std::size_t j = 0; j < theta.size(); ++j) theta[j] -= rate * g[j];
        }
    }
}

void History::write_csv(std::ostream& out) const {
    out << "epoch,loss,lr,seconds\n";
    const auto old = out.precision(17);
    for (const auto& e : epochs) out << e.epoch << ',' << e.loss << ',' << e.lr << ',' << e.seconds << '\n';
    out.precision(old);
}

History train_loop(Model& model, const Dataset& train, const TrainConfig& cfg, const EpochCallback& on_epoch) {
    if (train.size() == 0) throw ConfigError("train_loop: empty training set");
    if (cfg.batch_size == 0 || cfg.max_epochs < 1) throw ConfigError("train_loop: batch size and epochs must be positive");

    std::mt19937_64 order_rng(cfg.seed);
    std::mt19937_64 dropout_rng(cfg.seed ^ 0x9E3779B97F4A7C15ull);
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), std::size_t{0});

    ParamStore& store = model.params();
    GradStore grads = store.make_grads();
    std::vector<Tensor> velocity;
    SchedulerState sched = SchedulerState::start(cfg);
    History history;

    for (int epoch = 1;; ++epoch) {
        const auto start = std::chrono::steady_clock::now();
        std::shuffle(order.begin(), order.end(), order_rng);
        const double lr = sched.current_lr;
        double total = 0.0;
        int batch_index = 0;
        for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size, ++batch_index) {
            const std::size_t end = std::min(order.size(), begin + cfg.batch_size);
            const std::span<const std::size_t> idx(order.data() + begin, end - begin);
            const std::vector<int> labels = train.batch_labels(idx);

            Tape<float> tape;
            ForwardContext<float> ctx;
            ctx.mode = Mode::Train;
            ctx.rng = &dropout_rng;
            ctx.stats = &store;
            const Var logits = model.forward(tape, store, tape.input(train.batch(idx)), ctx);
            const Var loss = ad::softmax_cross_entropy(tape, logits, labels);
            const double value = tape.value(loss)[0];
            if (!std::isfinite(value)) {
                throw TrainingError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                                        std::to_string(batch_index),
                                    epoch, batch_index);
            }
            grads.zero();
            tape.backward(loss, grads);
            sgd_step(store, grads, lr, cfg.momentum, velocity);
            total += value * static_cast<double>(idx.size());
        }
        const double epoch_loss = total / static_cast<double>(train.size());
        const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        history.epochs.push_back(EpochRecord{epoch, epoch_loss, lr, seconds});
        if (on_epoch) on_epoch(history.epochs.back());
        scheduler_update(sched, epoch_loss, cfg);
        if (auto reason = stop_reason(epoch_loss, epoch, cfg)) {
            history.stop_reason = *reason;
            return history;
        }
    }
}

std::vector<int> predict(const Tensor& logits) {
    const Shape& s = logits.shape();
    const std::size_t k = s.c() * s.h() * s.w();
    std::vector<int> out(s.n());
    for (std::size_t n = 0; n < s.n(); ++n) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < k; ++j) {
            if (logits[n * k + j] > logits[n * k + best]) best = j;
        }
        out[n] = static_cast<int>(best);
    }
    return out;
}

double evaluate(const Model& model, const Dataset& test, std::size_t batch_size, std::size_t threads) {
    if (test.size() == 0) throw ConfigError("evaluate: empty test set");
    if (batch_size == 0) batch_size = 1;
    threads = std::max<std::size_t>(1, std::min(threads, test.size()));

    auto count_range = [&](std::size_t lo, std::size_t hi) {
        std::size_t correct = 0;
        std::vector<std::size_t> idx;
        for (std::size_t begin = lo; begin < hi; begin += batch_size) {
            const std::size_t end = std::min(hi, begin + batch_size);
            idx.resize(end - begin);
            std::iota(idx.begin(), idx.end(), begin);
            const std::vector<int> pred = predict(model.infer(test.batch(idx)));
            for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == test.labels[begin + i];
        }
        return correct;
    };

    std::size_t correct = 0;
    if (threads == 1) {
        correct = count_range(0, test.size());
    } else {
        std::vector<std::size_t> partial(threads, 0);
        std::vector<std::thread> pool;
        const std::size_t chunk = (test.size() + threads - 1) / threads;
        for (std::size_t t = 0; t < threads; ++t) {
            const std::size_t lo = std::min(test.size(), t * chunk), hi = std::min(test.size(), lo + chunk);
            pool.emplace_back([&, t, lo, hi] { partial[t] = count_range(lo, hi); });
        }
        for (auto& th : pool) th.join();
        correct = std::accumulate(partial.begin(), partial.end(), std::size_t{0});
    }
    return static_cast<double>(correct) / static_cast<double>(test.size());
}

}  // namespace xqnet
