#pragma once

// SGD training with a loss-plateau learning-rate schedule.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "xqnet/data.hpp"
#include "xqnet/model.hpp"

namespace xqnet {

struct TrainConfig {
    double initial_lr = 0.05;
    double lr_factor = 0.1;
    int patience = 5;
    int max_epochs = 150;
    double target_loss = 0.01;
    std::size_t batch_size = 50;
    std::uint64_t seed = 0;
    double momentum = 0.0;

    /// Same protocol with the larger CIFAR-10 batch.
    static TrainConfig cifar10() {
        TrainConfig c;
        c.batch_size = 64;
        return c;
    }
};

struct SchedulerState {
    double best_loss = std::numeric_limits<double>::infinity();
    int epochs_since_improvement = 0;
    double current_lr = 0.0;

    static SchedulerState start(const TrainConfig& cfg) {
        SchedulerState s;
        s.current_lr = cfg.initial_lr;
        return s;
    }
};

/// Strictly lower loss counts as improvement; after `patience` epochs
/// without one the rate is multiplied by the factor and the count restarts.
double scheduler_update(SchedulerState& state, double epoch_loss, const TrainConfig& cfg);

/// "target_loss" when the epoch loss is below target, "epochs" when the
/// epoch budget is spent, nothing otherwise. Epochs count from 1.
std::optional<std::string> stop_reason(double epoch_loss, int epoch, const TrainConfig& cfg);

/// theta -= lr * v with v = momentum * v + g; plain SGD when momentum is 0.
/// `velocity` is resized on first use and must persist between calls.
void sgd_step(ParamStore& params, const GradStore& grads, double lr, double momentum,
              std::vector<Tensor>& velocity);

struct EpochRecord {
    int epoch = 0;
    double loss = 0.0;
    double lr = 0.0;
    double seconds = 0.0;
};

struct History {
    std::vector<EpochRecord> epochs;
    std::string stop_reason;

    /// epoch,loss,lr,seconds with round-trip precision.
    void write_csv(std::ostream& out) const;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Seeded shuffle each epoch; epoch loss is the mean per-image loss.
/// Throws TrainingError on a non-finite batch loss.
History train_loop(Model& model, const Dataset& train, const TrainConfig& cfg, const EpochCallback& on_epoch = {});

/// Index of the largest logit per row; ties go to the lowest index.
std::vector<int> predict(const Tensor& logits);

/// Infer-mode accuracy in [0,1]. `threads` > 1 shards the set.
double evaluate(const Model& model, const Dataset& test, std::size_t batch_size = 100, std::size_t threads = 1);

}  // namespace xqnet
