#pragma once

// Inference throughput over a list of batch sizes.

#include <cstddef>
#include <cstdint>
#include <ostream>
#include <vector>

#include "xqnet/model.hpp"

namespace xqnet {

struct BenchRow {
    std::size_t batch = 0;
    double img_per_s = 0.0;
    double mean_ms = 0.0;
    double std_ms = 0.0;
    int repeats = 0;
};

struct BenchReport {
    std::vector<BenchRow> rows;

    static constexpr const char* kHeader = "batch,img_per_s,mean_ms,std_ms,repeats";
    void write_csv(std::ostream& out) const;
};

struct BenchOptions {
    std::vector<std::size_t> batches{1, 10, 50};
    int repeats = 5;
    int warmup = 1;
    std::size_t hw = 224;
    /// >1 shards each batch across threads.
    std::size_t threads = 1;
    std::uint64_t seed = 0;
};

/// Infer-mode forwards on seeded uniform inputs. Input generation and
/// warmup are outside the timed region.
BenchReport bench_throughput(const Model& model, const BenchOptions& opts);

}  // namespace xqnet
