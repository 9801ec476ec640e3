#include "xqnet/bench.hpp"

#include <chrono>
#include <cmath>
#include <iomanip>
#include <random>
#include <thread>

#include "xqnet/errors.hpp"

namespace xqnet {

namespace {

void run_batch(const Model& model, const Tensor& x, std::size_t threads) {
    const std::size_t n = x.shape().n();
    threads = std::min(threads, n);
    if (threads <= 1) {
        (void)model.infer(x);
        return;
    }
    const std::size_t per = x.size() / n;
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) {
        const std::size_t lo = n * t / threads, hi = n * (t + 1) / threads;
        pool.emplace_back([&, lo, hi] {
            Tensor part(Shape(hi - lo, x.shape().c(), x.shape().h(), x.shape().w()));
            std::copy(x.data().begin() + static_cast<std::ptrdiff_t>(lo * per),
                      x.data().begin() + static_cast<std::ptrdiff_t>(hi * per), part.data().begin());
            (void)model.infer(part);
        });
    }
    for (auto& th : pool) th.join();
}

}  // namespace

void BenchReport::write_csv(std::ostream& out) const {
    out << kHeader << '\n';
    out << std::setprecision(17);
    for (const BenchRow& r : rows)
        out << r.batch << ',' << r.img_per_s << ',' << r.mean_ms << ',' << r.std_ms << ',' << r.repeats << '\n';
}

BenchReport bench_throughput(const Model& model, const BenchOptions& opts) {
    if (opts.repeats < 3) throw ConfigError("bench: repeats must be at least 3");
    if (opts.warmup < 1) throw ConfigError("bench: warmup must be at least 1");
    if (opts.threads < 1) throw ConfigError("bench: threads must be at least 1");
    BenchReport report;
    std::mt19937_64 rng(opts.seed);
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    for (std::size_t b : opts.batches) {
        if (b == 0) throw ConfigError("bench: batch sizes must be positive");
        Tensor x(Shape(b, 3, opts.hw, opts.hw));
        for (float& v : x.data()) v = u(rng);

        for (int i = 0; i < opts.warmup; ++i) run_batch(model, x, opts.threads);

        std::vector<double> ms;
        for (int i = 0; i < opts.repeats; ++i) {
            const auto t0 = std::chrono::steady_clock::now();
            run_batch(model, x, opts.threads);
            const auto t1 = std::chrono::steady_clock::now();
            ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
        }
        double mean = 0.0;
        for (double m : ms) mean += m;
        mean /= static_cast<double>(ms.size());
        double var = 0.0;
        for (double m : ms) var += (m - mean) * (m - mean);
        var /= static_cast<double>(ms.size() - 1);

        BenchRow row;
        row.batch = b;
        row.mean_ms = mean;
        row.std_ms = std::sqrt(var);
        row.repeats = opts.repeats;
        row.img_per_s = static_cast<double>(b) * 1000.0 / mean;
        report.rows.push_back(row);
    }
    return report;
}

}  // namespace xqnet
