#include "xqnet/cli.hpp"

#include <CLI11.hpp>

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>

#include "xqnet/bench.hpp"
#include "xqnet/data.hpp"
#include "xqnet/errors.hpp"
#include "xqnet/gradcheck.hpp"
#include "xqnet/model.hpp"
#include "xqnet/train.hpp"

namespace xqnet {

namespace {

// Published trainable totals for the two variants at 1000 classes.
constexpr std::size_t kTargetLn = 899300;
constexpr std::size_t kTargetSe = 1028500;

struct UsageError : Error {
    using Error::Error;
};

std::uint64_t default_seed() {
    const char* env = std::getenv("XQNET_SEED");
    if (!env || !*env) return 0;
    try {
        std::size_t pos = 0;
        const unsigned long long v = std::stoull(env, &pos);
        if (pos != std::string(env).size()) throw std::invalid_argument("trailing");
        return v;
    } catch (const std::exception&) {
        throw UsageError(std::string("XQNET_SEED must be a non-negative integer, got '") + env + "'");
    }
}

struct ModelOpts {
    std::string variant = "ln";
    std::size_t classes = 1000;
    std::string spec_path;

    void add(CLI::App* cmd, bool with_variant = true) {
        if (with_variant) cmd->add_option("--variant", variant, "ln or se")->capture_default_str();
        cmd->add_option("--classes", classes, "number of classes")->capture_default_str();
        cmd->add_option("--spec", spec_path, "layer list file (overrides --variant/--classes)");
    }

    ModelSpec resolve() const {
        if (!spec_path.empty()) return ModelSpec::load(spec_path);
        return ModelSpec::standard(parse_variant(variant), classes);
    }
};

std::string cell(const std::optional<std::size_t>& v) { return v ? std::to_string(*v) : "-"; }

struct DataOpts {
    std::string source;
    std::string cifar_dir;
    std::size_t samples = 0;
    std::size_t hw = 32;

    void add(CLI::App* cmd) {
        cmd->add_option("--data", source, "cifar10 or synth")
            ->required()
            ->check(CLI::IsMember({"cifar10", "synth"}));
        cmd->add_option("--cifar-dir", cifar_dir, "directory with the binary batches (default $XQNET_CIFAR_DIR)");
        cmd->add_option("--samples", samples, "number of images to use (0 = all for cifar10, 64 for synth)");
        cmd->add_option("--hw", hw, "synthetic image size")->capture_default_str();
    }

    std::string dir() const {
        if (!cifar_dir.empty()) return cifar_dir;
        const char* env = std::getenv("XQNET_CIFAR_DIR");
        if (!env || !*env) throw UsageError("cifar10 needs --cifar-dir or XQNET_CIFAR_DIR");
        return env;
    }

    Dataset pick(Dataset ds, std::uint64_t seed) const {
        if (samples == 0 || samples == ds.size()) return ds;
        if (samples > ds.size())
            throw ConfigError("--samples " + std::to_string(samples) + " exceeds the " + std::to_string(ds.size()) +
                              " available images");
        return random_split(ds, samples, seed).first;
    }
};

}  // namespace

int cli_dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"xqnet: lightweight CNN engine"};
    app.name("xqnet");
    app.require_subcommand(1);

    std::optional<std::uint64_t> seed_flag;
    auto seed_of = [&] { return seed_flag ? *seed_flag : default_seed(); };
    auto add_seed = [&](CLI::App* cmd) {
        cmd->add_option("--seed", seed_flag, "seed (default $XQNET_SEED or 0)");
    };

    // summarize
    auto* summarize = app.add_subcommand("summarize", "per-layer parameter counts");
    std::string sum_variant = "both";
    ModelOpts sum_model;
    summarize->add_option("--variant", sum_variant, "ln, se or both")
        ->capture_default_str()
        ->check(CLI::IsMember({"ln", "se", "both"}));
    sum_model.add(summarize, false);

    // trace
    auto* trace = app.add_subcommand("trace", "per-layer shape table");
    std::size_t trace_input = 224;
    ModelOpts trace_model;
    trace->add_option("--input", trace_input, "input resolution")->capture_default_str();
    trace_model.add(trace);

    // gradcheck
    auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient verification");
    add_seed(gradcheck);

    // train
    auto* train = app.add_subcommand("train", "SGD with plateau schedule");
    DataOpts train_data;
    ModelOpts train_model;
    train_model.classes = 10;
    TrainConfig cfg;
    std::string weights_out, history_out;
    train_data.add(train);
    train_model.add(train);
    train->add_option("--epochs", cfg.max_epochs, "epoch budget")->capture_default_str();
    train->add_option("--batch", cfg.batch_size, "batch size (default 50, 64 for cifar10)");
    train->add_option("--lr", cfg.initial_lr, "initial learning rate")->capture_default_str();
    train->add_option("--factor", cfg.lr_factor, "plateau factor")->capture_default_str();
    train->add_option("--patience", cfg.patience, "plateau patience")->capture_default_str();
    train->add_option("--target", cfg.target_loss, "stop below this loss")->capture_default_str();
    train->add_option("--momentum", cfg.momentum, "SGD momentum")->capture_default_str();
    train->add_option("--out", weights_out, "write weights here");
    train->add_option("--history", history_out, "write history CSV here instead of stdout");
    add_seed(train);

    // eval
    auto* eval = app.add_subcommand("eval", "accuracy of a saved checkpoint");
    DataOpts eval_data;
    std::string weights_in, eval_spec;
    std::size_t eval_threads = 1;
    eval_data.add(eval);
    eval->add_option("--weights", weights_in, "checkpoint file")->required();
    eval->add_option("--spec", eval_spec, "layer list file the checkpoint was trained with");
    eval->add_option("--threads", eval_threads, "worker threads")->capture_default_str();
    add_seed(eval);

    // bench
    auto* bench = app.add_subcommand("bench", "inference throughput");
    BenchOptions bopts;
    ModelOpts bench_model;
    bench->add_option("--batches", bopts.batches, "comma separated batch sizes")->delimiter(',');
    bench->add_option("--repeats", bopts.repeats, "timed repeats per batch size")->capture_default_str();
    bench->add_option("--warmup", bopts.warmup, "untimed warmup runs")->capture_default_str();
    bench->add_option("--hw", bopts.hw, "input resolution")->capture_default_str();
    bench->add_option("--threads", bopts.threads, "shard each batch over threads")->capture_default_str();
    bench_model.add(bench);
    add_seed(bench);

    try {
        std::vector<std::string> rev(args.rbegin(), args.rend());
        app.parse(rev);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "xqnet: " << e.what() << "\n";
        const auto subs = app.get_subcommands();
        err << (subs.empty() ? app.help() : subs.front()->help());
        return 2;
    }

    try {
        if (*summarize) {
            out << "variant,row,operator,out_channels,trainable,buffers,target,deviation\n";
            std::vector<Variant> vs;
            if (sum_variant != "se") vs.push_back(Variant::LN);
            if (sum_variant != "ln") vs.push_back(Variant::SE);
            if (!sum_model.spec_path.empty()) vs = {Variant::LN};
            std::size_t totals[2] = {0, 0};
            for (Variant v : vs) {
                ModelSpec spec = sum_model.spec_path.empty() ? ModelSpec::standard(v, sum_model.classes)
                                                             : ModelSpec::load(sum_model.spec_path);
                const Model m = Model::build(spec, 0);
                const ParamCount pc = m.param_count();
                const std::string name = variant_name(spec.variant);
                for (const LayerCount& l : pc.layers)
                    out << name << ',' << l.row << ',' << l.op << ',' << l.out_channels << ',' << l.trainable << ','
                        << l.buffers << ",,\n";
                out << name << ",total,,," << pc.trainable << ',' << pc.buffers << ',';
                // the published totals only apply to the stock layout with 1000 classes
                if (sum_model.spec_path.empty() && sum_model.classes == 1000) {
                    const std::size_t target = v == Variant::LN ? kTargetLn : kTargetSe;
                    const double dev = std::abs(static_cast<double>(pc.trainable) - static_cast<double>(target)) /
                                       static_cast<double>(target);
                    out << target << ',' << std::fixed << std::setprecision(4) << dev << std::defaultfloat;
                    err << name << ": " << pc.trainable << " trainable vs " << target << " (" << std::fixed
                        << std::setprecision(2) << dev * 100.0 << "%)\n" << std::defaultfloat;
                } else {
                    out << ',';
                }
                out << '\n';
                totals[v == Variant::LN ? 0 : 1] = pc.trainable;
            }
            if (vs.size() == 2) err << "se - ln: " << totals[1] - totals[0] << "\n";
            return 0;
        }

        if (*trace) {
            const Model m = Model::build(trace_model.resolve(), 0);
            const auto rows = m.shape_trace(Shape(1, 3, trace_input, trace_input));
            out << "row,input,operator,out_channels,output\n";
            std::size_t row = 1;
            for (const ShapeTraceRow& r : rows)
                out << row++ << ',' << table_shape(r.input) << ',' << r.op << ',' << cell(r.out_channels) << ','
                    << table_shape(r.output) << '\n';
            return 0;
        }

        if (*gradcheck) {
            const auto rows = run_gradcheck_suite(seed_of());
            out << "check,max_rel_error,tolerance,status\n";
            bool ok = true;
            for (const GradCheckRow& r : rows) {
                out << r.check << ',' << std::setprecision(6) << r.max_rel_error << ',' << r.tolerance << ','
                    << (r.passed() ? "PASS" : "FAIL") << '\n';
                ok = ok && r.passed();
            }
            if (!ok) {
                err << "gradcheck: at least one check exceeded its tolerance\n";
                return 1;
            }
            return 0;
        }

        if (*train) {
            cfg.seed = seed_of();
            const bool cifar = train_data.source == "cifar10";
            if (cifar && train->count("--batch") == 0) cfg.batch_size = TrainConfig::cifar10().batch_size;
            Dataset ds;
            if (cifar) {
                ds = train_data.pick(load_cifar10(train_data.dir()).train, cfg.seed);
            } else {
                ds = synth_dataset(train_data.samples ? train_data.samples : 64, train_model.classes, train_data.hw,
                                   cfg.seed);
            }
            ModelSpec spec = train_model.resolve();
            if (spec.num_classes < ds.classes)
                throw ConfigError("model has " + std::to_string(spec.num_classes) + " classes, data has " +
                                  std::to_string(ds.classes));
            Model m = Model::build(spec, cfg.seed);
            err << "training on " << ds.size() << " images\n";
            const History h = train_loop(m, ds, cfg, [&](const EpochRecord& r) {
                err << "epoch " << r.epoch << " loss " << r.loss << " lr " << r.lr << " (" << std::setprecision(3)
                    << r.seconds << "s)\n" << std::setprecision(6);
            });
            err << "stopped: " << h.stop_reason << "\n";
            if (history_out.empty()) {
                h.write_csv(out);
            } else {
                std::ofstream f(history_out);
                if (!f) throw Error("cannot write " + history_out);
                h.write_csv(f);
            }
            if (!weights_out.empty()) save_weights(m, weights_out);
            return 0;
        }

        if (*eval) {
            const Checkpoint ck = load_checkpoint(weights_in);
            ModelSpec spec = eval_spec.empty() ? ModelSpec::standard(ck.variant, ck.num_classes)
                                               : ModelSpec::load(eval_spec);
            Model m = Model::build(spec, 0);
            load_weights(m, weights_in);
            const std::uint64_t seed = seed_of();
            Dataset ds;
            if (eval_data.source == "cifar10") {
                ds = eval_data.pick(load_cifar10(eval_data.dir()).test, seed);
            } else {
                ds = synth_dataset(eval_data.samples ? eval_data.samples : 64, ck.num_classes, eval_data.hw, seed);
            }
            const double acc = evaluate(m, ds, 100, eval_threads);
            out << "samples,accuracy\n" << ds.size() << ',' << std::setprecision(6) << acc << '\n';
            return 0;
        }

        if (*bench) {
            bopts.seed = seed_of();
            const Model m = Model::build(bench_model.resolve(), bopts.seed);
            bench_throughput(m, bopts).write_csv(out);
            return 0;
        }
    } catch (const UsageError& e) {
        err << "xqnet: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        err << "xqnet: " << e.what() << "\n";
        return 1;
    }
    return 2;
}

}  // namespace xqnet
