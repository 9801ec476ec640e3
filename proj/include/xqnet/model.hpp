#pragma once

// The full network: a declarative layer list, its compiled form, counting,
// shape tracing and weight persistence.

#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "xqnet/blocks.hpp"

namespace xqnet {

enum class Variant { LN, SE };

std::string variant_name(Variant v);
Variant parse_variant(std::string_view s);

enum class LayerKind { FCT, DFSEBV2, EVE, ME, DWCONV, HSWISH, AVGPOOL, DROPOUT, FC };

struct LayerSpec {
    LayerKind kind = LayerKind::HSWISH;
    /// Output channels (FCT/EVE/ME/FC) or block width (DFSEBV2/DWCONV).
    std::size_t channels = 0;
    GateKind gate = GateKind::LN;
    std::size_t se_ratio = 3;
    std::size_t kernel = 3;
    double rate = 0.2;
    /// Source line when parsed from text, 0 otherwise.
    int line = 0;
};

struct ModelSpec {
    Variant variant = Variant::LN;
    std::size_t num_classes = 1000;
    double dropout_rate = 0.2;
    std::vector<LayerSpec> layers;

    /// The 15-row reference architecture.
    static ModelSpec standard(Variant variant, std::size_t num_classes = 1000, double dropout_rate = 0.2);

    /// Line-oriented text form, one layer per line:
    ///   fct out=12 | dfsebv2 c=48 gate=ln [ratio=3] | eve out=48 | me out=96
    ///   dwconv c=384 k=3 | hswish | avgpool | dropout p=0.2 | fc out=1000
    /// '#' starts a comment. Throws SpecError with the line number.
    static ModelSpec parse(std::string_view text);
    static ModelSpec load(const std::string& path);
    std::string to_text() const;
};

struct LayerCount {
    std::size_t row = 0;
    std::string op;
    std::size_t out_channels = 0;
    std::size_t trainable = 0;
    std::size_t buffers = 0;
};

struct ParamCount {
    std::size_t trainable = 0;
    std::size_t buffers = 0;
    std::vector<LayerCount> layers;
};

struct ShapeTraceRow {
    Shape input;
    std::string op;
    /// Empty for the classifier, printed as "-".
    std::optional<std::size_t> out_channels;
    Shape output;
};

/// "224^2x3" style, as in the architecture table.
std::string table_shape(const Shape& s);

class Model {
public:
    static Model build(const ModelSpec& spec, std::uint64_t seed);

    Model(Model&&) noexcept = default;
    Model& operator=(Model&&) noexcept = default;

    const ModelSpec& spec() const noexcept { return spec_; }
    ParamStore& params() noexcept { return store_; }
    const ParamStore& params() const noexcept { return store_; }
    std::uint64_t seed() const noexcept { return seed_; }
    const std::vector<std::unique_ptr<Layer>>& layers() const noexcept { return layers_; }

    ParamCount param_count() const;

    /// Requires H and W divisible by 2^(number of downsampling layers).
    std::vector<ShapeTraceRow> shape_trace(const Shape& input) const;

    /// Records the whole network on `t`. In train mode batch-norm running
    /// statistics are written to ctx.stats when set.
    template <class T>
    Var forward(Tape<T>& t, const BasicParamStore<T>& store, Var x, ForwardContext<T>& ctx) const;

    /// Convenience forward returning logits. Infer mode runs layer by layer
    /// without recording; train mode updates running statistics in place.
    Tensor forward(const Tensor& batch, Mode mode, std::mt19937_64* rng = nullptr);
    Tensor infer(const Tensor& batch) const;

private:
    Model() = default;
    void check_input(const Shape& s) const;

    ModelSpec spec_;
    ParamStore store_;
    std::vector<std::unique_ptr<Layer>> layers_;
    std::uint64_t seed_ = 0;
    std::size_t downsamples_ = 0;
};

struct Checkpoint {
    Variant variant = Variant::LN;
    std::uint32_t num_classes = 0;
    ParamStore store;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_weights(const Model& model, const std::string& path);

/// Reads a checkpoint without reference to a model.
Checkpoint load_checkpoint(const std::string& path);

/// Loads into `model`, which must have the same tensor names and shapes
/// in the same order. Nothing is modified when loading fails.
void load_weights(Model& model, const std::string& path);

}  // namespace xqnet
