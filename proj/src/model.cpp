#include "xqnet/model.hpp"

#include <algorithm>
#include <array>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <sstream>

namespace xqnet {

std::string variant_name(Variant v) { return v == Variant::LN ? "ln" : "se"; }

Variant parse_variant(std::string_view s) {
    if (s == "ln" || s == "LN") return Variant::LN;
    if (s == "se" || s == "SE") return Variant::SE;
    throw ConfigError("unknown variant '" + std::string(s) + "' (expected ln or se)");
}

namespace {

const char* keyword(LayerKind k) {
    switch (k) {
        case LayerKind::FCT: return "fct";
        case LayerKind::DFSEBV2: return "dfsebv2";
        case LayerKind::EVE: return "eve";
        case LayerKind::ME: return "me";
        case LayerKind::DWCONV: return "dwconv";
        case LayerKind::HSWISH: return "hswish";
        case LayerKind::AVGPOOL: return "avgpool";
        case LayerKind::DROPOUT: return "dropout";
        case LayerKind::FC: return "fc";
    }
    return "?";
}

bool downsamples(LayerKind k) { return k == LayerKind::FCT || k == LayerKind::EVE || k == LayerKind::ME; }

LayerSpec make(LayerKind kind, std::size_t channels = 0) {
    LayerSpec l;
    l.kind = kind;
    l.channels = channels;
    return l;
}

std::string row_label(std::size_t index, const LayerSpec& l) {
    std::string s = "row " + std::to_string(index + 1) + " (" + keyword(l.kind);
    if (l.line > 0) s += ", line " + std::to_string(l.line);
    return s + ")";
}

}  // namespace

ModelSpec ModelSpec::standard(Variant variant, std::size_t num_classes, double dropout_rate) {
    const GateKind gate = variant == Variant::LN ? GateKind::LN : GateKind::SE;
    auto block = [gate](std::size_t c) {
        LayerSpec l = make(LayerKind::DFSEBV2, c);
        l.gate = gate;
        return l;
    };
    ModelSpec s;
    s.variant = variant;
    s.num_classes = num_classes;
    s.dropout_rate = dropout_rate;
    LayerSpec drop = make(LayerKind::DROPOUT);
    drop.rate = dropout_rate;
    s.layers = {make(LayerKind::FCT, 12), block(12),
                make(LayerKind::EVE, 48), block(48),
                make(LayerKind::ME, 96),  block(96),
                make(LayerKind::ME, 192), block(192),
                make(LayerKind::ME, 384), block(384),
                make(LayerKind::DWCONV, 384), make(LayerKind::HSWISH),
                make(LayerKind::AVGPOOL), drop,
                make(LayerKind::FC, num_classes)};
    return s;
}

ModelSpec ModelSpec::parse(std::string_view text) {
    static const std::map<std::string, LayerKind> kinds{
        {"fct", LayerKind::FCT},         {"dfsebv2", LayerKind::DFSEBV2}, {"eve", LayerKind::EVE},
        {"me", LayerKind::ME},           {"dwconv", LayerKind::DWCONV},   {"hswish", LayerKind::HSWISH},
        {"avgpool", LayerKind::AVGPOOL}, {"dropout", LayerKind::DROPOUT}, {"fc", LayerKind::FC}};

    ModelSpec spec;
    std::optional<GateKind> seen_gate;
    bool have_dropout = false;
    std::istringstream in{std::string(text)};
    std::string raw;
    int line_no = 0;
    while (std::getline(in, raw)) {
        ++line_no;
        const std::string content = raw.substr(0, raw.find('#'));
        std::istringstream words(content);
        std::string word;
        if (!(words >> word)) continue;
        const std::string where = "line " + std::to_string(line_no) + ": ";
        auto it = kinds.find(word);
        if (it == kinds.end()) throw SpecError(where + "unknown layer '" + word + "'");

        LayerSpec l = make(it->second);
        l.line = line_no;
        std::map<std::string, std::string> kv;
        while (words >> word) {
            const auto eq = word.find('=');
            if (eq == std::string::npos || eq == 0) throw SpecError(where + "expected key=value, got '" + word + "'");
            const std::string key = word.substr(0, eq);
            if (kv.count(key)) throw SpecError(where + "duplicate key '" + key + "'");
            kv[key] = word.substr(eq + 1);
        }

        std::vector<std::string> allowed;
        std::vector<std::string> required;
        switch (l.kind) {
            case LayerKind::FCT:
            case LayerKind::EVE:
            case LayerKind::ME:
            case LayerKind::FC: allowed = required = {"out"}; break;
            case LayerKind::DFSEBV2:
                allowed = {"c", "gate", "ratio"};
                required = {"c", "gate"};
                break;
            case LayerKind::DWCONV:
                allowed = {"c", "k"};
                required = {"c"};
                break;
            case LayerKind::DROPOUT: allowed = {"p"}; break;
            case LayerKind::HSWISH:
            case LayerKind::AVGPOOL: break;
        }
        for (const auto& [key, value] : kv) {
            if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
                throw SpecError(where + "unknown key '" + key + "' for " + keyword(l.kind));
            }
        }
        for (const auto& key : required) {
            if (!kv.count(key)) throw SpecError(where + keyword(l.kind) + " needs '" + key + "='");
        }

        auto integer = [&](const std::string& key) -> std::size_t {
            const std::string& v = kv.at(key);
            std::size_t pos = 0;
            long long n = -1;
            try {
                n = std::stoll(v, &pos);
            } catch (const std::exception&) {
                pos = 0;
            }
            if (pos != v.size() || n <= 0) throw SpecError(where + key + "=" + v + " is not a positive integer");
            return static_cast<std::size_t>(n);
        };

        if (kv.count("out")) l.channels = integer("out");
        if (kv.count("c")) l.channels = integer("c");
        if (kv.count("k")) l.kernel = integer("k");
        if (kv.count("ratio")) l.se_ratio = integer("ratio");
        if (kv.count("gate")) {
            const std::string& g = kv.at("gate");
            if (g == "ln") l.gate = GateKind::LN;
            else if (g == "se") l.gate = GateKind::SE;
            else throw SpecError(where + "gate must be ln or se, got '" + g + "'");
            if (seen_gate && *seen_gate != l.gate) throw SpecError(where + "mixes ln and se gates");
            seen_gate = l.gate;
        }
        if (l.kind == LayerKind::DROPOUT) {
            if (kv.count("p")) {
                const std::string& v = kv.at("p");
                std::size_t pos = 0;
                try {
                    l.rate = std::stod(v, &pos);
                } catch (const std::exception&) {
                    pos = 0;
                }
                if (pos != v.size() || !(l.rate >= 0.0 && l.rate < 1.0)) {
                    throw SpecError(where + "p=" + v + " must be in [0,1)");
                }
            }
            spec.dropout_rate = l.rate;
            have_dropout = true;
        }
        if (l.kind == LayerKind::FC) spec.num_classes = l.channels;
        spec.layers.push_back(l);
    }
    if (spec.layers.empty()) throw SpecError("model description has no layers");
    if (!have_dropout) spec.dropout_rate = 0.0;
    spec.variant = seen_gate == GateKind::SE ? Variant::SE : Variant::LN;
    return spec;
}

ModelSpec ModelSpec::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open model description " + path);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return parse(text);
}

std::string ModelSpec::to_text() const {
    std::ostringstream out;
    for (const LayerSpec& l : layers) {
        out << keyword(l.kind);
        switch (l.kind) {
            case LayerKind::FCT:
            case LayerKind::EVE:
            case LayerKind::ME:
            case LayerKind::FC: out << " out=" << l.channels; break;
            case LayerKind::DFSEBV2:
                out << " c=" << l.channels << " gate=" << (l.gate == GateKind::LN ? "ln" : "se");
                if (l.se_ratio != 3) out << " ratio=" << l.se_ratio;
                break;
            case LayerKind::DWCONV: out << " c=" << l.channels << " k=" << l.kernel; break;
            case LayerKind::DROPOUT: out << " p=" << l.rate; break;
            case LayerKind::HSWISH:
            case LayerKind::AVGPOOL: break;
        }
        out << '\n';
    }
    return out.str();
}

std::string table_shape(const Shape& s) {
    const std::string hw = s.h() == s.w() ? std::to_string(s.h()) + "^2"
                                          : std::to_string(s.h()) + "x" + std::to_string(s.w());
    return hw + "x" + std::to_string(s.c());
}

Model Model::build(const ModelSpec& spec, std::uint64_t seed) {
    Model m;
    m.spec_ = spec;
    m.seed_ = seed;
    std::mt19937_64 rng(seed);
    std::size_t channels = 3;
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        const LayerSpec& l = spec.layers[i];
        const std::string where = row_label(i, l);
        const std::string name = "layers." + std::to_string(i) + "." + keyword(l.kind);
        auto need = [&](std::size_t want, const char* what) {
            if (channels != want) {
                throw SpecError(where + ": " + what + " expects " + std::to_string(want) + " input channels, previous row gives " +
                                std::to_string(channels));
            }
        };
        if (l.kind == LayerKind::FC && i + 1 != spec.layers.size()) {
            throw SpecError(where + ": the classifier must be the last row");
        }
        if (l.channels == 0 && (l.kind == LayerKind::FCT || l.kind == LayerKind::DFSEBV2 || l.kind == LayerKind::EVE ||
                                l.kind == LayerKind::ME || l.kind == LayerKind::DWCONV || l.kind == LayerKind::FC)) {
            throw SpecError(where + ": channel count must be positive");
        }
        try {
            switch (l.kind) {
                case LayerKind::FCT:
                    need(3, "FCT is the input block and");
                    m.layers_.push_back(std::make_unique<FctBlock>(m.store_, name, l.channels, rng));
                    channels = l.channels;
                    break;
                case LayerKind::DFSEBV2:
                    need(l.channels, "DFSEBV2");
                    m.layers_.push_back(
                        std::make_unique<Dfsebv2Block>(m.store_, name, l.channels, l.gate, l.se_ratio, rng));
                    break;
                case LayerKind::EVE:
                    m.layers_.push_back(std::make_unique<EveBlock>(m.store_, name, channels, l.channels, rng));
                    channels = l.channels;
                    break;
                case LayerKind::ME:
                    m.layers_.push_back(std::make_unique<MeBlock>(m.store_, name, channels, l.channels, rng));
                    channels = l.channels;
                    break;
                case LayerKind::DWCONV:
                    need(l.channels, "Depthwise Conv");
                    m.layers_.push_back(
                        std::make_unique<DepthwiseConvLayer>(m.store_, name, l.channels, l.kernel, rng));
                    break;
                case LayerKind::HSWISH: m.layers_.push_back(std::make_unique<HardSwishLayer>()); break;
                case LayerKind::AVGPOOL: m.layers_.push_back(std::make_unique<GlobalAvgPoolLayer>()); break;
                case LayerKind::DROPOUT: m.layers_.push_back(std::make_unique<DropoutLayer>(l.rate)); break;
                case LayerKind::FC:
                    m.layers_.push_back(std::make_unique<LinearLayer>(m.store_, name, channels, l.channels, rng));
                    channels = l.channels;
                    break;
            }
        } catch (const ConfigError& e) {
            throw SpecError(where + ": " + e.what());
        }
        if (downsamples(l.kind)) ++m.downsamples_;
    }
    return m;
}

ParamCount Model::param_count() const {
    ParamCount pc;
    std::size_t channels = 3;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        const LayerSpec& l = spec_.layers[i];
        if (l.channels > 0) channels = l.channels;
        LayerCount lc{i + 1, layers_[i]->op_name(), channels, layers_[i]->trainable_count(store_),
                      layers_[i]->buffer_count(store_)};
        pc.trainable += lc.trainable;
        pc.buffers += lc.buffers;
        pc.layers.push_back(std::move(lc));
    }
    return pc;
}

void Model::check_input(const Shape& s) const {
    const std::size_t div = std::size_t{1} << downsamples_;
    if (s.c() != 3) throw ShapeError("model input must have 3 channels, got " + s.to_string());
    if (s.h() == 0 || s.w() == 0 || s.h() % div != 0 || s.w() % div != 0) {
        throw ShapeError("model input " + s.to_string() + ": height and width must be positive multiples of " +
                         std::to_string(div));
    }
}

std::vector<ShapeTraceRow> Model::shape_trace(const Shape& input) const {
    check_input(input);
    std::vector<ShapeTraceRow> rows;
    Shape s = input;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        ShapeTraceRow r;
        r.input = s;
        r.op = layers_[i]->op_name();
        r.output = layers_[i]->output_shape(s);
        if (spec_.layers[i].kind != LayerKind::FC) r.out_channels = r.output.c();
        s = r.output;
        rows.push_back(std::move(r));
    }
    return rows;
}

template <class T>
Var Model::forward(Tape<T>& t, const BasicParamStore<T>& store, Var x, ForwardContext<T>& ctx) const {
    check_input(t.value(x).shape());
    for (const auto& layer : layers_) x = layer->forward(t, store, x, ctx);
    return x;
}

template Var Model::forward(Tape<float>&, const ParamStore&, Var, ForwardContext<float>&) const;
template Var Model::forward(Tape<double>&, const BasicParamStore<double>&, Var, ForwardContext<double>&) const;

Tensor Model::infer(const Tensor& batch) const {
    check_input(batch.shape());
    Tensor x = batch;
    for (const auto& layer : layers_) x = run_layer(*layer, store_, x, Mode::Infer);
    return x;
}

Tensor Model::forward(const Tensor& batch, Mode mode, std::mt19937_64* rng) {
    if (mode == Mode::Infer) return infer(batch);
    Tape<float> t(false);
    ForwardContext<float> ctx;
    ctx.mode = Mode::Train;
    ctx.rng = rng;
    ctx.stats = &store_;
    return t.value(forward(t, store_, t.input(batch), ctx));
}

// Checkpoints ---------------------------------------------------------------

namespace {

constexpr std::array<char, 4> kMagic{'X', 'Q', 'N', '2'};

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

class Reader {
public:
    explicit Reader(std::string bytes) : bytes_(std::move(bytes)) {}

    std::size_t remaining() const noexcept { return bytes_.size() - pos_; }

    void need(std::size_t n, const std::string& what) const {
        if (remaining() < n) {
            throw LoadError(LoadError::Kind::Truncated, "checkpoint truncated while reading " + what);
        }
    }
    std::uint32_t u32(const std::string& what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
        pos_ += 4;
        return v;
    }
    std::string bytes(std::size_t n, const std::string& what) {
        need(n, what);
        std::string s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }

private:
    std::string bytes_;
    std::size_t pos_ = 0;
};

}  // namespace

void save_weights(const Model& model, const std::string& path) {
    const ParamStore& store = model.params();
    std::string out(kMagic.begin(), kMagic.end());
    put_u32(out, kCheckpointVersion);
    put_u32(out, model.spec().variant == Variant::LN ? 0u : 1u);
    put_u32(out, static_cast<std::uint32_t>(model.spec().num_classes));
    put_u32(out, static_cast<std::uint32_t>(store.size()));
    for (const auto& e : store.entries()) {
        put_u32(out, static_cast<std::uint32_t>(e.name.size()));
        out += e.name;
        for (std::size_t d : e.value.shape().dims) put_u32(out, static_cast<std::uint32_t>(d));
        for (float v : e.value.data()) {
            std::uint32_t bits = 0;
            std::memcpy(&bits, &v, sizeof bits);
            put_u32(out, bits);
        }
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw LoadError(LoadError::Kind::Io, "cannot open " + path + " for writing");
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw LoadError(LoadError::Kind::Io, "write to " + path + " failed");
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw LoadError(LoadError::Kind::Io, "cannot open " + path);
    Reader r(std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>()));

    if (r.remaining() < kMagic.size()) throw LoadError(LoadError::Kind::Truncated, "checkpoint truncated in header");
    if (r.bytes(4, "magic") != std::string(kMagic.begin(), kMagic.end())) {
        throw LoadError(LoadError::Kind::BadMagic, path + " is not a checkpoint (bad magic)");
    }
    const std::uint32_t version = r.u32("version");
    if (version != kCheckpointVersion) {
        throw LoadError(LoadError::Kind::BadVersion, "checkpoint version " + std::to_string(version) +
                                                         " unsupported (expected " +
                                                         std::to_string(kCheckpointVersion) + ")");
    }
    Checkpoint ck;
    const std::uint32_t tag = r.u32("variant");
    if (tag > 1) throw LoadError(LoadError::Kind::BadVersion, "unknown variant tag " + std::to_string(tag));
    ck.variant = tag == 0 ? Variant::LN : Variant::SE;
    ck.num_classes = r.u32("class count");
    const std::uint32_t count = r.u32("tensor count");
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::string at = "tensor " + std::to_string(i);
        const std::uint32_t len = r.u32(at + " name length");
        std::string name = r.bytes(len, at + " name");
        Shape s;
        for (std::size_t& d : s.dims) d = r.u32(name + " dims");
        const std::size_t n = s.numel();
        if (n > r.remaining() / 4) r.need(n * 4, name + " data");
        Tensor t(s);
        for (float& v : t.data()) {
            const std::uint32_t bits = r.u32(name + " data");
            std::memcpy(&v, &bits, sizeof v);
        }
        ck.store.add(std::move(name), std::move(t));
    }
    return ck;
}

void load_weights(Model& model, const std::string& path) {
    Checkpoint ck = load_checkpoint(path);
    ParamStore& dst = model.params();
    const std::size_t n = std::min(dst.size(), ck.store.size());
    for (std::size_t i = 0; i < n; ++i) {
        const auto& want = dst[i];
        const auto& got = ck.store[i];
        if (want.name != got.name || want.value.shape() != got.value.shape()) {
            throw LoadError(LoadError::Kind::ShapeMismatch,
                            "checkpoint tensor " + std::to_string(i) + " '" + got.name + "' " +
                                got.value.shape().to_string() + " does not match model tensor '" + want.name + "' " +
                                want.value.shape().to_string());
        }
    }
    if (dst.size() != ck.store.size()) {
        const std::string first = dst.size() > n ? dst[n].name : ck.store[n].name;
        throw LoadError(LoadError::Kind::ShapeMismatch, "checkpoint has " + std::to_string(ck.store.size()) +
                                                            " tensors, model has " + std::to_string(dst.size()) +
                                                            "; first unmatched tensor '" + first + "'");
    }
    for (std::size_t i = 0; i < n; ++i) dst.value(i) = std::move(ck.store.value(i));
}

}  // namespace xqnet
