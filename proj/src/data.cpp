#include "xqnet/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numeric>
#include <random>

#include "xqnet/errors.hpp"

namespace xqnet {

namespace {

constexpr std::size_t kCifarHw = 32;
constexpr std::size_t kRecord = 1 + 3 * kCifarHw * kCifarHw;

double unit_uniform(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

// Box-Muller on 53-bit uniforms; portable across standard libraries.
double normal(std::mt19937_64& rng) {
    double u = 0.0;
    while (u <= 0.0) u = unit_uniform(rng);
    const double v = unit_uniform(rng);
    return std::sqrt(-2.0 * std::log(u)) * std::cos(2.0 * 3.14159265358979323846 * v);
}

}  // namespace

Tensor Dataset::batch(std::span<const std::size_t> indices) const {
    const std::size_t per = image_size();
    Tensor out(Shape(indices.size(), 3, hw, hw));
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] >= size()) throw ContractError("dataset index " + std::to_string(indices[i]) + " out of range");
        std::copy_n(pixels.begin() + static_cast<std::ptrdiff_t>(indices[i] * per), per,
                    out.data().begin() + static_cast<std::ptrdiff_t>(i * per));
    }
    return out;
}

std::vector<int> Dataset::batch_labels(std::span<const std::size_t> indices) const {
    std::vector<int> out;
    out.reserve(indices.size());
    for (std::size_t i : indices) out.push_back(labels.at(i));
    return out;
}

void Dataset::append(std::span<const float> image, int label) {
    if (image.size() != image_size()) throw ShapeError("dataset image has wrong size");
    pixels.insert(pixels.end(), image.begin(), image.end());
    labels.push_back(label);
}

Dataset load_cifar10_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open " + path);
    const std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (bytes.size() % kRecord != 0) {
        throw FormatError(path + ": size " + std::to_string(bytes.size()) + " is not a multiple of " +
                          std::to_string(kRecord));
    }
    Dataset ds;
    ds.hw = kCifarHw;
    ds.classes = 10;
    const std::size_t n = bytes.size() / kRecord;
    ds.pixels.resize(n * (kRecord - 1));
    ds.labels.resize(n);
    for (std::size_t r = 0; r < n; ++r) {
        const auto* rec = reinterpret_cast<const unsigned char*>(bytes.data() + r * kRecord);
        if (rec[0] > 9) {
            throw DataError(path + ": label " + std::to_string(rec[0]) + " out of range at record index " +
                            std::to_string(r));
        }
        ds.labels[r] = rec[0];
        float* dst = ds.pixels.data() + r * (kRecord - 1);
        for (std::size_t i = 1; i < kRecord; ++i) dst[i - 1] = static_cast<float>(rec[i]) / 255.0f;
    }
    return ds;
}

CifarSplits load_cifar10(const std::string& dir) {
    namespace fs = std::filesystem;
    CifarSplits out;
    for (int b = 1; b <= 5; ++b) {
        Dataset part = load_cifar10_file((fs::path(dir) / ("data_batch_" + std::to_string(b) + ".bin")).string());
        if (b == 1) {
            out.train = std::move(part);
        } else {
            out.train.pixels.insert(out.train.pixels.end(), part.pixels.begin(), part.pixels.end());
            out.train.labels.insert(out.train.labels.end(), part.labels.begin(), part.labels.end());
        }
    }
    out.test = load_cifar10_file((fs::path(dir) / "test_batch.bin").string());
    return out;
}

Dataset synth_dataset(std::size_t n, std::size_t classes, std::size_t hw, std::uint64_t seed) {
    if (classes == 0 || n < classes) throw ConfigError("synth_dataset: need n >= classes > 0");
    if (hw == 0 || hw % 32 != 0) throw ConfigError("synth_dataset: image size must be a positive multiple of 32");
    std::mt19937_64 rng(seed);

    struct Blob {
        double cy, cx, sigma;
        double color[3];
    };
    std::vector<Blob> protos(classes);
    for (Blob& b : protos) {
        b.cy = (0.2 + 0.6 * unit_uniform(rng)) * static_cast<double>(hw);
        b.cx = (0.2 + 0.6 * unit_uniform(rng)) * static_cast<double>(hw);
        b.sigma = (0.08 + 0.08 * unit_uniform(rng)) * static_cast<double>(hw);
        for (double& c : b.color) c = unit_uniform(rng);
    }

    Dataset ds;
    ds.hw = hw;
    ds.classes = classes;
    std::vector<float> img(3 * hw * hw);
    const double jitter = 0.03 * static_cast<double>(hw);
    for (std::size_t i = 0; i < n; ++i) {
        const int label = static_cast<int>(i % classes);
        const Blob& b = protos[static_cast<std::size_t>(label)];
        const double cy = b.cy + jitter * normal(rng), cx = b.cx + jitter * normal(rng);
        for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t y = 0; y < hw; ++y)
                for (std::size_t x = 0; x < hw; ++x) {
                    const double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
                    const double v = b.color[c] * std::exp(-(dy * dy + dx * dx) / (2.0 * b.sigma * b.sigma)) +
                                     0.05 * normal(rng);
                    img[(c * hw + y) * hw + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
                }
        ds.append(img, label);
    }
    return ds;
}

Tensor resize_bilinear(const Tensor& img, std::size_t out_h, std::size_t out_w) {
    const Shape& s = img.shape();
    if (s.h() == 0 || s.w() == 0 || out_h == 0 || out_w == 0) {
        throw ShapeError("resize_bilinear: empty extent in " + s.to_string());
    }
    auto coords = [](std::size_t in, std::size_t out) {
        // source coordinate of each output index, first and last aligned
        std::vector<std::pair<std::size_t, double>> c(out);
        for (std::size_t i = 0; i < out; ++i) {
            const double src = out == 1 ? 0.0 : static_cast<double>(i) * static_cast<double>(in - 1) /
                                                     static_cast<double>(out - 1);
            std::size_t i0 = static_cast<std::size_t>(src);
            if (i0 >= in - 1) i0 = in - 1;
            c[i] = {i0, src - static_cast<double>(i0)};
        }
        return c;
    };
    const auto ys = coords(s.h(), out_h), xs = coords(s.w(), out_w);
    Tensor out(Shape(s.n(), s.c(), out_h, out_w));
    for (std::size_t n = 0; n < s.n(); ++n)
        for (std::size_t c = 0; c < s.c(); ++c)
            for (std::size_t y = 0; y < out_h; ++y) {
                const auto [y0, fy] = ys[y];
                const std::size_t y1 = std::min(y0 + 1, s.h() - 1);
                for (std::size_t x = 0; x < out_w; ++x) {
                    const auto [x0, fx] = xs[x];
                    const std::size_t x1 = std::min(x0 + 1, s.w() - 1);
                    const double top = img.at(n, c, y0, x0) * (1.0 - fx) + img.at(n, c, y0, x1) * fx;
                    const double bottom = img.at(n, c, y1, x0) * (1.0 - fx) + img.at(n, c, y1, x1) * fx;
                    out.at(n, c, y, x) = static_cast<float>(top * (1.0 - fy) + bottom * fy);
                }
            }
    return out;
}

Dataset subset(const Dataset& ds, std::span<const std::size_t> indices) {
    Dataset out;
    out.hw = ds.hw;
    out.classes = ds.classes;
    out.pixels.reserve(indices.size() * ds.image_size());
    for (std::size_t i : indices) {
        if (i >= ds.size()) throw ContractError("subset index out of range");
        out.append(std::span<const float>(ds.pixels.data() + i * ds.image_size(), ds.image_size()), ds.labels[i]);
    }
    return out;
}

std::pair<Dataset, Dataset> random_split(const Dataset& ds, std::size_t first, std::uint64_t seed) {
    if (first > ds.size()) throw ConfigError("random_split: more samples requested than available");
    std::vector<std::size_t> order(ds.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
    const std::span<const std::size_t> all(order);
    return {subset(ds, all.first(first)), subset(ds, all.subspan(first))};
}

}  // namespace xqnet
