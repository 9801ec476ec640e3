#pragma once

// Datasets: CIFAR-10 binary batches, a synthetic generator and resizing.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "xqnet/tensor.hpp"

namespace xqnet {

/// Square 3-channel images with values in [0,1], stored contiguously.
struct Dataset {
    std::size_t hw = 0;
    std::size_t classes = 0;
    std::vector<float> pixels;
    std::vector<int> labels;

    std::size_t size() const noexcept { return labels.size(); }
    std::size_t image_size() const noexcept { return 3 * hw * hw; }

    /// (indices.size(), 3, hw, hw) batch in the given order.
    Tensor batch(std::span<const std::size_t> indices) const;
    std::vector<int> batch_labels(std::span<const std::size_t> indices) const;

    void append(std::span<const float> image, int label);
};

/// Parses one binary batch file: 3073-byte records, one label byte then
/// 1024 red, 1024 green and 1024 blue bytes, scaled by 1/255.
Dataset load_cifar10_file(const std::string& path);

struct CifarSplits {
    Dataset train;
    Dataset test;
};

/// data_batch_1.bin .. data_batch_5.bin and test_batch.bin under `dir`.
CifarSplits load_cifar10(const std::string& dir);

/// Class-conditional Gaussian blobs, labels i % classes.
Dataset synth_dataset(std::size_t n, std::size_t classes, std::size_t hw, std::uint64_t seed);

/// Corner-aligned bilinear resize of a (1, C, H, W) image.
Tensor resize_bilinear(const Tensor& img, std::size_t out_h, std::size_t out_w);

Dataset subset(const Dataset& ds, std::span<const std::size_t> indices);

/// Seeded random split into `first` samples and the rest.
std::pair<Dataset, Dataset> random_split(const Dataset& ds, std::size_t first, std::uint64_t seed);

}  // namespace xqnet
