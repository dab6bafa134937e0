#pragma once

#include "dcr/tensor.hpp"

#include <cstddef>
#include <cstdint>
#include <string>

namespace dcr {

enum class DatasetKind { patterns, constant };

std::string to_string(DatasetKind kind);
DatasetKind dataset_kind_from_string(const std::string& text);

/// Procedural single-channel images. `patterns`: per-class base intensity plus
/// a class-placed bright/dark rectangle. `constant`: every pixel at
/// `intensity` (one class).
struct ToyDataset {
    DatasetKind kind = DatasetKind::patterns;
    std::size_t classes = 10;
    std::size_t image_side = 16;
    double noise_sigma = 0.05;
    double intensity = 0.75; // constant kind only

    void validate() const;
    /// Noiseless template in pixel range [0, 1].
    Tensor template_image(std::size_t cls) const;
    /// Template plus seeded pixel noise, clamped to [0, 1], mapped to [-1, 1].
    Tensor sample(std::size_t cls, std::uint64_t seed) const;

    bool operator==(const ToyDataset&) const = default;
};

} // namespace dcr
