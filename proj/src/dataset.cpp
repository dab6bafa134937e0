#include "dcr/dataset.hpp"

#include "dcr/error.hpp"
#include "dcr/rng.hpp"

#include <algorithm>

namespace dcr {

std::string to_string(DatasetKind kind) {
    return kind == DatasetKind::patterns ? "patterns" : "constant";
}

DatasetKind dataset_kind_from_string(const std::string& text) {
    if (text == "patterns") return DatasetKind::patterns;
    if (text == "constant") return DatasetKind::constant;
    throw ConfigError("unknown dataset kind '" + text + "' (expected patterns|constant)");
}

void ToyDataset::validate() const {
    if (classes == 0) throw ConfigError("dataset: classes must be positive");
    if (kind == DatasetKind::constant && classes != 1) {
        throw ConfigError("dataset: the constant dataset has exactly one class");
    }
    if (image_side < 8) throw ConfigError("dataset: image_side must be at least 8");
    if (!(noise_sigma >= 0.0)) throw ConfigError("dataset: noise_sigma must be non-negative");
    if (!(intensity >= 0.0 && intensity <= 1.0)) throw ConfigError("dataset: intensity must lie in [0, 1]");
}

Tensor ToyDataset::template_image(std::size_t cls) const {
    if (cls >= classes) {
        throw ArgumentError("dataset: class " + std::to_string(cls) + " outside [0, " +
                            std::to_string(classes) + ")");
    }
    const std::size_t side = image_side;
    if (kind == DatasetKind::constant) return Tensor::full({side, side}, intensity);

    const double span = classes > 1 ? static_cast<double>(classes - 1) : 1.0;
    const double base = 0.15 + 0.7 * static_cast<double>(cls) / span;
    const double fill = base < 0.5 ? 0.95 : 0.05;
    const std::size_t width = side / 4 + (cls % 3) * (side / 8);
    const std::size_t height = side / 4 + ((cls / 3) % 3) * (side / 8);
    const std::size_t x0 = (3 * cls) % (side - width + 1);
    const std::size_t y0 = (5 * cls + 1) % (side - height + 1);

    std::vector<double> pixels(side * side, base);
    for (std::size_t y = y0; y < y0 + height; ++y)
        for (std::size_t x = x0; x < x0 + width; ++x) pixels[y * side + x] = fill;
    return Tensor({side, side}, std::move(pixels));
}

Tensor ToyDataset::sample(std::size_t cls, std::uint64_t seed) const {
    Tensor image = template_image(cls);
    Rng rng(seed, cls);
    for (double& p : image.mutable_data()) {
        const double noisy = noise_sigma > 0.0 ? p + noise_sigma * rng.normal() : p;
        p = 2.0 * std::clamp(noisy, 0.0, 1.0) - 1.0;
    }
    return image;
}

} // namespace dcr
