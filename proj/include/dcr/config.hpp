#pragma once

#include "dcr/block.hpp"
#include "dcr/dataset.hpp"
#include "dcr/diffusion.hpp"

#include <cstdint>
#include <string>

namespace dcr {

/// Everything that determines a run's outputs. Serialized as sectioned
/// key = value text ([model], [train], [data]); the output directory is a
/// location, not part of the config.
struct RunConfig {
    ModelConfig model;
    TrainConfig train;
    std::uint64_t seed = 0;
    std::size_t checkpoint_every = 500;
    std::size_t log_every = 10;
    DatasetKind dataset = DatasetKind::patterns;
    double noise_sigma = 0.05;
    double intensity = 0.75;

    /// Dataset with class count and side taken from the model config.
    ToyDataset dataset_spec() const;
    void validate() const;

    std::string to_text() const;
    std::string hash() const;
    static RunConfig from_text(const std::string& text);

    /// Sets one `section.key` field from text; ConfigError for unknown keys
    /// or unparsable values.
    void set(const std::string& section, const std::string& key, const std::string& value);

    bool operator==(const RunConfig&) const = default;
};

} // namespace dcr
