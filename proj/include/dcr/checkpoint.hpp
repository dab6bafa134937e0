#pragma once

#include "dcr/config.hpp"
#include "dcr/diffusion.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace dcr {

inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class ArrayType : std::uint8_t { f64 = 0, u64 = 1 };

struct NamedArray {
    std::string name;
    ArrayType type = ArrayType::f64;
    Shape shape;
    std::vector<double> f64;
    std::vector<std::uint64_t> u64;

    bool operator==(const NamedArray&) const = default;
};

/// Little-endian layout: "DCR1", u32 version, u64 length + config text,
/// u32 array count, then per array: u32 length + name, u8 type, u32 rank,
/// u64 dims, payload.
struct Checkpoint {
    std::uint32_t version = kCheckpointVersion;
    std::string config_text;
    std::vector<NamedArray> arrays;

    const NamedArray* find(const std::string& name) const;
    bool operator==(const Checkpoint&) const = default;
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& checkpoint);
/// FormatError on bad magic, truncation or trailing bytes; the version check
/// names both versions.
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Model and router parameters, the ratio table, AdamW moments and the step
/// counter of a trainer.
Checkpoint capture_checkpoint(const Trainer& trainer, const RunConfig& config);

/// Validates every array against the trainer before writing anything. A
/// config text different from `config` is a ConfigError.
void restore_checkpoint(Trainer& trainer, const RunConfig& config, const Checkpoint& checkpoint);

/// Text listing: version, config hash, then one line per array.
std::string checkpoint_manifest(const Checkpoint& checkpoint);

} // namespace dcr
