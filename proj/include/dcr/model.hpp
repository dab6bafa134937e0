#pragma once

#include "dcr/block.hpp"
#include "dcr/ratio.hpp"
#include "dcr/routing.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace dcr {

enum class Mode { train, infer };

struct ForwardOptions {
    Mode mode = Mode::infer;
    bool rescale = true;
    /// When set, receives one selection record per layer and image, layer
    /// major (routed runs only).
    std::vector<SelectionRecord>* selections = nullptr;
};

struct NamedParam {
    std::string name;
    Tensor tensor;
    bool decay;
};

/// Desk-scale diffusion transformer predicting the noise of a single-channel
/// image. Class index `classes` is the learned null class used for guidance.
class DiT {
public:
    DiT(const ModelConfig& config, std::uint64_t seed);

    const ModelConfig& config() const { return config_; }
    std::size_t null_class() const { return config_.classes; }

    /// Conditioning vector (1 x d): projected timestep embedding plus class
    /// embedding.
    Tensor condition(std::size_t t, std::size_t cls) const;
    /// One conditioning row per image.
    Tensor condition(std::span<const std::size_t> timesteps, std::span<const std::size_t> classes) const;

    /// Predicted noise for x_t. `ratios == nullptr` runs the dense baseline;
    /// otherwise train mode blends two routed branches per layer and infer mode
    /// runs the single branch of a snapped table.
    Tensor forward(const Tensor& x_t, std::size_t t, std::size_t cls, const RatioTable* ratios,
                   const ForwardOptions& options = {}) const;

    /// Batched forward over stacked images. Returns the predicted noise as
    /// patch tokens, (images * N) x patch_dim, image b in rows [b N, (b+1) N).
    /// Images are treated as constants (no gradient to x_t).
    Tensor forward_tokens(std::span<const Tensor> x_t, std::span<const std::size_t> timesteps,
                          std::span<const std::size_t> classes, const RatioTable* ratios,
                          const ForwardOptions& options = {}) const;

    /// Every learnable tensor in a fixed order.
    std::vector<NamedParam> parameters() const;

    std::vector<BlockParams>& blocks() { return blocks_; }
    const std::vector<BlockParams>& blocks() const { return blocks_; }
    std::vector<RouterParams>& routers() { return routers_; }
    const std::vector<RouterParams>& routers() const { return routers_; }

private:
    ModelConfig config_;
    Tensor patch_w_, patch_b_, pos_emb_;
    Tensor time_w_, time_b_, class_emb_;
    Tensor final_w_, final_b_;
    std::vector<BlockParams> blocks_;
    std::vector<RouterParams> routers_;
};

} // namespace dcr
