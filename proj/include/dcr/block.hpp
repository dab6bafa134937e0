#pragma once

#include "dcr/rng.hpp"
#include "dcr/tensor.hpp"

#include <cstddef>
#include <tuple>
#include <vector>

namespace dcr {

struct ModelConfig {
    std::size_t image_side = 16;
    std::size_t patch_side = 2;
    std::size_t hidden_dim = 64;
    std::size_t heads = 4;
    std::size_t layers = 8;
    std::size_t mlp_ratio = 4;
    std::size_t classes = 10;
    std::size_t train_timesteps = 200;
    std::size_t sample_steps = 50;
    std::size_t regions = 4;
    double target_ratio = 0.3;
    double ratio_loss_coeff = 0.3;
    double cfg_scale = 4.5;

    /// Throws ConfigError naming the first violated constraint.
    void validate() const;
    std::size_t grid() const { return image_side / patch_side; }
    std::size_t tokens() const { return grid() * grid(); }
    std::size_t patch_dim() const { return patch_side * patch_side; }

    bool operator==(const ModelConfig&) const = default;
};

/// Weights of one transformer block. Output projections (wo, w2, b2) and the
/// conditioning projection start at zero so a fresh block is the identity.
struct BlockParams {
    Tensor ln1_gain, ln1_bias;
    Tensor wq, wk, wv, wo;
    Tensor ln2_gain, ln2_bias;
    Tensor w1, b1, w2, b2;
    Tensor ada_w, ada_b; // cond (d) -> [shift | scale] (2d)

    static BlockParams init(const ModelConfig& config, Rng& rng);
    /// (name suffix, tensor, weight-decay) triples in a fixed order.
    std::vector<std::tuple<const char*, Tensor, bool>> named() const;
};

/// Residual contribution U of one block: the unrouted layer output is H + U.
/// Attention runs over the rows of `hidden` only. With row groups (stacked
/// images), `cond` holds one row per group and attention stays inside each
/// group.
Tensor block_forward(const Tensor& hidden, const Tensor& cond, const BlockParams& params,
                     std::size_t heads, RowGroups groups = {});

/// Sinusoidal embedding [sin(t f_0..), cos(t f_0..)] of width `dim` as 1 x dim.
Tensor timestep_embedding(std::size_t t, std::size_t dim, std::size_t train_timesteps);

/// Flat pixel index for every element of the N x patch_dim token grid.
std::vector<std::size_t> patch_permutation(const ModelConfig& config);

/// image (side x side) -> tokens (N x patch_dim); row i is patch
/// (i / grid, i % grid).
Tensor patchify(const Tensor& image, const ModelConfig& config);
Tensor unpatchify(const Tensor& tokens, const ModelConfig& config);

} // namespace dcr
