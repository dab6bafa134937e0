#pragma once

#include "dcr/routing.hpp"
#include "dcr/tensor.hpp"

#include <cstddef>
#include <span>

namespace dcr {

/// Learnable compression ratios indexed by (layer, timestep region), stored
/// as an L x R tensor that participates in autodiff.
class RatioTable {
public:
    RatioTable() = default;
    /// All entries exactly zero.
    RatioTable(std::size_t layers, std::size_t regions);
    explicit RatioTable(Tensor values);

    std::size_t layers() const { return values_.rows(); }
    std::size_t regions() const { return values_.cols(); }
    double value(std::size_t layer, std::size_t region) const;
    void set(std::size_t layer, std::size_t region, double value);
    std::size_t flat_index(std::size_t layer, std::size_t region) const;
    /// Every entry is exactly one of the bins b / 10.
    bool is_snapped() const;
    double mean() const;

    Tensor& tensor() { return values_; }
    const Tensor& tensor() const { return values_; }

private:
    Tensor values_;
};

/// The two bins bracketing a continuous ratio and their proximity weights.
struct BinQuery {
    double lower = 0.0;
    double upper = 0.0;
    double weight_lower = 1.0;
    double weight_upper = 0.0;
    /// r == 1.0: single branch at the top bin.
    bool degenerate() const { return lower == upper; }
};

/// Weights are quantized to 1e-12 so decimal ratios give decimal weights
/// (0.22 -> 0.8 / 0.2 exactly).
BinQuery query_bins(double ratio);

/// w_lo * lower + w_hi * upper; d/dr is 10 * <g, upper - lower>.
Tensor blend_branches(const Tensor& lower, const Tensor& upper, const Tensor& ratio,
                      const BinQuery& query);

/// Stacked images: rows split into equal blocks, block b blended with
/// queries[b] and differentiated into ratios[b].
Tensor blend_branches(const Tensor& lower, const Tensor& upper, const Tensor& ratios,
                      std::span<const BinQuery> queries);

struct DiffcrLayerOutput {
    Tensor output;
    std::vector<BinQuery> queries; // one per image
    RoutedLayerOutput lower;
    RoutedLayerOutput upper; // unset when every query is degenerate

    const BinQuery& query() const { return queries.front(); }
};

/// Training-time layer: the routed layer at both bracketing bins (sharing one
/// set of router scores), blended by proximity. `ratios` holds one entry per
/// stacked image (a scalar for a single image).
DiffcrLayerOutput diffcr_block_forward(const Tensor& hidden, const Tensor& cond,
                                       const BlockParams& block, const Tensor& scores,
                                       const Tensor& ratios, const RoutingOptions& options);

std::size_t region_of_timestep(std::size_t t, std::size_t train_timesteps, std::size_t regions);

struct RatioLossTerm {
    Tensor value;             // lambda * (mean - target)^2
    double batch_mean = 0.0;  // mean over (layers x batch samples)
    double target = 0.0;
};

RatioLossTerm ratio_mse_loss(const RatioTable& table, std::span<const std::size_t> batch_timesteps,
                             std::size_t train_timesteps, double target, double lambda);

/// Nearest bin per entry, halves rounding up.
RatioTable snap_for_inference(const RatioTable& table);
double snap_ratio(double ratio);

/// Clamps every entry into [0, 1] in place.
void project_ratios(RatioTable& table);

} // namespace dcr
