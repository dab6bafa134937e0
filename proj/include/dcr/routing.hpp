#pragma once

#include "dcr/block.hpp"
#include "dcr/tensor.hpp"

#include <cstddef>
#include <span>
#include <vector>

namespace dcr {

/// Per-layer token router: score = sigmoid(h . weight + bias).
struct RouterParams {
    Tensor weight; // d x 1
    Tensor bias;   // 1

    static RouterParams zeros(std::size_t hidden_dim);
};

struct SelectionRecord {
    std::vector<double> scores;        // N router outputs, each in (0, 1)
    std::vector<std::size_t> selected; // ascending token indices
    std::size_t k = 0;
    double bin = 0.0;
};

struct RoutedLayerOutput {
    Tensor output; // (images * N) x d
    std::vector<SelectionRecord> selections; // one per image

    const SelectionRecord& selection() const { return selections.front(); }
};

/// Number of bins and their spacing: bins are {0.0, 0.1, ..., 1.0}.
inline constexpr int kBinCount = 10;
inline constexpr double kBinWidth = 0.1;

/// Bin index b such that value == b / 10.0 exactly, or -1.
int bin_index(double value);

/// Router scores as an N x 1 tensor.
Tensor router_scores(const Tensor& hidden, const RouterParams& router);

/// Tokens that compute at a given bin: round((1 - bin) * N), halves rounding up.
std::size_t k_of_ratio(double bin, std::size_t tokens);

struct RoutingOptions {
    std::size_t heads = 1;
    /// Multiply each selected token's block update by its router score.
    bool rescale = true;
};

/// Top-k routed layer given precomputed scores. Selected rows become
/// H[i] + s[i] * U[i] with U computed on the selected rows only; the rest are
/// copied through untouched. `hidden` stacks one N-row block per entry of
/// `bins`, `cond` holds one row per image and `scores` one entry per row.
RoutedLayerOutput routed_block_forward(const Tensor& hidden, const Tensor& cond,
                                       const BlockParams& block, const Tensor& scores,
                                       std::span<const double> bins, const RoutingOptions& options);

/// Single image.
RoutedLayerOutput routed_block_forward(const Tensor& hidden, const Tensor& cond,
                                       const BlockParams& block, const Tensor& scores, double bin,
                                       const RoutingOptions& options);

RoutedLayerOutput routed_block_forward(const Tensor& hidden, const Tensor& cond,
                                       const BlockParams& block, const RouterParams& router,
                                       double bin, const RoutingOptions& options);

} // namespace dcr
