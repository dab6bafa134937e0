#include "dcr/routing.hpp"

#include "dcr/error.hpp"

#include <cmath>
#include <string>

namespace dcr {

RouterParams RouterParams::zeros(std::size_t hidden_dim) {
    return RouterParams{Tensor::zeros({hidden_dim, 1}, true), Tensor::zeros({1}, true)};
}

int bin_index(double value) {
    if (!(value >= 0.0 && value <= 1.0)) return -1;
    const double scaled = std::round(value * kBinCount);
    const int b = static_cast<int>(scaled);
    return static_cast<double>(b) / kBinCount == value ? b : -1;
}

Tensor router_scores(const Tensor& hidden, const RouterParams& router) {
    if (hidden.dim() != 2 || router.weight.rows() != hidden.cols() || router.bias.numel() != 1) {
        throw DimensionError("router_scores: hidden " + shape_str(hidden.shape()) +
                             " vs router weight " + shape_str(router.weight.shape()));
    }
    return sigmoid(add(matmul(hidden, router.weight), router.bias));
}

std::size_t k_of_ratio(double bin, std::size_t tokens) {
    const int b = bin_index(bin);
    if (b < 0) throw ArgumentError("k_of_ratio: " + std::to_string(bin) + " is not a ratio bin");
    return ((kBinCount - static_cast<std::size_t>(b)) * tokens + kBinCount / 2) / kBinCount;
}

RoutedLayerOutput routed_block_forward(const Tensor& hidden, const Tensor& cond,
                                       const BlockParams& block, const Tensor& scores,
                                       std::span<const double> bins, const RoutingOptions& options) {
    const std::size_t images = bins.size();
    const std::size_t rows = hidden.rows();
    if (images == 0 || rows % images != 0) {
        throw DimensionError("routed_block_forward: " + std::to_string(rows) + " rows do not split into " +
                             std::to_string(images) + " images");
    }
    if (scores.numel() != rows) {
        throw DimensionError("routed_block_forward: " + std::to_string(scores.numel()) +
                             " scores for " + std::to_string(rows) + " tokens");
    }
    const std::size_t n = rows / images;
    RoutedLayerOutput out;
    out.selections.resize(images);
    std::vector<std::size_t> global;
    std::vector<std::size_t> groups(images);
    for (std::size_t b = 0; b < images; ++b) {
        SelectionRecord& sel = out.selections[b];
        const auto slice = scores.data().subspan(b * n, n);
        sel.scores.assign(slice.begin(), slice.end());
        sel.bin = bins[b];
        sel.k = k_of_ratio(bins[b], n);
        sel.selected = topk_indices(slice, sel.k);
        groups[b] = sel.k;
        for (std::size_t i : sel.selected) global.push_back(b * n + i);
    }
    if (global.empty()) {
        out.output = hidden;
        return out;
    }
    const Tensor picked = gather_rows(hidden, global);
    Tensor update = images == 1 ? block_forward(picked, cond, block, options.heads)
                                : block_forward(picked, cond, block, options.heads, groups);
    if (options.rescale) update = scale_rows(update, gather_rows(scores, global));
    out.output = scatter_rows(hidden, add(picked, update), global);
    return out;
}

RoutedLayerOutput routed_block_forward(const Tensor& hidden, const Tensor& cond,
                                       const BlockParams& block, const Tensor& scores, double bin,
                                       const RoutingOptions& options) {
    const double bins[] = {bin};
    return routed_block_forward(hidden, cond, block, scores, bins, options);
}

RoutedLayerOutput routed_block_forward(const Tensor& hidden, const Tensor& cond,
                                       const BlockParams& block, const RouterParams& router,
                                       double bin, const RoutingOptions& options) {
    return routed_block_forward(hidden, cond, block, router_scores(hidden, router), bin, options);
}

} // namespace dcr
