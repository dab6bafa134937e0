#include "dcr/ratio.hpp"

#include "dcr/error.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

namespace dcr {

RatioTable::RatioTable(std::size_t layers, std::size_t regions)
    : values_(Tensor::zeros({layers, regions}, true)) {}

RatioTable::RatioTable(Tensor values) : values_(std::move(values)) {
    if (values_.dim() != 2) {
        throw DimensionError("ratio table must be 2-D, got " + shape_str(values_.shape()));
    }
}

std::size_t RatioTable::flat_index(std::size_t layer, std::size_t region) const {
    if (layer >= layers() || region >= regions()) {
        throw IndexError("ratio table: entry (" + std::to_string(layer) + "," +
                         std::to_string(region) + ") outside " + shape_str(values_.shape()));
    }
    return layer * regions() + region;
}

double RatioTable::value(std::size_t layer, std::size_t region) const {
    return values_.data()[flat_index(layer, region)];
}

void RatioTable::set(std::size_t layer, std::size_t region, double value) {
    values_.mutable_data()[flat_index(layer, region)] = value;
}

bool RatioTable::is_snapped() const {
    return std::all_of(values_.data().begin(), values_.data().end(),
                       [](double r) { return bin_index(r) >= 0; });
}

double RatioTable::mean() const {
    double total = 0.0;
    for (double r : values_.data()) total += r;
    return total / static_cast<double>(values_.numel());
}

BinQuery query_bins(double ratio) {
    if (!(ratio >= 0.0 && ratio <= 1.0)) {
        throw ArgumentError("query_bins: ratio " + std::to_string(ratio) + " outside [0, 1]");
    }
    if (ratio == 1.0) return BinQuery{1.0, 1.0, 1.0, 0.0};
    const double scaled = ratio * kBinCount;
    const int b = std::min(static_cast<int>(std::floor(scaled)), kBinCount - 1);
    const double frac = std::clamp(std::round((scaled - b) * 1e12) / 1e12, 0.0, 1.0);
    return BinQuery{static_cast<double>(b) / kBinCount, static_cast<double>(b + 1) / kBinCount,
                    1.0 - frac, frac};
}

Tensor blend_branches(const Tensor& lower, const Tensor& upper, const Tensor& ratio,
                      const BinQuery& query) {
    return blend_branches(lower, upper, ratio, std::span<const BinQuery>(&query, 1));
}

Tensor blend_branches(const Tensor& lower, const Tensor& upper, const Tensor& ratios,
                      std::span<const BinQuery> queries) {
    if (lower.shape() != upper.shape()) {
        throw DimensionError("blend_branches: " + shape_str(lower.shape()) + " vs " +
                             shape_str(upper.shape()));
    }
    const std::size_t images = queries.size();
    if (images == 0 || ratios.numel() != images || lower.numel() % images != 0) {
        throw DimensionError("blend_branches: " + std::to_string(ratios.numel()) + " ratios and " +
                             std::to_string(images) + " queries for " + shape_str(lower.shape()));
    }
    const std::size_t block = lower.numel() / images;
    auto lo = lower.data();
    auto hi = upper.data();
    std::vector<double> out(lo.size());
    for (std::size_t b = 0; b < images; ++b) {
        const BinQuery& q = queries[b];
        for (std::size_t i = b * block; i < (b + 1) * block; ++i)
            out[i] = q.weight_lower * lo[i] + q.weight_upper * hi[i];
    }
    const bool rec = Tape::should_record({&lower, &upper, &ratios});
    Tensor result = make_result(lower.shape(), std::move(out), rec, "blend_branches");
    if (rec) {
        std::vector<BinQuery> qs(queries.begin(), queries.end());
        Tape::active()->record(
            "blend_branches", {lower, upper, ratios}, result,
            [lower, upper, ratios, block, qs = std::move(qs)](auto g) mutable {
                auto lo = lower.data();
                auto hi = upper.data();
                // A zero weight adds nothing, so a branch whose weights are
                // all zero keeps no grad and its subgraph is skipped.
                for (std::size_t b = 0; b < qs.size(); ++b) {
                    const BinQuery& q = qs[b];
                    const std::size_t begin = b * block, end = begin + block;
                    if (lower.requires_grad() && q.weight_lower != 0.0) {
                        auto gl = lower.grad_accumulator();
                        for (std::size_t i = begin; i < end; ++i) gl[i] += q.weight_lower * g[i];
                    }
                    if (upper.requires_grad() && q.weight_upper != 0.0) {
                        auto gu = upper.grad_accumulator();
                        for (std::size_t i = begin; i < end; ++i) gu[i] += q.weight_upper * g[i];
                    }
                    if (ratios.requires_grad() && !q.degenerate()) {
                        double dot = 0.0;
                        for (std::size_t i = begin; i < end; ++i) dot += g[i] * (hi[i] - lo[i]);
                        ratios.grad_accumulator()[b] += kBinCount * dot;
                    }
                }
            });
    }
    return result;
}

DiffcrLayerOutput diffcr_block_forward(const Tensor& hidden, const Tensor& cond,
                                       const BlockParams& block, const Tensor& scores,
                                       const Tensor& ratios, const RoutingOptions& options) {
    DiffcrLayerOutput out;
    std::vector<double> lower_bins, upper_bins;
    bool any_upper = false;
    for (double r : ratios.data()) {
        const BinQuery q = query_bins(r);
        out.queries.push_back(q);
        lower_bins.push_back(q.lower);
        upper_bins.push_back(q.upper);
        any_upper = any_upper || !q.degenerate();
    }
    out.lower = routed_block_forward(hidden, cond, block, scores, lower_bins, options);
    if (!any_upper) {
        out.output = out.lower.output;
        return out;
    }
    out.upper = routed_block_forward(hidden, cond, block, scores, upper_bins, options);
    out.output = blend_branches(out.lower.output, out.upper.output, ratios, out.queries);
    return out;
}

std::size_t region_of_timestep(std::size_t t, std::size_t train_timesteps, std::size_t regions) {
    if (regions == 0 || regions > train_timesteps) {
        throw ArgumentError("region_of_timestep: regions " + std::to_string(regions) +
                            " outside [1, " + std::to_string(train_timesteps) + "]");
    }
    if (t >= train_timesteps) {
        throw ArgumentError("region_of_timestep: t " + std::to_string(t) + " outside [0, " +
                            std::to_string(train_timesteps) + ")");
    }
    return std::min(t * regions / train_timesteps, regions - 1);
}

RatioLossTerm ratio_mse_loss(const RatioTable& table, std::span<const std::size_t> batch_timesteps,
                             std::size_t train_timesteps, double target, double lambda) {
    if (batch_timesteps.empty()) throw ArgumentError("ratio_mse_loss: empty batch");
    if (!(lambda >= 0.0)) throw ArgumentError("ratio_mse_loss: lambda must be non-negative");
    std::vector<std::size_t> touched;
    touched.reserve(table.layers() * batch_timesteps.size());
    for (std::size_t layer = 0; layer < table.layers(); ++layer) {
        for (std::size_t t : batch_timesteps) {
            touched.push_back(
                table.flat_index(layer, region_of_timestep(t, train_timesteps, table.regions())));
        }
    }
    const Tensor& values = table.tensor();
    const Tensor column = reshape(values, {values.numel(), 1});
    const Tensor batch_mean = mean(gather_rows(column, touched));
    const Tensor gap = sub(batch_mean, Tensor::scalar(target));
    RatioLossTerm term;
    term.value = scale(mul(gap, gap), lambda);
    term.batch_mean = batch_mean.item();
    term.target = target;
    return term;
}

double snap_ratio(double ratio) {
    return std::floor(ratio * kBinCount + 0.5) / kBinCount;
}

RatioTable snap_for_inference(const RatioTable& table) {
    std::vector<double> values(table.tensor().data().begin(), table.tensor().data().end());
    for (double& r : values) r = snap_ratio(std::clamp(r, 0.0, 1.0));
    return RatioTable(Tensor(table.tensor().shape(), std::move(values), false));
}

void project_ratios(RatioTable& table) {
    for (double& r : table.tensor().mutable_data()) r = std::clamp(r, 0.0, 1.0);
}

} // namespace dcr
