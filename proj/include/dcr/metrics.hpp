#pragma once

#include "dcr/diffusion.hpp"
#include "dcr/model.hpp"
#include "dcr/ratio.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace dcr {

/// Multiply-accumulate counts of one routed layer.
struct LayerFlops {
    std::uint64_t router = 0;
    std::uint64_t attention = 0;
    std::uint64_t mlp = 0;

    std::uint64_t total() const { return router + attention + mlp; }
    bool operator==(const LayerFlops&) const = default;
};

/// Router N d; attention 4 k d^2 + 2 k^2 d; MLP 2 k d (mlp_ratio d).
LayerFlops flops_of_layer(std::size_t tokens, std::size_t k, std::size_t width, std::size_t mlp_ratio);

/// Block cost of the unrouted layer (no router).
LayerFlops dense_layer_flops(std::size_t tokens, std::size_t width, std::size_t mlp_ratio);

/// Block-compute accounting for one sampling run. Embedding and output heads
/// are identical in both modes and left out.
struct FlopsReport {
    std::size_t layers = 0;
    std::size_t regions = 0;
    std::vector<LayerFlops> per_layer_region; // layer major, L x R
    std::vector<std::uint64_t> forward_total; // per region
    std::uint64_t dense_forward = 0;
    std::uint64_t run_total = 0;   // over sampling steps x 2 guidance branches
    std::uint64_t dense_run = 0;
    double savings = 0.0;          // 1 - run_total / dense_run
    /// Analytic activation element counts for one forward (largest region).
    std::uint64_t activations = 0;
    std::uint64_t dense_activations = 0;

    const LayerFlops& at(std::size_t layer, std::size_t region) const {
        return per_layer_region[layer * regions + region];
    }
};

/// Throws PreconditionError for a table that is not snapped.
FlopsReport flops_of_run(const ModelConfig& config, const RatioTable& snapped);

/// Report for the unrouted model (savings 0).
FlopsReport dense_flops_report(const ModelConfig& config);

std::string flops_report_csv(const FlopsReport& report, const std::string& config_hash);

struct BenchRow {
    double ratio = 0.0;
    std::size_t k = 0;
    double dense_seconds = 0.0;  // median
    double routed_seconds = 0.0; // median
    /// Share of the routed time spent in scoring, top-k and gather/scatter.
    double overhead_fraction = 0.0;

    double relative() const { return routed_seconds / dense_seconds; }
};

/// Single-layer inference latency, dense vs routed, medians over
/// `repetitions` timed runs after warm-up. One row per ratio (each a bin).
std::vector<BenchRow> benchmark_routing(std::size_t tokens, std::size_t width,
                                        std::span<const double> ratios, std::size_t repetitions,
                                        std::size_t heads = 4, std::uint64_t seed = 0);

std::string bench_csv(std::span<const BenchRow> rows, const std::string& config_hash);

struct TrajectoryRow {
    std::uint64_t step = 0;
    std::size_t layer = 0;
    std::size_t region = 0;
    double ratio = 0.0;
    double batch_mean = 0.0;
    double total_loss = 0.0;
    double diffusion_loss = 0.0;
    double ratio_loss = 0.0;
};

/// Append-only per-step ratio log; one row per (layer, region) per step.
class TrajectoryLog {
public:
    /// Throws ArgumentError unless `step` exceeds every logged step.
    void append(std::uint64_t step, const RatioTable& table, const StepLosses& losses);

    const std::vector<TrajectoryRow>& rows() const { return rows_; }
    std::string to_csv(const std::string& config_hash) const;

private:
    std::vector<TrajectoryRow> rows_;
};

/// Grayscale image as ASCII PGM (P2, maxval 255) with the config hash in a
/// comment. `values` are row-major in [0, 1].
std::string to_pgm(std::span<const double> values, std::size_t width, std::size_t height,
                   const std::string& config_hash);

struct PgmImage {
    std::size_t width = 0;
    std::size_t height = 0;
    std::vector<int> pixels; // 0..255
    std::string comment;
};

PgmImage parse_pgm(const std::string& text);

/// Model image in [-1, 1] as PGM.
std::string image_to_pgm(const Tensor& image, const std::string& config_hash);

struct RouterMap {
    std::size_t layer = 0;
    std::size_t timestep = 0;
    std::size_t grid = 0;
    std::vector<double> scores; // grid x grid, row-major, each in [0, 1]
    std::filesystem::path file;

    double mean() const;
};

/// Router scores per (layer, timestep) for one clean image, noised to each
/// timestep with fixed seeded noise, written as
/// `router_l{layer}_t{timestep}.pgm` under `out_dir`. Routing follows the
/// snapped table.
std::vector<RouterMap> emit_router_maps(const DiT& model, const RatioTable& snapped,
                                        const Tensor& image, std::size_t cls, std::uint64_t noise_seed,
                                        std::span<const std::size_t> timesteps,
                                        std::span<const std::size_t> layers,
                                        const std::filesystem::path& out_dir,
                                        const std::string& config_hash);

/// Snapped table as CSV: header `layer,r0,...`, one row per layer.
std::string ratio_heatmap_csv(const RatioTable& table, const std::string& config_hash);
RatioTable parse_ratio_heatmap(const std::string& text);
void emit_ratio_heatmap(const RatioTable& table, const std::filesystem::path& path,
                        const std::string& config_hash);

/// Pearson correlation; 0 when either side has no spread.
double pearson(std::span<const double> a, std::span<const double> b);

} // namespace dcr
