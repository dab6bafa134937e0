#pragma once

#include "dcr/checkpoint.hpp"
#include "dcr/config.hpp"
#include "dcr/metrics.hpp"

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <vector>

namespace dcr {

Trainer make_trainer(const RunConfig& config);

/// Trainer rebuilt from a checkpoint's own config.
struct LoadedRun {
    RunConfig config;
    Trainer trainer;
};
LoadedRun load_run(const std::filesystem::path& checkpoint_path);

struct TrainSummary {
    std::vector<StepLosses> losses; // one per step, in order
    TrajectoryLog trajectory;
    std::filesystem::path final_checkpoint;
    double seconds = 0.0;
};

/// Runs `config.train.steps` joint updates. Writes
/// `checkpoints/ckpt_<step>.dcr` every checkpoint_every steps, `final.dcr`
/// at the end, and `trajectory.csv` (rows at step 1 and every log_every
/// steps). A non-finite loss writes the trajectory so far and rethrows.
TrainSummary cmd_train(const RunConfig& config, const std::filesystem::path& out_dir, std::ostream& log);

struct SampleRequest {
    std::size_t cls = 0;
    std::size_t count = 1;
    std::uint64_t seed = 0;
    bool dense = false;
    std::optional<std::size_t> steps; // defaults to the config's sample_steps
};

struct SampleSummary {
    std::vector<Tensor> images;
    std::vector<std::filesystem::path> files;
    FlopsReport flops;
};

/// Snaps the checkpoint's table and writes `samples/sample_c<cls>_<i>.pgm`
/// plus `samples/flops.csv`.
SampleSummary cmd_sample(const std::filesystem::path& checkpoint, const SampleRequest& request,
                         const std::filesystem::path& out_dir, std::ostream& log);

/// Writes `bench.csv`.
std::vector<BenchRow> cmd_bench(std::size_t tokens, std::size_t width, std::span<const double> ratios,
                                std::size_t repetitions, const std::string& config_hash,
                                const std::filesystem::path& out_dir, std::ostream& log);

struct VizSummary {
    std::vector<RouterMap> maps;
    RatioTable snapped;
    std::vector<double> region_means;
    /// Per layer: mean router score vs 1 - mean snapped ratio.
    double score_ratio_correlation = 0.0;
    std::filesystem::path heatmap;
};

/// Router maps under `maps/` for every layer at the centre timestep of each
/// region, `heatmap.csv` of the snapped table, and `viz_report.txt`.
VizSummary cmd_viz(const RunConfig& config, const Trainer& trainer,
                   const std::filesystem::path& out_dir, std::ostream& log);

std::string cmd_inspect(const std::filesystem::path& checkpoint);

} // namespace dcr
