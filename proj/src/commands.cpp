#include "dcr/commands.hpp"

#include "dcr/error.hpp"
#include "dcr/io.hpp"

#include <chrono>
#include <cstdio>
#include <ostream>
#include <sstream>

namespace dcr {

namespace {

std::string step_tag(std::uint64_t step) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%06llu", static_cast<unsigned long long>(step));
    return buf;
}

} // namespace

Trainer make_trainer(const RunConfig& config) {
    config.validate();
    return Trainer(config.model, config.train, config.dataset_spec(), config.seed);
}

LoadedRun load_run(const std::filesystem::path& checkpoint_path) {
    const Checkpoint checkpoint = load_checkpoint(checkpoint_path);
    RunConfig config = RunConfig::from_text(checkpoint.config_text);
    Trainer trainer = make_trainer(config);
    restore_checkpoint(trainer, config, checkpoint);
    return LoadedRun{std::move(config), std::move(trainer)};
}

TrainSummary cmd_train(const RunConfig& config, const std::filesystem::path& out_dir, std::ostream& log) {
    Trainer trainer = make_trainer(config);
    const std::string hash = config.hash();
    const auto trajectory_path = out_dir / "trajectory.csv";
    TrainSummary summary;
    const auto start = std::chrono::steady_clock::now();
    log << "train: config " << hash << ", " << config.train.steps << " steps, batch "
        << config.train.batch_size << "\n";
    for (std::size_t i = 0; i < config.train.steps; ++i) {
        StepLosses losses;
        try {
            losses = trainer.step();
        } catch (const NumericalError& e) {
            write_file(trajectory_path, summary.trajectory.to_csv(hash));
            log << "train: aborted at step " << i + 1 << ": " << e.what() << "\n";
            throw;
        }
        const std::uint64_t step = trainer.steps_done();
        summary.losses.push_back(losses);
        if (step == 1 || step % config.log_every == 0) {
            summary.trajectory.append(step, trainer.table(), losses);
        }
        if (step % config.checkpoint_every == 0) {
            save_checkpoint(out_dir / "checkpoints" / ("ckpt_" + step_tag(step) + ".dcr"),
                            capture_checkpoint(trainer, config));
        }
        if (step == 1 || step % 100 == 0 || step == config.train.steps) {
            log << "step " << step << " loss " << losses.total << " diffusion " << losses.diffusion
                << " ratio_loss " << losses.ratio << " batch_mean_ratio " << losses.batch_mean_ratio
                << "\n";
        }
    }
    summary.final_checkpoint = out_dir / "checkpoints" / "final.dcr";
    save_checkpoint(summary.final_checkpoint, capture_checkpoint(trainer, config));
    write_file(trajectory_path, summary.trajectory.to_csv(hash));
    summary.seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    log << "train: done in " << summary.seconds << " s; table mean " << trainer.table().mean() << "\n";
    return summary;
}

SampleSummary cmd_sample(const std::filesystem::path& checkpoint, const SampleRequest& request,
                         const std::filesystem::path& out_dir, std::ostream& log) {
    const LoadedRun run = load_run(checkpoint);
    const ModelConfig& model_config = run.config.model;
    const RatioTable snapped = snap_for_inference(run.trainer.table());
    const std::string hash = run.config.hash();
    SampleOptions options;
    options.steps = request.steps.value_or(model_config.sample_steps);
    options.cfg_scale = model_config.cfg_scale;
    ModelConfig run_config = model_config;
    run_config.sample_steps = options.steps;

    SampleSummary summary;
    summary.flops = request.dense ? dense_flops_report(run_config) : flops_of_run(run_config, snapped);
    for (std::size_t i = 0; i < request.count; ++i) {
        options.seed = request.seed + i;
        Tensor image = sample(run.trainer.model(), request.dense ? nullptr : &snapped, request.cls,
                              run.trainer.schedule(), options);
        const auto file = out_dir / "samples" /
                          ("sample_c" + std::to_string(request.cls) + "_" + std::to_string(i) + ".pgm");
        write_file(file, image_to_pgm(image, hash));
        summary.files.push_back(file);
        summary.images.push_back(std::move(image));
    }
    write_file(out_dir / "samples" / "flops.csv", flops_report_csv(summary.flops, hash));
    log << "sample: " << request.count << " image(s) of class " << request.cls
        << (request.dense ? " (dense)" : "") << "; block MACs " << summary.flops.run_total
        << " vs dense " << summary.flops.dense_run << ", savings " << summary.flops.savings << "\n";
    return summary;
}

std::vector<BenchRow> cmd_bench(std::size_t tokens, std::size_t width, std::span<const double> ratios,
                                std::size_t repetitions, const std::string& config_hash,
                                const std::filesystem::path& out_dir, std::ostream& log) {
    auto rows = benchmark_routing(tokens, width, ratios, repetitions);
    write_file(out_dir / "bench.csv", bench_csv(rows, config_hash));
    for (const BenchRow& r : rows) {
        log << "bench: ratio " << r.ratio << " k " << r.k << " dense " << r.dense_seconds * 1e3
            << " ms routed " << r.routed_seconds * 1e3 << " ms (x" << r.relative() << ", overhead "
            << r.overhead_fraction << ")\n";
    }
    return rows;
}

VizSummary cmd_viz(const RunConfig& config, const Trainer& trainer,
                   const std::filesystem::path& out_dir, std::ostream& log) {
    const ModelConfig& mc = config.model;
    const std::string hash = config.hash();
    VizSummary summary;
    summary.snapped = snap_for_inference(trainer.table());

    std::vector<std::size_t> timesteps;
    for (std::size_t g = 0; g < mc.regions; ++g) {
        timesteps.push_back((2 * g + 1) * mc.train_timesteps / (2 * mc.regions));
    }
    std::vector<std::size_t> layers(mc.layers);
    for (std::size_t l = 0; l < mc.layers; ++l) layers[l] = l;
    const Tensor image = config.dataset_spec().sample(0, config.seed);
    summary.maps = emit_router_maps(trainer.model(), summary.snapped, image, 0, config.seed, timesteps,
                                    layers, out_dir / "maps", hash);

    summary.heatmap = out_dir / "heatmap.csv";
    emit_ratio_heatmap(summary.snapped, summary.heatmap, hash);

    summary.region_means.assign(mc.regions, 0.0);
    for (std::size_t g = 0; g < mc.regions; ++g) {
        for (std::size_t l = 0; l < mc.layers; ++l) summary.region_means[g] += summary.snapped.value(l, g);
        summary.region_means[g] /= static_cast<double>(mc.layers);
    }
    std::vector<double> layer_score(mc.layers, 0.0), layer_kept(mc.layers, 0.0);
    for (const RouterMap& m : summary.maps) layer_score[m.layer] += m.mean() / static_cast<double>(timesteps.size());
    for (std::size_t l = 0; l < mc.layers; ++l) {
        for (std::size_t g = 0; g < mc.regions; ++g) {
            layer_kept[l] += (1.0 - summary.snapped.value(l, g)) / static_cast<double>(mc.regions);
        }
    }
    summary.score_ratio_correlation = pearson(layer_score, layer_kept);

    std::ostringstream report;
    report << "# config_hash=" << hash << "\n";
    report << "region_mean_ratio";
    for (double v : summary.region_means) report << ' ' << format_double(v);
    report << "\n(region 0 holds the least noisy timesteps)\n";
    report << "layer mean_router_score kept_fraction\n";
    for (std::size_t l = 0; l < mc.layers; ++l) {
        report << l << ' ' << format_double(layer_score[l]) << ' ' << format_double(layer_kept[l]) << "\n";
    }
    report << "correlation(score, kept) " << format_double(summary.score_ratio_correlation) << "\n";
    write_file(out_dir / "viz_report.txt", report.str());
    log << report.str();
    return summary;
}

std::string cmd_inspect(const std::filesystem::path& checkpoint) {
    const Checkpoint c = load_checkpoint(checkpoint);
    return checkpoint_manifest(c);
}

} // namespace dcr
