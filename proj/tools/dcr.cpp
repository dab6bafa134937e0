// Command-line front end: train, sample, bench, viz, inspect.

#include "dcr/commands.hpp"
#include "dcr/error.hpp"
#include "dcr/io.hpp"

#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>
#include <vector>

namespace {

struct ConfigFlags {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::optional<double> target_ratio;
    std::optional<std::size_t> regions;
    std::optional<std::size_t> steps;
    std::optional<std::size_t> batch_size;
    std::optional<std::string> dataset;
    std::vector<std::string> overrides;

    void attach(CLI::App& app) {
        app.add_option("--config", config_path, "Run config file ([model]/[train]/[data] sections)");
        app.add_option("--seed", seed, "Run seed");
        app.add_option("--target-ratio", target_ratio, "Global target compression ratio");
        app.add_option("--regions", regions, "Timestep regions per layer");
        app.add_option("--steps", steps, "Training steps");
        app.add_option("--batch-size", batch_size, "Images per step");
        app.add_option("--dataset", dataset, "patterns | constant");
        app.add_option("--set", overrides, "Override any field: section.key=value");
    }

    // Flags override the file, which overrides defaults.
    dcr::RunConfig resolve() const {
        dcr::RunConfig config;
        if (!config_path.empty()) config = dcr::RunConfig::from_text(dcr::read_file(config_path));
        if (seed) config.seed = *seed;
        if (target_ratio) config.model.target_ratio = *target_ratio;
        if (regions) config.model.regions = *regions;
        if (steps) config.train.steps = *steps;
        if (batch_size) config.train.batch_size = *batch_size;
        if (dataset) {
            config.dataset = dcr::dataset_kind_from_string(*dataset);
            if (config.dataset == dcr::DatasetKind::constant) config.model.classes = 1;
        }
        for (const std::string& o : overrides) {
            const auto eq = o.find('=');
            const auto dot = o.find('.');
            if (eq == std::string::npos || dot == std::string::npos || dot > eq) {
                throw dcr::ConfigError("--set expects section.key=value, got '" + o + "'");
            }
            config.set(o.substr(0, dot), o.substr(dot + 1, eq - dot - 1), o.substr(eq + 1));
        }
        config.validate();
        return config;
    }
};

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Diffusion transformer with learned per-layer token routing ratios"};
    app.require_subcommand(1);
    std::string out = "run";

    ConfigFlags train_flags;
    bool print_config = false;
    auto* train = app.add_subcommand("train", "Train model, routers and ratio table jointly");
    train_flags.attach(*train);
    train->add_option("--out", out, "Run directory");
    train->add_flag("--print-config", print_config, "Print the resolved config and exit");

    std::string checkpoint;
    dcr::SampleRequest request;
    std::optional<std::size_t> sample_steps;
    auto* sample = app.add_subcommand("sample", "Sample images from a checkpoint");
    sample->add_option("--checkpoint", checkpoint, "Checkpoint (default <out>/checkpoints/final.dcr)");
    sample->add_option("--out", out, "Run directory");
    sample->add_option("--class", request.cls, "Class label");
    sample->add_option("--count", request.count, "Number of images");
    sample->add_option("--seed", request.seed, "Sampling seed (image i uses seed + i)");
    sample->add_option("--sample-steps", sample_steps, "Sampler steps");
    sample->add_flag("--dense", request.dense, "Ignore the ratio table (unrouted baseline)");

    ConfigFlags bench_flags;
    std::size_t tokens = 256, width = 128, reps = 20;
    std::vector<double> ratios{0.0, 0.3, 0.5};
    auto* bench = app.add_subcommand("bench", "Single-layer routed vs dense latency");
    bench_flags.attach(*bench);
    bench->add_option("--out", out, "Run directory");
    bench->add_option("--tokens", tokens, "Tokens per layer");
    bench->add_option("--width", width, "Hidden width");
    bench->add_option("--reps", reps, "Timed repetitions (median reported)");
    bench->add_option("--ratios", ratios, "Ratio bins")->delimiter(',');

    ConfigFlags viz_flags;
    std::string viz_checkpoint;
    auto* viz = app.add_subcommand("viz", "Router maps, ratio heatmap and report");
    viz_flags.attach(*viz);
    viz->add_option("--checkpoint", viz_checkpoint, "Checkpoint (default: fresh model from config)");
    viz->add_option("--out", out, "Run directory");

    std::string inspect_path;
    auto* inspect = app.add_subcommand("inspect", "Print a checkpoint manifest");
    inspect->add_option("checkpoint", inspect_path, "Checkpoint file")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (*train) {
            const dcr::RunConfig config = train_flags.resolve();
            if (print_config) {
                std::cout << config.to_text();
                return 0;
            }
            dcr::cmd_train(config, out, std::cout);
        } else if (*sample) {
            if (checkpoint.empty()) checkpoint = out + "/checkpoints/final.dcr";
            request.steps = sample_steps;
            dcr::cmd_sample(checkpoint, request, out, std::cout);
        } else if (*bench) {
            dcr::cmd_bench(tokens, width, ratios, reps, bench_flags.resolve().hash(), out, std::cout);
        } else if (*viz) {
            if (viz_checkpoint.empty()) {
                const dcr::RunConfig config = viz_flags.resolve();
                const dcr::Trainer trainer = dcr::make_trainer(config);
                dcr::cmd_viz(config, trainer, out, std::cout);
            } else {
                const dcr::LoadedRun run = dcr::load_run(viz_checkpoint);
                dcr::cmd_viz(run.config, run.trainer, out, std::cout);
            }
        } else if (*inspect) {
            std::cout << dcr::cmd_inspect(inspect_path);
        }
    } catch (const dcr::NumericalError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const dcr::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
