#pragma once

#include "dcr/dataset.hpp"
#include "dcr/model.hpp"
#include "dcr/optim.hpp"
#include "dcr/ratio.hpp"

#include <cstdint>
#include <vector>

namespace dcr {

struct NoiseSchedule {
    std::vector<double> betas;
    std::vector<double> alphas;
    std::vector<double> alpha_bars;

    std::size_t size() const { return betas.size(); }
};

/// Linear beta schedule over `timesteps` steps.
NoiseSchedule make_schedule(std::size_t timesteps, double beta_start = 1e-4, double beta_end = 0.02);

/// sqrt(abar_t) x0 + sqrt(1 - abar_t) noise
Tensor q_sample(const Tensor& x0, std::size_t t, const Tensor& noise, const NoiseSchedule& schedule);

struct TrainBatch {
    std::vector<Tensor> images; // x0, model range [-1, 1]
    std::vector<std::size_t> classes;
    std::vector<std::size_t> timesteps;
    std::vector<Tensor> noise;
};

struct TrainConfig {
    std::size_t batch_size = 32;
    AdamWHyper optimizer;
    /// Probability of replacing a label by the null class.
    double uncond_prob = 0.1;
    /// Linear lambda ramp from ratio_loss_coeff to lambda_end over the run.
    bool lambda_schedule = false;
    double lambda_end = 0.3;
    std::size_t steps = 2000;

    bool operator==(const TrainConfig&) const = default;
};

/// Batch for a given step; a pure function of (seed, step).
TrainBatch make_batch(const ToyDataset& data, const ModelConfig& config, std::size_t batch_size,
                      double uncond_prob, std::uint64_t seed, std::uint64_t step);

struct StepLosses {
    double total = 0.0;
    double diffusion = 0.0;
    double ratio = 0.0;
    double batch_mean_ratio = 0.0;
};

/// One joint update: mean noise-prediction MSE over the batch plus the ratio
/// loss, backward, AdamW over every registered slot, then ratio projection.
/// The whole batch runs as one stacked forward on a single tape.
StepLosses training_step(const DiT& model, RatioTable& table, AdamW& optimizer,
                         const TrainBatch& batch, const NoiseSchedule& schedule, double lambda,
                         double target);

/// Model, ratio table and optimizer wired together for a seeded run.
class Trainer {
public:
    Trainer(const ModelConfig& model_config, const TrainConfig& train_config,
            const ToyDataset& data, std::uint64_t seed);
    // Copies would alias the same parameter storage.
    Trainer(const Trainer&) = delete;
    Trainer& operator=(const Trainer&) = delete;
    Trainer(Trainer&&) = default;
    Trainer& operator=(Trainer&&) = default;

    StepLosses step();
    double lambda_at(std::uint64_t step) const;

    DiT& model() { return model_; }
    const DiT& model() const { return model_; }
    RatioTable& table() { return table_; }
    const RatioTable& table() const { return table_; }
    AdamW& optimizer() { return optimizer_; }
    const AdamW& optimizer() const { return optimizer_; }
    const NoiseSchedule& schedule() const { return schedule_; }
    std::uint64_t steps_done() const { return optimizer_.steps(); }

private:
    ModelConfig model_config_;
    TrainConfig train_config_;
    ToyDataset data_;
    std::uint64_t seed_;
    DiT model_;
    RatioTable table_;
    AdamW optimizer_;
    NoiseSchedule schedule_;
};

/// Evenly spaced subset of [0, T) used by the sampler, ascending.
std::vector<std::size_t> sampling_timesteps(std::size_t train_timesteps, std::size_t steps);

/// uncond + scale * (cond - uncond)
Tensor cfg_combine(const Tensor& uncond, const Tensor& cond, double scale);

struct SampleOptions {
    std::size_t steps = 50;
    double cfg_scale = 4.5;
    std::uint64_t seed = 0;
    bool rescale = true;
};

/// Ancestral sampling over the respaced schedule with classifier-free
/// guidance. `snapped == nullptr` samples with the dense model.
Tensor sample(const DiT& model, const RatioTable* snapped, std::size_t cls,
              const NoiseSchedule& schedule, const SampleOptions& options);

} // namespace dcr
