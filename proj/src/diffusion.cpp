#include "dcr/diffusion.hpp"

#include "dcr/error.hpp"
#include "dcr/rng.hpp"

#include <algorithm>
#include <cmath>

namespace dcr {

namespace {

enum Stream : std::uint64_t { kBatchStream = 11, kSampleStream = 12 };

void ensure_finite(double value, const Tape& tape, const char* what) {
    if (std::isfinite(value)) return;
    const auto op = tape.first_nonfinite();
    throw NumericalError(std::string("non-finite ") + what + "; first non-finite output from op '" +
                         op.value_or("unknown") + "'");
}

} // namespace

NoiseSchedule make_schedule(std::size_t timesteps, double beta_start, double beta_end) {
    if (timesteps == 0) throw ArgumentError("make_schedule: need at least one timestep");
    if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
        throw ArgumentError("make_schedule: need 0 < beta_start <= beta_end < 1");
    }
    NoiseSchedule s;
    s.betas.resize(timesteps);
    s.alphas.resize(timesteps);
    s.alpha_bars.resize(timesteps);
    double running = 1.0;
    for (std::size_t t = 0; t < timesteps; ++t) {
        const double frac =
            timesteps == 1 ? 0.0 : static_cast<double>(t) / static_cast<double>(timesteps - 1);
        s.betas[t] = beta_start + (beta_end - beta_start) * frac;
        s.alphas[t] = 1.0 - s.betas[t];
        running *= s.alphas[t];
        s.alpha_bars[t] = running;
    }
    return s;
}

Tensor q_sample(const Tensor& x0, std::size_t t, const Tensor& noise, const NoiseSchedule& schedule) {
    if (t >= schedule.size()) {
        throw ArgumentError("q_sample: t " + std::to_string(t) + " outside schedule of " +
                            std::to_string(schedule.size()));
    }
    if (x0.shape() != noise.shape()) {
        throw DimensionError("q_sample: " + shape_str(x0.shape()) + " vs " + shape_str(noise.shape()));
    }
    const double a = std::sqrt(schedule.alpha_bars[t]);
    const double b = std::sqrt(1.0 - schedule.alpha_bars[t]);
    std::vector<double> out(x0.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * x0.data()[i] + b * noise.data()[i];
    return Tensor(x0.shape(), std::move(out));
}

TrainBatch make_batch(const ToyDataset& data, const ModelConfig& config, std::size_t batch_size,
                      double uncond_prob, std::uint64_t seed, std::uint64_t step) {
    Rng rng = Rng(seed).split(kBatchStream).split(step);
    TrainBatch batch;
    const std::size_t side = config.image_side;
    for (std::size_t b = 0; b < batch_size; ++b) {
        const auto cls = static_cast<std::size_t>(rng.below(data.classes));
        batch.images.push_back(data.sample(cls, rng.next_u64()));
        batch.timesteps.push_back(static_cast<std::size_t>(rng.below(config.train_timesteps)));
        std::vector<double> eps(side * side);
        for (double& e : eps) e = rng.normal();
        batch.noise.emplace_back(Shape{side, side}, std::move(eps));
        batch.classes.push_back(rng.uniform() < uncond_prob ? config.classes : cls);
    }
    return batch;
}

StepLosses training_step(const DiT& model, RatioTable& table, AdamW& optimizer,
                         const TrainBatch& batch, const NoiseSchedule& schedule, double lambda,
                         double target) {
    const std::size_t count = batch.images.size();
    if (count == 0) throw ArgumentError("training_step: empty batch");
    optimizer.zero_grad();
    table.tensor().zero_grad();

    std::vector<Tensor> noisy;
    noisy.reserve(count);
    std::vector<double> noise_tokens;
    const auto perm = patch_permutation(model.config());
    for (std::size_t b = 0; b < count; ++b) {
        noisy.push_back(q_sample(batch.images[b], batch.timesteps[b], batch.noise[b], schedule));
        for (std::size_t m : perm) noise_tokens.push_back(batch.noise[b].data()[m]);
    }
    const Tensor target_noise({count * model.config().tokens(), model.config().patch_dim()},
                              std::move(noise_tokens));

    Tape tape;
    Tape::Scope scope(tape);
    ForwardOptions train;
    train.mode = Mode::train;
    const Tensor predicted = model.forward_tokens(noisy, batch.timesteps, batch.classes, &table, train);
    const Tensor diffusion = mse_mean(predicted, target_noise);
    ensure_finite(diffusion.item(), tape, "diffusion loss");
    RatioLossTerm term = ratio_mse_loss(table, batch.timesteps, schedule.size(), target, lambda);
    ensure_finite(term.value.item(), tape, "ratio loss");
    const Tensor total = add(diffusion, term.value);
    tape.backward(total);

    StepLosses losses;
    losses.diffusion = diffusion.item();
    losses.ratio = term.value.item();
    losses.batch_mean_ratio = term.batch_mean;
    losses.total = total.item();
    optimizer.step();
    project_ratios(table);
    return losses;
}

Trainer::Trainer(const ModelConfig& model_config, const TrainConfig& train_config,
                 const ToyDataset& data, std::uint64_t seed)
    : model_config_(model_config),
      train_config_(train_config),
      data_(data),
      seed_(seed),
      model_(model_config, seed),
      table_(model_config.layers, model_config.regions),
      optimizer_(train_config.optimizer),
      schedule_(make_schedule(model_config.train_timesteps)) {
    data_.validate();
    if (data_.classes != model_config_.classes || data_.image_side != model_config_.image_side) {
        throw ConfigError("trainer: dataset classes/side do not match the model config");
    }
    if (train_config_.batch_size == 0) throw ConfigError("trainer: batch size must be positive");
    for (auto& p : model_.parameters()) optimizer_.add(p.name, p.tensor, p.decay);
    optimizer_.add("ratio_table", table_.tensor(), false);
}

double Trainer::lambda_at(std::uint64_t step) const {
    const double start = model_config_.ratio_loss_coeff;
    if (!train_config_.lambda_schedule || train_config_.steps == 0) return start;
    const double frac = std::min(1.0, static_cast<double>(step) / static_cast<double>(train_config_.steps));
    return start + (train_config_.lambda_end - start) * frac;
}

StepLosses Trainer::step() {
    const std::uint64_t index = optimizer_.steps();
    const TrainBatch batch = make_batch(data_, model_config_, train_config_.batch_size,
                                        train_config_.uncond_prob, seed_, index);
    return training_step(model_, table_, optimizer_, batch, schedule_, lambda_at(index),
                         model_config_.target_ratio);
}

std::vector<std::size_t> sampling_timesteps(std::size_t train_timesteps, std::size_t steps) {
    if (steps == 0 || steps > train_timesteps) {
        throw ArgumentError("sampling_timesteps: steps " + std::to_string(steps) + " outside [1, " +
                            std::to_string(train_timesteps) + "]");
    }
    if (steps == 1) return {train_timesteps - 1};
    std::vector<std::size_t> out(steps);
    const double stride = static_cast<double>(train_timesteps - 1) / static_cast<double>(steps - 1);
    for (std::size_t i = 0; i < steps; ++i) {
        out[i] = static_cast<std::size_t>(std::floor(static_cast<double>(i) * stride + 0.5));
    }
    return out;
}

Tensor cfg_combine(const Tensor& uncond, const Tensor& cond, double scale_factor) {
    if (uncond.shape() != cond.shape()) {
        throw DimensionError("cfg_combine: " + shape_str(uncond.shape()) + " vs " + shape_str(cond.shape()));
    }
    std::vector<double> out(cond.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = uncond.data()[i] + scale_factor * (cond.data()[i] - uncond.data()[i]);
    }
    return Tensor(cond.shape(), std::move(out));
}

Tensor sample(const DiT& model, const RatioTable* snapped, std::size_t cls,
              const NoiseSchedule& schedule, const SampleOptions& options) {
    const ModelConfig& config = model.config();
    if (snapped != nullptr && !snapped->is_snapped()) {
        throw PreconditionError("sample: ratio table must be snapped to bins before sampling");
    }
    if (cls >= config.classes) {
        throw ArgumentError("sample: class " + std::to_string(cls) + " outside [0, " +
                            std::to_string(config.classes) + ")");
    }
    const auto steps = sampling_timesteps(schedule.size(), options.steps);
    const std::size_t side = config.image_side;
    Rng rng = Rng(options.seed).split(kSampleStream);
    std::vector<double> x(side * side);
    for (double& v : x) v = rng.normal();

    ForwardOptions infer;
    infer.rescale = options.rescale;
    for (std::size_t i = steps.size(); i-- > 0;) {
        const std::size_t t = steps[i];
        const Tensor x_t({side, side}, x);
        // Conditional and unconditional predictions as one stacked batch.
        const Tensor pair[] = {x_t, x_t};
        const std::size_t ts[] = {t, t};
        const std::size_t cs[] = {cls, model.null_class()};
        const Tensor tokens = model.forward_tokens(pair, ts, cs, snapped, infer);
        const std::size_t half = tokens.numel() / 2;
        const Shape token_shape{config.tokens(), config.patch_dim()};
        const Tensor eps_cond(token_shape, {tokens.data().begin(), tokens.data().begin() + half});
        const Tensor eps_uncond(token_shape, {tokens.data().begin() + half, tokens.data().end()});
        const Tensor eps = unpatchify(cfg_combine(eps_uncond, eps_cond, options.cfg_scale), config);

        const double abar = schedule.alpha_bars[t];
        const double abar_prev = i > 0 ? schedule.alpha_bars[steps[i - 1]] : 1.0;
        const double beta = 1.0 - abar / abar_prev;
        const double coef_x0 = std::sqrt(abar_prev) * beta / (1.0 - abar);
        const double coef_xt = std::sqrt(1.0 - beta) * (1.0 - abar_prev) / (1.0 - abar);
        const double sigma = std::sqrt(beta * (1.0 - abar_prev) / (1.0 - abar));
        for (std::size_t p = 0; p < x.size(); ++p) {
            const double x0 = std::clamp(
                (x[p] - std::sqrt(1.0 - abar) * eps.data()[p]) / std::sqrt(abar), -1.0, 1.0);
            x[p] = coef_x0 * x0 + coef_xt * x[p];
        }
        if (i > 0) {
            for (double& v : x) v += sigma * rng.normal();
        }
    }
    for (double& v : x) v = std::clamp(v, -1.0, 1.0);
    return Tensor({side, side}, std::move(x));
}

} // namespace dcr
