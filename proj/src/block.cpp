#include "dcr/block.hpp"

#include "dcr/error.hpp"

#include <cmath>
#include <string>
#include <tuple>

namespace dcr {

namespace {

Tensor xavier(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::vector<double> values(fan_in * fan_out);
    for (double& v : values) v = (2.0 * rng.uniform() - 1.0) * bound;
    return Tensor({fan_in, fan_out}, std::move(values), true);
}

Tensor zeros(Shape shape) {
    return Tensor::zeros(std::move(shape), true);
}

Tensor ones(Shape shape) {
    return Tensor::full(std::move(shape), 1.0, true);
}

} // namespace

void ModelConfig::validate() const {
    auto fail = [](const std::string& what) { throw ConfigError("model config: " + what); };
    if (image_side == 0 || patch_side == 0) fail("image_side and patch_side must be positive");
    if (image_side % patch_side != 0) {
        fail("image_side " + std::to_string(image_side) + " not divisible by patch_side " +
             std::to_string(patch_side));
    }
    if (hidden_dim < 2 || heads == 0 || hidden_dim % heads != 0) {
        fail("hidden_dim " + std::to_string(hidden_dim) + " not divisible by heads " +
             std::to_string(heads));
    }
    if (hidden_dim % 2 != 0) fail("hidden_dim must be even for the sinusoidal embedding");
    if (layers == 0 || mlp_ratio == 0 || classes == 0) fail("layers, mlp_ratio, classes must be positive");
    if (train_timesteps == 0) fail("train_timesteps must be positive");
    if (regions == 0 || regions > train_timesteps) fail("regions must lie in [1, train_timesteps]");
    if (sample_steps == 0 || sample_steps > train_timesteps) fail("sample_steps must lie in [1, train_timesteps]");
    if (!(target_ratio >= 0.0 && target_ratio <= 1.0)) fail("target_ratio must lie in [0, 1]");
    if (!(ratio_loss_coeff >= 0.0)) fail("ratio_loss_coeff must be non-negative");
    if (!std::isfinite(cfg_scale)) fail("cfg_scale must be finite");
}

BlockParams BlockParams::init(const ModelConfig& config, Rng& rng) {
    const std::size_t d = config.hidden_dim;
    const std::size_t hidden = config.mlp_ratio * d;
    BlockParams p;
    p.ln1_gain = ones({d});
    p.ln1_bias = zeros({d});
    p.wq = xavier(d, d, rng);
    p.wk = xavier(d, d, rng);
    p.wv = xavier(d, d, rng);
    p.wo = zeros({d, d});
    p.ln2_gain = ones({d});
    p.ln2_bias = zeros({d});
    p.w1 = xavier(d, hidden, rng);
    p.b1 = zeros({hidden});
    p.w2 = zeros({hidden, d});
    p.b2 = zeros({d});
    p.ada_w = zeros({d, 2 * d});
    p.ada_b = zeros({2 * d});
    return p;
}

std::vector<std::tuple<const char*, Tensor, bool>> BlockParams::named() const {
    return {
        {"ln1_gain", ln1_gain, false}, {"ln1_bias", ln1_bias, false}, {"wq", wq, true},
        {"wk", wk, true},              {"wv", wv, true},              {"wo", wo, true},
        {"ln2_gain", ln2_gain, false}, {"ln2_bias", ln2_bias, false}, {"w1", w1, true},
        {"b1", b1, false},             {"w2", w2, true},              {"b2", b2, false},
        {"ada_w", ada_w, true},        {"ada_b", ada_b, false},
    };
}

Tensor block_forward(const Tensor& hidden, const Tensor& cond, const BlockParams& p,
                     std::size_t heads, RowGroups groups) {
    const std::size_t d = hidden.cols();
    const std::size_t count = groups.empty() ? 1 : groups.size();
    if (p.wq.rows() != d || cond.numel() != count * d) {
        throw DimensionError("block_forward: hidden " + shape_str(hidden.shape()) + " / cond " +
                             shape_str(cond.shape()) + " do not match block width " +
                             std::to_string(p.wq.rows()) + " with " + std::to_string(count) +
                             " group(s)");
    }
    const Tensor modulation = linear(silu(reshape(cond, {count, d})), p.ada_w, p.ada_b);
    const Tensor shift = columns(modulation, 0, d);
    const Tensor scale_ = columns(modulation, d, d);

    const Tensor a = affine_rows(affine_rows(layernorm_lastdim(hidden), p.ln1_gain, p.ln1_bias),
                                 scale_, shift, 1.0, groups);
    const Tensor mixed =
        attention(matmul(a, p.wq), matmul(a, p.wk), matmul(a, p.wv), heads, groups);
    const Tensor attn_out = matmul(mixed, p.wo);
    const Tensor h1 = add(hidden, attn_out);

    const Tensor m = affine_rows(affine_rows(layernorm_lastdim(h1), p.ln2_gain, p.ln2_bias),
                                 scale_, shift, 1.0, groups);
    const Tensor mlp = linear(gelu(linear(m, p.w1, p.b1)), p.w2, p.b2);
    return add(attn_out, mlp);
}

Tensor timestep_embedding(std::size_t t, std::size_t dim, std::size_t train_timesteps) {
    if (t >= train_timesteps) {
        throw ArgumentError("timestep " + std::to_string(t) + " outside [0, " +
                            std::to_string(train_timesteps) + ")");
    }
    if (dim == 0 || dim % 2 != 0) throw ArgumentError("timestep embedding width must be even");
    const std::size_t half = dim / 2;
    std::vector<double> values(dim);
    for (std::size_t i = 0; i < half; ++i) {
        const double freq =
            std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
        const double angle = static_cast<double>(t) * freq;
        values[i] = std::sin(angle);
        values[half + i] = std::cos(angle);
    }
    return Tensor({1, dim}, std::move(values));
}

std::vector<std::size_t> patch_permutation(const ModelConfig& config) {
    const std::size_t p = config.patch_side, g = config.grid(), side = config.image_side;
    std::vector<std::size_t> perm(config.tokens() * config.patch_dim());
    for (std::size_t i = 0; i < config.tokens(); ++i) {
        const std::size_t gi = i / g, gj = i % g;
        for (std::size_t pi = 0; pi < p; ++pi)
            for (std::size_t pj = 0; pj < p; ++pj)
                perm[i * p * p + pi * p + pj] = (gi * p + pi) * side + gj * p + pj;
    }
    return perm;
}

Tensor patchify(const Tensor& image, const ModelConfig& config) {
    const std::size_t side = config.image_side;
    if (image.shape() != Shape{side, side}) {
        throw ConfigError("patchify: image " + shape_str(image.shape()) + " does not match " +
                          std::to_string(side) + "x" + std::to_string(side));
    }
    const auto perm = patch_permutation(config);
    return reshape(gather_rows(reshape(image, {side * side, 1}), perm),
                   {config.tokens(), config.patch_dim()});
}

Tensor unpatchify(const Tensor& tokens, const ModelConfig& config) {
    if (tokens.shape() != Shape{config.tokens(), config.patch_dim()}) {
        throw ConfigError("unpatchify: tokens " + shape_str(tokens.shape()) + " do not match " +
                          std::to_string(config.tokens()) + "x" + std::to_string(config.patch_dim()));
    }
    const auto perm = patch_permutation(config);
    std::vector<std::size_t> inverse(perm.size());
    for (std::size_t m = 0; m < perm.size(); ++m) inverse[perm[m]] = m;
    const std::size_t side = config.image_side;
    return reshape(gather_rows(reshape(tokens, {perm.size(), 1}), inverse), {side, side});
}

} // namespace dcr
