#include "dcr/model.hpp"

#include "dcr/error.hpp"

#include <cmath>

namespace dcr {

namespace {

Tensor normal(Shape shape, double stddev, Rng& rng) {
    std::vector<double> values(shape_numel(shape));
    for (double& v : values) v = stddev * rng.normal();
    return Tensor(std::move(shape), std::move(values), true);
}

Tensor xavier(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::vector<double> values(fan_in * fan_out);
    for (double& v : values) v = (2.0 * rng.uniform() - 1.0) * bound;
    return Tensor({fan_in, fan_out}, std::move(values), true);
}

enum Stream : std::uint64_t { kEmbedStream = 1, kBlockStream = 2 };

} // namespace

DiT::DiT(const ModelConfig& config, std::uint64_t seed) : config_(config) {
    config_.validate();
    const std::size_t d = config_.hidden_dim;
    Rng root(seed);
    Rng embed = root.split(kEmbedStream);
    patch_w_ = xavier(config_.patch_dim(), d, embed);
    patch_b_ = Tensor::zeros({d}, true);
    pos_emb_ = normal({config_.tokens(), d}, 0.02, embed);
    time_w_ = xavier(d, d, embed);
    time_b_ = Tensor::zeros({d}, true);
    class_emb_ = normal({config_.classes + 1, d}, 0.02, embed);
    final_w_ = Tensor::zeros({d, config_.patch_dim()}, true);
    final_b_ = Tensor::zeros({config_.patch_dim()}, true);
    for (std::size_t l = 0; l < config_.layers; ++l) {
        Rng block_rng = root.split(kBlockStream).split(l);
        blocks_.push_back(BlockParams::init(config_, block_rng));
        routers_.push_back(RouterParams::zeros(d));
    }
}

Tensor DiT::condition(std::size_t t, std::size_t cls) const {
    const std::size_t ts[] = {t};
    const std::size_t cs[] = {cls};
    return condition(ts, cs);
}

Tensor DiT::condition(std::span<const std::size_t> timesteps,
                      std::span<const std::size_t> classes) const {
    if (timesteps.size() != classes.size() || timesteps.empty()) {
        throw DimensionError("condition: " + std::to_string(timesteps.size()) + " timesteps vs " +
                             std::to_string(classes.size()) + " classes");
    }
    const std::size_t d = config_.hidden_dim;
    std::vector<double> embed;
    embed.reserve(timesteps.size() * d);
    for (std::size_t b = 0; b < classes.size(); ++b) {
        if (classes[b] > config_.classes) {
            throw ArgumentError("class " + std::to_string(classes[b]) + " outside [0, " +
                                std::to_string(config_.classes) + "]");
        }
        const Tensor temb = timestep_embedding(timesteps[b], d, config_.train_timesteps);
        embed.insert(embed.end(), temb.data().begin(), temb.data().end());
    }
    const Tensor temb({timesteps.size(), d}, std::move(embed));
    return add(linear(temb, time_w_, time_b_), gather_rows(class_emb_, classes));
}

Tensor DiT::forward(const Tensor& x_t, std::size_t t, std::size_t cls, const RatioTable* ratios,
                    const ForwardOptions& options) const {
    const std::size_t ts[] = {t};
    const std::size_t cs[] = {cls};
    return unpatchify(forward_tokens(std::span<const Tensor>(&x_t, 1), ts, cs, ratios, options), config_);
}

Tensor DiT::forward_tokens(std::span<const Tensor> x_t, std::span<const std::size_t> timesteps,
                           std::span<const std::size_t> classes, const RatioTable* ratios,
                           const ForwardOptions& options) const {
    if (ratios != nullptr &&
        (ratios->layers() != config_.layers || ratios->regions() != config_.regions)) {
        throw DimensionError("forward: ratio table " + shape_str(ratios->tensor().shape()) +
                             " does not match " + std::to_string(config_.layers) + " layers x " +
                             std::to_string(config_.regions) + " regions");
    }
    if (ratios != nullptr && options.mode == Mode::infer && !ratios->is_snapped()) {
        throw PreconditionError("forward: inference needs a snapped ratio table");
    }
    const std::size_t images = x_t.size();
    if (images == 0 || timesteps.size() != images || classes.size() != images) {
        throw DimensionError("forward: " + std::to_string(images) + " images, " +
                             std::to_string(timesteps.size()) + " timesteps, " +
                             std::to_string(classes.size()) + " classes");
    }
    const std::size_t n = config_.tokens();
    const std::size_t side = config_.image_side;
    const auto perm = patch_permutation(config_);
    std::vector<double> tokens;
    tokens.reserve(images * perm.size());
    for (const Tensor& image : x_t) {
        if (image.shape() != Shape{side, side}) {
            throw ConfigError("forward: image " + shape_str(image.shape()) + " does not match " +
                              std::to_string(side) + "x" + std::to_string(side));
        }
        for (std::size_t m : perm) tokens.push_back(image.data()[m]);
    }
    const Tensor patches({images * n, config_.patch_dim()}, std::move(tokens));

    const Tensor cond = condition(timesteps, classes);
    Tensor position = pos_emb_;
    if (images > 1) {
        std::vector<std::size_t> tile(images * n);
        for (std::size_t i = 0; i < tile.size(); ++i) tile[i] = i % n;
        position = gather_rows(pos_emb_, tile);
    }
    Tensor hidden = add(linear(patches, patch_w_, patch_b_), position);
    const std::vector<std::size_t> groups(images, n);
    const RowGroups block_groups = images > 1 ? RowGroups(groups) : RowGroups();
    const RoutingOptions routing{config_.heads, options.rescale};

    std::vector<std::size_t> regions(images, 0);
    if (ratios) {
        for (std::size_t b = 0; b < images; ++b)
            regions[b] = region_of_timestep(timesteps[b], config_.train_timesteps, config_.regions);
    }
    auto record = [&](std::vector<SelectionRecord>& selections) {
        if (!options.selections) return;
        for (auto& sel : selections) options.selections->push_back(std::move(sel));
    };
    const Tensor table_column =
        ratios ? reshape(ratios->tensor(), {ratios->tensor().numel(), 1}) : Tensor();

    for (std::size_t l = 0; l < config_.layers; ++l) {
        if (ratios == nullptr) {
            hidden = add(hidden, block_forward(hidden, cond, blocks_[l], config_.heads, block_groups));
            continue;
        }
        const Tensor scores = router_scores(hidden, routers_[l]);
        if (options.mode == Mode::train) {
            std::vector<std::size_t> flat(images);
            for (std::size_t b = 0; b < images; ++b) flat[b] = ratios->flat_index(l, regions[b]);
            const Tensor layer_ratios = gather_rows(table_column, flat);
            DiffcrLayerOutput layer =
                diffcr_block_forward(hidden, cond, blocks_[l], scores, layer_ratios, routing);
            record(layer.lower.selections);
            hidden = layer.output;
        } else {
            std::vector<double> bins(images);
            for (std::size_t b = 0; b < images; ++b) bins[b] = ratios->value(l, regions[b]);
            RoutedLayerOutput layer = routed_block_forward(hidden, cond, blocks_[l], scores, bins, routing);
            record(layer.selections);
            hidden = layer.output;
        }
    }
    return linear(layernorm_lastdim(hidden), final_w_, final_b_);
}

std::vector<NamedParam> DiT::parameters() const {
    std::vector<NamedParam> out{
        {"patch_w", patch_w_, true},  {"patch_b", patch_b_, false},
        {"pos_emb", pos_emb_, false}, {"time_w", time_w_, true},
        {"time_b", time_b_, false},   {"class_emb", class_emb_, false},
        {"final_w", final_w_, true},  {"final_b", final_b_, false},
    };
    for (std::size_t l = 0; l < blocks_.size(); ++l) {
        const std::string prefix = "block" + std::to_string(l) + ".";
        for (auto& [name, tensor, decay] : blocks_[l].named()) out.push_back({prefix + name, tensor, decay});
        out.push_back({"router" + std::to_string(l) + ".weight", routers_[l].weight, false});
        out.push_back({"router" + std::to_string(l) + ".bias", routers_[l].bias, false});
    }
    return out;
}

} // namespace dcr
