#include "dcr/config.hpp"

#include "dcr/error.hpp"
#include "dcr/io.hpp"

#include <CLI11.hpp>

#include <sstream>

namespace dcr {

namespace {

std::size_t to_size(const std::string& key, const std::string& value) {
    try {
        return static_cast<std::size_t>(parse_u64(value, key));
    } catch (const FormatError& e) {
        throw ConfigError(e.what());
    }
}

double to_double(const std::string& key, const std::string& value) {
    try {
        return parse_double(value, key);
    } catch (const FormatError& e) {
        throw ConfigError(e.what());
    }
}

bool to_bool(const std::string& key, const std::string& value) {
    if (value == "true") return true;
    if (value == "false") return false;
    throw ConfigError(key + ": expected true or false, got '" + value + "'");
}

} // namespace

ToyDataset RunConfig::dataset_spec() const {
    ToyDataset data;
    data.kind = dataset;
    data.classes = model.classes;
    data.image_side = model.image_side;
    data.noise_sigma = noise_sigma;
    data.intensity = intensity;
    return data;
}

void RunConfig::validate() const {
    model.validate();
    dataset_spec().validate();
    if (train.batch_size == 0) throw ConfigError("train.batch_size must be positive");
    if (checkpoint_every == 0 || log_every == 0) {
        throw ConfigError("train.checkpoint_every and train.log_every must be positive");
    }
    if (!(train.uncond_prob >= 0.0 && train.uncond_prob <= 1.0)) {
        throw ConfigError("train.uncond_prob must lie in [0, 1]");
    }
    if (!(train.optimizer.lr > 0.0)) throw ConfigError("train.lr must be positive");
}

std::string RunConfig::to_text() const {
    std::ostringstream out;
    const auto& m = model;
    out << "[model]\n"
        << "image_side = " << m.image_side << "\n"
        << "patch_side = " << m.patch_side << "\n"
        << "hidden_dim = " << m.hidden_dim << "\n"
        << "heads = " << m.heads << "\n"
        << "layers = " << m.layers << "\n"
        << "mlp_ratio = " << m.mlp_ratio << "\n"
        << "classes = " << m.classes << "\n"
        << "train_timesteps = " << m.train_timesteps << "\n"
        << "sample_steps = " << m.sample_steps << "\n"
        << "regions = " << m.regions << "\n"
        << "target_ratio = " << format_double(m.target_ratio) << "\n"
        << "ratio_loss_coeff = " << format_double(m.ratio_loss_coeff) << "\n"
        << "cfg_scale = " << format_double(m.cfg_scale) << "\n";
    const auto& t = train;
    out << "\n[train]\n"
        << "seed = " << seed << "\n"
        << "steps = " << t.steps << "\n"
        << "batch_size = " << t.batch_size << "\n"
        << "lr = " << format_double(t.optimizer.lr) << "\n"
        << "beta1 = " << format_double(t.optimizer.beta1) << "\n"
        << "beta2 = " << format_double(t.optimizer.beta2) << "\n"
        << "eps = " << format_double(t.optimizer.eps) << "\n"
        << "weight_decay = " << format_double(t.optimizer.weight_decay) << "\n"
        << "uncond_prob = " << format_double(t.uncond_prob) << "\n"
        << "lambda_schedule = " << (t.lambda_schedule ? "true" : "false") << "\n"
        << "lambda_end = " << format_double(t.lambda_end) << "\n"
        << "checkpoint_every = " << checkpoint_every << "\n"
        << "log_every = " << log_every << "\n";
    out << "\n[data]\n"
        << "kind = " << to_string(dataset) << "\n"
        << "noise_sigma = " << format_double(noise_sigma) << "\n"
        << "intensity = " << format_double(intensity) << "\n";
    return out.str();
}

std::string RunConfig::hash() const {
    return fnv1a_hex(to_text());
}

void RunConfig::set(const std::string& section, const std::string& key, const std::string& value) {
    const std::string name = section + "." + key;
    auto& m = model;
    auto& t = train;
    if (section == "model") {
        if (key == "image_side") m.image_side = to_size(name, value);
        else if (key == "patch_side") m.patch_side = to_size(name, value);
        else if (key == "hidden_dim") m.hidden_dim = to_size(name, value);
        else if (key == "heads") m.heads = to_size(name, value);
        else if (key == "layers") m.layers = to_size(name, value);
        else if (key == "mlp_ratio") m.mlp_ratio = to_size(name, value);
        else if (key == "classes") m.classes = to_size(name, value);
        else if (key == "train_timesteps") m.train_timesteps = to_size(name, value);
        else if (key == "sample_steps") m.sample_steps = to_size(name, value);
        else if (key == "regions") m.regions = to_size(name, value);
        else if (key == "target_ratio") m.target_ratio = to_double(name, value);
        else if (key == "ratio_loss_coeff") m.ratio_loss_coeff = to_double(name, value);
        else if (key == "cfg_scale") m.cfg_scale = to_double(name, value);
        else throw ConfigError("unknown config key " + name);
    } else if (section == "train") {
        if (key == "seed") seed = to_size(name, value);
        else if (key == "steps") t.steps = to_size(name, value);
        else if (key == "batch_size") t.batch_size = to_size(name, value);
        else if (key == "lr") t.optimizer.lr = to_double(name, value);
        else if (key == "beta1") t.optimizer.beta1 = to_double(name, value);
        else if (key == "beta2") t.optimizer.beta2 = to_double(name, value);
        else if (key == "eps") t.optimizer.eps = to_double(name, value);
        else if (key == "weight_decay") t.optimizer.weight_decay = to_double(name, value);
        else if (key == "uncond_prob") t.uncond_prob = to_double(name, value);
        else if (key == "lambda_schedule") t.lambda_schedule = to_bool(name, value);
        else if (key == "lambda_end") t.lambda_end = to_double(name, value);
        else if (key == "checkpoint_every") checkpoint_every = to_size(name, value);
        else if (key == "log_every") log_every = to_size(name, value);
        else throw ConfigError("unknown config key " + name);
    } else if (section == "data") {
        if (key == "kind") dataset = dataset_kind_from_string(value);
        else if (key == "noise_sigma") noise_sigma = to_double(name, value);
        else if (key == "intensity") intensity = to_double(name, value);
        else throw ConfigError("unknown config key " + name);
    } else {
        throw ConfigError("unknown config section [" + section + "]");
    }
}

RunConfig RunConfig::from_text(const std::string& text) {
    std::istringstream in(text);
    std::vector<CLI::ConfigItem> items;
    try {
        items = CLI::ConfigTOML().from_config(in);
    } catch (const CLI::Error& e) {
        throw ConfigError(std::string("config parse error: ") + e.what());
    }
    RunConfig config;
    for (const auto& item : items) {
        if (item.name == "++" || item.name == "--") continue; // section markers
        if (item.parents.size() != 1) {
            throw ConfigError("config key '" + item.fullname() + "' must sit inside a section");
        }
        if (item.inputs.size() != 1) {
            throw ConfigError("config key '" + item.fullname() + "' needs exactly one value");
        }
        config.set(item.parents[0], item.name, item.inputs[0]);
    }
    config.validate();
    return config;
}

} // namespace dcr
