#include "dcr/optim.hpp"

#include "dcr/error.hpp"

#include <cmath>

namespace dcr {

void adamw_step(std::span<double> params, std::span<const double> grads, MomentState& state,
                std::uint64_t step, const AdamWHyper& hyper) {
    if (params.size() != grads.size()) {
        throw DimensionError("adamw: " + std::to_string(params.size()) + " params vs " +
                             std::to_string(grads.size()) + " grads");
    }
    if (state.m.empty() && state.v.empty()) {
        state.m.assign(params.size(), 0.0);
        state.v.assign(params.size(), 0.0);
    }
    if (state.m.size() != params.size() || state.v.size() != params.size()) {
        throw DimensionError("adamw: moment state size " + std::to_string(state.m.size()) +
                             " does not match " + std::to_string(params.size()) + " params");
    }
    if (step == 0) throw ArgumentError("adamw: step count is 1-based");
    const double t = static_cast<double>(step);
    const double correction1 = 1.0 - std::pow(hyper.beta1, t);
    const double correction2 = 1.0 - std::pow(hyper.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double g = grads[i];
        state.m[i] = hyper.beta1 * state.m[i] + (1.0 - hyper.beta1) * g;
        state.v[i] = hyper.beta2 * state.v[i] + (1.0 - hyper.beta2) * g * g;
        const double m_hat = state.m[i] / correction1;
        const double v_hat = state.v[i] / correction2;
        params[i] -= hyper.lr * hyper.weight_decay * params[i];
        params[i] -= hyper.lr * m_hat / (std::sqrt(v_hat) + hyper.eps);
    }
}

void AdamW::add(std::string name, Tensor tensor, bool decay) {
    slots_.push_back(ParamSlot{std::move(name), std::move(tensor), decay, {}});
}

void AdamW::step() {
    ++steps_;
    std::vector<double> zeros;
    for (auto& slot : slots_) {
        AdamWHyper hyper = hyper_;
        if (!slot.decay) hyper.weight_decay = 0.0;
        std::span<const double> grads = slot.tensor.grad();
        if (!slot.tensor.has_grad()) {
            zeros.assign(slot.tensor.numel(), 0.0);
            grads = zeros;
        }
        adamw_step(slot.tensor.mutable_data(), grads, slot.state, steps_, hyper);
    }
}

void AdamW::zero_grad() {
    for (auto& slot : slots_) slot.tensor.zero_grad();
}

} // namespace dcr
