#pragma once

#include "dcr/tensor.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace dcr {

struct AdamWHyper {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 3e-2;

    bool operator==(const AdamWHyper&) const = default;
};

struct MomentState {
    std::vector<double> m;
    std::vector<double> v;
};

/// One decoupled-weight-decay Adam update. `step` is the 1-based update count
/// used for bias correction; empty moments are zero-initialized.
void adamw_step(std::span<double> params, std::span<const double> grads, MomentState& state,
                std::uint64_t step, const AdamWHyper& hyper);

/// Named parameter with per-parameter decay switch.
struct ParamSlot {
    std::string name;
    Tensor tensor;
    bool decay = true;
    MomentState state;
};

class AdamW {
public:
    explicit AdamW(AdamWHyper hyper = {}) : hyper_(hyper) {}

    void add(std::string name, Tensor tensor, bool decay);
    /// Applies one update from each parameter's accumulated grad (missing grad
    /// counts as zero).
    void step();
    void zero_grad();

    AdamWHyper& hyper() { return hyper_; }
    std::uint64_t steps() const { return steps_; }
    void set_steps(std::uint64_t steps) { steps_ = steps; }
    std::vector<ParamSlot>& slots() { return slots_; }
    const std::vector<ParamSlot>& slots() const { return slots_; }

private:
    AdamWHyper hyper_;
    std::vector<ParamSlot> slots_;
    std::uint64_t steps_ = 0;
};

} // namespace dcr
