#pragma once

// Shared helpers for the test suites: random tensors, a central-difference
// gradient oracle and a scratch directory.

#include "dcr/block.hpp"
#include "dcr/rng.hpp"
#include "dcr/tensor.hpp"

#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <tuple>
#include <vector>

#include <unistd.h>

namespace dcr::test {

inline Tensor random_tensor(Shape shape, Rng& rng, double stddev = 1.0, bool requires_grad = false) {
    std::vector<double> v(shape_numel(shape));
    for (double& x : v) x = stddev * rng.normal();
    return Tensor(std::move(shape), std::move(v), requires_grad);
}

inline Tensor uniform_tensor(Shape shape, Rng& rng, double lo, double hi, bool requires_grad = false) {
    std::vector<double> v(shape_numel(shape));
    for (double& x : v) x = lo + (hi - lo) * rng.uniform();
    return Tensor(std::move(shape), std::move(v), requires_grad);
}

/// Random linear functional of `y`, so every output element reaches the loss
/// with a distinct weight.
inline Tensor project(const Tensor& y, const Tensor& weights) {
    return sum(mul(y, weights));
}

/// Block with every parameter random, including the zero-initialized output
/// and modulation projections.
inline BlockParams random_block(const ModelConfig& config, Rng& rng, double stddev = 0.3) {
    BlockParams p = BlockParams::init(config, rng);
    for (auto& entry : p.named()) {
        for (double& x : std::get<1>(entry).mutable_data()) x = stddev * rng.normal();
    }
    return p;
}

struct GradCheck {
    double max_relative_error = 0.0; // worst input, norm-wise
    double analytic_norm = 0.0;
};

/// Compares tape gradients of `loss()` with respect to each input against
/// central differences. Relative error per input is
/// |analytic - numeric| / max(|analytic|, |numeric|) in the 2-norm.
inline GradCheck check_gradients(const std::function<Tensor()>& loss, std::vector<Tensor> inputs,
                                 double step = 1e-5) {
    for (Tensor& x : inputs) {
        x.set_requires_grad(true);
        x.zero_grad();
    }
    {
        Tape tape;
        Tape::Scope scope(tape);
        tape.backward(loss());
    }
    GradCheck report;
    for (Tensor& x : inputs) {
        std::vector<double> analytic(x.numel(), 0.0);
        if (x.has_grad()) analytic.assign(x.grad().begin(), x.grad().end());
        x.zero_grad();
        double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
        auto values = x.mutable_data();
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double saved = values[i];
            values[i] = saved + step;
            const double up = loss().item();
            values[i] = saved - step;
            const double down = loss().item();
            values[i] = saved;
            const double numeric = (up - down) / (2.0 * step);
            diff2 += (analytic[i] - numeric) * (analytic[i] - numeric);
            a2 += analytic[i] * analytic[i];
            n2 += numeric * numeric;
        }
        const double scale = std::sqrt(std::max(a2, n2));
        const double rel = scale > 0.0 ? std::sqrt(diff2) / scale : 0.0;
        report.max_relative_error = std::max(report.max_relative_error, rel);
        report.analytic_norm += std::sqrt(a2);
    }
    return report;
}

/// Fresh directory under the system temp dir, removed on destruction.
class ScratchDir {
public:
    explicit ScratchDir(const std::string& tag) {
        static int counter = 0;
        path_ = std::filesystem::temp_directory_path() /
                ("dcr_test_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~ScratchDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    ScratchDir(const ScratchDir&) = delete;
    ScratchDir& operator=(const ScratchDir&) = delete;

    const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
};

} // namespace dcr::test
