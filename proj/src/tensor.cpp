#include "dcr/tensor.hpp"

#include "dcr/error.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include <malloc.h>

namespace dcr {

namespace {

// Activation buffers are a few hundred KB each and churn every step. Keeping
// them below glibc's mmap threshold lets freed blocks be reused instead of
// being unmapped and faulted back in.
[[maybe_unused]] const bool g_allocator_tuned = [] {
    mallopt(M_MMAP_THRESHOLD, 64 << 20);
    mallopt(M_TRIM_THRESHOLD, 256 << 20);
    return true;
}();

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;
using Strided = Eigen::OuterStride<>;
using StridedMap = Eigen::Map<RowMat, 0, Strided>;
using ConstStridedMap = Eigen::Map<const RowMat, 0, Strided>;

thread_local Tape* g_active_tape = nullptr;

ConstMatMap view(std::span<const double> data, std::size_t rows, std::size_t cols) {
    return ConstMatMap(data.data(), static_cast<Eigen::Index>(rows),
                       static_cast<Eigen::Index>(cols));
}

MatMap view(std::span<double> data, std::size_t rows, std::size_t cols) {
    return MatMap(data.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

void require_2d(const Tensor& x, std::string_view op) {
    if (x.dim() != 2) {
        throw DimensionError(std::string(op) + ": expected a 2-D tensor, got " +
                             shape_str(x.shape()));
    }
}

void require_same(const Tensor& a, const Tensor& b, std::string_view op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                             " vs " + shape_str(b.shape()));
    }
}

bool record(std::initializer_list<const Tensor*> inputs) {
    return Tape::should_record(inputs);
}

enum class Broadcast { none, left, right };

Broadcast elementwise_layout(const Tensor& a, const Tensor& b, std::string_view op) {
    if (a.shape() == b.shape()) return Broadcast::none;
    // Between two single-element operands the higher-rank shape wins, so a
    // 1x1 result stays 2-D.
    if (a.numel() == 1 && (b.numel() != 1 || a.dim() < b.dim())) return Broadcast::left;
    if (b.numel() == 1) return Broadcast::right;
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

// Shared driver for add/sub/mul: f(x, y) forward, dfdx/dfdy backward factors.
template <class Fwd, class GradA, class GradB>
Tensor binary(const Tensor& a, const Tensor& b, std::string_view op, Fwd fwd, GradA grad_a,
              GradB grad_b) {
    const Broadcast layout = elementwise_layout(a, b, op);
    const Tensor& big = layout == Broadcast::left ? b : a;
    const std::size_t n = big.numel();
    auto av = a.data();
    auto bv = b.data();
    auto ai = [&](std::size_t i) { return layout == Broadcast::left ? av[0] : av[i]; };
    auto bi = [&](std::size_t i) { return layout == Broadcast::right ? bv[0] : bv[i]; };

    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = fwd(ai(i), bi(i));
    const bool rec = record({&a, &b});
    Tensor result = make_result(big.shape(), std::move(out), rec, op);
    if (rec) {
        Tape::active()->record(op, {a, b}, result, [a, b, layout, n, grad_a, grad_b](auto g) mutable {
            auto av = a.data();
            auto bv = b.data();
            auto ai = [&](std::size_t i) { return layout == Broadcast::left ? av[0] : av[i]; };
            auto bi = [&](std::size_t i) { return layout == Broadcast::right ? bv[0] : bv[i]; };
            if (a.requires_grad()) {
                auto ga = a.grad_accumulator();
                for (std::size_t i = 0; i < n; ++i) {
                    ga[layout == Broadcast::left ? 0 : i] += g[i] * grad_a(ai(i), bi(i));
                }
            }
            if (b.requires_grad()) {
                auto gb = b.grad_accumulator();
                for (std::size_t i = 0; i < n; ++i) {
                    gb[layout == Broadcast::right ? 0 : i] += g[i] * grad_b(ai(i), bi(i));
                }
            }
        });
    }
    return result;
}

// Shared driver for pointwise unary ops whose derivative is a function of
// (input, output).
template <class Fwd, class Deriv>
Tensor unary(const Tensor& x, std::string_view op, Fwd fwd, Deriv deriv) {
    auto xv = x.data();
    std::vector<double> out(xv.size());
    for (std::size_t i = 0; i < xv.size(); ++i) out[i] = fwd(xv[i]);
    const bool rec = record({&x});
    Tensor result = make_result(x.shape(), std::move(out), rec, op);
    if (rec) {
        Tape::active()->record(op, {x}, result, [x, result, deriv](auto g) mutable {
            auto gx = x.grad_accumulator();
            auto xv = x.data();
            auto yv = result.data();
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * deriv(xv[i], yv[i]);
        });
    }
    return result;
}

void check_indices(std::span<const std::size_t> indices, std::size_t rows, std::string_view op) {
    for (std::size_t idx : indices) {
        if (idx >= rows) {
            throw IndexError(std::string(op) + ": row index " + std::to_string(idx) +
                             " out of range for " + std::to_string(rows) + " rows");
        }
    }
}

} // namespace

std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad)
    : impl_(std::make_shared<detail::TensorData>()) {
    if (shape_numel(shape) != values.size()) {
        throw DimensionError("tensor: shape " + shape_str(shape) + " holds " +
                             std::to_string(shape_numel(shape)) + " elements, got " +
                             std::to_string(values.size()));
    }
    impl_->shape = std::move(shape);
    impl_->value = std::move(values);
    impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    const std::size_t n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return Tensor({1}, {value}, requires_grad);
}

std::size_t Tensor::rows() const {
    return dim() >= 2 ? impl_->shape.front() : 1;
}

std::size_t Tensor::cols() const {
    return dim() == 0 ? 1 : impl_->shape.back();
}

double Tensor::item() const {
    if (numel() != 1) {
        throw DimensionError("item: tensor of shape " + shape_str(shape()) + " is not a scalar");
    }
    return impl_->value[0];
}

double Tensor::at(std::size_t row, std::size_t col) const {
    return impl_->value[row * cols() + col];
}

std::span<double> Tensor::grad_accumulator() const {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->value.size(), 0.0);
    return impl_->grad;
}

Tensor Tensor::clone() const {
    return Tensor(impl_->shape, impl_->value, false);
}

// ---------------------------------------------------------------------------
// Tape

Tape::Scope::Scope(Tape& tape) : previous_(g_active_tape) {
    g_active_tape = &tape;
}

Tape::Scope::~Scope() {
    g_active_tape = previous_;
}

Tape* Tape::active() {
    return g_active_tape;
}

bool Tape::should_record(std::initializer_list<const Tensor*> inputs) {
    if (g_active_tape == nullptr) return false;
    return std::any_of(inputs.begin(), inputs.end(),
                       [](const Tensor* t) { return t->requires_grad(); });
}

void Tape::record(std::string_view op, std::vector<Tensor> inputs, const Tensor& output,
                  BackwardFn backward) {
    if (consumed_) throw PreconditionError("tape: record after backward without reset");
    nodes_.push_back(Node{op, std::move(inputs), output, std::move(backward)});
}

void Tape::backward(const Tensor& loss) {
    if (loss.numel() != 1) {
        throw ArgumentError("backward: loss must be a scalar, got shape " +
                            shape_str(loss.shape()));
    }
    if (consumed_) throw PreconditionError("backward: tape already swept; call reset() first");
    if (loss.producer() != this && !(loss.is_leaf() && loss.requires_grad())) {
        throw PreconditionError("backward: loss was not produced on this tape");
    }
    consumed_ = true;
    Tensor seed = loss;
    seed.grad_accumulator()[0] += 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        if (!it->output.has_grad()) continue; // nothing downstream depends on it
        it->backward(it->output.grad());
    }
    for (auto& node : nodes_) {
        for (auto& input : node.inputs) {
            if (input.is_leaf() && input.requires_grad()) input.grad_accumulator();
        }
    }
    nodes_.clear();
}

void Tape::reset() {
    nodes_.clear();
    consumed_ = false;
}

std::optional<std::string> Tape::first_nonfinite() const {
    for (const auto& node : nodes_) {
        for (double v : node.output.data()) {
            if (!std::isfinite(v)) return std::string(node.op);
        }
    }
    return std::nullopt;
}

Tensor make_result(Shape shape, std::vector<double> values, bool rec, std::string_view op) {
    Tensor t(std::move(shape), std::move(values), rec);
    if (rec) {
        t.raw().producer = Tape::active();
        t.raw().op = op;
    }
    return t;
}

// ---------------------------------------------------------------------------
// Linear operations

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_2d(a, "matmul");
    require_2d(b, "matmul");
    const std::size_t m = a.rows(), kk = a.cols(), n = b.cols();
    if (b.rows() != kk) {
        throw DimensionError("matmul: inner dimensions differ " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    }
    std::vector<double> out(m * n);
    view(std::span<double>(out), m, n).noalias() = view(a.data(), m, kk) * view(b.data(), kk, n);
    const bool rec = record({&a, &b});
    Tensor result = make_result({m, n}, std::move(out), rec, "matmul");
    if (rec) {
        Tape::active()->record("matmul", {a, b}, result, [a, b, m, kk, n](auto g) mutable {
            auto gm = view(g, m, n);
            if (a.requires_grad()) {
                view(a.grad_accumulator(), m, kk).noalias() += gm * view(b.data(), kk, n).transpose();
            }
            if (b.requires_grad()) {
                view(b.grad_accumulator(), kk, n).noalias() += view(a.data(), m, kk).transpose() * gm;
            }
        });
    }
    return result;
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    require_2d(x, "linear");
    require_2d(weight, "linear");
    const std::size_t m = x.rows(), kk = x.cols(), n = weight.cols();
    if (weight.rows() != kk || bias.numel() != n) {
        throw DimensionError("linear: " + shape_str(x.shape()) + " x " + shape_str(weight.shape()) +
                             " + " + shape_str(bias.shape()));
    }
    std::vector<double> out(m * n);
    auto om = view(std::span<double>(out), m, n);
    om.noalias() = view(x.data(), m, kk) * view(weight.data(), kk, n);
    om.rowwise() += view(bias.data(), 1, n).row(0);
    const bool rec = record({&x, &weight, &bias});
    Tensor result = make_result({m, n}, std::move(out), rec, "linear");
    if (rec) {
        Tape::active()->record("linear", {x, weight, bias}, result, [x, weight, bias, m, kk, n](auto g) mutable {
            auto gm = view(g, m, n);
            if (x.requires_grad()) {
                view(x.grad_accumulator(), m, kk).noalias() += gm * view(weight.data(), kk, n).transpose();
            }
            if (weight.requires_grad()) {
                view(weight.grad_accumulator(), kk, n).noalias() += view(x.data(), m, kk).transpose() * gm;
            }
            if (bias.requires_grad()) {
                // Rows in order: Eigen's partial reduction picks its summation
                // order from buffer alignment, which breaks run-to-run equality.
                Eigen::RowVectorXd total = Eigen::RowVectorXd::Zero(static_cast<Eigen::Index>(n));
                for (std::size_t i = 0; i < m; ++i) total += gm.row(static_cast<Eigen::Index>(i));
                view(bias.grad_accumulator(), 1, n).row(0) += total;
            }
        });
    }
    return result;
}

Tensor add(const Tensor& a, const Tensor& b) {
    return binary(
        a, b, "add", [](double x, double y) { return x + y; },
        [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary(
        a, b, "sub", [](double x, double y) { return x - y; },
        [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary(
        a, b, "mul", [](double x, double y) { return x * y; },
        [](double, double y) { return y; }, [](double x, double) { return x; });
}

Tensor scale(const Tensor& a, double factor) {
    return unary(
        a, "scale", [factor](double x) { return x * factor; },
        [factor](double, double) { return factor; });
}

Tensor add_rows(const Tensor& x, const Tensor& bias) {
    require_2d(x, "add_rows");
    const std::size_t n = x.rows(), d = x.cols();
    if (bias.numel() != d) {
        throw DimensionError("add_rows: bias " + shape_str(bias.shape()) + " does not match rows of " +
                             shape_str(x.shape()));
    }
    auto xv = x.data();
    auto bv = bias.data();
    std::vector<double> out(n * d);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) out[i * d + j] = xv[i * d + j] + bv[j];
    const bool rec = record({&x, &bias});
    Tensor result = make_result(x.shape(), std::move(out), rec, "add_rows");
    if (rec) {
        Tape::active()->record("add_rows", {x, bias}, result, [x, bias, n, d](auto g) mutable {
            if (x.requires_grad()) {
                auto gx = x.grad_accumulator();
                for (std::size_t i = 0; i < n * d; ++i) gx[i] += g[i];
            }
            if (bias.requires_grad()) {
                auto gb = bias.grad_accumulator();
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < d; ++j) gb[j] += g[i * d + j];
            }
        });
    }
    return result;
}

namespace {

// Row -> group id for consecutive groups of the given lengths. Empty means a
// single group covering all n rows.
std::vector<std::size_t> group_ids(std::span<const std::size_t> groups, std::size_t n,
                                   const char* op) {
    std::vector<std::size_t> ids;
    ids.reserve(n);
    if (groups.empty()) {
        ids.assign(n, 0);
        return ids;
    }
    for (std::size_t gi = 0; gi < groups.size(); ++gi) ids.insert(ids.end(), groups[gi], gi);
    if (ids.size() != n) {
        throw DimensionError(std::string(op) + ": row groups cover " + std::to_string(ids.size()) +
                             " rows, tensor has " + std::to_string(n));
    }
    return ids;
}

} // namespace

Tensor affine_rows(const Tensor& x, const Tensor& gain, const Tensor& bias, double gain_offset,
                   std::span<const std::size_t> groups) {
    require_2d(x, "affine_rows");
    const std::size_t n = x.rows(), d = x.cols();
    const std::size_t count = groups.empty() ? 1 : groups.size();
    if (gain.numel() != count * d || bias.numel() != count * d) {
        throw DimensionError("affine_rows: gain " + shape_str(gain.shape()) + " / bias " +
                             shape_str(bias.shape()) + " do not match " + std::to_string(count) +
                             " group(s) of " + shape_str(x.shape()));
    }
    auto ids = std::make_shared<const std::vector<std::size_t>>(group_ids(groups, n, "affine_rows"));
    auto xv = x.data();
    auto gv = gain.data();
    auto bv = bias.data();
    std::vector<double> out(n * d);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t o = (*ids)[i] * d;
        for (std::size_t j = 0; j < d; ++j)
            out[i * d + j] = xv[i * d + j] * (gv[o + j] + gain_offset) + bv[o + j];
    }
    const bool rec = record({&x, &gain, &bias});
    Tensor result = make_result(x.shape(), std::move(out), rec, "affine_rows");
    if (rec) {
        Tape::active()->record(
            "affine_rows", {x, gain, bias}, result, [x, gain, bias, n, d, gain_offset, ids](auto g) mutable {
                auto xv = x.data();
                auto gv = gain.data();
                if (x.requires_grad()) {
                    auto gx = x.grad_accumulator();
                    for (std::size_t i = 0; i < n; ++i) {
                        const std::size_t o = (*ids)[i] * d;
                        for (std::size_t j = 0; j < d; ++j)
                            gx[i * d + j] += g[i * d + j] * (gv[o + j] + gain_offset);
                    }
                }
                if (gain.requires_grad()) {
                    auto gg = gain.grad_accumulator();
                    for (std::size_t i = 0; i < n; ++i) {
                        const std::size_t o = (*ids)[i] * d;
                        for (std::size_t j = 0; j < d; ++j) gg[o + j] += g[i * d + j] * xv[i * d + j];
                    }
                }
                if (bias.requires_grad()) {
                    auto gb = bias.grad_accumulator();
                    for (std::size_t i = 0; i < n; ++i) {
                        const std::size_t o = (*ids)[i] * d;
                        for (std::size_t j = 0; j < d; ++j) gb[o + j] += g[i * d + j];
                    }
                }
            });
    }
    return result;
}

Tensor scale_rows(const Tensor& x, const Tensor& factors) {
    require_2d(x, "scale_rows");
    const std::size_t n = x.rows(), d = x.cols();
    if (factors.numel() != n) {
        throw DimensionError("scale_rows: factors " + shape_str(factors.shape()) +
                             " do not match rows of " + shape_str(x.shape()));
    }
    auto xv = x.data();
    auto fv = factors.data();
    std::vector<double> out(n * d);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) out[i * d + j] = fv[i] * xv[i * d + j];
    const bool rec = record({&x, &factors});
    Tensor result = make_result(x.shape(), std::move(out), rec, "scale_rows");
    if (rec) {
        Tape::active()->record("scale_rows", {x, factors}, result, [x, factors, n, d](auto g) mutable {
            auto xv = x.data();
            auto fv = factors.data();
            if (x.requires_grad()) {
                auto gx = x.grad_accumulator();
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < d; ++j) gx[i * d + j] += g[i * d + j] * fv[i];
            }
            if (factors.requires_grad()) {
                auto gf = factors.grad_accumulator();
                for (std::size_t i = 0; i < n; ++i) {
                    double acc = 0.0;
                    for (std::size_t j = 0; j < d; ++j) acc += g[i * d + j] * xv[i * d + j];
                    gf[i] += acc;
                }
            }
        });
    }
    return result;
}

Tensor sum(const Tensor& x) {
    double total = 0.0;
    for (double v : x.data()) total += v;
    const bool rec = record({&x});
    Tensor result = make_result({1}, {total}, rec, "sum");
    if (rec) {
        Tape::active()->record("sum", {x}, result, [x](auto g) mutable {
            for (double& v : x.grad_accumulator()) v += g[0];
        });
    }
    return result;
}

Tensor mean(const Tensor& x) {
    if (x.numel() == 0) throw DimensionError("mean: empty tensor");
    return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.numel()) {
        throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                             shape_str(shape));
    }
    const bool rec = record({&x});
    Tensor result = make_result(std::move(shape), std::vector<double>(x.data().begin(), x.data().end()),
                                rec, "reshape");
    if (rec) {
        Tape::active()->record("reshape", {x}, result, [x](auto g) mutable {
            auto gx = x.grad_accumulator();
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i];
        });
    }
    return result;
}

Tensor columns(const Tensor& x, std::size_t begin, std::size_t count) {
    require_2d(x, "columns");
    const std::size_t n = x.rows(), d = x.cols();
    if (begin + count > d) {
        throw IndexError("columns: range [" + std::to_string(begin) + "," +
                         std::to_string(begin + count) + ") exceeds width " + std::to_string(d));
    }
    auto xv = x.data();
    std::vector<double> out(n * count);
    for (std::size_t i = 0; i < n; ++i)
        std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>(i * d + begin), count,
                    out.begin() + static_cast<std::ptrdiff_t>(i * count));
    const bool rec = record({&x});
    Tensor result = make_result({n, count}, std::move(out), rec, "columns");
    if (rec) {
        Tape::active()->record("columns", {x}, result, [x, n, d, begin, count](auto g) mutable {
            auto gx = x.grad_accumulator();
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < count; ++j) gx[i * d + begin + j] += g[i * count + j];
        });
    }
    return result;
}

Tensor pick(const Tensor& x, std::size_t flat_index) {
    if (flat_index >= x.numel()) {
        throw IndexError("pick: index " + std::to_string(flat_index) + " out of range for " +
                         std::to_string(x.numel()) + " elements");
    }
    const bool rec = record({&x});
    Tensor result = make_result({1}, {x.data()[flat_index]}, rec, "pick");
    if (rec) {
        Tape::active()->record("pick", {x}, result, [x, flat_index](auto g) mutable {
            x.grad_accumulator()[flat_index] += g[0];
        });
    }
    return result;
}

// ---------------------------------------------------------------------------
// Nonlinear operations

namespace {

// Pointwise op whose forward also yields the local derivative; the
// derivative is cached for the backward sweep.
template <class Kernel>
Tensor pointwise_cached(const Tensor& x, std::string_view op, Kernel kernel) {
    const std::size_t n = x.numel();
    std::vector<double> out(n);
    std::vector<double> deriv(n);
    // Chunks keep the kernel's array temporaries in cache.
    constexpr std::size_t kChunk = 2048;
    auto in = x.data();
    for (std::size_t begin = 0; begin < n; begin += kChunk) {
        const std::size_t len = std::min(kChunk, n - begin);
        kernel(in.subspan(begin, len), std::span<double>(out).subspan(begin, len),
               std::span<double>(deriv).subspan(begin, len));
    }
    const bool rec = record({&x});
    Tensor result = make_result(x.shape(), std::move(out), rec, op);
    if (rec) {
        Tape::active()->record(op, {x}, result, [x, deriv = std::move(deriv)](auto g) mutable {
            auto gx = x.grad_accumulator();
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * deriv[i];
        });
    }
    return result;
}

using ArrayMap = Eigen::Map<Eigen::ArrayXd>;
using ConstArrayMap = Eigen::Map<const Eigen::ArrayXd>;

ArrayMap as_array(std::span<double> s) {
    return ArrayMap(s.data(), static_cast<Eigen::Index>(s.size()));
}

ConstArrayMap as_array(std::span<const double> s) {
    return ConstArrayMap(s.data(), static_cast<Eigen::Index>(s.size()));
}

// 1 / (1 + exp(-v)) through Eigen's vectorized exp. exp(-v) may overflow to
// inf for very negative v, which still yields the correct limit 0.
Eigen::ArrayXd logistic(const ConstArrayMap& v) {
    return 1.0 / (1.0 + (-v).exp());
}

} // namespace

Tensor sigmoid(const Tensor& x) {
    return pointwise_cached(x, "sigmoid", [](auto in, auto out, auto deriv) {
        const Eigen::ArrayXd s = logistic(as_array(in));
        as_array(out) = s;
        as_array(deriv) = s * (1.0 - s);
    });
}

Tensor gelu(const Tensor& x) {
    return pointwise_cached(x, "gelu", [](auto in, auto out, auto deriv) {
        const double c = 0.7978845608028654; // sqrt(2/pi)
        const double a = 0.044715;
        const ConstArrayMap v = as_array(in);
        const Eigen::ArrayXd v2 = v * v;
        // tanh(u) = 2 * logistic(2u) - 1
        const Eigen::ArrayXd u = c * (v + a * v2 * v);
        const Eigen::ArrayXd th = 2.0 / (1.0 + (-2.0 * u).exp()) - 1.0;
        as_array(out) = 0.5 * v * (1.0 + th);
        as_array(deriv) = 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * c * (1.0 + 3.0 * a * v2);
    });
}

Tensor silu(const Tensor& x) {
    return pointwise_cached(x, "silu", [](auto in, auto out, auto deriv) {
        const ConstArrayMap v = as_array(in);
        const Eigen::ArrayXd s = logistic(v);
        as_array(out) = v * s;
        as_array(deriv) = s * (1.0 + v * (1.0 - s));
    });
}

Tensor softmax_lastdim(const Tensor& x) {
    const std::size_t d = x.cols();
    if (d == 0 || x.dim() == 0) throw DimensionError("softmax: empty last dimension");
    const std::size_t n = x.numel() / d;
    auto xv = x.data();
    std::vector<double> out(x.numel());
    for (std::size_t i = 0; i < n; ++i) {
        const double* row = xv.data() + i * d;
        double* dst = out.data() + i * d;
        const double peak = *std::max_element(row, row + d);
        double total = 0.0;
        for (std::size_t j = 0; j < d; ++j) total += (dst[j] = std::exp(row[j] - peak));
        for (std::size_t j = 0; j < d; ++j) dst[j] /= total;
    }
    const bool rec = record({&x});
    Tensor result = make_result(x.shape(), std::move(out), rec, "softmax");
    if (rec) {
        Tape::active()->record("softmax", {x}, result, [x, result, n, d](auto g) mutable {
            auto gx = x.grad_accumulator();
            auto y = result.data();
            for (std::size_t i = 0; i < n; ++i) {
                double dot = 0.0;
                for (std::size_t j = 0; j < d; ++j) dot += g[i * d + j] * y[i * d + j];
                for (std::size_t j = 0; j < d; ++j) gx[i * d + j] += y[i * d + j] * (g[i * d + j] - dot);
            }
        });
    }
    return result;
}

Tensor layernorm_lastdim(const Tensor& x, double eps) {
    const std::size_t d = x.cols();
    if (d == 0 || x.dim() == 0) throw DimensionError("layernorm: empty last dimension");
    if (d < 2) throw DimensionError("layernorm: last dimension must be at least 2");
    const std::size_t n = x.numel() / d;
    auto xv = x.data();
    std::vector<double> out(x.numel());
    std::vector<double> inv_std(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double* row = xv.data() + i * d;
        double mu = 0.0;
        for (std::size_t j = 0; j < d; ++j) mu += row[j];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= static_cast<double>(d);
        inv_std[i] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < d; ++j) out[i * d + j] = (row[j] - mu) * inv_std[i];
    }
    const bool rec = record({&x});
    Tensor result = make_result(x.shape(), std::move(out), rec, "layernorm");
    if (rec) {
        Tape::active()->record(
            "layernorm", {x}, result, [x, result, n, d, inv_std = std::move(inv_std)](auto g) mutable {
                auto gx = x.grad_accumulator();
                auto y = result.data();
                const double inv_d = 1.0 / static_cast<double>(d);
                for (std::size_t i = 0; i < n; ++i) {
                    double g_mean = 0.0, gy_mean = 0.0;
                    for (std::size_t j = 0; j < d; ++j) {
                        g_mean += g[i * d + j];
                        gy_mean += g[i * d + j] * y[i * d + j];
                    }
                    g_mean *= inv_d;
                    gy_mean *= inv_d;
                    for (std::size_t j = 0; j < d; ++j) {
                        gx[i * d + j] +=
                            inv_std[i] * (g[i * d + j] - g_mean - y[i * d + j] * gy_mean);
                    }
                }
            });
    }
    return result;
}

Tensor mse_mean(const Tensor& a, const Tensor& b) {
    require_same(a, b, "mse_mean");
    if (a.numel() == 0) throw DimensionError("mse_mean: empty operands");
    auto av = a.data();
    auto bv = b.data();
    double total = 0.0;
    for (std::size_t i = 0; i < av.size(); ++i) total += (av[i] - bv[i]) * (av[i] - bv[i]);
    const double inv_n = 1.0 / static_cast<double>(av.size());
    const bool rec = record({&a, &b});
    Tensor result = make_result({1}, {total * inv_n}, rec, "mse_mean");
    if (rec) {
        Tape::active()->record("mse_mean", {a, b}, result, [a, b, inv_n](auto g) mutable {
            auto av = a.data();
            auto bv = b.data();
            const double f = 2.0 * inv_n * g[0];
            if (a.requires_grad()) {
                auto ga = a.grad_accumulator();
                for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += f * (av[i] - bv[i]);
            }
            if (b.requires_grad()) {
                auto gb = b.grad_accumulator();
                for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= f * (av[i] - bv[i]);
            }
        });
    }
    return result;
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                 std::span<const std::size_t> groups) {
    require_2d(q, "attention");
    require_same(q, k, "attention");
    require_same(q, v, "attention");
    const std::size_t n = q.rows(), d = q.cols();
    if (heads == 0 || d % heads != 0) {
        throw DimensionError("attention: width " + std::to_string(d) + " not divisible by " +
                             std::to_string(heads) + " heads");
    }
    std::vector<std::size_t> lengths(groups.begin(), groups.end());
    if (lengths.empty()) lengths.push_back(n);
    std::size_t covered = 0;
    for (std::size_t len : lengths) covered += len;
    if (covered != n) {
        throw DimensionError("attention: row groups cover " + std::to_string(covered) +
                             " rows, inputs have " + std::to_string(n));
    }
    const std::size_t dh = d / heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    const auto dhi = static_cast<Eigen::Index>(dh);
    const Strided stride(static_cast<Eigen::Index>(d));

    std::vector<double> out(n * d);
    // Softmax probabilities per (group, head), kept for the backward sweep.
    auto probs = std::make_shared<std::vector<RowMat>>(lengths.size() * heads);
    std::size_t first = 0;
    for (std::size_t gi = 0; gi < lengths.size(); ++gi) {
        const auto ni = static_cast<Eigen::Index>(lengths[gi]);
        const std::size_t base = first * d;
        first += lengths[gi];
        if (ni == 0) continue;
        for (std::size_t h = 0; h < heads; ++h) {
            ConstStridedMap qh(q.data().data() + base + h * dh, ni, dhi, stride);
            ConstStridedMap kh(k.data().data() + base + h * dh, ni, dhi, stride);
            ConstStridedMap vh(v.data().data() + base + h * dh, ni, dhi, stride);
            RowMat scores = (qh * kh.transpose()) * inv_sqrt;
            scores.colwise() -= scores.rowwise().maxCoeff();
            scores = scores.array().exp();
            scores.array().colwise() /= scores.rowwise().sum().array();
            StridedMap oh(out.data() + base + h * dh, ni, dhi, stride);
            oh.noalias() = scores * vh;
            (*probs)[gi * heads + h] = std::move(scores);
        }
    }
    const bool rec = record({&q, &k, &v});
    Tensor result = make_result({n, d}, std::move(out), rec, "attention");
    if (rec) {
        Tape::active()->record(
            "attention", {q, k, v}, result,
            [q, k, v, probs, heads, dhi, dh, d, inv_sqrt, lengths = std::move(lengths)](auto g) mutable {
                const Strided stride(static_cast<Eigen::Index>(d));
                std::size_t first = 0;
                for (std::size_t gi = 0; gi < lengths.size(); ++gi) {
                    const auto ni = static_cast<Eigen::Index>(lengths[gi]);
                    const std::size_t base = first * d;
                    first += lengths[gi];
                    if (ni == 0) continue;
                    for (std::size_t h = 0; h < heads; ++h) {
                        const RowMat& p = (*probs)[gi * heads + h];
                        const std::size_t off = base + h * dh;
                        ConstStridedMap qh(q.data().data() + off, ni, dhi, stride);
                        ConstStridedMap kh(k.data().data() + off, ni, dhi, stride);
                        ConstStridedMap vh(v.data().data() + off, ni, dhi, stride);
                        ConstStridedMap gh(g.data() + off, ni, dhi, stride);
                        if (v.requires_grad()) {
                            StridedMap gv(v.grad_accumulator().data() + off, ni, dhi, stride);
                            gv.noalias() += p.transpose() * gh;
                        }
                        if (!q.requires_grad() && !k.requires_grad()) continue;
                        RowMat dp = gh * vh.transpose();
                        // Softmax backward: dS = P * (dP - rowsum(dP * P)).
                        Eigen::VectorXd dots = (dp.array() * p.array()).rowwise().sum();
                        RowMat ds = (p.array() * (dp.colwise() - dots).array()) * inv_sqrt;
                        if (q.requires_grad()) {
                            StridedMap gq(q.grad_accumulator().data() + off, ni, dhi, stride);
                            gq.noalias() += ds * kh;
                        }
                        if (k.requires_grad()) {
                            StridedMap gk(k.grad_accumulator().data() + off, ni, dhi, stride);
                            gk.noalias() += ds.transpose() * qh;
                        }
                    }
                }
            });
    }
    return result;
}

// ---------------------------------------------------------------------------
// Row selection

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> indices) {
    require_2d(x, "gather_rows");
    const std::size_t n = x.rows(), d = x.cols();
    check_indices(indices, n, "gather_rows");
    auto xv = x.data();
    std::vector<double> out(indices.size() * d);
    for (std::size_t j = 0; j < indices.size(); ++j)
        std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>(indices[j] * d), d,
                    out.begin() + static_cast<std::ptrdiff_t>(j * d));
    const bool rec = record({&x});
    Tensor result = make_result({indices.size(), d}, std::move(out), rec, "gather_rows");
    if (rec) {
        std::vector<std::size_t> idx(indices.begin(), indices.end());
        Tape::active()->record("gather_rows", {x}, result, [x, d, idx = std::move(idx)](auto g) mutable {
            auto gx = x.grad_accumulator();
            for (std::size_t j = 0; j < idx.size(); ++j)
                for (std::size_t c = 0; c < d; ++c) gx[idx[j] * d + c] += g[j * d + c];
        });
    }
    return result;
}

Tensor scatter_rows(const Tensor& base, const Tensor& rows, std::span<const std::size_t> indices) {
    require_2d(base, "scatter_rows");
    require_2d(rows, "scatter_rows");
    const std::size_t n = base.rows(), d = base.cols();
    if (rows.cols() != d || rows.rows() != indices.size()) {
        throw DimensionError("scatter_rows: rows " + shape_str(rows.shape()) + " do not fit base " +
                             shape_str(base.shape()) + " with " + std::to_string(indices.size()) +
                             " indices");
    }
    check_indices(indices, n, "scatter_rows");
    std::vector<double> out(base.data().begin(), base.data().end());
    auto rv = rows.data();
    std::vector<char> touched(n, 0);
    for (std::size_t j = 0; j < indices.size(); ++j) {
        std::copy_n(rv.begin() + static_cast<std::ptrdiff_t>(j * d), d,
                    out.begin() + static_cast<std::ptrdiff_t>(indices[j] * d));
        touched[indices[j]] = 1;
    }
    const bool rec = record({&base, &rows});
    Tensor result = make_result(base.shape(), std::move(out), rec, "scatter_rows");
    if (rec) {
        std::vector<std::size_t> idx(indices.begin(), indices.end());
        Tape::active()->record(
            "scatter_rows", {base, rows}, result,
            [base, rows, n, d, idx = std::move(idx), touched = std::move(touched)](auto g) mutable {
                if (base.requires_grad()) {
                    auto gb = base.grad_accumulator();
                    for (std::size_t i = 0; i < n; ++i) {
                        if (touched[i]) continue;
                        for (std::size_t c = 0; c < d; ++c) gb[i * d + c] += g[i * d + c];
                    }
                }
                if (rows.requires_grad()) {
                    auto gr = rows.grad_accumulator();
                    for (std::size_t j = 0; j < idx.size(); ++j)
                        for (std::size_t c = 0; c < d; ++c) gr[j * d + c] += g[idx[j] * d + c];
                }
            });
    }
    return result;
}

std::vector<std::size_t> topk_indices(std::span<const double> scores, std::size_t k) {
    if (k > scores.size()) {
        throw ArgumentError("topk: k=" + std::to_string(k) + " exceeds " +
                            std::to_string(scores.size()) + " scores");
    }
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    auto better = [&](std::size_t a, std::size_t b) {
        return scores[a] > scores[b] || (scores[a] == scores[b] && a < b);
    };
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                      better);
    order.resize(k);
    std::sort(order.begin(), order.end());
    return order;
}

} // namespace dcr
