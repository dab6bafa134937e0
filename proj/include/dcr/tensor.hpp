#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace dcr {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tape;

namespace detail {

struct TensorData {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad; // empty until something accumulates into it
    bool requires_grad = false;
    const Tape* producer = nullptr; // null for leaves
    std::string_view op = "leaf";
};

} // namespace detail

/// Shared handle to a row-major double array. Copies alias the same storage;
/// use clone() for a value copy.
class Tensor {
public:
    Tensor() = default;
    Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const noexcept { return static_cast<bool>(impl_); }
    const Shape& shape() const { return impl_->shape; }
    std::size_t numel() const { return impl_->value.size(); }
    std::size_t dim() const { return impl_->shape.size(); }
    /// Leading extent (1 for 1-D tensors viewed as a row).
    std::size_t rows() const;
    /// Trailing extent.
    std::size_t cols() const;

    std::span<const double> data() const { return impl_->value; }
    /// Direct write access. Intended for leaves (initialization, optimizer).
    std::span<double> mutable_data() { return impl_->value; }
    double item() const;
    double at(std::size_t row, std::size_t col) const;

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool on) { impl_->requires_grad = on; }
    bool has_grad() const { return !impl_->grad.empty(); }
    std::span<const double> grad() const { return impl_->grad; }
    /// Grad buffer, allocated (zero) on first use.
    std::span<double> grad_accumulator() const;
    void zero_grad() { impl_->grad.clear(); }

    /// Value copy detached from any tape.
    Tensor clone() const;
    bool is_leaf() const { return impl_->producer == nullptr; }
    const Tape* producer() const { return impl_->producer; }
    bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

    detail::TensorData& raw() const { return *impl_; }

private:
    std::shared_ptr<detail::TensorData> impl_;
};

/// Define-by-run record of differentiable operations. Operations record onto
/// the active tape (see Tape::Scope) only when some input requires grad.
class Tape {
public:
    /// Accumulates input gradients given the output gradient.
    using BackwardFn = std::function<void(std::span<const double> out_grad)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    class Scope {
    public:
        explicit Scope(Tape& tape);
        ~Scope();
        Scope(const Scope&) = delete;
        Scope& operator=(const Scope&) = delete;

    private:
        Tape* previous_;
    };

    static Tape* active();

    /// True when an output computed from `inputs` must be recorded.
    static bool should_record(std::initializer_list<const Tensor*> inputs);

    void record(std::string_view op, std::vector<Tensor> inputs, const Tensor& output,
                BackwardFn backward);

    /// Reverse sweep from a scalar loss. A tape can be swept once per reset().
    void backward(const Tensor& loss);
    void reset();

    std::size_t size() const { return nodes_.size(); }
    bool consumed() const { return consumed_; }
    /// Name of the first recorded op whose output holds NaN/Inf.
    std::optional<std::string> first_nonfinite() const;

private:
    struct Node {
        std::string_view op;
        std::vector<Tensor> inputs;
        Tensor output;
        BackwardFn backward;
    };
    std::vector<Node> nodes_;
    bool consumed_ = false;
};

/// Builds an output tensor, marking it as produced on the active tape when
/// `record` is set.
Tensor make_result(Shape shape, std::vector<double> values, bool record, std::string_view op);

// Linear operations. Elementwise ops accept equal shapes or a single-element
// operand that broadcasts.
Tensor matmul(const Tensor& a, const Tensor& b);
/// x * weight + bias (bias broadcast over rows).
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
/// x[i,:] + bias
Tensor add_rows(const Tensor& x, const Tensor& bias);
/// Lengths of consecutive row blocks, one per image in a stacked batch.
/// Empty means the whole tensor is one block.
using RowGroups = std::span<const std::size_t>;

/// x[i,j] * (gain[g,j] + gain_offset) + bias[g,j] where g is the group of row
/// i; gain and bias hold one row per group.
Tensor affine_rows(const Tensor& x, const Tensor& gain, const Tensor& bias,
                   double gain_offset = 0.0, RowGroups groups = {});
/// x[i,:] * factors[i]
Tensor scale_rows(const Tensor& x, const Tensor& factors);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor reshape(const Tensor& x, Shape shape);
/// Columns [begin, begin+count) of a 2-D tensor.
Tensor columns(const Tensor& x, std::size_t begin, std::size_t count);
/// Single element as a scalar tensor.
Tensor pick(const Tensor& x, std::size_t flat_index);

// Nonlinear operations.
Tensor sigmoid(const Tensor& x);
/// tanh approximation.
Tensor gelu(const Tensor& x);
Tensor silu(const Tensor& x);
Tensor softmax_lastdim(const Tensor& x);
/// Normalizes each row to zero mean / unit variance (no affine part).
Tensor layernorm_lastdim(const Tensor& x, double eps = 1e-10);
Tensor mse_mean(const Tensor& a, const Tensor& b);

/// Multi-head self-attention over the rows of q/k/v (each n x d); returns the
/// concatenated head outputs before the output projection. Rows attend only
/// within their own group.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                 RowGroups groups = {});

// Row selection. Indices refer to rows of 2-D tensors.
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> indices);
/// Copy of base with rows indices[j] replaced by rows[j].
Tensor scatter_rows(const Tensor& base, const Tensor& rows, std::span<const std::size_t> indices);

/// Indices of the k largest scores, ties toward the lower index, returned in
/// ascending index order. Not differentiable.
std::vector<std::size_t> topk_indices(std::span<const double> scores, std::size_t k);

} // namespace dcr
