#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace sphir {

using Shape = std::vector<int>;

class TensorError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorImpl {
    Shape shape;
    std::shared_ptr<std::vector<double>> data;
    std::vector<double> grad;   // sized lazily on first accumulation
    bool requires_grad = false;

    int64_t numel() const { return static_cast<int64_t>(data->size()); }
    void accumulate_grad(const double* g, int64_t n);
    void ensure_grad();
};

enum class InitScheme { UniformFanIn, Normal, Zeros, Ones };

/// Dense row-major tensor of 64-bit floats participating in a define-by-run
/// gradient tape. Values are immutable once an op has produced them; only
/// leaf tensors (parameters) are updated in place between steps.
class Tensor {
public:
    Tensor() = default;

    static Tensor from_data(Shape shape, std::vector<double> values, bool requires_grad = false);
    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor ones(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);
    static Tensor seeded(Shape shape, InitScheme scheme, uint64_t seed, double sigma = 0.02);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    int ndim() const { return static_cast<int>(impl_->shape.size()); }
    int64_t numel() const { return impl_->numel(); }
    int dim(int axis) const { return impl_->shape[axis]; }

    std::span<const double> data() const { return {impl_->data->data(), impl_->data->size()}; }
    std::span<double> mutable_data() { return {impl_->data->data(), impl_->data->size()}; }
    double value() const;          // scalar tensors only
    double at(int64_t flat) const { return (*impl_->data)[flat]; }

    bool requires_grad() const { return impl_->requires_grad; }
    Tensor& set_requires_grad(bool rg);
    bool has_grad() const { return !impl_->grad.empty(); }
    std::span<const double> grad() const;
    void zero_grad();

    Tensor detach() const;
    Tensor clone() const;

    std::shared_ptr<TensorImpl> impl() const { return impl_; }
    static Tensor wrap(std::shared_ptr<TensorImpl> impl);

private:
    std::shared_ptr<TensorImpl> impl_;
};

// ---------------------------------------------------------------------------
// Gradient tape

bool grad_enabled();

/// Disables tape recording for its lifetime (evaluation / data paths).
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

int64_t tape_size();
void clear_tape();

/// Reverse-mode sweep from a scalar loss. Gradients are accumulated (summed)
/// into every requires_grad tensor reachable from the loss; the tape is
/// cleared afterwards, so separate losses can be backpropagated sequentially.
void backward(const Tensor& loss);

// ---------------------------------------------------------------------------
// Operation counter (hard-route compute audits)

uint64_t op_counter_macs();
void op_counter_reset();

// ---------------------------------------------------------------------------
// L2-normalization zero-row diagnostic

uint64_t l2_zero_row_count();
void l2_zero_row_reset();

// ---------------------------------------------------------------------------
// Elementwise / scalar ops (suffix broadcasting: the smaller operand's shape
// must equal a trailing suffix of the larger's, or be a single element)

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);
Tensor neg(const Tensor& a);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator+(const Tensor& a, double s) { return add_scalar(a, s); }
inline Tensor operator-(const Tensor& a, double s) { return add_scalar(a, -s); }
inline Tensor operator*(const Tensor& a, double s) { return mul_scalar(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return mul_scalar(a, s); }
inline Tensor operator/(const Tensor& a, double s) { return mul_scalar(a, 1.0 / s); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

Tensor relu(const Tensor& a);
Tensor gelu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor exp_t(const Tensor& a);
Tensor log_t(const Tensor& a);
Tensor abs_t(const Tensor& a);
Tensor sqrt_t(const Tensor& a);

// ---------------------------------------------------------------------------
// Linear algebra / structure

Tensor matmul(const Tensor& a, const Tensor& b);      // (M,K) x (K,N)
Tensor transpose2d(const Tensor& a);                  // (M,N) -> (N,M)
Tensor permute(const Tensor& a, const std::vector<int>& perm);
Tensor reshape(const Tensor& a, Shape shape);         // shares storage
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& a, int axis, int start, int len);
Tensor row(const Tensor& a, int index);               // (M,N) -> (N,)
Tensor entry(const Tensor& a, int64_t flat_index);    // -> scalar tensor

// ---------------------------------------------------------------------------
// Convolution and resampling (images are H x W x C)

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias = Tensor());
Tensor depthwise_conv2d(const Tensor& x, const Tensor& w, const Tensor& bias = Tensor());
Tensor subsample2(const Tensor& x);                   // keep even rows/cols
Tensor upsample_nearest2(const Tensor& x);
Tensor bilinear_resize(const Tensor& x, int out_h, int out_w);  // align-corners

// ---------------------------------------------------------------------------
// Normalizations, softmax, reductions

Tensor layer_norm(const Tensor& x, double eps = 1e-10);   // over last axis
Tensor softmax_rows(const Tensor& x);                     // over last axis
Tensor l2_normalize_rows(const Tensor& x);                // over last axis
Tensor reduce_sum(const Tensor& x, int axis);
Tensor reduce_mean(const Tensor& x, int axis);
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);

// ---------------------------------------------------------------------------
// Composites

/// Scaled dot-product attention on token matrices: q is (Nq, dk), k is
/// (Nk, dk), v is (Nk, dv). Built from matmul/softmax, no primitive node.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v);

Tensor mean_abs_error(const Tensor& a, const Tensor& b);

// ---------------------------------------------------------------------------
// Verification oracle

/// Max over coordinates of the relative disagreement between the analytic
/// gradient of f at x and a central finite difference. When max_coords > 0
/// only a deterministic subsample of coordinates is probed (large tensors).
double finite_difference_check(const std::function<Tensor()>& f, Tensor& x,
                               double eps = 1e-5, int max_coords = 0);

}  // namespace sphir
