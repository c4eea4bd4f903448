#include "sphir/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

#include "sphir/rng.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace sphir {

namespace {

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

struct TapeNode {
    std::shared_ptr<TensorImpl> out;
    std::function<void()> backward;
};

thread_local std::vector<TapeNode> g_tape;
thread_local bool g_grad_enabled = true;
thread_local uint64_t g_op_macs = 0;
thread_local uint64_t g_l2_zero_rows = 0;

void record(std::shared_ptr<TensorImpl> out, std::function<void()> fn) {
    g_tape.push_back({std::move(out), std::move(fn)});
}

bool track(const Tensor& t) { return g_grad_enabled && t.requires_grad(); }

[[noreturn]] void shape_fail(const char* op, const Shape& a, const Shape& b) {
    std::ostringstream os;
    os << op << ": incompatible shapes " << shape_str(a) << " and " << shape_str(b);
    throw TensorError(os.str());
}

Tensor make_result(Shape shape, bool requires_grad) {
    Tensor t = Tensor::zeros(std::move(shape));
    if (requires_grad && g_grad_enabled)
        t.set_requires_grad(true);
    return t;
}

// Row-major C(MxN) += A(MxK) * B(KxN). Each C row is owned by one thread, so
// results are bit-identical for any thread count.
void gemm_acc(int64_t m, int64_t n, int64_t k, const double* a, const double* b, double* c) {
    g_op_macs += static_cast<uint64_t>(m) * n * k;
#ifdef _OPENMP
    const bool par = m * n * k > 65536 && m > 1;
#pragma omp parallel for schedule(static) if (par)
#endif
    for (int64_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (int64_t kk = 0; kk < k; ++kk) {
            const double av = arow[kk];
            if (av == 0.0)
                continue;
            const double* brow = b + kk * n;
            for (int64_t j = 0; j < n; ++j)
                crow[j] += av * brow[j];
        }
    }
}

// C(MxN) += A(KxM)^T * B(KxN)
void gemm_tn_acc(int64_t m, int64_t n, int64_t k, const double* a, const double* b, double* c) {
    g_op_macs += static_cast<uint64_t>(m) * n * k;
#ifdef _OPENMP
    const bool par = m * n * k > 65536 && m > 1;
#pragma omp parallel for schedule(static) if (par)
#endif
    for (int64_t i = 0; i < m; ++i) {
        double* crow = c + i * n;
        for (int64_t kk = 0; kk < k; ++kk) {
            const double av = a[kk * m + i];
            if (av == 0.0)
                continue;
            const double* brow = b + kk * n;
            for (int64_t j = 0; j < n; ++j)
                crow[j] += av * brow[j];
        }
    }
}

// C(MxN) += A(MxK) * B(NxK)^T
void gemm_nt_acc(int64_t m, int64_t n, int64_t k, const double* a, const double* b, double* c) {
    g_op_macs += static_cast<uint64_t>(m) * n * k;
#ifdef _OPENMP
    const bool par = m * n * k > 65536 && m > 1;
#pragma omp parallel for schedule(static) if (par)
#endif
    for (int64_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (int64_t j = 0; j < n; ++j) {
            const double* brow = b + j * k;
            double acc = 0.0;
            for (int64_t kk = 0; kk < k; ++kk)
                acc += arow[kk] * brow[kk];
            crow[j] += acc;
        }
    }
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor basics

int64_t shape_numel(const Shape& shape) {
    int64_t n = 1;
    for (int d : shape) {
        if (d < 0)
            throw TensorError("negative extent in shape " + shape_str(shape));
        n *= d;
    }
    return n;
}

std::string shape_str(const Shape& shape) {
    std::string s = "(";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i)
            s += ",";
        s += std::to_string(shape[i]);
    }
    return s + ")";
}

void TensorImpl::ensure_grad() {
    if (grad.empty())
        grad.assign(data->size(), 0.0);
}

void TensorImpl::accumulate_grad(const double* g, int64_t n) {
    ensure_grad();
    for (int64_t i = 0; i < n; ++i)
        grad[i] += g[i];
}

Tensor Tensor::from_data(Shape shape, std::vector<double> values, bool requires_grad) {
    if (shape_numel(shape) != static_cast<int64_t>(values.size()))
        throw TensorError("from_data: shape " + shape_str(shape) + " does not match " +
                          std::to_string(values.size()) + " values");
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::make_shared<std::vector<double>>(std::move(values));
    impl->requires_grad = requires_grad;
    Tensor t;
    t.impl_ = std::move(impl);
    return t;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::ones(Shape shape, bool requires_grad) {
    return full(std::move(shape), 1.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    int64_t n = shape_numel(shape);
    return from_data(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return from_data({}, {value}, requires_grad);
}

Tensor Tensor::seeded(Shape shape, InitScheme scheme, uint64_t seed, double sigma) {
    int64_t n = shape_numel(shape);
    std::vector<double> values(n, 0.0);
    switch (scheme) {
        case InitScheme::Zeros:
            break;
        case InitScheme::Ones:
            std::fill(values.begin(), values.end(), 1.0);
            break;
        case InitScheme::UniformFanIn: {
            // fan-in = elements feeding one output: everything but the last axis
            int64_t fan_in = shape.empty() ? 1 : n / std::max(shape.back(), 1);
            double bound = 1.0 / std::sqrt(static_cast<double>(std::max<int64_t>(fan_in, 1)));
            Rng rng(seed);
            for (auto& v : values)
                v = rng.uniform(-bound, bound);
            break;
        }
        case InitScheme::Normal: {
            Rng rng(seed);
            for (auto& v : values)
                v = rng.normal(0.0, sigma);
            break;
        }
    }
    return from_data(std::move(shape), std::move(values));
}

double Tensor::value() const {
    if (numel() != 1)
        throw TensorError("value(): tensor has shape " + shape_str(shape()) + ", expected scalar");
    return (*impl_->data)[0];
}

Tensor& Tensor::set_requires_grad(bool rg) {
    impl_->requires_grad = rg;
    return *this;
}

std::span<const double> Tensor::grad() const {
    if (impl_->grad.empty())
        const_cast<TensorImpl*>(impl_.get())->ensure_grad();
    return {impl_->grad.data(), impl_->grad.size()};
}

void Tensor::zero_grad() {
    impl_->grad.clear();
}

Tensor Tensor::detach() const {
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = impl_->shape;
    impl->data = impl_->data;  // values shared, history dropped
    impl->requires_grad = false;
    Tensor t;
    t.impl_ = std::move(impl);
    return t;
}

Tensor Tensor::clone() const {
    return from_data(impl_->shape, *impl_->data, false);
}

Tensor Tensor::wrap(std::shared_ptr<TensorImpl> impl) {
    Tensor t;
    t.impl_ = std::move(impl);
    return t;
}

// ---------------------------------------------------------------------------
// Tape

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

int64_t tape_size() { return static_cast<int64_t>(g_tape.size()); }
void clear_tape() { g_tape.clear(); }

void backward(const Tensor& loss) {
    if (loss.numel() != 1)
        throw TensorError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    auto impl = loss.impl();
    impl->ensure_grad();
    impl->grad[0] += 1.0;
    for (auto it = g_tape.rbegin(); it != g_tape.rend(); ++it) {
        if (it->out->grad.empty())
            continue;  // branch not reached by this loss
        it->backward();
    }
    g_tape.clear();
}

uint64_t op_counter_macs() { return g_op_macs; }
void op_counter_reset() { g_op_macs = 0; }

uint64_t l2_zero_row_count() { return g_l2_zero_rows; }
void l2_zero_row_reset() { g_l2_zero_rows = 0; }

// ---------------------------------------------------------------------------
// Elementwise with suffix broadcasting

namespace {

// Returns (big, small, small_is_b). The small operand's shape must be a
// trailing suffix of the big one (a single element always qualifies).
struct BroadcastPlan {
    int64_t n_big = 0;
    int64_t n_small = 0;
    bool small_is_b = true;
};

BroadcastPlan broadcast_plan(const char* op, const Tensor& a, const Tensor& b) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    auto is_suffix = [](const Shape& small, const Shape& big) {
        if (small.size() > big.size())
            return false;
        return std::equal(small.rbegin(), small.rend(), big.rbegin());
    };
    BroadcastPlan plan;
    if (sa == sb || is_suffix(sb, sa) || b.numel() == 1) {
        plan.n_big = a.numel();
        plan.n_small = b.numel();
        plan.small_is_b = true;
        if (b.numel() != 1 && !is_suffix(sb, sa))
            shape_fail(op, sa, sb);
    } else if (is_suffix(sa, sb) || a.numel() == 1) {
        plan.n_big = b.numel();
        plan.n_small = a.numel();
        plan.small_is_b = false;
    } else {
        shape_fail(op, sa, sb);
    }
    if (plan.n_small == 0 || plan.n_big % plan.n_small != 0)
        shape_fail(op, sa, sb);
    return plan;
}

// df_big / df_small give the partials with respect to the broadcast (big)
// and broadcasted (small) operand for out = f(big_i, small_{i % m}).
template <typename Fwd, typename DBig, typename DSmall>
Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, Fwd fwd, DBig d_a, DSmall d_b) {
    BroadcastPlan plan = broadcast_plan(name, a, b);
    const Tensor& big = plan.small_is_b ? a : b;
    const Tensor& small = plan.small_is_b ? b : a;
    const int64_t n = plan.n_big, m = plan.n_small;

    Tensor out = make_result(big.shape(), a.requires_grad() || b.requires_grad());
    const double* pb = big.data().data();
    const double* ps = small.data().data();
    double* po = out.mutable_data().data();
    const bool swap = !plan.small_is_b;  // f(a,b) with a small
    for (int64_t i = 0; i < n; ++i) {
        double x = swap ? ps[i % m] : pb[i];
        double y = swap ? pb[i] : ps[i % m];
        po[i] = fwd(x, y);
    }
    if (out.requires_grad()) {
        auto ai = a.impl(), bi = b.impl(), oi = out.impl();
        bool a_rg = a.requires_grad(), b_rg = b.requires_grad();
        bool small_b = plan.small_is_b;
        record(oi, [=]() {
            const double* g = oi->grad.data();
            auto big_i = small_b ? ai : bi;
            auto small_i = small_b ? bi : ai;
            bool big_rg = small_b ? a_rg : b_rg;
            bool small_rg = small_b ? b_rg : a_rg;
            const double* pbv = big_i->data->data();
            const double* psv = small_i->data->data();
            if (big_rg) {
                big_i->ensure_grad();
                for (int64_t i = 0; i < n; ++i) {
                    double x = small_b ? pbv[i] : psv[i % m];
                    double y = small_b ? psv[i % m] : pbv[i];
                    double d = small_b ? d_a(x, y) : d_b(x, y);
                    big_i->grad[i] += g[i] * d;
                }
            }
            if (small_rg) {
                small_i->ensure_grad();
                for (int64_t i = 0; i < n; ++i) {
                    double x = small_b ? pbv[i] : psv[i % m];
                    double y = small_b ? psv[i % m] : pbv[i];
                    double d = small_b ? d_b(x, y) : d_a(x, y);
                    small_i->grad[i % m] += g[i] * d;
                }
            }
        });
    }
    return out;
}

template <typename Fwd, typename Bwd>
Tensor unary_op(const Tensor& a, Fwd fwd, Bwd dfdx) {
    Tensor out = make_result(a.shape(), a.requires_grad());
    const double* pa = a.data().data();
    double* po = out.mutable_data().data();
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i)
        po[i] = fwd(pa[i]);
    if (out.requires_grad()) {
        auto ai = a.impl(), oi = out.impl();
        record(oi, [=]() {
            ai->ensure_grad();
            const double* g = oi->grad.data();
            const double* x = ai->data->data();
            const double* y = oi->data->data();
            for (int64_t i = 0; i < n; ++i)
                ai->grad[i] += g[i] * dfdx(x[i], y[i]);
        });
    }
    return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    return binary_op("add", a, b, [](double x, double y) { return x + y; },
                     [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary_op("sub", a, b, [](double x, double y) { return x - y; },
                     [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary_op("mul", a, b, [](double x, double y) { return x * y; },
                     [](double, double y) { return y; }, [](double x, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
    return binary_op("div", a, b, [](double x, double y) { return x / y; },
                     [](double, double y) { return 1.0 / y; },
                     [](double x, double y) { return -x / (y * y); });
}

Tensor add_scalar(const Tensor& a, double s) {
    return unary_op(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& a, double s) {
    return unary_op(a, [s](double x) { return x * s; }, [s](double, double) { return s; });
}

Tensor neg(const Tensor& a) {
    return unary_op(a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}

Tensor relu(const Tensor& a) {
    return unary_op(a, [](double x) { return x > 0.0 ? x : 0.0; },
                    [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& a) {
    return unary_op(a,
                    [](double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); },
                    [](double x, double) {
                        double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
                        double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
                        return cdf + x * pdf;
                    });
}

Tensor sigmoid(const Tensor& a) {
    return unary_op(a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
                    [](double, double y) { return y * (1.0 - y); });
}

Tensor exp_t(const Tensor& a) {
    return unary_op(a, [](double x) { return std::exp(x); },
                    [](double, double y) { return y; });
}

Tensor log_t(const Tensor& a) {
    return unary_op(a, [](double x) { return std::log(x); },
                    [](double x, double) { return 1.0 / x; });
}

Tensor abs_t(const Tensor& a) {
    return unary_op(a, [](double x) { return std::fabs(x); },
                    [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Tensor sqrt_t(const Tensor& a) {
    return unary_op(a, [](double x) { return std::sqrt(x); },
                    [](double, double y) { return 0.5 / y; });
}

// ---------------------------------------------------------------------------
// matmul / structure

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
        shape_fail("matmul", a.shape(), b.shape());
    const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out = make_result({static_cast<int>(m), static_cast<int>(n)},
                             a.requires_grad() || b.requires_grad());
    gemm_acc(m, n, k, a.data().data(), b.data().data(), out.mutable_data().data());
    if (out.requires_grad()) {
        auto ai = a.impl(), bi = b.impl(), oi = out.impl();
        bool a_rg = a.requires_grad(), b_rg = b.requires_grad();
        record(oi, [=]() {
            const double* g = oi->grad.data();
            if (a_rg) {  // dA = dC * B^T
                ai->ensure_grad();
                gemm_nt_acc(m, k, n, g, bi->data->data(), ai->grad.data());
            }
            if (b_rg) {  // dB = A^T * dC
                bi->ensure_grad();
                gemm_tn_acc(k, n, m, ai->data->data(), g, bi->grad.data());
            }
        });
    }
    return out;
}

Tensor transpose2d(const Tensor& a) {
    if (a.ndim() != 2)
        throw TensorError("transpose2d: expected rank-2 tensor, got " + shape_str(a.shape()));
    return permute(a, {1, 0});
}

Tensor permute(const Tensor& a, const std::vector<int>& perm) {
    const int nd = a.ndim();
    if (static_cast<int>(perm.size()) != nd)
        throw TensorError("permute: permutation size mismatch for " + shape_str(a.shape()));
    std::vector<char> seen(nd, 0);
    for (int p : perm) {
        if (p < 0 || p >= nd || seen[p])
            throw TensorError("permute: invalid permutation");
        seen[p] = 1;
    }
    const Shape& in_shape = a.shape();
    Shape out_shape(nd);
    for (int i = 0; i < nd; ++i)
        out_shape[i] = in_shape[perm[i]];

    std::vector<int64_t> in_strides(nd, 1), out_strides(nd, 1);
    for (int i = nd - 2; i >= 0; --i) {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
        out_strides[i] = out_strides[i + 1] * out_shape[i + 1];
    }
    // stride of output axis i in the input buffer
    std::vector<int64_t> gather(nd);
    for (int i = 0; i < nd; ++i)
        gather[i] = in_strides[perm[i]];

    const int64_t n = a.numel();
    Tensor out = make_result(out_shape, a.requires_grad());
    const double* pa = a.data().data();
    double* po = out.mutable_data().data();
    std::vector<int64_t> idx(nd, 0);
    for (int64_t flat = 0; flat < n; ++flat) {
        int64_t src = 0;
        int64_t rem = flat;
        for (int i = 0; i < nd; ++i) {
            int64_t c = rem / out_strides[i];
            rem -= c * out_strides[i];
            src += c * gather[i];
        }
        po[flat] = pa[src];
    }
    if (out.requires_grad()) {
        auto ai = a.impl(), oi = out.impl();
        auto out_strides_c = out_strides;
        auto gather_c = gather;
        record(oi, [=]() {
            ai->ensure_grad();
            const double* g = oi->grad.data();
            for (int64_t flat = 0; flat < n; ++flat) {
                int64_t src = 0;
                int64_t rem = flat;
                for (size_t i = 0; i < gather_c.size(); ++i) {
                    int64_t c = rem / out_strides_c[i];
                    rem -= c * out_strides_c[i];
                    src += c * gather_c[i];
                }
                ai->grad[src] += g[flat];
            }
        });
    }
    return out;
}

Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.numel())
        shape_fail("reshape", a.shape(), shape);
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = a.impl()->data;  // storage shared; layout unchanged
    impl->requires_grad = track(a);
    Tensor out = Tensor::wrap(impl);
    if (impl->requires_grad) {
        auto ai = a.impl();
        auto oi = impl;
        record(oi, [=]() { ai->accumulate_grad(oi->grad.data(), static_cast<int64_t>(oi->grad.size())); });
    }
    return out;
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty())
        throw TensorError("concat: no inputs");
    const int nd = parts[0].ndim();
    if (axis < 0 || axis >= nd)
        throw TensorError("concat: axis out of range");
    Shape out_shape = parts[0].shape();
    int total = 0;
    bool rg = false;
    for (const Tensor& p : parts) {
        if (p.ndim() != nd)
            shape_fail("concat", parts[0].shape(), p.shape());
        for (int i = 0; i < nd; ++i)
            if (i != axis && p.shape()[i] != out_shape[i])
                shape_fail("concat", parts[0].shape(), p.shape());
        total += p.shape()[axis];
        rg = rg || p.requires_grad();
    }
    out_shape[axis] = total;

    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i)
        outer *= out_shape[i];
    for (int i = axis + 1; i < nd; ++i)
        inner *= out_shape[i];

    Tensor out = make_result(out_shape, rg);
    double* po = out.mutable_data().data();
    const int64_t out_row = static_cast<int64_t>(total) * inner;
    int64_t offset = 0;
    for (const Tensor& p : parts) {
        const int64_t rows = static_cast<int64_t>(p.shape()[axis]) * inner;
        const double* pp = p.data().data();
        for (int64_t o = 0; o < outer; ++o)
            std::memcpy(po + o * out_row + offset, pp + o * rows, rows * sizeof(double));
        offset += rows;
    }
    if (out.requires_grad()) {
        auto oi = out.impl();
        std::vector<std::shared_ptr<TensorImpl>> impls;
        std::vector<int64_t> rows_of;
        std::vector<char> rgs;
        for (const Tensor& p : parts) {
            impls.push_back(p.impl());
            rows_of.push_back(static_cast<int64_t>(p.shape()[axis]) * inner);
            rgs.push_back(p.requires_grad() ? 1 : 0);
        }
        record(oi, [=]() {
            const double* g = oi->grad.data();
            int64_t off = 0;
            for (size_t pi = 0; pi < impls.size(); ++pi) {
                const int64_t rows = rows_of[pi];
                if (rgs[pi]) {
                    impls[pi]->ensure_grad();
                    for (int64_t o = 0; o < outer; ++o) {
                        const double* src = g + o * out_row + off;
                        double* dst = impls[pi]->grad.data() + o * rows;
                        for (int64_t i = 0; i < rows; ++i)
                            dst[i] += src[i];
                    }
                }
                off += rows;
            }
        });
    }
    return out;
}

Tensor slice(const Tensor& a, int axis, int start, int len) {
    const int nd = a.ndim();
    if (axis < 0 || axis >= nd || start < 0 || len <= 0 || start + len > a.shape()[axis])
        throw TensorError("slice: range [" + std::to_string(start) + "," +
                          std::to_string(start + len) + ") invalid for axis " +
                          std::to_string(axis) + " of " + shape_str(a.shape()));
    Shape out_shape = a.shape();
    out_shape[axis] = len;
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i)
        outer *= a.shape()[i];
    for (int i = axis + 1; i < nd; ++i)
        inner *= a.shape()[i];
    const int64_t in_row = static_cast<int64_t>(a.shape()[axis]) * inner;
    const int64_t out_row = static_cast<int64_t>(len) * inner;
    const int64_t off = static_cast<int64_t>(start) * inner;

    Tensor out = make_result(out_shape, a.requires_grad());
    const double* pa = a.data().data();
    double* po = out.mutable_data().data();
    for (int64_t o = 0; o < outer; ++o)
        std::memcpy(po + o * out_row, pa + o * in_row + off, out_row * sizeof(double));
    if (out.requires_grad()) {
        auto ai = a.impl(), oi = out.impl();
        record(oi, [=]() {
            ai->ensure_grad();
            const double* g = oi->grad.data();
            for (int64_t o = 0; o < outer; ++o) {
                double* dst = ai->grad.data() + o * in_row + off;
                const double* src = g + o * out_row;
                for (int64_t i = 0; i < out_row; ++i)
                    dst[i] += src[i];
            }
        });
    }
    return out;
}

Tensor row(const Tensor& a, int index) {
    if (a.ndim() != 2)
        throw TensorError("row: expected rank-2 tensor, got " + shape_str(a.shape()));
    return reshape(slice(a, 0, index, 1), {a.dim(1)});
}

Tensor entry(const Tensor& a, int64_t flat_index) {
    if (flat_index < 0 || flat_index >= a.numel())
        throw TensorError("entry: index " + std::to_string(flat_index) + " out of range for " +
                          shape_str(a.shape()));
    Tensor flat = reshape(a, {static_cast<int>(a.numel())});
    return reshape(slice(flat, 0, static_cast<int>(flat_index), 1), {});
}

// ---------------------------------------------------------------------------
// Convolutions

namespace {

void check_image(const char* op, const Tensor& x) {
    if (x.ndim() != 3)
        throw TensorError(std::string(op) + ": expected H x W x C input, got " + shape_str(x.shape()));
}

// col is (H*W) x (KH*KW*Cin) for same-size zero padding
void im2col(const double* x, int h, int w, int c, int kh, int kw, double* col) {
    const int ph = kh / 2, pw = kw / 2;
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (h * w > 1024)
#endif
    for (int y = 0; y < h; ++y) {
        for (int xx = 0; xx < w; ++xx) {
            double* dst = col + (static_cast<int64_t>(y) * w + xx) * kh * kw * c;
            for (int ky = 0; ky < kh; ++ky) {
                const int sy = y + ky - ph;
                for (int kx = 0; kx < kw; ++kx) {
                    const int sx = xx + kx - pw;
                    if (sy >= 0 && sy < h && sx >= 0 && sx < w)
                        std::memcpy(dst, x + (static_cast<int64_t>(sy) * w + sx) * c, c * sizeof(double));
                    else
                        std::memset(dst, 0, c * sizeof(double));
                    dst += c;
                }
            }
        }
    }
}

void col2im_acc(const double* col, int h, int w, int c, int kh, int kw, double* x_grad) {
    const int ph = kh / 2, pw = kw / 2;
    for (int y = 0; y < h; ++y) {
        for (int xx = 0; xx < w; ++xx) {
            const double* src = col + (static_cast<int64_t>(y) * w + xx) * kh * kw * c;
            for (int ky = 0; ky < kh; ++ky) {
                const int sy = y + ky - ph;
                for (int kx = 0; kx < kw; ++kx) {
                    const int sx = xx + kx - pw;
                    if (sy >= 0 && sy < h && sx >= 0 && sx < w) {
                        double* dst = x_grad + (static_cast<int64_t>(sy) * w + sx) * c;
                        for (int ci = 0; ci < c; ++ci)
                            dst[ci] += src[ci];
                    }
                    src += c;
                }
            }
        }
    }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias) {
    check_image("conv2d", x);
    if (w.ndim() != 4)
        throw TensorError("conv2d: expected KH x KW x Cin x Cout weight, got " + shape_str(w.shape()));
    const int h = x.dim(0), ww = x.dim(1), cin = x.dim(2);
    const int kh = w.dim(0), kw = w.dim(1), cout = w.dim(3);
    if (w.dim(2) != cin)
        shape_fail("conv2d", x.shape(), w.shape());
    if (kh % 2 == 0 || kw % 2 == 0)
        throw TensorError("conv2d: kernel extents must be odd, got " + shape_str(w.shape()));
    if (bias.defined() && (bias.ndim() != 1 || bias.dim(0) != cout))
        shape_fail("conv2d bias", bias.shape(), w.shape());

    const int64_t hw = static_cast<int64_t>(h) * ww;
    const int64_t kdim = static_cast<int64_t>(kh) * kw * cin;
    const bool pointwise = (kh == 1 && kw == 1);
    bool rg = x.requires_grad() || w.requires_grad() || (bias.defined() && bias.requires_grad());

    Tensor out = make_result({h, ww, cout}, rg);
    double* po = out.mutable_data().data();
    if (bias.defined()) {
        const double* pb = bias.data().data();
        for (int64_t i = 0; i < hw; ++i)
            std::memcpy(po + i * cout, pb, cout * sizeof(double));
    }
    if (pointwise) {
        gemm_acc(hw, cout, cin, x.data().data(), w.data().data(), po);
    } else {
        std::vector<double> col(hw * kdim);
        im2col(x.data().data(), h, ww, cin, kh, kw, col.data());
        gemm_acc(hw, cout, kdim, col.data(), w.data().data(), po);
    }

    if (out.requires_grad()) {
        auto xi = x.impl(), wi = w.impl(), oi = out.impl();
        auto bi = bias.defined() ? bias.impl() : nullptr;
        bool x_rg = x.requires_grad(), w_rg = w.requires_grad();
        bool b_rg = bias.defined() && bias.requires_grad();
        record(oi, [=]() {
            const double* g = oi->grad.data();
            if (b_rg) {
                bi->ensure_grad();
                for (int64_t i = 0; i < hw; ++i)
                    for (int c = 0; c < cout; ++c)
                        bi->grad[c] += g[i * cout + c];
            }
            if (pointwise) {
                if (w_rg) {
                    wi->ensure_grad();
                    gemm_tn_acc(cin, cout, hw, xi->data->data(), g, wi->grad.data());
                }
                if (x_rg) {
                    xi->ensure_grad();
                    gemm_nt_acc(hw, cin, cout, g, wi->data->data(), xi->grad.data());
                }
                return;
            }
            std::vector<double> col(hw * kdim);
            im2col(xi->data->data(), h, ww, cin, kh, kw, col.data());
            if (w_rg) {
                wi->ensure_grad();
                gemm_tn_acc(kdim, cout, hw, col.data(), g, wi->grad.data());
            }
            if (x_rg) {
                xi->ensure_grad();
                std::vector<double> dcol(hw * kdim, 0.0);
                gemm_nt_acc(hw, kdim, cout, g, wi->data->data(), dcol.data());
                col2im_acc(dcol.data(), h, ww, cin, kh, kw, xi->grad.data());
            }
        });
    }
    return out;
}

Tensor depthwise_conv2d(const Tensor& x, const Tensor& w, const Tensor& bias) {
    check_image("depthwise_conv2d", x);
    if (w.ndim() != 3)
        throw TensorError("depthwise_conv2d: expected KH x KW x C weight, got " + shape_str(w.shape()));
    const int h = x.dim(0), ww = x.dim(1), c = x.dim(2);
    const int kh = w.dim(0), kw = w.dim(1);
    if (w.dim(2) != c)
        shape_fail("depthwise_conv2d", x.shape(), w.shape());
    if (kh % 2 == 0 || kw % 2 == 0)
        throw TensorError("depthwise_conv2d: kernel extents must be odd");
    if (bias.defined() && (bias.ndim() != 1 || bias.dim(0) != c))
        shape_fail("depthwise_conv2d bias", bias.shape(), w.shape());

    const int ph = kh / 2, pw = kw / 2;
    bool rg = x.requires_grad() || w.requires_grad() || (bias.defined() && bias.requires_grad());
    Tensor out = make_result({h, ww, c}, rg);
    const double* px = x.data().data();
    const double* pw_ = w.data().data();
    double* po = out.mutable_data().data();
    g_op_macs += static_cast<uint64_t>(h) * ww * c * kh * kw;
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (h * ww * c > 8192)
#endif
    for (int y = 0; y < h; ++y) {
        for (int xx = 0; xx < ww; ++xx) {
            double* dst = po + (static_cast<int64_t>(y) * ww + xx) * c;
            for (int ky = 0; ky < kh; ++ky) {
                const int sy = y + ky - ph;
                if (sy < 0 || sy >= h)
                    continue;
                for (int kx = 0; kx < kw; ++kx) {
                    const int sx = xx + kx - pw;
                    if (sx < 0 || sx >= ww)
                        continue;
                    const double* src = px + (static_cast<int64_t>(sy) * ww + sx) * c;
                    const double* wk = pw_ + (static_cast<int64_t>(ky) * kw + kx) * c;
                    for (int ci = 0; ci < c; ++ci)
                        dst[ci] += src[ci] * wk[ci];
                }
            }
        }
    }
    if (bias.defined()) {
        const double* pb = bias.data().data();
        for (int64_t i = 0; i < static_cast<int64_t>(h) * ww; ++i)
            for (int ci = 0; ci < c; ++ci)
                po[i * c + ci] += pb[ci];
    }

    if (out.requires_grad()) {
        auto xi = x.impl(), wi = w.impl(), oi = out.impl();
        auto bi = bias.defined() ? bias.impl() : nullptr;
        bool x_rg = x.requires_grad(), w_rg = w.requires_grad();
        bool b_rg = bias.defined() && bias.requires_grad();
        record(oi, [=]() {
            const double* g = oi->grad.data();
            const double* pxv = xi->data->data();
            const double* pwv = wi->data->data();
            if (b_rg) {
                bi->ensure_grad();
                for (int64_t i = 0; i < static_cast<int64_t>(h) * ww; ++i)
                    for (int ci = 0; ci < c; ++ci)
                        bi->grad[ci] += g[i * c + ci];
            }
            if (w_rg) {
                wi->ensure_grad();
                for (int ky = 0; ky < kh; ++ky)
                    for (int kx = 0; kx < kw; ++kx) {
                        double* wg = wi->grad.data() + (static_cast<int64_t>(ky) * kw + kx) * c;
                        for (int y = 0; y < h; ++y) {
                            const int sy = y + ky - ph;
                            if (sy < 0 || sy >= h)
                                continue;
                            for (int xx = 0; xx < ww; ++xx) {
                                const int sx = xx + kx - pw;
                                if (sx < 0 || sx >= ww)
                                    continue;
                                const double* go = g + (static_cast<int64_t>(y) * ww + xx) * c;
                                const double* src = pxv + (static_cast<int64_t>(sy) * ww + sx) * c;
                                for (int ci = 0; ci < c; ++ci)
                                    wg[ci] += go[ci] * src[ci];
                            }
                        }
                    }
            }
            if (x_rg) {
                xi->ensure_grad();
                for (int y = 0; y < h; ++y)
                    for (int xx = 0; xx < ww; ++xx) {
                        const double* go = g + (static_cast<int64_t>(y) * ww + xx) * c;
                        for (int ky = 0; ky < kh; ++ky) {
                            const int sy = y + ky - ph;
                            if (sy < 0 || sy >= h)
                                continue;
                            for (int kx = 0; kx < kw; ++kx) {
                                const int sx = xx + kx - pw;
                                if (sx < 0 || sx >= ww)
                                    continue;
                                double* dst = xi->grad.data() + (static_cast<int64_t>(sy) * ww + sx) * c;
                                const double* wk = pwv + (static_cast<int64_t>(ky) * kw + kx) * c;
                                for (int ci = 0; ci < c; ++ci)
                                    dst[ci] += go[ci] * wk[ci];
                            }
                        }
                    }
            }
        });
    }
    return out;
}

Tensor subsample2(const Tensor& x) {
    check_image("subsample2", x);
    const int h = x.dim(0), w = x.dim(1), c = x.dim(2);
    const int oh = (h + 1) / 2, ow = (w + 1) / 2;
    Tensor out = make_result({oh, ow, c}, x.requires_grad());
    const double* px = x.data().data();
    double* po = out.mutable_data().data();
    for (int y = 0; y < oh; ++y)
        for (int xx = 0; xx < ow; ++xx)
            std::memcpy(po + (static_cast<int64_t>(y) * ow + xx) * c,
                        px + (static_cast<int64_t>(2 * y) * w + 2 * xx) * c, c * sizeof(double));
    if (out.requires_grad()) {
        auto xi = x.impl(), oi = out.impl();
        record(oi, [=]() {
            xi->ensure_grad();
            const double* g = oi->grad.data();
            for (int y = 0; y < oh; ++y)
                for (int xx = 0; xx < ow; ++xx) {
                    double* dst = xi->grad.data() + (static_cast<int64_t>(2 * y) * w + 2 * xx) * c;
                    const double* src = g + (static_cast<int64_t>(y) * ow + xx) * c;
                    for (int ci = 0; ci < c; ++ci)
                        dst[ci] += src[ci];
                }
        });
    }
    return out;
}

Tensor upsample_nearest2(const Tensor& x) {
    check_image("upsample_nearest2", x);
    const int h = x.dim(0), w = x.dim(1), c = x.dim(2);
    const int oh = 2 * h, ow = 2 * w;
    Tensor out = make_result({oh, ow, c}, x.requires_grad());
    const double* px = x.data().data();
    double* po = out.mutable_data().data();
    for (int y = 0; y < oh; ++y)
        for (int xx = 0; xx < ow; ++xx)
            std::memcpy(po + (static_cast<int64_t>(y) * ow + xx) * c,
                        px + (static_cast<int64_t>(y / 2) * w + xx / 2) * c, c * sizeof(double));
    if (out.requires_grad()) {
        auto xi = x.impl(), oi = out.impl();
        record(oi, [=]() {
            xi->ensure_grad();
            const double* g = oi->grad.data();
            for (int y = 0; y < oh; ++y)
                for (int xx = 0; xx < ow; ++xx) {
                    double* dst = xi->grad.data() + (static_cast<int64_t>(y / 2) * w + xx / 2) * c;
                    const double* src = g + (static_cast<int64_t>(y) * ow + xx) * c;
                    for (int ci = 0; ci < c; ++ci)
                        dst[ci] += src[ci];
                }
        });
    }
    return out;
}

Tensor bilinear_resize(const Tensor& x, int out_h, int out_w) {
    check_image("bilinear_resize", x);
    if (out_h < 1 || out_w < 1)
        throw TensorError("bilinear_resize: output extents must be positive");
    const int h = x.dim(0), w = x.dim(1), c = x.dim(2);

    // align-corners sampling; identical sizes reproduce the input exactly
    auto axis_map = [](int out_n, int in_n) {
        std::vector<std::tuple<int, int, double>> m(out_n);  // (lo, hi, frac)
        for (int i = 0; i < out_n; ++i) {
            double src = (out_n == 1) ? 0.5 * (in_n - 1)
                                      : static_cast<double>(i) * (in_n - 1) / (out_n - 1);
            int lo = static_cast<int>(std::floor(src));
            lo = std::min(lo, in_n - 1);
            int hi = std::min(lo + 1, in_n - 1);
            m[i] = {lo, hi, src - lo};
        }
        return m;
    };
    auto ymap = axis_map(out_h, h);
    auto xmap = axis_map(out_w, w);

    Tensor out = make_result({out_h, out_w, c}, x.requires_grad());
    const double* px = x.data().data();
    double* po = out.mutable_data().data();
    for (int y = 0; y < out_h; ++y) {
        auto [y0, y1, fy] = ymap[y];
        for (int xx = 0; xx < out_w; ++xx) {
            auto [x0, x1, fx] = xmap[xx];
            const double w00 = (1 - fy) * (1 - fx), w01 = (1 - fy) * fx;
            const double w10 = fy * (1 - fx), w11 = fy * fx;
            double* dst = po + (static_cast<int64_t>(y) * out_w + xx) * c;
            const double* s00 = px + (static_cast<int64_t>(y0) * w + x0) * c;
            const double* s01 = px + (static_cast<int64_t>(y0) * w + x1) * c;
            const double* s10 = px + (static_cast<int64_t>(y1) * w + x0) * c;
            const double* s11 = px + (static_cast<int64_t>(y1) * w + x1) * c;
            for (int ci = 0; ci < c; ++ci)
                dst[ci] = w00 * s00[ci] + w01 * s01[ci] + w10 * s10[ci] + w11 * s11[ci];
        }
    }
    if (out.requires_grad()) {
        auto xi = x.impl(), oi = out.impl();
        record(oi, [=]() {
            xi->ensure_grad();
            const double* g = oi->grad.data();
            for (int y = 0; y < out_h; ++y) {
                auto [y0, y1, fy] = ymap[y];
                for (int xx = 0; xx < out_w; ++xx) {
                    auto [x0, x1, fx] = xmap[xx];
                    const double w00 = (1 - fy) * (1 - fx), w01 = (1 - fy) * fx;
                    const double w10 = fy * (1 - fx), w11 = fy * fx;
                    const double* src = g + (static_cast<int64_t>(y) * out_w + xx) * c;
                    double* d00 = xi->grad.data() + (static_cast<int64_t>(y0) * w + x0) * c;
                    double* d01 = xi->grad.data() + (static_cast<int64_t>(y0) * w + x1) * c;
                    double* d10 = xi->grad.data() + (static_cast<int64_t>(y1) * w + x0) * c;
                    double* d11 = xi->grad.data() + (static_cast<int64_t>(y1) * w + x1) * c;
                    for (int ci = 0; ci < c; ++ci) {
                        d00[ci] += w00 * src[ci];
                        d01[ci] += w01 * src[ci];
                        d10[ci] += w10 * src[ci];
                        d11[ci] += w11 * src[ci];
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Row-structured ops (last axis)

namespace {

std::pair<int64_t, int64_t> row_layout(const char* op, const Tensor& x) {
    if (x.ndim() == 0)
        throw TensorError(std::string(op) + ": rank-0 tensor has no rows");
    const int64_t n = x.shape().back();
    if (n == 0)
        throw TensorError(std::string(op) + ": empty last axis");
    return {x.numel() / n, n};
}

}  // namespace

Tensor layer_norm(const Tensor& x, double eps) {
    auto [rows, n] = row_layout("layer_norm", x);
    Tensor out = make_result(x.shape(), x.requires_grad());
    const double* px = x.data().data();
    double* po = out.mutable_data().data();
    std::vector<double> inv_std(rows);
    for (int64_t r = 0; r < rows; ++r) {
        const double* xr = px + r * n;
        double mean = 0.0;
        for (int64_t i = 0; i < n; ++i)
            mean += xr[i];
        mean /= n;
        double var = 0.0;
        for (int64_t i = 0; i < n; ++i) {
            double d = xr[i] - mean;
            var += d * d;
        }
        var /= n;
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std[r] = is;
        double* yr = po + r * n;
        for (int64_t i = 0; i < n; ++i)
            yr[i] = (xr[i] - mean) * is;
    }
    if (out.requires_grad()) {
        auto xi = x.impl(), oi = out.impl();
        auto rows_c = rows;
        auto n_c = n;
        record(oi, [=, inv = std::move(inv_std)]() {
            xi->ensure_grad();
            const double* g = oi->grad.data();
            const double* y = oi->data->data();
            for (int64_t r = 0; r < rows_c; ++r) {
                const double* gr = g + r * n_c;
                const double* yr = y + r * n_c;
                double mg = 0.0, mgy = 0.0;
                for (int64_t i = 0; i < n_c; ++i) {
                    mg += gr[i];
                    mgy += gr[i] * yr[i];
                }
                mg /= n_c;
                mgy /= n_c;
                double* dst = xi->grad.data() + r * n_c;
                for (int64_t i = 0; i < n_c; ++i)
                    dst[i] += inv[r] * (gr[i] - mg - yr[i] * mgy);
            }
        });
    }
    return out;
}

Tensor softmax_rows(const Tensor& x) {
    auto [rows, n] = row_layout("softmax_rows", x);
    Tensor out = make_result(x.shape(), x.requires_grad());
    const double* px = x.data().data();
    double* po = out.mutable_data().data();
    for (int64_t r = 0; r < rows; ++r) {
        const double* xr = px + r * n;
        double m = xr[0];
        for (int64_t i = 1; i < n; ++i)
            m = std::max(m, xr[i]);
        double sum = 0.0;
        double* yr = po + r * n;
        for (int64_t i = 0; i < n; ++i) {
            yr[i] = std::exp(xr[i] - m);
            sum += yr[i];
        }
        for (int64_t i = 0; i < n; ++i)
            yr[i] /= sum;
    }
    if (out.requires_grad()) {
        auto xi = x.impl(), oi = out.impl();
        auto rows_c = rows;
        auto n_c = n;
        record(oi, [=]() {
            xi->ensure_grad();
            const double* g = oi->grad.data();
            const double* y = oi->data->data();
            for (int64_t r = 0; r < rows_c; ++r) {
                const double* gr = g + r * n_c;
                const double* yr = y + r * n_c;
                double dot = 0.0;
                for (int64_t i = 0; i < n_c; ++i)
                    dot += gr[i] * yr[i];
                double* dst = xi->grad.data() + r * n_c;
                for (int64_t i = 0; i < n_c; ++i)
                    dst[i] += yr[i] * (gr[i] - dot);
            }
        });
    }
    return out;
}

Tensor l2_normalize_rows(const Tensor& x) {
    auto [rows, n] = row_layout("l2_normalize_rows", x);
    Tensor out = make_result(x.shape(), x.requires_grad());
    const double* px = x.data().data();
    double* po = out.mutable_data().data();
    std::vector<double> inv_norm(rows, 0.0);
    for (int64_t r = 0; r < rows; ++r) {
        const double* xr = px + r * n;
        double ss = 0.0;
        for (int64_t i = 0; i < n; ++i)
            ss += xr[i] * xr[i];
        double* yr = po + r * n;
        if (ss == 0.0) {
            ++g_l2_zero_rows;  // zero row stays zero; callers decide severity
            continue;
        }
        const double inv = 1.0 / std::sqrt(ss);
        inv_norm[r] = inv;
        for (int64_t i = 0; i < n; ++i)
            yr[i] = xr[i] * inv;
    }
    if (out.requires_grad()) {
        auto xi = x.impl(), oi = out.impl();
        auto rows_c = rows;
        auto n_c = n;
        record(oi, [=, inv = std::move(inv_norm)]() {
            xi->ensure_grad();
            const double* g = oi->grad.data();
            const double* y = oi->data->data();
            for (int64_t r = 0; r < rows_c; ++r) {
                if (inv[r] == 0.0)
                    continue;
                const double* gr = g + r * n_c;
                const double* yr = y + r * n_c;
                double dot = 0.0;
                for (int64_t i = 0; i < n_c; ++i)
                    dot += gr[i] * yr[i];
                double* dst = xi->grad.data() + r * n_c;
                for (int64_t i = 0; i < n_c; ++i)
                    dst[i] += inv[r] * (gr[i] - yr[i] * dot);
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Reductions

Tensor reduce_sum(const Tensor& x, int axis) {
    const int nd = x.ndim();
    if (axis < 0 || axis >= nd)
        throw TensorError("reduce_sum: axis out of range for " + shape_str(x.shape()));
    Shape out_shape;
    for (int i = 0; i < nd; ++i)
        if (i != axis)
            out_shape.push_back(x.shape()[i]);
    int64_t outer = 1, inner = 1;
    const int64_t ax = x.shape()[axis];
    for (int i = 0; i < axis; ++i)
        outer *= x.shape()[i];
    for (int i = axis + 1; i < nd; ++i)
        inner *= x.shape()[i];
    Tensor out = make_result(out_shape, x.requires_grad());
    const double* px = x.data().data();
    double* po = out.mutable_data().data();
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t a = 0; a < ax; ++a) {
            const double* src = px + (o * ax + a) * inner;
            double* dst = po + o * inner;
            for (int64_t i = 0; i < inner; ++i)
                dst[i] += src[i];
        }
    if (out.requires_grad()) {
        auto xi = x.impl(), oi = out.impl();
        record(oi, [=]() {
            xi->ensure_grad();
            const double* g = oi->grad.data();
            for (int64_t o = 0; o < outer; ++o)
                for (int64_t a = 0; a < ax; ++a) {
                    double* dst = xi->grad.data() + (o * ax + a) * inner;
                    const double* src = g + o * inner;
                    for (int64_t i = 0; i < inner; ++i)
                        dst[i] += src[i];
                }
        });
    }
    return out;
}

Tensor reduce_mean(const Tensor& x, int axis) {
    return mul_scalar(reduce_sum(x, axis), 1.0 / x.shape()[axis]);
}

Tensor sum_all(const Tensor& x) {
    Tensor out = make_result({}, x.requires_grad());
    const double* px = x.data().data();
    double acc = 0.0;
    const int64_t n = x.numel();
    for (int64_t i = 0; i < n; ++i)
        acc += px[i];
    out.mutable_data()[0] = acc;
    if (out.requires_grad()) {
        auto xi = x.impl(), oi = out.impl();
        record(oi, [=]() {
            xi->ensure_grad();
            const double g = oi->grad[0];
            for (int64_t i = 0; i < n; ++i)
                xi->grad[i] += g;
        });
    }
    return out;
}

Tensor mean_all(const Tensor& x) {
    return mul_scalar(sum_all(x), 1.0 / static_cast<double>(x.numel()));
}

// ---------------------------------------------------------------------------
// Composites

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v) {
    if (q.ndim() != 2 || k.ndim() != 2 || v.ndim() != 2 || q.dim(1) != k.dim(1) ||
        k.dim(0) != v.dim(0))
        shape_fail("attention", q.shape(), k.shape());
    const double scale = 1.0 / std::sqrt(static_cast<double>(q.dim(1)));
    Tensor scores = mul_scalar(matmul(q, transpose2d(k)), scale);
    return matmul(softmax_rows(scores), v);
}

Tensor mean_abs_error(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        shape_fail("mean_abs_error", a.shape(), b.shape());
    return mean_all(abs_t(sub(a, b)));
}

// ---------------------------------------------------------------------------
// Finite differences

double finite_difference_check(const std::function<Tensor()>& f, Tensor& x, double eps,
                               int max_coords) {
    if (!x.requires_grad())
        throw TensorError("finite_difference_check: x must require gradients");
    clear_tape();
    x.zero_grad();
    Tensor loss = f();
    if (loss.numel() != 1)
        throw TensorError("finite_difference_check: f must be scalar-valued");
    backward(loss);
    std::vector<double> analytic(x.grad().begin(), x.grad().end());

    const int64_t n = x.numel();
    std::vector<int64_t> coords;
    if (max_coords > 0 && n > max_coords) {
        Rng rng(0x9e3779b97f4a7c15ULL ^ static_cast<uint64_t>(n));
        for (int i = 0; i < max_coords; ++i)
            coords.push_back(rng.uniform_int(0, static_cast<int>(n - 1)));
        std::sort(coords.begin(), coords.end());
        coords.erase(std::unique(coords.begin(), coords.end()), coords.end());
    } else {
        coords.resize(n);
        std::iota(coords.begin(), coords.end(), 0);
    }

    double max_err = 0.0;
    auto data = x.mutable_data();
    NoGradGuard ng;
    for (int64_t i : coords) {
        const double orig = data[i];
        data[i] = orig + eps;
        const double fp = f().value();
        data[i] = orig - eps;
        const double fm = f().value();
        data[i] = orig;
        const double numeric = (fp - fm) / (2.0 * eps);
        if (!std::isfinite(numeric) || !std::isfinite(analytic[i]))
            throw TensorError("finite_difference_check: non-finite value at coordinate " +
                              std::to_string(i));
        const double err =
            std::fabs(analytic[i] - numeric) / (std::fabs(analytic[i]) + std::fabs(numeric) + 1e-12);
        max_err = std::max(max_err, err);
    }
    return max_err;
}

}  // namespace sphir
