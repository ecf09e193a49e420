#include "lcm/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "lcm/errors.hpp"

namespace lcm {

namespace {

thread_local Tape g_tape;
thread_local bool g_grad_enabled = true;

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

std::size_t shape_product(std::span<const std::size_t> shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) {
        n *= d;
    }
    return n;
}

void check_finite(std::span<const double> values, const char* op) {
    for (double v : values) {
        if (!std::isfinite(v)) {
            throw NumericError(std::string(op) + ": produced a non-finite value");
        }
    }
}

detail::NodePtr make_node(std::vector<std::size_t> shape, std::vector<double> data, bool requires_grad) {
    auto node = std::make_shared<detail::TensorNode>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->requires_grad = requires_grad;
    if (requires_grad) {
        node->grad.assign(node->data.size(), 0.0);
    }
    return node;
}

[[noreturn]] void shape_fail(const char* op, std::span<const std::size_t> a, std::span<const std::size_t> b) {
    throw ShapeError(std::string(op) + ": incompatible shapes " + shape_string(a) + " and " + shape_string(b));
}

}  // namespace

std::string shape_string(std::span<const std::size_t> shape) {
    std::ostringstream oss;
    oss << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) oss << "x";
        oss << shape[i];
    }
    oss << "]";
    return oss.str();
}

// Internal constructor used by all ops.
Tensor make_tracked(std::vector<std::size_t> shape, std::vector<double> data, bool requires_grad) {
    if (shape_product(shape) != data.size()) {
        throw ShapeError("tensor: shape " + shape_string(shape) + " does not match " +
                         std::to_string(data.size()) + " values");
    }
    return Tensor(make_node(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::zeros(std::vector<std::size_t> shape, bool requires_grad) {
    std::size_t n = shape_product(shape);
    return make_tracked(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::full(std::vector<std::size_t> shape, double value, bool requires_grad) {
    std::size_t n = shape_product(shape);
    return make_tracked(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from_values(std::vector<std::size_t> shape, std::vector<double> values, bool requires_grad) {
    return make_tracked(std::move(shape), std::move(values), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return make_tracked({}, {value}, requires_grad);
}

std::size_t Tensor::rows() const {
    if (rank() != 2) {
        throw ShapeError("rows(): tensor is not 2-D, shape " + shape_string(shape()));
    }
    return node_->shape[0];
}

std::size_t Tensor::cols() const {
    if (rank() != 2) {
        throw ShapeError("cols(): tensor is not 2-D, shape " + shape_string(shape()));
    }
    return node_->shape[1];
}

std::span<const double> Tensor::grad() const {
    if (!node_->requires_grad) {
        throw NumericError("grad(): tensor does not require grad");
    }
    return node_->grad;
}

std::span<double> Tensor::raw_grad() {
    if (!node_->requires_grad) {
        throw NumericError("raw_grad(): tensor does not require grad");
    }
    return node_->grad;
}

double Tensor::value() const {
    if (size() != 1) {
        throw ShapeError("value(): tensor is not scalar, shape " + shape_string(shape()));
    }
    return node_->data[0];
}

double Tensor::at(std::size_t r, std::size_t c) const {
    return node_->data[r * cols() + c];
}

double Tensor::grad_at(std::size_t r, std::size_t c) const {
    return grad()[r * cols() + c];
}

// ---- tape ------------------------------------------------------------------

Tape& Tape::active() { return g_tape; }

bool Tape::recording() const { return g_grad_enabled; }

void Tape::record(std::function<void()> backward, std::vector<detail::NodePtr> touched) {
    entries_.push_back(std::move(backward));
    for (auto& node : touched) {
        touched_.push_back(std::move(node));
    }
}

void Tape::backward(const Tensor& loss) {
    if (loss.size() != 1) {
        throw NumericError("backward: loss must be scalar, got shape " + shape_string(loss.shape()));
    }
    if (entries_.empty()) {
        throw NumericError("backward: tape is empty");
    }
    if (backward_done_) {
        throw NumericError("backward: called twice without clearing the tape");
    }
    if (!loss.requires_grad()) {
        throw NumericError("backward: loss does not require grad");
    }
    loss.node()->grad[0] = 1.0;
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
        (*it)();
    }
    backward_done_ = true;
}

void Tape::clear() {
    for (auto& node : touched_) {
        if (node->requires_grad) {
            std::fill(node->grad.begin(), node->grad.end(), 0.0);
        }
    }
    entries_.clear();
    touched_.clear();
    backward_done_ = false;
}

void backward(const Tensor& loss) { Tape::active().backward(loss); }

NoGradScope::NoGradScope() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradScope::~NoGradScope() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

// ---- op helpers -------------------------------------------------------------

namespace {

bool track(const Tensor& a) { return g_grad_enabled && a.requires_grad(); }

Tensor make_output(std::vector<std::size_t> shape, std::vector<double> data, bool tracked, const char* op) {
    check_finite(data, op);
    return make_tracked(std::move(shape), std::move(data), tracked);
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        shape_fail(op, a.shape(), b.shape());
    }
}

}  // namespace

// ---- elementwise ------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    const std::size_t n = a.size();
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        out[i] = a.data()[i] + b.data()[i];
    }
    bool tracked = track(a) || track(b);
    Tensor result = make_output(a.shape(), std::move(out), tracked, "add");
    if (tracked) {
        auto an = a.node(), bn = b.node(), on = result.node();
        Tape::active().record(
            [an, bn, on] {
                const auto& go = on->grad;
                if (an->requires_grad) {
                    for (std::size_t i = 0; i < go.size(); ++i) an->grad[i] += go[i];
                }
                if (bn->requires_grad) {
                    for (std::size_t i = 0; i < go.size(); ++i) bn->grad[i] += go[i];
                }
            },
            {an, bn, on});
    }
    return result;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    const std::size_t n = a.size();
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        out[i] = a.data()[i] - b.data()[i];
    }
    bool tracked = track(a) || track(b);
    Tensor result = make_output(a.shape(), std::move(out), tracked, "sub");
    if (tracked) {
        auto an = a.node(), bn = b.node(), on = result.node();
        Tape::active().record(
            [an, bn, on] {
                const auto& go = on->grad;
                if (an->requires_grad) {
                    for (std::size_t i = 0; i < go.size(); ++i) an->grad[i] += go[i];
                }
                if (bn->requires_grad) {
                    for (std::size_t i = 0; i < go.size(); ++i) bn->grad[i] -= go[i];
                }
            },
            {an, bn, on});
    }
    return result;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    const std::size_t n = a.size();
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        out[i] = a.data()[i] * b.data()[i];
    }
    bool tracked = track(a) || track(b);
    Tensor result = make_output(a.shape(), std::move(out), tracked, "mul");
    if (tracked) {
        auto an = a.node(), bn = b.node(), on = result.node();
        Tape::active().record(
            [an, bn, on] {
                const auto& go = on->grad;
                if (an->requires_grad) {
                    for (std::size_t i = 0; i < go.size(); ++i) an->grad[i] += go[i] * bn->data[i];
                }
                if (bn->requires_grad) {
                    for (std::size_t i = 0; i < go.size(); ++i) bn->grad[i] += go[i] * an->data[i];
                }
            },
            {an, bn, on});
    }
    return result;
}

Tensor scale(const Tensor& a, double factor) {
    const std::size_t n = a.size();
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        out[i] = a.data()[i] * factor;
    }
    bool tracked = track(a);
    Tensor result = make_output(a.shape(), std::move(out), tracked, "scale");
    if (tracked) {
        auto an = a.node(), on = result.node();
        Tape::active().record(
            [an, on, factor] {
                for (std::size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += factor * on->grad[i];
            },
            {an, on});
    }
    return result;
}

// ---- matmul / transpose ------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows()) {
        shape_fail("matmul", a.shape(), b.shape());
    }
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    std::vector<double> out(m * n, 0.0);
    const double* ad = a.data().data();
    const double* bd = b.data().data();
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
            const double av = ad[i * k + p];
            const double* brow = bd + p * n;
            double* orow = out.data() + i * n;
            for (std::size_t j = 0; j < n; ++j) {
                orow[j] += av * brow[j];
            }
        }
    }
    bool tracked = track(a) || track(b);
    Tensor result = make_output({m, n}, std::move(out), tracked, "matmul");
    if (tracked) {
        auto an = a.node(), bn = b.node(), on = result.node();
        Tape::active().record(
            [an, bn, on, m, k, n] {
                const double* go = on->grad.data();
                if (an->requires_grad) {
                    // dA = dC * B^T
                    double* ga = an->grad.data();
                    const double* bd2 = bn->data.data();
                    for (std::size_t i = 0; i < m; ++i) {
                        for (std::size_t p = 0; p < k; ++p) {
                            double acc = 0.0;
                            const double* grow = go + i * n;
                            const double* brow = bd2 + p * n;
                            for (std::size_t j = 0; j < n; ++j) {
                                acc += grow[j] * brow[j];
                            }
                            ga[i * k + p] += acc;
                        }
                    }
                }
                if (bn->requires_grad) {
                    // dB = A^T * dC
                    double* gb = bn->grad.data();
                    const double* ad2 = an->data.data();
                    for (std::size_t i = 0; i < m; ++i) {
                        for (std::size_t p = 0; p < k; ++p) {
                            const double av = ad2[i * k + p];
                            const double* grow = go + i * n;
                            double* gbrow = gb + p * n;
                            for (std::size_t j = 0; j < n; ++j) {
                                gbrow[j] += av * grow[j];
                            }
                        }
                    }
                }
            },
            {an, bn, on});
    }
    return result;
}

Tensor transpose(const Tensor& a) {
    if (a.rank() != 2) {
        throw ShapeError("transpose: tensor is not 2-D, shape " + shape_string(a.shape()));
    }
    const std::size_t r = a.rows(), c = a.cols();
    std::vector<double> out(r * c);
    for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) {
            out[j * r + i] = a.data()[i * c + j];
        }
    }
    bool tracked = track(a);
    Tensor result = make_output({c, r}, std::move(out), tracked, "transpose");
    if (tracked) {
        auto an = a.node(), on = result.node();
        Tape::active().record(
            [an, on, r, c] {
                for (std::size_t i = 0; i < r; ++i) {
                    for (std::size_t j = 0; j < c; ++j) {
                        an->grad[i * c + j] += on->grad[j * r + i];
                    }
                }
            },
            {an, on});
    }
    return result;
}

// ---- softmax ------------------------------------------------------------------

namespace {

struct AxisView {
    std::size_t slices, len, slice_stride, elem_stride;
};

// Iterate a 1-D/2-D tensor as `slices` independent vectors along `axis`.
AxisView axis_view(const Tensor& x, std::size_t axis, const char* op) {
    if (x.rank() == 1) {
        if (axis != 0) {
            throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) +
                             " out of range for shape " + shape_string(x.shape()));
        }
        return {1, x.size(), 0, 1};
    }
    if (x.rank() != 2 || axis > 1) {
        throw ShapeError(std::string(op) + ": unsupported axis " + std::to_string(axis) +
                         " for shape " + shape_string(x.shape()));
    }
    if (axis == 1) {
        return {x.rows(), x.cols(), x.cols(), 1};
    }
    return {x.cols(), x.rows(), 1, x.cols()};
}

}  // namespace

Tensor softmax(const Tensor& x, std::size_t axis) {
    const AxisView v = axis_view(x, axis, "softmax");
    std::vector<double> out(x.size());
    const double* xd = x.data().data();
    for (std::size_t s = 0; s < v.slices; ++s) {
        const std::size_t base = s * v.slice_stride;
        double mx = xd[base];
        for (std::size_t i = 1; i < v.len; ++i) {
            mx = std::max(mx, xd[base + i * v.elem_stride]);
        }
        double denom = 0.0;
        for (std::size_t i = 0; i < v.len; ++i) {
            const double e = std::exp(xd[base + i * v.elem_stride] - mx);
            out[base + i * v.elem_stride] = e;
            denom += e;
        }
        for (std::size_t i = 0; i < v.len; ++i) {
            out[base + i * v.elem_stride] /= denom;
        }
    }
    bool tracked = track(x);
    Tensor result = make_output(x.shape(), std::move(out), tracked, "softmax");
    if (tracked) {
        auto xn = x.node(), on = result.node();
        Tape::active().record(
            [xn, on, v] {
                const double* y = on->data.data();
                const double* go = on->grad.data();
                for (std::size_t s = 0; s < v.slices; ++s) {
                    const std::size_t base = s * v.slice_stride;
                    double dot = 0.0;
                    for (std::size_t i = 0; i < v.len; ++i) {
                        const std::size_t idx = base + i * v.elem_stride;
                        dot += go[idx] * y[idx];
                    }
                    for (std::size_t i = 0; i < v.len; ++i) {
                        const std::size_t idx = base + i * v.elem_stride;
                        xn->grad[idx] += y[idx] * (go[idx] - dot);
                    }
                }
            },
            {xn, on});
    }
    return result;
}

// ---- layer norm ----------------------------------------------------------------

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
    constexpr double kEps = 1e-5;
    const std::size_t dim = x.rank() == 1 ? x.size() : x.cols();
    const std::size_t rows = x.rank() == 1 ? 1 : x.rows();
    if (x.rank() > 2 || gain.size() != dim || bias.size() != dim) {
        throw ShapeError("layer_norm: x " + shape_string(x.shape()) + ", gain " +
                         shape_string(gain.shape()) + ", bias " + shape_string(bias.shape()));
    }
    std::vector<double> out(x.size());
    std::vector<double> xhat(x.size());
    std::vector<double> inv_std(rows);
    const double* xd = x.data().data();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = xd + r * dim;
        double mu = 0.0;
        for (std::size_t j = 0; j < dim; ++j) mu += row[j];
        mu /= static_cast<double>(dim);
        double var = 0.0;
        for (std::size_t j = 0; j < dim; ++j) {
            const double d = row[j] - mu;
            var += d * d;
        }
        var /= static_cast<double>(dim);
        const double is = 1.0 / std::sqrt(var + kEps);
        inv_std[r] = is;
        for (std::size_t j = 0; j < dim; ++j) {
            const double h = (row[j] - mu) * is;
            xhat[r * dim + j] = h;
            out[r * dim + j] = h * gain.data()[j] + bias.data()[j];
        }
    }
    bool tracked = track(x) || track(gain) || track(bias);
    Tensor result = make_output(x.shape(), std::move(out), tracked, "layer_norm");
    if (tracked) {
        auto xn = x.node(), gn = gain.node(), bn = bias.node(), on = result.node();
        auto xh = std::make_shared<std::vector<double>>(std::move(xhat));
        auto is = std::make_shared<std::vector<double>>(std::move(inv_std));
        Tape::active().record(
            [xn, gn, bn, on, xh, is, rows, dim] {
                const double* go = on->grad.data();
                for (std::size_t r = 0; r < rows; ++r) {
                    const double* grow = go + r * dim;
                    const double* hrow = xh->data() + r * dim;
                    if (gn->requires_grad) {
                        for (std::size_t j = 0; j < dim; ++j) gn->grad[j] += grow[j] * hrow[j];
                    }
                    if (bn->requires_grad) {
                        for (std::size_t j = 0; j < dim; ++j) bn->grad[j] += grow[j];
                    }
                    if (xn->requires_grad) {
                        double mean_dh = 0.0, mean_dh_h = 0.0;
                        for (std::size_t j = 0; j < dim; ++j) {
                            const double dh = grow[j] * gn->data[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hrow[j];
                        }
                        mean_dh /= static_cast<double>(dim);
                        mean_dh_h /= static_cast<double>(dim);
                        for (std::size_t j = 0; j < dim; ++j) {
                            const double dh = grow[j] * gn->data[j];
                            xn->grad[r * dim + j] +=
                                (*is)[r] * (dh - mean_dh - hrow[j] * mean_dh_h);
                        }
                    }
                }
            },
            {xn, gn, bn, on});
    }
    return result;
}

// ---- activations ----------------------------------------------------------------

Tensor gelu(const Tensor& x) {
    const std::size_t n = x.size();
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double v = x.data()[i];
        out[i] = 0.5 * v * (1.0 + std::erf(v * kInvSqrt2));
    }
    bool tracked = track(x);
    Tensor result = make_output(x.shape(), std::move(out), tracked, "gelu");
    if (tracked) {
        auto xn = x.node(), on = result.node();
        Tape::active().record(
            [xn, on] {
                for (std::size_t i = 0; i < on->grad.size(); ++i) {
                    const double v = xn->data[i];
                    const double phi = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
                    const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
                    xn->grad[i] += on->grad[i] * (phi + v * pdf);
                }
            },
            {xn, on});
    }
    return result;
}

Tensor relu(const Tensor& x) {
    const std::size_t n = x.size();
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        out[i] = x.data()[i] > 0.0 ? x.data()[i] : 0.0;
    }
    bool tracked = track(x);
    Tensor result = make_output(x.shape(), std::move(out), tracked, "relu");
    if (tracked) {
        auto xn = x.node(), on = result.node();
        Tape::active().record(
            [xn, on] {
                for (std::size_t i = 0; i < on->grad.size(); ++i) {
                    if (xn->data[i] > 0.0) xn->grad[i] += on->grad[i];
                }
            },
            {xn, on});
    }
    return result;
}

// ---- broadcast / reshape-style ops -----------------------------------------------

Tensor add_row_broadcast(const Tensor& x, const Tensor& bias) {
    if (x.rank() != 2 || bias.rank() != 1 || bias.size() != x.cols()) {
        shape_fail("add_row_broadcast", x.shape(), bias.shape());
    }
    const std::size_t r = x.rows(), c = x.cols();
    std::vector<double> out(r * c);
    for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) {
            out[i * c + j] = x.data()[i * c + j] + bias.data()[j];
        }
    }
    bool tracked = track(x) || track(bias);
    Tensor result = make_output({r, c}, std::move(out), tracked, "add_row_broadcast");
    if (tracked) {
        auto xn = x.node(), bn = bias.node(), on = result.node();
        Tape::active().record(
            [xn, bn, on, r, c] {
                if (xn->requires_grad) {
                    for (std::size_t i = 0; i < r * c; ++i) xn->grad[i] += on->grad[i];
                }
                if (bn->requires_grad) {
                    for (std::size_t i = 0; i < r; ++i) {
                        for (std::size_t j = 0; j < c; ++j) bn->grad[j] += on->grad[i * c + j];
                    }
                }
            },
            {xn, bn, on});
    }
    return result;
}

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end) {
    if (x.rank() < 1 || x.rank() > 2 || begin >= end || end > x.shape()[0]) {
        throw ShapeError("slice_rows: rows [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") invalid for shape " + shape_string(x.shape()));
    }
    if (x.rank() == 1) {
        const std::size_t n = end - begin;
        std::vector<double> out(x.data().begin() + static_cast<std::ptrdiff_t>(begin),
                                x.data().begin() + static_cast<std::ptrdiff_t>(end));
        bool tracked = track(x);
        Tensor result = make_output({n}, std::move(out), tracked, "slice_rows");
        if (tracked) {
            auto xn = x.node(), on = result.node();
            Tape::active().record(
                [xn, on, begin, n] {
                    for (std::size_t i = 0; i < n; ++i) xn->grad[begin + i] += on->grad[i];
                },
                {xn, on});
        }
        return result;
    }
    const std::size_t c = x.cols(), n = end - begin;
    std::vector<double> out(x.data().begin() + static_cast<std::ptrdiff_t>(begin * c),
                            x.data().begin() + static_cast<std::ptrdiff_t>(end * c));
    bool tracked = track(x);
    Tensor result = make_output({n, c}, std::move(out), tracked, "slice_rows");
    if (tracked) {
        auto xn = x.node(), on = result.node();
        Tape::active().record(
            [xn, on, begin, c, n] {
                for (std::size_t i = 0; i < n * c; ++i) {
                    xn->grad[begin * c + i] += on->grad[i];
                }
            },
            {xn, on});
    }
    return result;
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
    if (parts.empty()) {
        throw ShapeError("concat: no inputs");
    }
    if (axis > 1) {
        throw ShapeError("concat: unsupported axis " + std::to_string(axis));
    }
    if (parts[0].rank() == 1) {
        if (axis != 0) {
            throw ShapeError("concat: axis 1 invalid for 1-D inputs");
        }
        std::size_t total = 0;
        for (const auto& p : parts) {
            if (p.rank() != 1) shape_fail("concat", parts[0].shape(), p.shape());
            total += p.size();
        }
        std::vector<double> out;
        out.reserve(total);
        bool tracked = false;
        for (const auto& p : parts) {
            out.insert(out.end(), p.data().begin(), p.data().end());
            tracked = tracked || track(p);
        }
        Tensor result = make_output({total}, std::move(out), tracked, "concat");
        if (tracked) {
            std::vector<detail::NodePtr> nodes;
            for (const auto& p : parts) nodes.push_back(p.node());
            auto on = result.node();
            auto touched = nodes;
            touched.push_back(on);
            Tape::active().record(
                [nodes, on] {
                    std::size_t off = 0;
                    for (const auto& node : nodes) {
                        if (node->requires_grad) {
                            for (std::size_t i = 0; i < node->data.size(); ++i) {
                                node->grad[i] += on->grad[off + i];
                            }
                        }
                        off += node->data.size();
                    }
                },
                std::move(touched));
        }
        return result;
    }

    const std::size_t fixed = axis == 0 ? parts[0].cols() : parts[0].rows();
    std::size_t total = 0;
    bool tracked = false;
    for (const auto& p : parts) {
        if (p.rank() != 2 || (axis == 0 ? p.cols() : p.rows()) != fixed) {
            shape_fail("concat", parts[0].shape(), p.shape());
        }
        total += axis == 0 ? p.rows() : p.cols();
        tracked = tracked || track(p);
    }
    const std::size_t out_rows = axis == 0 ? total : fixed;
    const std::size_t out_cols = axis == 0 ? fixed : total;
    std::vector<double> out(out_rows * out_cols);
    std::size_t off = 0;
    for (const auto& p : parts) {
        if (axis == 0) {
            std::copy(p.data().begin(), p.data().end(), out.begin() + static_cast<std::ptrdiff_t>(off * out_cols));
            off += p.rows();
        } else {
            for (std::size_t i = 0; i < fixed; ++i) {
                std::copy(p.data().begin() + static_cast<std::ptrdiff_t>(i * p.cols()),
                          p.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * p.cols()),
                          out.begin() + static_cast<std::ptrdiff_t>(i * out_cols + off));
            }
            off += p.cols();
        }
    }
    Tensor result = make_output({out_rows, out_cols}, std::move(out), tracked, "concat");
    if (tracked) {
        std::vector<detail::NodePtr> nodes;
        for (const auto& p : parts) nodes.push_back(p.node());
        auto on = result.node();
        auto touched = nodes;
        touched.push_back(on);
        Tape::active().record(
            [nodes, on, axis, out_cols, fixed] {
                std::size_t pos = 0;
                for (const auto& node : nodes) {
                    const std::size_t pr = node->shape[0], pc = node->shape[1];
                    if (node->requires_grad) {
                        if (axis == 0) {
                            for (std::size_t i = 0; i < pr * pc; ++i) {
                                node->grad[i] += on->grad[pos * out_cols + i];
                            }
                        } else {
                            for (std::size_t i = 0; i < fixed; ++i) {
                                for (std::size_t j = 0; j < pc; ++j) {
                                    node->grad[i * pc + j] += on->grad[i * out_cols + pos + j];
                                }
                            }
                        }
                    }
                    pos += axis == 0 ? pr : pc;
                }
            },
            std::move(touched));
    }
    return result;
}

Tensor reshape(const Tensor& x, std::vector<std::size_t> shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    if (n != x.size()) {
        throw ShapeError("reshape: " + shape_string(x.shape()) + " has " + std::to_string(x.size()) +
                         " elements, target " + shape_string(shape) + " has " + std::to_string(n));
    }
    std::vector<double> out(x.data().begin(), x.data().end());
    bool tracked = track(x);
    Tensor result = make_output(std::move(shape), std::move(out), tracked, "reshape");
    if (tracked) {
        auto xn = x.node(), on = result.node();
        Tape::active().record(
            [xn, on] {
                for (std::size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += on->grad[i];
            },
            {xn, on});
    }
    return result;
}

// ---- reductions -------------------------------------------------------------------

Tensor sum(const Tensor& x) {
    double acc = 0.0;
    for (double v : x.data()) acc += v;
    bool tracked = track(x);
    Tensor result = make_output({}, {acc}, tracked, "sum");
    if (tracked) {
        auto xn = x.node(), on = result.node();
        Tape::active().record(
            [xn, on] {
                const double g = on->grad[0];
                for (auto& gx : xn->grad) gx += g;
            },
            {xn, on});
    }
    return result;
}

Tensor mean(const Tensor& x) {
    if (x.size() == 0) {
        throw ShapeError("mean: empty tensor");
    }
    double acc = 0.0;
    for (double v : x.data()) acc += v;
    const double inv = 1.0 / static_cast<double>(x.size());
    bool tracked = track(x);
    Tensor result = make_output({}, {acc * inv}, tracked, "mean");
    if (tracked) {
        auto xn = x.node(), on = result.node();
        Tape::active().record(
            [xn, on, inv] {
                const double g = on->grad[0] * inv;
                for (auto& gx : xn->grad) gx += g;
            },
            {xn, on});
    }
    return result;
}

// ---- losses -----------------------------------------------------------------------

Tensor cross_entropy_with_logits(const Tensor& logits, std::size_t target) {
    const std::size_t n = logits.size();
    if (n == 0 || target >= n) {
        throw ShapeError("cross_entropy_with_logits: target " + std::to_string(target) +
                         " out of range for " + std::to_string(n) + " logits");
    }
    const double* xd = logits.data().data();
    double mx = xd[0];
    for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, xd[i]);
    double denom = 0.0;
    for (std::size_t i = 0; i < n; ++i) denom += std::exp(xd[i] - mx);
    const double loss = mx + std::log(denom) - xd[target];
    bool tracked = track(logits);
    Tensor result = make_output({}, {loss}, tracked, "cross_entropy_with_logits");
    if (tracked) {
        auto xn = logits.node(), on = result.node();
        Tape::active().record(
            [xn, on, target, mx, denom, n] {
                const double g = on->grad[0];
                for (std::size_t i = 0; i < n; ++i) {
                    const double p = std::exp(xn->data[i] - mx) / denom;
                    xn->grad[i] += g * (p - (i == target ? 1.0 : 0.0));
                }
            },
            {xn, on});
    }
    return result;
}

Tensor mse(const Tensor& pred, const Tensor& target) {
    require_same_shape(pred, target, "mse");
    const std::size_t n = pred.size();
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = pred.data()[i] - target.data()[i];
        acc += d * d;
    }
    const double inv = 1.0 / static_cast<double>(n);
    bool tracked = track(pred) || track(target);
    Tensor result = make_output({}, {acc * inv}, tracked, "mse");
    if (tracked) {
        auto pn = pred.node(), tn = target.node(), on = result.node();
        Tape::active().record(
            [pn, tn, on, inv, n] {
                const double g = 2.0 * inv * on->grad[0];
                for (std::size_t i = 0; i < n; ++i) {
                    const double d = pn->data[i] - tn->data[i];
                    if (pn->requires_grad) pn->grad[i] += g * d;
                    if (tn->requires_grad) tn->grad[i] -= g * d;
                }
            },
            {pn, tn, on});
    }
    return result;
}

}  // namespace lcm
