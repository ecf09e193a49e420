#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace lcm {

// Dense row-major 64-bit tensor with reverse-mode differentiation.
//
// Tensor is a cheap handle onto a shared node; ops are free functions that
// compute the forward value eagerly and push a backward closure onto the
// thread-local Tape (define-by-run, the tape is rebuilt every forward pass).
// Replaying the tape in reverse execution order visits every node after all
// of its consumers, so no explicit topological sort is needed.

namespace detail {

struct TensorNode {
    std::vector<std::size_t> shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad;  // same length as data when requires_grad

    std::size_t size() const { return data.size(); }
};

using NodePtr = std::shared_ptr<TensorNode>;

}  // namespace detail

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(std::vector<std::size_t> shape, bool requires_grad = false);
    static Tensor full(std::vector<std::size_t> shape, double value, bool requires_grad = false);
    static Tensor from_values(std::vector<std::size_t> shape, std::vector<double> values,
                              bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const std::vector<std::size_t>& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t size() const { return node_->data.size(); }
    std::size_t rows() const;
    std::size_t cols() const;

    bool requires_grad() const { return node_->requires_grad; }

    std::span<const double> data() const { return node_->data; }
    std::span<const double> grad() const;

    // Direct mutation for initialization and optimizer updates; never
    // recorded on the tape.
    std::span<double> raw_data() { return node_->data; }
    std::span<double> raw_grad();

    double value() const;                          // scalar tensors
    double at(std::size_t r, std::size_t c) const; // 2-D tensors
    double grad_at(std::size_t r, std::size_t c) const;

    detail::NodePtr node() const { return node_; }

private:
    explicit Tensor(detail::NodePtr node) : node_(std::move(node)) {}
    detail::NodePtr node_;

    friend Tensor make_tracked(std::vector<std::size_t>, std::vector<double>, bool);
};

// Thread-local recording of executed operations. One tape per training run;
// clear() resets every touched gradient accumulator to zero and allows the
// next backward().
class Tape {
public:
    static Tape& active();

    // Registers a backward closure together with the nodes it touches.
    // Public so test fixtures can register deliberately wrong rules.
    void record(std::function<void()> backward, std::vector<detail::NodePtr> touched);

    // Seeds d(loss)/d(loss) = 1 and replays closures in reverse order.
    // Errors if loss is not scalar, the tape is empty, or backward already
    // ran since the last clear().
    void backward(const Tensor& loss);

    void clear();

    std::size_t size() const { return entries_.size(); }
    bool recording() const;

private:
    std::vector<std::function<void()>> entries_;
    std::vector<detail::NodePtr> touched_;
    bool backward_done_ = false;
};

// Disables recording (and gradient propagation) within a scope; used for
// evaluation passes and finite-difference probes.
class NoGradScope {
public:
    NoGradScope();
    ~NoGradScope();
    NoGradScope(const NoGradScope&) = delete;
    NoGradScope& operator=(const NoGradScope&) = delete;

private:
    bool previous_;
};

bool grad_enabled();

// ---- operations -----------------------------------------------------------
// Every op validates shapes, checks the result for NaN/Inf, and registers
// its backward rule when recording is enabled and an input requires grad.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // elementwise
Tensor scale(const Tensor& a, double factor);
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

// Softmax along `axis` of a 1-D or 2-D tensor, stabilized by max-subtraction.
Tensor softmax(const Tensor& x, std::size_t axis);

// Row-wise normalization over the last dimension (epsilon 1e-5), then affine.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias);

Tensor gelu(const Tensor& x);
Tensor relu(const Tensor& x);

// x: R×C, bias: length-C vector broadcast over rows.
Tensor add_row_broadcast(const Tensor& x, const Tensor& bias);

// Slices leading-dimension entries [begin, end) of a 1-D or 2-D tensor.
Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor reshape(const Tensor& x, std::vector<std::size_t> shape);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// Numerically stable -log softmax(logits)[target] for a 1-D logits vector.
Tensor cross_entropy_with_logits(const Tensor& logits, std::size_t target);

// Mean squared error between two tensors of identical shape.
Tensor mse(const Tensor& pred, const Tensor& target);

// Convenience: backward on the active tape.
void backward(const Tensor& loss);

std::string shape_string(std::span<const std::size_t> shape);

}  // namespace lcm
