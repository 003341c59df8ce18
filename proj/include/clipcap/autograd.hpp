#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major double
// matrices. Every op builds a node holding its value and a closure that
// propagates the incoming gradient to its parents. When gradient recording is
// disabled (NoGradGuard) ops return plain constants and no graph is built.

#include <Eigen/Dense>

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <vector>

namespace clipcap::ag {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic>;
using Index = Eigen::Index;

struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    Matrix& grad_buffer() {
        if (grad.size() == 0) grad = Matrix::Zero(value.rows(), value.cols());
        return grad;
    }
};

class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

    const Matrix& value() const { return node_->value; }
    Matrix& mutable_value() { return node_->value; }
    // Empty (0x0) until a backward pass reaches this node.
    const Matrix& grad() const { return node_->grad; }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    bool defined() const noexcept { return static_cast<bool>(node_); }

    Index rows() const { return node_->value.rows(); }
    Index cols() const { return node_->value.cols(); }
    double item() const { return node_->value(0, 0); }

    // Seeds d(this)/d(this) = 1 and propagates through the recorded graph.
    // Only valid on 1x1 values.
    void backward() const;
    void zero_grad() const { node_->grad.resize(0, 0); }

    const std::shared_ptr<Node>& node() const noexcept { return node_; }

private:
    std::shared_ptr<Node> node_;
};

bool grad_enabled() noexcept;

class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

Var constant(Matrix value);
Var constant_scalar(double value);
// Leaf that accumulates gradients.
Var parameter(Matrix value);

// Elementwise and linear algebra.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var add_row(const Var& a, const Var& row);  // broadcast a 1 x n row over every row of a
Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);

Var tanh(const Var& a);
Var sigmoid(const Var& a);
Var gelu(const Var& a);  // tanh approximation
Var log(const Var& a);

// Reductions and reshaping.
Var sum(const Var& a);
Var mean(const Var& a);
Var mean_rows(const Var& a);  // n x d -> 1 x d
Var slice_rows(const Var& a, Index start, Index count);
Var concat_rows(std::span<const Var> parts);
Var shift_down(const Var& a);  // out[i] = a[i-1], out[0] = 0
Var gather_rows(const Var& table, std::span<const int> ids);
Var select_cols(const Var& a, std::span<const int> cols);  // out[i] = a(i, cols[i]), n x 1
Var diagonal(const Var& a);                                 // n x 1

// Row-wise normalizations.
Var log_softmax_rows(const Var& a);
Var l2_normalize_rows(const Var& a);
Var layer_norm_rows(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);

// Fused multi-head scaled dot-product attention. q is Tq x d, k and v are
// Tk x d; d must divide evenly by n_heads. With causal set, query i attends
// to keys 0..i only (requires Tq == Tk).
Var multi_head_attention(const Var& q, const Var& k, const Var& v, int n_heads, bool causal);

}  // namespace clipcap::ag
