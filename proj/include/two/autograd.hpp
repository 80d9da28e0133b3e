// Copyright (c) 2026 two contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <memory>
#include <vector>

#include <Eigen/Dense>

namespace two::ag {

using Matrix = Eigen::MatrixXd;

// Reverse-mode autodiff over dense double matrices. Graphs are built eagerly:
// each op computes its value on construction and records how to push gradients
// into its inputs. Nodes own their inputs via shared_ptr, so releasing the
// loss root frees the graph while externally held parameters survive.
struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backward_fn;
};

using Value = std::shared_ptr<Node>;

Value constant(Matrix v);
Value param(Matrix v);

// a (n x m) * b (m x p)
Value matmul(const Value& a, const Value& b);
// a (n x m) * b^T (p x m) -> n x p
Value matmul_nt(const Value& a, const Value& b);
Value add(const Value& a, const Value& b);
// broadcast row (1 x m) over every row of a (n x m)
Value add_rowvec(const Value& a, const Value& row);
// constant elementwise offset, e.g. an attention mask
Value add_const(const Value& a, const Matrix& m);
Value scale(const Value& a, double s);
Value relu(const Value& a);
Value softmax_rows(const Value& a);
Value layer_norm_rows(const Value& x, const Value& gain, const Value& bias, double eps = 1e-5);
Value concat_rows(const std::vector<Value>& parts);
Value concat_cols(const std::vector<Value>& parts);
Value slice_rows(const Value& a, Eigen::Index start, Eigen::Index count);
Value slice_cols(const Value& a, Eigen::Index start, Eigen::Index count);
// gather table rows by id; gradients scatter-add back
Value embedding_rows(const Value& table, const std::vector<int>& ids);
// scalar: sum over rows r of -log softmax(logits)[r, targets[r]], / divisor
Value cross_entropy_rows(const Value& logits, const std::vector<int>& targets, double divisor);
// scalar: sum over rows r of -log probs[r, targets[r]], / divisor
Value picked_neg_log(const Value& probs, const std::vector<int>& targets, double divisor);

// Accumulates gradients from a 1x1 root into every reachable requires_grad
// node. Callers zero parameter grads between steps.
void backward(const Value& root);

}  // namespace two::ag
