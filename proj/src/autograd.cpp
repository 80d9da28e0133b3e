// Copyright (c) 2026 two contributors
// SPDX-License-Identifier: Apache-2.0

#include "two/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace two::ag {

namespace {

Value make_node(Matrix value, std::vector<Value> inputs, std::function<void(Node&)> backward_fn) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->grad = Matrix::Zero(n->value.rows(), n->value.cols());
    n->inputs = std::move(inputs);
    n->requires_grad = false;
    for (const auto& in : n->inputs)
        if (in->requires_grad) n->requires_grad = true;
    if (n->requires_grad) n->backward_fn = std::move(backward_fn);
    return n;
}

void check(bool ok, const char* msg) {
    if (!ok) throw std::invalid_argument(msg);
}

}  // namespace

Value constant(Matrix v) {
    auto n = std::make_shared<Node>();
    n->value = std::move(v);
    n->grad = Matrix::Zero(n->value.rows(), n->value.cols());
    return n;
}

Value param(Matrix v) {
    auto n = constant(std::move(v));
    n->requires_grad = true;
    return n;
}

Value matmul(const Value& a, const Value& b) {
    check(a->value.cols() == b->value.rows(), "matmul: inner dims differ");
    return make_node(a->value * b->value, {a, b}, [a = a.get(), b = b.get()](Node& self) {
        if (a->requires_grad) a->grad.noalias() += self.grad * b->value.transpose();
        if (b->requires_grad) b->grad.noalias() += a->value.transpose() * self.grad;
    });
}

Value matmul_nt(const Value& a, const Value& b) {
    check(a->value.cols() == b->value.cols(), "matmul_nt: inner dims differ");
    return make_node(a->value * b->value.transpose(), {a, b},
                     [a = a.get(), b = b.get()](Node& self) {
                         if (a->requires_grad) a->grad.noalias() += self.grad * b->value;
                         if (b->requires_grad)
                             b->grad.noalias() += self.grad.transpose() * a->value;
                     });
}

Value add(const Value& a, const Value& b) {
    check(a->value.rows() == b->value.rows() && a->value.cols() == b->value.cols(),
          "add: shape mismatch");
    return make_node(a->value + b->value, {a, b}, [a = a.get(), b = b.get()](Node& self) {
        if (a->requires_grad) a->grad += self.grad;
        if (b->requires_grad) b->grad += self.grad;
    });
}

Value add_rowvec(const Value& a, const Value& row) {
    check(row->value.rows() == 1 && row->value.cols() == a->value.cols(),
          "add_rowvec: row must be 1 x cols(a)");
    Matrix v = a->value;
    v.rowwise() += row->value.row(0);
    return make_node(std::move(v), {a, row}, [a = a.get(), row = row.get()](Node& self) {
        if (a->requires_grad) a->grad += self.grad;
        if (row->requires_grad) row->grad.row(0) += self.grad.colwise().sum();
    });
}

Value add_const(const Value& a, const Matrix& m) {
    check(a->value.rows() == m.rows() && a->value.cols() == m.cols(), "add_const: shape mismatch");
    return make_node(a->value + m, {a}, [a = a.get()](Node& self) {
        if (a->requires_grad) a->grad += self.grad;
    });
}

Value scale(const Value& a, double s) {
    return make_node(a->value * s, {a}, [a = a.get(), s](Node& self) {
        if (a->requires_grad) a->grad += self.grad * s;
    });
}

Value relu(const Value& a) {
    return make_node(a->value.cwiseMax(0.0), {a}, [a = a.get()](Node& self) {
        if (!a->requires_grad) return;
        a->grad += (a->value.array() > 0.0).cast<double>().matrix().cwiseProduct(self.grad);
    });
}

Value softmax_rows(const Value& a) {
    Matrix y(a->value.rows(), a->value.cols());
    for (Eigen::Index r = 0; r < a->value.rows(); ++r) {
        double m = a->value.row(r).maxCoeff();
        Eigen::ArrayXd e = (a->value.row(r).array() - m).exp();
        y.row(r) = (e / e.sum()).matrix();
    }
    return make_node(std::move(y), {a}, [a = a.get()](Node& self) {
        if (!a->requires_grad) return;
        for (Eigen::Index r = 0; r < self.value.rows(); ++r) {
            auto yr = self.value.row(r).array();
            auto gr = self.grad.row(r).array();
            double dot = (yr * gr).sum();
            a->grad.row(r) += (yr * (gr - dot)).matrix();
        }
    });
}

Value layer_norm_rows(const Value& x, const Value& gain, const Value& bias, double eps) {
    const Eigen::Index d = x->value.cols();
    check(gain->value.rows() == 1 && gain->value.cols() == d, "layer_norm: gain must be 1 x d");
    check(bias->value.rows() == 1 && bias->value.cols() == d, "layer_norm: bias must be 1 x d");
    Matrix xhat(x->value.rows(), d);
    Eigen::VectorXd inv_sigma(x->value.rows());
    for (Eigen::Index r = 0; r < x->value.rows(); ++r) {
        double mu = x->value.row(r).mean();
        double var = (x->value.row(r).array() - mu).square().mean();
        double is = 1.0 / std::sqrt(var + eps);
        inv_sigma(r) = is;
        xhat.row(r) = ((x->value.row(r).array() - mu) * is).matrix();
    }
    Matrix y = xhat;
    for (Eigen::Index r = 0; r < y.rows(); ++r)
        y.row(r) = y.row(r).cwiseProduct(gain->value.row(0)) + bias->value.row(0);
    return make_node(
        std::move(y), {x, gain, bias},
        [x = x.get(), gain = gain.get(), bias = bias.get(), xhat = std::move(xhat),
         inv_sigma = std::move(inv_sigma)](Node& self) {
            for (Eigen::Index r = 0; r < xhat.rows(); ++r) {
                Eigen::ArrayXd dy = self.grad.row(r).transpose().array();
                Eigen::ArrayXd xh = xhat.row(r).transpose().array();
                if (gain->requires_grad) gain->grad.row(0) += (dy * xh).matrix().transpose();
                if (bias->requires_grad) bias->grad.row(0) += self.grad.row(r);
                if (x->requires_grad) {
                    Eigen::ArrayXd dxhat = dy * gain->value.row(0).transpose().array();
                    double m1 = dxhat.mean();
                    double m2 = (dxhat * xh).mean();
                    x->grad.row(r) +=
                        ((dxhat - m1 - xh * m2) * inv_sigma(r)).matrix().transpose();
                }
            }
        });
}

Value concat_rows(const std::vector<Value>& parts) {
    check(!parts.empty(), "concat_rows: empty");
    Eigen::Index cols = parts[0]->value.cols();
    Eigen::Index rows = 0;
    for (const auto& p : parts) {
        check(p->value.cols() == cols, "concat_rows: column mismatch");
        rows += p->value.rows();
    }
    Matrix v(rows, cols);
    Eigen::Index at = 0;
    for (const auto& p : parts) {
        v.middleRows(at, p->value.rows()) = p->value;
        at += p->value.rows();
    }
    return make_node(std::move(v), parts, [](Node& self) {
        Eigen::Index at = 0;
        for (auto& in : self.inputs) {
            if (in->requires_grad) in->grad += self.grad.middleRows(at, in->value.rows());
            at += in->value.rows();
        }
    });
}

Value concat_cols(const std::vector<Value>& parts) {
    check(!parts.empty(), "concat_cols: empty");
    Eigen::Index rows = parts[0]->value.rows();
    Eigen::Index cols = 0;
    for (const auto& p : parts) {
        check(p->value.rows() == rows, "concat_cols: row mismatch");
        cols += p->value.cols();
    }
    Matrix v(rows, cols);
    Eigen::Index at = 0;
    for (const auto& p : parts) {
        v.middleCols(at, p->value.cols()) = p->value;
        at += p->value.cols();
    }
    return make_node(std::move(v), parts, [](Node& self) {
        Eigen::Index at = 0;
        for (auto& in : self.inputs) {
            if (in->requires_grad) in->grad += self.grad.middleCols(at, in->value.cols());
            at += in->value.cols();
        }
    });
}

Value slice_rows(const Value& a, Eigen::Index start, Eigen::Index count) {
    check(start >= 0 && count >= 0 && start + count <= a->value.rows(),
          "slice_rows: out of range");
    return make_node(a->value.middleRows(start, count), {a},
                     [a = a.get(), start, count](Node& self) {
                         if (a->requires_grad) a->grad.middleRows(start, count) += self.grad;
                     });
}

Value slice_cols(const Value& a, Eigen::Index start, Eigen::Index count) {
    check(start >= 0 && count >= 0 && start + count <= a->value.cols(),
          "slice_cols: out of range");
    return make_node(a->value.middleCols(start, count), {a},
                     [a = a.get(), start, count](Node& self) {
                         if (a->requires_grad) a->grad.middleCols(start, count) += self.grad;
                     });
}

Value embedding_rows(const Value& table, const std::vector<int>& ids) {
    Matrix v(static_cast<Eigen::Index>(ids.size()), table->value.cols());
    for (size_t i = 0; i < ids.size(); ++i) {
        check(ids[i] >= 0 && ids[i] < table->value.rows(), "embedding_rows: id out of range");
        v.row(static_cast<Eigen::Index>(i)) = table->value.row(ids[i]);
    }
    return make_node(std::move(v), {table}, [table = table.get(), ids](Node& self) {
        if (!table->requires_grad) return;
        for (size_t i = 0; i < ids.size(); ++i)
            table->grad.row(ids[i]) += self.grad.row(static_cast<Eigen::Index>(i));
    });
}

Value cross_entropy_rows(const Value& logits, const std::vector<int>& targets, double divisor) {
    check(static_cast<Eigen::Index>(targets.size()) == logits->value.rows(),
          "cross_entropy_rows: one target per row required");
    check(divisor > 0.0, "cross_entropy_rows: divisor must be positive");
    Matrix probs(logits->value.rows(), logits->value.cols());
    double total = 0.0;
    for (Eigen::Index r = 0; r < logits->value.rows(); ++r) {
        int t = targets[static_cast<size_t>(r)];
        check(t >= 0 && t < logits->value.cols(), "cross_entropy_rows: target out of range");
        double m = logits->value.row(r).maxCoeff();
        Eigen::ArrayXd e = (logits->value.row(r).array() - m).exp();
        double z = e.sum();
        probs.row(r) = (e / z).matrix();
        total += m + std::log(z) - logits->value(r, t);
    }
    Matrix v(1, 1);
    v(0, 0) = total / divisor;
    return make_node(std::move(v), {logits},
                     [logits = logits.get(), targets, divisor, probs = std::move(probs)](Node& self) {
                         if (!logits->requires_grad) return;
                         double g = self.grad(0, 0) / divisor;
                         logits->grad += probs * g;
                         for (Eigen::Index r = 0; r < probs.rows(); ++r)
                             logits->grad(r, targets[static_cast<size_t>(r)]) -= g;
                     });
}

Value picked_neg_log(const Value& probs, const std::vector<int>& targets, double divisor) {
    check(static_cast<Eigen::Index>(targets.size()) == probs->value.rows(),
          "picked_neg_log: one target per row required");
    check(divisor > 0.0, "picked_neg_log: divisor must be positive");
    double total = 0.0;
    for (Eigen::Index r = 0; r < probs->value.rows(); ++r) {
        int t = targets[static_cast<size_t>(r)];
        check(t >= 0 && t < probs->value.cols(), "picked_neg_log: target out of range");
        total -= std::log(std::max(probs->value(r, t), 1e-300));
    }
    Matrix v(1, 1);
    v(0, 0) = total / divisor;
    return make_node(std::move(v), {probs}, [probs = probs.get(), targets, divisor](Node& self) {
        if (!probs->requires_grad) return;
        double g = self.grad(0, 0) / divisor;
        for (Eigen::Index r = 0; r < probs->value.rows(); ++r) {
            int t = targets[static_cast<size_t>(r)];
            probs->grad(r, t) -= g / std::max(probs->value(r, t), 1e-300);
        }
    });
}

void backward(const Value& root) {
    if (root->value.rows() != 1 || root->value.cols() != 1)
        throw std::invalid_argument("backward: root must be a 1x1 scalar");
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    // Iterative post-order DFS; recursion would overflow on long chains.
    std::vector<std::pair<Node*, size_t>> stack{{root.get(), 0}};
    seen.insert(root.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            Node* child = node->inputs[next++].get();
            if (seen.insert(child).second) stack.emplace_back(child, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    root->grad(0, 0) = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it)
        if ((*it)->requires_grad && (*it)->backward_fn) (*it)->backward_fn(**it);
}

}  // namespace two::ag
