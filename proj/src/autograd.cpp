#include "clipcap/autograd.hpp"

#include <cassert>
#include <cmath>
#include <stdexcept>
#include <unordered_set>
#include <utility>

namespace clipcap::ag {

namespace {

thread_local bool t_grad_enabled = true;

using NodePtr = std::shared_ptr<Node>;

Var make_result(Matrix value, std::vector<NodePtr> parents, std::function<void(Node&)> fn) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    bool needs = false;
    if (t_grad_enabled) {
        for (const auto& p : parents) needs = needs || p->requires_grad;
    }
    if (needs) {
        node->requires_grad = true;
        node->parents = std::move(parents);
        node->backward_fn = std::move(fn);
    }
    return Var(std::move(node));
}

void check_same_shape(const Var& a, const Var& b, const char* op) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw std::invalid_argument(std::string("shape mismatch in ") + op);
    }
}

}  // namespace

bool grad_enabled() noexcept { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

void Var::backward() const {
    if (rows() != 1 || cols() != 1) throw std::invalid_argument("backward() requires a scalar");
    if (!node_->requires_grad) return;

    // Iterative post-order DFS gives a topological order of the graph.
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(node_.get(), 0);
    visited.insert(node_.get());
    while (!stack.empty()) {
        auto& [n, next] = stack.back();
        if (next < n->parents.size()) {
            Node* p = n->parents[next++].get();
            if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }

    node_->grad_buffer()(0, 0) += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn && n->grad.size() != 0) n->backward_fn(*n);
    }
    // Interior gradients are not needed after the pass; leaves keep theirs.
    for (Node* n : order) {
        if (n->backward_fn) n->grad.resize(0, 0);
    }
}

Var constant(Matrix value) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    return Var(std::move(node));
}

Var constant_scalar(double value) { return constant(Matrix::Constant(1, 1, value)); }

Var parameter(Matrix value) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    node->requires_grad = true;
    return Var(std::move(node));
}

Var add(const Var& a, const Var& b) {
    check_same_shape(a, b, "add");
    return make_result(a.value() + b.value(), {a.node(), b.node()}, [](Node& self) {
        for (auto& p : self.parents) {
            if (p->requires_grad) p->grad_buffer() += self.grad;
        }
    });
}

Var sub(const Var& a, const Var& b) {
    check_same_shape(a, b, "sub");
    return make_result(a.value() - b.value(), {a.node(), b.node()}, [](Node& self) {
        if (self.parents[0]->requires_grad) self.parents[0]->grad_buffer() += self.grad;
        if (self.parents[1]->requires_grad) self.parents[1]->grad_buffer() -= self.grad;
    });
}

Var mul(const Var& a, const Var& b) {
    check_same_shape(a, b, "mul");
    return make_result(a.value().cwiseProduct(b.value()), {a.node(), b.node()}, [](Node& self) {
        auto& pa = self.parents[0];
        auto& pb = self.parents[1];
        if (pa->requires_grad) pa->grad_buffer() += self.grad.cwiseProduct(pb->value);
        if (pb->requires_grad) pb->grad_buffer() += self.grad.cwiseProduct(pa->value);
    });
}

Var scale(const Var& a, double s) {
    return make_result(a.value() * s, {a.node()}, [s](Node& self) {
        self.parents[0]->grad_buffer() += self.grad * s;
    });
}

Var add_scalar(const Var& a, double s) {
    return make_result(a.value().array() + s, {a.node()}, [](Node& self) {
        self.parents[0]->grad_buffer() += self.grad;
    });
}

Var add_row(const Var& a, const Var& row) {
    if (row.rows() != 1 || row.cols() != a.cols()) throw std::invalid_argument("add_row: bad bias shape");
    Matrix out = a.value().rowwise() + row.value().row(0);
    return make_result(std::move(out), {a.node(), row.node()}, [](Node& self) {
        if (self.parents[0]->requires_grad) self.parents[0]->grad_buffer() += self.grad;
        if (self.parents[1]->requires_grad) self.parents[1]->grad_buffer() += self.grad.colwise().sum();
    });
}

Var matmul(const Var& a, const Var& b) {
    if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dimensions differ");
    Matrix out = a.value() * b.value();
    return make_result(std::move(out), {a.node(), b.node()}, [](Node& self) {
        auto& pa = self.parents[0];
        auto& pb = self.parents[1];
        if (pa->requires_grad) pa->grad_buffer().noalias() += self.grad * pb->value.transpose();
        if (pb->requires_grad) pb->grad_buffer().noalias() += pa->value.transpose() * self.grad;
    });
}

Var transpose(const Var& a) {
    Matrix out = a.value().transpose();
    return make_result(std::move(out), {a.node()}, [](Node& self) {
        self.parents[0]->grad_buffer() += self.grad.transpose();
    });
}

Var tanh(const Var& a) {
    Matrix out = a.value().array().tanh();
    return make_result(std::move(out), {a.node()}, [](Node& self) {
        self.parents[0]->grad_buffer().array() +=
            self.grad.array() * (1.0 - self.value.array().square());
    });
}

Var sigmoid(const Var& a) {
    Matrix out = (1.0 / (1.0 + (-a.value().array()).exp())).matrix();
    return make_result(std::move(out), {a.node()}, [](Node& self) {
        self.parents[0]->grad_buffer().array() +=
            self.grad.array() * self.value.array() * (1.0 - self.value.array());
    });
}

Var gelu(const Var& a) {
    static constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
    static constexpr double k = 0.044715;
    const auto& x = a.value().array();
    Matrix t = (c * (x + k * x.cube())).tanh().matrix();
    Matrix out = (0.5 * x * (1.0 + t.array())).matrix();
    return make_result(std::move(out), {a.node()}, [t = std::move(t)](Node& self) {
        const auto& x = self.parents[0]->value.array();
        auto d = 0.5 * (1.0 + t.array()) +
                 0.5 * x * (1.0 - t.array().square()) * c * (1.0 + 3.0 * k * x.square());
        self.parents[0]->grad_buffer().array() += self.grad.array() * d;
    });
}

Var log(const Var& a) {
    Matrix out = a.value().array().log();
    return make_result(std::move(out), {a.node()}, [](Node& self) {
        self.parents[0]->grad_buffer().array() += self.grad.array() / self.parents[0]->value.array();
    });
}

Var sum(const Var& a) {
    return make_result(Matrix::Constant(1, 1, a.value().sum()), {a.node()}, [](Node& self) {
        self.parents[0]->grad_buffer().array() += self.grad(0, 0);
    });
}

Var mean(const Var& a) {
    const double n = static_cast<double>(a.value().size());
    return make_result(Matrix::Constant(1, 1, a.value().sum() / n), {a.node()}, [n](Node& self) {
        self.parents[0]->grad_buffer().array() += self.grad(0, 0) / n;
    });
}

Var mean_rows(const Var& a) {
    const double n = static_cast<double>(a.rows());
    Matrix out = a.value().colwise().sum() / n;
    return make_result(std::move(out), {a.node()}, [n](Node& self) {
        self.parents[0]->grad_buffer().rowwise() += self.grad.row(0) / n;
    });
}

Var slice_rows(const Var& a, Index start, Index count) {
    if (start < 0 || count < 0 || start + count > a.rows()) throw std::out_of_range("slice_rows");
    Matrix out = a.value().middleRows(start, count);
    return make_result(std::move(out), {a.node()}, [start, count](Node& self) {
        self.parents[0]->grad_buffer().middleRows(start, count) += self.grad;
    });
}

Var concat_rows(std::span<const Var> parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
    Index total = 0;
    const Index cols = parts.front().cols();
    std::vector<NodePtr> parents;
    parents.reserve(parts.size());
    for (const auto& p : parts) {
        if (p.cols() != cols) throw std::invalid_argument("concat_rows: column mismatch");
        total += p.rows();
        parents.push_back(p.node());
    }
    Matrix out(total, cols);
    Index offset = 0;
    for (const auto& p : parts) {
        out.middleRows(offset, p.rows()) = p.value();
        offset += p.rows();
    }
    return make_result(std::move(out), std::move(parents), [](Node& self) {
        Index offset = 0;
        for (auto& p : self.parents) {
            const Index r = p->value.rows();
            if (p->requires_grad) p->grad_buffer() += self.grad.middleRows(offset, r);
            offset += r;
        }
    });
}

Var shift_down(const Var& a) {
    const Index n = a.rows();
    Matrix out = Matrix::Zero(n, a.cols());
    if (n > 1) out.bottomRows(n - 1) = a.value().topRows(n - 1);
    return make_result(std::move(out), {a.node()}, [n](Node& self) {
        if (n > 1) self.parents[0]->grad_buffer().topRows(n - 1) += self.grad.bottomRows(n - 1);
    });
}

Var gather_rows(const Var& table, std::span<const int> ids) {
    Matrix out(static_cast<Index>(ids.size()), table.cols());
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || ids[i] >= table.rows()) throw std::out_of_range("gather_rows: id out of range");
        out.row(static_cast<Index>(i)) = table.value().row(ids[i]);
    }
    std::vector<int> idx(ids.begin(), ids.end());
    return make_result(std::move(out), {table.node()}, [idx = std::move(idx)](Node& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < idx.size(); ++i) g.row(idx[i]) += self.grad.row(static_cast<Index>(i));
    });
}

Var select_cols(const Var& a, std::span<const int> cols) {
    if (static_cast<Index>(cols.size()) != a.rows()) throw std::invalid_argument("select_cols: size mismatch");
    Matrix out(a.rows(), 1);
    for (Index i = 0; i < a.rows(); ++i) {
        if (cols[i] < 0 || cols[i] >= a.cols()) throw std::out_of_range("select_cols: column out of range");
        out(i, 0) = a.value()(i, cols[i]);
    }
    std::vector<int> idx(cols.begin(), cols.end());
    return make_result(std::move(out), {a.node()}, [idx = std::move(idx)](Node& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < idx.size(); ++i) g(static_cast<Index>(i), idx[i]) += self.grad(static_cast<Index>(i), 0);
    });
}

Var diagonal(const Var& a) {
    if (a.rows() != a.cols()) throw std::invalid_argument("diagonal: matrix not square");
    Matrix out = a.value().diagonal();
    return make_result(std::move(out), {a.node()}, [](Node& self) {
        self.parents[0]->grad_buffer().diagonal() += self.grad.col(0);
    });
}

Var log_softmax_rows(const Var& a) {
    const Matrix& x = a.value();
    Matrix out(x.rows(), x.cols());
    for (Index i = 0; i < x.rows(); ++i) {
        const double m = x.row(i).maxCoeff();
        const double lse = m + std::log((x.row(i).array() - m).exp().sum());
        out.row(i) = x.row(i).array() - lse;
    }
    return make_result(std::move(out), {a.node()}, [](Node& self) {
        Matrix probs = self.value.array().exp();
        Eigen::VectorXd row_sums = self.grad.rowwise().sum();
        self.parents[0]->grad_buffer() += self.grad - (probs.array().colwise() * row_sums.array()).matrix();
    });
}

Var l2_normalize_rows(const Var& a) {
    const Matrix& x = a.value();
    Eigen::VectorXd norms = x.rowwise().norm();
    Matrix out = x.array().colwise() / norms.array();
    return make_result(std::move(out), {a.node()}, [norms = std::move(norms)](Node& self) {
        const Matrix& y = self.value;
        Eigen::VectorXd dots = (self.grad.cwiseProduct(y)).rowwise().sum();
        Matrix dx = self.grad - (y.array().colwise() * dots.array()).matrix();
        self.parents[0]->grad_buffer() += (dx.array().colwise() / norms.array()).matrix();
    });
}

Var layer_norm_rows(const Var& x, const Var& gamma, const Var& beta, double eps) {
    const Index n = x.rows();
    const Index d = x.cols();
    if (gamma.rows() != 1 || gamma.cols() != d || beta.rows() != 1 || beta.cols() != d) {
        throw std::invalid_argument("layer_norm_rows: bad parameter shape");
    }
    Matrix xhat(n, d);
    Eigen::VectorXd inv_std(n);
    for (Index i = 0; i < n; ++i) {
        const double mu = x.value().row(i).mean();
        auto centered = x.value().row(i).array() - mu;
        const double var = centered.square().mean();
        inv_std(i) = 1.0 / std::sqrt(var + eps);
        xhat.row(i) = centered * inv_std(i);
    }
    Matrix out = (xhat.array().rowwise() * gamma.value().row(0).array()).rowwise() + beta.value().row(0).array();
    return make_result(std::move(out), {x.node(), gamma.node(), beta.node()},
                       [xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
                           auto& px = self.parents[0];
                           auto& pg = self.parents[1];
                           auto& pb = self.parents[2];
                           const Matrix& g = self.grad;
                           if (pb->requires_grad) pb->grad_buffer() += g.colwise().sum();
                           if (pg->requires_grad) pg->grad_buffer() += g.cwiseProduct(xhat).colwise().sum();
                           if (px->requires_grad) {
                               Matrix dxhat = g.array().rowwise() * pg->value.row(0).array();
                               auto& gx = px->grad_buffer();
                               for (Index i = 0; i < dxhat.rows(); ++i) {
                                   const double m1 = dxhat.row(i).mean();
                                   const double m2 = dxhat.row(i).cwiseProduct(xhat.row(i)).mean();
                                   gx.row(i).array() +=
                                       inv_std(i) * (dxhat.row(i).array() - m1 - xhat.row(i).array() * m2);
                               }
                           }
                       });
}

Var multi_head_attention(const Var& q, const Var& k, const Var& v, int n_heads, bool causal) {
    const Index tq = q.rows();
    const Index tk = k.rows();
    const Index d = q.cols();
    if (k.cols() != d || v.cols() != d || v.rows() != tk) throw std::invalid_argument("attention: shape mismatch");
    if (n_heads <= 0 || d % n_heads != 0) throw std::invalid_argument("attention: heads must divide width");
    if (causal && tq != tk) throw std::invalid_argument("attention: causal needs square scores");
    const Index dh = d / n_heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

    std::vector<Matrix> probs(static_cast<std::size_t>(n_heads));
    Matrix out(tq, d);
    for (int h = 0; h < n_heads; ++h) {
        const Index c0 = h * dh;
        Matrix scores = (q.value().middleCols(c0, dh) * k.value().middleCols(c0, dh).transpose()) * inv_sqrt;
        for (Index i = 0; i < tq; ++i) {
            const Index limit = causal ? i + 1 : tk;
            const double m = scores.row(i).head(limit).maxCoeff();
            double total = 0.0;
            for (Index j = 0; j < tk; ++j) {
                const double e = j < limit ? std::exp(scores(i, j) - m) : 0.0;
                scores(i, j) = e;
                total += e;
            }
            scores.row(i) /= total;
        }
        out.middleCols(c0, dh).noalias() = scores * v.value().middleCols(c0, dh);
        probs[static_cast<std::size_t>(h)] = std::move(scores);
    }
    return make_result(std::move(out), {q.node(), k.node(), v.node()},
                       [probs = std::move(probs), n_heads, dh, inv_sqrt](Node& self) {
                           auto& pq = self.parents[0];
                           auto& pk = self.parents[1];
                           auto& pv = self.parents[2];
                           for (int h = 0; h < n_heads; ++h) {
                               const Index c0 = h * dh;
                               const Matrix& p = probs[static_cast<std::size_t>(h)];
                               auto g_out = self.grad.middleCols(c0, dh);
                               if (pv->requires_grad) {
                                   pv->grad_buffer().middleCols(c0, dh).noalias() += p.transpose() * g_out;
                               }
                               if (!pq->requires_grad && !pk->requires_grad) continue;
                               Matrix dp = g_out * pv->value.middleCols(c0, dh).transpose();
                               Eigen::VectorXd rows = dp.cwiseProduct(p).rowwise().sum();
                               Matrix ds = (p.array() * (dp.array().colwise() - rows.array())).matrix() * inv_sqrt;
                               if (pq->requires_grad) {
                                   pq->grad_buffer().middleCols(c0, dh).noalias() += ds * pk->value.middleCols(c0, dh);
                               }
                               if (pk->requires_grad) {
                                   pk->grad_buffer().middleCols(c0, dh).noalias() +=
                                       ds.transpose() * pq->value.middleCols(c0, dh);
                               }
                           }
                       });
}

}  // namespace clipcap::ag
