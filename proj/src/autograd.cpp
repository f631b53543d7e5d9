#include "teata/autograd.hpp"

#include "teata/errors.hpp"

#include <cmath>
#include <limits>
#include <string>
#include <unordered_set>

namespace teata::ag {

namespace {

std::string shape_str(const Matrix& m) {
  return "(" + std::to_string(m.rows()) + "," + std::to_string(m.cols()) + ")";
}

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError(std::string(op) + ": " + shape_str(a) + " vs " + shape_str(b));
}

void topo_visit(Node* n, std::unordered_set<Node*>& seen, std::vector<Node*>& order) {
  if (!n->requires_grad || !seen.insert(n).second) return;
  for (auto& p : n->parents) topo_visit(p.get(), seen, order);
  order.push_back(n);
}

thread_local bool g_grad_enabled = true;

}  // namespace

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

void Node::accumulate(const Matrix& g) {
  if (grad.size() == 0)
    grad = g;
  else
    grad += g;
}

Var::Var(Matrix value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

Matrix Var::grad() const {
  if (node_->has_grad()) return node_->grad;
  return Matrix::Zero(node_->value.rows(), node_->value.cols());
}

void backward(const Var& root) {
  if (root.rows() != 1 || root.cols() != 1) throw ShapeError("backward: root must be scalar");
  if (!root.requires_grad()) return;
  std::unordered_set<Node*> seen;
  std::vector<Node*> order;
  topo_visit(root.node().get(), seen, order);
  root.node()->accumulate(Matrix::Ones(1, 1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && n->has_grad()) n->backward_fn(*n);
  }
  // Release interior gradients; leaves keep theirs for the optimizer.
  for (Node* n : order)
    if (!n->parents.empty()) n->grad.resize(0, 0);
}

Var make_op(Matrix value, std::vector<Var> parents, std::function<void(Node&)> backward_fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (!g_grad_enabled) return Var::from_node(std::move(node));
  for (auto& p : parents) {
    if (p.requires_grad()) node->requires_grad = true;
    node->parents.push_back(p.node());
  }
  if (node->requires_grad) node->backward_fn = std::move(backward_fn);
  return Var::from_node(std::move(node));
}

Var precomputed(double value, std::vector<Var> inputs, std::vector<Matrix> input_grads) {
  if (inputs.size() != input_grads.size()) throw InvalidArgument("precomputed: inputs/grads size mismatch");
  for (std::size_t i = 0; i < inputs.size(); ++i) require_same_shape(inputs[i].value(), input_grads[i], "precomputed");
  Matrix v(1, 1);
  v(0, 0) = value;
  auto parents = inputs;
  return make_op(std::move(v), std::move(parents),
                 [inputs = std::move(inputs), grads = std::move(input_grads)](Node& self) {
                   const double g = self.grad(0, 0);
                   for (std::size_t i = 0; i < inputs.size(); ++i)
                     if (inputs[i].requires_grad()) inputs[i].node()->accumulate(grads[i] * g);
                 });
}

Var detach(const Var& x) { return Var(x.value(), false); }

Var add(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "add");
  return make_op(a.value() + b.value(), {a, b}, [a, b](Node& self) {
    if (a.requires_grad()) a.node()->accumulate(self.grad);
    if (b.requires_grad()) b.node()->accumulate(self.grad);
  });
}

Var scale(const Var& x, double s) {
  return make_op(x.value() * s, {x}, [x, s](Node& self) { x.node()->accumulate(self.grad * s); });
}

Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) throw ShapeError("matmul: " + shape_str(a.value()) + " x " + shape_str(b.value()));
  Matrix out = a.value() * b.value();
  return make_op(std::move(out), {a, b}, [a, b](Node& self) {
    if (a.requires_grad()) a.node()->accumulate(self.grad * b.value().transpose());
    if (b.requires_grad()) b.node()->accumulate(a.value().transpose() * self.grad);
  });
}

Var linear(const Var& x, const Var& weight, const Var* bias) {
  if (x.cols() != weight.rows())
    throw ShapeError("linear: input " + shape_str(x.value()) + " weight " + shape_str(weight.value()));
  Matrix out = x.value() * weight.value();
  std::vector<Var> parents{x, weight};
  Var b;
  if (bias != nullptr) {
    if (bias->rows() != 1 || bias->cols() != weight.cols()) throw ShapeError("linear: bias " + shape_str(bias->value()));
    out.rowwise() += bias->value().row(0);
    b = *bias;
    parents.push_back(b);
  }
  return make_op(std::move(out), std::move(parents), [x, weight, b](Node& self) {
    if (x.requires_grad()) x.node()->accumulate(self.grad * weight.value().transpose());
    if (weight.requires_grad()) weight.node()->accumulate(x.value().transpose() * self.grad);
    if (b.defined() && b.requires_grad()) b.node()->accumulate(self.grad.colwise().sum());
  });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const Eigen::Index n = x.rows(), d = x.cols();
  if (gamma.rows() != 1 || gamma.cols() != d || beta.rows() != 1 || beta.cols() != d)
    throw ShapeError("layer_norm: affine shape mismatch");
  Matrix xhat(n, d);
  Vector inv_std(n);
  for (Eigen::Index r = 0; r < n; ++r) {
    const double mu = x.value().row(r).mean();
    const double var = (x.value().row(r).array() - mu).square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (x.value().row(r).array() - mu) * inv_std(r);
  }
  Matrix out = (xhat.array().rowwise() * gamma.value().row(0).array()).matrix();
  out.rowwise() += beta.value().row(0);
  return make_op(std::move(out), {x, gamma, beta},
                 [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
                   const Matrix& dy = self.grad;
                   if (gamma.requires_grad())
                     gamma.node()->accumulate((dy.array() * xhat.array()).colwise().sum().matrix());
                   if (beta.requires_grad()) beta.node()->accumulate(dy.colwise().sum());
                   if (x.requires_grad()) {
                     Matrix dxhat = (dy.array().rowwise() * gamma.value().row(0).array()).matrix();
                     Matrix dx(dxhat.rows(), dxhat.cols());
                     for (Eigen::Index r = 0; r < dx.rows(); ++r) {
                       const double m1 = dxhat.row(r).mean();
                       const double m2 = (dxhat.row(r).array() * xhat.row(r).array()).mean();
                       dx.row(r) = (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2) * inv_std(r);
                     }
                     x.node()->accumulate(dx);
                   }
                 });
}

Var quick_gelu(const Var& x) {
  Matrix sig = (1.0 / (1.0 + (-1.702 * x.value().array()).exp())).matrix();
  Matrix out = (x.value().array() * sig.array()).matrix();
  return make_op(std::move(out), {x}, [x, sig = std::move(sig)](Node& self) {
    auto s = sig.array();
    Matrix local = (s + 1.702 * x.value().array() * s * (1.0 - s)).matrix();
    x.node()->accumulate((self.grad.array() * local.array()).matrix());
  });
}

Var gather_rows(const Var& x, std::vector<Eigen::Index> rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), x.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= x.rows()) throw ShapeError("gather_rows: index out of range");
    out.row(static_cast<Eigen::Index>(i)) = x.value().row(rows[i]);
  }
  return make_op(std::move(out), {x}, [x, rows = std::move(rows)](Node& self) {
    Matrix g = Matrix::Zero(x.rows(), x.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) g.row(rows[i]) += self.grad.row(static_cast<Eigen::Index>(i));
    x.node()->accumulate(g);
  });
}

Var weighted_sum(std::span<const Var> terms, std::span<const double> weights) {
  if (terms.size() != weights.size()) throw InvalidArgument("weighted_sum: size mismatch");
  Matrix out = Matrix::Zero(1, 1);
  std::vector<Var> parents;
  for (std::size_t i = 0; i < terms.size(); ++i) {
    if (terms[i].rows() != 1 || terms[i].cols() != 1) throw ShapeError("weighted_sum: terms must be scalar");
    out(0, 0) += weights[i] * terms[i].item();
    parents.push_back(terms[i]);
  }
  std::vector<double> w(weights.begin(), weights.end());
  std::vector<Var> t(terms.begin(), terms.end());
  return make_op(std::move(out), std::move(parents), [t = std::move(t), w = std::move(w)](Node& self) {
    for (std::size_t i = 0; i < t.size(); ++i)
      if (t[i].requires_grad() && w[i] != 0.0) t[i].node()->accumulate(self.grad * w[i]);
  });
}

Var attention(const Var& qkv, Eigen::Index batch, Eigen::Index seq, Eigen::Index heads, bool causal) {
  const Eigen::Index width = qkv.cols() / 3;
  if (qkv.cols() != 3 * width || qkv.rows() != batch * seq || width % heads != 0)
    throw ShapeError("attention: qkv " + shape_str(qkv.value()));
  const Eigen::Index dh = width / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  const Matrix& in = qkv.value();

  Matrix out(batch * seq, width);
  std::vector<Matrix> probs(static_cast<std::size_t>(batch * heads));
  for (Eigen::Index b = 0; b < batch; ++b) {
    for (Eigen::Index h = 0; h < heads; ++h) {
      auto q = in.block(b * seq, h * dh, seq, dh);
      auto k = in.block(b * seq, width + h * dh, seq, dh);
      auto v = in.block(b * seq, 2 * width + h * dh, seq, dh);
      Matrix s = (q * k.transpose()) * sc;
      for (Eigen::Index r = 0; r < seq; ++r) {
        if (causal)
          for (Eigen::Index c = r + 1; c < seq; ++c) s(r, c) = -std::numeric_limits<double>::infinity();
        const double mx = s.row(r).maxCoeff();
        s.row(r) = (s.row(r).array() - mx).exp();
        s.row(r) /= s.row(r).sum();
      }
      out.block(b * seq, h * dh, seq, dh).noalias() = s * v;
      probs[static_cast<std::size_t>(b * heads + h)] = std::move(s);
    }
  }
  return make_op(std::move(out), {qkv}, [qkv, batch, seq, heads, width, dh, sc, probs = std::move(probs)](Node& self) {
    const Matrix& in = qkv.value();
    Matrix g = Matrix::Zero(in.rows(), in.cols());
    for (Eigen::Index b = 0; b < batch; ++b) {
      for (Eigen::Index h = 0; h < heads; ++h) {
        const Matrix& p = probs[static_cast<std::size_t>(b * heads + h)];
        auto q = in.block(b * seq, h * dh, seq, dh);
        auto k = in.block(b * seq, width + h * dh, seq, dh);
        auto v = in.block(b * seq, 2 * width + h * dh, seq, dh);
        auto dout = self.grad.block(b * seq, h * dh, seq, dh);
        Matrix dp = dout * v.transpose();
        g.block(b * seq, 2 * width + h * dh, seq, dh).noalias() = p.transpose() * dout;
        Vector rowdot = (dp.array() * p.array()).rowwise().sum();
        Matrix ds = (p.array() * (dp.colwise() - rowdot).array()).matrix() * sc;
        g.block(b * seq, h * dh, seq, dh).noalias() = ds * k;
        g.block(b * seq, width + h * dh, seq, dh).noalias() = ds.transpose() * q;
      }
    }
    qkv.node()->accumulate(g);
  });
}

Var prepend_class_token(const Var& patches, const Var& cls, const Var& pos, Eigen::Index batch) {
  const Eigen::Index width = patches.cols();
  if (batch <= 0 || patches.rows() % batch != 0) throw ShapeError("prepend_class_token: batch mismatch");
  const Eigen::Index np = patches.rows() / batch;
  if (cls.rows() != 1 || cls.cols() != width || pos.rows() != np + 1 || pos.cols() != width)
    throw ShapeError("prepend_class_token: cls/pos shape mismatch");
  const Eigen::Index seq = np + 1;
  Matrix out(batch * seq, width);
  for (Eigen::Index b = 0; b < batch; ++b) {
    out.row(b * seq) = cls.value().row(0) + pos.value().row(0);
    out.block(b * seq + 1, 0, np, width) = patches.value().block(b * np, 0, np, width) + pos.value().bottomRows(np);
  }
  return make_op(std::move(out), {patches, cls, pos}, [patches, cls, pos, batch, np, seq, width](Node& self) {
    const Matrix& g = self.grad;
    if (patches.requires_grad()) {
      Matrix gp(batch * np, width);
      for (Eigen::Index b = 0; b < batch; ++b) gp.block(b * np, 0, np, width) = g.block(b * seq + 1, 0, np, width);
      patches.node()->accumulate(gp);
    }
    if (cls.requires_grad() || pos.requires_grad()) {
      Matrix gpos = Matrix::Zero(seq, width);
      for (Eigen::Index b = 0; b < batch; ++b) gpos += g.block(b * seq, 0, seq, width);
      if (cls.requires_grad()) cls.node()->accumulate(gpos.topRows(1));
      if (pos.requires_grad()) pos.node()->accumulate(gpos);
    }
  });
}

Var embed_template(const Var& table, const Var& slots, const Var& pos, std::span<const int> template_ids,
                   Eigen::Index num_seq) {
  const Eigen::Index width = table.cols();
  const Eigen::Index len = static_cast<Eigen::Index>(template_ids.size());
  Eigen::Index per_seq = 0;
  for (int id : template_ids) {
    if (id == -1)
      ++per_seq;
    else if (id < 0 || id >= table.rows())
      throw ShapeError("embed_template: token id out of range");
  }
  if (slots.cols() != width || slots.rows() != num_seq * per_seq)
    throw ShapeError("embed_template: slots " + shape_str(slots.value()) + " for " + std::to_string(num_seq) +
                     " sequences of " + std::to_string(per_seq) + " slots");
  if (pos.rows() != len || pos.cols() != width) throw ShapeError("embed_template: positional shape mismatch");

  std::vector<int> ids(template_ids.begin(), template_ids.end());
  Matrix out(num_seq * len, width);
  for (Eigen::Index n = 0; n < num_seq; ++n) {
    Eigen::Index slot = n * per_seq;
    for (Eigen::Index k = 0; k < len; ++k) {
      const int id = ids[static_cast<std::size_t>(k)];
      out.row(n * len + k) = (id == -1 ? slots.value().row(slot++) : table.value().row(id)) + pos.value().row(k);
    }
  }
  return make_op(std::move(out), {table, slots, pos},
                 [table, slots, pos, ids = std::move(ids), num_seq, len, per_seq, width](Node& self) {
                   const Matrix& g = self.grad;
                   Matrix gt = Matrix::Zero(table.rows(), width);
                   Matrix gs(num_seq * per_seq, width);
                   Matrix gpos = Matrix::Zero(len, width);
                   for (Eigen::Index n = 0; n < num_seq; ++n) {
                     Eigen::Index slot = n * per_seq;
                     for (Eigen::Index k = 0; k < len; ++k) {
                       const int id = ids[static_cast<std::size_t>(k)];
                       if (id == -1)
                         gs.row(slot++) = g.row(n * len + k);
                       else
                         gt.row(id) += g.row(n * len + k);
                       gpos.row(k) += g.row(n * len + k);
                     }
                   }
                   if (table.requires_grad()) table.node()->accumulate(gt);
                   if (slots.requires_grad()) slots.node()->accumulate(gs);
                   if (pos.requires_grad()) pos.node()->accumulate(gpos);
                 });
}

Var interleave_pairs(const Var& specific, const Var& shared, std::span<const Eigen::Index> rows_of) {
  const Eigen::Index m = shared.rows(), width = shared.cols();
  if (specific.cols() != width || m == 0 || specific.rows() % m != 0)
    throw ShapeError("interleave_pairs: specific " + shape_str(specific.value()) + " shared " +
                     shape_str(shared.value()));
  const Eigen::Index blocks = specific.rows() / m;
  std::vector<Eigen::Index> sel(rows_of.begin(), rows_of.end());
  for (auto b : sel)
    if (b < 0 || b >= blocks) throw KeyError("interleave_pairs: block " + std::to_string(b) + " out of range");
  const Eigen::Index n = static_cast<Eigen::Index>(sel.size());
  Matrix out(n * 2 * m, width);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < m; ++j) {
      out.row(i * 2 * m + 2 * j) = specific.value().row(sel[static_cast<std::size_t>(i)] * m + j);
      out.row(i * 2 * m + 2 * j + 1) = shared.value().row(j);
    }
  }
  return make_op(std::move(out), {specific, shared}, [specific, shared, sel = std::move(sel), m, width](Node& self) {
    const Matrix& g = self.grad;
    Matrix gx = Matrix::Zero(specific.rows(), width);
    Matrix gy = Matrix::Zero(m, width);
    for (std::size_t i = 0; i < sel.size(); ++i) {
      const Eigen::Index base = static_cast<Eigen::Index>(i) * 2 * m;
      for (Eigen::Index j = 0; j < m; ++j) {
        gx.row(sel[i] * m + j) += g.row(base + 2 * j);
        gy.row(j) += g.row(base + 2 * j + 1);
      }
    }
    if (specific.requires_grad()) specific.node()->accumulate(gx);
    if (shared.requires_grad()) shared.node()->accumulate(gy);
  });
}

}  // namespace teata::ag
