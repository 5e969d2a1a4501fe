#include "synapse/tape.hpp"

#include <string>

namespace synapse::ad {

namespace {

void require_same_shape(const Tensor2& a, const Tensor2& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": " + detail::shape_str(a.rows(), a.cols()) + " vs " +
                     detail::shape_str(b.rows(), b.cols()));
  }
}

}  // namespace

Var Tape::push(Node node) {
  if (in_backward_) throw ContractError("tape: cannot record during backward");
  nodes_.push_back(std::move(node));
  return Var{nodes_.size() - 1};
}

Var Tape::variable(Tensor2 value) {
  Node n;
  n.owned = std::move(value);
  n.requires_grad = tracking_;
  return push(std::move(n));
}

Var Tape::variable_ref(const Tensor2& value) {
  Node n;
  n.external = &value;
  n.requires_grad = tracking_;
  return push(std::move(n));
}

Var Tape::constant(Tensor2 value) {
  Node n;
  n.owned = std::move(value);
  return push(std::move(n));
}

Var Tape::constant_ref(const Tensor2& value) {
  Node n;
  n.external = &value;
  return push(std::move(n));
}

Var Tape::record(Tensor2 value, std::initializer_list<Var> inputs, Backward backward) {
  return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()),
                std::move(backward));
}

Var Tape::record(Tensor2 value, std::span<const Var> inputs, Backward backward) {
  Node n;
  n.owned = std::move(value);
  if (tracking_) {
    for (const Var v : inputs) {
      if (nodes_.at(v.id).requires_grad) {
        n.requires_grad = true;
        break;
      }
    }
  }
  if (n.requires_grad) n.backward = std::move(backward);
  return push(std::move(n));
}

const Tensor2& Tape::value(Var v) const {
  const Node& n = nodes_.at(v.id);
  return n.external ? *n.external : n.owned;
}

void Tape::accumulate(Var v, const Tensor2& g) {
  if (!in_backward_) throw ContractError("tape: accumulate outside backward");
  if (!nodes_.at(v.id).requires_grad) return;
  Tensor2& slot = grads_[v.id];
  if (slot.size() == 0) {
    slot = g;
  } else {
    slot += g;
  }
}

std::vector<Tensor2> Tape::grad(Var root, std::span<const Var> wrt) {
  const Tensor2& rv = value(root);
  if (rv.rows() != 1 || rv.cols() != 1) {
    throw ContractError("grad: root must be a scalar, got " + detail::shape_str(rv.rows(), rv.cols()));
  }
  if (!tracking_) throw ContractError("grad: tape was built without gradient tracking");
  grads_.assign(nodes_.size(), Tensor2());
  in_backward_ = true;
  grads_[root.id] = Tensor2::Ones(1, 1);
  for (std::size_t i = root.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || !n.backward || grads_[i].size() == 0) continue;
    n.backward(*this, Var{i}, grads_[i]);
  }
  in_backward_ = false;
  std::vector<Tensor2> out;
  out.reserve(wrt.size());
  for (const Var v : wrt) {
    if (grads_.at(v.id).size() != 0) {
      out.push_back(grads_[v.id]);
    } else {
      const Tensor2& val = value(v);
      out.push_back(Tensor2::Zero(val.rows(), val.cols()));
    }
  }
  grads_.clear();
  return out;
}

Var matmul(Tape& t, Var a, Var b) {
  return t.record(synapse::matmul(t.value(a), t.value(b)), {a, b},
                  [a, b](Tape& tp, Var, const Tensor2& g) {
                    if (tp.requires_grad(a)) tp.accumulate(a, synapse::matmul_bt(g, tp.value(b)));
                    if (tp.requires_grad(b)) tp.accumulate(b, synapse::matmul_at(tp.value(a), g));
                  });
}

Var matmul_bt(Tape& t, Var a, Var b) {
  return t.record(synapse::matmul_bt(t.value(a), t.value(b)), {a, b},
                  [a, b](Tape& tp, Var, const Tensor2& g) {
                    // out = a b^T: da = g b, db = g^T a
                    if (tp.requires_grad(a)) tp.accumulate(a, synapse::matmul(g, tp.value(b)));
                    if (tp.requires_grad(b)) tp.accumulate(b, synapse::matmul_at(g, tp.value(a)));
                  });
}

Var add(Tape& t, Var a, Var b) {
  require_same_shape(t.value(a), t.value(b), "add");
  return t.record(t.value(a) + t.value(b), {a, b}, [a, b](Tape& tp, Var, const Tensor2& g) {
    tp.accumulate(a, g);
    tp.accumulate(b, g);
  });
}

Var add_row(Tape& t, Var x, Var row) {
  const Tensor2& xv = t.value(x);
  const Tensor2& rv = t.value(row);
  if (rv.rows() != 1 || rv.cols() != xv.cols()) {
    throw ShapeError("add_row: " + detail::shape_str(xv.rows(), xv.cols()) + " + " +
                     detail::shape_str(rv.rows(), rv.cols()));
  }
  Tensor2 out = xv;
  for (Eigen::Index i = 0; i < out.rows(); ++i) out.row(i) += rv.row(0);
  return t.record(std::move(out), {x, row}, [x, row](Tape& tp, Var, const Tensor2& g) {
    tp.accumulate(x, g);
    if (tp.requires_grad(row)) {
      Tensor2 gr = Tensor2::Zero(1, g.cols());
      for (Eigen::Index i = 0; i < g.rows(); ++i) gr.row(0) += g.row(i);
      tp.accumulate(row, gr);
    }
  });
}

Var scale(Tape& t, Var x, double s) {
  return t.record(t.value(x) * s, {x}, [x, s](Tape& tp, Var, const Tensor2& g) {
    tp.accumulate(x, g * s);
  });
}

Var gelu(Tape& t, Var x) {
  Tensor2 out = t.value(x).unaryExpr([](double v) { return synapse::gelu(v); });
  return t.record(std::move(out), {x}, [x](Tape& tp, Var, const Tensor2& g) {
    const Tensor2 d = tp.value(x).unaryExpr([](double v) { return gelu_derivative(v); });
    tp.accumulate(x, g.cwiseProduct(d));
  });
}

Var layer_norm_rows(Tape& t, Var x, Var gamma, Var beta, double eps) {
  const Tensor2& xv = t.value(x);
  const Tensor2& gv = t.value(gamma);
  const Tensor2& bv = t.value(beta);
  if (gv.rows() != 1 || bv.rows() != 1 || gv.cols() != xv.cols() || bv.cols() != xv.cols()) {
    throw ShapeError("layer_norm_rows: parameter shape mismatch");
  }
  Tensor2 out(xv.rows(), xv.cols());
  for (Eigen::Index i = 0; i < xv.rows(); ++i) {
    out.row(i) = synapse::layer_norm(xv.row(i), gv.row(0), bv.row(0), eps).transpose();
  }
  return t.record(std::move(out), {x, gamma, beta},
                  [x, gamma, beta, eps](Tape& tp, Var, const Tensor2& g) {
                    const Tensor2& xv = tp.value(x);
                    const Tensor2& gv = tp.value(gamma);
                    const Eigen::Index n = xv.cols();
                    Tensor2 dx(xv.rows(), n);
                    Tensor2 dgamma = Tensor2::Zero(1, n);
                    Tensor2 dbeta = Tensor2::Zero(1, n);
                    RowVectorXd xhat(n), dxhat(n);
                    for (Eigen::Index i = 0; i < xv.rows(); ++i) {
                      const double mean = ordered_sum(xv.row(i)) / double(n);
                      double var = 0;
                      for (Eigen::Index j = 0; j < n; ++j) var += (xv(i, j) - mean) * (xv(i, j) - mean);
                      var /= double(n);
                      const double inv = 1.0 / std::sqrt(var + eps);
                      double sum_d = 0, sum_dx = 0;
                      for (Eigen::Index j = 0; j < n; ++j) {
                        xhat(j) = (xv(i, j) - mean) * inv;
                        dxhat(j) = g(i, j) * gv(0, j);
                        sum_d += dxhat(j);
                        sum_dx += dxhat(j) * xhat(j);
                        dgamma(0, j) += g(i, j) * xhat(j);
                        dbeta(0, j) += g(i, j);
                      }
                      for (Eigen::Index j = 0; j < n; ++j) {
                        dx(i, j) = inv / double(n) * (double(n) * dxhat(j) - sum_d - xhat(j) * sum_dx);
                      }
                    }
                    tp.accumulate(x, dx);
                    tp.accumulate(gamma, dgamma);
                    tp.accumulate(beta, dbeta);
                  });
}

Var softmax_rows(Tape& t, Var x) {
  const Tensor2& xv = t.value(x);
  Tensor2 out(xv.rows(), xv.cols());
  for (Eigen::Index i = 0; i < xv.rows(); ++i) out.row(i) = synapse::softmax(xv.row(i)).transpose();
  return t.record(std::move(out), {x}, [x](Tape& tp, Var self, const Tensor2& g) {
    const Tensor2& y = tp.value(self);
    Tensor2 dx(y.rows(), y.cols());
    for (Eigen::Index i = 0; i < y.rows(); ++i) {
      double dot = 0;
      for (Eigen::Index j = 0; j < y.cols(); ++j) dot += g(i, j) * y(i, j);
      for (Eigen::Index j = 0; j < y.cols(); ++j) dx(i, j) = y(i, j) * (g(i, j) - dot);
    }
    tp.accumulate(x, dx);
  });
}

Var slice_cols(Tape& t, Var x, Eigen::Index start, Eigen::Index count) {
  const Tensor2& xv = t.value(x);
  if (start < 0 || count < 0 || start + count > xv.cols()) throw ShapeError("slice_cols: out of range");
  return t.record(xv.middleCols(start, count), {x}, [x, start, count](Tape& tp, Var, const Tensor2& g) {
    const Tensor2& xv = tp.value(x);
    Tensor2 dx = Tensor2::Zero(xv.rows(), xv.cols());
    dx.middleCols(start, count) = g;
    tp.accumulate(x, dx);
  });
}

Var slice_rows(Tape& t, Var x, Eigen::Index start, Eigen::Index count) {
  const Tensor2& xv = t.value(x);
  if (start < 0 || count < 0 || start + count > xv.rows()) throw ShapeError("slice_rows: out of range");
  return t.record(xv.middleRows(start, count), {x}, [x, start, count](Tape& tp, Var, const Tensor2& g) {
    const Tensor2& xv = tp.value(x);
    Tensor2 dx = Tensor2::Zero(xv.rows(), xv.cols());
    dx.middleRows(start, count) = g;
    tp.accumulate(x, dx);
  });
}

Var concat_cols(Tape& t, std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const Eigen::Index rows = t.value(parts[0]).rows();
  Eigen::Index cols = 0;
  for (const Var p : parts) {
    if (t.value(p).rows() != rows) throw ShapeError("concat_cols: row mismatch");
    cols += t.value(p).cols();
  }
  Tensor2 out(rows, cols);
  Eigen::Index at = 0;
  for (const Var p : parts) {
    out.middleCols(at, t.value(p).cols()) = t.value(p);
    at += t.value(p).cols();
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return t.record(std::move(out), parts, [inputs](Tape& tp, Var, const Tensor2& g) {
    Eigen::Index at = 0;
    for (const Var p : inputs) {
      const Eigen::Index c = tp.value(p).cols();
      if (tp.requires_grad(p)) tp.accumulate(p, g.middleCols(at, c));
      at += c;
    }
  });
}

Var gather_rows(Tape& t, Var table, std::span<const int> ids) {
  const Tensor2& tv = t.value(table);
  Tensor2 out(static_cast<Eigen::Index>(ids.size()), tv.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= tv.rows()) throw IndexError("gather_rows: id " + std::to_string(ids[i]));
    out.row(static_cast<Eigen::Index>(i)) = tv.row(ids[i]);
  }
  std::vector<int> idv(ids.begin(), ids.end());
  return t.record(std::move(out), {table}, [table, idv](Tape& tp, Var, const Tensor2& g) {
    const Tensor2& tv = tp.value(table);
    Tensor2 dt = Tensor2::Zero(tv.rows(), tv.cols());
    for (std::size_t i = 0; i < idv.size(); ++i) dt.row(idv[i]) += g.row(static_cast<Eigen::Index>(i));
    tp.accumulate(table, dt);
  });
}

Var zero_entries(Tape& t, Var x, Eigen::Index row, std::span<const int> cols) {
  Tensor2 out = t.value(x);
  if (row < 0 || row >= out.rows()) throw IndexError("zero_entries: row out of range");
  for (const int c : cols) {
    if (c < 0 || c >= out.cols()) throw IndexError("zero_entries: column " + std::to_string(c));
    out(row, c) = 0.0;
  }
  std::vector<int> cv(cols.begin(), cols.end());
  return t.record(std::move(out), {x}, [x, row, cv](Tape& tp, Var, const Tensor2& g) {
    Tensor2 dx = g;
    for (const int c : cv) dx(row, c) = 0.0;
    tp.accumulate(x, dx);
  });
}

Var add_constant(Tape& t, Var x, const Tensor2& c) {
  require_same_shape(t.value(x), c, "add_constant");
  return t.record(t.value(x) + c, {x}, [x](Tape& tp, Var, const Tensor2& g) { tp.accumulate(x, g); });
}

Var cross_entropy(Tape& t, Var logits, Eigen::Index label) {
  const Tensor2& lv = t.value(logits);
  if (lv.rows() != 1) throw ShapeError("cross_entropy: logits must be a single row");
  Tensor2 out(1, 1);
  out(0, 0) = synapse::cross_entropy(lv.row(0), label);
  return t.record(std::move(out), {logits}, [logits, label](Tape& tp, Var, const Tensor2& g) {
    const Tensor2& lv = tp.value(logits);
    Tensor2 d = synapse::softmax(lv.row(0)).transpose();
    d(0, label) -= 1.0;
    tp.accumulate(logits, d * g(0, 0));
  });
}

Var sum(Tape& t, Var x) {
  const Tensor2& xv = t.value(x);
  Tensor2 out(1, 1);
  double s = 0;
  for (Eigen::Index i = 0; i < xv.rows(); ++i)
    for (Eigen::Index j = 0; j < xv.cols(); ++j) s += xv(i, j);
  out(0, 0) = s;
  return t.record(std::move(out), {x}, [x](Tape& tp, Var, const Tensor2& g) {
    const Tensor2& xv = tp.value(x);
    tp.accumulate(x, Tensor2::Constant(xv.rows(), xv.cols(), g(0, 0)));
  });
}

}  // namespace synapse::ad
