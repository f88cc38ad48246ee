#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major
// matrices. A Tape records one forward pass; backward() propagates adjoints
// to every node, including parameter leaves, whose gradients the caller
// collects with for_each_param_grad().

#include "cmn/error.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace cmn::ad {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic>;

// A named trainable array. `index` is its slot in the owning ParameterStore.
struct Parameter {
  std::string name;
  Matrix value;
  std::size_t index = 0;
};

class ParameterStore {
 public:
  ParameterStore() = default;
  ParameterStore(const ParameterStore&) = delete;
  ParameterStore& operator=(const ParameterStore&) = delete;
  ParameterStore(ParameterStore&&) noexcept = default;
  ParameterStore& operator=(ParameterStore&&) noexcept = default;

  Parameter* add(std::string name, Matrix init) {
    for (const auto& p : params_)
      if (p->name == name) throw Error("duplicate parameter name: " + name);
    auto p = std::make_unique<Parameter>();
    p->name = std::move(name);
    p->value = std::move(init);
    p->index = params_.size();
    params_.push_back(std::move(p));
    return params_.back().get();
  }

  std::size_t size() const { return params_.size(); }
  Parameter& operator[](std::size_t i) { return *params_[i]; }
  const Parameter& operator[](std::size_t i) const { return *params_[i]; }

  Parameter* find(const std::string& name) {
    for (auto& p : params_)
      if (p->name == name) return p.get();
    return nullptr;
  }
  const Parameter* find(const std::string& name) const {
    for (const auto& p : params_)
      if (p->name == name) return p.get();
    return nullptr;
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += static_cast<std::size_t>(p->value.size());
    return n;
  }

  // Zero-initialized gradient buffers shaped like the parameters.
  std::vector<Matrix> zero_grads() const {
    std::vector<Matrix> g;
    g.reserve(params_.size());
    for (const auto& p : params_) g.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
    return g;
  }

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
};

class Tape;

struct Var {
  Tape* tape = nullptr;
  int id = -1;

  const Matrix& value() const;
  double scalar() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, int)>;

  Tape() { nodes_.reserve(256); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix m) {
    Node n;
    n.owned = std::move(m);
    return add_node(std::move(n));
  }

  Var param(const Parameter& p) {
    Node n;
    n.ref = &p.value;
    n.param = &p;
    return add_node(std::move(n));
  }

  Var push(Matrix value, Backward back) {
    Node n;
    n.owned = std::move(value);
    n.back = std::move(back);
    return add_node(std::move(n));
  }

  const Matrix& value(int id) const {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    return n.ref ? *n.ref : n.owned;
  }

  // Adjoint accumulator for node `id`, allocated on first touch.
  Matrix& grad(int id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.size() == 0) {
      const Matrix& v = value(id);
      n.grad = Matrix::Zero(v.rows(), v.cols());
    }
    return n.grad;
  }

  bool has_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].grad.size() != 0; }

  // Propagates d(seed * root)/d(node) to every node. root must be 1x1.
  void backward(Var root, double seed = 1.0) {
    if (root.tape != this) throw Error("backward: variable belongs to another tape");
    if (value(root.id).size() != 1) throw Error("backward: root must be a scalar");
    grad(root.id)(0, 0) += seed;
    for (int i = root.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (n.back && n.grad.size() != 0) n.back(*this, i);
    }
  }

  // f(const Parameter&, const Matrix& grad) for every parameter leaf reached by backward().
  template <class F>
  void for_each_param_grad(F&& f) const {
    for (const auto& n : nodes_)
      if (n.param && n.grad.size() != 0) f(*n.param, n.grad);
  }

  // Adds parameter gradients into buffers indexed by Parameter::index.
  void accumulate(std::vector<Matrix>& grads) const {
    for_each_param_grad([&](const Parameter& p, const Matrix& g) { grads[p.index] += g; });
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix owned;
    const Matrix* ref = nullptr;
    Matrix grad;
    Backward back;
    const Parameter* param = nullptr;
  };

  Var add_node(Node n) {
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<int>(nodes_.size() - 1)};
  }

  std::vector<Node> nodes_;
};

inline const Matrix& Var::value() const { return tape->value(id); }
inline double Var::scalar() const { return tape->value(id)(0, 0); }

// ---------------------------------------------------------------------------
// Operations

inline void check_same_tape(Var a, Var b) {
  if (a.tape != b.tape || a.tape == nullptr) throw Error("operands recorded on different tapes");
}

inline Var matmul(Var a, Var b) {
  check_same_tape(a, b);
  if (a.cols() != b.rows()) throw Error("matmul: shape mismatch");
  Matrix out = a.value() * b.value();
  const int ia = a.id, ib = b.id;
  return a.tape->push(std::move(out), [ia, ib](Tape& t, int self) {
    const Matrix& g = t.grad(self);
    t.grad(ia).noalias() += g * t.value(ib).transpose();
    t.grad(ib).noalias() += t.value(ia).transpose() * g;
  });
}

inline Var add(Var a, Var b) {
  check_same_tape(a, b);
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw Error("add: shape mismatch");
  Matrix out = a.value() + b.value();
  const int ia = a.id, ib = b.id;
  return a.tape->push(std::move(out), [ia, ib](Tape& t, int self) {
    const Matrix& g = t.grad(self);
    t.grad(ia) += g;
    t.grad(ib) += g;
  });
}

inline Var sub(Var a, Var b) {
  check_same_tape(a, b);
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw Error("sub: shape mismatch");
  Matrix out = a.value() - b.value();
  const int ia = a.id, ib = b.id;
  return a.tape->push(std::move(out), [ia, ib](Tape& t, int self) {
    const Matrix& g = t.grad(self);
    t.grad(ia) += g;
    t.grad(ib) -= g;
  });
}

// a (r x c) + broadcast row (1 x c)
inline Var add_row(Var a, Var row) {
  check_same_tape(a, row);
  if (row.rows() != 1 || row.cols() != a.cols()) throw Error("add_row: shape mismatch");
  Matrix out = a.value().rowwise() + row.value().row(0);
  const int ia = a.id, ir = row.id;
  return a.tape->push(std::move(out), [ia, ir](Tape& t, int self) {
    const Matrix& g = t.grad(self);
    t.grad(ia) += g;
    t.grad(ir) += g.colwise().sum();
  });
}

inline Var scale(Var a, double s) {
  Matrix out = a.value() * s;
  const int ia = a.id;
  return a.tape->push(std::move(out), [ia, s](Tape& t, int self) { t.grad(ia) += t.grad(self) * s; });
}

inline Var add_scalar(Var a, double s) {
  Matrix out = a.value().array() + s;
  const int ia = a.id;
  return a.tape->push(std::move(out), [ia](Tape& t, int self) { t.grad(ia) += t.grad(self); });
}

inline Var hadamard(Var a, Var b) {
  check_same_tape(a, b);
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw Error("hadamard: shape mismatch");
  Matrix out = a.value().cwiseProduct(b.value());
  const int ia = a.id, ib = b.id;
  return a.tape->push(std::move(out), [ia, ib](Tape& t, int self) {
    const Matrix& g = t.grad(self);
    t.grad(ia) += g.cwiseProduct(t.value(ib));
    t.grad(ib) += g.cwiseProduct(t.value(ia));
  });
}

inline Var exp(Var a) {
  Matrix out = a.value().array().exp();
  const int ia = a.id;
  return a.tape->push(std::move(out), [ia](Tape& t, int self) {
    t.grad(ia) += t.grad(self).cwiseProduct(t.value(self));
  });
}

inline Var sum(Var a) {
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  const int ia = a.id;
  return a.tape->push(std::move(out), [ia](Tape& t, int self) {
    t.grad(ia).array() += t.grad(self)(0, 0);
  });
}

inline Var dot(Var a, Var b) { return sum(hadamard(a, b)); }

// tanh approximation of GELU; smooth everywhere.
inline Var gelu(Var a) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kA = 0.044715;
  const Matrix& x = a.value();
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double v = x.data()[i];
    out.data()[i] = 0.5 * v * (1.0 + std::tanh(kC * (v + kA * v * v * v)));
  }
  const int ia = a.id;
  return a.tape->push(std::move(out), [ia](Tape& t, int self) {
    const Matrix& xv = t.value(ia);
    const Matrix& g = t.grad(self);
    Matrix& ga = t.grad(ia);
    for (Eigen::Index i = 0; i < xv.size(); ++i) {
      const double v = xv.data()[i];
      const double th = std::tanh(kC * (v + kA * v * v * v));
      const double d = 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * kC * (1.0 + 3.0 * kA * v * v);
      ga.data()[i] += g.data()[i] * d;
    }
  });
}

// Elementwise log(sigmoid(x)), computed without overflow.
inline Var log_sigmoid(Var a) {
  const Matrix& x = a.value();
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double v = x.data()[i];
    out.data()[i] = v < 0 ? v - std::log1p(std::exp(v)) : -std::log1p(std::exp(-v));
  }
  const int ia = a.id;
  return a.tape->push(std::move(out), [ia](Tape& t, int self) {
    const Matrix& xv = t.value(ia);
    const Matrix& g = t.grad(self);
    Matrix& ga = t.grad(ia);
    for (Eigen::Index i = 0; i < xv.size(); ++i) {
      const double v = xv.data()[i];
      const double sig_neg = v >= 0 ? std::exp(-v) / (1.0 + std::exp(-v)) : 1.0 / (1.0 + std::exp(v));
      ga.data()[i] += g.data()[i] * sig_neg;
    }
  });
}

// Elementwise clamp to [lo, hi]; gradient passes only inside the range.
inline Var clamp(Var a, double lo, double hi) {
  Matrix out = a.value().cwiseMax(lo).cwiseMin(hi);
  const int ia = a.id;
  return a.tape->push(std::move(out), [ia, lo, hi](Tape& t, int self) {
    const Matrix& xv = t.value(ia);
    const Matrix& g = t.grad(self);
    Matrix& ga = t.grad(ia);
    for (Eigen::Index i = 0; i < xv.size(); ++i) {
      const double v = xv.data()[i];
      if (v >= lo && v <= hi) ga.data()[i] += g.data()[i];
    }
  });
}

// Row-wise layer normalization with learned gain and bias (both 1 x c).
inline Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5) {
  check_same_tape(x, gain);
  check_same_tape(x, bias);
  const Matrix& xv = x.value();
  const Eigen::Index rows = xv.rows(), cols = xv.cols();
  Matrix normed(rows, cols);
  Eigen::VectorXd inv_std(rows);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const double mean = xv.row(r).mean();
    const double var = (xv.row(r).array() - mean).square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    normed.row(r) = (xv.row(r).array() - mean) * inv_std(r);
  }
  Matrix out = (normed.array().rowwise() * gain.value().row(0).array()).rowwise() + bias.value().row(0).array();
  const int ix = x.id, ig = gain.id, ib = bias.id;
  return x.tape->push(std::move(out), [ix, ig, ib, normed = std::move(normed), inv_std = std::move(inv_std)](Tape& t, int self) {
    const Matrix& g = t.grad(self);
    const Matrix& gain_v = t.value(ig);
    t.grad(ig) += g.cwiseProduct(normed).colwise().sum();
    t.grad(ib) += g.colwise().sum();
    Matrix& gx = t.grad(ix);
    const double n = static_cast<double>(g.cols());
    for (Eigen::Index r = 0; r < g.rows(); ++r) {
      const Eigen::ArrayXd dn = (g.row(r).array() * gain_v.row(0).array()).transpose();
      const Eigen::ArrayXd xh = normed.row(r).array().transpose();
      const double mean_dn = dn.sum() / n;
      const double mean_dn_xh = (dn * xh).sum() / n;
      gx.row(r).array() += (inv_std(r) * (dn - mean_dn - xh * mean_dn_xh)).transpose();
    }
  });
}

// Rows `ids` of `table`; backward scatter-adds into the table.
inline Var gather_rows(Var table, std::span<const int> ids) {
  const Matrix& tv = table.value();
  Matrix out(static_cast<Eigen::Index>(ids.size()), tv.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= tv.rows()) throw Error("gather_rows: index out of range");
    out.row(static_cast<Eigen::Index>(i)) = tv.row(ids[i]);
  }
  const int it = table.id;
  return table.tape->push(std::move(out), [it, idx = std::vector<int>(ids.begin(), ids.end())](Tape& t, int self) {
    const Matrix& g = t.grad(self);
    Matrix& gt = t.grad(it);
    for (std::size_t i = 0; i < idx.size(); ++i) gt.row(idx[i]) += g.row(static_cast<Eigen::Index>(i));
  });
}

inline Var slice_rows(Var a, Eigen::Index begin, Eigen::Index count) {
  if (begin < 0 || count < 0 || begin + count > a.rows()) throw Error("slice_rows: range out of bounds");
  Matrix out = a.value().middleRows(begin, count);
  const int ia = a.id;
  return a.tape->push(std::move(out), [ia, begin, count](Tape& t, int self) {
    t.grad(ia).middleRows(begin, count) += t.grad(self);
  });
}

inline Var concat_rows(Var a, Var b) {
  check_same_tape(a, b);
  if (a.cols() != b.cols()) throw Error("concat_rows: column mismatch");
  Matrix out(a.rows() + b.rows(), a.cols());
  out.topRows(a.rows()) = a.value();
  out.bottomRows(b.rows()) = b.value();
  const int ia = a.id, ib = b.id;
  const Eigen::Index ra = a.rows(), rb = b.rows();
  return a.tape->push(std::move(out), [ia, ib, ra, rb](Tape& t, int self) {
    const Matrix& g = t.grad(self);
    t.grad(ia) += g.topRows(ra);
    t.grad(ib) += g.bottomRows(rb);
  });
}

// Sum over rows t of log softmax(logits.row(t))[targets[t]].
inline Var sequence_log_prob(Var logits, std::span<const int> targets) {
  const Matrix& lv = logits.value();
  if (static_cast<std::size_t>(lv.rows()) != targets.size()) throw Error("sequence_log_prob: length mismatch");
  Matrix probs(lv.rows(), lv.cols());
  double total = 0.0;
  for (Eigen::Index r = 0; r < lv.rows(); ++r) {
    const int y = targets[static_cast<std::size_t>(r)];
    if (y < 0 || y >= lv.cols()) throw Error("sequence_log_prob: target out of vocabulary");
    const double m = lv.row(r).maxCoeff();
    const Eigen::ArrayXd e = (lv.row(r).array() - m).exp().transpose();
    const double z = e.sum();
    probs.row(r) = (e / z).transpose();
    total += lv(r, y) - m - std::log(z);
  }
  Matrix out(1, 1);
  out(0, 0) = total;
  const int il = logits.id;
  return logits.tape->push(std::move(out), [il, probs = std::move(probs), y = std::vector<int>(targets.begin(), targets.end())](Tape& t, int self) {
    const double g = t.grad(self)(0, 0);
    Matrix& gl = t.grad(il);
    gl.noalias() -= g * probs;
    for (std::size_t r = 0; r < y.size(); ++r) gl(static_cast<Eigen::Index>(r), y[r]) += g;
  });
}

// Multi-head scaled dot-product attention over T x d query/key/value rows.
inline Var attention(Var q, Var k, Var v, int heads, bool causal) {
  check_same_tape(q, k);
  check_same_tape(q, v);
  const Eigen::Index T = q.rows(), d = q.cols();
  if (k.rows() != T || v.rows() != T || k.cols() != d || v.cols() != d) throw Error("attention: shape mismatch");
  if (heads <= 0 || d % heads != 0) throw Error("attention: hidden size not divisible by head count");
  const Eigen::Index dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Matrix> probs(static_cast<std::size_t>(heads));
  Matrix out(T, d);
  for (int h = 0; h < heads; ++h) {
    const auto qh = q.value().middleCols(h * dh, dh);
    const auto kh = k.value().middleCols(h * dh, dh);
    const auto vh = v.value().middleCols(h * dh, dh);
    Matrix s = (qh * kh.transpose()) * inv_sqrt;
    for (Eigen::Index i = 0; i < T; ++i) {
      const Eigen::Index visible = causal ? i + 1 : T;
      const double m = s.row(i).head(visible).maxCoeff();
      double z = 0.0;
      for (Eigen::Index j = 0; j < T; ++j) {
        const double e = j < visible ? std::exp(s(i, j) - m) : 0.0;
        s(i, j) = e;
        z += e;
      }
      s.row(i) /= z;
    }
    out.middleCols(h * dh, dh).noalias() = s * vh;
    probs[static_cast<std::size_t>(h)] = std::move(s);
  }
  const int iq = q.id, ik = k.id, iv = v.id;
  return q.tape->push(std::move(out), [iq, ik, iv, heads, dh, inv_sqrt, probs = std::move(probs)](Tape& t, int self) {
    const Matrix& g = t.grad(self);
    const Matrix& qv = t.value(iq);
    const Matrix& kv = t.value(ik);
    const Matrix& vv = t.value(iv);
    Matrix& gq = t.grad(iq);
    Matrix& gk = t.grad(ik);
    Matrix& gv = t.grad(iv);
    for (int h = 0; h < heads; ++h) {
      const Matrix& p = probs[static_cast<std::size_t>(h)];
      const Matrix go = g.middleCols(h * dh, dh);
      gv.middleCols(h * dh, dh).noalias() += p.transpose() * go;
      Matrix dp = go * vv.middleCols(h * dh, dh).transpose();
      const Eigen::VectorXd row_dot = (dp.cwiseProduct(p)).rowwise().sum();
      Matrix ds = p.cwiseProduct(dp.colwise() - row_dot) * inv_sqrt;
      gq.middleCols(h * dh, dh).noalias() += ds * kv.middleCols(h * dh, dh);
      gk.middleCols(h * dh, dh).noalias() += ds.transpose() * qv.middleCols(h * dh, dh);
    }
  });
}

}  // namespace cmn::ad
