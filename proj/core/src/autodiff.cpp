// SPDX-License-Identifier: Apache-2.0
#include "mte/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "mte/error.hpp"

namespace mte::ad {

namespace {

enum class Broadcast { kSame, kRow, kCol, kScalar, kInvalid };

Broadcast classify(const Matrix& a, const Matrix& b) {
  if (a.same_shape(b)) return Broadcast::kSame;
  if (b.is_scalar()) return Broadcast::kScalar;
  if (b.rows() == 1 && b.cols() == a.cols()) return Broadcast::kRow;
  if (b.cols() == 1 && b.rows() == a.rows()) return Broadcast::kCol;
  return Broadcast::kInvalid;
}

std::size_t rhs_index(Broadcast kind, std::size_t r, std::size_t c, std::size_t cols) {
  switch (kind) {
    case Broadcast::kSame: return r * cols + c;
    case Broadcast::kRow: return c;
    case Broadcast::kCol: return r;
    default: return 0;
  }
}

template <class F>
Matrix broadcast_apply(const Matrix& a, const Matrix& b, Broadcast kind, F f) {
  Matrix out(a.rows(), a.cols());
  for (std::size_t r = 0; r < a.rows(); ++r) {
    for (std::size_t c = 0; c < a.cols(); ++c) {
      out(r, c) = f(a(r, c), b[rhs_index(kind, r, c, a.cols())]);
    }
  }
  return out;
}

// Sums a full-shape gradient down to the rhs shape.
Matrix reduce_to(const Matrix& g, const Matrix& like, Broadcast kind) {
  if (kind == Broadcast::kSame) return g;
  Matrix out(like.rows(), like.cols());
  for (std::size_t r = 0; r < g.rows(); ++r) {
    for (std::size_t c = 0; c < g.cols(); ++c) {
      out[rhs_index(kind, r, c, g.cols())] += g(r, c);
    }
  }
  return out;
}

void accumulate(Matrix& slot, Matrix contribution) {
  if (slot.empty()) {
    slot = std::move(contribution);
    return;
  }
  auto& s = slot.data();
  const auto& c = contribution.data();
  for (std::size_t i = 0; i < s.size(); ++i) s[i] += c[i];
}

[[noreturn]] void shape_fail(const Node& n, const std::string& what) {
  throw ShapeError("node " + std::to_string(n.id) + " (" + std::string(op_name(n.op)) +
                   "): " + what);
}

}  // namespace

Matrix log_softmax_rows(const Matrix& a) {
  Matrix out(a.rows(), a.cols());
  for (std::size_t r = 0; r < a.rows(); ++r) {
    auto z = a.row_span(r);
    if (z.empty()) continue;
    const double mx = *std::max_element(z.begin(), z.end());
    double s = 0.0;
    for (double v : z) s += std::exp(v - mx);
    const double lse = mx + std::log(s);
    auto o = out.row_span(r);
    for (std::size_t c = 0; c < z.size(); ++c) o[c] = z[c] - lse;
  }
  return out;
}

std::string_view op_name(Op op) {
  switch (op) {
    case Op::kConstant: return "constant";
    case Op::kParameter: return "parameter";
    case Op::kDetach: return "detach";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kScale: return "scale";
    case Op::kMatMul: return "matmul";
    case Op::kRelu: return "relu";
    case Op::kExp: return "exp";
    case Op::kLog: return "log";
    case Op::kSum: return "sum";
    case Op::kRowSum: return "row_sum";
    case Op::kLogSoftmax: return "log_softmax";
  }
  return "unknown";
}

const Node& Tape::node(NodeId id) const {
  check_id(id);
  return nodes_[id];
}

void Tape::check_id(NodeId id) const {
  if (id >= nodes_.size()) throw InvalidArgument("unknown node id " + std::to_string(id));
}

NodeId Tape::constant(Matrix value) {
  if (!value.all_finite()) {
    throw NonFiniteError("node " + std::to_string(nodes_.size()) + " (constant): non-finite value");
  }
  Node n;
  n.id = nodes_.size();
  n.op = Op::kConstant;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return nodes_.back().id;
}

NodeId Tape::parameter(Matrix value) {
  if (!value.all_finite()) {
    throw NonFiniteError("node " + std::to_string(nodes_.size()) + " (parameter): non-finite value");
  }
  Node n;
  n.id = nodes_.size();
  n.op = Op::kParameter;
  n.requires_grad = true;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  parameters_.push_back(nodes_.back().id);
  return nodes_.back().id;
}

NodeId Tape::record(Op op, std::vector<NodeId> parents, double attr) {
  Node n;
  n.id = nodes_.size();
  n.op = op;
  n.attr = attr;
  for (NodeId p : parents) {
    check_id(p);
    n.requires_grad = n.requires_grad || nodes_[p].requires_grad;
  }
  if (op == Op::kDetach) n.requires_grad = false;
  n.parents = std::move(parents);
  evaluate(n);
  nodes_.push_back(std::move(n));
  return nodes_.back().id;
}

NodeId Tape::detach(NodeId node) { return record(Op::kDetach, {node}); }
NodeId Tape::add(NodeId a, NodeId b) { return record(Op::kAdd, {a, b}); }
NodeId Tape::sub(NodeId a, NodeId b) { return record(Op::kSub, {a, b}); }
NodeId Tape::mul(NodeId a, NodeId b) { return record(Op::kMul, {a, b}); }
NodeId Tape::scale(NodeId a, double factor) { return record(Op::kScale, {a}, factor); }
NodeId Tape::matmul(NodeId a, NodeId b) { return record(Op::kMatMul, {a, b}); }
NodeId Tape::relu(NodeId a) { return record(Op::kRelu, {a}); }
NodeId Tape::exp(NodeId a) { return record(Op::kExp, {a}); }
NodeId Tape::log(NodeId a) { return record(Op::kLog, {a}); }
NodeId Tape::sum(NodeId a) { return record(Op::kSum, {a}); }
NodeId Tape::row_sum(NodeId a) { return record(Op::kRowSum, {a}); }
NodeId Tape::log_softmax(NodeId a) { return record(Op::kLogSoftmax, {a}); }

void Tape::evaluate(Node& n) const {
  auto in = [&](std::size_t i) -> const Matrix& { return nodes_[n.parents[i]].value; };
  switch (n.op) {
    case Op::kConstant:
    case Op::kParameter:
      return;
    case Op::kDetach:
      n.value = in(0);
      return;
    case Op::kAdd:
    case Op::kSub:
    case Op::kMul: {
      const Matrix& a = in(0);
      const Matrix& b = in(1);
      const Broadcast kind = classify(a, b);
      if (kind == Broadcast::kInvalid) {
        shape_fail(n, "cannot broadcast " + b.shape_str() + " onto " + a.shape_str());
      }
      if (n.op == Op::kAdd) {
        n.value = broadcast_apply(a, b, kind, [](double x, double y) { return x + y; });
      } else if (n.op == Op::kSub) {
        n.value = broadcast_apply(a, b, kind, [](double x, double y) { return x - y; });
      } else {
        n.value = broadcast_apply(a, b, kind, [](double x, double y) { return x * y; });
      }
      return;
    }
    case Op::kScale: {
      n.value = in(0);
      for (double& v : n.value.data()) v *= n.attr;
      return;
    }
    case Op::kMatMul: {
      const Matrix& a = in(0);
      const Matrix& b = in(1);
      if (a.cols() != b.rows()) shape_fail(n, a.shape_str() + " times " + b.shape_str());
      n.value = mte::matmul(a, b);
      return;
    }
    case Op::kRelu:
      n.value = in(0);
      for (double& v : n.value.data()) v = v > 0.0 ? v : 0.0;
      return;
    case Op::kExp:
      n.value = in(0);
      for (double& v : n.value.data()) v = std::exp(v);
      return;
    case Op::kLog:
      n.value = in(0);
      for (double& v : n.value.data()) v = std::log(std::max(v, kLogFloor));
      return;
    case Op::kSum: {
      double s = 0.0;
      for (double v : in(0).data()) s += v;
      n.value = Matrix::scalar(s);
      return;
    }
    case Op::kRowSum: {
      const Matrix& a = in(0);
      n.value = Matrix(a.rows(), 1);
      for (std::size_t r = 0; r < a.rows(); ++r) {
        double s = 0.0;
        for (double v : a.row_span(r)) s += v;
        n.value[r] = s;
      }
      return;
    }
    case Op::kLogSoftmax:
      if (in(0).cols() == 0) shape_fail(n, "log_softmax over zero columns");
      n.value = log_softmax_rows(in(0));
      return;
  }
}

void Tape::forward(const Bindings& bindings) {
  for (const auto& [id, value] : bindings) {
    check_id(id);
    Node& n = nodes_[id];
    if (n.op != Op::kParameter && n.op != Op::kConstant) {
      throw InvalidArgument("node " + std::to_string(id) + " (" + std::string(op_name(n.op)) +
                            ") is not a leaf and cannot be bound");
    }
    if (!value.all_finite()) {
      throw NonFiniteError("node " + std::to_string(id) + ": non-finite binding");
    }
    n.value = value;
  }
  for (Node& n : nodes_) evaluate(n);
}

Gradients Tape::backward(NodeId seed) const {
  check_id(seed);
  if (!nodes_[seed].value.is_scalar()) {
    throw ShapeError("backward seed node " + std::to_string(seed) + " is " +
                     nodes_[seed].value.shape_str() + ", expected a scalar");
  }
  std::vector<Matrix> adj(seed + 1);
  adj[seed] = Matrix::scalar(1.0);

  for (std::size_t idx = seed + 1; idx-- > 0;) {
    const Node& n = nodes_[idx];
    if (adj[idx].empty() || !n.requires_grad || n.parents.empty()) continue;
    const Matrix& g = adj[idx];
    auto wants = [&](std::size_t i) { return nodes_[n.parents[i]].requires_grad; };
    auto pval = [&](std::size_t i) -> const Matrix& { return nodes_[n.parents[i]].value; };
    auto slot = [&](std::size_t i) -> Matrix& { return adj[n.parents[i]]; };

    switch (n.op) {
      case Op::kConstant:
      case Op::kParameter:
      case Op::kDetach:
        break;
      case Op::kAdd:
      case Op::kSub:
      case Op::kMul: {
        const Matrix& a = pval(0);
        const Matrix& b = pval(1);
        const Broadcast kind = classify(a, b);
        if (wants(0)) {
          if (n.op == Op::kMul) {
            accumulate(slot(0), broadcast_apply(g, b, kind, [](double x, double y) { return x * y; }));
          } else {
            accumulate(slot(0), g);
          }
        }
        if (wants(1)) {
          Matrix full = g;
          if (n.op == Op::kSub) {
            for (double& v : full.data()) v = -v;
          } else if (n.op == Op::kMul) {
            auto& f = full.data();
            for (std::size_t i = 0; i < f.size(); ++i) f[i] *= a[i];
          }
          accumulate(slot(1), reduce_to(full, b, kind));
        }
        break;
      }
      case Op::kScale: {
        Matrix d = g;
        for (double& v : d.data()) v *= n.attr;
        accumulate(slot(0), std::move(d));
        break;
      }
      case Op::kMatMul: {
        const Matrix& a = pval(0);
        const Matrix& b = pval(1);
        const std::size_t rows = a.rows(), inner = a.cols(), cols = b.cols();
        if (wants(0)) {
          // dA = G * B^T
          Matrix da(rows, inner);
          for (std::size_t i = 0; i < rows; ++i) {
            const double* grow = g.row_span(i).data();
            for (std::size_t p = 0; p < inner; ++p) {
              const double* brow = b.row_span(p).data();
              double s = 0.0;
              for (std::size_t j = 0; j < cols; ++j) s += grow[j] * brow[j];
              da(i, p) = s;
            }
          }
          accumulate(slot(0), std::move(da));
        }
        if (wants(1)) {
          // dB = A^T * G
          Matrix db(inner, cols);
          for (std::size_t i = 0; i < rows; ++i) {
            const double* grow = g.row_span(i).data();
            for (std::size_t p = 0; p < inner; ++p) {
              const double av = a(i, p);
              double* drow = db.row_span(p).data();
              for (std::size_t j = 0; j < cols; ++j) drow[j] += av * grow[j];
            }
          }
          accumulate(slot(1), std::move(db));
        }
        break;
      }
      case Op::kRelu: {
        Matrix d = g;
        const Matrix& x = pval(0);
        for (std::size_t i = 0; i < d.size(); ++i) d[i] = x[i] > 0.0 ? d[i] : 0.0;
        accumulate(slot(0), std::move(d));
        break;
      }
      case Op::kExp: {
        Matrix d = g;
        for (std::size_t i = 0; i < d.size(); ++i) d[i] *= n.value[i];
        accumulate(slot(0), std::move(d));
        break;
      }
      case Op::kLog: {
        Matrix d = g;
        const Matrix& x = pval(0);
        for (std::size_t i = 0; i < d.size(); ++i) d[i] = x[i] >= kLogFloor ? d[i] / x[i] : 0.0;
        accumulate(slot(0), std::move(d));
        break;
      }
      case Op::kSum: {
        const Matrix& x = pval(0);
        accumulate(slot(0), Matrix(x.rows(), x.cols(), g[0]));
        break;
      }
      case Op::kRowSum: {
        const Matrix& x = pval(0);
        Matrix d(x.rows(), x.cols());
        for (std::size_t r = 0; r < x.rows(); ++r) {
          for (double& v : d.row_span(r)) v = g[r];
        }
        accumulate(slot(0), std::move(d));
        break;
      }
      case Op::kLogSoftmax: {
        // dz = g - softmax * rowsum(g)
        Matrix d(g.rows(), g.cols());
        for (std::size_t r = 0; r < g.rows(); ++r) {
          auto gr = g.row_span(r);
          double gs = 0.0;
          for (double v : gr) gs += v;
          auto y = n.value.row_span(r);
          auto dr = d.row_span(r);
          for (std::size_t c = 0; c < gr.size(); ++c) dr[c] = gr[c] - std::exp(y[c]) * gs;
        }
        accumulate(slot(0), std::move(d));
        break;
      }
    }
  }

  Gradients grads;
  for (NodeId p : parameters_) {
    const Matrix& v = nodes_[p].value;
    if (p <= seed && !adj[p].empty()) {
      grads.emplace(p, adj[p]);
    } else {
      grads.emplace(p, Matrix(v.rows(), v.cols()));
    }
  }
  return grads;
}

double check_gradients_fd(Tape& tape, NodeId seed, double step) {
  if (!(step > 0.0) || !std::isfinite(step)) throw InvalidArgument("finite-difference step must be > 0");
  const Gradients analytic = tape.backward(seed);
  double worst = 0.0;
  for (NodeId p : tape.parameters()) {
    const Matrix original = tape.value(p);
    if (!original.all_finite()) throw NonFiniteError("parameter " + std::to_string(p) + " is not finite");
    const Matrix& grad = analytic.at(p);
    Matrix probe = original;
    for (std::size_t i = 0; i < original.size(); ++i) {
      probe[i] = original[i] + step;
      tape.forward({{p, probe}});
      const double plus = tape.value(seed)[0];
      probe[i] = original[i] - step;
      tape.forward({{p, probe}});
      const double minus = tape.value(seed)[0];
      probe[i] = original[i];
      if (!std::isfinite(plus) || !std::isfinite(minus)) {
        tape.forward({{p, original}});
        throw NonFiniteError("non-finite loss while perturbing parameter " + std::to_string(p) +
                             " coordinate " + std::to_string(i));
      }
      const double fd = (plus - minus) / (2.0 * step);
      const double a = grad[i];
      worst = std::max(worst, std::abs(a - fd) / std::max(1.0, std::abs(a)));
    }
    tape.forward({{p, original}});
  }
  return worst;
}

}  // namespace mte::ad
