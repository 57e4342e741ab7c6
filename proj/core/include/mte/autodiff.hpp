// SPDX-License-Identifier: Apache-2.0
#pragma once

// Minimal define-by-run reverse-mode autodiff over dense double matrices.
//
// Nodes are evaluated eagerly when they are recorded, so a Tape built for one
// mini-batch already holds every forward value. Tape::forward replays the
// recorded program with new leaf values (used by the finite-difference checker),
// and Tape::backward propagates adjoints from a scalar seed to every parameter.
// Detach nodes copy their parent's value and stop gradient flow.

#include <cstddef>
#include <map>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "mte/matrix.hpp"

namespace mte::ad {

using NodeId = std::size_t;

enum class Op {
  kConstant,
  kParameter,
  kDetach,
  kAdd,
  kSub,
  kMul,
  kScale,
  kMatMul,
  kRelu,
  kExp,
  kLog,
  kSum,
  kRowSum,
  kLogSoftmax,
};

std::string_view op_name(Op op);

/// Inputs below this are clamped before kLog; the clamped region has zero slope.
inline constexpr double kLogFloor = 1e-12;

struct Node {
  NodeId id = 0;
  Op op = Op::kConstant;
  std::vector<NodeId> parents;
  double attr = 0.0;  // factor for kScale
  bool requires_grad = false;
  Matrix value;
};

/// Replacement leaf values for Tape::forward, keyed by parameter/constant id.
using Bindings = std::unordered_map<NodeId, Matrix>;
/// Gradient of the seed with respect to each parameter node.
using Gradients = std::map<NodeId, Matrix>;

class Tape {
 public:
  NodeId constant(Matrix value);
  NodeId parameter(Matrix value);
  /// Same value as `node`; backward treats it as a constant.
  NodeId detach(NodeId node);

  // Binary ops accept an rhs of the same shape, a 1xC row, an Rx1 column,
  // or a 1x1 scalar, broadcast over the lhs.
  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId scale(NodeId a, double factor);
  NodeId matmul(NodeId a, NodeId b);
  NodeId relu(NodeId a);
  NodeId exp(NodeId a);
  NodeId log(NodeId a);
  /// Sum of all entries, 1x1.
  NodeId sum(NodeId a);
  /// Per-row sums, Rx1.
  NodeId row_sum(NodeId a);
  /// Row-wise log-softmax, stabilized by subtracting the row maximum.
  NodeId log_softmax(NodeId a);

  const Node& node(NodeId id) const;
  const Matrix& value(NodeId id) const { return node(id).value; }
  bool requires_grad(NodeId id) const { return node(id).requires_grad; }
  std::size_t size() const { return nodes_.size(); }
  const std::vector<NodeId>& parameters() const { return parameters_; }

  /// Re-evaluates the whole tape after substituting the bound leaf values.
  /// Unbound leaves keep their current value. Throws ShapeError naming the
  /// offending node, NonFiniteError for non-finite bindings.
  void forward(const Bindings& bindings);

  /// Reverse sweep from a scalar seed. Every parameter receives an entry,
  /// zero-filled when the seed does not depend on it.
  Gradients backward(NodeId seed) const;

 private:
  NodeId record(Op op, std::vector<NodeId> parents, double attr = 0.0);
  void evaluate(Node& n) const;
  void check_id(NodeId id) const;

  std::vector<Node> nodes_;
  std::vector<NodeId> parameters_;
};

/// Row-wise log-softmax of a value matrix (same arithmetic as Tape::log_softmax).
Matrix log_softmax_rows(const Matrix& logits);

/// Central finite-difference check of Tape::backward at the current parameter values.
/// Returns max over parameter coordinates of |analytic - fd| / max(1, |analytic|).
/// Leaves parameter values unchanged.
double check_gradients_fd(Tape& tape, NodeId seed, double step);

}  // namespace mte::ad
