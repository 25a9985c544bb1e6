#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dcco/tensor.hpp"

namespace dcco {

using NodeId = std::int32_t;

enum class OpKind : std::uint8_t {
  kInput,
  kParam,
  kConstant,
  kAdd,
  kSub,
  kMul,
  kDiv,
  kAddScalar,
  kMulScalar,
  kMatMul,
  kTranspose,
  kBroadcast,
  kMeanAxis,
  kSumAxis,
  kSumAll,
  kMaxAxis,
  kSquare,
  kSqrt,
  kExp,
  kLog,
  kRelu,
  kStopGradient,
  kInject,
  kConcat,
};

const char* op_name(OpKind op);

class Graph;

// Lightweight handle to a node; supports operator expressions.
struct Value {
  Graph* graph = nullptr;
  NodeId id = -1;
  bool valid() const { return graph != nullptr && id >= 0; }
};

// Gradients keyed by node id. Nodes the loss does not reach get exact zeros.
class GradientMap {
 public:
  GradientMap(std::vector<std::optional<Tensor>> grads, std::vector<std::vector<Index>> shapes)
      : grads_(std::move(grads)), shapes_(std::move(shapes)) {}

  bool reached(NodeId id) const {
    return id >= 0 && static_cast<std::size_t>(id) < grads_.size() &&
           grads_[static_cast<std::size_t>(id)].has_value();
  }

  // Gradient of the loss w.r.t. the node's output; same shape as that output.
  const Tensor& grad(NodeId id) const;
  const Tensor& grad(const Value& v) const { return grad(v.id); }

 private:
  mutable std::vector<std::optional<Tensor>> grads_;
  std::vector<std::vector<Index>> shapes_;
};

// Reverse-mode autodiff tape over Tensors. Graphs are built per forward pass
// (define-by-run); ops evaluate eagerly when all inputs are bound, and the
// whole tape can be re-executed after rebinding leaves. A graph instance is
// confined to one thread; Tensors move freely between threads.
class Graph {
 public:
  struct Node {
    OpKind op;
    std::array<NodeId, 2> in{-1, -1};
    std::vector<NodeId> in_list;  // kConcat only
    std::vector<Index> shape;
    std::optional<Tensor> value;
    double scalar = 0.0;           // kAddScalar / kMulScalar
    int axis = -1;                 // reductions / concat
    Index target_rows = 0;         // kBroadcast
    Index target_cols = 0;         // kBroadcast
    Tensor aux;                    // kInject: the value to expose forward
    std::vector<Index> argmax;     // kMaxAxis routing, refreshed per execution
    std::string name;              // leaves
  };

  // Leaves. input() with a tensor binds immediately; placeholder() defers
  // binding to forward(). Named leaves must be unique per graph.
  Value input(const std::string& name, Tensor value);
  Value placeholder(const std::string& name, std::vector<Index> shape);
  Value param(const std::string& name, Tensor value);
  Value constant(Tensor value);

  // Rebinds a leaf; shape must match the declared one.
  void bind(const std::string& name, Tensor value);
  void bind(NodeId id, Tensor value);

  void mark_output(const std::string& name, Value v);

  const Tensor& value(NodeId id) const;
  const Tensor& value(const Value& v) const { return value(v.id); }
  const std::vector<Index>& shape(NodeId id) const;
  const Node& node(NodeId id) const { return nodes_.at(static_cast<std::size_t>(id)); }
  std::size_t size() const { return nodes_.size(); }
  NodeId find(const std::string& name) const;

  // Binds the given inputs, re-executes the tape, and returns every marked
  // output. Throws UnboundInput if any placeholder remains unbound.
  std::map<std::string, Tensor> forward(const std::map<std::string, Tensor>& inputs);

  // Re-executes every non-leaf node against the current leaf bindings.
  void execute();

  // Reverse pass from a scalar loss node; seeds d(loss)/d(loss) = 1.
  GradientMap backward(NodeId loss);
  GradientMap backward(const Value& loss) { return backward(loss.id); }

  // Op builders; prefer the free functions below.
  Value make_binary(OpKind op, Value a, Value b);
  Value make_unary(OpKind op, Value a);
  Value make_scalar_op(OpKind op, Value a, double s);
  Value make_matmul(Value a, Value b);
  Value make_transpose(Value a);
  Value make_broadcast(Value a, Index rows, Index cols);
  Value make_reduce(OpKind op, Value a, int axis);
  Value make_sum_all(Value a);
  Value make_inject(Value a, Tensor forward_value);
  Value make_concat(const std::vector<Value>& parts, int axis);

 private:
  Value add_node(Node n);
  void compute(std::size_t i);
  void check_same_graph(const Value& a) const;

  std::vector<Node> nodes_;
  std::map<std::string, NodeId> named_;
  std::map<std::string, NodeId> outputs_;
};

// Elementwise arithmetic (identical shapes).
Value operator+(Value a, Value b);
Value operator-(Value a, Value b);
Value operator*(Value a, Value b);
Value operator/(Value a, Value b);

// Scalar forms.
Value operator+(Value a, double s);
Value operator+(double s, Value a);
Value operator-(Value a, double s);
Value operator*(Value a, double s);
Value operator*(double s, Value a);
Value operator-(Value a);

Value matmul(Value a, Value b);
Value transpose(Value a);
Value broadcast_to(Value a, Index rows, Index cols);
Value mean_axis(Value a, int axis);
Value sum_axis(Value a, int axis);
Value sum_all(Value a);
Value max_axis(Value a, int axis);
Value square(Value a);
Value sqrt(Value a);
Value exp(Value a);
Value log(Value a);
Value relu(Value a);

// Identity forward, zero gradient to every ancestor.
Value stop_gradient(Value a);

// Exposes `forward_value` as the node's output while routing gradients to `a`
// unchanged. This is the statistics-combination primitive: x + sg(v - x) in
// exact arithmetic, with the forward side bitwise equal to v.
Value inject(Value a, Tensor forward_value);

Value concat(const std::vector<Value>& parts, int axis);

// Numerical gradient verification via central differences.
struct FiniteDiffReport {
  double max_rel_err = 0.0;
  double max_abs_err = 0.0;
  Index worst_flat_index = -1;
  double tol = 0.0;
  bool pass = false;
};

// Compares backward() against central finite differences on one leaf tensor.
// Relative error uses a small floor so entries whose true gradient is zero are
// judged on the roundoff scale instead of dividing by zero.
FiniteDiffReport finite_diff_check(Graph& g, Value loss, Value param, double step, double tol);

}  // namespace dcco
