#include "dcco/graph.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

#include "dcco/errors.hpp"

namespace dcco {

namespace {

// Relative-error floor for finite differences: entries whose true gradient is
// ~0 otherwise divide roundoff noise by itself and fail spuriously.
constexpr double kRelFloor = 1e-4;

std::string shape_of(const std::vector<Index>& s) {
  std::string out = "{";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "}";
}

void require_graph_rank(const Tensor& t, const char* where) {
  if (t.rank() == 1)
    throw ShapeMismatch(std::string(where) + ": graph tensors are rank 0 or rank 2, got rank 1");
}

}  // namespace

const char* op_name(OpKind op) {
  switch (op) {
    case OpKind::kInput: return "input";
    case OpKind::kParam: return "param";
    case OpKind::kConstant: return "constant";
    case OpKind::kAdd: return "add";
    case OpKind::kSub: return "sub";
    case OpKind::kMul: return "mul";
    case OpKind::kDiv: return "div";
    case OpKind::kAddScalar: return "add_scalar";
    case OpKind::kMulScalar: return "mul_scalar";
    case OpKind::kMatMul: return "matmul";
    case OpKind::kTranspose: return "transpose";
    case OpKind::kBroadcast: return "broadcast_to";
    case OpKind::kMeanAxis: return "mean_axis";
    case OpKind::kSumAxis: return "sum_axis";
    case OpKind::kSumAll: return "sum_all";
    case OpKind::kMaxAxis: return "max_axis";
    case OpKind::kSquare: return "square";
    case OpKind::kSqrt: return "sqrt";
    case OpKind::kExp: return "exp";
    case OpKind::kLog: return "log";
    case OpKind::kRelu: return "relu";
    case OpKind::kStopGradient: return "stop_gradient";
    case OpKind::kInject: return "inject";
    case OpKind::kConcat: return "concat";
  }
  return "?";
}

const Tensor& GradientMap::grad(NodeId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= grads_.size())
    throw Error("gradient requested for unknown node " + std::to_string(id));
  auto& slot = grads_[static_cast<std::size_t>(id)];
  if (!slot) slot = Tensor::zeros(shapes_[static_cast<std::size_t>(id)]);
  return *slot;
}

Value Graph::input(const std::string& name, Tensor value) {
  require_graph_rank(value, "input");
  Node n;
  n.op = OpKind::kInput;
  n.shape = value.shape();
  n.value = std::move(value);
  n.name = name;
  return add_node(std::move(n));
}

Value Graph::placeholder(const std::string& name, std::vector<Index> shape) {
  Node n;
  n.op = OpKind::kInput;
  n.shape = std::move(shape);
  n.name = name;
  if (n.shape.size() == 1)
    throw ShapeMismatch("placeholder: graph tensors are rank 0 or rank 2, got rank 1");
  return add_node(std::move(n));
}

Value Graph::param(const std::string& name, Tensor value) {
  require_graph_rank(value, "param");
  Node n;
  n.op = OpKind::kParam;
  n.shape = value.shape();
  n.value = std::move(value);
  n.name = name;
  return add_node(std::move(n));
}

Value Graph::constant(Tensor value) {
  require_graph_rank(value, "constant");
  Node n;
  n.op = OpKind::kConstant;
  n.shape = value.shape();
  n.value = std::move(value);
  return add_node(std::move(n));
}

void Graph::bind(const std::string& name, Tensor value) {
  auto it = named_.find(name);
  if (it == named_.end()) throw UnboundInput("bind: no leaf named '" + name + "'");
  bind(it->second, std::move(value));
}

void Graph::bind(NodeId id, Tensor value) {
  Node& n = nodes_.at(static_cast<std::size_t>(id));
  if (n.op != OpKind::kInput && n.op != OpKind::kParam)
    throw Error("bind: node " + std::to_string(id) + " is not a bindable leaf");
  if (value.shape() != n.shape)
    throw ShapeMismatch("bind '" + n.name + "': expected " + shape_of(n.shape) + ", got " +
                        shape_of(value.shape()));
  n.value = std::move(value);
}

void Graph::mark_output(const std::string& name, Value v) {
  check_same_graph(v);
  if (outputs_.count(name)) throw Error("mark_output: duplicate output '" + name + "'");
  outputs_[name] = v.id;
}

const Tensor& Graph::value(NodeId id) const {
  const Node& n = nodes_.at(static_cast<std::size_t>(id));
  if (!n.value)
    throw UnboundInput("node " + std::to_string(id) + " (" + op_name(n.op) +
                       (n.name.empty() ? "" : " '" + n.name + "'") + ") has no value");
  return *n.value;
}

const std::vector<Index>& Graph::shape(NodeId id) const {
  return nodes_.at(static_cast<std::size_t>(id)).shape;
}

NodeId Graph::find(const std::string& name) const {
  auto it = named_.find(name);
  return it == named_.end() ? -1 : it->second;
}

std::map<std::string, Tensor> Graph::forward(const std::map<std::string, Tensor>& inputs) {
  for (const auto& [name, t] : inputs) bind(name, t);
  execute();
  std::map<std::string, Tensor> out;
  for (const auto& [name, id] : outputs_) out.emplace(name, value(id));
  return out;
}

void Graph::execute() {
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    Node& n = nodes_[i];
    if (n.op == OpKind::kInput || n.op == OpKind::kParam || n.op == OpKind::kConstant) {
      if (!n.value) throw UnboundInput("execute: leaf '" + n.name + "' is unbound");
      continue;
    }
    compute(i);
  }
}

Value Graph::add_node(Node n) {
  if (!n.name.empty()) {
    if (named_.count(n.name)) throw Error("duplicate leaf name '" + n.name + "'");
    named_[n.name] = static_cast<NodeId>(nodes_.size());
  }
  const NodeId id = static_cast<NodeId>(nodes_.size());
  nodes_.push_back(std::move(n));
  Node& stored = nodes_.back();
  const bool is_leaf = stored.op == OpKind::kInput || stored.op == OpKind::kParam ||
                       stored.op == OpKind::kConstant;
  if (!is_leaf) {
    // Eager evaluation when every input already has a value.
    bool ready = true;
    for (NodeId in : stored.in)
      if (in >= 0 && !nodes_[static_cast<std::size_t>(in)].value) ready = false;
    for (NodeId in : stored.in_list)
      if (!nodes_[static_cast<std::size_t>(in)].value) ready = false;
    if (ready) compute(nodes_.size() - 1);
  }
  return Value{this, id};
}

void Graph::compute(std::size_t i) {
  Node& n = nodes_[i];
  auto in_mat = [&](int slot) -> const Matrix& {
    return nodes_[static_cast<std::size_t>(n.in[static_cast<std::size_t>(slot)])].value->mat();
  };
  Matrix out;
  switch (n.op) {
    case OpKind::kInput:
    case OpKind::kParam:
    case OpKind::kConstant:
      return;
    case OpKind::kAdd: out = in_mat(0) + in_mat(1); break;
    case OpKind::kSub: out = in_mat(0) - in_mat(1); break;
    case OpKind::kMul: out = in_mat(0).cwiseProduct(in_mat(1)); break;
    case OpKind::kDiv: out = in_mat(0).cwiseQuotient(in_mat(1)); break;
    case OpKind::kAddScalar: out = in_mat(0).array() + n.scalar; break;
    case OpKind::kMulScalar: out = in_mat(0) * n.scalar; break;
    case OpKind::kMatMul: out = row_stable_product(in_mat(0), in_mat(1)); break;
    case OpKind::kTranspose: out = in_mat(0).transpose(); break;
    case OpKind::kBroadcast: {
      const Matrix& a = in_mat(0);
      out = a.replicate(n.target_rows / a.rows(), n.target_cols / a.cols());
      break;
    }
    case OpKind::kMeanAxis:
      out = n.axis == 0 ? Matrix(in_mat(0).colwise().mean())
                        : Matrix(in_mat(0).rowwise().mean());
      break;
    case OpKind::kSumAxis:
      out = n.axis == 0 ? Matrix(in_mat(0).colwise().sum())
                        : Matrix(in_mat(0).rowwise().sum());
      break;
    case OpKind::kSumAll: {
      out.resize(1, 1);
      out(0, 0) = in_mat(0).sum();
      break;
    }
    case OpKind::kMaxAxis: {
      const Matrix& a = in_mat(0);
      if (n.axis == 0) {
        out.resize(1, a.cols());
        n.argmax.assign(static_cast<std::size_t>(a.cols()), 0);
        for (Index c = 0; c < a.cols(); ++c) {
          Index r = 0;
          out(0, c) = a.col(c).maxCoeff(&r);
          n.argmax[static_cast<std::size_t>(c)] = r;
        }
      } else {
        out.resize(a.rows(), 1);
        n.argmax.assign(static_cast<std::size_t>(a.rows()), 0);
        for (Index r = 0; r < a.rows(); ++r) {
          Index c = 0;
          out(r, 0) = a.row(r).maxCoeff(&c);
          n.argmax[static_cast<std::size_t>(r)] = c;
        }
      }
      break;
    }
    case OpKind::kSquare: out = in_mat(0).array().square(); break;
    case OpKind::kSqrt: out = in_mat(0).array().sqrt(); break;
    case OpKind::kExp: out = in_mat(0).array().exp(); break;
    case OpKind::kLog: out = in_mat(0).array().log(); break;
    case OpKind::kRelu: out = in_mat(0).cwiseMax(0.0); break;
    case OpKind::kStopGradient: out = in_mat(0); break;
    case OpKind::kInject: out = n.aux.mat(); break;
    case OpKind::kConcat: {
      out.resize(n.shape[0], n.shape[1]);
      Index off = 0;
      for (NodeId pid : n.in_list) {
        const Matrix& p = nodes_[static_cast<std::size_t>(pid)].value->mat();
        if (n.axis == 0) {
          out.middleRows(off, p.rows()) = p;
          off += p.rows();
        } else {
          out.middleCols(off, p.cols()) = p;
          off += p.cols();
        }
      }
      break;
    }
  }
  n.value = Tensor::from_matrix(std::move(out), n.shape);
  if (!n.value->all_finite())
    throw NumericError(std::string("non-finite value in forward op ") + op_name(n.op));
}

GradientMap Graph::backward(NodeId loss) {
  if (loss < 0 || static_cast<std::size_t>(loss) >= nodes_.size())
    throw Error("backward: unknown node " + std::to_string(loss));
  if (!nodes_[static_cast<std::size_t>(loss)].value) execute();
  const Tensor& lv = value(loss);
  if (lv.size() != 1)
    throw NonScalarLoss("backward: loss must be a scalar, got shape " +
                        shape_of(nodes_[static_cast<std::size_t>(loss)].shape));

  std::vector<std::optional<Matrix>> g(nodes_.size());
  g[static_cast<std::size_t>(loss)] = Matrix::Ones(1, 1);

  auto acc = [&](NodeId id, const Matrix& partial) {
    if (nodes_[static_cast<std::size_t>(id)].op == OpKind::kConstant) return;
    auto& slot = g[static_cast<std::size_t>(id)];
    if (!slot)
      slot = partial;
    else
      *slot += partial;
  };

  for (NodeId i = loss; i >= 0; --i) {
    auto& gi_opt = g[static_cast<std::size_t>(i)];
    if (!gi_opt) continue;
    const Matrix& gi = *gi_opt;
    if (!gi.allFinite())
      throw NumericError(std::string("non-finite gradient at op ") +
                         op_name(nodes_[static_cast<std::size_t>(i)].op));
    const Node& n = nodes_[static_cast<std::size_t>(i)];
    auto vin = [&](int slot) -> const Matrix& {
      return nodes_[static_cast<std::size_t>(n.in[static_cast<std::size_t>(slot)])].value->mat();
    };
    switch (n.op) {
      case OpKind::kInput:
      case OpKind::kParam:
      case OpKind::kConstant:
      case OpKind::kStopGradient:
        break;
      case OpKind::kAdd:
        acc(n.in[0], gi);
        acc(n.in[1], gi);
        break;
      case OpKind::kSub:
        acc(n.in[0], gi);
        acc(n.in[1], -gi);
        break;
      case OpKind::kMul:
        acc(n.in[0], gi.cwiseProduct(vin(1)));
        acc(n.in[1], gi.cwiseProduct(vin(0)));
        break;
      case OpKind::kDiv: {
        const Matrix& b = vin(1);
        acc(n.in[0], gi.cwiseQuotient(b));
        acc(n.in[1], Matrix(-gi.cwiseProduct(n.value->mat()).cwiseQuotient(b)));
        break;
      }
      case OpKind::kAddScalar:
        acc(n.in[0], gi);
        break;
      case OpKind::kMulScalar:
        acc(n.in[0], Matrix(gi * n.scalar));
        break;
      case OpKind::kMatMul:
        acc(n.in[0], Matrix(gi * vin(1).transpose()));
        acc(n.in[1], Matrix(vin(0).transpose() * gi));
        break;
      case OpKind::kTranspose:
        acc(n.in[0], Matrix(gi.transpose()));
        break;
      case OpKind::kBroadcast: {
        const Matrix& a = vin(0);
        Matrix partial;
        if (a.rows() == 1 && a.cols() == 1) {
          partial.resize(1, 1);
          partial(0, 0) = gi.sum();
        } else if (a.rows() == 1) {
          partial = gi.colwise().sum();
        } else {
          partial = gi.rowwise().sum();
        }
        acc(n.in[0], partial);
        break;
      }
      case OpKind::kMeanAxis: {
        const Matrix& a = vin(0);
        if (n.axis == 0)
          acc(n.in[0], Matrix(gi.replicate(a.rows(), 1) / static_cast<double>(a.rows())));
        else
          acc(n.in[0], Matrix(gi.replicate(1, a.cols()) / static_cast<double>(a.cols())));
        break;
      }
      case OpKind::kSumAxis: {
        const Matrix& a = vin(0);
        if (n.axis == 0)
          acc(n.in[0], Matrix(gi.replicate(a.rows(), 1)));
        else
          acc(n.in[0], Matrix(gi.replicate(1, a.cols())));
        break;
      }
      case OpKind::kSumAll: {
        const Matrix& a = vin(0);
        acc(n.in[0], Matrix(Matrix::Constant(a.rows(), a.cols(), gi(0, 0))));
        break;
      }
      case OpKind::kMaxAxis: {
        const Matrix& a = vin(0);
        Matrix partial = Matrix::Zero(a.rows(), a.cols());
        if (n.axis == 0) {
          for (Index c = 0; c < a.cols(); ++c)
            partial(n.argmax[static_cast<std::size_t>(c)], c) = gi(0, c);
        } else {
          for (Index r = 0; r < a.rows(); ++r)
            partial(r, n.argmax[static_cast<std::size_t>(r)]) = gi(r, 0);
        }
        acc(n.in[0], partial);
        break;
      }
      case OpKind::kSquare:
        acc(n.in[0], Matrix(2.0 * gi.cwiseProduct(vin(0))));
        break;
      case OpKind::kSqrt:
        acc(n.in[0], Matrix(0.5 * gi.cwiseQuotient(n.value->mat())));
        break;
      case OpKind::kExp:
        acc(n.in[0], Matrix(gi.cwiseProduct(n.value->mat())));
        break;
      case OpKind::kLog:
        acc(n.in[0], Matrix(gi.cwiseQuotient(vin(0))));
        break;
      case OpKind::kRelu:
        acc(n.in[0], Matrix(gi.cwiseProduct(
                         (vin(0).array() > 0.0).cast<double>().matrix())));
        break;
      case OpKind::kInject:
        acc(n.in[0], gi);
        break;
      case OpKind::kConcat: {
        Index off = 0;
        for (NodeId pid : n.in_list) {
          const Matrix& p = nodes_[static_cast<std::size_t>(pid)].value->mat();
          if (n.axis == 0) {
            acc(pid, Matrix(gi.middleRows(off, p.rows())));
            off += p.rows();
          } else {
            acc(pid, Matrix(gi.middleCols(off, p.cols())));
            off += p.cols();
          }
        }
        break;
      }
    }
  }

  std::vector<std::optional<Tensor>> grads(nodes_.size());
  std::vector<std::vector<Index>> shapes(nodes_.size());
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    shapes[i] = nodes_[i].shape;
    if (g[i]) grads[i] = Tensor::from_matrix(std::move(*g[i]), nodes_[i].shape);
  }
  return GradientMap(std::move(grads), std::move(shapes));
}

void Graph::check_same_graph(const Value& a) const {
  if (a.graph != this || a.id < 0 || static_cast<std::size_t>(a.id) >= nodes_.size())
    throw Error("value handle does not belong to this graph");
}

Value Graph::make_binary(OpKind op, Value a, Value b) {
  check_same_graph(a);
  check_same_graph(b);
  const auto& sa = shape(a.id);
  const auto& sb = shape(b.id);
  if (sa != sb)
    throw ShapeMismatch(std::string(op_name(op)) + ": shapes " + shape_of(sa) + " vs " +
                        shape_of(sb));
  Node n;
  n.op = op;
  n.in = {a.id, b.id};
  n.shape = sa;
  return add_node(std::move(n));
}

Value Graph::make_unary(OpKind op, Value a) {
  check_same_graph(a);
  Node n;
  n.op = op;
  n.in = {a.id, -1};
  n.shape = shape(a.id);
  return add_node(std::move(n));
}

Value Graph::make_scalar_op(OpKind op, Value a, double s) {
  check_same_graph(a);
  Node n;
  n.op = op;
  n.in = {a.id, -1};
  n.shape = shape(a.id);
  n.scalar = s;
  return add_node(std::move(n));
}

Value Graph::make_matmul(Value a, Value b) {
  check_same_graph(a);
  check_same_graph(b);
  const auto& sa = shape(a.id);
  const auto& sb = shape(b.id);
  if (sa.size() != 2 || sb.size() != 2)
    throw ShapeMismatch("matmul: both operands must be rank 2");
  if (sa[1] != sb[0])
    throw ShapeMismatch("matmul: inner dimensions " + shape_of(sa) + " vs " + shape_of(sb));
  Node n;
  n.op = OpKind::kMatMul;
  n.in = {a.id, b.id};
  n.shape = {sa[0], sb[1]};
  return add_node(std::move(n));
}

Value Graph::make_transpose(Value a) {
  check_same_graph(a);
  const auto& sa = shape(a.id);
  if (sa.size() != 2) throw ShapeMismatch("transpose: operand must be rank 2");
  Node n;
  n.op = OpKind::kTranspose;
  n.in = {a.id, -1};
  n.shape = {sa[1], sa[0]};
  return add_node(std::move(n));
}

Value Graph::make_broadcast(Value a, Index rows, Index cols) {
  check_same_graph(a);
  if (rows <= 0 || cols <= 0) throw ShapeMismatch("broadcast_to: target must be positive");
  const auto& sa = shape(a.id);
  Index ar = 1, ac = 1;
  if (sa.size() == 2) {
    ar = sa[0];
    ac = sa[1];
  } else if (sa.size() == 1) {
    throw ShapeMismatch("broadcast_to: rank-1 operand");
  }
  if ((ar != 1 && ar != rows) || (ac != 1 && ac != cols))
    throw ShapeMismatch("broadcast_to: cannot expand " + shape_of(sa) + " to {" +
                        std::to_string(rows) + "," + std::to_string(cols) + "}");
  Node n;
  n.op = OpKind::kBroadcast;
  n.in = {a.id, -1};
  n.shape = {rows, cols};
  n.target_rows = rows;
  n.target_cols = cols;
  return add_node(std::move(n));
}

Value Graph::make_reduce(OpKind op, Value a, int axis) {
  check_same_graph(a);
  if (axis != 0 && axis != 1)
    throw ShapeMismatch(std::string(op_name(op)) + ": axis must be 0 or 1");
  const auto& sa = shape(a.id);
  if (sa.size() != 2) throw ShapeMismatch(std::string(op_name(op)) + ": operand must be rank 2");
  Node n;
  n.op = op;
  n.in = {a.id, -1};
  n.shape = axis == 0 ? std::vector<Index>{1, sa[1]} : std::vector<Index>{sa[0], 1};
  n.axis = axis;
  return add_node(std::move(n));
}

Value Graph::make_sum_all(Value a) {
  check_same_graph(a);
  Node n;
  n.op = OpKind::kSumAll;
  n.in = {a.id, -1};
  n.shape = {};
  return add_node(std::move(n));
}

Value Graph::make_inject(Value a, Tensor forward_value) {
  check_same_graph(a);
  if (forward_value.shape() != shape(a.id))
    throw ShapeMismatch("inject: value shape " + shape_of(forward_value.shape()) +
                        " vs operand " + shape_of(shape(a.id)));
  Node n;
  n.op = OpKind::kInject;
  n.in = {a.id, -1};
  n.shape = shape(a.id);
  n.aux = std::move(forward_value);
  return add_node(std::move(n));
}

Value Graph::make_concat(const std::vector<Value>& parts, int axis) {
  if (parts.empty()) throw EmptyList("concat: no operands");
  if (axis != 0 && axis != 1) throw ShapeMismatch("concat: axis must be 0 or 1");
  for (const Value& p : parts) check_same_graph(p);
  const auto& s0 = shape(parts[0].id);
  if (s0.size() != 2) throw ShapeMismatch("concat: operands must be rank 2");
  Index along = 0;
  const Index fixed = axis == 0 ? s0[1] : s0[0];
  Node n;
  n.op = OpKind::kConcat;
  n.axis = axis;
  for (const Value& p : parts) {
    const auto& sp = shape(p.id);
    if (sp.size() != 2) throw ShapeMismatch("concat: operands must be rank 2");
    const Index f = axis == 0 ? sp[1] : sp[0];
    if (f != fixed)
      throw ShapeMismatch("concat: off-axis dimension mismatch " + shape_of(sp) + " vs " +
                          shape_of(s0));
    along += axis == 0 ? sp[0] : sp[1];
    n.in_list.push_back(p.id);
  }
  n.shape = axis == 0 ? std::vector<Index>{along, fixed} : std::vector<Index>{fixed, along};
  return add_node(std::move(n));
}

Value operator+(Value a, Value b) { return a.graph->make_binary(OpKind::kAdd, a, b); }
Value operator-(Value a, Value b) { return a.graph->make_binary(OpKind::kSub, a, b); }
Value operator*(Value a, Value b) { return a.graph->make_binary(OpKind::kMul, a, b); }
Value operator/(Value a, Value b) { return a.graph->make_binary(OpKind::kDiv, a, b); }
Value operator+(Value a, double s) { return a.graph->make_scalar_op(OpKind::kAddScalar, a, s); }
Value operator+(double s, Value a) { return a + s; }
Value operator-(Value a, double s) { return a + (-s); }
Value operator*(Value a, double s) { return a.graph->make_scalar_op(OpKind::kMulScalar, a, s); }
Value operator*(double s, Value a) { return a * s; }
Value operator-(Value a) { return a * -1.0; }

Value matmul(Value a, Value b) { return a.graph->make_matmul(a, b); }
Value transpose(Value a) { return a.graph->make_transpose(a); }
Value broadcast_to(Value a, Index rows, Index cols) {
  return a.graph->make_broadcast(a, rows, cols);
}
Value mean_axis(Value a, int axis) { return a.graph->make_reduce(OpKind::kMeanAxis, a, axis); }
Value sum_axis(Value a, int axis) { return a.graph->make_reduce(OpKind::kSumAxis, a, axis); }
Value sum_all(Value a) { return a.graph->make_sum_all(a); }
Value max_axis(Value a, int axis) { return a.graph->make_reduce(OpKind::kMaxAxis, a, axis); }
Value square(Value a) { return a.graph->make_unary(OpKind::kSquare, a); }
Value sqrt(Value a) { return a.graph->make_unary(OpKind::kSqrt, a); }
Value exp(Value a) { return a.graph->make_unary(OpKind::kExp, a); }
Value log(Value a) { return a.graph->make_unary(OpKind::kLog, a); }
Value relu(Value a) { return a.graph->make_unary(OpKind::kRelu, a); }
Value stop_gradient(Value a) { return a.graph->make_unary(OpKind::kStopGradient, a); }
Value inject(Value a, Tensor forward_value) {
  return a.graph->make_inject(a, std::move(forward_value));
}
Value concat(const std::vector<Value>& parts, int axis) {
  if (parts.empty()) throw EmptyList("concat: no operands");
  return parts[0].graph->make_concat(parts, axis);
}

FiniteDiffReport finite_diff_check(Graph& g, Value loss, Value param, double step, double tol) {
  if (step <= 0.0) throw InvalidConfig("finite_diff_check: step must be > 0");
  if (loss.graph != &g || param.graph != &g)
    throw Error("finite_diff_check: value handle from another graph");

  g.execute();
  GradientMap gm = g.backward(loss.id);
  const Tensor analytic = gm.grad(param.id);
  const Tensor base = g.value(param.id);

  FiniteDiffReport rep;
  rep.tol = tol;
  for (Index k = 0; k < base.size(); ++k) {
    Tensor plus = base;
    plus.values_mut()[static_cast<std::size_t>(k)] += step;
    g.bind(param.id, std::move(plus));
    g.execute();
    const double fp = g.value(loss.id).scalar_value();

    Tensor minus = base;
    minus.values_mut()[static_cast<std::size_t>(k)] -= step;
    g.bind(param.id, std::move(minus));
    g.execute();
    const double fm = g.value(loss.id).scalar_value();

    const double numeric = (fp - fm) / (2.0 * step);
    const double a = analytic.values()[static_cast<std::size_t>(k)];
    const double abs_err = std::abs(a - numeric);
    const double rel = abs_err / std::max({std::abs(a), std::abs(numeric), kRelFloor});
    if (rel > rep.max_rel_err) {
      rep.max_rel_err = rel;
      rep.worst_flat_index = k;
    }
    rep.max_abs_err = std::max(rep.max_abs_err, abs_err);
  }
  g.bind(param.id, base);
  g.execute();
  rep.pass = rep.max_rel_err <= tol;
  return rep;
}

}  // namespace dcco
