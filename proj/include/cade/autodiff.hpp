#pragma once

// Reverse-mode automatic differentiation over dense double tensors.
//
// A Graph is a tape: nodes are appended in evaluation order, so operands
// always precede their users and the tape order is a topological order.
// Forward values are computed eagerly when a node is added. backward()
// walks the tape once in reverse, summing gradient contributions in a fixed
// order, so results are bit-reproducible.
//
// Shape rules per op (N = batch):
//   add, sub, mul          equal shapes, element-wise
//   matmul                 [M,K] x [K,N] -> [M,N]
//   dense                  input [N,F], weight [F,G], bias [G] -> [N,G]
//   conv2d                 input NCHW, kernel OIHW, optional bias [O]; zero padding
//   maxpool2d              NCHW, square window and stride, floor output size
//   global_avg_pool        [N,C,H,W] -> [N,C]
//   l2_norm, dot,          reduce the last axis: [..., D] -> [...]; a rank-1
//   cosine_similarity        operand reduces to shape [1]
//   normalize              divides each last-axis row by its L2 norm
//   sum, mean              reduce everything to shape [1]
//   softmax_cross_entropy  logits [N,K], integer labels in attrs -> mean loss [1]
//   channel_weighted_sum   maps [N,C,H,W], weights [N,C] -> [N,H*W]

#include <cstddef>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cade/tensor.hpp"

namespace cade::ag {

enum class OpKind {
  leaf,
  add,
  sub,
  mul,
  scale,
  matmul,
  dense,
  conv2d,
  relu,
  leaky_relu,
  sigmoid,
  log,
  log_sigmoid,
  abs,
  maxpool2d,
  global_avg_pool,
  sum,
  mean,
  l2_norm,
  dot,
  cosine_similarity,
  normalize,
  softmax_cross_entropy,
  reshape,
  channel_weighted_sum,
};

std::string_view op_name(OpKind kind);

/// Op-specific constants. Only the fields an op reads matter.
struct OpAttrs {
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t window = 2;
  double slope = 0.01;  // leaky_relu
  double factor = 1.0;  // scale
  Shape shape;          // reshape target
  std::vector<std::size_t> labels;  // softmax_cross_entropy
};

/// Forward rule. Rejects invalid shapes and non-finite operands.
Tensor eval_op(OpKind kind, std::span<const Tensor* const> operands, const OpAttrs& attrs);
Tensor eval_op(OpKind kind, const std::vector<Tensor>& operands, const OpAttrs& attrs = {});

/// Backward rule: gradient for each operand whose `needed` flag is set.
std::vector<std::optional<Tensor>> backward_op(OpKind kind,
                                               std::span<const Tensor* const> operands,
                                               const OpAttrs& attrs, const Tensor& output,
                                               const Tensor& grad_output,
                                               std::span<const bool> needed);

/// Named trainable tensors with their accumulated gradients.
class ParameterStore {
 public:
  struct Entry {
    Tensor value;
    Tensor grad;
    bool has_grad = false;
  };

  void add(const std::string& name, Tensor value);
  bool contains(const std::string& name) const { return entries_.count(name) != 0; }
  const Tensor& value(const std::string& name) const { return entry(name).value; }
  Tensor& mutable_value(const std::string& name) { return entry(name).value; }
  const Tensor& grad(const std::string& name) const { return entry(name).grad; }
  bool has_grad(const std::string& name) const { return entry(name).has_grad; }
  void accumulate_grad(const std::string& name, const Tensor& g);
  void zero_grads();
  std::vector<std::string> names() const;
  std::size_t size() const { return entries_.size(); }
  std::size_t value_count() const;

  const std::map<std::string, Entry>& entries() const { return entries_; }

  /// True when names, shapes and values are bit-identical.
  bool same_values(const ParameterStore& other) const;

 private:
  Entry& entry(const std::string& name);
  const Entry& entry(const std::string& name) const;
  std::map<std::string, Entry> entries_;
};

class Graph;

/// Handle to a node of a Graph.
struct Var {
  Graph* graph = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

struct GraphNode {
  OpKind kind = OpKind::leaf;
  std::vector<std::size_t> operands;
  OpAttrs attrs;
  Tensor output;
  bool requires_grad = false;
  std::string param_name;  // set for parameter leaves
};

class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Leaf that never receives a gradient.
  Var constant(Tensor value);
  /// Leaf that receives a gradient.
  Var variable(Tensor value);
  /// Leaf bound to a named parameter; its gradient is reported under `name`.
  Var parameter(const std::string& name, const Tensor& value);
  /// Binds every parameter of a store, keyed by name.
  std::map<std::string, Var> parameters(const ParameterStore& store);

  Var apply(OpKind kind, std::vector<Var> operands, OpAttrs attrs = {});

  const GraphNode& node(Var v) const { return nodes_.at(v.id); }
  const Tensor& value(Var v) const { return nodes_.at(v.id).output; }
  std::size_t size() const { return nodes_.size(); }

  /// Reverse pass from a size-1 root. Clears gradients of any previous pass.
  /// Nodes recorded before `stop` receive no gradient and are not visited.
  void backward(Var root, std::optional<Var> stop = std::nullopt);

  bool has_grad(Var v) const { return v.id < grads_.size() && grads_[v.id].has_value(); }
  /// Gradient of the last backward root w.r.t. v; zeros if v was not reached.
  Tensor grad(Var v) const;

  /// Adds parameter-leaf gradients into the store (entries not reached get zeros).
  void accumulate_parameter_grads(ParameterStore& store) const;

 private:
  Var push(GraphNode node);

  std::vector<GraphNode> nodes_;
  std::vector<std::optional<Tensor>> grads_;
};

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
Var matmul(Var a, Var b);
Var dense(Var input, Var weight, Var bias);
Var conv2d(Var input, Var kernel, std::optional<Var> bias, std::size_t stride,
           std::size_t padding);
Var relu(Var a);
Var leaky_relu(Var a, double slope = 0.01);
Var sigmoid(Var a);
Var log(Var a);
Var log_sigmoid(Var a);
Var abs(Var a);
Var maxpool2d(Var a, std::size_t window, std::size_t stride);
Var global_avg_pool(Var a);
Var sum(Var a);
Var mean(Var a);
Var l2_norm(Var a);
Var dot(Var a, Var b);
Var cosine_similarity(Var a, Var b);
Var normalize(Var a);
Var softmax_cross_entropy(Var logits, std::vector<std::size_t> labels);
Var reshape(Var a, Shape shape);
Var channel_weighted_sum(Var maps, Var weights);

/// Central-difference gradient of a scalar function.
Tensor numeric_gradient(const std::function<double(const Tensor&)>& f, const Tensor& x,
                        double eps);

}  // namespace cade::ag
