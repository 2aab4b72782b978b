#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tabssm/tensor.hpp"

namespace tabssm {

class Graph;

/// Handle to one node of a computation graph: a value tensor plus, after
/// backward(), the gradient of the loss with respect to it.
class DiffValue {
 public:
  DiffValue() = default;
  const Tensor& value() const;
  const Tensor& grad() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t node_id() const { return id_; }
  Graph* graph() const { return graph_; }
  bool valid() const { return graph_ != nullptr; }

 private:
  friend class Graph;
  friend struct GraphOps;
  DiffValue(Graph* g, std::size_t id) : graph_(g), id_(id) {}
  Graph* graph_ = nullptr;
  std::size_t id_ = 0;
};

enum class Elementwise { Exp, NegExp, Silu, Softplus, Sigmoid, Log, Neg };
enum class ReduceKind { Sum, Mean, Max };

/// Append-only computation graph. Nodes are created in topological order, so
/// the reverse sweep is a single backward iteration over node ids.
/// Construction and backward are single-threaded per instance.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  DiffValue constant(Tensor v);          // no gradient tracked
  DiffValue leaf(Tensor v);              // trainable leaf
  DiffValue scalar_constant(double v) { return constant(Tensor::scalar(v)); }

  /// Reverse sweep from a scalar loss. Populates gradients of every node that
  /// (transitively) requires one. Deterministic: fixed node order.
  void backward(DiffValue loss);

  std::size_t size() const { return nodes_.size(); }

 private:
  friend class DiffValue;
  friend struct GraphOps;

  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    bool grad_ready = false;
    std::function<void(Graph&, std::size_t)> backfn;  // accumulates into parents
  };

  std::size_t add_node(Tensor value, bool requires_grad,
                       std::function<void(Graph&, std::size_t)> backfn);
  Node& node(std::size_t id) { return nodes_[id]; }
  Tensor& grad_buffer(std::size_t id);

  std::vector<Node> nodes_;
};

// ---- operations ------------------------------------------------------------
// All operands of a binary op must live on the same graph.

DiffValue add(DiffValue a, DiffValue b);       // broadcasting
DiffValue sub(DiffValue a, DiffValue b);       // broadcasting
DiffValue broadcast_mul(DiffValue a, DiffValue b);
DiffValue divide(DiffValue a, DiffValue b);    // broadcasting
DiffValue scale(DiffValue a, double s);
DiffValue add_scalar(DiffValue a, double s);

DiffValue elementwise(Elementwise kind, DiffValue x);
inline DiffValue exp(DiffValue x) { return elementwise(Elementwise::Exp, x); }
inline DiffValue neg_exp(DiffValue x) { return elementwise(Elementwise::NegExp, x); }
inline DiffValue silu(DiffValue x) { return elementwise(Elementwise::Silu, x); }
inline DiffValue softplus(DiffValue x) { return elementwise(Elementwise::Softplus, x); }
inline DiffValue sigmoid(DiffValue x) { return elementwise(Elementwise::Sigmoid, x); }
inline DiffValue log(DiffValue x) { return elementwise(Elementwise::Log, x); }
inline DiffValue neg(DiffValue x) { return elementwise(Elementwise::Neg, x); }

/// Batched matrix product a[..,m,k] * b[..,k,n] with right-aligned
/// broadcasting over the leading axes. Rank-1 operands are promoted the usual
/// way (vector-matrix / matrix-vector).
DiffValue matmul(DiffValue a, DiffValue b);

/// Removes `axis`. Max routes its gradient to the first maximal element.
DiffValue reduce(ReduceKind kind, DiffValue x, std::size_t axis);
DiffValue reduce_all_sum(DiffValue x);   // scalar
DiffValue reduce_all_mean(DiffValue x);  // scalar

/// Per-channel causal 1-D convolution along the middle axis of x[N,J,C] with
/// kernels[C,K] and bias[C]. Input is left-padded with K-1 zeros, so output
/// position j depends only on inputs at positions <= j and the shape is kept.
DiffValue depthwise_causal_conv(DiffValue x, DiffValue kernels, DiffValue bias);

/// x / sqrt(mean(x^2) + eps) * weight over the last axis.
DiffValue rmsnorm(DiffValue x, DiffValue weight, double eps);

/// (x - mean) / sqrt(var + eps) * weight + bias over the last axis.
DiffValue layer_norm(DiffValue x, DiffValue weight, DiffValue bias, double eps);

DiffValue softmax_last(DiffValue x);

DiffValue slice(DiffValue x, std::size_t axis, std::size_t start, std::size_t len);
DiffValue concat(std::span<const DiffValue> xs, std::size_t axis);
DiffValue reshape(DiffValue x, Shape shape);
DiffValue transpose_last2(DiffValue x);

/// out[.., i, ..] = x[.., perm[i], ..] along `axis`; perm must be a bijection.
DiffValue permute_axis(DiffValue x, std::size_t axis, std::span<const std::size_t> perm);
DiffValue reverse_axis(DiffValue x, std::size_t axis);

/// Row gather from table[V,d]: out[i,:] = table[ids[i],:]. Gradient scatters.
DiffValue embedding_lookup(DiffValue table, std::span<const int> ids);

/// Inverted dropout; identity when rate == 0. Mask drawn from `seed`.
DiffValue dropout(DiffValue x, double rate, std::uint64_t seed);

/// Selective state-space scan along the middle axis.
///   h[n,0]   = delta[n,0] * B[n,0] (x) u[n,0]
///   h[n,j]   = exp(delta[n,j] (x) A) . h[n,j-1] + delta[n,j] * B[n,j] (x) u[n,j]
///   y[n,j,c] = sum_s h[n,j,c,s] * C[n,j,s] + alpha[c] * u[n,j,c]
/// Shapes: u, delta [N,J,C]; A [C,S] (expected negative); B, C [N,J,S];
/// alpha [C]. Differentiable with respect to every input.
DiffValue ssm_scan(DiffValue delta, DiffValue a, DiffValue b, DiffValue c, DiffValue u,
                   DiffValue alpha);

// ---- operator sugar --------------------------------------------------------

inline DiffValue operator+(DiffValue a, DiffValue b) { return add(a, b); }
inline DiffValue operator-(DiffValue a, DiffValue b) { return sub(a, b); }
inline DiffValue operator*(DiffValue a, DiffValue b) { return broadcast_mul(a, b); }
inline DiffValue operator/(DiffValue a, DiffValue b) { return divide(a, b); }

// ---- parameters ------------------------------------------------------------

/// Named trainable leaves of one graph, in deterministic (insertion) order.
class ParamSet {
 public:
  void insert(const std::string& name, DiffValue v);
  DiffValue at(std::string_view name) const;  // throws on unknown name
  const std::vector<std::pair<std::string, DiffValue>>& entries() const { return entries_; }

 private:
  std::vector<std::pair<std::string, DiffValue>> entries_;
  std::map<std::string, std::size_t, std::less<>> index_;
};

/// Persistent named parameter tensors; bound into a graph per forward pass.
class ParamStore {
 public:
  Tensor& create(const std::string& name, Tensor init);  // throws on duplicate
  Tensor& at(std::string_view name);
  const Tensor& at(std::string_view name) const;
  bool contains(std::string_view name) const;
  const std::vector<std::string>& names() const { return names_; }
  std::size_t total_parameters() const;

  ParamSet bind(Graph& g) const;  // leaves in insertion order

 private:
  std::vector<std::string> names_;
  std::map<std::string, Tensor, std::less<>> values_;
};

// ---- gradient checking -----------------------------------------------------

using GraphBuilder = std::function<DiffValue(Graph&, const ParamSet&)>;

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::vector<std::pair<std::string, double>> per_param;  // max rel error per tensor
};

/// Central finite differences (f(t+h)-f(t-h))/2h against the analytic
/// gradient, elementwise, relative error denominator max(|a|,|b|,1e-8).
GradCheckReport check_gradients(ParamStore& params, const GraphBuilder& f, double step = 1e-5);

}  // namespace tabssm
