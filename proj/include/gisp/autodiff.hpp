#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "gisp/tensor.hpp"

namespace gisp::ad {

struct NodeId {
  std::size_t index = 0;
  friend bool operator==(NodeId, NodeId) = default;
};

using Bindings = std::map<std::string, Tensor, std::less<>>;
using GradientMap = std::map<std::string, Tensor, std::less<>>;

enum class Op : std::uint8_t {
  Input,
  Parameter,
  Constant,
  MatMul,
  Add,
  AddRow,
  Multiply,
  Scale,
  Sum,
  Embedding,
  RmsNorm,
  Softmax,
  Silu,
  Gate,
  CausalMask,
  Transpose,
  Slice,
  ConcatCols,
  ConcatRows,
  GatherRows,
  GatherCols,
  CrossEntropy,
};

std::string_view op_name(Op op);

// Define-then-run tape. Nodes are appended in topological order, so the
// evaluation order is the insertion order and backward is its reverse.
// A Graph instance is single-threaded; separate instances share nothing.
class Graph {
 public:
  NodeId input(std::string name, Shape shape);
  NodeId parameter(std::string name, Tensor value);
  NodeId constant(Tensor value);

  // op(a) * op(b) for 2-D operands, op = transpose when the flag is set.
  NodeId matmul(NodeId a, NodeId b, bool transpose_a = false, bool transpose_b = false);
  NodeId add(NodeId a, NodeId b);
  // a[R,C] + b[C] broadcast over rows.
  NodeId add_row(NodeId a, NodeId b);
  NodeId multiply(NodeId a, NodeId b);
  NodeId scale(NodeId a, double factor);
  NodeId sum(NodeId a);
  // Row lookup: table[V,D], ids[N] (integral values) -> [N,D].
  NodeId embedding(NodeId table, NodeId ids);
  // x[R,C] * gain[C] / sqrt(mean(x^2) + eps), per row.
  NodeId rms_norm(NodeId x, NodeId gain, double eps = 1e-6);
  NodeId softmax(NodeId x);
  NodeId silu(NodeId x);
  // a * silu(b)
  NodeId gate(NodeId a, NodeId b);
  // Square [T,T] scores: entries above the diagonal are replaced by a large
  // negative constant so a following softmax assigns them exactly zero.
  NodeId causal_mask(NodeId x);
  NodeId transpose(NodeId x);
  NodeId slice(NodeId x, std::size_t row0, std::size_t nrows, std::size_t col0, std::size_t ncols);
  NodeId concat_cols(const std::vector<NodeId>& parts);
  NodeId concat_rows(const std::vector<NodeId>& parts);
  NodeId gather_rows(NodeId x, std::vector<std::size_t> rows);
  NodeId gather_cols(NodeId x, std::vector<std::size_t> cols);
  // sum_i w_i * (logsumexp(logits_i) - logits_i[t_i]); rows whose target is
  // negative are ignored. Scalar result.
  NodeId cross_entropy(NodeId logits, NodeId targets, NodeId weights);
  // Mean over non-ignored rows; weights are derived at evaluation time.
  NodeId cross_entropy_mean(NodeId logits, NodeId targets);

  const Tensor& evaluate(const Bindings& bindings);
  GradientMap backward(NodeId loss);

  const Tensor& value(NodeId id) const;
  const Shape& shape(NodeId id) const;
  std::size_t node_count() const { return nodes_.size(); }
  NodeId last() const { return NodeId{nodes_.size() - 1}; }

  Tensor& parameter_value(std::string_view name);
  const Tensor& parameter_value(std::string_view name) const;
  std::vector<std::string> parameter_names() const;
  bool evaluated() const { return evaluated_; }
  const Bindings& last_bindings() const { return bindings_; }

  // Process-wide count of backward() invocations; used to prove a code path
  // is gradient-free.
  static std::uint64_t backward_invocations();

 private:
  struct Node {
    Op op{};
    std::vector<NodeId> inputs;
    Shape shape;
    Tensor value;
    std::string name;
    double scalar = 0.0;
    bool flag_a = false;
    bool flag_b = false;
    std::vector<std::size_t> indices;
    std::size_t r0 = 0, c0 = 0;
    std::vector<double> aux;  // per-op cache (rms inverse norms, softmax probs)
  };

  NodeId push(Node node);
  const Node& node(NodeId id) const;
  void forward_node(Node& n);
  void backward_node(const Node& n, const Tensor& grad, std::vector<Tensor>& grads);

  std::vector<Node> nodes_;
  std::map<std::string, std::size_t, std::less<>> params_;
  std::map<std::string, std::size_t, std::less<>> inputs_;
  Bindings bindings_;
  bool evaluated_ = false;
};

struct FiniteDifference {
  double max_elementwise = 0.0;  // max |analytic - central| / (|central| + 1e-12)
  double normwise = 0.0;         // ||analytic - central|| / ||central|| over the sampled coordinates
  std::size_t coordinates = 0;
};

// Central differences on min(max_coords, size) coordinates of the named
// parameter, drawn by a fixed-seed shuffle. Re-evaluates with the graph's last
// bindings; leaves parameter values intact.
FiniteDifference finite_difference_check(Graph& graph, NodeId loss, std::string_view parameter, double epsilon,
                                         std::size_t max_coords = 64);

}  // namespace gisp::ad
