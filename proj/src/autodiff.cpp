#include "gisp/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <random>

#include "gisp/error.hpp"

namespace gisp::ad {

namespace {

using MatR = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const MatR>;
using MMap = Eigen::Map<MatR>;

constexpr double kMaskedScore = -1e300;

std::atomic<std::uint64_t> g_backward_calls{0};

CMap cmat(const Tensor& t) { return CMap(t.data().data(), t.rows(), t.cols()); }
MMap mmat(Tensor& t) { return MMap(t.data().data(), t.rows(), t.cols()); }

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
double silu_value(double x) { return x * sigmoid(x); }
double silu_grad(double x) {
  const double s = sigmoid(x);
  return s * (1.0 + x * (1.0 - s));
}

void require(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

bool is_matrix(const Shape& s) { return s.size() == 2; }

}  // namespace

std::string_view op_name(Op op) {
  switch (op) {
    case Op::Input: return "input";
    case Op::Parameter: return "parameter";
    case Op::Constant: return "constant";
    case Op::MatMul: return "matmul";
    case Op::Add: return "add";
    case Op::AddRow: return "add_row";
    case Op::Multiply: return "multiply";
    case Op::Scale: return "scale";
    case Op::Sum: return "sum";
    case Op::Embedding: return "embedding";
    case Op::RmsNorm: return "rms_norm";
    case Op::Softmax: return "softmax";
    case Op::Silu: return "silu";
    case Op::Gate: return "gate";
    case Op::CausalMask: return "causal_mask";
    case Op::Transpose: return "transpose";
    case Op::Slice: return "slice";
    case Op::ConcatCols: return "concat_cols";
    case Op::ConcatRows: return "concat_rows";
    case Op::GatherRows: return "gather_rows";
    case Op::GatherCols: return "gather_cols";
    case Op::CrossEntropy: return "cross_entropy";
  }
  return "?";
}

std::uint64_t Graph::backward_invocations() { return g_backward_calls.load(); }

const Graph::Node& Graph::node(NodeId id) const {
  if (id.index >= nodes_.size()) throw UsageError("unknown node id " + std::to_string(id.index));
  return nodes_[id.index];
}

NodeId Graph::push(Node n) {
  for (auto in : n.inputs) node(in);
  nodes_.push_back(std::move(n));
  evaluated_ = false;
  return NodeId{nodes_.size() - 1};
}

const Tensor& Graph::value(NodeId id) const {
  if (!evaluated_) throw UsageError("graph has not been evaluated");
  return node(id).value;
}

const Shape& Graph::shape(NodeId id) const { return node(id).shape; }

// ---- construction ---------------------------------------------------------

NodeId Graph::input(std::string name, Shape shape) {
  if (inputs_.contains(name) || params_.contains(name)) throw UsageError("duplicate graph name: " + name);
  Node n;
  n.op = Op::Input;
  n.shape = std::move(shape);
  n.name = name;
  auto id = push(std::move(n));
  inputs_.emplace(std::move(name), id.index);
  return id;
}

NodeId Graph::parameter(std::string name, Tensor value) {
  if (inputs_.contains(name) || params_.contains(name)) throw UsageError("duplicate graph name: " + name);
  Node n;
  n.op = Op::Parameter;
  n.shape = value.shape();
  n.value = std::move(value);
  n.name = name;
  auto id = push(std::move(n));
  params_.emplace(std::move(name), id.index);
  return id;
}

NodeId Graph::constant(Tensor value) {
  Node n;
  n.op = Op::Constant;
  n.shape = value.shape();
  n.value = std::move(value);
  return push(std::move(n));
}

NodeId Graph::matmul(NodeId a, NodeId b, bool transpose_a, bool transpose_b) {
  const auto& sa = shape(a);
  const auto& sb = shape(b);
  require(is_matrix(sa) && is_matrix(sb), "matmul expects 2-D operands, got " + shape_string(sa) + " and " +
                                              shape_string(sb));
  const std::size_t m = transpose_a ? sa[1] : sa[0];
  const std::size_t k1 = transpose_a ? sa[0] : sa[1];
  const std::size_t k2 = transpose_b ? sb[1] : sb[0];
  const std::size_t n = transpose_b ? sb[0] : sb[1];
  require(k1 == k2, "matmul inner dimension mismatch: " + shape_string(sa) + " x " + shape_string(sb));
  Node node;
  node.op = Op::MatMul;
  node.inputs = {a, b};
  node.flag_a = transpose_a;
  node.flag_b = transpose_b;
  node.shape = {m, n};
  return push(std::move(node));
}

NodeId Graph::add(NodeId a, NodeId b) {
  require(shape(a) == shape(b), "add shape mismatch: " + shape_string(shape(a)) + " vs " + shape_string(shape(b)));
  Node n;
  n.op = Op::Add;
  n.inputs = {a, b};
  n.shape = shape(a);
  return push(std::move(n));
}

NodeId Graph::add_row(NodeId a, NodeId b) {
  const auto& sa = shape(a);
  const auto& sb = shape(b);
  require(is_matrix(sa) && sb.size() == 1 && sb[0] == sa[1],
          "add_row expects [R,C] + [C], got " + shape_string(sa) + " + " + shape_string(sb));
  Node n;
  n.op = Op::AddRow;
  n.inputs = {a, b};
  n.shape = sa;
  return push(std::move(n));
}

NodeId Graph::multiply(NodeId a, NodeId b) {
  require(shape(a) == shape(b),
          "multiply shape mismatch: " + shape_string(shape(a)) + " vs " + shape_string(shape(b)));
  Node n;
  n.op = Op::Multiply;
  n.inputs = {a, b};
  n.shape = shape(a);
  return push(std::move(n));
}

NodeId Graph::scale(NodeId a, double factor) {
  Node n;
  n.op = Op::Scale;
  n.inputs = {a};
  n.scalar = factor;
  n.shape = shape(a);
  return push(std::move(n));
}

NodeId Graph::sum(NodeId a) {
  Node n;
  n.op = Op::Sum;
  n.inputs = {a};
  n.shape = {};
  return push(std::move(n));
}

NodeId Graph::embedding(NodeId table, NodeId ids) {
  const auto& st = shape(table);
  const auto& si = shape(ids);
  require(is_matrix(st) && si.size() == 1,
          "embedding expects table [V,D] and ids [N], got " + shape_string(st) + ", " + shape_string(si));
  Node n;
  n.op = Op::Embedding;
  n.inputs = {table, ids};
  n.shape = {si[0], st[1]};
  return push(std::move(n));
}

NodeId Graph::rms_norm(NodeId x, NodeId gain, double eps) {
  const auto& sx = shape(x);
  const auto& sg = shape(gain);
  require(is_matrix(sx) && sg.size() == 1 && sg[0] == sx[1],
          "rms_norm expects x [R,C] and gain [C], got " + shape_string(sx) + ", " + shape_string(sg));
  Node n;
  n.op = Op::RmsNorm;
  n.inputs = {x, gain};
  n.scalar = eps;
  n.shape = sx;
  return push(std::move(n));
}

NodeId Graph::softmax(NodeId x) {
  require(!shape(x).empty(), "softmax needs rank >= 1");
  Node n;
  n.op = Op::Softmax;
  n.inputs = {x};
  n.shape = shape(x);
  return push(std::move(n));
}

NodeId Graph::silu(NodeId x) {
  Node n;
  n.op = Op::Silu;
  n.inputs = {x};
  n.shape = shape(x);
  return push(std::move(n));
}

NodeId Graph::gate(NodeId a, NodeId b) {
  require(shape(a) == shape(b), "gate shape mismatch: " + shape_string(shape(a)) + " vs " + shape_string(shape(b)));
  Node n;
  n.op = Op::Gate;
  n.inputs = {a, b};
  n.shape = shape(a);
  return push(std::move(n));
}

NodeId Graph::causal_mask(NodeId x) {
  const auto& sx = shape(x);
  require(is_matrix(sx) && sx[0] == sx[1], "causal_mask expects square [T,T], got " + shape_string(sx));
  Node n;
  n.op = Op::CausalMask;
  n.inputs = {x};
  n.shape = sx;
  return push(std::move(n));
}

NodeId Graph::transpose(NodeId x) {
  const auto& sx = shape(x);
  require(is_matrix(sx), "transpose expects 2-D, got " + shape_string(sx));
  Node n;
  n.op = Op::Transpose;
  n.inputs = {x};
  n.shape = {sx[1], sx[0]};
  return push(std::move(n));
}

NodeId Graph::slice(NodeId x, std::size_t row0, std::size_t nrows, std::size_t col0, std::size_t ncols) {
  const auto& sx = shape(x);
  require(is_matrix(sx) && row0 + nrows <= sx[0] && col0 + ncols <= sx[1],
          "slice out of range on " + shape_string(sx));
  Node n;
  n.op = Op::Slice;
  n.inputs = {x};
  n.r0 = row0;
  n.c0 = col0;
  n.shape = {nrows, ncols};
  return push(std::move(n));
}

NodeId Graph::concat_cols(const std::vector<NodeId>& parts) {
  require(!parts.empty(), "concat_cols of nothing");
  const std::size_t r = shape(parts.front()).at(0);
  std::size_t c = 0;
  for (auto p : parts) {
    require(is_matrix(shape(p)) && shape(p)[0] == r, "concat_cols row mismatch");
    c += shape(p)[1];
  }
  Node n;
  n.op = Op::ConcatCols;
  n.inputs = parts;
  n.shape = {r, c};
  return push(std::move(n));
}

NodeId Graph::concat_rows(const std::vector<NodeId>& parts) {
  require(!parts.empty(), "concat_rows of nothing");
  const std::size_t c = shape(parts.front()).at(1);
  std::size_t r = 0;
  for (auto p : parts) {
    require(is_matrix(shape(p)) && shape(p)[1] == c, "concat_rows column mismatch");
    r += shape(p)[0];
  }
  Node n;
  n.op = Op::ConcatRows;
  n.inputs = parts;
  n.shape = {r, c};
  return push(std::move(n));
}

NodeId Graph::gather_rows(NodeId x, std::vector<std::size_t> rows) {
  const auto& sx = shape(x);
  require(is_matrix(sx), "gather_rows expects 2-D");
  for (auto r : rows) require(r < sx[0], "gather_rows index out of range");
  Node n;
  n.op = Op::GatherRows;
  n.inputs = {x};
  n.shape = {rows.size(), sx[1]};
  n.indices = std::move(rows);
  return push(std::move(n));
}

NodeId Graph::gather_cols(NodeId x, std::vector<std::size_t> cols) {
  const auto& sx = shape(x);
  require(is_matrix(sx), "gather_cols expects 2-D");
  for (auto c : cols) require(c < sx[1], "gather_cols index out of range");
  Node n;
  n.op = Op::GatherCols;
  n.inputs = {x};
  n.shape = {sx[0], cols.size()};
  n.indices = std::move(cols);
  return push(std::move(n));
}

NodeId Graph::cross_entropy(NodeId logits, NodeId targets, NodeId weights) {
  const auto& sl = shape(logits);
  require(is_matrix(sl) && shape(targets) == Shape{sl[0]} && shape(weights) == Shape{sl[0]},
          "cross_entropy expects logits [N,V], targets [N], weights [N]");
  Node n;
  n.op = Op::CrossEntropy;
  n.inputs = {logits, targets, weights};
  n.shape = {};
  return push(std::move(n));
}

NodeId Graph::cross_entropy_mean(NodeId logits, NodeId targets) {
  const auto& sl = shape(logits);
  require(is_matrix(sl) && shape(targets) == Shape{sl[0]}, "cross_entropy expects logits [N,V], targets [N]");
  Node n;
  n.op = Op::CrossEntropy;
  n.inputs = {logits, targets};
  n.flag_a = true;
  n.shape = {};
  return push(std::move(n));
}

// ---- parameters -----------------------------------------------------------

Tensor& Graph::parameter_value(std::string_view name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw UsageError("unknown parameter: " + std::string(name));
  evaluated_ = false;
  return nodes_[it->second].value;
}

const Tensor& Graph::parameter_value(std::string_view name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw UsageError("unknown parameter: " + std::string(name));
  return nodes_[it->second].value;
}

std::vector<std::string> Graph::parameter_names() const {
  std::vector<std::string> out;
  for (const auto& [k, _] : params_) out.push_back(k);
  return out;
}

// ---- forward --------------------------------------------------------------

const Tensor& Graph::evaluate(const Bindings& bindings) {
  if (nodes_.empty()) throw UsageError("evaluate on empty graph");
  for (const auto& [name, idx] : inputs_) {
    auto it = bindings.find(name);
    if (it == bindings.end()) throw UsageError("input not bound: " + name);
    if (it->second.shape() != nodes_[idx].shape) {
      throw ShapeError("input '" + name + "' bound with shape " + shape_string(it->second.shape()) + ", expected " +
                       shape_string(nodes_[idx].shape));
    }
  }
  bindings_ = bindings;
  evaluated_ = false;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    Node& n = nodes_[i];
    if (n.op == Op::Input) {
      n.value = bindings_.find(n.name)->second;
    } else if (n.op != Op::Parameter && n.op != Op::Constant) {
      forward_node(n);
    }
    if (!n.value.all_finite()) {
      throw NumericError("non-finite value at node " + std::to_string(i) + " (" + std::string(op_name(n.op)) +
                         (n.name.empty() ? "" : " '" + n.name + "'") + ")");
    }
  }
  evaluated_ = true;
  return nodes_.back().value;
}

void Graph::forward_node(Node& n) {
  auto in = [&](std::size_t k) -> const Tensor& { return nodes_[n.inputs[k].index].value; };
  Tensor out(n.shape);
  switch (n.op) {
    case Op::MatMul: {
      auto a = cmat(in(0));
      auto b = cmat(in(1));
      auto c = mmat(out);
      if (!n.flag_a && !n.flag_b) c.noalias() = a * b;
      else if (!n.flag_a && n.flag_b) c.noalias() = a * b.transpose();
      else if (n.flag_a && !n.flag_b) c.noalias() = a.transpose() * b;
      else c.noalias() = a.transpose() * b.transpose();
      break;
    }
    case Op::Add: {
      const auto& a = in(0);
      const auto& b = in(1);
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
      break;
    }
    case Op::AddRow: {
      const auto& a = in(0);
      const auto& b = in(1);
      const std::size_t c = out.cols();
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i % c];
      break;
    }
    case Op::Multiply: {
      const auto& a = in(0);
      const auto& b = in(1);
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
      break;
    }
    case Op::Scale: {
      const auto& a = in(0);
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * n.scalar;
      break;
    }
    case Op::Sum: {
      double s = 0.0;
      for (double v : in(0).data()) s += v;
      out[0] = s;
      break;
    }
    case Op::Embedding: {
      const auto& table = in(0);
      const auto& ids = in(1);
      const std::size_t d = table.cols();
      const std::size_t vocab = table.rows();
      for (std::size_t i = 0; i < ids.size(); ++i) {
        const double id = ids[i];
        if (id < 0 || id != std::floor(id) || id >= static_cast<double>(vocab)) {
          throw UsageError("embedding id " + std::to_string(id) + " out of range [0," + std::to_string(vocab) + ")");
        }
        const auto row = static_cast<std::size_t>(id);
        std::copy_n(table.data().begin() + row * d, d, out.data().begin() + i * d);
      }
      break;
    }
    case Op::RmsNorm: {
      const auto& x = in(0);
      const auto& g = in(1);
      const std::size_t r = x.rows(), c = x.cols();
      n.aux.assign(r, 0.0);
      for (std::size_t i = 0; i < r; ++i) {
        double ss = 0.0;
        for (std::size_t j = 0; j < c; ++j) ss += x[i * c + j] * x[i * c + j];
        const double inv = 1.0 / std::sqrt(ss / static_cast<double>(c) + n.scalar);
        n.aux[i] = inv;
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] = g[j] * x[i * c + j] * inv;
      }
      break;
    }
    case Op::Softmax: {
      const auto& x = in(0);
      const std::size_t r = x.rows(), c = x.cols();
      for (std::size_t i = 0; i < r; ++i) {
        const double* xr = x.data().data() + i * c;
        double* yr = out.data().data() + i * c;
        const double mx = *std::max_element(xr, xr + c);
        double z = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
          yr[j] = std::exp(xr[j] - mx);
          z += yr[j];
        }
        for (std::size_t j = 0; j < c; ++j) yr[j] /= z;
      }
      break;
    }
    case Op::Silu: {
      const auto& x = in(0);
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = silu_value(x[i]);
      break;
    }
    case Op::Gate: {
      const auto& a = in(0);
      const auto& b = in(1);
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * silu_value(b[i]);
      break;
    }
    case Op::CausalMask: {
      const auto& x = in(0);
      const std::size_t t = x.rows();
      for (std::size_t i = 0; i < t; ++i)
        for (std::size_t j = 0; j < t; ++j) out[i * t + j] = j <= i ? x[i * t + j] : kMaskedScore;
      break;
    }
    case Op::Transpose: {
      mmat(out) = cmat(in(0)).transpose();
      break;
    }
    case Op::Slice: {
      const auto& x = in(0);
      const std::size_t xc = x.cols(), r = n.shape[0], c = n.shape[1];
      for (std::size_t i = 0; i < r; ++i)
        std::copy_n(x.data().begin() + (n.r0 + i) * xc + n.c0, c, out.data().begin() + i * c);
      break;
    }
    case Op::ConcatCols: {
      const std::size_t r = n.shape[0], c = n.shape[1];
      std::size_t off = 0;
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        const auto& p = in(k);
        const std::size_t pc = p.cols();
        for (std::size_t i = 0; i < r; ++i) std::copy_n(p.data().begin() + i * pc, pc, out.data().begin() + i * c + off);
        off += pc;
      }
      break;
    }
    case Op::ConcatRows: {
      std::size_t off = 0;
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        const auto& p = in(k);
        std::copy(p.data().begin(), p.data().end(), out.data().begin() + off);
        off += p.size();
      }
      break;
    }
    case Op::GatherRows: {
      const auto& x = in(0);
      const std::size_t c = x.cols();
      for (std::size_t i = 0; i < n.indices.size(); ++i)
        std::copy_n(x.data().begin() + n.indices[i] * c, c, out.data().begin() + i * c);
      break;
    }
    case Op::GatherCols: {
      const auto& x = in(0);
      const std::size_t xc = x.cols(), r = x.rows(), c = n.indices.size();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] = x[i * xc + n.indices[j]];
      break;
    }
    case Op::CrossEntropy: {
      const auto& logits = in(0);
      const auto& targets = in(1);
      const std::size_t r = logits.rows(), v = logits.cols();
      // aux holds the effective per-row weight followed by the softmax rows.
      n.aux.assign(r + r * v, 0.0);
      std::size_t counted = 0;
      for (std::size_t i = 0; i < r; ++i) {
        const double t = targets[i];
        if (t < 0) continue;
        if (t != std::floor(t) || t >= static_cast<double>(v)) {
          throw UsageError("cross_entropy target " + std::to_string(t) + " out of range");
        }
        ++counted;
      }
      if (n.flag_a && counted == 0) throw UsageError("cross_entropy_mean with no counted targets");
      double loss = 0.0;
      for (std::size_t i = 0; i < r; ++i) {
        const double t = targets[i];
        if (t < 0) continue;
        const double w = n.flag_a ? 1.0 / static_cast<double>(counted) : in(2)[i];
        n.aux[i] = w;
        const double* lr = logits.data().data() + i * v;
        double* pr = n.aux.data() + r + i * v;
        const double mx = *std::max_element(lr, lr + v);
        double z = 0.0;
        for (std::size_t j = 0; j < v; ++j) {
          pr[j] = std::exp(lr[j] - mx);
          z += pr[j];
        }
        for (std::size_t j = 0; j < v; ++j) pr[j] /= z;
        const double nll = mx + std::log(z) - lr[static_cast<std::size_t>(t)];
        loss += w * nll;
      }
      out[0] = loss;
      break;
    }
    case Op::Input:
    case Op::Parameter:
    case Op::Constant:
      return;
  }
  n.value = std::move(out);
}

// ---- backward -------------------------------------------------------------

GradientMap Graph::backward(NodeId loss) {
  ++g_backward_calls;
  if (!evaluated_) throw UsageError("backward called before evaluate");
  const Node& ln = node(loss);
  if (ln.value.size() != 1) throw ShapeError("backward needs a scalar loss, got " + shape_string(ln.shape));

  std::vector<char> needs(nodes_.size(), 0);
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (nodes_[i].op == Op::Parameter) {
      needs[i] = 1;
      continue;
    }
    for (auto in : nodes_[i].inputs) needs[i] |= needs[in.index];
  }

  std::vector<Tensor> grads(nodes_.size(), Tensor(Shape{0}));
  grads[loss.index] = Tensor(ln.shape, 1.0);
  for (std::size_t i = loss.index + 1; i-- > 0;) {
    if (!needs[i] || grads[i].size() == 0) continue;
    const Node& n = nodes_[i];
    if (n.op == Op::Parameter || n.op == Op::Input || n.op == Op::Constant) continue;
    // Only inputs that lead back to a parameter receive gradient storage.
    for (auto in : n.inputs) {
      if (needs[in.index] && grads[in.index].size() == 0) grads[in.index] = Tensor(nodes_[in.index].shape);
    }
    backward_node(n, grads[i], grads);
  }

  GradientMap out;
  for (const auto& [name, idx] : params_) {
    if (grads[idx].size() != shape_size(nodes_[idx].shape)) {
      out.emplace(name, Tensor(nodes_[idx].shape));
    } else {
      out.emplace(name, grads[idx]);
    }
  }
  return out;
}

void Graph::backward_node(const Node& n, const Tensor& gy, std::vector<Tensor>& grads) {
  auto in = [&](std::size_t k) -> const Tensor& { return nodes_[n.inputs[k].index].value; };
  auto g = [&](std::size_t k) -> Tensor& { return grads[n.inputs[k].index]; };
  auto live = [&](std::size_t k) { return g(k).size() != 0; };

  switch (n.op) {
    case Op::MatMul: {
      auto a = cmat(in(0));
      auto b = cmat(in(1));
      auto dc = cmat(gy);
      if (live(0)) {
        auto da = mmat(g(0));
        if (!n.flag_a && !n.flag_b) da.noalias() += dc * b.transpose();
        else if (!n.flag_a && n.flag_b) da.noalias() += dc * b;
        else if (n.flag_a && !n.flag_b) da.noalias() += b * dc.transpose();
        else da.noalias() += b.transpose() * dc.transpose();
      }
      if (live(1)) {
        auto db = mmat(g(1));
        if (!n.flag_a && !n.flag_b) db.noalias() += a.transpose() * dc;
        else if (!n.flag_a && n.flag_b) db.noalias() += dc.transpose() * a;
        else if (n.flag_a && !n.flag_b) db.noalias() += a * dc;
        else db.noalias() += dc.transpose() * a.transpose();
      }
      break;
    }
    case Op::Add: {
      for (std::size_t k = 0; k < 2; ++k) {
        if (!live(k)) continue;
        auto& d = g(k);
        for (std::size_t i = 0; i < gy.size(); ++i) d[i] += gy[i];
      }
      break;
    }
    case Op::AddRow: {
      if (live(0)) {
        auto& d = g(0);
        for (std::size_t i = 0; i < gy.size(); ++i) d[i] += gy[i];
      }
      if (live(1)) {
        auto& d = g(1);
        const std::size_t c = gy.cols();
        for (std::size_t i = 0; i < gy.size(); ++i) d[i % c] += gy[i];
      }
      break;
    }
    case Op::Multiply: {
      const auto& a = in(0);
      const auto& b = in(1);
      if (live(0)) {
        auto& d = g(0);
        for (std::size_t i = 0; i < gy.size(); ++i) d[i] += gy[i] * b[i];
      }
      if (live(1)) {
        auto& d = g(1);
        for (std::size_t i = 0; i < gy.size(); ++i) d[i] += gy[i] * a[i];
      }
      break;
    }
    case Op::Scale: {
      auto& d = g(0);
      for (std::size_t i = 0; i < gy.size(); ++i) d[i] += gy[i] * n.scalar;
      break;
    }
    case Op::Sum: {
      auto& d = g(0);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += gy[0];
      break;
    }
    case Op::Embedding: {
      if (!live(0)) break;
      auto& d = g(0);
      const auto& ids = in(1);
      const std::size_t c = d.cols();
      for (std::size_t i = 0; i < ids.size(); ++i) {
        const auto row = static_cast<std::size_t>(ids[i]);
        for (std::size_t j = 0; j < c; ++j) d[row * c + j] += gy[i * c + j];
      }
      break;
    }
    case Op::RmsNorm: {
      const auto& x = in(0);
      const auto& gain = in(1);
      const std::size_t r = x.rows(), c = x.cols();
      for (std::size_t i = 0; i < r; ++i) {
        const double inv = n.aux[i];
        const double* xr = x.data().data() + i * c;
        const double* gr = gy.data().data() + i * c;
        if (live(1)) {
          auto& dg = g(1);
          for (std::size_t j = 0; j < c; ++j) dg[j] += gr[j] * xr[j] * inv;
        }
        if (live(0)) {
          double dot = 0.0;
          for (std::size_t j = 0; j < c; ++j) dot += gain[j] * gr[j] * xr[j];
          const double coef = inv * inv * inv * dot / static_cast<double>(c);
          double* dx = g(0).data().data() + i * c;
          for (std::size_t j = 0; j < c; ++j) dx[j] += inv * gain[j] * gr[j] - coef * xr[j];
        }
      }
      break;
    }
    case Op::Softmax: {
      const auto& y = n.value;
      const std::size_t r = y.rows(), c = y.cols();
      auto& dx = g(0);
      for (std::size_t i = 0; i < r; ++i) {
        const double* yr = y.data().data() + i * c;
        const double* gr = gy.data().data() + i * c;
        double dot = 0.0;
        for (std::size_t j = 0; j < c; ++j) dot += yr[j] * gr[j];
        for (std::size_t j = 0; j < c; ++j) dx[i * c + j] += yr[j] * (gr[j] - dot);
      }
      break;
    }
    case Op::Silu: {
      const auto& x = in(0);
      auto& dx = g(0);
      for (std::size_t i = 0; i < gy.size(); ++i) dx[i] += gy[i] * silu_grad(x[i]);
      break;
    }
    case Op::Gate: {
      const auto& a = in(0);
      const auto& b = in(1);
      if (live(0)) {
        auto& da = g(0);
        for (std::size_t i = 0; i < gy.size(); ++i) da[i] += gy[i] * silu_value(b[i]);
      }
      if (live(1)) {
        auto& db = g(1);
        for (std::size_t i = 0; i < gy.size(); ++i) db[i] += gy[i] * a[i] * silu_grad(b[i]);
      }
      break;
    }
    case Op::CausalMask: {
      auto& dx = g(0);
      const std::size_t t = gy.rows();
      for (std::size_t i = 0; i < t; ++i)
        for (std::size_t j = 0; j <= i; ++j) dx[i * t + j] += gy[i * t + j];
      break;
    }
    case Op::Transpose: {
      mmat(g(0)) += cmat(gy).transpose();
      break;
    }
    case Op::Slice: {
      auto& dx = g(0);
      const std::size_t xc = dx.cols(), r = n.shape[0], c = n.shape[1];
      for (std::size_t i = 0; i < r; ++i) {
        double* dr = dx.data().data() + (n.r0 + i) * xc + n.c0;
        const double* gr = gy.data().data() + i * c;
        for (std::size_t j = 0; j < c; ++j) dr[j] += gr[j];
      }
      break;
    }
    case Op::ConcatCols: {
      const std::size_t r = n.shape[0], c = n.shape[1];
      std::size_t off = 0;
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        const std::size_t pc = nodes_[n.inputs[k].index].shape[1];
        if (live(k)) {
          auto& d = g(k);
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < pc; ++j) d[i * pc + j] += gy[i * c + off + j];
        }
        off += pc;
      }
      break;
    }
    case Op::ConcatRows: {
      std::size_t off = 0;
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        const std::size_t sz = shape_size(nodes_[n.inputs[k].index].shape);
        if (live(k)) {
          auto& d = g(k);
          for (std::size_t i = 0; i < sz; ++i) d[i] += gy[off + i];
        }
        off += sz;
      }
      break;
    }
    case Op::GatherRows: {
      auto& dx = g(0);
      const std::size_t c = dx.cols();
      for (std::size_t i = 0; i < n.indices.size(); ++i)
        for (std::size_t j = 0; j < c; ++j) dx[n.indices[i] * c + j] += gy[i * c + j];
      break;
    }
    case Op::GatherCols: {
      auto& dx = g(0);
      const std::size_t xc = dx.cols(), r = dx.rows(), c = n.indices.size();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) dx[i * xc + n.indices[j]] += gy[i * c + j];
      break;
    }
    case Op::CrossEntropy: {
      if (!live(0)) break;
      const auto& targets = in(1);
      auto& dl = g(0);
      const std::size_t r = dl.rows(), v = dl.cols();
      for (std::size_t i = 0; i < r; ++i) {
        const double t = targets[i];
        if (t < 0) continue;
        const double w = n.aux[i] * gy[0];
        const double* pr = n.aux.data() + r + i * v;
        double* dr = dl.data().data() + i * v;
        for (std::size_t j = 0; j < v; ++j) dr[j] += w * pr[j];
        dr[static_cast<std::size_t>(t)] -= w;
      }
      break;
    }
    case Op::Input:
    case Op::Parameter:
    case Op::Constant:
      break;
  }
}

// ---- finite differences ---------------------------------------------------

FiniteDifference finite_difference_check(Graph& graph, NodeId loss, std::string_view parameter, double epsilon,
                                         std::size_t max_coords) {
  if (!(epsilon > 0.0)) throw UsageError("finite_difference_check needs epsilon > 0");
  const Bindings bindings = graph.last_bindings();
  graph.evaluate(bindings);
  const GradientMap grads = graph.backward(loss);
  const Tensor& analytic = grads.find(parameter)->second;

  Tensor& w = graph.parameter_value(parameter);
  const std::size_t total = w.size();
  std::vector<std::size_t> coords(total);
  std::iota(coords.begin(), coords.end(), std::size_t{0});
  if (total > max_coords) {
    std::mt19937_64 rng(0x5eed);
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(max_coords);
    std::sort(coords.begin(), coords.end());
  }

  FiniteDifference out;
  out.coordinates = coords.size();
  double diff2 = 0.0, ref2 = 0.0;
  for (auto i : coords) {
    const double orig = w[i];
    w[i] = orig + epsilon;
    const double up = graph.evaluate(bindings)[0];
    graph.parameter_value(parameter)[i] = orig - epsilon;
    const double down = graph.evaluate(bindings)[0];
    graph.parameter_value(parameter)[i] = orig;
    const double central = (up - down) / (2.0 * epsilon);
    const double d = analytic[i] - central;
    out.max_elementwise = std::max(out.max_elementwise, std::abs(d) / (std::abs(central) + 1e-12));
    diff2 += d * d;
    ref2 += central * central;
  }
  graph.evaluate(bindings);
  out.normwise = ref2 > 0.0 ? std::sqrt(diff2 / ref2) : std::sqrt(diff2);
  return out;
}

}  // namespace gisp::ad
