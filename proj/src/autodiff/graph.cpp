#include "metacorr/autodiff/graph.hpp"

#include <algorithm>
#include <cmath>

namespace metacorr::ad {

namespace {

Graph* same_graph(Var a, Var b) {
  if (!a.valid() || !b.valid()) throw GraphError("operation on an empty Var");
  if (a.graph() != b.graph()) throw GraphError("operands belong to different graphs");
  return a.graph();
}

Graph* graph_of(Var a) {
  if (!a.valid()) throw GraphError("operation on an empty Var");
  return a.graph();
}

Node unary(OpKind kind, Var a) {
  Node n;
  n.kind = kind;
  n.parents[0] = a.id();
  return n;
}

Node binary(OpKind kind, Var a, Var b) {
  Node n;
  n.kind = kind;
  n.parents[0] = a.id();
  n.parents[1] = b.id();
  return n;
}

void require(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

void require_matrix(const Array& a) {
  require(a.rank() == 2, "expected a matrix, got " + shape_string(a.shape()));
}

// Neighbor row for window slot k of pixel row p, or -1 outside the image.
long neighbor_row(const WindowGeometry& g, std::size_t p, int k) {
  const std::size_t plane = g.height * g.width;
  const std::size_t img = p / plane;
  const long y = static_cast<long>((p % plane) / g.width) + k / 3 - 1;
  const long x = static_cast<long>(p % g.width) + k % 3 - 1;
  if (y < 0 || x < 0 || y >= static_cast<long>(g.height) ||
      x >= static_cast<long>(g.width))
    return -1;
  return static_cast<long>(img * plane + static_cast<std::size_t>(y) * g.width +
                           static_cast<std::size_t>(x));
}

}  // namespace

std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::kParam: return "param";
    case OpKind::kConstant: return "constant";
    case OpKind::kAdd: return "add";
    case OpKind::kSub: return "sub";
    case OpKind::kMul: return "mul";
    case OpKind::kAffine: return "affine";
    case OpKind::kMatMul: return "matmul";
    case OpKind::kTranspose: return "transpose";
    case OpKind::kReshape: return "reshape";
    case OpKind::kBroadcastRows: return "broadcast_rows";
    case OpKind::kSumRows: return "sum_rows";
    case OpKind::kBroadcastCols: return "broadcast_cols";
    case OpKind::kRowSum: return "row_sum";
    case OpKind::kFill: return "fill";
    case OpKind::kSum: return "sum";
    case OpKind::kSoftmax: return "softmax";
    case OpKind::kLog: return "log";
    case OpKind::kReciprocal: return "reciprocal";
    case OpKind::kGather: return "gather";
    case OpKind::kScatter: return "scatter";
    case OpKind::kLeakyRelu: return "leaky_relu";
    case OpKind::kLeakySlope: return "leaky_slope";
    case OpKind::kSigmoid: return "sigmoid";
    case OpKind::kUnfold: return "unfold3x3";
    case OpKind::kFold: return "fold3x3";
  }
  return "unknown";
}

const Array& Var::value() const {
  if (!valid()) throw GraphError("value() on an empty Var");
  return graph_->node(id_).value;
}

std::string Graph::describe(int id) const {
  const Node& n = node(id);
  std::string s = "node #" + std::to_string(id) + " (" + std::string(op_name(n.kind));
  if (!n.name.empty()) s += " '" + n.name + "'";
  return s + ")";
}

Var Graph::param(const std::string& name, Array value) {
  if (params_.count(name)) throw GraphError("duplicate parameter leaf '" + name + "'");
  Node n;
  n.kind = OpKind::kParam;
  n.name = name;
  n.value = std::move(value);
  Var v = push(std::move(n));
  params_.emplace(name, v.id());
  return v;
}

Var Graph::constant(Array value, std::string label) {
  Node n;
  n.kind = OpKind::kConstant;
  n.name = std::move(label);
  n.value = std::move(value);
  return push(std::move(n));
}

std::unordered_map<std::string, Var> Graph::bind(const ParamSet& params) {
  std::unordered_map<std::string, Var> out;
  for (const auto& [name, value] : params) out.emplace(name, param(name, value));
  return out;
}

Var Graph::param_var(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw GraphError("graph has no parameter '" + name + "'");
  return Var(const_cast<Graph*>(this), it->second);
}

Var Graph::push(Node node) {
  const int id = static_cast<int>(nodes_.size());
  for (int p : node.parents) {
    if (p >= id) throw GraphError("parent does not precede child");
  }
  if (node.kind != OpKind::kParam && node.kind != OpKind::kConstant) {
    nodes_.push_back(std::move(node));
    try {
      nodes_.back().value = compute(nodes_.back(), id);
    } catch (...) {
      nodes_.pop_back();
      throw;
    }
  } else {
    if (!node.value.all_finite()) {
      nodes_.push_back(std::move(node));
      std::string what = describe(id);
      nodes_.pop_back();
      throw GraphError("non-finite leaf value at " + what);
    }
    nodes_.push_back(std::move(node));
  }
  return Var(this, id);
}

Array Graph::forward(const ParamSet& leaves, Var root) {
  if (root.graph() != this) throw GraphError("root belongs to another graph");
  for (auto& [name, id] : params_) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!leaves.contains(name)) {
      throw GraphError("missing leaf value for " + describe(id));
    }
    const Array& v = leaves.at(name);
    if (!v.same_shape(n.value)) {
      throw GraphError("shape mismatch for " + describe(id) + ": expected " +
                       shape_string(n.value.shape()) + ", got " +
                       shape_string(v.shape()));
    }
    if (!v.all_finite()) throw GraphError("non-finite leaf value at " + describe(id));
    n.value = v;
  }
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    Node& n = nodes_[i];
    if (n.kind == OpKind::kParam || n.kind == OpKind::kConstant) continue;
    n.value = compute(n, static_cast<int>(i));
  }
  return root.value();
}

Array Graph::compute(const Node& n, int id) const {
  const Array* a = n.parents[0] >= 0 ? &nodes_[static_cast<std::size_t>(n.parents[0])].value : nullptr;
  const Array* b = n.parents[1] >= 0 ? &nodes_[static_cast<std::size_t>(n.parents[1])].value : nullptr;
  Array out;
  try {
    switch (n.kind) {
      case OpKind::kParam:
      case OpKind::kConstant:
        out = n.value;
        break;
      case OpKind::kAdd:
      case OpKind::kSub:
      case OpKind::kMul: {
        require(a->same_shape(*b), "elementwise operands " + shape_string(a->shape()) +
                                       " and " + shape_string(b->shape()));
        out = Array(a->shape());
        const double* pa = a->data().data();
        const double* pb = b->data().data();
        double* po = out.data().data();
        const std::size_t sz = a->size();
        if (n.kind == OpKind::kAdd) {
          for (std::size_t i = 0; i < sz; ++i) po[i] = pa[i] + pb[i];
        } else if (n.kind == OpKind::kSub) {
          for (std::size_t i = 0; i < sz; ++i) po[i] = pa[i] - pb[i];
        } else {
          for (std::size_t i = 0; i < sz; ++i) po[i] = pa[i] * pb[i];
        }
        break;
      }
      case OpKind::kAffine: {
        out = Array(a->shape());
        for (std::size_t i = 0; i < a->size(); ++i) out[i] = n.scale * (*a)[i] + n.shift;
        break;
      }
      case OpKind::kMatMul:
        require_matrix(*a);
        require_matrix(*b);
        out = ad::matmul(*a, *b);
        break;
      case OpKind::kTranspose:
        require_matrix(*a);
        out = ad::transpose(*a);
        break;
      case OpKind::kReshape: {
        out = Array(n.target_shape, a->storage());
        break;
      }
      case OpKind::kBroadcastRows: {
        require_matrix(*a);
        require(a->rows() == 1, "broadcast_rows expects one row, got " + shape_string(a->shape()));
        out = Array({n.extent, a->cols()});
        for (std::size_t r = 0; r < n.extent; ++r)
          std::copy(a->data().begin(), a->data().end(), out.data().begin() + static_cast<long>(r * a->cols()));
        break;
      }
      case OpKind::kSumRows: {
        require_matrix(*a);
        out = Array({1, a->cols()});
        for (std::size_t r = 0; r < a->rows(); ++r)
          for (std::size_t c = 0; c < a->cols(); ++c) out[c] += a->at(r, c);
        break;
      }
      case OpKind::kBroadcastCols: {
        require_matrix(*a);
        require(a->cols() == 1, "broadcast_cols expects one column, got " + shape_string(a->shape()));
        out = Array({a->rows(), n.extent});
        for (std::size_t r = 0; r < a->rows(); ++r)
          for (std::size_t c = 0; c < n.extent; ++c) out.at(r, c) = (*a)[r];
        break;
      }
      case OpKind::kRowSum: {
        require_matrix(*a);
        out = Array({a->rows(), 1});
        for (std::size_t r = 0; r < a->rows(); ++r) {
          double s = 0.0;
          for (std::size_t c = 0; c < a->cols(); ++c) s += a->at(r, c);
          out[r] = s;
        }
        break;
      }
      case OpKind::kFill:
        require(a->size() == 1, "fill expects a scalar, got " + shape_string(a->shape()));
        out = Array(n.target_shape, (*a)[0]);
        break;
      case OpKind::kSum: {
        double s = 0.0;
        for (double v : a->data()) s += v;
        out = Array::scalar(s);
        break;
      }
      case OpKind::kSoftmax:
        require_matrix(*a);
        out = softmax_rows(*a);
        break;
      case OpKind::kLog: {
        out = Array(a->shape());
        for (std::size_t i = 0; i < a->size(); ++i)
          out[i] = std::log(n.shift > 0.0 ? std::max((*a)[i], n.shift) : (*a)[i]);
        break;
      }
      case OpKind::kReciprocal: {
        out = Array(a->shape());
        for (std::size_t i = 0; i < a->size(); ++i) {
          const double x = (*a)[i];
          out[i] = (n.shift > 0.0 && x < n.shift) ? 0.0 : 1.0 / x;
        }
        break;
      }
      case OpKind::kGather: {
        require_matrix(*a);
        require(n.labels && n.labels->size() == a->rows(),
                "gather label count does not match " + shape_string(a->shape()));
        out = Array({a->rows(), 1});
        for (std::size_t r = 0; r < a->rows(); ++r) {
          const int k = (*n.labels)[r];
          require(k >= 0 && static_cast<std::size_t>(k) < a->cols(),
                  "gather label " + std::to_string(k) + " out of range");
          out[r] = a->at(r, static_cast<std::size_t>(k));
        }
        break;
      }
      case OpKind::kScatter: {
        require_matrix(*a);
        require(a->cols() == 1 && n.labels && n.labels->size() == a->rows(),
                "scatter expects an Nx1 operand matching the labels");
        out = Array({a->rows(), n.extent});
        for (std::size_t r = 0; r < a->rows(); ++r) {
          const int k = (*n.labels)[r];
          require(k >= 0 && static_cast<std::size_t>(k) < n.extent,
                  "scatter label " + std::to_string(k) + " out of range");
          out.at(r, static_cast<std::size_t>(k)) = (*a)[r];
        }
        break;
      }
      case OpKind::kLeakyRelu: {
        out = Array(a->shape());
        for (std::size_t i = 0; i < a->size(); ++i) {
          const double x = (*a)[i];
          out[i] = x > 0.0 ? x : n.scale * x;
        }
        break;
      }
      case OpKind::kLeakySlope: {
        out = Array(a->shape());
        for (std::size_t i = 0; i < a->size(); ++i) out[i] = (*a)[i] > 0.0 ? 1.0 : n.scale;
        break;
      }
      case OpKind::kSigmoid: {
        out = Array(a->shape());
        for (std::size_t i = 0; i < a->size(); ++i) {
          const double x = (*a)[i];
          out[i] = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
        }
        break;
      }
      case OpKind::kUnfold: {
        require_matrix(*a);
        const WindowGeometry& g = n.geometry;
        require(a->rows() == g.pixels(), "unfold3x3 expects " + std::to_string(g.pixels()) +
                                             " rows, got " + shape_string(a->shape()));
        const std::size_t ch = a->cols();
        out = Array({a->rows(), 9 * ch});
        for (std::size_t p = 0; p < a->rows(); ++p)
          for (int k = 0; k < 9; ++k) {
            const long q = neighbor_row(g, p, k);
            if (q < 0) continue;
            const double* src = a->data().data() + static_cast<std::size_t>(q) * ch;
            std::copy(src, src + ch, out.data().data() + p * 9 * ch + static_cast<std::size_t>(k) * ch);
          }
        break;
      }
      case OpKind::kFold: {
        require_matrix(*a);
        const WindowGeometry& g = n.geometry;
        require(a->rows() == g.pixels() && a->cols() % 9 == 0,
                "fold3x3 expects " + std::to_string(g.pixels()) + " x 9k, got " +
                    shape_string(a->shape()));
        const std::size_t ch = a->cols() / 9;
        out = Array({a->rows(), ch});
        for (std::size_t p = 0; p < a->rows(); ++p)
          for (int k = 0; k < 9; ++k) {
            const long q = neighbor_row(g, p, k);
            if (q < 0) continue;
            const double* src = a->data().data() + p * 9 * ch + static_cast<std::size_t>(k) * ch;
            double* dst = out.data().data() + static_cast<std::size_t>(q) * ch;
            for (std::size_t c = 0; c < ch; ++c) dst[c] += src[c];
          }
        break;
      }
    }
  } catch (const ShapeError& e) {
    throw GraphError("shape error at " + describe(id) + ": " + e.what());
  }
  if (!out.all_finite()) throw GraphError("non-finite value at " + describe(id));
  return out;
}

std::vector<std::optional<Var>> Graph::backward_rule(int id, Var g, const bool need[2]) {
  // Copy what we need: pushing nodes may reallocate nodes_.
  const Node n = [&] {
    Node copy;
    const Node& src = nodes_[static_cast<std::size_t>(id)];
    copy.kind = src.kind;
    copy.parents[0] = src.parents[0];
    copy.parents[1] = src.parents[1];
    copy.scale = src.scale;
    copy.shift = src.shift;
    copy.extent = src.extent;
    copy.labels = src.labels;
    copy.geometry = src.geometry;
    return copy;
  }();
  Var self(this, id);
  Var a(this, n.parents[0]);
  Var b(this, n.parents[1]);
  std::vector<std::optional<Var>> out(2);
  auto set = [&](int slot, auto&& make) {
    if (need[slot]) out[static_cast<std::size_t>(slot)] = make();
  };
  switch (n.kind) {
    case OpKind::kParam:
    case OpKind::kConstant:
    case OpKind::kLeakySlope:
      break;
    case OpKind::kAdd:
      set(0, [&] { return g; });
      set(1, [&] { return g; });
      break;
    case OpKind::kSub:
      set(0, [&] { return g; });
      set(1, [&] { return scale(g, -1.0); });
      break;
    case OpKind::kMul:
      set(0, [&] { return mul(g, b); });
      set(1, [&] { return mul(g, a); });
      break;
    case OpKind::kAffine:
      set(0, [&] { return scale(g, n.scale); });
      break;
    case OpKind::kMatMul:
      set(0, [&] { return matmul(g, transpose(b)); });
      set(1, [&] { return matmul(transpose(a), g); });
      break;
    case OpKind::kTranspose:
      set(0, [&] { return transpose(g); });
      break;
    case OpKind::kReshape:
      set(0, [&] { return reshape(g, a.shape()); });
      break;
    case OpKind::kBroadcastRows:
      set(0, [&] { return sum_rows(g); });
      break;
    case OpKind::kSumRows:
      set(0, [&] { return broadcast_rows(g, a.value().rows()); });
      break;
    case OpKind::kBroadcastCols:
      set(0, [&] { return row_sum(g); });
      break;
    case OpKind::kRowSum:
      set(0, [&] { return broadcast_cols(g, a.value().cols()); });
      break;
    case OpKind::kFill:
      set(0, [&] { return sum(g); });
      break;
    case OpKind::kSum:
      set(0, [&] { return fill(g, a.shape()); });
      break;
    case OpKind::kSoftmax:
      set(0, [&] {
        Var dot = row_sum(mul(g, self));
        return mul(self, sub(g, broadcast_cols(dot, self.value().cols())));
      });
      break;
    case OpKind::kLog:
      set(0, [&] { return mul(g, reciprocal(a, n.shift)); });
      break;
    case OpKind::kReciprocal:
      set(0, [&] { return mul(g, scale(mul(self, self), -1.0)); });
      break;
    case OpKind::kGather:
      set(0, [&] { return scatter(g, n.labels, a.value().cols()); });
      break;
    case OpKind::kScatter:
      set(0, [&] { return gather(g, n.labels); });
      break;
    case OpKind::kLeakyRelu:
      set(0, [&] {
        Node slope = unary(OpKind::kLeakySlope, a);
        slope.scale = n.scale;
        return mul(g, push(std::move(slope)));
      });
      break;
    case OpKind::kSigmoid:
      set(0, [&] { return mul(g, mul(self, affine(self, -1.0, 1.0))); });
      break;
    case OpKind::kUnfold:
      set(0, [&] { return fold3x3(g, n.geometry); });
      break;
    case OpKind::kFold:
      set(0, [&] { return unfold3x3(g, n.geometry); });
      break;
  }
  if (fault_kind_ && *fault_kind_ == n.kind) {
    for (auto& v : out)
      if (v) v = scale(*v, fault_scale_);
  }
  return out;
}

std::vector<Var> Graph::grad(Var root, std::span<const Var> wrt) {
  if (root.graph() != this) throw GraphError("root belongs to another graph");
  if (root.value().size() != 1) {
    throw GraphError("gradient root " + describe(root.id()) + " is not scalar: " +
                     shape_string(root.shape()));
  }
  const auto n = static_cast<std::size_t>(root.id()) + 1;
  std::vector<char> target(n, 0), needs(n, 0);
  for (const Var& w : wrt) {
    if (w.graph() != this) throw GraphError("gradient target belongs to another graph");
    if (static_cast<std::size_t>(w.id()) < n) target[static_cast<std::size_t>(w.id())] = 1;
  }
  for (std::size_t i = 0; i < n; ++i) {
    const Node& node = nodes_[i];
    if (target[i]) {
      needs[i] = 1;
      continue;
    }
    if (node.kind == OpKind::kLeakySlope) continue;
    for (int p : node.parents)
      if (p >= 0 && needs[static_cast<std::size_t>(p)]) needs[i] = 1;
  }

  std::vector<std::optional<Var>> grads(n);
  if (needs[n - 1]) grads[n - 1] = constant(Array(root.shape(), 1.0), "seed");
  for (std::size_t i = n; i-- > 0;) {
    if (!grads[i] || !needs[i] || target[i]) continue;
    const int p0 = nodes_[i].parents[0], p1 = nodes_[i].parents[1];
    const bool need[2] = {p0 >= 0 && needs[static_cast<std::size_t>(p0)] != 0,
                          p1 >= 0 && needs[static_cast<std::size_t>(p1)] != 0};
    if (!need[0] && !need[1]) continue;
    auto parts = backward_rule(static_cast<int>(i), *grads[i], need);
    const int ps[2] = {p0, p1};
    for (int s = 0; s < 2; ++s) {
      if (!parts[static_cast<std::size_t>(s)]) continue;
      auto& slot = grads[static_cast<std::size_t>(ps[s])];
      slot = slot ? add(*slot, *parts[static_cast<std::size_t>(s)]) : *parts[static_cast<std::size_t>(s)];
    }
  }

  std::vector<Var> out;
  out.reserve(wrt.size());
  for (const Var& w : wrt) {
    const auto id = static_cast<std::size_t>(w.id());
    if (id < n && grads[id]) {
      out.push_back(*grads[id]);
    } else {
      out.push_back(constant(Array::zeros_like(w.value()), "zero_grad"));
    }
  }
  return out;
}

ParamSet Graph::gradient(Var root, const std::vector<std::string>& names) {
  std::vector<std::string> targets = names;
  if (targets.empty()) {
    for (const auto& [name, _] : params_) targets.push_back(name);
    std::sort(targets.begin(), targets.end());
  }
  std::vector<Var> vars;
  vars.reserve(targets.size());
  for (const auto& name : targets) vars.push_back(param_var(name));
  auto grads = grad(root, vars);
  ParamSet out;
  for (std::size_t i = 0; i < targets.size(); ++i) out.add(targets[i], grads[i].value());
  return out;
}

void Graph::inject_backward_fault(OpKind kind, double scale) {
  fault_kind_ = kind;
  fault_scale_ = scale;
}

Var add(Var a, Var b) { return same_graph(a, b)->push(binary(OpKind::kAdd, a, b)); }
Var sub(Var a, Var b) { return same_graph(a, b)->push(binary(OpKind::kSub, a, b)); }
Var mul(Var a, Var b) { return same_graph(a, b)->push(binary(OpKind::kMul, a, b)); }

Var affine(Var a, double s, double shift) {
  Node n = unary(OpKind::kAffine, a);
  n.scale = s;
  n.shift = shift;
  return graph_of(a)->push(std::move(n));
}

Var matmul(Var a, Var b) { return same_graph(a, b)->push(binary(OpKind::kMatMul, a, b)); }
Var transpose(Var a) { return graph_of(a)->push(unary(OpKind::kTranspose, a)); }

Var reshape(Var a, std::vector<std::size_t> shape) {
  Node n = unary(OpKind::kReshape, a);
  n.target_shape = std::move(shape);
  return graph_of(a)->push(std::move(n));
}

Var broadcast_rows(Var a, std::size_t rows) {
  Node n = unary(OpKind::kBroadcastRows, a);
  n.extent = rows;
  return graph_of(a)->push(std::move(n));
}

Var sum_rows(Var a) { return graph_of(a)->push(unary(OpKind::kSumRows, a)); }

Var broadcast_cols(Var a, std::size_t cols) {
  Node n = unary(OpKind::kBroadcastCols, a);
  n.extent = cols;
  return graph_of(a)->push(std::move(n));
}

Var row_sum(Var a) { return graph_of(a)->push(unary(OpKind::kRowSum, a)); }

Var fill(Var a, std::vector<std::size_t> shape) {
  Node n = unary(OpKind::kFill, a);
  n.target_shape = std::move(shape);
  return graph_of(a)->push(std::move(n));
}

Var sum(Var a) { return graph_of(a)->push(unary(OpKind::kSum, a)); }

Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

Var softmax(Var a) { return graph_of(a)->push(unary(OpKind::kSoftmax, a)); }

Var log(Var a, double floor) {
  Node n = unary(OpKind::kLog, a);
  n.shift = floor;
  return graph_of(a)->push(std::move(n));
}

Var reciprocal(Var a, double floor) {
  Node n = unary(OpKind::kReciprocal, a);
  n.shift = floor;
  return graph_of(a)->push(std::move(n));
}

Var gather(Var a, std::shared_ptr<const std::vector<int>> labels) {
  Node n = unary(OpKind::kGather, a);
  n.labels = std::move(labels);
  return graph_of(a)->push(std::move(n));
}

Var scatter(Var a, std::shared_ptr<const std::vector<int>> labels, std::size_t classes) {
  Node n = unary(OpKind::kScatter, a);
  n.labels = std::move(labels);
  n.extent = classes;
  return graph_of(a)->push(std::move(n));
}

Var leaky_relu(Var a, double slope) {
  Node n = unary(OpKind::kLeakyRelu, a);
  n.scale = slope;
  return graph_of(a)->push(std::move(n));
}

Var sigmoid(Var a) { return graph_of(a)->push(unary(OpKind::kSigmoid, a)); }

Var unfold3x3(Var a, const WindowGeometry& geometry) {
  Node n = unary(OpKind::kUnfold, a);
  n.geometry = geometry;
  return graph_of(a)->push(std::move(n));
}

Var fold3x3(Var a, const WindowGeometry& geometry) {
  Node n = unary(OpKind::kFold, a);
  n.geometry = geometry;
  return graph_of(a)->push(std::move(n));
}

ParamSet mixed_second_gradient(Var loss, const ParamSet& v,
                               const std::vector<std::string>& wrt) {
  Graph& g = *graph_of(loss);
  std::vector<Var> first_targets;
  for (const auto& entry : v) first_targets.push_back(g.param_var(entry.first));
  const auto first = g.grad(loss, first_targets);
  return mixed_second_gradient(first, v, wrt);
}

ParamSet mixed_second_gradient(std::span<const Var> first, const ParamSet& v,
                               const std::vector<std::string>& wrt) {
  if (first.size() != v.size())
    throw GraphError("mixed_second_gradient: " + std::to_string(first.size()) +
                     " gradients for " + std::to_string(v.size()) + " directions");
  if (first.empty()) throw GraphError("mixed_second_gradient needs a non-empty direction");
  Graph& g = *graph_of(first.front());
  std::optional<Var> inner;
  std::size_t i = 0;
  for (const auto& [name, direction] : v) {
    const Var& gi = first[i++];
    if (!gi.value().same_shape(direction)) {
      throw GraphError("direction for '" + name + "' has shape " +
                       shape_string(direction.shape()) + ", gradient has " +
                       shape_string(gi.shape()));
    }
    Var term = sum(mul(gi, g.constant(direction, "direction:" + name)));
    inner = inner ? add(*inner, term) : term;
  }
  return g.gradient(*inner, wrt);
}

}  // namespace metacorr::ad
