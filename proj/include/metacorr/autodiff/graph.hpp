#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "metacorr/autodiff/array.hpp"
#include "metacorr/autodiff/param_set.hpp"

namespace metacorr::ad {

// Raised for shape mismatches, missing leaves and non-finite intermediates.
// The message always names the offending node.
class GraphError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class OpKind : std::uint8_t {
  kParam,
  kConstant,
  kAdd,
  kSub,
  kMul,
  kAffine,  // scale * a + shift
  kMatMul,
  kTranspose,
  kReshape,
  kBroadcastRows,  // [1xC] -> [NxC]
  kSumRows,        // [NxC] -> [1xC]
  kBroadcastCols,  // [Nx1] -> [NxC]
  kRowSum,         // [NxC] -> [Nx1]
  kFill,           // [1x1] -> any shape
  kSum,            // any -> [1x1]
  kSoftmax,        // over columns (the class axis)
  kLog,
  kReciprocal,
  kGather,   // [NxC] -> [Nx1], picks column labels[i] of row i
  kScatter,  // adjoint of kGather
  kLeakyRelu,
  kLeakySlope,  // derivative mask of kLeakyRelu; not differentiated
  kSigmoid,
  kUnfold,  // 3x3 zero-padded window rearrangement, [P x Ch] -> [P x 9Ch]
  kFold,    // adjoint of kUnfold
};

std::string_view op_name(OpKind kind);

// Spatial layout of a pixel matrix whose rows enumerate (image, y, x).
struct WindowGeometry {
  std::size_t images = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t pixels() const { return images * height * width; }
  friend bool operator==(const WindowGeometry&, const WindowGeometry&) = default;
};

struct Node {
  OpKind kind = OpKind::kConstant;
  int parents[2] = {-1, -1};
  Array value;
  std::string name;
  double scale = 1.0;  // affine scale, leaky slope
  double shift = 0.0;  // affine shift, log/reciprocal floor
  std::size_t extent = 0;
  std::vector<std::size_t> target_shape;
  std::shared_ptr<const std::vector<int>> labels;
  WindowGeometry geometry;

  int parent_count() const { return (parents[0] >= 0) + (parents[1] >= 0); }
};

class Graph;

// Handle to a node. Cheap to copy; valid while the owning graph lives.
class Var {
 public:
  Var() = default;
  Var(Graph* graph, int id) : graph_(graph), id_(id) {}

  Graph* graph() const { return graph_; }
  int id() const { return id_; }
  bool valid() const { return graph_ != nullptr && id_ >= 0; }
  const Array& value() const;
  const std::vector<std::size_t>& shape() const { return value().shape(); }

 private:
  Graph* graph_ = nullptr;
  int id_ = -1;
};

// Define-by-run expression graph. Nodes are stored in creation order, so
// parents always precede children. Backward passes append their gradient
// computations as ordinary nodes, which is what makes gradient-of-gradient
// available.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var param(const std::string& name, Array value);
  Var constant(Array value, std::string label = {});
  // Registers every entry of `params` as a leaf; returns name -> Var.
  std::unordered_map<std::string, Var> bind(const ParamSet& params);
  Var param_var(const std::string& name) const;
  bool has_param(const std::string& name) const { return params_.count(name) > 0; }

  std::size_t node_count() const { return nodes_.size(); }
  const Node& node(int id) const { return nodes_.at(static_cast<std::size_t>(id)); }
  std::string describe(int id) const;

  // Re-evaluates every node with the given leaf values and returns the value
  // of `root`. Every parameter leaf must be present with its original shape.
  Array forward(const ParamSet& leaves, Var root);

  // Reverse-mode gradient of a scalar root. The returned Vars are graph nodes
  // themselves and can be differentiated again. Leaves that the root does not
  // depend on get zero-valued constants.
  std::vector<Var> grad(Var root, std::span<const Var> wrt);
  // Gradient values for the named parameters (all parameters when empty).
  ParamSet gradient(Var root, const std::vector<std::string>& names = {});

  // Test hook: multiplies every backward contribution of `kind` by `scale`.
  void inject_backward_fault(OpKind kind, double scale);

  Var push(Node node);

 private:
  Array compute(const Node& node, int id) const;
  std::vector<std::optional<Var>> backward_rule(int id, Var upstream,
                                                const bool need[2]);

  std::vector<Node> nodes_;
  std::unordered_map<std::string, int> params_;
  std::optional<OpKind> fault_kind_;
  double fault_scale_ = 1.0;
};

// Primitive set. All operands must belong to the same graph.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var affine(Var a, double scale, double shift);
inline Var scale(Var a, double s) { return affine(a, s, 0.0); }
Var matmul(Var a, Var b);
Var transpose(Var a);
Var reshape(Var a, std::vector<std::size_t> shape);
Var broadcast_rows(Var a, std::size_t rows);
Var sum_rows(Var a);
Var broadcast_cols(Var a, std::size_t cols);
Var row_sum(Var a);
Var fill(Var a, std::vector<std::size_t> shape);
Var sum(Var a);
Var mean(Var a);
Var softmax(Var a);
// log(max(a, floor)); floor = 0 means an unguarded logarithm.
Var log(Var a, double floor = 0.0);
// 1/a where a >= floor, 0 elsewhere (floor = 0 means unguarded).
Var reciprocal(Var a, double floor = 0.0);
Var gather(Var a, std::shared_ptr<const std::vector<int>> labels);
Var scatter(Var a, std::shared_ptr<const std::vector<int>> labels,
            std::size_t classes);
Var leaky_relu(Var a, double slope = 0.01);
Var sigmoid(Var a);
Var unfold3x3(Var a, const WindowGeometry& geometry);
Var fold3x3(Var a, const WindowGeometry& geometry);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }

// d/dT [ (grad_w loss) . v ]: the mixed second derivative of `loss` with
// respect to the parameters named in `v` and then the parameters in `wrt`.
// Built by differentiating the first backward pass a second time.
ParamSet mixed_second_gradient(Var loss, const ParamSet& v,
                               const std::vector<std::string>& wrt);
// Same, reusing first-order gradient nodes from Graph::grad; first[i] pairs
// with the i-th entry of `v` in name order.
ParamSet mixed_second_gradient(std::span<const Var> first, const ParamSet& v,
                               const std::vector<std::string>& wrt);

}  // namespace metacorr::ad
