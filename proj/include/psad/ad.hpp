// Reverse-mode automatic differentiation over dense row-major matrices.
//
// A Graph is a tape: every primitive appends one node holding its forward
// value and a closure that pushes the node's gradient to its inputs.
// Graphs are rebuilt for every forward pass and are not thread-safe; use one
// Graph per thread. Parameters live in a ParameterStore outside the graph and
// are only read while a graph is being built.

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace psad::ad {

/// Dense row-major matrix of doubles. Vectors are 1 x n, scalars 1 x 1.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0)
      : rows(r), cols(c), data(r * c, fill) {}
  Matrix(std::size_t r, std::size_t c, std::vector<double> values);

  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);
  static Matrix row_vector(std::span<const double> values);

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  std::size_t size() const { return data.size(); }

  bool operator==(const Matrix&) const = default;
};

/// Raised when input shapes do not conform to a primitive's rules.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised for values outside a primitive's domain (log of <= 0, NaN logits).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

using ParamId = std::size_t;

struct Parameter {
  std::string name;
  Matrix value;
  bool trainable = true;
};

class ParameterStore {
 public:
  ParamId add(std::string name, Matrix init);

  Parameter& operator[](ParamId id) { return params_.at(id); }
  const Parameter& operator[](ParamId id) const { return params_.at(id); }
  std::size_t size() const { return params_.size(); }
  std::optional<ParamId> find(std::string_view name) const;

  /// Total number of scalar entries across all parameters.
  std::size_t scalar_count() const;

  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::vector<Parameter> params_;
};

/// Gradient per trainable parameter reachable from the loss.
using GradientMap = std::map<ParamId, Matrix>;

enum class Primitive {
  leaf,
  matmul,
  transpose,
  add,
  scale,
  offset,
  concat_cols,
  concat_rows,
  hadamard,
  row_softmax,
  sigmoid,
  tanh,
  gelu,
  relu,
  log,
  exp,
  sum,
  mean,
  max_over_rows,
  min_over_rows,
  gather_rows,
  gather_elements,
  masked_fill,
  clamp,
  layer_norm,
  stop_gradient,
};

std::string_view primitive_name(Primitive kind);

class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
class Tensor {
 public:
  Tensor() = default;

  std::size_t rows() const;
  std::size_t cols() const;
  const Matrix& value() const;
  double item() const;
  double at(std::size_t r, std::size_t c) const { return value()(r, c); }
  std::size_t node_id() const { return id_; }
  bool requires_grad() const;
  Graph* graph() const { return graph_; }
  bool valid() const { return graph_ != nullptr; }

 private:
  friend class Graph;
  Tensor(Graph* graph, std::size_t id) : graph_(graph), id_(id) {}

  Graph* graph_ = nullptr;
  std::size_t id_ = 0;
};

class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, std::size_t self)>;

  struct Node {
    Primitive kind = Primitive::leaf;
    Matrix value;
    Matrix grad;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
    std::optional<ParamId> param;
  };

  Graph() = default;
  /// With `record_gradients` false, parameter leaves do not require grad and
  /// no backward closures are stored (inference).
  explicit Graph(bool record_gradients) : record_gradients_(record_gradients) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Tensor constant(Matrix value);
  /// A requires-grad leaf that is not backed by a parameter (tests, probes).
  Tensor variable(Matrix value);
  /// Leaf holding a parameter's current value. Repeated calls share one node.
  Tensor param(const ParameterStore& store, ParamId id);

  /// Reverse pass from a 1x1 loss. Gradients of earlier calls are discarded.
  GradientMap backward(Tensor loss);

  /// Gradient of any node after the last backward(); zeros if not reached.
  Matrix gradient(Tensor t) const;

  const Node& node(std::size_t id) const { return nodes_.at(id); }
  Node& node(std::size_t id) { return nodes_.at(id); }
  std::size_t node_count() const { return nodes_.size(); }

  /// Appends a node. `requires_grad` is derived from the inputs.
  Tensor push(Primitive kind, Matrix value, std::vector<std::size_t> inputs,
              BackwardFn backward);

  /// Adds `g` into the gradient of node `id` if it requires grad.
  void accumulate(std::size_t id, const Matrix& g);
  Matrix& grad_of(std::size_t id) { return nodes_[id].grad; }

  /// Values of the stop-gradient nodes built so far, in creation order.
  std::vector<Matrix> stop_gradient_values() const;
  /// Makes the k-th stop-gradient node built from now on output `values[k]`
  /// instead of its input: the function seen by finite differences then
  /// treats every stopped value as a constant, as backward does.
  void replay_stop_gradients(std::vector<Matrix> values);
  /// Value for the next stop-gradient node given its input value.
  Matrix next_stop_gradient_value(const Matrix& input);

 private:
  std::vector<Node> nodes_;
  std::map<ParamId, std::size_t> param_nodes_;
  bool record_gradients_ = true;
  std::optional<std::vector<Matrix>> replay_;
  std::size_t replay_next_ = 0;
};

// Primitives. All inputs must belong to the same graph.

Tensor matmul(Tensor a, Tensor b);
Tensor transpose(Tensor a);
/// b may equal a's shape, be a 1 x cols row (broadcast over rows) or 1 x 1.
Tensor add(Tensor a, Tensor b);
Tensor sub(Tensor a, Tensor b);
Tensor scale(Tensor a, double factor);
Tensor offset(Tensor a, double shift);
Tensor concat_cols(Tensor a, Tensor b);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor hadamard(Tensor a, Tensor b);
/// Softmax along each row. Entries equal to -inf get probability 0.
Tensor row_softmax(Tensor a);
Tensor sigmoid(Tensor a);
Tensor tanh(Tensor a);
/// GeLU, tanh approximation.
Tensor gelu(Tensor a);
Tensor relu(Tensor a);
Tensor log(Tensor a);
Tensor exp(Tensor a);
Tensor sum(Tensor a);
Tensor mean(Tensor a);
/// Column-wise max over rows (1 x cols). Ties route to the first row.
Tensor max_over_rows(Tensor a);
Tensor min_over_rows(Tensor a);
Tensor gather_rows(Tensor a, std::vector<std::size_t> indices);
/// out(r, c) = a.data[index(r, c)]; `index` is row-major with shape rows x cols.
Tensor gather_elements(Tensor a, std::size_t rows, std::size_t cols,
                       std::vector<std::size_t> index);
/// Entries with mask != 0 are replaced by `fill` and receive no gradient.
Tensor masked_fill(Tensor a, std::vector<std::uint8_t> mask, double fill);
Tensor clamp(Tensor a, double lo, double hi);
/// Row-wise layer normalization with 1 x cols gain and bias.
Tensor layer_norm(Tensor a, Tensor gain, Tensor bias, double eps = 1e-5);
Tensor stop_gradient(Tensor a);

/// Extra arguments for primitives that take more than tensors.
struct PrimitiveArgs {
  double scalar = 0.0;
  double scalar2 = 0.0;
  std::vector<std::size_t> indices;
  std::vector<std::uint8_t> mask;
  std::size_t rows = 0;
  std::size_t cols = 0;
};

/// Uniform entry point over every primitive kind.
Tensor apply_primitive(Primitive kind, std::span<const Tensor> inputs,
                       const PrimitiveArgs& args = {});

/// Maximum relative error between analytic gradients of `forward` and central
/// finite differences over every scalar entry of `ids`. Absolute error is
/// used when both magnitudes are below 1e-8. Throws if two evaluations of
/// `forward` at the same point disagree.
///
/// With `freeze_stop_gradients`, the perturbed evaluations replay the
/// stop-gradient outputs of the unperturbed pass, so the differences see the
/// same function backward differentiates. Without it, paths through
/// stop-gradient nodes show up as disagreement.
double grad_check(const std::function<Tensor(Graph&)>& forward,
                  ParameterStore& store, std::span<const ParamId> ids,
                  double h = 1e-5, bool freeze_stop_gradients = true);

struct AdamState {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t step = 0;
  std::map<ParamId, Matrix> first_moment;
  std::map<ParamId, Matrix> second_moment;
};

/// Bias-corrected Adam update of every trainable parameter. A trainable
/// parameter without a gradient entry is an error.
void adam_step(ParameterStore& store, const GradientMap& grads, AdamState& state);

}  // namespace psad::ad
