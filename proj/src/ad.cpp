#include "psad/ad.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

namespace psad::ad {

Matrix::Matrix(std::size_t r, std::size_t c, std::vector<double> values)
    : rows(r), cols(c), data(std::move(values)) {
  if (data.size() != r * c) {
    throw ShapeError("Matrix: " + std::to_string(data.size()) + " values for shape " +
                     std::to_string(r) + "x" + std::to_string(c));
  }
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  Matrix m;
  m.rows = rows.size();
  m.cols = rows.size() == 0 ? 0 : rows.begin()->size();
  for (const auto& row : rows) {
    if (row.size() != m.cols) throw ShapeError("Matrix::from_rows: ragged rows");
    m.data.insert(m.data.end(), row.begin(), row.end());
  }
  return m;
}

Matrix Matrix::row_vector(std::span<const double> values) {
  return Matrix(1, values.size(), std::vector<double>(values.begin(), values.end()));
}

ParamId ParameterStore::add(std::string name, Matrix init) {
  if (find(name)) throw std::invalid_argument("duplicate parameter name: " + name);
  params_.push_back(Parameter{std::move(name), std::move(init), true});
  return params_.size() - 1;
}

std::optional<ParamId> ParameterStore::find(std::string_view name) const {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (params_[i].name == name) return i;
  }
  return std::nullopt;
}

std::size_t ParameterStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

std::string_view primitive_name(Primitive kind) {
  switch (kind) {
    case Primitive::leaf: return "leaf";
    case Primitive::matmul: return "matmul";
    case Primitive::transpose: return "transpose";
    case Primitive::add: return "add";
    case Primitive::scale: return "scale";
    case Primitive::offset: return "offset";
    case Primitive::concat_cols: return "concat-last-dim";
    case Primitive::concat_rows: return "concat-rows";
    case Primitive::hadamard: return "hadamard";
    case Primitive::row_softmax: return "row-softmax";
    case Primitive::sigmoid: return "sigmoid";
    case Primitive::tanh: return "tanh";
    case Primitive::gelu: return "gelu";
    case Primitive::relu: return "relu";
    case Primitive::log: return "log";
    case Primitive::exp: return "exp";
    case Primitive::sum: return "sum";
    case Primitive::mean: return "mean";
    case Primitive::max_over_rows: return "max";
    case Primitive::min_over_rows: return "min";
    case Primitive::gather_rows: return "gather-rows";
    case Primitive::gather_elements: return "gather-elements";
    case Primitive::masked_fill: return "masked-fill";
    case Primitive::clamp: return "clamp";
    case Primitive::layer_norm: return "layer-norm";
    case Primitive::stop_gradient: return "stop-gradient";
  }
  return "unknown";
}

// ---------------------------------------------------------------------------
// Tensor

std::size_t Tensor::rows() const { return graph_->node(id_).value.rows; }
std::size_t Tensor::cols() const { return graph_->node(id_).value.cols; }
const Matrix& Tensor::value() const { return graph_->node(id_).value; }
bool Tensor::requires_grad() const { return graph_->node(id_).requires_grad; }

double Tensor::item() const {
  const Matrix& v = value();
  if (v.size() != 1) throw ShapeError("item: tensor is not scalar");
  return v.data[0];
}

// ---------------------------------------------------------------------------
// Graph

Tensor Graph::constant(Matrix value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Tensor(this, nodes_.size() - 1);
}

Tensor Graph::variable(Matrix value) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  return Tensor(this, nodes_.size() - 1);
}

Tensor Graph::param(const ParameterStore& store, ParamId id) {
  if (auto it = param_nodes_.find(id); it != param_nodes_.end()) {
    return Tensor(this, it->second);
  }
  Node n;
  n.value = store[id].value;
  n.requires_grad = record_gradients_ && store[id].trainable;
  n.param = id;
  nodes_.push_back(std::move(n));
  param_nodes_[id] = nodes_.size() - 1;
  return Tensor(this, nodes_.size() - 1);
}

Tensor Graph::push(Primitive kind, Matrix value, std::vector<std::size_t> inputs,
                   BackwardFn backward) {
  Node n;
  n.kind = kind;
  n.value = std::move(value);
  if (kind != Primitive::stop_gradient) {
    for (std::size_t in : inputs) n.requires_grad = n.requires_grad || nodes_[in].requires_grad;
  }
  n.inputs = std::move(inputs);
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Tensor(this, nodes_.size() - 1);
}

void Graph::accumulate(std::size_t id, const Matrix& g) {
  Node& n = nodes_[id];
  if (!n.requires_grad) return;
  for (std::size_t i = 0; i < g.data.size(); ++i) n.grad.data[i] += g.data[i];
}

GradientMap Graph::backward(Tensor loss) {
  if (loss.graph() != this) throw std::invalid_argument("backward: loss from another graph");
  if (loss.value().size() != 1) {
    throw ShapeError("backward: loss must be scalar, got " + std::to_string(loss.rows()) +
                     "x" + std::to_string(loss.cols()));
  }
  const std::size_t root = loss.node_id();
  for (std::size_t i = 0; i <= root; ++i) {
    Node& n = nodes_[i];
    n.grad = Matrix(n.value.rows, n.value.cols, 0.0);
  }
  for (std::size_t i = root + 1; i < nodes_.size(); ++i) nodes_[i].grad = Matrix();

  // Ancestors of the loss, following stop-gradient edges too, so parameters
  // severed from the loss still report an explicit zero gradient.
  std::vector<std::uint8_t> reachable(root + 1, 0);
  reachable[root] = 1;
  for (std::size_t i = root + 1; i-- > 0;) {
    if (!reachable[i]) continue;
    for (std::size_t in : nodes_[i].inputs) reachable[in] = 1;
  }

  if (nodes_[root].requires_grad) nodes_[root].grad.data[0] = 1.0;
  for (std::size_t i = root + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!reachable[i] || !n.requires_grad || !n.backward) continue;
    n.backward(*this, i);
  }

  GradientMap grads;
  for (const auto& [pid, nid] : param_nodes_) {
    if (nid <= root && reachable[nid] && nodes_[nid].requires_grad) {
      grads.emplace(pid, nodes_[nid].grad);
    }
  }
  return grads;
}

std::vector<Matrix> Graph::stop_gradient_values() const {
  std::vector<Matrix> out;
  for (const Node& n : nodes_)
    if (n.kind == Primitive::stop_gradient) out.push_back(n.value);
  return out;
}

void Graph::replay_stop_gradients(std::vector<Matrix> values) {
  replay_ = std::move(values);
  replay_next_ = 0;
}

Matrix Graph::next_stop_gradient_value(const Matrix& input) {
  if (!replay_) return input;
  if (replay_next_ >= replay_->size()) {
    throw std::logic_error("stop-gradient replay: more stop-gradient nodes than recorded values");
  }
  const Matrix& v = (*replay_)[replay_next_++];
  if (v.rows != input.rows || v.cols != input.cols) {
    throw ShapeError("stop-gradient replay: recorded " + std::to_string(v.rows) + "x" + std::to_string(v.cols) +
                     " for a " + std::to_string(input.rows) + "x" + std::to_string(input.cols) + " input");
  }
  return v;
}

Matrix Graph::gradient(Tensor t) const {
  const Node& n = nodes_.at(t.node_id());
  if (n.grad.size() != n.value.size()) return Matrix(n.value.rows, n.value.cols, 0.0);
  return n.grad;
}

// ---------------------------------------------------------------------------
// Kernels

namespace {

Graph& graph_of(std::initializer_list<Tensor> ts, std::string_view op) {
  Graph* g = nullptr;
  for (const Tensor& t : ts) {
    if (!t.valid()) throw std::invalid_argument(std::string(op) + ": invalid tensor");
    if (g == nullptr) g = t.graph();
    if (t.graph() != g) throw std::invalid_argument(std::string(op) + ": tensors from different graphs");
  }
  return *g;
}

std::string dims(const Matrix& m) {
  return std::to_string(m.rows) + "x" + std::to_string(m.cols);
}

[[noreturn]] void shape_error(std::string_view op, const Matrix& a, const Matrix& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + dims(a) + " and " + dims(b));
}

// C (+)= op(A) * op(B)
void gemm(const Matrix& a, bool ta, const Matrix& b, bool tb, Matrix& c) {
  const std::size_t m = ta ? a.cols : a.rows;
  const std::size_t k = ta ? a.rows : a.cols;
  const std::size_t n = tb ? b.rows : b.cols;
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = &c.data[i * n];
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ta ? a.data[p * a.cols + i] : a.data[i * a.cols + p];
      if (av == 0.0) continue;
      if (!tb) {
        const double* brow = &b.data[p * n];
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      } else {
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * b.data[j * b.cols + p];
      }
    }
  }
}

template <class F>
Tensor unary(Tensor a, Primitive kind, F f, std::function<double(double x, double y)> dfdx) {
  Graph& g = graph_of({a}, primitive_name(kind));
  Matrix out = a.value();
  for (double& v : out.data) v = f(v);
  const std::size_t ia = a.node_id();
  return g.push(kind, std::move(out), {ia}, [ia, dfdx](Graph& gr, std::size_t self) {
    const Graph::Node& n = gr.node(self);
    Matrix& ga = gr.grad_of(ia);
    if (!gr.node(ia).requires_grad) return;
    const Matrix& x = gr.node(ia).value;
    for (std::size_t i = 0; i < n.grad.data.size(); ++i) {
      ga.data[i] += n.grad.data[i] * dfdx(x.data[i], n.value.data[i]);
    }
  });
}

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

double gelu_value(double x) {
  return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x)));
}

double gelu_derivative(double x) {
  const double u = kGeluC * (x + kGeluA * x * x * x);
  const double t = std::tanh(u);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
}

}  // namespace

Tensor matmul(Tensor a, Tensor b) {
  Graph& g = graph_of({a, b}, "matmul");
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (av.cols != bv.rows) shape_error("matmul", av, bv);
  Matrix out(av.rows, bv.cols, 0.0);
  gemm(av, false, bv, false, out);
  const std::size_t ia = a.node_id(), ib = b.node_id();
  return g.push(Primitive::matmul, std::move(out), {ia, ib}, [ia, ib](Graph& gr, std::size_t self) {
    const Matrix& go = gr.node(self).grad;
    if (gr.node(ia).requires_grad) gemm(go, false, gr.node(ib).value, true, gr.grad_of(ia));
    if (gr.node(ib).requires_grad) gemm(gr.node(ia).value, true, go, false, gr.grad_of(ib));
  });
}

Tensor transpose(Tensor a) {
  Graph& g = graph_of({a}, "transpose");
  const Matrix& av = a.value();
  Matrix out(av.cols, av.rows);
  for (std::size_t r = 0; r < av.rows; ++r)
    for (std::size_t c = 0; c < av.cols; ++c) out(c, r) = av(r, c);
  const std::size_t ia = a.node_id();
  return g.push(Primitive::transpose, std::move(out), {ia}, [ia](Graph& gr, std::size_t self) {
    const Matrix& go = gr.node(self).grad;
    Matrix& ga = gr.grad_of(ia);
    for (std::size_t r = 0; r < ga.rows; ++r)
      for (std::size_t c = 0; c < ga.cols; ++c) ga(r, c) += go(c, r);
  });
}

Tensor add(Tensor a, Tensor b) {
  Graph& g = graph_of({a, b}, "add");
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  enum class Mode { same, row, scalar } mode;
  if (av.rows == bv.rows && av.cols == bv.cols) mode = Mode::same;
  else if (bv.rows == 1 && bv.cols == av.cols) mode = Mode::row;
  else if (bv.rows == 1 && bv.cols == 1) mode = Mode::scalar;
  else shape_error("add", av, bv);
  Matrix out = av;
  for (std::size_t r = 0; r < av.rows; ++r) {
    for (std::size_t c = 0; c < av.cols; ++c) {
      const double bb = mode == Mode::same ? bv(r, c) : mode == Mode::row ? bv.data[c] : bv.data[0];
      out(r, c) += bb;
    }
  }
  const std::size_t ia = a.node_id(), ib = b.node_id();
  return g.push(Primitive::add, std::move(out), {ia, ib}, [ia, ib, mode](Graph& gr, std::size_t self) {
    const Matrix& go = gr.node(self).grad;
    gr.accumulate(ia, go);
    if (!gr.node(ib).requires_grad) return;
    Matrix& gb = gr.grad_of(ib);
    if (mode == Mode::same) {
      for (std::size_t i = 0; i < go.data.size(); ++i) gb.data[i] += go.data[i];
    } else if (mode == Mode::row) {
      for (std::size_t r = 0; r < go.rows; ++r)
        for (std::size_t c = 0; c < go.cols; ++c) gb.data[c] += go(r, c);
    } else {
      for (double v : go.data) gb.data[0] += v;
    }
  });
}

Tensor sub(Tensor a, Tensor b) { return add(a, scale(b, -1.0)); }

Tensor scale(Tensor a, double factor) {
  return unary(a, Primitive::scale, [factor](double x) { return x * factor; },
               [factor](double, double) { return factor; });
}

Tensor offset(Tensor a, double shift) {
  return unary(a, Primitive::offset, [shift](double x) { return x + shift; },
               [](double, double) { return 1.0; });
}

Tensor concat_cols(Tensor a, Tensor b) {
  Graph& g = graph_of({a, b}, "concat-last-dim");
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (av.rows != bv.rows) shape_error("concat-last-dim", av, bv);
  Matrix out(av.rows, av.cols + bv.cols);
  for (std::size_t r = 0; r < av.rows; ++r) {
    std::copy_n(&av.data[r * av.cols], av.cols, &out.data[r * out.cols]);
    std::copy_n(&bv.data[r * bv.cols], bv.cols, &out.data[r * out.cols + av.cols]);
  }
  const std::size_t ia = a.node_id(), ib = b.node_id();
  const std::size_t ac = av.cols, bc = bv.cols;
  return g.push(Primitive::concat_cols, std::move(out), {ia, ib}, [=](Graph& gr, std::size_t self) {
    const Matrix& go = gr.node(self).grad;
    const bool ra = gr.node(ia).requires_grad, rb = gr.node(ib).requires_grad;
    for (std::size_t r = 0; r < go.rows; ++r) {
      if (ra)
        for (std::size_t c = 0; c < ac; ++c) gr.grad_of(ia)(r, c) += go(r, c);
      if (rb)
        for (std::size_t c = 0; c < bc; ++c) gr.grad_of(ib)(r, c) += go(r, ac + c);
    }
  });
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat-rows: no inputs");
  Graph& g = graph_of({parts.front()}, "concat-rows");
  const std::size_t cols = parts.front().cols();
  std::size_t rows = 0;
  std::vector<std::size_t> ids;
  for (const Tensor& t : parts) {
    if (t.graph() != &g) throw std::invalid_argument("concat-rows: tensors from different graphs");
    if (t.cols() != cols) shape_error("concat-rows", parts.front().value(), t.value());
    rows += t.rows();
    ids.push_back(t.node_id());
  }
  Matrix out(rows, cols);
  std::size_t at = 0;
  for (const Tensor& t : parts) {
    std::copy(t.value().data.begin(), t.value().data.end(), out.data.begin() + at);
    at += t.value().size();
  }
  return g.push(Primitive::concat_rows, std::move(out), ids, [ids](Graph& gr, std::size_t self) {
    const Matrix& go = gr.node(self).grad;
    std::size_t pos = 0;
    for (std::size_t id : ids) {
      const std::size_t n = gr.node(id).value.size();
      if (gr.node(id).requires_grad) {
        Matrix& gi = gr.grad_of(id);
        for (std::size_t i = 0; i < n; ++i) gi.data[i] += go.data[pos + i];
      }
      pos += n;
    }
  });
}

Tensor hadamard(Tensor a, Tensor b) {
  Graph& g = graph_of({a, b}, "hadamard");
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (av.rows != bv.rows || av.cols != bv.cols) shape_error("hadamard", av, bv);
  Matrix out = av;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= bv.data[i];
  const std::size_t ia = a.node_id(), ib = b.node_id();
  return g.push(Primitive::hadamard, std::move(out), {ia, ib}, [ia, ib](Graph& gr, std::size_t self) {
    const Matrix& go = gr.node(self).grad;
    const Matrix& x = gr.node(ia).value;
    const Matrix& y = gr.node(ib).value;
    if (gr.node(ia).requires_grad) {
      Matrix& ga = gr.grad_of(ia);
      for (std::size_t i = 0; i < go.data.size(); ++i) ga.data[i] += go.data[i] * y.data[i];
    }
    if (gr.node(ib).requires_grad) {
      Matrix& gb = gr.grad_of(ib);
      for (std::size_t i = 0; i < go.data.size(); ++i) gb.data[i] += go.data[i] * x.data[i];
    }
  });
}

Tensor row_softmax(Tensor a) {
  Graph& g = graph_of({a}, "row-softmax");
  Matrix out = a.value();
  for (std::size_t r = 0; r < out.rows; ++r) {
    double* row = &out.data[r * out.cols];
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < out.cols; ++c) {
      if (std::isnan(row[c])) throw DomainError("row-softmax: NaN input in row " + std::to_string(r));
      mx = std::max(mx, row[c]);
    }
    if (!std::isfinite(mx)) throw DomainError("row-softmax: row " + std::to_string(r) + " has no finite entry");
    double total = 0.0;
    for (std::size_t c = 0; c < out.cols; ++c) {
      row[c] = std::exp(row[c] - mx);
      total += row[c];
    }
    for (std::size_t c = 0; c < out.cols; ++c) row[c] /= total;
  }
  const std::size_t ia = a.node_id();
  return g.push(Primitive::row_softmax, std::move(out), {ia}, [ia](Graph& gr, std::size_t self) {
    const Graph::Node& n = gr.node(self);
    Matrix& ga = gr.grad_of(ia);
    for (std::size_t r = 0; r < n.value.rows; ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < n.value.cols; ++c) dot += n.grad(r, c) * n.value(r, c);
      for (std::size_t c = 0; c < n.value.cols; ++c) ga(r, c) += n.value(r, c) * (n.grad(r, c) - dot);
    }
  });
}

Tensor sigmoid(Tensor a) {
  return unary(a, Primitive::sigmoid, stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

Tensor tanh(Tensor a) {
  return unary(a, Primitive::tanh, [](double x) { return std::tanh(x); },
               [](double, double y) { return 1.0 - y * y; });
}

Tensor gelu(Tensor a) {
  return unary(a, Primitive::gelu, gelu_value, [](double x, double) { return gelu_derivative(x); });
}

Tensor relu(Tensor a) {
  return unary(a, Primitive::relu, [](double x) { return x > 0.0 ? x : 0.0; },
               [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor log(Tensor a) {
  for (double v : a.value().data) {
    if (!(v > 0.0)) {
      std::ostringstream msg;
      msg << "log: non-positive input " << v;
      throw DomainError(msg.str());
    }
  }
  return unary(a, Primitive::log, [](double x) { return std::log(x); },
               [](double x, double) { return 1.0 / x; });
}

Tensor exp(Tensor a) {
  return unary(a, Primitive::exp, [](double x) { return std::exp(x); },
               [](double, double y) { return y; });
}

Tensor sum(Tensor a) {
  Graph& g = graph_of({a}, "sum");
  double total = 0.0;
  for (double v : a.value().data) total += v;
  const std::size_t ia = a.node_id();
  return g.push(Primitive::sum, Matrix(1, 1, total), {ia}, [ia](Graph& gr, std::size_t self) {
    const double go = gr.node(self).grad.data[0];
    for (double& v : gr.grad_of(ia).data) v += go;
  });
}

Tensor mean(Tensor a) {
  const std::size_t n = a.value().size();
  if (n == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(n));
}

namespace {

Tensor reduce_rows(Tensor a, bool take_max) {
  const Primitive kind = take_max ? Primitive::max_over_rows : Primitive::min_over_rows;
  Graph& g = graph_of({a}, primitive_name(kind));
  const Matrix& av = a.value();
  if (av.rows == 0) throw ShapeError(std::string(primitive_name(kind)) + ": no rows");
  Matrix out(1, av.cols);
  std::vector<std::size_t> arg(av.cols, 0);
  for (std::size_t c = 0; c < av.cols; ++c) {
    double best = av(0, c);
    for (std::size_t r = 1; r < av.rows; ++r) {
      const double v = av(r, c);
      if (take_max ? v > best : v < best) {
        best = v;
        arg[c] = r;
      }
    }
    out.data[c] = best;
  }
  const std::size_t ia = a.node_id();
  return g.push(kind, std::move(out), {ia}, [ia, arg](Graph& gr, std::size_t self) {
    const Matrix& go = gr.node(self).grad;
    Matrix& ga = gr.grad_of(ia);
    for (std::size_t c = 0; c < arg.size(); ++c) ga(arg[c], c) += go.data[c];
  });
}

}  // namespace

Tensor max_over_rows(Tensor a) { return reduce_rows(a, true); }
Tensor min_over_rows(Tensor a) { return reduce_rows(a, false); }

Tensor gather_rows(Tensor a, std::vector<std::size_t> indices) {
  Graph& g = graph_of({a}, "gather-rows");
  const Matrix& av = a.value();
  Matrix out(indices.size(), av.cols);
  for (std::size_t r = 0; r < indices.size(); ++r) {
    if (indices[r] >= av.rows) {
      throw ShapeError("gather-rows: index " + std::to_string(indices[r]) + " out of range for " +
                       std::to_string(av.rows) + " rows");
    }
    std::copy_n(&av.data[indices[r] * av.cols], av.cols, &out.data[r * av.cols]);
  }
  const std::size_t ia = a.node_id();
  return g.push(Primitive::gather_rows, std::move(out), {ia},
                [ia, idx = std::move(indices)](Graph& gr, std::size_t self) {
                  const Matrix& go = gr.node(self).grad;
                  Matrix& ga = gr.grad_of(ia);
                  for (std::size_t r = 0; r < idx.size(); ++r)
                    for (std::size_t c = 0; c < go.cols; ++c) ga(idx[r], c) += go(r, c);
                });
}

Tensor gather_elements(Tensor a, std::size_t rows, std::size_t cols, std::vector<std::size_t> index) {
  Graph& g = graph_of({a}, "gather-elements");
  if (index.size() != rows * cols) throw ShapeError("gather-elements: index size does not match shape");
  const Matrix& av = a.value();
  Matrix out(rows, cols);
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= av.size()) throw ShapeError("gather-elements: index out of range");
    out.data[i] = av.data[index[i]];
  }
  const std::size_t ia = a.node_id();
  return g.push(Primitive::gather_elements, std::move(out), {ia},
                [ia, idx = std::move(index)](Graph& gr, std::size_t self) {
                  const Matrix& go = gr.node(self).grad;
                  Matrix& ga = gr.grad_of(ia);
                  for (std::size_t i = 0; i < idx.size(); ++i) ga.data[idx[i]] += go.data[i];
                });
}

Tensor masked_fill(Tensor a, std::vector<std::uint8_t> mask, double fill) {
  Graph& g = graph_of({a}, "masked-fill");
  const Matrix& av = a.value();
  if (mask.size() != av.size()) {
    throw ShapeError("masked-fill: mask has " + std::to_string(mask.size()) + " entries for " + dims(av));
  }
  Matrix out = av;
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) out.data[i] = fill;
  const std::size_t ia = a.node_id();
  return g.push(Primitive::masked_fill, std::move(out), {ia},
                [ia, m = std::move(mask)](Graph& gr, std::size_t self) {
                  const Matrix& go = gr.node(self).grad;
                  Matrix& ga = gr.grad_of(ia);
                  for (std::size_t i = 0; i < m.size(); ++i)
                    if (!m[i]) ga.data[i] += go.data[i];
                });
}

Tensor clamp(Tensor a, double lo, double hi) {
  return unary(a, Primitive::clamp, [lo, hi](double x) { return std::clamp(x, lo, hi); },
               [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

Tensor layer_norm(Tensor a, Tensor gain, Tensor bias, double eps) {
  Graph& g = graph_of({a, gain, bias}, "layer-norm");
  const Matrix& av = a.value();
  const std::size_t n = av.cols;
  if (gain.rows() != 1 || gain.cols() != n) shape_error("layer-norm", av, gain.value());
  if (bias.rows() != 1 || bias.cols() != n) shape_error("layer-norm", av, bias.value());
  Matrix normed(av.rows, n);
  std::vector<double> inv_std(av.rows);
  Matrix out(av.rows, n);
  const Matrix& gv = gain.value();
  const Matrix& bv = bias.value();
  for (std::size_t r = 0; r < av.rows; ++r) {
    double mu = 0.0;
    for (std::size_t c = 0; c < n; ++c) mu += av(r, c);
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t c = 0; c < n; ++c) var += (av(r, c) - mu) * (av(r, c) - mu);
    var /= static_cast<double>(n);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < n; ++c) {
      normed(r, c) = (av(r, c) - mu) * inv_std[r];
      out(r, c) = normed(r, c) * gv.data[c] + bv.data[c];
    }
  }
  const std::size_t ia = a.node_id(), ig = gain.node_id(), ib = bias.node_id();
  return g.push(Primitive::layer_norm, std::move(out), {ia, ig, ib},
                [=, xhat = std::move(normed), inv = std::move(inv_std)](Graph& gr, std::size_t self) {
                  const Matrix& go = gr.node(self).grad;
                  const Matrix& gain_v = gr.node(ig).value;
                  const bool ra = gr.node(ia).requires_grad;
                  const bool rg = gr.node(ig).requires_grad;
                  const bool rb = gr.node(ib).requires_grad;
                  for (std::size_t r = 0; r < go.rows; ++r) {
                    double mean_dy = 0.0, mean_dy_x = 0.0;
                    for (std::size_t c = 0; c < n; ++c) {
                      const double dy = go(r, c) * gain_v.data[c];
                      mean_dy += dy;
                      mean_dy_x += dy * xhat(r, c);
                      if (rg) gr.grad_of(ig).data[c] += go(r, c) * xhat(r, c);
                      if (rb) gr.grad_of(ib).data[c] += go(r, c);
                    }
                    mean_dy /= static_cast<double>(n);
                    mean_dy_x /= static_cast<double>(n);
                    if (!ra) continue;
                    Matrix& ga = gr.grad_of(ia);
                    for (std::size_t c = 0; c < n; ++c) {
                      const double dy = go(r, c) * gain_v.data[c];
                      ga(r, c) += inv[r] * (dy - mean_dy - xhat(r, c) * mean_dy_x);
                    }
                  }
                });
}

Tensor stop_gradient(Tensor a) {
  Graph& g = graph_of({a}, "stop-gradient");
  return g.push(Primitive::stop_gradient, g.next_stop_gradient_value(a.value()), {a.node_id()}, {});
}

Tensor apply_primitive(Primitive kind, std::span<const Tensor> inputs, const PrimitiveArgs& args) {
  auto need = [&](std::size_t n) {
    if (inputs.size() != n) {
      throw ShapeError(std::string(primitive_name(kind)) + ": expected " + std::to_string(n) +
                       " inputs, got " + std::to_string(inputs.size()));
    }
  };
  switch (kind) {
    case Primitive::leaf: throw std::invalid_argument("apply_primitive: leaf is not an operation");
    case Primitive::matmul: need(2); return matmul(inputs[0], inputs[1]);
    case Primitive::transpose: need(1); return transpose(inputs[0]);
    case Primitive::add: need(2); return add(inputs[0], inputs[1]);
    case Primitive::scale: need(1); return scale(inputs[0], args.scalar);
    case Primitive::offset: need(1); return offset(inputs[0], args.scalar);
    case Primitive::concat_cols: need(2); return concat_cols(inputs[0], inputs[1]);
    case Primitive::concat_rows: return concat_rows(inputs);
    case Primitive::hadamard: need(2); return hadamard(inputs[0], inputs[1]);
    case Primitive::row_softmax: need(1); return row_softmax(inputs[0]);
    case Primitive::sigmoid: need(1); return sigmoid(inputs[0]);
    case Primitive::tanh: need(1); return tanh(inputs[0]);
    case Primitive::gelu: need(1); return gelu(inputs[0]);
    case Primitive::relu: need(1); return relu(inputs[0]);
    case Primitive::log: need(1); return log(inputs[0]);
    case Primitive::exp: need(1); return exp(inputs[0]);
    case Primitive::sum: need(1); return sum(inputs[0]);
    case Primitive::mean: need(1); return mean(inputs[0]);
    case Primitive::max_over_rows: need(1); return max_over_rows(inputs[0]);
    case Primitive::min_over_rows: need(1); return min_over_rows(inputs[0]);
    case Primitive::gather_rows: need(1); return gather_rows(inputs[0], args.indices);
    case Primitive::gather_elements:
      need(1);
      return gather_elements(inputs[0], args.rows, args.cols, args.indices);
    case Primitive::masked_fill: need(1); return masked_fill(inputs[0], args.mask, args.scalar);
    case Primitive::clamp: need(1); return clamp(inputs[0], args.scalar, args.scalar2);
    case Primitive::layer_norm: need(3); return layer_norm(inputs[0], inputs[1], inputs[2]);
    case Primitive::stop_gradient: need(1); return stop_gradient(inputs[0]);
  }
  throw std::invalid_argument("apply_primitive: unknown kind");
}

// ---------------------------------------------------------------------------
// Gradient check

double grad_check(const std::function<Tensor(Graph&)>& forward, ParameterStore& store,
                  std::span<const ParamId> ids, double h, bool freeze_stop_gradients) {
  if (!(h > 0.0)) throw std::invalid_argument("grad_check: h must be positive");
  GradientMap analytic;
  double base = 0.0;
  std::vector<Matrix> stopped;
  {
    Graph g;
    Tensor loss = forward(g);
    base = loss.item();
    analytic = g.backward(loss);
    if (freeze_stop_gradients) stopped = g.stop_gradient_values();
  }
  auto evaluate = [&] {
    Graph g;
    if (freeze_stop_gradients) g.replay_stop_gradients(stopped);
    return forward(g).item();
  };
  if (evaluate() != base) {
    throw std::runtime_error(
        "grad_check: forward is non-deterministic; fix every RNG seed used inside the forward closure");
  }

  double worst = 0.0;
  for (ParamId id : ids) {
    Matrix& value = store[id].value;
    const auto it = analytic.find(id);
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double saved = value.data[i];
      value.data[i] = saved + h;
      const double up = evaluate();
      value.data[i] = saved - h;
      const double down = evaluate();
      value.data[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double exact = it == analytic.end() ? 0.0 : it->second.data[i];
      const double diff = std::abs(exact - numeric);
      const double scale_ref = std::max(std::abs(exact), std::abs(numeric));
      const double err = scale_ref < 1e-8 ? diff : diff / scale_ref;
      worst = std::max(worst, err);
    }
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Adam

void adam_step(ParameterStore& store, const GradientMap& grads, AdamState& state) {
  for (ParamId id = 0; id < store.size(); ++id) {
    if (store[id].trainable && !grads.contains(id)) {
      throw std::invalid_argument("adam_step: no gradient for trainable parameter '" + store[id].name +
                                  "' (detached subgraph?)");
    }
  }
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (const auto& [id, g] : grads) {
    Parameter& p = store[id];
    if (!p.trainable) continue;
    if (g.rows != p.value.rows || g.cols != p.value.cols) {
      throw ShapeError("adam_step: gradient shape mismatch for '" + p.name + "'");
    }
    Matrix& m = state.first_moment.try_emplace(id, g.rows, g.cols, 0.0).first->second;
    Matrix& v = state.second_moment.try_emplace(id, g.rows, g.cols, 0.0).first->second;
    for (std::size_t i = 0; i < g.size(); ++i) {
      m.data[i] = state.beta1 * m.data[i] + (1.0 - state.beta1) * g.data[i];
      v.data[i] = state.beta2 * v.data[i] + (1.0 - state.beta2) * g.data[i] * g.data[i];
      const double mhat = m.data[i] / c1;
      const double vhat = v.data[i] / c2;
      p.value.data[i] -= state.learning_rate * mhat / (std::sqrt(vhat) + state.epsilon);
    }
  }
}

}  // namespace psad::ad
