#include "simplerob/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <sstream>

namespace simplerob::ad {

namespace detail {

struct TapeState {
  std::vector<std::function<void()>> record;
  std::vector<std::weak_ptr<Node>> leaves;
  bool consumed = false;
};

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::weak_ptr<TapeState> tape;
};

}  // namespace detail

using detail::Node;
using detail::TapeState;
using NodePtr = std::shared_ptr<Node>;

struct OpAccess {
  static const NodePtr& node(const Tensor& t) { return t.node_; }
  static Tensor wrap(NodePtr n) { return Tensor(std::move(n)); }
};

std::string shape_str(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << "x";
    out << shape[i];
  }
  out << ']';
  return out.str();
}

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

namespace {

void check_shape(const Shape& shape) {
  if (shape.empty()) throw ShapeError("tensor shape must have rank >= 1");
  for (auto d : shape) {
    if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
  }
}

const Node& node_of(const Tensor& t, const char* op) {
  const auto& n = OpAccess::node(t);
  if (!n) throw ShapeError(std::string(op) + ": undefined tensor operand");
  return *n;
}

std::vector<double>& grad_buffer(Node& n) {
  if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
  return n.grad;
}

std::shared_ptr<TapeState> shared_tape(std::initializer_list<const Tensor*> inputs,
                                       const char* op) {
  std::shared_ptr<TapeState> tape;
  for (const Tensor* t : inputs) {
    const auto& n = OpAccess::node(*t);
    if (!n || !n->requires_grad) continue;
    auto other = n->tape.lock();
    if (!other) throw GradError(std::string(op) + ": operand belongs to a destroyed tape");
    if (other->consumed) throw GradError(std::string(op) + ": operand belongs to a consumed tape");
    if (tape && tape != other) throw GradError(std::string(op) + ": operands recorded on different tapes");
    tape = std::move(other);
  }
  return tape;
}

// Creates the output node and, when any input requires gradients, records
// `backward(grad_out)` on the shared tape.
template <class Backward>
Tensor emit(const char* op, Shape shape, std::vector<double> value,
            std::initializer_list<const Tensor*> inputs, Backward&& backward) {
  for (double v : value) {
    if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite forward value");
  }
  auto out = std::make_shared<Node>();
  out->shape = std::move(shape);
  out->value = std::move(value);
  if (auto tape = shared_tape(inputs, op)) {
    out->requires_grad = true;
    out->tape = tape;
    tape->record.emplace_back([out, bw = std::forward<Backward>(backward)]() {
      if (out->grad.empty()) return;
      bw(out->grad);
    });
  }
  return OpAccess::wrap(std::move(out));
}

// Gradient sink for an input: null when the input needs no gradient.
Node* sink(const Tensor& t) {
  const auto& n = OpAccess::node(t);
  return n && n->requires_grad ? n.get() : nullptr;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw ShapeError(std::string(op) + ": expected a rank-2 tensor, got " + shape_str(t.shape()));
  }
}

void require_labels(const Tensor& logits, std::span<const std::size_t> labels, const char* op) {
  require_rank2(logits, op);
  if (labels.size() != logits.dim(0)) {
    throw ShapeError(std::string(op) + ": " + std::to_string(labels.size()) +
                     " labels for logits " + shape_str(logits.shape()));
  }
  const std::size_t k = logits.dim(1);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= k) {
      throw IndexError(std::string(op) + ": label " + std::to_string(labels[i]) + " at row " +
                       std::to_string(i) + " outside [0, " + std::to_string(k) + ")");
    }
  }
}

double log_sum_exp(const double* row, std::size_t k, std::size_t skip = std::numeric_limits<std::size_t>::max()) {
  double m = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < k; ++j) {
    if (j != skip) m = std::max(m, row[j]);
  }
  double s = 0.0;
  for (std::size_t j = 0; j < k; ++j) {
    if (j != skip) s += std::exp(row[j] - m);
  }
  return m + std::log(s);
}

void softmax_row(const double* row, std::size_t k, double* out) {
  const double m = *std::max_element(row, row + k);
  double s = 0.0;
  for (std::size_t j = 0; j < k; ++j) {
    out[j] = std::exp(row[j] - m);
    s += out[j];
  }
  for (std::size_t j = 0; j < k; ++j) out[j] /= s;
}

// Largest entry other than `label`, lowest index on ties.
std::size_t runner_up(const double* row, std::size_t k, std::size_t label) {
  std::size_t best = label == 0 ? 1 : 0;
  for (std::size_t j = 0; j < k; ++j) {
    if (j != label && row[j] > row[best]) best = j;
  }
  return best;
}

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

Tensor column_view(const Tensor& t, const char* op) {
  if (t.rank() == 1) return t;
  if (t.rank() == 2 && t.dim(1) == 1) return t;
  throw ShapeError(std::string(op) + ": expected [b] or [bx1], got " + shape_str(t.shape()));
}

}  // namespace

// ---- Tensor ----------------------------------------------------------------

Tensor::Tensor(Shape shape, std::vector<double> data) {
  check_shape(shape);
  if (numel(shape) != data.size()) {
    throw ShapeError("tensor data length " + std::to_string(data.size()) +
                     " does not match shape " + shape_str(shape));
  }
  node_ = std::make_shared<Node>();
  node_->shape = std::move(shape);
  node_->value = std::move(data);
}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, double value) {
  check_shape(shape);
  const std::size_t n = numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value) { return Tensor({1}, {value}); }

const Shape& Tensor::shape() const { return node_of(*this, "shape").shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  return s[axis];
}

std::size_t Tensor::size() const { return node_of(*this, "size").value.size(); }

std::span<const double> Tensor::data() const { return node_of(*this, "data").value; }

double Tensor::item() const {
  const auto& n = node_of(*this, "item");
  if (n.value.size() != 1) throw ShapeError("item() on non-scalar " + shape_str(n.shape));
  return n.value[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  if (!has_grad()) throw GradError("tensor has no populated gradient");
  return node_->grad;
}

Tensor Tensor::detach() const {
  const auto& n = node_of(*this, "detach");
  return Tensor(n.shape, n.value);
}

std::span<double> Tensor::mutable_data() {
  auto& n = const_cast<Node&>(node_of(*this, "mutable_data"));
  if (n.requires_grad) throw GradError("cannot mutate a tensor recorded on a tape");
  return n.value;
}

// ---- Tape ------------------------------------------------------------------

Tape::Tape() : state_(std::make_shared<TapeState>()) {}

Tensor Tape::variable(const Tensor& value) {
  if (state_->consumed) throw GradError("variable() on a consumed tape; call reset() first");
  const auto& src = node_of(value, "variable");
  auto n = std::make_shared<Node>();
  n->shape = src.shape;
  n->value = src.value;
  n->requires_grad = true;
  n->tape = state_;
  state_->leaves.push_back(n);
  return OpAccess::wrap(std::move(n));
}

namespace {

void run_backward(TapeState& state, Node& loss) {
  if (loss.value.size() != 1) throw GradError("backward() needs a scalar loss, got " + shape_str(loss.shape));
  if (state.consumed) throw GradError("backward() called twice on the same tape without reset()");
  loss.grad.assign(1, 1.0);
  for (auto it = state.record.rbegin(); it != state.record.rend(); ++it) (*it)();
  state.record.clear();
  state.consumed = true;
}

}  // namespace

void Tape::backward(const Tensor& loss) {
  const auto& n = OpAccess::node(loss);
  if (!n || !n->requires_grad) throw GradError("backward() on a detached tensor");
  if (n->tape.lock() != state_) throw GradError("backward(): loss was recorded on a different tape");
  run_backward(*state_, *n);
}

void Tape::reset() {
  state_->record.clear();
  for (auto& weak : state_->leaves) {
    if (auto leaf = weak.lock()) leaf->grad.clear();
  }
  state_->consumed = false;
}

std::size_t Tape::recorded() const { return state_->record.size(); }

bool Tape::consumed() const { return state_->consumed; }

void backward(const Tensor& loss) {
  const auto& n = OpAccess::node(loss);
  if (!n || !n->requires_grad) throw GradError("backward() on a detached tensor");
  auto state = n->tape.lock();
  if (!state) throw GradError("backward(): the loss's tape no longer exists");
  run_backward(*state, *n);
}

// ---- operations --------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: inner dimensions disagree, " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  const auto av = a.data();
  const auto bv = b.data();
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      const double* brow = bv.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
    }
  }
  return emit("matmul", {m, n}, std::move(out), {&a, &b},
              [a, b, m, k, n](const std::vector<double>& g) {
                const auto av = a.data();
                const auto bv = b.data();
                if (Node* sa = sink(a)) {
                  auto& ga = grad_buffer(*sa);
                  for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t p = 0; p < k; ++p) {
                      double s = 0.0;
                      for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * bv[p * n + j];
                      ga[i * k + p] += s;
                    }
                }
                if (Node* sb = sink(b)) {
                  auto& gb = grad_buffer(*sb);
                  for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t p = 0; p < k; ++p) {
                      const double aip = av[i * k + p];
                      for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += aip * g[i * n + j];
                    }
                }
              });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  const auto av = a.data(), bv = b.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return emit("add", a.shape(), std::move(out), {&a, &b}, [a, b](const std::vector<double>& g) {
    if (Node* s = sink(a)) {
      auto& ga = grad_buffer(*s);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (Node* s = sink(b)) {
      auto& gb = grad_buffer(*s);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  const auto av = a.data(), bv = b.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return emit("sub", a.shape(), std::move(out), {&a, &b}, [a, b](const std::vector<double>& g) {
    if (Node* s = sink(a)) {
      auto& ga = grad_buffer(*s);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (Node* s = sink(b)) {
      auto& gb = grad_buffer(*s);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  const auto av = a.data(), bv = b.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return emit("mul", a.shape(), std::move(out), {&a, &b}, [a, b](const std::vector<double>& g) {
    const auto av = a.data(), bv = b.data();
    if (Node* s = sink(a)) {
      auto& ga = grad_buffer(*s);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (Node* s = sink(b)) {
      auto& gb = grad_buffer(*s);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

Tensor scale(const Tensor& a, double factor) {
  const auto av = a.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * factor;
  return emit("scale", a.shape(), std::move(out), {&a}, [a, factor](const std::vector<double>& g) {
    if (Node* s = sink(a)) {
      auto& ga = grad_buffer(*s);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factor;
    }
  });
}

Tensor add_scalar(const Tensor& a, double offset) {
  const auto av = a.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + offset;
  return emit("add_scalar", a.shape(), std::move(out), {&a}, [a](const std::vector<double>& g) {
    if (Node* s = sink(a)) {
      auto& ga = grad_buffer(*s);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
  });
}

Tensor relu(const Tensor& a) {
  const auto av = a.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] > 0.0 ? av[i] : 0.0;
  return emit("relu", a.shape(), std::move(out), {&a}, [a](const std::vector<double>& g) {
    if (Node* s = sink(a)) {
      const auto av = a.data();
      auto& ga = grad_buffer(*s);
      for (std::size_t i = 0; i < g.size(); ++i)
        if (av[i] > 0.0) ga[i] += g[i];
    }
  });
}

Tensor sigmoid(const Tensor& a) {
  const auto av = a.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = stable_sigmoid(av[i]);
  auto saved = out;
  return emit("sigmoid", a.shape(), std::move(out), {&a},
              [a, y = std::move(saved)](const std::vector<double>& g) {
                if (Node* s = sink(a)) {
                  auto& ga = grad_buffer(*s);
                  for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i] * (1.0 - y[i]);
                }
              });
}

Tensor tanh(const Tensor& a) {
  const auto av = a.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(av[i]);
  auto saved = out;
  return emit("tanh", a.shape(), std::move(out), {&a},
              [a, y = std::move(saved)](const std::vector<double>& g) {
                if (Node* s = sink(a)) {
                  auto& ga = grad_buffer(*s);
                  for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (1.0 - y[i] * y[i]);
                }
              });
}

Tensor clamp_min(const Tensor& a, double floor) {
  const auto av = a.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(av[i], floor);
  return emit("clamp_min", a.shape(), std::move(out), {&a}, [a, floor](const std::vector<double>& g) {
    if (Node* s = sink(a)) {
      const auto av = a.data();
      auto& ga = grad_buffer(*s);
      for (std::size_t i = 0; i < g.size(); ++i)
        if (av[i] > floor) ga[i] += g[i];
    }
  });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return emit("sum", {1}, {s}, {&a}, [a](const std::vector<double>& g) {
    if (Node* s = sink(a)) {
      auto& ga = grad_buffer(*s);
      for (double& v : ga) v += g[0];
    }
  });
}

Tensor mean(const Tensor& a) {
  const double n = static_cast<double>(a.size());
  double s = 0.0;
  for (double v : a.data()) s += v;
  return emit("mean", {1}, {s / n}, {&a}, [a, n](const std::vector<double>& g) {
    if (Node* s = sink(a)) {
      auto& ga = grad_buffer(*s);
      for (double& v : ga) v += g[0] / n;
    }
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  check_shape(shape);
  if (numel(shape) != a.size()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  const auto av = a.data();
  return emit("reshape", std::move(shape), std::vector<double>(av.begin(), av.end()), {&a},
              [a](const std::vector<double>& g) {
                if (Node* s = sink(a)) {
                  auto& ga = grad_buffer(*s);
                  for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                }
              });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  require_rank2(x, "add_bias");
  const std::size_t b = x.dim(0), n = x.dim(1);
  if (bias.rank() != 1 || bias.dim(0) != n) {
    throw ShapeError("add_bias: bias " + shape_str(bias.shape()) + " does not fit " + shape_str(x.shape()));
  }
  const auto xv = x.data(), bv = bias.data();
  std::vector<double> out(xv.size());
  for (std::size_t r = 0; r < b; ++r)
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = xv[r * n + j] + bv[j];
  return emit("add_bias", x.shape(), std::move(out), {&x, &bias},
              [x, bias, b, n](const std::vector<double>& g) {
                if (Node* s = sink(x)) {
                  auto& gx = grad_buffer(*s);
                  for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                }
                if (Node* s = sink(bias)) {
                  auto& gb = grad_buffer(*s);
                  for (std::size_t r = 0; r < b; ++r)
                    for (std::size_t j = 0; j < n; ++j) gb[j] += g[r * n + j];
                }
              });
}

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t padding) {
  if (x.rank() != 4 || weight.rank() != 4 || bias.rank() != 1) {
    throw ShapeError("conv2d: expected x rank 4, weight rank 4, bias rank 1; got " + shape_str(x.shape()) +
                     ", " + shape_str(weight.shape()) + ", " + shape_str(bias.shape()));
  }
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t O = weight.dim(0), K = weight.dim(2);
  if (weight.dim(1) != C || weight.dim(3) != K || bias.dim(0) != O) {
    throw ShapeError("conv2d: weight " + shape_str(weight.shape()) + " / bias " + shape_str(bias.shape()) +
                     " do not fit input " + shape_str(x.shape()));
  }
  if (H + 2 * padding < K || W + 2 * padding < K) {
    throw ShapeError("conv2d: kernel larger than padded input " + shape_str(x.shape()));
  }
  const std::size_t OH = H + 2 * padding - K + 1, OW = W + 2 * padding - K + 1;
  const auto xv = x.data(), wv = weight.data(), bv = bias.data();
  const auto pad = static_cast<std::ptrdiff_t>(padding);
  std::vector<double> out(N * O * OH * OW);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t i = 0; i < OH; ++i)
        for (std::size_t j = 0; j < OW; ++j) {
          double s = bv[o];
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t ki = 0; ki < K; ++ki) {
              const auto r = static_cast<std::ptrdiff_t>(i + ki) - pad;
              if (r < 0 || r >= static_cast<std::ptrdiff_t>(H)) continue;
              for (std::size_t kj = 0; kj < K; ++kj) {
                const auto q = static_cast<std::ptrdiff_t>(j + kj) - pad;
                if (q < 0 || q >= static_cast<std::ptrdiff_t>(W)) continue;
                s += xv[((n * C + c) * H + r) * W + q] * wv[((o * C + c) * K + ki) * K + kj];
              }
            }
          out[((n * O + o) * OH + i) * OW + j] = s;
        }
  return emit("conv2d", {N, O, OH, OW}, std::move(out), {&x, &weight, &bias},
              [=](const std::vector<double>& g) {
                const auto xv = x.data(), wv = weight.data();
                Node* sx = sink(x);
                Node* sw = sink(weight);
                Node* sb = sink(bias);
                std::vector<double>* gx = sx ? &grad_buffer(*sx) : nullptr;
                std::vector<double>* gw = sw ? &grad_buffer(*sw) : nullptr;
                std::vector<double>* gb = sb ? &grad_buffer(*sb) : nullptr;
                for (std::size_t n = 0; n < N; ++n)
                  for (std::size_t o = 0; o < O; ++o)
                    for (std::size_t i = 0; i < OH; ++i)
                      for (std::size_t j = 0; j < OW; ++j) {
                        const double go = g[((n * O + o) * OH + i) * OW + j];
                        if (gb) (*gb)[o] += go;
                        if (!gx && !gw) continue;
                        for (std::size_t c = 0; c < C; ++c)
                          for (std::size_t ki = 0; ki < K; ++ki) {
                            const auto r = static_cast<std::ptrdiff_t>(i + ki) - pad;
                            if (r < 0 || r >= static_cast<std::ptrdiff_t>(H)) continue;
                            for (std::size_t kj = 0; kj < K; ++kj) {
                              const auto q = static_cast<std::ptrdiff_t>(j + kj) - pad;
                              if (q < 0 || q >= static_cast<std::ptrdiff_t>(W)) continue;
                              const std::size_t xi = ((n * C + c) * H + r) * W + q;
                              const std::size_t wi = ((o * C + c) * K + ki) * K + kj;
                              if (gx) (*gx)[xi] += go * wv[wi];
                              if (gw) (*gw)[wi] += go * xv[xi];
                            }
                          }
                      }
              });
}

Tensor softmax(const Tensor& logits) {
  require_rank2(logits, "softmax");
  const std::size_t b = logits.dim(0), k = logits.dim(1);
  const auto zv = logits.data();
  std::vector<double> out(zv.size());
  for (std::size_t r = 0; r < b; ++r) softmax_row(zv.data() + r * k, k, out.data() + r * k);
  auto saved = out;
  return emit("softmax", logits.shape(), std::move(out), {&logits},
              [logits, b, k, s = std::move(saved)](const std::vector<double>& g) {
                Node* sz = sink(logits);
                if (!sz) return;
                auto& gz = grad_buffer(*sz);
                for (std::size_t r = 0; r < b; ++r) {
                  double dot = 0.0;
                  for (std::size_t j = 0; j < k; ++j) dot += g[r * k + j] * s[r * k + j];
                  for (std::size_t j = 0; j < k; ++j) gz[r * k + j] += s[r * k + j] * (g[r * k + j] - dot);
                }
              });
}

Tensor cross_entropy_rows(const Tensor& logits, std::span<const std::size_t> labels) {
  require_labels(logits, labels, "cross_entropy");
  const std::size_t b = logits.dim(0), k = logits.dim(1);
  const auto zv = logits.data();
  std::vector<double> out(b);
  std::vector<double> probs(b * k);
  for (std::size_t r = 0; r < b; ++r) {
    const double* row = zv.data() + r * k;
    out[r] = log_sum_exp(row, k) - row[labels[r]];
    softmax_row(row, k, probs.data() + r * k);
  }
  std::vector<std::size_t> y(labels.begin(), labels.end());
  return emit("cross_entropy", {b}, std::move(out), {&logits},
              [logits, b, k, p = std::move(probs), y = std::move(y)](const std::vector<double>& g) {
                Node* sz = sink(logits);
                if (!sz) return;
                auto& gz = grad_buffer(*sz);
                for (std::size_t r = 0; r < b; ++r) {
                  for (std::size_t j = 0; j < k; ++j) gz[r * k + j] += g[r] * p[r * k + j];
                  gz[r * k + y[r]] -= g[r];
                }
              });
}

Tensor softmax_cross_entropy(const Tensor& logits, std::span<const std::size_t> labels) {
  return mean(cross_entropy_rows(logits, labels));
}

Tensor kl_rows(const Tensor& p_logits, const Tensor& q_logits) {
  require_rank2(p_logits, "kl_divergence");
  require_same_shape(p_logits, q_logits, "kl_divergence");
  const std::size_t b = p_logits.dim(0), k = p_logits.dim(1);
  const auto pv = p_logits.data(), qv = q_logits.data();
  std::vector<double> out(b);
  std::vector<double> sp(b * k), sq(b * k), diff(b * k);
  for (std::size_t r = 0; r < b; ++r) {
    const double* pr = pv.data() + r * k;
    const double* qr = qv.data() + r * k;
    const double lp = log_sum_exp(pr, k), lq = log_sum_exp(qr, k);
    softmax_row(pr, k, sp.data() + r * k);
    softmax_row(qr, k, sq.data() + r * k);
    double kl = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      const double d = (pr[j] - lp) - (qr[j] - lq);
      diff[r * k + j] = d;
      kl += sp[r * k + j] * d;
    }
    out[r] = kl;
  }
  auto values = out;
  return emit("kl_divergence", {b}, std::move(out), {&p_logits, &q_logits},
              [p_logits, q_logits, b, k, sp = std::move(sp), sq = std::move(sq), diff = std::move(diff),
               kl = std::move(values)](const std::vector<double>& g) {
                if (Node* s = sink(p_logits)) {
                  auto& gp = grad_buffer(*s);
                  for (std::size_t r = 0; r < b; ++r)
                    for (std::size_t j = 0; j < k; ++j)
                      gp[r * k + j] += g[r] * sp[r * k + j] * (diff[r * k + j] - kl[r]);
                }
                if (Node* s = sink(q_logits)) {
                  auto& gq = grad_buffer(*s);
                  for (std::size_t r = 0; r < b; ++r)
                    for (std::size_t j = 0; j < k; ++j)
                      gq[r * k + j] += g[r] * (sq[r * k + j] - sp[r * k + j]);
                }
              });
}

Tensor kl_divergence(const Tensor& p_logits, const Tensor& q_logits) {
  return mean(kl_rows(p_logits, q_logits));
}

Tensor margin_rows(const Tensor& logits, std::span<const std::size_t> labels) {
  require_labels(logits, labels, "margin");
  const std::size_t b = logits.dim(0), k = logits.dim(1);
  if (k < 2) throw ShapeError("margin: needs at least two classes, got " + shape_str(logits.shape()));
  const auto zv = logits.data();
  std::vector<double> out(b);
  std::vector<std::size_t> y(labels.begin(), labels.end()), other(b);
  for (std::size_t r = 0; r < b; ++r) {
    const double* row = zv.data() + r * k;
    other[r] = runner_up(row, k, y[r]);
    out[r] = row[y[r]] - row[other[r]];
  }
  return emit("margin", {b}, std::move(out), {&logits},
              [logits, b, k, y = std::move(y), other = std::move(other)](const std::vector<double>& g) {
                Node* sz = sink(logits);
                if (!sz) return;
                auto& gz = grad_buffer(*sz);
                for (std::size_t r = 0; r < b; ++r) {
                  gz[r * k + y[r]] += g[r];
                  gz[r * k + other[r]] -= g[r];
                }
              });
}

Tensor runner_up_nll_rows(const Tensor& logits, std::span<const std::size_t> labels) {
  require_labels(logits, labels, "runner_up_nll");
  const std::size_t b = logits.dim(0), k = logits.dim(1);
  if (k < 2) throw ShapeError("runner_up_nll: needs at least two classes, got " + shape_str(logits.shape()));
  const auto zv = logits.data();
  std::vector<double> out(b);
  std::vector<double> coeff(b * k);  // d out / d z = p − q̃
  for (std::size_t r = 0; r < b; ++r) {
    const double* row = zv.data() + r * k;
    const std::size_t ru = runner_up(row, k, labels[r]);
    const double lse_all = log_sum_exp(row, k);
    const double lse_rest = log_sum_exp(row, k, ru);
    out[r] = lse_all - lse_rest;
    for (std::size_t j = 0; j < k; ++j) {
      const double p = std::exp(row[j] - lse_all);
      const double q = j == ru ? 0.0 : std::exp(row[j] - lse_rest);
      coeff[r * k + j] = p - q;
    }
  }
  return emit("runner_up_nll", {b}, std::move(out), {&logits},
              [logits, b, k, c = std::move(coeff)](const std::vector<double>& g) {
                Node* sz = sink(logits);
                if (!sz) return;
                auto& gz = grad_buffer(*sz);
                for (std::size_t r = 0; r < b; ++r)
                  for (std::size_t j = 0; j < k; ++j) gz[r * k + j] += g[r] * c[r * k + j];
              });
}

Tensor pick(const Tensor& t, std::span<const std::size_t> columns) {
  require_labels(t, columns, "pick");
  const std::size_t b = t.dim(0), k = t.dim(1);
  const auto tv = t.data();
  std::vector<double> out(b);
  std::vector<std::size_t> cols(columns.begin(), columns.end());
  for (std::size_t r = 0; r < b; ++r) out[r] = tv[r * k + cols[r]];
  return emit("pick", {b}, std::move(out), {&t}, [t, k, cols = std::move(cols)](const std::vector<double>& g) {
    if (Node* s = sink(t)) {
      auto& gt = grad_buffer(*s);
      for (std::size_t r = 0; r < cols.size(); ++r) gt[r * k + cols[r]] += g[r];
    }
  });
}

Tensor lift_binary(const Tensor& logit) {
  const Tensor col = column_view(logit, "lift_binary");
  const std::size_t b = col.dim(0);
  const auto sv = col.data();
  std::vector<double> out(2 * b, 0.0);
  for (std::size_t r = 0; r < b; ++r) out[2 * r + 1] = sv[r];
  return emit("lift_binary", {b, 2}, std::move(out), {&col}, [col](const std::vector<double>& g) {
    if (Node* s = sink(col)) {
      auto& gs = grad_buffer(*s);
      for (std::size_t r = 0; r < gs.size(); ++r) gs[r] += g[2 * r + 1];
    }
  });
}

Tensor concat_columns(std::span<const Tensor> columns) {
  if (columns.empty()) throw ShapeError("concat_columns: no columns");
  const std::size_t k = columns.size();
  std::vector<Tensor> cols;
  cols.reserve(k);
  for (const auto& c : columns) cols.push_back(column_view(c, "concat_columns"));
  const std::size_t b = cols.front().dim(0);
  for (const auto& c : cols) {
    if (c.dim(0) != b) {
      throw ShapeError("concat_columns: row count mismatch " + shape_str(cols.front().shape()) + " vs " +
                       shape_str(c.shape()));
    }
  }
  std::vector<double> out(b * k);
  for (std::size_t j = 0; j < k; ++j) {
    const auto cv = cols[j].data();
    for (std::size_t r = 0; r < b; ++r) out[r * k + j] = cv[r];
  }
  // Variable operand count, so this records directly instead of through emit().
  std::shared_ptr<TapeState> tape;
  for (const auto& c : cols) {
    auto t = shared_tape({&c}, "concat_columns");
    if (t && tape && t != tape) throw GradError("concat_columns: operands recorded on different tapes");
    if (t) tape = t;
  }
  auto node = std::make_shared<Node>();
  node->shape = {b, k};
  node->value = std::move(out);
  if (tape) {
    node->requires_grad = true;
    node->tape = tape;
    tape->record.emplace_back([node, cols, b, k]() {
      if (node->grad.empty()) return;
      const auto& g = node->grad;
      for (std::size_t j = 0; j < k; ++j) {
        if (Node* s = sink(cols[j])) {
          auto& gc = grad_buffer(*s);
          for (std::size_t r = 0; r < b; ++r) gc[r] += g[r * k + j];
        }
      }
    });
  }
  return OpAccess::wrap(std::move(node));
}

}  // namespace simplerob::ad
