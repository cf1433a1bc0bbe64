#pragma once

// Reverse-mode automatic differentiation over dense row-major double tensors.
//
// A Tensor is a shared handle to a node. Constants carry no tape. Leaves made
// with Tape::variable() require gradients, and every operation with at least
// one such input is recorded on that tape. backward() replays the record in
// reverse, populates gradients and consumes the tape.
//
//   ad::Tape tape;
//   auto w = tape.variable(w0);
//   auto loss = ad::mean(ad::mul(w, w));
//   tape.backward(loss);          // w.grad() == w0 / n * 2
//
// Scalars are tensors of shape {1}.

#include <cstddef>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace simplerob::ad {

using Shape = std::vector<std::size_t>;

// Operand shapes do not fit the operation.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Class index outside [0, k).
class IndexError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

// Forward pass produced NaN or infinity.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Misuse of backward(): detached or non-scalar loss, consumed tape.
class GradError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

std::string shape_str(const Shape& shape);
std::size_t numel(const Shape& shape);

namespace detail {
struct Node;
struct TapeState;
}  // namespace detail

class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data);

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const;

  std::span<const double> data() const;
  double item() const;
  double at(std::size_t flat_index) const { return data()[flat_index]; }

  bool requires_grad() const;
  bool has_grad() const;
  // Throws GradError when no gradient has been populated.
  std::span<const double> grad() const;

  // Deep copy with no tape attachment.
  Tensor detach() const;

  // In-place mutation of a constant's buffer; rejected for tape tensors.
  std::span<double> mutable_data();

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;

  friend class Tape;
  friend struct OpAccess;
};

class Tape {
 public:
  Tape();

  // Leaf copy of `value` that requires gradients.
  Tensor variable(const Tensor& value);

  // Populates gradients of every requires_grad ancestor of `loss`, then clears
  // the record. A second call without reset() is an error.
  void backward(const Tensor& loss);

  // Drops all recorded operations and allows the tape to be reused.
  void reset();

  std::size_t recorded() const;
  bool consumed() const;

 private:
  std::shared_ptr<detail::TapeState> state_;
};

// Backward on the tape `loss` was recorded on.
void backward(const Tensor& loss);

// ---- operations ------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double offset);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor clamp_min(const Tensor& a, double floor);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

// x[b×n] + bias[n] added to every row.
Tensor add_bias(const Tensor& x, const Tensor& bias);

// Stride-1 direct convolution. x[N×C×H×W], weight[O×C×K×K], bias[O].
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias,
              std::size_t padding);

// Row-wise softmax of logits[b×k].
Tensor softmax(const Tensor& logits);

// Per-row −log softmax(logits)[label] → [b].
Tensor cross_entropy_rows(const Tensor& logits, std::span<const std::size_t> labels);

// Mean over the batch of cross_entropy_rows → scalar.
Tensor softmax_cross_entropy(const Tensor& logits, std::span<const std::size_t> labels);

// Per-row KL(softmax(p) ‖ softmax(q)) → [b].
Tensor kl_rows(const Tensor& p_logits, const Tensor& q_logits);

// Mean over the batch of kl_rows → scalar.
Tensor kl_divergence(const Tensor& p_logits, const Tensor& q_logits);

// Per-row Z_y − max_{i≠y} Z_i → [b]. Requires k ≥ 2.
Tensor margin_rows(const Tensor& logits, std::span<const std::size_t> labels);

// Per-row −log(1 − max_{i≠y} softmax(Z)_i) → [b], evaluated as a difference of
// log-sum-exps so it stays finite. Requires k ≥ 2.
Tensor runner_up_nll_rows(const Tensor& logits, std::span<const std::size_t> labels);

// Per-row entry t[r, column[r]] → [b].
Tensor pick(const Tensor& t, std::span<const std::size_t> columns);

// Single logit s (shape [b] or [b×1]) → two-class logits [b×2] = (0, s), so
// that softmax recovers (1 − sigmoid(s), sigmoid(s)).
Tensor lift_binary(const Tensor& logit);

// Horizontal stack of [b×1] (or [b]) columns → [b×k].
Tensor concat_columns(std::span<const Tensor> columns);

}  // namespace simplerob::ad
