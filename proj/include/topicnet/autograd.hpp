#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <initializer_list>
#include <string>
#include <vector>

#include "topicnet/tensor.hpp"

namespace topicnet {

class Tape;
class GradSink;

// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
  bool valid() const { return tape_ != nullptr; }
  Tape& tape() const;
  std::size_t id() const { return id_; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

using BackwardFn = std::function<void(const Tensor& grad_out, GradSink& sink)>;

// Per-backward-call gradient accumulators handed to each op's backward rule.
class GradSink {
 public:
  bool wants(const Var& v) const;
  // Zero-initialised accumulator for v, allocated on first use.
  Tensor& buffer(const Var& v);
  void add(const Var& v, const Tensor& g);

 private:
  friend class Tape;
  GradSink(Tape& tape, std::vector<Tensor>& slots) : tape_(tape), slots_(slots) {}
  Tape& tape_;
  std::vector<Tensor>& slots_;
};

// Records differentiable operations in execution order. Confined to one thread.
// Leaf gradients persist and accumulate across backward() calls until zero_grad();
// intermediate gradients live only for the duration of a backward() call.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = true);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  // Appends an op result. The backward rule is kept only when some input requires grad.
  Var record(Tensor value, const std::vector<Var>& inputs, BackwardFn backward,
             const char* op_name);

  void backward(const Var& loss);
  const Tensor& grad(const Var& leaf) const;
  void zero_grad();

  std::size_t size() const { return nodes_.size(); }
  // Ids of the op nodes whose backward rule ran during the last backward() call, in call order.
  const std::vector<std::size_t>& last_backward_trace() const { return trace_; }
  const std::string& op_name(std::size_t id) const { return nodes_.at(id).op; }

 private:
  friend class Var;
  friend class GradSink;

  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    bool is_leaf = true;
    BackwardFn backward;
    std::string op;
  };

  std::deque<Node> nodes_;
  std::vector<std::size_t> trace_;
};

// Records the branch decisions of piecewise ops (relu masks, max argmax, clamp masks) during
// one forward pass and replays them on later passes. Replaying turns the network into a fixed
// smooth function around the recorded point, which is what finite differences need near kinks.
class BranchRecording {
 public:
  void clear() { decisions_.clear(); }
  std::size_t size() const { return decisions_.size(); }

 private:
  friend class BranchScope;
  std::vector<std::vector<std::uint32_t>> decisions_;
};

class BranchScope {
 public:
  enum class Mode { kRecord, kReplay };
  BranchScope(BranchRecording& recording, Mode mode);
  ~BranchScope();
  BranchScope(const BranchScope&) = delete;
  BranchScope& operator=(const BranchScope&) = delete;

  static BranchScope* active();
  Mode mode() const { return mode_; }
  void push(std::vector<std::uint32_t> decisions);
  const std::vector<std::uint32_t>& next(std::size_t expected_size);

 private:
  BranchRecording& recording_;
  Mode mode_;
  std::size_t cursor_ = 0;
  BranchScope* previous_;
};

namespace debug {
// Scales the sigmoid backward rule by (1 + relative_error) while alive. Used to prove that
// the gradient checker rejects a broken backward rule.
class ScopedSigmoidBackwardFault {
 public:
  explicit ScopedSigmoidBackwardFault(double relative_error);
  ~ScopedSigmoidBackwardFault();

 private:
  double previous_;
};
double sigmoid_backward_scale();
}  // namespace debug

// ---- elementwise (numpy-style broadcasting) ----
Shape broadcast_shape(const Shape& a, const Shape& b);

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var add(const Var& a, double b);
Var mul(const Var& a, double b);
Var neg(const Var& a);
Var exp(const Var& a);
Var log(const Var& a);
Var sigmoid(const Var& a);
Var relu(const Var& a);
Var sqrt(const Var& a);
Var clamp_min(const Var& a, double floor);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator/(const Var& a, const Var& b) { return div(a, b); }
inline Var operator*(const Var& a, double b) { return mul(a, b); }
inline Var operator+(const Var& a, double b) { return add(a, b); }

// ---- linear algebra and reductions ----
// Batched over leading dims; leading dims must match, or one operand must be rank 2.
Var matmul(const Var& a, const Var& b);
Var softmax(const Var& a, std::size_t axis);
// Max routes the gradient to the first maximal element of each slice.
Var reduce_max(const Var& a, std::size_t axis);
Var reduce_mean(const Var& a, std::size_t axis);
Var reduce_sum(const Var& a, std::size_t axis);
Var sum_all(const Var& a);
Var mean_all(const Var& a);

// ---- layout ----
Var reshape(const Var& a, Shape shape);
Var permute(const Var& a, const std::vector<std::size_t>& axes);
Var concat(const std::vector<Var>& parts, std::size_t axis);

// ---- spatial ----
struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t pad = 0;
};
// Cross-correlation. x: [N,Cin,H,W], kernel: [Cout,Cin,kh,kw], bias: [Cout] or invalid Var.
Var conv2d(const Var& x, const Var& kernel, const Var& bias, Conv2dOptions opt = {});
// Bilinear, align_corners = false, edge-clamped (PyTorch convention).
Var resize_bilinear(const Var& x, std::size_t out_h, std::size_t out_w);
// Adaptive average pooling to the requested size.
Var resize_area(const Var& x, std::size_t out_h, std::size_t out_w);
Var upsample_nearest2x(const Var& x);

}  // namespace topicnet
