#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace afan {

using Shape = std::vector<int64_t>;

// Floor constant added under the square root of every variance denominator.
inline constexpr double kVarianceFloor = 1e-5;

std::string shape_str(const Shape& s);

namespace detail {
struct Node;
}

// Dense row-major tensor of doubles participating in a recorded computation
// graph. A Tensor is a shared handle: copies alias the same storage and
// graph node. Ops record backward closures only when an input requires grad.
//
// Conventions:
//   scalar        shape {1}
//   vector batch  [N, C]            (channel axis = 1)
//   image batch   [N, C, H, W]      (channel axis = 1)
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_values(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  int64_t numel() const;
  int rank() const;
  int64_t dim(int axis) const;

  std::vector<double>& values();
  const std::vector<double>& values() const;
  double item() const;  // scalar tensors only

  bool requires_grad() const;
  bool has_grad() const;
  const std::vector<double>& grad() const;  // throws if no grad is held
  void zero_grad();

  // Copy of the values as a fresh leaf with no graph and no grad.
  Tensor detach() const;

  const char* op_name() const;

  // Internal handle (graph walks, op recording).
  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

// ---------------------------------------------------------------------------
// Forward ops. Every op validates shape conformance (ShapeError naming both
// shapes) and appends to the graph iff any input requires grad.
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // elementwise
Tensor scale(const Tensor& a, double c);

// x [N,C,...] op s [C], broadcasting s along every non-channel axis.
// div_channel requires s > 0 elementwise (all divisions in the engine go
// through floored standard deviations).
Tensor add_channel(const Tensor& x, const Tensor& s);
Tensor sub_channel(const Tensor& x, const Tensor& s);
Tensor mul_channel(const Tensor& x, const Tensor& s);
Tensor div_channel(const Tensor& x, const Tensor& s);

Tensor matmul(const Tensor& a, const Tensor& b);  // [N,K] x [K,M]

// x [N,C,H,W], w [F,C,kh,kw]; output [N,F,Ho,Wo], Ho = (H+2*pad-kh)/stride+1.
Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int pad);

Tensor relu(const Tensor& x);  // subgradient at 0 is 0

Tensor mean_all(const Tensor& x);                // scalar mean over all elements
Tensor global_avg_pool(const Tensor& x);         // [N,C,H,W] -> [N,C]

// Per-channel mean and floored standard deviation over all non-channel axes
// (population variance). sigma = sqrt(var + kVarianceFloor). Differentiable
// w.r.t. x through both outputs. Requires >= 2 elements per channel.
struct ChannelStats {
  Tensor mu;     // [C]
  Tensor sigma;  // [C]
};
ChannelStats channel_stats(const Tensor& x);

// Per-channel batch normalization with learned scale/shift.
// training=true: batch statistics (differentiable through them); optionally
// updates the running buffers in place with momentum (population variance).
// training=false: running statistics as constants.
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, bool training,
                  std::vector<double>* running_mean, std::vector<double>* running_var,
                  double momentum = 0.1, bool update_running = false);

// Mean softmax cross-entropy of logits [N,K] against integer labels
// (mathematically: one-hot rows). Log-sum-exp stabilized.
Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels);

std::vector<int> argmax_rows(const Tensor& logits);  // ties -> lowest index

// ---------------------------------------------------------------------------
// Reverse mode
// ---------------------------------------------------------------------------

// Computes d(loss)/d(t) for every reachable tensor with requires_grad.
// Default resets the grads of all reachable tensors first; accumulate=true
// adds into leaf grads (intermediates are still reset) for multi-loss sums.
void backward(const Tensor& loss, bool accumulate = false);

// Max over coordinates of |analytic - central difference| / max(1, |central|).
// f must be finite near point; throws NumericError naming the coordinate
// otherwise.
double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& point,
                  double h = 1e-4);

// When set, relu() records the minimum |input| it sees (distance to the
// nearest kink); used by tests that must evaluate away from kinks.
void set_kink_monitor(double* min_abs);

}  // namespace afan
