#include "afan/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

#include "afan/error.hpp"

namespace afan {

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // allocated lazily by backward()
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backprop;  // reads this->grad, accumulates into inputs

  int64_t numel() const { return static_cast<int64_t>(value.size()); }
  bool is_leaf() const { return inputs.empty(); }
};

}  // namespace detail

using detail::Node;

namespace {

thread_local double* g_kink_monitor = nullptr;

int64_t checked_numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) {
    if (d <= 0) throw DomainError("Tensor dimensions must be positive, got shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

std::shared_ptr<Node> make_leaf(Shape shape, std::vector<double> values, bool requires_grad) {
  const int64_t n = checked_numel(shape);
  if (n != static_cast<int64_t>(values.size()))
    throw ShapeError("value count " + std::to_string(values.size()) + " does not match shape " +
                     shape_str(shape));
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  return node;
}

// Records a result node; inputs/backprop are kept only when grads can flow.
Tensor make_result(const char* op, Shape shape, std::vector<double> values,
                   std::vector<std::shared_ptr<Node>> inputs, std::function<void(Node&)> backprop) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->op = op;
  bool any_grad = false;
  for (const auto& in : inputs)
    if (in->requires_grad) any_grad = true;
  if (any_grad) {
    node->requires_grad = true;
    node->inputs = std::move(inputs);
    node->backprop = std::move(backprop);
  }
  return Tensor(std::move(node));
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()) + " do not conform");
}

// x [N,C,rest...]; returns (C, inner = product(rest)).
std::pair<int64_t, int64_t> channel_layout(const char* op, const Tensor& x) {
  if (x.rank() < 2)
    throw ShapeError(std::string(op) + ": need a channel axis, got shape " + shape_str(x.shape()));
  const int64_t channels = x.dim(1);
  int64_t inner = 1;
  for (int a = 2; a < x.rank(); ++a) inner *= x.dim(a);
  return {channels, inner};
}

void require_channel_vector(const char* op, const Tensor& x, const Tensor& s, int64_t channels) {
  if (s.rank() != 1 || s.dim(0) != channels)
    throw ShapeError(std::string(op) + ": channel vector shape " + shape_str(s.shape()) +
                     " does not match channel axis of " + shape_str(x.shape()));
}

void ensure_grad(Node& n) {
  if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
}

}  // namespace

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

// --------------------------------------------------------------------------
// Tensor handle
// --------------------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const int64_t n = checked_numel(shape);
  return Tensor(make_leaf(std::move(shape), std::vector<double>(static_cast<size_t>(n), 0.0),
                          requires_grad));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const int64_t n = checked_numel(shape);
  return Tensor(make_leaf(std::move(shape), std::vector<double>(static_cast<size_t>(n), value),
                          requires_grad));
}

Tensor Tensor::from_values(Shape shape, std::vector<double> values, bool requires_grad) {
  return Tensor(make_leaf(std::move(shape), std::move(values), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_values({1}, {value}, requires_grad);
}

const Shape& Tensor::shape() const { return node_->shape; }
int64_t Tensor::numel() const { return node_->numel(); }
int Tensor::rank() const { return static_cast<int>(node_->shape.size()); }
int64_t Tensor::dim(int axis) const { return node_->shape[static_cast<size_t>(axis)]; }

std::vector<double>& Tensor::values() { return node_->value; }
const std::vector<double>& Tensor::values() const { return node_->value; }

double Tensor::item() const {
  if (numel() != 1) throw DomainError("item(): tensor is not scalar, shape " + shape_str(shape()));
  return node_->value[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }
bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

const std::vector<double>& Tensor::grad() const {
  if (!has_grad()) throw DomainError("grad(): no gradient held (run backward first)");
  return node_->grad;
}

void Tensor::zero_grad() {
  if (node_) node_->grad.assign(node_->value.size(), 0.0);
}

Tensor Tensor::detach() const {
  return Tensor(make_leaf(node_->shape, node_->value, false));
}

const char* Tensor::op_name() const { return node_ ? node_->op : "undefined"; }

// --------------------------------------------------------------------------
// Elementwise ops
// --------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  std::vector<double> out(a.values().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + b.values()[i];
  auto an = a.node(), bn = b.node();
  return make_result("add", a.shape(), std::move(out), {an, bn}, [an, bn](Node& self) {
    if (an->requires_grad) {
      ensure_grad(*an);
      for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
    }
    if (bn->requires_grad) {
      ensure_grad(*bn);
      for (size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  std::vector<double> out(a.values().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] - b.values()[i];
  auto an = a.node(), bn = b.node();
  return make_result("sub", a.shape(), std::move(out), {an, bn}, [an, bn](Node& self) {
    if (an->requires_grad) {
      ensure_grad(*an);
      for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
    }
    if (bn->requires_grad) {
      ensure_grad(*bn);
      for (size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  std::vector<double> out(a.values().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * b.values()[i];
  auto an = a.node(), bn = b.node();
  return make_result("mul", a.shape(), std::move(out), {an, bn}, [an, bn](Node& self) {
    if (an->requires_grad) {
      ensure_grad(*an);
      for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] * bn->value[i];
    }
    if (bn->requires_grad) {
      ensure_grad(*bn);
      for (size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] += self.grad[i] * an->value[i];
    }
  });
}

Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.values().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = c * a.values()[i];
  auto an = a.node();
  return make_result("scale", a.shape(), std::move(out), {an}, [an, c](Node& self) {
    if (!an->requires_grad) return;
    ensure_grad(*an);
    for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += c * self.grad[i];
  });
}

// --------------------------------------------------------------------------
// Channel-broadcast ops
// --------------------------------------------------------------------------

namespace {

enum class ChanOp { kAdd, kSub, kMul, kDiv };

Tensor channel_op(const char* name, ChanOp kind, const Tensor& x, const Tensor& s) {
  auto [channels, inner] = channel_layout(name, x);
  require_channel_vector(name, x, s, channels);
  if (kind == ChanOp::kDiv) {
    for (int64_t c = 0; c < channels; ++c) {
      const double sc = s.values()[static_cast<size_t>(c)];
      if (!std::isfinite(sc))
        throw NumericError(std::string(name) + ": non-finite denominator at channel " +
                           std::to_string(c));
      if (!(sc > 0.0))
        throw DomainError(std::string(name) + ": non-positive denominator at channel " +
                          std::to_string(c));
    }
  }
  const int64_t batch = x.dim(0);
  const auto& xv = x.values();
  const auto& sv = s.values();
  std::vector<double> out(xv.size());
  size_t idx = 0;
  for (int64_t n = 0; n < batch; ++n) {
    for (int64_t c = 0; c < channels; ++c) {
      const double sc = sv[static_cast<size_t>(c)];
      for (int64_t r = 0; r < inner; ++r, ++idx) {
        switch (kind) {
          case ChanOp::kAdd: out[idx] = xv[idx] + sc; break;
          case ChanOp::kSub: out[idx] = xv[idx] - sc; break;
          case ChanOp::kMul: out[idx] = xv[idx] * sc; break;
          case ChanOp::kDiv: out[idx] = xv[idx] / sc; break;
        }
      }
    }
  }
  auto xn = x.node(), sn = s.node();
  const int64_t C = channels, R = inner, N = batch;
  return make_result(name, x.shape(), std::move(out), {xn, sn}, [=](Node& self) {
    if (xn->requires_grad) {
      ensure_grad(*xn);
      size_t i = 0;
      for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c) {
          const double sc = sn->value[static_cast<size_t>(c)];
          for (int64_t r = 0; r < R; ++r, ++i) {
            switch (kind) {
              case ChanOp::kAdd:
              case ChanOp::kSub: xn->grad[i] += self.grad[i]; break;
              case ChanOp::kMul: xn->grad[i] += self.grad[i] * sc; break;
              case ChanOp::kDiv: xn->grad[i] += self.grad[i] / sc; break;
            }
          }
        }
    }
    if (sn->requires_grad) {
      ensure_grad(*sn);
      size_t i = 0;
      for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c) {
          const size_t cc = static_cast<size_t>(c);
          const double sc = sn->value[cc];
          for (int64_t r = 0; r < R; ++r, ++i) {
            switch (kind) {
              case ChanOp::kAdd: sn->grad[cc] += self.grad[i]; break;
              case ChanOp::kSub: sn->grad[cc] -= self.grad[i]; break;
              case ChanOp::kMul: sn->grad[cc] += self.grad[i] * xn->value[i]; break;
              case ChanOp::kDiv: sn->grad[cc] -= self.grad[i] * xn->value[i] / (sc * sc); break;
            }
          }
        }
    }
  });
}

}  // namespace

Tensor add_channel(const Tensor& x, const Tensor& s) { return channel_op("add_channel", ChanOp::kAdd, x, s); }
Tensor sub_channel(const Tensor& x, const Tensor& s) { return channel_op("sub_channel", ChanOp::kSub, x, s); }
Tensor mul_channel(const Tensor& x, const Tensor& s) { return channel_op("mul_channel", ChanOp::kMul, x, s); }
Tensor div_channel(const Tensor& x, const Tensor& s) { return channel_op("div_channel", ChanOp::kDiv, x, s); }

// --------------------------------------------------------------------------
// matmul / conv2d
// --------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError("matmul: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                     " do not conform");
  const int64_t N = a.dim(0), K = a.dim(1), M = b.dim(1);
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<double> out(static_cast<size_t>(N * M), 0.0);
  for (int64_t n = 0; n < N; ++n)
    for (int64_t k = 0; k < K; ++k) {
      const double ank = av[static_cast<size_t>(n * K + k)];
      for (int64_t m = 0; m < M; ++m)
        out[static_cast<size_t>(n * M + m)] += ank * bv[static_cast<size_t>(k * M + m)];
    }
  auto an = a.node(), bn = b.node();
  return make_result("matmul", {N, M}, std::move(out), {an, bn}, [an, bn, N, K, M](Node& self) {
    if (an->requires_grad) {
      ensure_grad(*an);
      for (int64_t n = 0; n < N; ++n)
        for (int64_t m = 0; m < M; ++m) {
          const double g = self.grad[static_cast<size_t>(n * M + m)];
          for (int64_t k = 0; k < K; ++k)
            an->grad[static_cast<size_t>(n * K + k)] += g * bn->value[static_cast<size_t>(k * M + m)];
        }
    }
    if (bn->requires_grad) {
      ensure_grad(*bn);
      for (int64_t n = 0; n < N; ++n)
        for (int64_t k = 0; k < K; ++k) {
          const double ank = an->value[static_cast<size_t>(n * K + k)];
          for (int64_t m = 0; m < M; ++m)
            bn->grad[static_cast<size_t>(k * M + m)] += ank * self.grad[static_cast<size_t>(n * M + m)];
        }
    }
  });
}

Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int pad) {
  if (x.rank() != 4 || w.rank() != 4 || x.dim(1) != w.dim(1))
    throw ShapeError("conv2d: shapes " + shape_str(x.shape()) + " and " + shape_str(w.shape()) +
                     " do not conform");
  if (stride < 1 || pad < 0) throw DomainError("conv2d: stride must be >= 1 and pad >= 0");
  const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int64_t F = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const int64_t Ho = (H + 2 * pad - kh) / stride + 1;
  const int64_t Wo = (W + 2 * pad - kw) / stride + 1;
  if (H + 2 * pad < kh || W + 2 * pad < kw)
    throw ShapeError("conv2d: kernel " + shape_str(w.shape()) + " larger than padded input " +
                     shape_str(x.shape()));

  const auto& xv = x.values();
  const auto& wv = w.values();
  std::vector<double> out(static_cast<size_t>(N * F * Ho * Wo), 0.0);
  auto xat = [&](int64_t n, int64_t c, int64_t h2, int64_t w2) {
    return xv[static_cast<size_t>(((n * C + c) * H + h2) * W + w2)];
  };
  for (int64_t n = 0; n < N; ++n)
    for (int64_t f = 0; f < F; ++f)
      for (int64_t c = 0; c < C; ++c)
        for (int64_t i = 0; i < Ho; ++i)
          for (int64_t j = 0; j < Wo; ++j) {
            double acc = 0.0;
            const int64_t h0 = i * stride - pad, w0 = j * stride - pad;
            for (int64_t u = 0; u < kh; ++u) {
              const int64_t h2 = h0 + u;
              if (h2 < 0 || h2 >= H) continue;
              for (int64_t v = 0; v < kw; ++v) {
                const int64_t w2 = w0 + v;
                if (w2 < 0 || w2 >= W) continue;
                acc += xat(n, c, h2, w2) * wv[static_cast<size_t>(((f * C + c) * kh + u) * kw + v)];
              }
            }
            out[static_cast<size_t>(((n * F + f) * Ho + i) * Wo + j)] += acc;
          }

  auto xn = x.node(), wn = w.node();
  const int64_t s = stride, p = pad;
  return make_result("conv2d", {N, F, Ho, Wo}, std::move(out), {xn, wn}, [=](Node& self) {
    const bool gx = xn->requires_grad, gw = wn->requires_grad;
    if (gx) ensure_grad(*xn);
    if (gw) ensure_grad(*wn);
    for (int64_t n = 0; n < N; ++n)
      for (int64_t f = 0; f < F; ++f)
        for (int64_t c = 0; c < C; ++c)
          for (int64_t i = 0; i < Ho; ++i)
            for (int64_t j = 0; j < Wo; ++j) {
              const double g = self.grad[static_cast<size_t>(((n * F + f) * Ho + i) * Wo + j)];
              if (g == 0.0) continue;
              const int64_t h0 = i * s - p, w0 = j * s - p;
              for (int64_t u = 0; u < kh; ++u) {
                const int64_t h2 = h0 + u;
                if (h2 < 0 || h2 >= H) continue;
                for (int64_t v = 0; v < kw; ++v) {
                  const int64_t w2 = w0 + v;
                  if (w2 < 0 || w2 >= W) continue;
                  const size_t xi = static_cast<size_t>(((n * C + c) * H + h2) * W + w2);
                  const size_t wi = static_cast<size_t>(((f * C + c) * kh + u) * kw + v);
                  if (gx) xn->grad[xi] += g * wn->value[wi];
                  if (gw) wn->grad[wi] += g * xn->value[xi];
                }
              }
            }
  });
}

// --------------------------------------------------------------------------
// Nonlinearities / reductions
// --------------------------------------------------------------------------

Tensor relu(const Tensor& x) {
  const auto& xv = x.values();
  std::vector<double> out(xv.size());
  for (size_t i = 0; i < out.size(); ++i) {
    if (g_kink_monitor) *g_kink_monitor = std::min(*g_kink_monitor, std::abs(xv[i]));
    out[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  }
  auto xn = x.node();
  return make_result("relu", x.shape(), std::move(out), {xn}, [xn](Node& self) {
    if (!xn->requires_grad) return;
    ensure_grad(*xn);
    for (size_t i = 0; i < self.grad.size(); ++i)
      if (xn->value[i] > 0.0) xn->grad[i] += self.grad[i];
  });
}

Tensor mean_all(const Tensor& x) {
  const auto& xv = x.values();
  double acc = 0.0;
  for (double v : xv) acc += v;
  const double inv = 1.0 / static_cast<double>(xv.size());
  auto xn = x.node();
  return make_result("mean_all", {1}, {acc * inv}, {xn}, [xn, inv](Node& self) {
    if (!xn->requires_grad) return;
    ensure_grad(*xn);
    const double g = self.grad[0] * inv;
    for (double& gi : xn->grad) gi += g;
  });
}

Tensor global_avg_pool(const Tensor& x) {
  if (x.rank() != 4)
    throw ShapeError("global_avg_pool: expected [N,C,H,W], got " + shape_str(x.shape()));
  const int64_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  const auto& xv = x.values();
  std::vector<double> out(static_cast<size_t>(N * C), 0.0);
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c) {
      double acc = 0.0;
      const size_t base = static_cast<size_t>((n * C + c) * HW);
      for (int64_t r = 0; r < HW; ++r) acc += xv[base + static_cast<size_t>(r)];
      out[static_cast<size_t>(n * C + c)] = acc / static_cast<double>(HW);
    }
  auto xn = x.node();
  return make_result("global_avg_pool", {N, C}, std::move(out), {xn}, [xn, N, C, HW](Node& self) {
    if (!xn->requires_grad) return;
    ensure_grad(*xn);
    const double inv = 1.0 / static_cast<double>(HW);
    for (int64_t n = 0; n < N; ++n)
      for (int64_t c = 0; c < C; ++c) {
        const double g = self.grad[static_cast<size_t>(n * C + c)] * inv;
        const size_t base = static_cast<size_t>((n * C + c) * HW);
        for (int64_t r = 0; r < HW; ++r) xn->grad[base + static_cast<size_t>(r)] += g;
      }
  });
}

ChannelStats channel_stats(const Tensor& x) {
  auto [channels, inner] = channel_layout("channel_stats", x);
  const int64_t batch = x.dim(0);
  const int64_t R = batch * inner;  // reduction set size per channel
  if (R < 2)
    throw DomainError("channel_stats: need >= 2 elements per channel, got " + std::to_string(R));
  const auto& xv = x.values();
  std::vector<double> mu(static_cast<size_t>(channels), 0.0);
  std::vector<double> var(static_cast<size_t>(channels), 0.0);
  for (int64_t n = 0; n < batch; ++n)
    for (int64_t c = 0; c < channels; ++c) {
      const size_t base = static_cast<size_t>((n * channels + c) * inner);
      for (int64_t r = 0; r < inner; ++r) mu[static_cast<size_t>(c)] += xv[base + static_cast<size_t>(r)];
    }
  for (auto& m : mu) m /= static_cast<double>(R);
  for (int64_t n = 0; n < batch; ++n)
    for (int64_t c = 0; c < channels; ++c) {
      const size_t base = static_cast<size_t>((n * channels + c) * inner);
      const double m = mu[static_cast<size_t>(c)];
      for (int64_t r = 0; r < inner; ++r) {
        const double d = xv[base + static_cast<size_t>(r)] - m;
        var[static_cast<size_t>(c)] += d * d;
      }
    }
  std::vector<double> sigma(static_cast<size_t>(channels));
  for (int64_t c = 0; c < channels; ++c) {
    var[static_cast<size_t>(c)] /= static_cast<double>(R);
    sigma[static_cast<size_t>(c)] = std::sqrt(var[static_cast<size_t>(c)] + kVarianceFloor);
  }

  auto xn = x.node();
  const int64_t N = batch, C = channels, In = inner;
  const double invR = 1.0 / static_cast<double>(R);
  auto mu_cache = mu;

  Tensor mu_t = make_result("channel_mean", {channels}, std::move(mu), {xn}, [xn, N, C, In, invR](Node& self) {
    if (!xn->requires_grad) return;
    ensure_grad(*xn);
    for (int64_t n = 0; n < N; ++n)
      for (int64_t c = 0; c < C; ++c) {
        const double g = self.grad[static_cast<size_t>(c)] * invR;
        const size_t base = static_cast<size_t>((n * C + c) * In);
        for (int64_t r = 0; r < In; ++r) xn->grad[base + static_cast<size_t>(r)] += g;
      }
  });

  auto sigma_cache = sigma;
  Tensor sigma_t = make_result(
      "channel_sigma", {channels}, std::move(sigma), {xn},
      // d sigma_c / d x_e = (x_e - mu_c) / (R * sigma_c)
      [xn, N, C, In, invR, mu_cache, sigma_cache](Node& self) {
        if (!xn->requires_grad) return;
        ensure_grad(*xn);
        for (int64_t n = 0; n < N; ++n)
          for (int64_t c = 0; c < C; ++c) {
            const size_t cc = static_cast<size_t>(c);
            const double g = self.grad[cc] * invR / sigma_cache[cc];
            const double m = mu_cache[cc];
            const size_t base = static_cast<size_t>((n * C + c) * In);
            for (int64_t r = 0; r < In; ++r) {
              const size_t i = base + static_cast<size_t>(r);
              xn->grad[i] += g * (xn->value[i] - m);
            }
          }
      });
  return {mu_t, sigma_t};
}

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, bool training,
                  std::vector<double>* running_mean, std::vector<double>* running_var,
                  double momentum, bool update_running) {
  auto [channels, inner] = channel_layout("batch_norm", x);
  require_channel_vector("batch_norm", x, gamma, channels);
  require_channel_vector("batch_norm", x, beta, channels);

  if (training) {
    ChannelStats st = channel_stats(x);
    if (update_running) {
      if (!running_mean || !running_var)
        throw DomainError("batch_norm: running buffers required for update_running");
      // population variance, recovered from the floored sigma
      for (int64_t c = 0; c < channels; ++c) {
        const size_t cc = static_cast<size_t>(c);
        const double m = st.mu.values()[cc];
        const double s = st.sigma.values()[cc];
        const double v = std::max(0.0, s * s - kVarianceFloor);
        (*running_mean)[cc] = (1.0 - momentum) * (*running_mean)[cc] + momentum * m;
        (*running_var)[cc] = (1.0 - momentum) * (*running_var)[cc] + momentum * v;
      }
    }
    Tensor xn = div_channel(sub_channel(x, st.mu), st.sigma);
    return add_channel(mul_channel(xn, gamma), beta);
  }

  if (!running_mean || !running_var)
    throw DomainError("batch_norm: running buffers required in inference mode");
  std::vector<double> sig(static_cast<size_t>(channels));
  for (int64_t c = 0; c < channels; ++c)
    sig[static_cast<size_t>(c)] = std::sqrt((*running_var)[static_cast<size_t>(c)] + kVarianceFloor);
  Tensor mu_t = Tensor::from_values({channels}, *running_mean);
  Tensor sigma_t = Tensor::from_values({channels}, std::move(sig));
  Tensor xn = div_channel(sub_channel(x, mu_t), sigma_t);
  return add_channel(mul_channel(xn, gamma), beta);
}

Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  if (logits.rank() != 2)
    throw ShapeError("softmax_cross_entropy: expected [N,K] logits, got " + shape_str(logits.shape()));
  const int64_t N = logits.dim(0), K = logits.dim(1);
  if (static_cast<int64_t>(labels.size()) != N)
    throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                     shape_str(logits.shape()) + " logits");
  if (N == 0) throw DomainError("softmax_cross_entropy: empty batch");
  for (int64_t n = 0; n < N; ++n)
    if (labels[static_cast<size_t>(n)] < 0 || labels[static_cast<size_t>(n)] >= K)
      throw DomainError("softmax_cross_entropy: label " + std::to_string(labels[static_cast<size_t>(n)]) +
                        " out of range [0," + std::to_string(K) + ") at row " + std::to_string(n));

  const auto& zv = logits.values();
  std::vector<double> probs(zv.size());
  double loss = 0.0;
  for (int64_t n = 0; n < N; ++n) {
    const size_t base = static_cast<size_t>(n * K);
    double m = zv[base];
    for (int64_t k = 1; k < K; ++k) m = std::max(m, zv[base + static_cast<size_t>(k)]);
    double sum = 0.0;
    for (int64_t k = 0; k < K; ++k) {
      const double e = std::exp(zv[base + static_cast<size_t>(k)] - m);
      probs[base + static_cast<size_t>(k)] = e;
      sum += e;
    }
    for (int64_t k = 0; k < K; ++k) probs[base + static_cast<size_t>(k)] /= sum;
    const double lse = m + std::log(sum);  // sum >= 1, log is safe
    loss += lse - zv[base + static_cast<size_t>(labels[static_cast<size_t>(n)])];
  }
  loss /= static_cast<double>(N);

  auto zn = logits.node();
  auto lbl = labels;
  return make_result("softmax_cross_entropy", {1}, {loss}, {zn},
                     [zn, probs = std::move(probs), lbl, N, K](Node& self) {
                       if (!zn->requires_grad) return;
                       ensure_grad(*zn);
                       const double g = self.grad[0] / static_cast<double>(N);
                       for (int64_t n = 0; n < N; ++n) {
                         const size_t base = static_cast<size_t>(n * K);
                         for (int64_t k = 0; k < K; ++k) {
                           double p = probs[base + static_cast<size_t>(k)];
                           if (k == lbl[static_cast<size_t>(n)]) p -= 1.0;
                           zn->grad[base + static_cast<size_t>(k)] += g * p;
                         }
                       }
                     });
}

std::vector<int> argmax_rows(const Tensor& logits) {
  if (logits.rank() != 2)
    throw ShapeError("argmax_rows: expected [N,K], got " + shape_str(logits.shape()));
  const int64_t N = logits.dim(0), K = logits.dim(1);
  std::vector<int> out(static_cast<size_t>(N));
  const auto& zv = logits.values();
  for (int64_t n = 0; n < N; ++n) {
    const size_t base = static_cast<size_t>(n * K);
    int best = 0;
    for (int64_t k = 1; k < K; ++k)
      if (zv[base + static_cast<size_t>(k)] > zv[base + static_cast<size_t>(best)])
        best = static_cast<int>(k);
    out[static_cast<size_t>(n)] = best;
  }
  return out;
}

// --------------------------------------------------------------------------
// Reverse mode
// --------------------------------------------------------------------------

void backward(const Tensor& loss, bool accumulate) {
  if (!loss.defined()) throw DomainError("backward: undefined tensor");
  if (loss.numel() != 1)
    throw DomainError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  if (!loss.requires_grad()) return;  // nothing reachable requires grad

  // Topological order via iterative postorder DFS.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* in = node->inputs[next++].get();
      if (in->requires_grad && !seen.count(in)) {
        seen.insert(in);
        stack.emplace_back(in, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (Node* n : order) {
    if (accumulate && n->is_leaf()) {
      ensure_grad(*n);  // keep existing accumulation
    } else {
      n->grad.assign(n->value.size(), 0.0);
    }
  }

  Node* root = loss.node().get();
  root->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if ((*it)->backprop) (*it)->backprop(**it);
}

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& point, double h) {
  if (!(h > 0.0)) throw DomainError("grad_check: h must be positive");
  Tensor p = Tensor::from_values(point.shape(), point.values(), true);
  Tensor loss = f(p);
  if (loss.numel() != 1)
    throw DomainError("grad_check: f must return a scalar, got " + shape_str(loss.shape()));
  if (!std::isfinite(loss.item())) throw NumericError("grad_check: non-finite f at base point");
  backward(loss);
  std::vector<double> analytic(point.values().size(), 0.0);
  if (p.has_grad()) analytic = p.grad();

  auto eval = [&](const std::vector<double>& v) {
    Tensor q = Tensor::from_values(point.shape(), v, false);
    return f(q).item();
  };
  double max_err = 0.0;
  std::vector<double> probe = point.values();
  for (size_t i = 0; i < probe.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double lp = eval(probe);
    probe[i] = orig - h;
    const double lm = eval(probe);
    probe[i] = orig;
    if (!std::isfinite(lp) || !std::isfinite(lm))
      throw NumericError("grad_check: non-finite f at coordinate " + std::to_string(i));
    const double num = (lp - lm) / (2.0 * h);
    const double err = std::abs(analytic[i] - num) / std::max(1.0, std::abs(num));
    max_err = std::max(max_err, err);
  }
  return max_err;
}

void set_kink_monitor(double* min_abs) { g_kink_monitor = min_abs; }

}  // namespace afan
