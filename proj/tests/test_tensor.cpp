#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "afan/error.hpp"
#include "afan/rng.hpp"
#include "afan/tensor.hpp"
#include "oracles.hpp"

using namespace afan;

namespace {

Tensor leaf(Shape s, std::vector<double> v, bool rg = true) {
  return Tensor::from_values(std::move(s), std::move(v), rg);
}

std::vector<double> random_values(size_t n, Rng& rng, double scale = 1.0) {
  std::vector<double> v(n);
  for (auto& x : v) x = scale * rng.normal();
  return v;
}

}  // namespace

TEST_CASE("relu forward matches definition") {
  Tensor x = leaf({3}, {-1.0, 0.0, 2.0}, false);
  Tensor y = relu(x);
  CHECK(y.values() == std::vector<double>{0.0, 0.0, 2.0});
}

TEST_CASE("softmax cross entropy of uniform logits is ln 2") {
  Tensor z = leaf({1, 2}, {0.0, 0.0}, false);
  Tensor l = softmax_cross_entropy(z, {0});
  CHECK(l.item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("conv2d with identity-center kernel reproduces the image") {
  Rng rng(3);
  Tensor x = leaf({2, 1, 5, 4}, random_values(2 * 5 * 4, rng), false);
  std::vector<double> k(9, 0.0);
  k[4] = 1.0;  // center of 3x3
  Tensor w = leaf({1, 1, 3, 3}, k, false);
  Tensor y = conv2d(x, w, 1, 1);
  REQUIRE(y.shape() == Shape{2, 1, 5, 4});
  CHECK(y.values() == x.values());
}

TEST_CASE("conv2d shape arithmetic with stride and pad") {
  Tensor x = Tensor::zeros({1, 2, 8, 8});
  Tensor w = Tensor::zeros({3, 2, 3, 3});
  CHECK(conv2d(x, w, 2, 1).shape() == Shape{1, 3, 4, 4});
  CHECK(conv2d(x, w, 1, 0).shape() == Shape{1, 3, 6, 6});
}

TEST_CASE("backward of sum of squares is 2w") {
  Tensor w = leaf({2}, {1.0, -2.0});
  Tensor loss = scale(mean_all(mul(w, w)), 2.0);  // mean over 2 elems * 2 = sum
  backward(loss);
  CHECK(w.grad() == std::vector<double>{2.0, -4.0});
}

TEST_CASE("backward of matmul is the linear map gradient") {
  Tensor a = leaf({1, 2}, {1.0, 2.0});
  Tensor b = leaf({2, 1}, {3.0, 4.0}, false);
  Tensor y = matmul(a, b);
  backward(y);
  CHECK(a.grad() == std::vector<double>{3.0, 4.0});
}

TEST_CASE("backward resets by default and accumulates on request") {
  Tensor w = leaf({2}, {1.0, -2.0});
  Tensor loss = scale(mean_all(mul(w, w)), 2.0);
  backward(loss);
  backward(loss);
  CHECK(w.grad() == std::vector<double>{2.0, -4.0});  // reset-then-fill
  backward(loss, /*accumulate=*/true);
  CHECK(w.grad() == std::vector<double>{4.0, -8.0});
}

TEST_CASE("backward rejects non-scalar loss") {
  Tensor w = leaf({2}, {1.0, 2.0});
  CHECK_THROWS_AS(backward(mul(w, w)), DomainError);
}

TEST_CASE("shape mismatch errors name both shapes") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({3, 2});
  try {
    add(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2,3]") != std::string::npos);
    CHECK(msg.find("[3,2]") != std::string::npos);
  }
}

TEST_CASE("label out of range is a domain error naming the row") {
  Tensor z = Tensor::zeros({2, 3});
  CHECK_THROWS_AS(softmax_cross_entropy(z, {0, 3}), DomainError);
  CHECK_THROWS_AS(softmax_cross_entropy(z, {-1, 0}), DomainError);
}

TEST_CASE("div_channel rejects non-positive denominators") {
  Tensor x = Tensor::zeros({2, 2});
  Tensor s = leaf({2}, {1.0, 0.0}, false);
  CHECK_THROWS_AS(div_channel(x, s), DomainError);
}

TEST_CASE("small MLP gradient matches the finite-difference oracle") {
  // dense(3->4) + bias + relu + dense(4->2) + bias + xent, params flattened.
  Rng rng(11);
  const std::vector<int> labels{0, 1, 1, 0};
  const std::vector<double> xdata = random_values(4 * 3, rng);
  const size_t n_params = 3 * 4 + 4 + 4 * 2 + 2;
  std::vector<double> theta = random_values(n_params, rng, 0.5);

  auto build = [&](const std::vector<double>& p, bool rg) {
    size_t off = 0;
    auto take = [&](Shape s) {
      int64_t n = 1;
      for (auto d : s) n *= d;
      std::vector<double> v(p.begin() + static_cast<long>(off), p.begin() + static_cast<long>(off + n));
      off += static_cast<size_t>(n);
      return Tensor::from_values(std::move(s), std::move(v), rg);
    };
    Tensor w1 = take({3, 4}), b1 = take({4}), w2 = take({4, 2}), b2 = take({2});
    Tensor x = Tensor::from_values({4, 3}, xdata, false);
    Tensor h = relu(add_channel(matmul(x, w1), b1));
    Tensor z = add_channel(matmul(h, w2), b2);
    Tensor loss = softmax_cross_entropy(z, labels);
    return std::make_pair(loss, std::vector<Tensor>{w1, b1, w2, b2});
  };

  auto [loss, params] = build(theta, true);
  backward(loss);
  std::vector<double> analytic;
  for (auto& t : params) {
    const auto& g = t.grad();
    analytic.insert(analytic.end(), g.begin(), g.end());
  }

  auto value_fn = [&](const std::vector<double>& p) { return build(p, false).first.item(); };
  const std::vector<double> numeric = oracles::fd_gradient(value_fn, theta, 1e-4);

  double max_rel = 0.0;
  for (size_t i = 0; i < numeric.size(); ++i)
    max_rel = std::max(max_rel,
                       std::abs(analytic[i] - numeric[i]) / std::max(1.0, std::abs(numeric[i])));
  CHECK(max_rel < 1e-5);
}

TEST_CASE("grad_check on a pure quadratic is exact to O(h^2)") {
  Tensor w = leaf({2}, {1.0, 1.0}, false);
  auto f = [](const Tensor& t) { return scale(mean_all(mul(t, t)), 2.0); };
  CHECK(grad_check(f, w, 1e-4) < 1e-8);
}

TEST_CASE("grad_check through dense layer and cross entropy") {
  Rng rng(5);
  const std::vector<double> wdata = random_values(3 * 2, rng, 0.7);
  Tensor x0 = leaf({2, 3}, random_values(6, rng), false);
  auto f = [&](const Tensor& x) {
    Tensor w = Tensor::from_values({3, 2}, wdata, false);
    return softmax_cross_entropy(matmul(x, w), {0, 1});
  };
  CHECK(grad_check(f, x0, 1e-4) < 1e-5);
}

TEST_CASE("grad_check on a relu net away from kinks") {
  Rng rng(7);
  const std::vector<double> wdata = random_values(3 * 3, rng, 0.8);
  Tensor x0 = leaf({2, 3}, {0.5, -0.7, 1.2, -1.1, 0.9, 0.4}, false);
  auto f = [&](const Tensor& x) {
    Tensor w = Tensor::from_values({3, 3}, wdata, false);
    Tensor h = relu(matmul(x, w));
    return softmax_cross_entropy(h, {2, 0});
  };
  // Confirm the base point is clear of relu kinks before trusting the check.
  double kink = 1e300;
  set_kink_monitor(&kink);
  f(x0);
  set_kink_monitor(nullptr);
  REQUIRE(kink > 1e-2);
  CHECK(grad_check(f, x0, 1e-4) < 1e-5);
}

TEST_CASE("every differentiable op agrees with finite differences") {
  Rng rng(23);
  auto check_op = [&](const char* name, Shape s, std::function<Tensor(const Tensor&)> f,
                      std::vector<double> point = {}) {
    int64_t n = 1;
    for (auto d : s) n *= d;
    if (point.empty()) point = random_values(static_cast<size_t>(n), rng);
    Tensor x = Tensor::from_values(s, point, false);
    INFO(name);
    CHECK(grad_check(f, x, 1e-4) < 1e-5);
  };

  Tensor other = leaf({2, 3}, random_values(6, rng), false);
  Tensor chan = leaf({3}, {0.4, -1.2, 2.0}, false);
  Tensor pos_chan = leaf({3}, {0.5, 1.5, 2.5}, false);

  check_op("add", {2, 3}, [&](const Tensor& x) { return mean_all(mul(add(x, other), add(x, other))); });
  check_op("sub", {2, 3}, [&](const Tensor& x) { return mean_all(mul(sub(x, other), sub(x, other))); });
  check_op("mul", {2, 3}, [&](const Tensor& x) { return mean_all(mul(mul(x, other), x)); });
  check_op("scale", {2, 3}, [&](const Tensor& x) { return mean_all(mul(scale(x, 1.7), x)); });
  check_op("add_channel", {2, 3}, [&](const Tensor& x) { return mean_all(mul(add_channel(x, chan), add_channel(x, chan))); });
  check_op("mul_channel", {2, 3}, [&](const Tensor& x) { return mean_all(mul(mul_channel(x, chan), x)); });
  check_op("div_channel", {2, 3}, [&](const Tensor& x) { return mean_all(mul(div_channel(x, pos_chan), x)); });
  check_op("matmul", {2, 3}, [&](const Tensor& x) {
    Tensor w = leaf({3, 2}, {0.3, -0.4, 0.9, 1.1, -0.2, 0.6}, false);
    Tensor y = matmul(x, w);
    return mean_all(mul(y, y));
  });
  Rng conv_rng(99);
  const std::vector<double> conv_w = random_values(3 * 2 * 9, conv_rng, 0.4);
  check_op("conv2d", {2, 2, 4, 4}, [&](const Tensor& x) {
    Tensor w = Tensor::from_values({3, 2, 3, 3}, conv_w, false);
    Tensor y = conv2d(x, w, 1, 1);
    return mean_all(mul(y, y));
  });
  check_op("global_avg_pool", {2, 3, 4, 4}, [&](const Tensor& x) {
    Tensor y = global_avg_pool(x);
    return mean_all(mul(y, y));
  });
  check_op("channel_stats.mu", {4, 3}, [&](const Tensor& x) {
    auto st = channel_stats(x);
    return mean_all(mul(st.mu, st.mu));
  });
  check_op("channel_stats.sigma", {4, 3}, [&](const Tensor& x) {
    auto st = channel_stats(x);
    return mean_all(mul(st.sigma, st.sigma));
  });
  check_op("softmax_cross_entropy", {3, 4}, [&](const Tensor& x) {
    return softmax_cross_entropy(x, {1, 0, 3});
  });
  check_op("batch_norm(train)", {4, 3}, [&](const Tensor& x) {
    Tensor g = leaf({3}, {1.1, 0.9, 1.3}, false);
    Tensor b = leaf({3}, {0.1, -0.2, 0.0}, false);
    Tensor y = batch_norm(x, g, b, true, nullptr, nullptr);
    return mean_all(mul(y, y));
  });

  // conv weight gradient through the same oracle
  {
    Tensor x = leaf({2, 2, 4, 4}, random_values(2 * 2 * 16, rng), false);
    Tensor w0 = leaf({3, 2, 3, 3}, random_values(3 * 2 * 9, rng, 0.4), false);
    auto f = [&](const Tensor& w) {
      Tensor y = conv2d(x, w, 2, 1);
      return mean_all(mul(y, y));
    };
    CHECK(grad_check(f, w0, 1e-4) < 1e-5);
  }
}

TEST_CASE("batch norm output is standardized per channel") {
  Rng rng(31);
  // Large-variance data so the 1e-5 variance floor is negligible
  Tensor x = leaf({16, 3, 2, 2}, random_values(16 * 3 * 4, rng, 1000.0), false);
  Tensor gamma = Tensor::full({3}, 1.0);
  Tensor beta = Tensor::zeros({3});
  Tensor y = batch_norm(x, gamma, beta, true, nullptr, nullptr);

  const int64_t R = 16 * 4;
  for (int64_t c = 0; c < 3; ++c) {
    double mean = 0.0, var = 0.0;
    for (int64_t n = 0; n < 16; ++n)
      for (int64_t r = 0; r < 4; ++r) mean += y.values()[static_cast<size_t>((n * 3 + c) * 4 + r)];
    mean /= static_cast<double>(R);
    for (int64_t n = 0; n < 16; ++n)
      for (int64_t r = 0; r < 4; ++r) {
        const double d = y.values()[static_cast<size_t>((n * 3 + c) * 4 + r)] - mean;
        var += d * d;
      }
    var /= static_cast<double>(R);
    CHECK(std::abs(mean) < 1e-10);
    CHECK(std::abs(var - 1.0) < 1e-10);
  }
}

TEST_CASE("variance floor semantics on near-constant channels") {
  // Unit-variance data: normalized variance is var/(var+floor), not 1.
  Tensor x = leaf({2, 1}, {-1.0, 1.0}, false);
  auto st = channel_stats(x);
  CHECK(st.mu.values()[0] == 0.0);
  CHECK(st.sigma.values()[0] == doctest::Approx(std::sqrt(1.0 + kVarianceFloor)).epsilon(1e-15));

  Tensor c = Tensor::full({4, 1}, 2.5);
  auto stc = channel_stats(c);
  CHECK(stc.mu.values()[0] == 2.5);
  CHECK(stc.sigma.values()[0] == doctest::Approx(std::sqrt(kVarianceFloor)).epsilon(1e-15));
}

TEST_CASE("batch norm updates running buffers only when asked") {
  Rng rng(41);
  Tensor x = leaf({8, 2}, random_values(16, rng), false);
  Tensor gamma = Tensor::full({2}, 1.0);
  Tensor beta = Tensor::zeros({2});
  std::vector<double> rm(2, 0.0), rv(2, 1.0);

  batch_norm(x, gamma, beta, true, &rm, &rv, 0.1, false);
  CHECK(rm == std::vector<double>{0.0, 0.0});
  CHECK(rv == std::vector<double>{1.0, 1.0});

  batch_norm(x, gamma, beta, true, &rm, &rv, 0.1, true);
  CHECK(rm != std::vector<double>{0.0, 0.0});

  // Inference uses the buffers as constants.
  Tensor y = batch_norm(x, gamma, beta, false, &rm, &rv);
  for (int64_t c = 0; c < 2; ++c) {
    const double s = std::sqrt(rv[static_cast<size_t>(c)] + kVarianceFloor);
    const double expect = (x.values()[static_cast<size_t>(c)] - rm[static_cast<size_t>(c)]) / s;
    CHECK(y.values()[static_cast<size_t>(c)] == doctest::Approx(expect).epsilon(1e-15));
  }
}

TEST_CASE("channel_stats rejects single-element reductions") {
  CHECK_THROWS_AS(channel_stats(Tensor::zeros({1, 3})), DomainError);
}

TEST_CASE("identical inputs give bit-identical results") {
  auto run = [] {
    Rng rng(17);
    Tensor x = Tensor::from_values({4, 3}, random_values(12, rng), true);
    Tensor w = Tensor::from_values({3, 3}, random_values(9, rng, 0.5), true);
    Tensor loss = softmax_cross_entropy(relu(matmul(x, w)), {0, 1, 2, 0});
    backward(loss);
    auto out = w.grad();
    out.push_back(loss.item());
    return out;
  };
  CHECK(run() == run());
}

TEST_CASE("grad_check reports non-finite evaluations") {
  Tensor x0 = leaf({1}, {1e200}, false);
  auto f = [](const Tensor& x) { return mean_all(mul(mul(x, x), mul(x, x))); };
  CHECK_THROWS_AS(grad_check(f, x0, 1e-4), NumericError);
}
