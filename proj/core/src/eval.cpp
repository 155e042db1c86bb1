#include "afan/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "afan/error.hpp"
#include "afan/rng.hpp"

namespace afan {

namespace {

double sgn(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm2(const std::vector<double>& a) { return std::sqrt(dot(a, a)); }

double norm_inf(const std::vector<double>& a) {
  double m = 0.0;
  for (double v : a) m = std::max(m, std::abs(v));
  return m;
}

}  // namespace

void AttackConfig::validate() const {
  if (steps < 1) throw DomainError("AttackConfig.steps: need >= 1");
  if (!(alpha > 0.0)) throw DomainError("AttackConfig.alpha: must be positive");
  // epsilon == 0 is the degenerate no-op attack (robust accuracy == standard)
  if (epsilon < 0.0) throw DomainError("AttackConfig.epsilon: must be >= 0");
  if (!(clamp_hi > clamp_lo)) throw DomainError("AttackConfig: clamp range is empty");
}

GradFn model_loss_gradfn(SplitModel& model, const Tensor& x, const std::vector<int>& labels) {
  const std::vector<double> theta0 = model.flat_parameters();
  Tensor x_fixed = x.detach();
  return [&model, x_fixed, labels, theta0](const std::vector<double>& theta,
                                           std::vector<double>* grad) -> double {
    model.set_flat_parameters(theta);
    ForwardMode mode;
    mode.training = false;  // frozen statistics: loss is a function of theta alone
    HeadOutput out = model.forward_monolithic(x_fixed, labels, mode);
    const double loss = out.loss.item();
    if (grad) {
      backward(out.loss);
      grad->clear();
      for (auto& p : model.parameters()) {
        if (p.tensor.has_grad()) {
          const auto& g = p.tensor.grad();
          grad->insert(grad->end(), g.begin(), g.end());
        } else {
          grad->insert(grad->end(), static_cast<size_t>(p.tensor.numel()), 0.0);
        }
      }
    }
    model.set_flat_parameters(theta0);
    return loss;
  };
}

// --------------------------------------------------------------------------
// Accuracy
// --------------------------------------------------------------------------

double accuracy_on(SplitModel& model, const Dataset& data, const std::vector<int64_t>& idx,
                   int64_t batch) {
  if (idx.empty()) throw DomainError("accuracy_on: empty evaluation set");
  ForwardMode mode;
  mode.training = false;
  int64_t hits = 0;
  for (size_t start = 0; start < idx.size(); start += static_cast<size_t>(batch)) {
    const size_t end = std::min(idx.size(), start + static_cast<size_t>(batch));
    std::vector<int64_t> chunk(idx.begin() + static_cast<long>(start),
                               idx.begin() + static_cast<long>(end));
    Tensor x = gather_inputs(data, chunk);
    const std::vector<int> y = gather_labels(data, chunk);
    const std::vector<int> pred = argmax_rows(model.forward_logits(x, mode));
    for (size_t i = 0; i < y.size(); ++i)
      if (pred[i] == y[i]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(idx.size());
}

double standard_accuracy(SplitModel& model, const Dataset& data, Split split) {
  return accuracy_on(model, data, data.indices_of(split));
}

// --------------------------------------------------------------------------
// Input-space PGD
// --------------------------------------------------------------------------

Tensor pgd_input_attack(SplitModel& model, const Tensor& x, const std::vector<int>& labels,
                        const AttackConfig& attack) {
  attack.validate();
  for (double v : x.values())
    if (v < attack.clamp_lo || v > attack.clamp_hi)
      throw DomainError("pgd_input_attack: input outside clamp range");

  ForwardMode mode;
  mode.training = false;
  const std::vector<double>& x0 = x.values();
  std::vector<double> delta(x0.size(), 0.0);
  for (int t = 0; t < attack.steps; ++t) {
    std::vector<double> xp(x0.size());
    for (size_t i = 0; i < xp.size(); ++i) xp[i] = x0[i] + delta[i];
    Tensor x_pert = Tensor::from_values(x.shape(), std::move(xp), true);
    HeadOutput out = model.forward_monolithic(x_pert, labels, mode);
    backward(out.loss);
    if (!x_pert.has_grad()) break;  // loss does not depend on the input
    const std::vector<double>& g = x_pert.grad();
    for (size_t i = 0; i < delta.size(); ++i) {
      if (!std::isfinite(g[i]))
        throw NumericError("pgd_input_attack: non-finite gradient at step " + std::to_string(t));
      delta[i] = std::clamp(delta[i] + attack.alpha * sgn(g[i]), -attack.epsilon, attack.epsilon);
      // clamping to the input range moves toward x, so the ball bound survives
      delta[i] = std::clamp(x0[i] + delta[i], attack.clamp_lo, attack.clamp_hi) - x0[i];
    }
  }
  std::vector<double> xa(x0.size());
  for (size_t i = 0; i < xa.size(); ++i) xa[i] = x0[i] + delta[i];
  return Tensor::from_values(x.shape(), std::move(xa), false);
}

double robust_accuracy(SplitModel& model, const Dataset& data, const AttackConfig& attack,
                       Split split, int64_t batch) {
  const std::vector<int64_t> idx = data.indices_of(split);
  if (idx.empty()) throw DomainError("robust_accuracy: empty evaluation set");
  ForwardMode mode;
  mode.training = false;
  int64_t hits = 0;
  for (size_t start = 0; start < idx.size(); start += static_cast<size_t>(batch)) {
    const size_t end = std::min(idx.size(), start + static_cast<size_t>(batch));
    std::vector<int64_t> chunk(idx.begin() + static_cast<long>(start),
                               idx.begin() + static_cast<long>(end));
    Tensor x = gather_inputs(data, chunk);
    const std::vector<int> y = gather_labels(data, chunk);
    Tensor x_adv = pgd_input_attack(model, x, y, attack);
    const std::vector<int> pred = argmax_rows(model.forward_logits(x_adv, mode));
    for (size_t i = 0; i < y.size(); ++i)
      if (pred[i] == y[i]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(idx.size());
}

// --------------------------------------------------------------------------
// Second-order estimators (finite-difference HVPs)
// --------------------------------------------------------------------------

std::vector<double> hvp(const GradFn& lossfn, const std::vector<double>& theta,
                        const std::vector<double>& v) {
  if (v.size() != theta.size())
    throw ShapeError("hvp: direction size " + std::to_string(v.size()) +
                     " does not match parameter size " + std::to_string(theta.size()));
  const double h = 1e-4 * (1.0 + norm_inf(theta)) / (norm_inf(v) + 1e-12);
  std::vector<double> tp(theta.size()), tm(theta.size());
  for (size_t i = 0; i < theta.size(); ++i) {
    tp[i] = theta[i] + h * v[i];
    tm[i] = theta[i] - h * v[i];
  }
  std::vector<double> gp, gm;
  lossfn(tp, &gp);
  lossfn(tm, &gm);
  std::vector<double> out(theta.size());
  for (size_t i = 0; i < theta.size(); ++i) {
    out[i] = (gp[i] - gm[i]) / (2.0 * h);
    if (!std::isfinite(out[i]))
      throw NumericError("hvp: non-finite result at coordinate " + std::to_string(i));
  }
  return out;
}

SpectralResult spectral_norm(const GradFn& lossfn, const std::vector<double>& theta, int max_iters,
                             double tol, uint64_t seed) {
  if (max_iters < 1) throw DomainError("spectral_norm: need max_iters >= 1");
  Rng rng(derive_seed(seed, SeedDomain::kEstimator));
  const size_t d = theta.size();
  auto random_unit = [&]() {
    std::vector<double> v(d);
    for (auto& e : v) e = rng.normal();
    const double n = norm2(v);
    for (auto& e : v) e /= n;
    return v;
  };
  std::vector<double> v = random_unit();
  SpectralResult res;
  double lambda = 0.0;
  for (int it = 1; it <= max_iters; ++it) {
    std::vector<double> w = hvp(lossfn, theta, v);
    const double wn = norm2(w);
    res.iters = it;
    if (wn < 1e-12) {  // degenerate iterate: restart from a fresh direction
      v = random_unit();
      continue;
    }
    lambda = dot(v, w);
    double resid = 0.0;
    for (size_t i = 0; i < d; ++i) {
      const double r = w[i] - lambda * v[i];
      resid += r * r;
    }
    resid = std::sqrt(resid) / std::max(1.0, std::abs(lambda));
    res.residual = resid;
    for (size_t i = 0; i < d; ++i) v[i] = w[i] / wn;
    if (resid < tol) {
      res.converged = true;
      break;
    }
  }
  res.estimate = std::abs(lambda);
  return res;
}

TraceResult trace_hutchinson(const GradFn& lossfn, const std::vector<double>& theta, int probes,
                             uint64_t seed) {
  if (probes < 1) throw DomainError("trace_hutchinson: need probes >= 1");
  Rng rng(derive_seed(seed, SeedDomain::kEstimator));
  const size_t d = theta.size();
  std::vector<double> samples;
  samples.reserve(static_cast<size_t>(probes));
  for (int p = 0; p < probes; ++p) {
    std::vector<double> z(d);
    for (auto& e : z) e = rng.rademacher();
    const std::vector<double> hz = hvp(lossfn, theta, z);
    samples.push_back(dot(z, hz));
  }
  TraceResult res;
  res.probes = probes;
  for (double s : samples) res.estimate += s;
  res.estimate /= static_cast<double>(probes);
  if (probes > 1) {
    double ss = 0.0;
    for (double s : samples) ss += (s - res.estimate) * (s - res.estimate);
    res.std_error = std::sqrt(ss / (static_cast<double>(probes) * (probes - 1.0)));
  }
  return res;
}

// --------------------------------------------------------------------------
// Loss-landscape slice
// --------------------------------------------------------------------------

namespace {

// Random Gaussian direction, renormalized per filter to the parameter norms:
// conv [F,C,kh,kw] per output filter, dense [in,out] per output column,
// vectors as a whole.
std::vector<double> filter_normalized_direction(const std::vector<double>& theta0,
                                                const std::vector<Shape>& shapes, Rng& rng) {
  std::vector<double> dir(theta0.size());
  for (auto& e : dir) e = rng.normal();
  size_t off = 0;
  for (const Shape& s : shapes) {
    size_t n = 1;
    for (int64_t d : s) n *= static_cast<size_t>(d);
    auto scale_group = [&](size_t begin, size_t stride, size_t count) {
      // elements off + begin + k*stride for k in [0, count)
      double pn = 0.0, dn = 0.0;
      for (size_t k = 0; k < count; ++k) {
        const size_t i = off + begin + k * stride;
        pn += theta0[i] * theta0[i];
        dn += dir[i] * dir[i];
      }
      pn = std::sqrt(pn);
      dn = std::sqrt(dn);
      const double f = dn > 0.0 ? pn / dn : 0.0;
      for (size_t k = 0; k < count; ++k) dir[off + begin + k * stride] *= f;
    };
    if (s.size() == 4) {
      const size_t per_filter = static_cast<size_t>(s[1] * s[2] * s[3]);
      for (int64_t f = 0; f < s[0]; ++f)
        scale_group(static_cast<size_t>(f) * per_filter, 1, per_filter);
    } else if (s.size() == 2) {
      for (int64_t j = 0; j < s[1]; ++j)
        scale_group(static_cast<size_t>(j), static_cast<size_t>(s[1]), static_cast<size_t>(s[0]));
    } else {
      scale_group(0, 1, n);
    }
    off += n;
  }
  if (off != theta0.size())
    throw ShapeError("loss_slice: parameter shapes do not cover the flat vector");
  return dir;
}

}  // namespace

LossSlice loss_slice_fn(const ValueFn& value_at, const std::vector<double>& theta0,
                        const std::vector<Shape>& param_shapes, int grid, double span,
                        uint64_t seed) {
  if (grid < 2) throw DomainError("loss_slice: need grid >= 2 per axis");
  if (!(span > 0.0)) throw DomainError("loss_slice: span must be positive");
  Rng rng(derive_seed(seed, SeedDomain::kDirections));
  const std::vector<double> d1 = filter_normalized_direction(theta0, param_shapes, rng);
  const std::vector<double> d2 = filter_normalized_direction(theta0, param_shapes, rng);

  LossSlice slice;
  // (2i - (grid-1)) hits exact zero at the midpoint of an odd grid
  for (int i = 0; i < grid; ++i)
    slice.a.push_back(span * static_cast<double>(2 * i - (grid - 1)) /
                      static_cast<double>(grid - 1));
  slice.b = slice.a;
  slice.loss.assign(static_cast<size_t>(grid), std::vector<double>(static_cast<size_t>(grid), 0.0));

  std::vector<double> theta(theta0.size());
  for (int i = 0; i < grid; ++i)
    for (int j = 0; j < grid; ++j) {
      for (size_t e = 0; e < theta.size(); ++e)
        theta[e] = theta0[e] + slice.a[static_cast<size_t>(i)] * d1[e] +
                   slice.b[static_cast<size_t>(j)] * d2[e];
      slice.loss[static_cast<size_t>(i)][static_cast<size_t>(j)] = value_at(theta);
    }
  slice.center = value_at(theta0);
  return slice;
}

LossSlice loss_slice(SplitModel& model, const Tensor& x, const std::vector<int>& labels, int grid,
                     double span, uint64_t seed) {
  const std::vector<double> theta0 = model.flat_parameters();
  std::vector<Shape> shapes;
  for (auto& p : model.parameters()) shapes.push_back(p.tensor.shape());

  ForwardMode mode;
  mode.training = false;
  Tensor x_fixed = x.detach();
  auto loss_at = [&](const std::vector<double>& theta) {
    model.set_flat_parameters(theta);
    return model.forward_monolithic(x_fixed, labels, mode).loss.item();
  };
  LossSlice slice = loss_slice_fn(loss_at, theta0, shapes, grid, span, seed);
  model.set_flat_parameters(theta0);
  return slice;
}

void write_slice_matrix(const LossSlice& slice, const std::string& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw DataError("loss_slice: cannot open '" + path + "' for writing");
  char buf[32];
  for (const auto& row : slice.loss) {
    for (size_t j = 0; j < row.size(); ++j) {
      std::snprintf(buf, sizeof(buf), "%.17g", row[j]);
      os << (j ? " " : "") << buf;
    }
    os << "\n";
  }
  if (!os) throw DataError("loss_slice: write failed for '" + path + "'");
}

}  // namespace afan
