#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "afan/dataset.hpp"
#include "afan/model.hpp"

namespace afan {

// Input-space PGD protocol.
struct AttackConfig {
  int steps = 20;
  double alpha = 2.0 / 255.0;
  double epsilon = 8.0 / 255.0;
  double clamp_lo = 0.0, clamp_hi = 1.0;
  void validate() const;
};

// Loss and gradient at a flat parameter vector; the substrate for all
// second-order estimates (central finite differences of gradients).
using GradFn = std::function<double(const std::vector<double>& theta, std::vector<double>* grad)>;

// Fixed-batch loss with BN in inference mode, so the loss is a pure function
// of the parameters. Restores the model's parameters after each call.
GradFn model_loss_gradfn(SplitModel& model, const Tensor& x, const std::vector<int>& labels);

double accuracy_on(SplitModel& model, const Dataset& data, const std::vector<int64_t>& idx,
                   int64_t batch = 256);
double standard_accuracy(SplitModel& model, const Dataset& data, Split split = Split::kTest);

// Iterated sign ascent on the inputs, projected onto the epsilon ball around
// x and clamped to the input range. ||x_adv - x||_inf <= epsilon.
Tensor pgd_input_attack(SplitModel& model, const Tensor& x, const std::vector<int>& labels,
                        const AttackConfig& attack);
double robust_accuracy(SplitModel& model, const Dataset& data, const AttackConfig& attack,
                       Split split = Split::kTest, int64_t batch = 256);

// Hv by central finite differences of gradients,
// h = 1e-4 * (1 + ||theta||_inf) / (||v||_inf + tiny).
std::vector<double> hvp(const GradFn& lossfn, const std::vector<double>& theta,
                        const std::vector<double>& v);

struct SpectralResult {
  double estimate = 0.0;  // |Rayleigh quotient| at the final iterate
  int iters = 0;
  double residual = 0.0;
  bool converged = false;
};
SpectralResult spectral_norm(const GradFn& lossfn, const std::vector<double>& theta, int max_iters,
                             double tol, uint64_t seed);

struct TraceResult {
  double estimate = 0.0;
  double std_error = 0.0;  // 0 when probes == 1
  int probes = 0;
};
TraceResult trace_hutchinson(const GradFn& lossfn, const std::vector<double>& theta, int probes,
                             uint64_t seed);

struct FlatnessReport {
  SpectralResult spectral;
  TraceResult trace;
};

// Loss over a 2-D parameter slice theta + a*d1 + b*d2; directions are random
// Gaussians renormalized per filter to the parameter norms (conv weights per
// output filter, dense weights per output column, vectors as a whole). The
// center cell is the unperturbed loss exactly. Non-finite cells are recorded,
// not fatal.
struct LossSlice {
  std::vector<double> a, b;               // grid coordinates
  std::vector<std::vector<double>> loss;  // loss[i][j] at (a[i], b[j])
  double center = 0.0;
};

using ValueFn = std::function<double(const std::vector<double>& theta)>;
LossSlice loss_slice_fn(const ValueFn& value_at, const std::vector<double>& theta0,
                        const std::vector<Shape>& param_shapes, int grid, double span,
                        uint64_t seed);
LossSlice loss_slice(SplitModel& model, const Tensor& x, const std::vector<int>& labels, int grid,
                     double span, uint64_t seed);

// Plain matrix file: one grid row per line, space-separated decimals.
void write_slice_matrix(const LossSlice& slice, const std::string& path);

}  // namespace afan
