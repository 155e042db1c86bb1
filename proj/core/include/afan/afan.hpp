#pragma once

#include <functional>
#include <string>
#include <vector>

#include "afan/model.hpp"
#include "afan/rng.hpp"
#include "afan/tensor.hpp"

namespace afan {

// Hyperparameters for adversarial feature augmentation across a spectrum of
// perturbation strengths.
//
// Strength semantics: for steps=1 the strength is the PGD step size and
// epsilon bounds the projection; for steps>1 the step size is alpha_max/steps
// and the strength sets the projection radius.
struct PerturbConfig {
  int steps = 1;                   // PGD iterations
  double alpha_max = 0.5 / 255.0;  // strength interval bound, feature units
  double epsilon = 8.0 / 255.0;    // infinity-ball projection radius
  int k = 3;                       // number of strengths
  enum class Schedule { kGrid, kRandomUniform };
  Schedule schedule = Schedule::kGrid;
  double lambda = 1.0;  // adversarial loss weight
  enum class NoiseMode { kAdversarial, kGaussian };
  NoiseMode noise_mode = NoiseMode::kAdversarial;
  bool interpolate = true;  // derive all strengths from one PGD-1 run when eligible

  void validate() const;
  // Grid: i*alpha_max/k for i = 1..k, strictly increasing, zero excluded.
  // Random-uniform: k draws from (0, alpha_max], sorted ascending.
  std::vector<double> strengths(Rng* rng = nullptr) const;
};

// Per-channel first/second moments; sigma carries the kVarianceFloor.
struct FeatureStats {
  Tensor mu;
  Tensor sigma;
};

struct SpectrumEntry {
  double strength;
  Tensor delta;  // detached perturbation
  Tensor f_adv;  // f_clean + delta
  Tensor f_mix;  // clean features carrying adversarial moments
};

// One clean feature batch plus its augmented spectrum. All tensors here are
// detached values; the training loss rebuilds the differentiable versions.
struct AugmentedSet {
  Tensor f_clean;
  std::vector<SpectrumEntry> entries;
  bool interpolated = false;  // deltas scaled from a single PGD-1 run
};

using HeadLossFn = std::function<Tensor(const Tensor& features)>;

// Projected sign-gradient ascent from a zero-initialized delta:
//   delta <- clamp(delta + step_size * sign(grad_f L(f_clean + delta)), +-radius)
// run `steps` times. The result carries no graph. loss_trace, when non-null,
// receives L(f_clean + delta_t) for t = 0..steps.
Tensor pgd_perturb(const HeadLossFn& head_loss, const Tensor& f_clean, double step_size, int steps,
                   double radius, std::vector<double>* loss_trace = nullptr);

// Convenience wrapper computing f_clean = model.forward_backbone(x).
Tensor pgd_feature_perturb(SplitModel& model, const Tensor& x, const std::vector<int>& labels,
                           double step_size, int steps, double radius);

FeatureStats compute_feature_stats(const Tensor& f);

// Eq-style mixing: f_mix = sigma_adv*(f_clean - mu_clean)/sigma_clean + mu_adv,
// computed in the algebraically identical delta form
//   f_clean + (sigma_adv - sigma_clean)*xn + (mu_adv - mu_clean),
//   xn = (f_clean - mu_clean)/sigma_clean,
// so equal stats return f_clean exactly. Differentiable in every input.
Tensor normalize_mix(const Tensor& f_clean, const FeatureStats& stats_clean,
                     const FeatureStats& stats_adv);

// delta ~ N(0, strength^2) i.i.d. per element (ablation baseline).
Tensor gaussian_noise_perturb(const Tensor& f_clean, double strength, Rng& rng);

AugmentedSet build_spectrum(const PerturbConfig& cfg, SplitModel& model, const Tensor& x,
                            const std::vector<int>& labels, Rng* noise_rng = nullptr);
AugmentedSet build_spectrum_from_features(const PerturbConfig& cfg, const HeadLossFn& head_loss,
                                          const Tensor& f_clean, Rng* noise_rng = nullptr);

// One flat 64-bit array file per branch and strength under dir:
//   <prefix>_clean.bin, <prefix>_adv_<i>.bin, <prefix>_mix_<i>.bin
// Header: magic "AFDP", u32 version, u32 rank, u64 dims[rank], f64 strength.
void dump_features(const AugmentedSet& set, const std::string& dir, const std::string& prefix);

}  // namespace afan
