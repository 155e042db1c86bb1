#include "afan/afan.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "afan/error.hpp"
#include "wire_io.hpp"

namespace afan {

namespace {

double sgn(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

}  // namespace

void PerturbConfig::validate() const {
  if (steps < 1) throw DomainError("PerturbConfig.steps: need >= 1, got " + std::to_string(steps));
  if (!(alpha_max > 0.0)) throw DomainError("PerturbConfig.alpha_max: must be positive");
  if (!(epsilon > 0.0)) throw DomainError("PerturbConfig.epsilon: must be positive");
  if (k < 1) throw DomainError("PerturbConfig.k: need >= 1, got " + std::to_string(k));
  if (lambda < 0.0) throw DomainError("PerturbConfig.lambda: must be >= 0");
}

std::vector<double> PerturbConfig::strengths(Rng* rng) const {
  validate();
  std::vector<double> out;
  out.reserve(static_cast<size_t>(k));
  if (schedule == Schedule::kGrid) {
    for (int i = 1; i <= k; ++i)
      out.push_back(static_cast<double>(i) * alpha_max / static_cast<double>(k));
  } else {
    if (!rng) throw DomainError("PerturbConfig: random-uniform schedule needs an RNG");
    for (int i = 0; i < k; ++i) out.push_back(alpha_max * (1.0 - rng->uniform()));  // (0, alpha_max]
    std::sort(out.begin(), out.end());
  }
  return out;
}

Tensor pgd_perturb(const HeadLossFn& head_loss, const Tensor& f_clean, double step_size, int steps,
                   double radius, std::vector<double>* loss_trace) {
  if (steps < 1) throw DomainError("pgd_perturb: steps must be >= 1, got " + std::to_string(steps));
  if (!(step_size > 0.0)) throw DomainError("pgd_perturb: step size must be positive");
  if (!(radius > 0.0)) throw DomainError("pgd_perturb: radius must be positive");

  const std::vector<double>& f0 = f_clean.values();
  std::vector<double> delta(f0.size(), 0.0);

  auto perturbed_loss = [&](bool with_grad) {
    std::vector<double> fp(f0.size());
    for (size_t i = 0; i < fp.size(); ++i) fp[i] = f0[i] + delta[i];
    Tensor f_pert = Tensor::from_values(f_clean.shape(), std::move(fp), with_grad);
    Tensor loss = head_loss(f_pert);
    if (loss.numel() != 1)
      throw DomainError("pgd_perturb: head loss must be scalar, got " + shape_str(loss.shape()));
    return std::make_pair(loss, f_pert);
  };

  for (int t = 0; t < steps; ++t) {
    auto [loss, f_pert] = perturbed_loss(true);
    if (loss_trace) loss_trace->push_back(loss.item());
    backward(loss);
    if (!f_pert.has_grad())
      throw DomainError("pgd_perturb: head loss does not depend on the features");
    const std::vector<double>& g = f_pert.grad();
    for (size_t i = 0; i < delta.size(); ++i) {
      if (!std::isfinite(g[i]))
        throw NumericError("pgd_perturb: non-finite feature gradient at iteration " +
                           std::to_string(t) + ", element " + std::to_string(i));
      delta[i] = std::clamp(delta[i] + step_size * sgn(g[i]), -radius, radius);
    }
  }
  if (loss_trace) loss_trace->push_back(perturbed_loss(false).first.item());
  return Tensor::from_values(f_clean.shape(), std::move(delta), false);
}

Tensor pgd_feature_perturb(SplitModel& model, const Tensor& x, const std::vector<int>& labels,
                           double step_size, int steps, double radius) {
  ForwardMode mode;  // batch statistics, no running update during the attack
  Tensor f_clean = model.forward_backbone(x, mode).detach();
  auto head = [&](const Tensor& f) { return model.forward_head(f, labels, mode).loss; };
  return pgd_perturb(head, f_clean, step_size, steps, radius);
}

FeatureStats compute_feature_stats(const Tensor& f) {
  ChannelStats st = channel_stats(f);
  return {st.mu, st.sigma};
}

Tensor normalize_mix(const Tensor& f_clean, const FeatureStats& stats_clean,
                     const FeatureStats& stats_adv) {
  for (const FeatureStats* st : {&stats_clean, &stats_adv})
    for (double s : st->sigma.values())
      if (!(s > 0.0)) throw DomainError("normalize_mix: non-positive sigma");
  Tensor xn = div_channel(sub_channel(f_clean, stats_clean.mu), stats_clean.sigma);
  Tensor dsigma = sub(stats_adv.sigma, stats_clean.sigma);
  Tensor dmu = sub(stats_adv.mu, stats_clean.mu);
  return add(f_clean, add_channel(mul_channel(xn, dsigma), dmu));
}

Tensor gaussian_noise_perturb(const Tensor& f_clean, double strength, Rng& rng) {
  if (strength < 0.0) throw DomainError("gaussian_noise_perturb: strength must be >= 0");
  std::vector<double> delta(f_clean.values().size());
  rng.fill_normal(delta, strength);
  return Tensor::from_values(f_clean.shape(), std::move(delta), false);
}

AugmentedSet build_spectrum_from_features(const PerturbConfig& cfg, const HeadLossFn& head_loss,
                                          const Tensor& f_clean, Rng* noise_rng) {
  cfg.validate();
  AugmentedSet set;
  set.f_clean = f_clean.detach();

  const std::vector<double> eps = cfg.strengths(noise_rng);
  std::vector<Tensor> deltas(eps.size());

  if (cfg.noise_mode == PerturbConfig::NoiseMode::kGaussian) {
    if (!noise_rng) throw DomainError("build_spectrum: gaussian noise mode needs an RNG");
    for (size_t i = 0; i < eps.size(); ++i)
      deltas[i] = gaussian_noise_perturb(set.f_clean, eps[i], *noise_rng);
  } else {
    const bool eligible = cfg.steps == 1 && eps.back() <= cfg.epsilon;
    if (cfg.interpolate && eligible) {
      // One PGD-1 run at the smallest strength; the others scale linearly.
      // delta_1 is step*sign(g), so delta_1/eps_1 recovers the sign vector
      // exactly and eps_i*sign matches an independent PGD-1 run bit for bit.
      Tensor delta1 = pgd_perturb(head_loss, set.f_clean, eps[0], 1, cfg.epsilon);
      const std::vector<double>& d1 = delta1.values();
      for (size_t i = 0; i < eps.size(); ++i) {
        if (i == 0) {
          deltas[i] = delta1;
          continue;
        }
        std::vector<double> di(d1.size());
        for (size_t e = 0; e < d1.size(); ++e) di[e] = eps[i] * (d1[e] / eps[0]);
        deltas[i] = Tensor::from_values(set.f_clean.shape(), std::move(di), false);
      }
      set.interpolated = true;
    } else {
      if (cfg.interpolate && !eligible)
        std::clog << "[afan] interpolation unavailable (steps=" << cfg.steps
                  << ", max strength=" << eps.back() << ", epsilon=" << cfg.epsilon
                  << "); falling back to independent PGD\n";
      for (size_t i = 0; i < eps.size(); ++i) {
        if (cfg.steps == 1) {
          deltas[i] = pgd_perturb(head_loss, set.f_clean, eps[i], 1, cfg.epsilon);
        } else {
          const double step = cfg.alpha_max / static_cast<double>(cfg.steps);
          deltas[i] = pgd_perturb(head_loss, set.f_clean, step, cfg.steps, eps[i]);
        }
      }
    }
  }

  FeatureStats stats_clean = compute_feature_stats(set.f_clean);
  for (size_t i = 0; i < eps.size(); ++i) {
    SpectrumEntry entry;
    entry.strength = eps[i];
    entry.delta = deltas[i];
    entry.f_adv = add(set.f_clean, deltas[i]).detach();
    FeatureStats stats_adv = compute_feature_stats(entry.f_adv);
    entry.f_mix = normalize_mix(set.f_clean, stats_clean, stats_adv).detach();
    set.entries.push_back(std::move(entry));
  }
  return set;
}

AugmentedSet build_spectrum(const PerturbConfig& cfg, SplitModel& model, const Tensor& x,
                            const std::vector<int>& labels, Rng* noise_rng) {
  ForwardMode mode;
  Tensor f_clean = model.forward_backbone(x, mode).detach();
  auto head = [&](const Tensor& f) { return model.forward_head(f, labels, mode).loss; };
  return build_spectrum_from_features(cfg, head, f_clean, noise_rng);
}

// --------------------------------------------------------------------------
// Feature dump export
// --------------------------------------------------------------------------

namespace {

void write_dump(const std::string& path, const Tensor& t, double strength) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("dump_features: cannot open '" + path + "'");
  os.write("AFDP", 4);
  wire::put_u32(os, 1);
  wire::put_u32(os, static_cast<uint32_t>(t.rank()));
  for (int a = 0; a < t.rank(); ++a) wire::put_u64(os, static_cast<uint64_t>(t.dim(a)));
  wire::put_f64(os, strength);
  wire::put_doubles(os, t.values());
  if (!os) throw DataError("dump_features: write failed for '" + path + "'");
}

}  // namespace

void dump_features(const AugmentedSet& set, const std::string& dir, const std::string& prefix) {
  std::filesystem::create_directories(dir);
  const std::string base = dir + "/" + prefix;
  write_dump(base + "_clean.bin", set.f_clean, 0.0);
  for (size_t i = 0; i < set.entries.size(); ++i) {
    const auto& e = set.entries[i];
    write_dump(base + "_adv_" + std::to_string(i + 1) + ".bin", e.f_adv, e.strength);
    write_dump(base + "_mix_" + std::to_string(i + 1) + ".bin", e.f_mix, e.strength);
  }
}

}  // namespace afan
