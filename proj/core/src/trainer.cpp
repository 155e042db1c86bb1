#include "afan/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include "afan/error.hpp"
#include "afan/eval.hpp"
#include "afan/rng.hpp"

namespace afan {

double lr_at(int64_t iteration, const LrSchedule& s) {
  if (iteration < 0) throw DomainError("lr_at: negative iteration");
  if (s.warmup_iters > 0 && iteration < s.warmup_iters)
    return s.lr0 * static_cast<double>(iteration) / static_cast<double>(s.warmup_iters);
  double lr = s.lr0;
  for (int64_t ms : s.milestones)
    if (iteration >= ms) lr *= s.decay;
  return lr;
}

void TrainConfig::validate() const {
  if (epochs < 1) throw DomainError("TrainConfig.epochs: need >= 1");
  if (batch_size < 2) throw DomainError("TrainConfig.batch_size: need >= 2 for feature statistics");
  if (!(lr0 > 0.0)) throw DomainError("TrainConfig.lr0: must be positive");
  if (warmup_iters < 0) throw DomainError("TrainConfig.warmup_iters: must be >= 0");
  if (!(decay_factor > 0.0) || decay_factor > 1.0)
    throw DomainError("TrainConfig.decay_factor: must be in (0,1]");
  if (momentum < 0.0 || momentum >= 1.0) throw DomainError("TrainConfig.momentum: must be in [0,1)");
  if (weight_decay < 0.0) throw DomainError("TrainConfig.weight_decay: must be >= 0");
  if (val_fraction < 0.0 || val_fraction > 0.5)
    throw DomainError("TrainConfig.val_fraction: must be in [0,0.5]");
  perturb.validate();
}

void sgd_step(std::vector<NamedParam>& params, SgdState& state, double lr, double momentum,
              double weight_decay) {
  if (state.velocity.empty()) {
    state.velocity.resize(params.size());
    for (size_t i = 0; i < params.size(); ++i)
      state.velocity[i].assign(params[i].tensor.values().size(), 0.0);
  }
  if (state.velocity.size() != params.size())
    throw ShapeError("sgd_step: velocity count " + std::to_string(state.velocity.size()) +
                     " does not match parameter count " + std::to_string(params.size()));
  for (size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i].tensor.values();
    auto& v = state.velocity[i];
    if (v.size() != p.size())
      throw ShapeError("sgd_step: velocity shape mismatch for '" + params[i].name + "'");
    const bool has_grad = params[i].tensor.has_grad();
    const std::vector<double>* g = has_grad ? &params[i].tensor.grad() : nullptr;
    for (size_t e = 0; e < p.size(); ++e) {
      const double ge = g ? (*g)[e] : 0.0;
      v[e] = momentum * v[e] + ge + weight_decay * p[e];
      p[e] -= lr * v[e];
    }
  }
}

// --------------------------------------------------------------------------
// Combined objective
// --------------------------------------------------------------------------

namespace {

LossParts assemble_objective(SplitModel& model, const Tensor& f_clean_graph, HeadOutput clean,
                             const std::vector<int>& labels, const TrainConfig& cfg,
                             const std::vector<Tensor>& deltas) {
  LossParts out;
  out.record.l_clean = clean.loss.item();
  const auto pred = argmax_rows(clean.logits);
  int64_t hits = 0;
  for (size_t i = 0; i < labels.size(); ++i)
    if (pred[i] == labels[i]) ++hits;
  out.record.train_accuracy = static_cast<double>(hits) / static_cast<double>(labels.size());

  Tensor total = clean.loss;
  if (cfg.afa_on && !deltas.empty()) {
    ForwardMode branch_mode;  // batch stats, no running update
    FeatureStats stats_clean;
    if (cfg.afn_on) stats_clean = compute_feature_stats(f_clean_graph);
    Tensor adv_sum;
    for (const Tensor& delta : deltas) {
      Tensor f_adv = add(f_clean_graph, delta);
      Tensor f_in = cfg.afn_on
                        ? normalize_mix(f_clean_graph, stats_clean, compute_feature_stats(f_adv))
                        : f_adv;
      Tensor l_adv = model.forward_head(f_in, labels, branch_mode).loss;
      out.record.l_adv.push_back(l_adv.item());
      adv_sum = adv_sum.defined() ? add(adv_sum, l_adv) : l_adv;
    }
    total = add(clean.loss, scale(adv_sum, cfg.perturb.lambda));
  }
  out.record.total = total.item();
  out.total = total;
  return out;
}

}  // namespace

LossParts afan_loss_with_deltas(SplitModel& model, const Tensor& x, const std::vector<int>& labels,
                                const TrainConfig& cfg, const std::vector<Tensor>& deltas) {
  cfg.validate();
  ForwardMode clean_mode;
  clean_mode.update_running = true;  // running statistics move on the clean pass only
  Tensor f_clean = model.forward_backbone(x, clean_mode);
  HeadOutput clean = model.forward_head(f_clean, labels, clean_mode);
  return assemble_objective(model, f_clean, clean, labels, cfg, deltas);
}

LossParts afan_loss(SplitModel& model, const Tensor& x, const std::vector<int>& labels,
                    const TrainConfig& cfg, Rng* noise_rng) {
  cfg.validate();
  ForwardMode clean_mode;
  clean_mode.update_running = true;
  Tensor f_clean = model.forward_backbone(x, clean_mode);
  HeadOutput clean = model.forward_head(f_clean, labels, clean_mode);

  std::vector<Tensor> deltas;
  if (cfg.afa_on) {
    ForwardMode attack_mode;  // no running update inside the attack
    auto head = [&](const Tensor& f) { return model.forward_head(f, labels, attack_mode).loss; };
    AugmentedSet set = build_spectrum_from_features(cfg.perturb, head, f_clean, noise_rng);
    deltas.reserve(set.entries.size());
    for (auto& e : set.entries) deltas.push_back(e.delta);
  }
  return assemble_objective(model, f_clean, clean, labels, cfg, deltas);
}

// --------------------------------------------------------------------------
// Training loop
// --------------------------------------------------------------------------

TrainResult train(SplitModel& model, const Dataset& data, const TrainConfig& cfg,
                  const MetricsSink& on_record, const EpochSink& on_epoch) {
  cfg.validate();
  data.validate();
  std::vector<int64_t> pool = data.indices_of(Split::kTrain);
  if (pool.empty()) throw DomainError("train: dataset has no training samples");

  // Seed-controlled validation carve-out from the training pool.
  Rng split_rng(derive_seed(cfg.seed, SeedDomain::kSplit));
  split_rng.shuffle(pool);
  const auto n_val = static_cast<int64_t>(
      std::llround(cfg.val_fraction * static_cast<double>(pool.size())));
  std::vector<int64_t> val_idx(pool.begin(), pool.begin() + n_val);
  std::vector<int64_t> train_idx(pool.begin() + n_val, pool.end());
  if (static_cast<int64_t>(train_idx.size()) < 2)
    throw DomainError("train: fewer than 2 training samples after the validation split");

  Rng shuffle_rng(derive_seed(cfg.seed, SeedDomain::kShuffle));
  Rng noise_rng(derive_seed(cfg.seed, SeedDomain::kNoise));

  const auto iters_per_epoch = std::max<int64_t>(
      1, static_cast<int64_t>(train_idx.size()) / cfg.batch_size +
             ((static_cast<int64_t>(train_idx.size()) % cfg.batch_size) >= 2 ? 1 : 0));
  LrSchedule schedule;
  schedule.lr0 = cfg.lr0;
  schedule.warmup_iters = cfg.warmup_iters;
  schedule.decay = cfg.decay_factor;
  for (int64_t e : cfg.milestone_epochs) schedule.milestones.push_back(e * iters_per_epoch);

  SgdState sgd;
  TrainResult result;
  int64_t iteration = 0;

  for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle_rng.shuffle(train_idx);
    for (size_t start = 0; start < train_idx.size(); start += static_cast<size_t>(cfg.batch_size)) {
      const size_t end = std::min(train_idx.size(), start + static_cast<size_t>(cfg.batch_size));
      if (end - start < 2) break;  // feature statistics need at least two samples
      std::vector<int64_t> batch(train_idx.begin() + static_cast<long>(start),
                                 train_idx.begin() + static_cast<long>(end));
      const auto t0 = std::chrono::steady_clock::now();
      Tensor x = gather_inputs(data, batch);
      const std::vector<int> y = gather_labels(data, batch);
      LossParts parts;
      try {
        parts = afan_loss(model, x, y, cfg, &noise_rng);
      } catch (const NumericError& e) {
        throw NumericError(std::string(e.what()) + "; training aborted at iteration " +
                           std::to_string(iteration) + " (last good iteration " +
                           std::to_string(iteration - 1) + ")");
      }
      if (!std::isfinite(parts.record.total))
        throw NumericError("train: non-finite loss at iteration " + std::to_string(iteration) +
                           " (last good iteration " + std::to_string(iteration - 1) + ")");
      backward(parts.total);
      auto params = model.parameters();
      sgd_step(params, sgd, lr_at(iteration, schedule), cfg.momentum, cfg.weight_decay);
      parts.record.iteration = iteration;
      parts.record.wall_time_s =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      if (on_record) on_record(parts.record);
      result.records.push_back(std::move(parts.record));
      ++iteration;
    }

    if (!val_idx.empty()) {
      const double val_acc = accuracy_on(model, data, val_idx);
      if (on_epoch) on_epoch(epoch, iteration, val_acc);
      if (result.best_iteration < 0 || val_acc > result.best_val_accuracy) {
        result.best_val_accuracy = val_acc;
        result.best_iteration = iteration;
        result.best_state = model.state();
      }
    } else if (on_epoch) {
      on_epoch(epoch, iteration, -1.0);
    }
  }

  result.final_state = model.state();
  if (result.best_iteration < 0) result.best_state = result.final_state;
  result.iterations = iteration;
  return result;
}

}  // namespace afan
