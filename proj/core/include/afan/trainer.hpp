#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "afan/afan.hpp"
#include "afan/dataset.hpp"
#include "afan/model.hpp"

namespace afan {

struct LrSchedule {
  double lr0 = 0.1;
  int64_t warmup_iters = 200;       // linear ramp 0 -> lr0; iteration 0 maps to 0
  std::vector<int64_t> milestones;  // iterations at which lr multiplies by decay
  double decay = 0.1;
};

double lr_at(int64_t iteration, const LrSchedule& s);

struct TrainConfig {
  int64_t epochs = 20;
  int64_t batch_size = 32;  // >= 2, feature statistics need it
  double lr0 = 0.1;
  std::vector<int64_t> milestone_epochs;
  double decay_factor = 0.1;
  int64_t warmup_iters = 200;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  uint64_t seed = 1;
  double val_fraction = 0.1;  // carved from the train split, seed-controlled
  PerturbConfig perturb;
  bool afa_on = true;
  bool afn_on = true;  // off: adversarial losses evaluated on f_adv directly

  void validate() const;
};

struct RunRecord {
  int64_t iteration = 0;
  double l_clean = 0.0;
  std::vector<double> l_adv;  // one per strength
  double total = 0.0;         // l_clean + lambda * sum(l_adv)
  double train_accuracy = 0.0;
  double wall_time_s = 0.0;  // in-memory diagnostics; not part of persisted metrics
};

struct SgdState {
  std::vector<std::vector<double>> velocity;  // per parameter tensor
};

// v <- momentum*v + grad + weight_decay*param; param <- param - lr*v
void sgd_step(std::vector<NamedParam>& params, SgdState& state, double lr, double momentum,
              double weight_decay);

struct LossParts {
  Tensor total;      // graph tensor, ready for backward()
  RunRecord record;  // recorded values (wall time unset)
};

// One evaluation of the combined objective: clean forward (running stats
// updated here only), spectrum build, per-strength mixing and head losses,
// weighted sum. afa_on=false reduces to the clean loss; afn_on=false skips
// the mixing and feeds f_adv to the head.
LossParts afan_loss(SplitModel& model, const Tensor& x, const std::vector<int>& labels,
                    const TrainConfig& cfg, Rng* noise_rng = nullptr);

// Same objective with externally fixed perturbations; finite-difference and
// substitution tests freeze deltas through this entry point.
LossParts afan_loss_with_deltas(SplitModel& model, const Tensor& x, const std::vector<int>& labels,
                                const TrainConfig& cfg, const std::vector<Tensor>& deltas);

using MetricsSink = std::function<void(const RunRecord&)>;
using EpochSink = std::function<void(int64_t epoch, int64_t iteration, double val_accuracy)>;

struct TrainResult {
  std::vector<RunRecord> records;
  double best_val_accuracy = 0.0;
  int64_t best_iteration = -1;
  StateDict best_state;  // early-stopping checkpoint (best validation accuracy)
  StateDict final_state;
  int64_t iterations = 0;
};

TrainResult train(SplitModel& model, const Dataset& data, const TrainConfig& cfg,
                  const MetricsSink& on_record = {}, const EpochSink& on_epoch = {});

}  // namespace afan
