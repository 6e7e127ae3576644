#ifndef SPANSET_TRAINER_HPP
#define SPANSET_TRAINER_HPP

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "spanset/checkpoint.hpp"
#include "spanset/corpus.hpp"
#include "spanset/losses.hpp"
#include "spanset/model.hpp"

namespace spanset {

enum class LrSchedule { step, linear };

struct TrainConfig {
  double lr = 1e-4;
  double weight_decay = 1e-4;
  std::size_t batch_size = 16;
  std::size_t total_steps = 5000;
  /// Defaults to 70% of total_steps.
  std::optional<std::size_t> lr_drop_step;
  double lr_drop_factor = 0.1;
  /// `step` multiplies the rate by lr_drop_factor at lr_drop_step; `linear`
  /// ramps from lr down to lr * lr_drop_factor over the whole run.
  LrSchedule schedule = LrSchedule::step;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double grad_clip_norm = 0.1;
  std::uint64_t seed = 0;
  LossWeights weights;
  std::size_t max_nonfinite_steps = 10;

  std::size_t drop_step() const;
  double lr_at(std::size_t step) const;
  /// Throws std::invalid_argument.
  void validate() const;

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

std::string train_config_to_json(const TrainConfig& config);
/// Unknown keys raise DataError; missing keys keep their defaults.
TrainConfig train_config_from_json(const std::string& text);

struct AdamHyper {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::size_t t = 0;        // applied updates
  std::size_t skipped = 0;  // updates refused for non-finite gradients
};

/// One AdamW update with bias correction and decoupled weight decay:
///   p -= lr * m_hat / (sqrt(v_hat) + eps) + lr * weight_decay * p
/// Returns false (and counts a skip) without touching anything when a
/// gradient entry is non-finite. Throws DimensionError on shape mismatch.
bool adamw_step(std::vector<Tensor>& params, const std::vector<std::vector<double>>& grads, AdamState& state,
                const AdamHyper& hyper);

/// Global L2 norm over every gradient entry.
double global_norm(const std::vector<std::vector<double>>& grads);
/// Scales the gradients so the global norm is at most max_norm; returns the
/// norm before clipping.
double clip_global_norm(std::vector<std::vector<double>>& grads, double max_norm);

struct CurveRow {
  std::size_t step = 0;
  double lr = 0.0;
  double l1 = 0.0;
  double giou = 0.0;
  double set_guidance = 0.0;
  double total = 0.0;
  double grad_norm = 0.0;

  friend bool operator==(const CurveRow&, const CurveRow&) = default;
};

std::string curve_csv_header();
std::string curve_csv_row(const CurveRow& row);
std::string curve_to_csv(const std::vector<CurveRow>& curve);
/// Throws DataError on a malformed file.
std::vector<CurveRow> curve_from_csv(const std::string& text);

struct PhaseReport {
  std::size_t total_steps = 0;
  std::size_t window = 0;           // 5% of the steps
  std::size_t sg_drop_step = 0;     // center of the steepest set-guidance window
  double sg_drop_fraction = 0.0;    // relative decline over that window
  std::size_t rebound_window = 0;   // 2% of the steps
  bool span_rebound = false;        // l1 + giou rose somewhere near sg_drop_step
  double rebound_delta = 0.0;       // largest rise found
  std::size_t rebound_step = 0;     // start of the window with that rise
  std::size_t smoothing = 0;        // moving-average width applied first

  std::string to_json() const;
};

/// Locates the set-guidance cliff in a loss curve. The curves are first
/// smoothed with a centered moving average over 1% of the steps.
PhaseReport analyze_phases(const std::vector<CurveRow>& curve);

/// Deterministic shuffled batches, AdamW, clipping and the step-drop schedule.
/// Resuming from `checkpoint()` continues bit-exactly.
class Trainer {
 public:
  Trainer(GroundingModel& model, const Corpus& corpus, TrainConfig config);

  std::size_t step() const noexcept { return step_; }
  bool done() const noexcept { return step_ >= config_.total_steps; }
  const TrainConfig& config() const noexcept { return config_; }
  const std::vector<CurveRow>& curve() const noexcept { return curve_; }
  const AdamState& optimizer() const noexcept { return adam_; }

  /// Sample indices used at a given step.
  std::vector<std::size_t> batch_indices(std::size_t step) const;

  /// Throws DivergenceError after max_nonfinite_steps consecutive non-finite losses.
  const CurveRow& run_step();
  void run(const std::function<void(const Trainer&)>& after_step = {});

  /// Model parameters, optimizer moments, step counter and curve so far.
  Checkpoint checkpoint() const;
  /// Throws DataError when the checkpoint does not fit this model.
  void restore(const Checkpoint& ckpt);

 private:
  const std::vector<std::size_t>& epoch_order(std::size_t epoch) const;

  GroundingModel& model_;
  const Corpus& corpus_;
  TrainConfig config_;
  std::vector<Tensor> params_;
  AdamState adam_;
  std::size_t step_ = 0;
  std::size_t consecutive_nonfinite_ = 0;
  std::vector<CurveRow> curve_;
  mutable std::size_t cached_epoch_ = static_cast<std::size_t>(-1);
  mutable std::vector<std::size_t> cached_order_;
};

struct TrainResult {
  std::vector<CurveRow> curve;
  PhaseReport phases;
  std::size_t skipped_steps = 0;
};

TrainResult train(GroundingModel& model, const Corpus& corpus, const TrainConfig& config);

}  // namespace spanset

#endif  // SPANSET_TRAINER_HPP
