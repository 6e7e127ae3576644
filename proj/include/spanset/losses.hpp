#ifndef SPANSET_LOSSES_HPP
#define SPANSET_LOSSES_HPP

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "spanset/assignment.hpp"
#include "spanset/interval.hpp"
#include "spanset/model.hpp"
#include "spanset/tensor.hpp"

namespace spanset {

struct LossWeights {
  double lambda_l1 = 1.0;
  double lambda_iou = 3.0;
  double lambda_sg = 2.0;

  MatchWeights match() const noexcept { return {lambda_l1, lambda_iou}; }
  /// Throws std::invalid_argument on a negative or non-finite weight.
  void validate() const;

  friend bool operator==(const LossWeights&, const LossWeights&) = default;
};

/// Unweighted loss components of one decoder layer, plus its weighted total.
struct LayerLoss {
  double l1 = 0.0;            // sum of span L1 over matched predictions
  double giou = 0.0;          // sum of (1 - gIoU) over matched predictions
  double set_guidance = 0.0;  // mean NLL over all proposals
  double total = 0.0;         // lambda_sg * set_guidance + lambda_l1 * l1 + lambda_iou * giou
};

struct LossBreakdown : LayerLoss {
  /// Auxiliary decoder layers, in layer order.
  std::vector<LayerLoss> per_layer;
};

inline constexpr double kLogClamp = 1e-12;

/// Query each proposal is guided towards: proposal i of N belongs to query
/// floor(i * K / N).
std::vector<std::size_t> guidance_targets(std::size_t n_predictions, std::size_t n_queries);

/// Mean over proposals of -log p_i(target_i). Probabilities below 1e-12 are
/// clamped; `clamped` (when non-null) is incremented once per clamped entry.
Tensor set_guidance_loss(const Tensor& correspondence, std::span<const std::size_t> subset_targets,
                         std::size_t* clamped = nullptr);

struct SpanLossTerms {
  Tensor l1;     // sum of |s - ts| + |e - te|
  Tensor giou;   // sum of 1 - gIoU
  Tensor total;  // lambda_l1 * l1 + lambda_iou * giou
};

/// Span localization loss summed over paired predictions. `starts` and `ends`
/// are column tensors with one entry per target.
SpanLossTerms span_loss(const Tensor& starts, const Tensor& ends, std::span<const TimeSpan> targets,
                        const LossWeights& w);
Tensor span_loss(const Tensor& start, const Tensor& end, const TimeSpan& target, const LossWeights& w);

struct LayerSetLoss {
  Tensor loss;
  LayerLoss parts;
  Assignment assignment;
};

/// Match one layer's predictions to the targets and evaluate its set loss.
/// The matching is computed from plain values, so no gradient flows through it.
LayerSetLoss layer_set_loss(const LayerPrediction& pred, std::span<const Target> targets,
                            const LossWeights& w, std::size_t* clamped = nullptr);

struct SetLoss {
  /// Final layer plus every auxiliary layer with unit weight.
  Tensor loss;
  LossBreakdown breakdown;
  Assignment assignment;
  std::vector<Assignment> aux_assignments;
};

/// Throws DimensionError when there are more targets than predictions or the
/// correspondence width disagrees with the targets.
SetLoss final_set_loss(const ModelOutput& output, std::span<const Target> targets,
                       const LossWeights& w, std::size_t* clamped = nullptr);

}  // namespace spanset

#endif  // SPANSET_LOSSES_HPP
