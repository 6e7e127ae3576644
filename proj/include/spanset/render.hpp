#ifndef SPANSET_RENDER_HPP
#define SPANSET_RENDER_HPP

#include <cstddef>
#include <string>
#include <vector>

#include "spanset/corpus.hpp"
#include "spanset/metrics.hpp"
#include "spanset/model.hpp"
#include "spanset/trainer.hpp"

namespace spanset {

/// Geometry of the span track: a span (s, e) occupies x in
/// [kTrackLeft + s * kTrackWidth, kTrackLeft + e * kTrackWidth].
inline constexpr double kTrackLeft = 120.0;
inline constexpr double kTrackWidth = 640.0;

/// Fill color used for query k.
std::string query_color(std::size_t k);

/// Ground-truth bars (outlined), every prediction as a filled bar colored by
/// its linked query, and the final decoder layer's proposal-video attention
/// as an N x (T + K) heat grid. `output` must carry recorded attention.
/// Bars carry data-kind ("target" or "prediction"), data-query and, for
/// predictions, data-rank within their query.
std::string render_sample_svg(const GroundingSample& sample, const ModelOutput& output);

/// CSV of the final decoder layer's attention: one row per proposal, columns
/// f0..f(T-1) then q0..q(K-1). Each row sums to 1.
std::string attention_csv(const GroundingSample& sample, const ModelOutput& output);

struct SlotPoint {
  std::size_t slot = 0;
  double center = 0.0;
  double width = 0.0;
};

/// (center, width) of every proposal slot over a corpus, inference mode.
std::vector<SlotPoint> collect_slot_points(GroundingModel& model, const Corpus& corpus, std::size_t batch_size = 32);
/// Scatter of predicted centers against widths, one color per slot.
std::string render_pred_dist_svg(const std::vector<SlotPoint>& points, std::size_t n_slots);

/// One panel per loss component, with the set-guidance cliff marked.
std::string render_curves_svg(const std::vector<CurveRow>& curve, const PhaseReport& phases);

}  // namespace spanset

#endif  // SPANSET_RENDER_HPP
