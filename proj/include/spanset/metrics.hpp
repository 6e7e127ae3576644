#ifndef SPANSET_METRICS_HPP
#define SPANSET_METRICS_HPP

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "spanset/assignment.hpp"
#include "spanset/interval.hpp"

namespace spanset {

struct ModelOutput;
class GroundingModel;
struct GroundingSample;

struct ScoredSpan {
  TimeSpan span;
  double score = 0.0;
  std::size_t prediction = 0;  // row in the model output

  friend bool operator==(const ScoredSpan&, const ScoredSpan&) = default;
};

/// Per query, the predictions linked to it, best first.
using RankedPredictions = std::vector<std::vector<ScoredSpan>>;

/// Links every prediction to its most similar query (ties to the lowest
/// index) and sorts each query's list by descending score, ties by
/// prediction index.
RankedPredictions link_predictions(std::span<const TimeSpan> spans, std::span<const double> correspondence,
                                   std::size_t n_queries);
RankedPredictions link_predictions(const ModelOutput& output);

/// Fraction of query instances with a top-alpha linked span whose IoU with the
/// target is strictly above mu. Unlinked queries count as misses.
double recall_at(const RankedPredictions& ranked, std::span<const Target> targets, std::size_t alpha, double mu);
/// Mean IoU of the top-1 linked span per query; unlinked queries add 0.
double mean_iou(const RankedPredictions& ranked, std::span<const Target> targets);

/// Running totals so many samples reduce to one report.
class MetricAccumulator {
 public:
  void add(const RankedPredictions& ranked, std::span<const Target> targets);

  std::size_t n_samples() const noexcept { return samples_; }
  std::size_t n_queries() const noexcept { return queries_; }

 private:
  friend struct MetricReport;
  std::size_t samples_ = 0;
  std::size_t queries_ = 0;
  std::size_t hits_[2][2] = {{0, 0}, {0, 0}};  // [alpha 1,5][mu 0.5,0.7]
  double iou_sum_ = 0.0;
};

struct MetricReport {
  inline static constexpr std::size_t kAlphas[2] = {1, 5};
  inline static constexpr double kMus[2] = {0.5, 0.7};

  double recall[2][2] = {{0.0, 0.0}, {0.0, 0.0}};  // [alpha][mu]
  double miou = 0.0;
  std::size_t n_samples = 0;
  std::size_t n_queries = 0;

  static MetricReport from(const MetricAccumulator& acc);

  double r1_05() const noexcept { return recall[0][0]; }
  double r1_07() const noexcept { return recall[0][1]; }
  double r5_05() const noexcept { return recall[1][0]; }
  double r5_07() const noexcept { return recall[1][1]; }

  /// Header plus one row: R1@0.5,R1@0.7,R5@0.5,R5@0.7,mIoU,n_samples,n_queries.
  std::string to_csv() const;
  /// Fixed-width table in percent, columns as in the usual grounding tables.
  std::string to_table(const std::string& label = "spanset") const;
};

/// Runs the model in inference mode on every sample (in batches of
/// `batch_size`) and reduces the metrics. Throws DataError on an empty corpus.
MetricReport evaluate(GroundingModel& model, std::span<const GroundingSample> corpus, std::size_t batch_size = 32);

}  // namespace spanset

#endif  // SPANSET_METRICS_HPP
