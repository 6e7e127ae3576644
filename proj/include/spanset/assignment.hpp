#ifndef SPANSET_ASSIGNMENT_HPP
#define SPANSET_ASSIGNMENT_HPP

#include <cstddef>
#include <span>
#include <utility>
#include <vector>

#include "spanset/interval.hpp"

namespace spanset {

/// Dense K x N matrix of matching costs. Row i is ground-truth target i,
/// column j is prediction j.
class CostMatrix {
 public:
  CostMatrix() = default;
  CostMatrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), values_(rows * cols, fill) {}
  /// Throws DimensionError unless values.size() == rows * cols.
  CostMatrix(std::size_t rows, std::size_t cols, std::vector<double> values);
  /// Row-major nested initializer, convenient in tests.
  CostMatrix(std::initializer_list<std::initializer_list<double>> rows);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  double operator()(std::size_t i, std::size_t j) const { return values_[i * cols_ + j]; }
  double& operator()(std::size_t i, std::size_t j) { return values_[i * cols_ + j]; }
  std::span<const double> values() const noexcept { return values_; }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> values_;
};

/// Injective map from targets to predictions.
struct Assignment {
  /// (target_index, prediction_index), sorted by target index.
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  /// Sum of the chosen entries, accumulated in target order.
  double total_cost = 0.0;

  /// Prediction matched to each target, indexed by target.
  std::vector<std::size_t> prediction_for_target() const;
};

/// A ground-truth span together with the query it belongs to.
struct Target {
  TimeSpan span;
  std::size_t query = 0;

  friend bool operator==(const Target&, const Target&) = default;
};

struct MatchWeights {
  double lambda_l1 = 1.0;
  double lambda_iou = 3.0;
};

/// entry(i, j) = -p_j(q_i) + lambda_l1 * L1(t_i, t_j) + lambda_iou * (1 - giou(t_i, t_j)).
///
/// `correspondence` is N x K row-major. Throws DimensionError when the
/// prediction count or a query index disagrees with it.
CostMatrix build_cost_matrix(std::span<const Target> targets, std::span<const TimeSpan> predictions,
                             std::span<const double> correspondence, std::size_t n_queries,
                             MatchWeights weights);

/// Globally optimal assignment of the K rows to distinct columns (K <= N).
/// Among optimal assignments, the lexicographically smallest pair list wins.
Assignment hungarian(const CostMatrix& m);

/// Exhaustive reference solver with the same tie-break. Requires N <= 9.
Assignment brute_force_assign(const CostMatrix& m);

/// Sum of m at the given pairs, in the order given.
double assignment_cost(const CostMatrix& m, std::span<const std::pair<std::size_t, std::size_t>> pairs);

}  // namespace spanset

#endif  // SPANSET_ASSIGNMENT_HPP
