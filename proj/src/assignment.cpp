#include "spanset/assignment.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "spanset/error.hpp"

namespace spanset {

CostMatrix::CostMatrix(std::size_t rows, std::size_t cols, std::vector<double> values)
    : rows_(rows), cols_(cols), values_(std::move(values)) {
  if (values_.size() != rows_ * cols_) {
    throw DimensionError("CostMatrix: " + std::to_string(values_.size()) + " values for a " +
                         std::to_string(rows_) + "x" + std::to_string(cols_) + " matrix");
  }
}

CostMatrix::CostMatrix(std::initializer_list<std::initializer_list<double>> rows) {
  rows_ = rows.size();
  cols_ = rows_ ? rows.begin()->size() : 0;
  for (const auto& r : rows) {
    if (r.size() != cols_) throw DimensionError("CostMatrix: ragged initializer");
    values_.insert(values_.end(), r.begin(), r.end());
  }
}

std::vector<std::size_t> Assignment::prediction_for_target() const {
  std::vector<std::size_t> out(pairs.size());
  for (const auto& [t, p] : pairs) out[t] = p;
  return out;
}

double assignment_cost(const CostMatrix& m,
                       std::span<const std::pair<std::size_t, std::size_t>> pairs) {
  double total = 0.0;
  for (const auto& [i, j] : pairs) total += m(i, j);
  return total;
}

CostMatrix build_cost_matrix(std::span<const Target> targets, std::span<const TimeSpan> predictions,
                             std::span<const double> correspondence, std::size_t n_queries,
                             MatchWeights weights) {
  const std::size_t k = targets.size();
  const std::size_t n = predictions.size();
  if (correspondence.size() != n * n_queries) {
    throw DimensionError("build_cost_matrix: correspondence has " +
                         std::to_string(correspondence.size()) + " entries, expected " +
                         std::to_string(n) + "x" + std::to_string(n_queries));
  }
  CostMatrix m(k, n);
  for (std::size_t i = 0; i < k; ++i) {
    const Target& t = targets[i];
    if (t.query >= n_queries) {
      throw DimensionError("build_cost_matrix: target query index " + std::to_string(t.query) +
                           " out of range for " + std::to_string(n_queries) + " queries");
    }
    for (std::size_t j = 0; j < n; ++j) {
      const double p = correspondence[j * n_queries + t.query];
      m(i, j) = -p + weights.lambda_l1 * span_l1(t.span, predictions[j]) +
                weights.lambda_iou * (1.0 - giou(t.span, predictions[j]));
    }
  }
  return m;
}

namespace {

void check_solvable(const CostMatrix& m, const char* who) {
  if (m.rows() > m.cols()) {
    throw DimensionError(std::string(who) + ": " + std::to_string(m.rows()) +
                         " targets exceed " + std::to_string(m.cols()) + " predictions");
  }
  for (double v : m.values()) {
    if (!std::isfinite(v)) throw DimensionError(std::string(who) + ": non-finite cost");
  }
}

// Shortest augmenting path with row/column potentials, O(rows^2 * cols).
// Operates on the sub-matrix selected by `rows` and `cols`; returns the chosen
// column (an index into `cols`) for each selected row.
std::vector<std::size_t> solve_rectangular(const CostMatrix& m, std::span<const std::size_t> rows,
                                           std::span<const std::size_t> cols) {
  const std::size_t n = rows.size();
  const std::size_t w = cols.size();
  constexpr double kInf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(w + 1, 0.0);
  std::vector<std::size_t> owner(w + 1, 0), way(w + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    owner[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(w + 1, kInf);
    std::vector<char> used(w + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = owner[j0];
      double delta = kInf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= w; ++j) {
        if (used[j]) continue;
        const double cur = m(rows[i0 - 1], cols[j - 1]) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= w; ++j) {
        if (used[j]) {
          u[owner[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (owner[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      owner[j0] = owner[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<std::size_t> choice(n, 0);
  for (std::size_t j = 1; j <= w; ++j) {
    if (owner[j] != 0) choice[owner[j] - 1] = j - 1;
  }
  return choice;
}

double optimal_value(const CostMatrix& m, std::span<const std::size_t> rows,
                     std::span<const std::size_t> cols) {
  if (rows.empty()) return 0.0;
  const auto choice = solve_rectangular(m, rows, cols);
  double total = 0.0;
  for (std::size_t r = 0; r < rows.size(); ++r) total += m(rows[r], cols[choice[r]]);
  return total;
}

}  // namespace

Assignment hungarian(const CostMatrix& m) {
  check_solvable(m, "hungarian");
  const std::size_t k = m.rows();
  const std::size_t n = m.cols();
  Assignment out;
  if (k == 0) return out;

  std::vector<std::size_t> all_rows(k), all_cols(n);
  for (std::size_t i = 0; i < k; ++i) all_rows[i] = i;
  for (std::size_t j = 0; j < n; ++j) all_cols[j] = j;
  const double best = optimal_value(m, all_rows, all_cols);

  double scale = 1.0;
  for (std::size_t i = 0; i < k; ++i) {
    double row_max = 0.0;
    for (std::size_t j = 0; j < n; ++j) row_max = std::max(row_max, std::abs(m(i, j)));
    scale += row_max;
  }
  const double tol = 1e-10 * scale;

  // Fix rows in order, each to the smallest column that still admits an
  // optimal completion. This yields the lexicographically smallest optimum.
  std::vector<char> taken(n, 0);
  double fixed = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    std::vector<std::size_t> rest_rows;
    for (std::size_t r = i + 1; r < k; ++r) rest_rows.push_back(r);
    bool placed = false;
    for (std::size_t j = 0; j < n && !placed; ++j) {
      if (taken[j]) continue;
      std::vector<std::size_t> rest_cols;
      for (std::size_t c = 0; c < n; ++c) {
        if (!taken[c] && c != j) rest_cols.push_back(c);
      }
      const double completion = optimal_value(m, rest_rows, rest_cols);
      if (fixed + m(i, j) + completion <= best + tol) {
        taken[j] = 1;
        fixed += m(i, j);
        out.pairs.emplace_back(i, j);
        placed = true;
      }
    }
    if (!placed) {
      // Unreachable for finite input: the optimal completion always qualifies.
      throw std::logic_error("hungarian: failed to reconstruct an optimal assignment");
    }
  }
  out.total_cost = assignment_cost(m, out.pairs);
  return out;
}

Assignment brute_force_assign(const CostMatrix& m) {
  check_solvable(m, "brute_force_assign");
  if (m.cols() > 9) throw DimensionError("brute_force_assign: more than 9 predictions");
  const std::size_t k = m.rows();
  const std::size_t n = m.cols();
  Assignment best;
  best.total_cost = std::numeric_limits<double>::infinity();
  if (k == 0) {
    best.total_cost = 0.0;
    return best;
  }
  std::vector<std::pair<std::size_t, std::size_t>> current;
  std::vector<char> used(n, 0);
  // Depth-first in lexicographic order; only strictly better sums replace the
  // incumbent, so the first optimum found is the lexicographically smallest.
  auto recurse = [&](auto&& self, std::size_t row) -> void {
    if (row == k) {
      const double cost = assignment_cost(m, current);
      if (cost < best.total_cost) {
        best.total_cost = cost;
        best.pairs = current;
      }
      return;
    }
    for (std::size_t j = 0; j < n; ++j) {
      if (used[j]) continue;
      used[j] = 1;
      current.emplace_back(row, j);
      self(self, row + 1);
      current.pop_back();
      used[j] = 0;
    }
  };
  recurse(recurse, 0);
  return best;
}

}  // namespace spanset
