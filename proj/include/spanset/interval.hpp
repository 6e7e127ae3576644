#ifndef SPANSET_INTERVAL_HPP
#define SPANSET_INTERVAL_HPP

#include <algorithm>
#include <cmath>
#include <ostream>
#include <stdexcept>
#include <string>

namespace spanset {

/// Normalized interval [s, e] on the unit time axis, 0 <= s <= e <= 1.
///
/// Zero-length spans are legal. Every geometry function below accepts them;
/// ratios whose denominator vanishes are defined as 0.
class TimeSpan {
 public:
  TimeSpan() = default;

  TimeSpan(double s, double e) : s_(s), e_(e) {
    if (!(s >= 0.0 && e <= 1.0 && s <= e)) {
      throw std::invalid_argument("TimeSpan requires 0 <= s <= e <= 1, got (" +
                                  std::to_string(s) + ", " + std::to_string(e) + ")");
    }
  }

  double s() const noexcept { return s_; }
  double e() const noexcept { return e_; }
  double length() const noexcept { return e_ - s_; }
  double center() const noexcept { return 0.5 * (s_ + e_); }

  friend bool operator==(const TimeSpan&, const TimeSpan&) = default;

 private:
  double s_ = 0.0;
  double e_ = 0.0;
};

inline std::ostream& operator<<(std::ostream& os, const TimeSpan& t) {
  return os << '(' << t.s() << ", " << t.e() << ')';
}

inline double intersection_len(const TimeSpan& a, const TimeSpan& b) noexcept {
  return std::max(0.0, std::min(a.e(), b.e()) - std::max(a.s(), b.s()));
}

inline double union_len(const TimeSpan& a, const TimeSpan& b) noexcept {
  return a.length() + b.length() - intersection_len(a, b);
}

/// Tightest span containing both arguments.
inline TimeSpan hull(const TimeSpan& a, const TimeSpan& b) {
  return TimeSpan(std::min(a.s(), b.s()), std::max(a.e(), b.e()));
}

inline double iou(const TimeSpan& a, const TimeSpan& b) noexcept {
  const double u = union_len(a, b);
  return u > 0.0 ? intersection_len(a, b) / u : 0.0;
}

/// IoU minus the fraction of the hull covered by neither span. In [-1, 1].
inline double giou(const TimeSpan& a, const TimeSpan& b) noexcept {
  const double h = std::max(a.e(), b.e()) - std::min(a.s(), b.s());
  if (h <= 0.0) return 0.0;
  // The hull never falls short of the union; rounding alone can make it so.
  const double uncovered = std::max(0.0, h - union_len(a, b));
  return iou(a, b) - uncovered / h;
}

inline double span_l1(const TimeSpan& a, const TimeSpan& b) noexcept {
  return std::abs(a.s() - b.s()) + std::abs(a.e() - b.e());
}

}  // namespace spanset

#endif  // SPANSET_INTERVAL_HPP
