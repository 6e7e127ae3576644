#include "spanset/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>

#include "spanset/corpus.hpp"
#include "spanset/error.hpp"
#include "spanset/model.hpp"

namespace spanset {

RankedPredictions link_predictions(std::span<const TimeSpan> spans, std::span<const double> correspondence,
                                   std::size_t n_queries) {
  if (correspondence.size() != spans.size() * n_queries) {
    throw DimensionError("link_predictions: correspondence is not N x K");
  }
  RankedPredictions ranked(n_queries);
  if (n_queries == 0) return ranked;
  for (std::size_t i = 0; i < spans.size(); ++i) {
    const auto row = correspondence.subspan(i * n_queries, n_queries);
    std::size_t best = 0;
    for (std::size_t k = 1; k < n_queries; ++k) {
      if (row[k] > row[best]) best = k;
    }
    ranked[best].push_back(ScoredSpan{spans[i], row[best], i});
  }
  for (auto& list : ranked) {
    std::stable_sort(list.begin(), list.end(),
                     [](const ScoredSpan& a, const ScoredSpan& b) { return a.score > b.score; });
  }
  return ranked;
}

RankedPredictions link_predictions(const ModelOutput& output) {
  return link_predictions(output.span_values(), output.correspondence.data(), output.n_queries());
}

namespace {

const std::vector<ScoredSpan>* linked(const RankedPredictions& ranked, const Target& t) {
  return t.query < ranked.size() ? &ranked[t.query] : nullptr;
}

bool hit(const RankedPredictions& ranked, const Target& t, std::size_t alpha, double mu) {
  const auto* list = linked(ranked, t);
  if (!list) return false;
  const std::size_t top = std::min(alpha, list->size());
  for (std::size_t r = 0; r < top; ++r) {
    if (iou((*list)[r].span, t.span) > mu) return true;
  }
  return false;
}

double top1_iou(const RankedPredictions& ranked, const Target& t) {
  const auto* list = linked(ranked, t);
  return (list && !list->empty()) ? iou(list->front().span, t.span) : 0.0;
}

}  // namespace

double recall_at(const RankedPredictions& ranked, std::span<const Target> targets, std::size_t alpha, double mu) {
  if (targets.empty()) return 0.0;
  std::size_t hits = 0;
  for (const Target& t : targets) hits += hit(ranked, t, alpha, mu) ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(targets.size());
}

double mean_iou(const RankedPredictions& ranked, std::span<const Target> targets) {
  if (targets.empty()) return 0.0;
  double total = 0.0;
  for (const Target& t : targets) total += top1_iou(ranked, t);
  return total / static_cast<double>(targets.size());
}

void MetricAccumulator::add(const RankedPredictions& ranked, std::span<const Target> targets) {
  ++samples_;
  for (const Target& t : targets) {
    ++queries_;
    for (std::size_t a = 0; a < 2; ++a) {
      for (std::size_t m = 0; m < 2; ++m) {
        hits_[a][m] += hit(ranked, t, MetricReport::kAlphas[a], MetricReport::kMus[m]) ? 1 : 0;
      }
    }
    iou_sum_ += top1_iou(ranked, t);
  }
}

MetricReport MetricReport::from(const MetricAccumulator& acc) {
  MetricReport r;
  r.n_samples = acc.samples_;
  r.n_queries = acc.queries_;
  if (acc.queries_ == 0) return r;
  const double n = static_cast<double>(acc.queries_);
  for (std::size_t a = 0; a < 2; ++a) {
    for (std::size_t m = 0; m < 2; ++m) r.recall[a][m] = static_cast<double>(acc.hits_[a][m]) / n;
  }
  r.miou = acc.iou_sum_ / n;
  return r;
}

std::string MetricReport::to_csv() const {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g,%.17g,%.17g,%zu,%zu\n", r1_05(), r1_07(), r5_05(), r5_07(),
                miou, n_samples, n_queries);
  return std::string("R1@0.5,R1@0.7,R5@0.5,R5@0.7,mIoU,n_samples,n_queries\n") + buf;
}

std::string MetricReport::to_table(const std::string& label) const {
  const std::size_t width = std::max<std::size_t>(label.size(), 6);
  std::ostringstream out;
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-*s | %7s %7s %7s %7s | %7s\n", static_cast<int>(width), "Method", "R1@0.5",
                "R1@0.7", "R5@0.5", "R5@0.7", "mIoU");
  out << buf << std::string(width, '-') << "-+-" << std::string(31, '-') << "-+-" << std::string(7, '-') << '\n';
  std::snprintf(buf, sizeof buf, "%-*s | %7.2f %7.2f %7.2f %7.2f | %7.2f\n", static_cast<int>(width), label.c_str(),
                100 * r1_05(), 100 * r1_07(), 100 * r5_05(), 100 * r5_07(), 100 * miou);
  out << buf;
  return out.str();
}

MetricReport evaluate(GroundingModel& model, std::span<const GroundingSample> corpus, std::size_t batch_size) {
  if (corpus.empty()) throw DataError("evaluate: empty corpus");
  if (batch_size == 0) batch_size = 1;
  const bool was_training = model.training();
  model.set_training(false);
  NoGradGuard no_grad;
  MetricAccumulator acc;
  for (std::size_t begin = 0; begin < corpus.size(); begin += batch_size) {
    const std::size_t end = std::min(corpus.size(), begin + batch_size);
    std::vector<const GroundingSample*> members;
    for (std::size_t i = begin; i < end; ++i) members.push_back(&corpus[i]);
    const auto outputs = model.forward(Batch::from_samples(members));
    for (std::size_t i = 0; i < outputs.size(); ++i) acc.add(link_predictions(outputs[i]), members[i]->targets);
  }
  model.set_training(was_training);
  return MetricReport::from(acc);
}

}  // namespace spanset
