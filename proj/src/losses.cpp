#include "spanset/losses.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "spanset/error.hpp"

namespace spanset {

void LossWeights::validate() const {
  for (double v : {lambda_l1, lambda_iou, lambda_sg}) {
    if (!(v >= 0.0) || !std::isfinite(v)) {
      throw std::invalid_argument("LossWeights: weights must be finite and non-negative");
    }
  }
}

std::vector<std::size_t> guidance_targets(std::size_t n_predictions, std::size_t n_queries) {
  std::vector<std::size_t> out(n_predictions);
  for (std::size_t i = 0; i < n_predictions; ++i) out[i] = i * n_queries / n_predictions;
  return out;
}

Tensor set_guidance_loss(const Tensor& correspondence, std::span<const std::size_t> subset_targets,
                         std::size_t* clamped) {
  if (subset_targets.size() != correspondence.rows()) {
    throw DimensionError("set_guidance_loss: " + std::to_string(subset_targets.size()) +
                         " targets for " + std::to_string(correspondence.rows()) + " proposals");
  }
  std::vector<std::pair<std::size_t, std::size_t>> entries;
  entries.reserve(subset_targets.size());
  for (std::size_t i = 0; i < subset_targets.size(); ++i) {
    if (subset_targets[i] >= correspondence.cols()) {
      throw DimensionError("set_guidance_loss: target query out of range");
    }
    entries.emplace_back(i, subset_targets[i]);
  }
  return scale(mean(log_clamped(pick(correspondence, entries), kLogClamp, clamped)), -1.0);
}

SpanLossTerms span_loss(const Tensor& starts, const Tensor& ends, std::span<const TimeSpan> targets,
                        const LossWeights& w) {
  const std::size_t k = targets.size();
  if (starts.numel() != k || ends.numel() != k) {
    throw DimensionError("span_loss: prediction count does not match target count");
  }
  std::vector<double> ts(k), te(k);
  for (std::size_t i = 0; i < k; ++i) {
    ts[i] = targets[i].s();
    te[i] = targets[i].e();
  }
  if (starts.shape() != ends.shape()) throw DimensionError("span_loss: starts and ends differ in shape");
  const Shape shape = starts.shape();
  const Tensor& s = starts;
  const Tensor& e = ends;
  const Tensor tgt_s = Tensor::from(shape, ts);
  const Tensor tgt_e = Tensor::from(shape, te);

  const Tensor l1 = abs(s - tgt_s) + abs(e - tgt_e);
  const Tensor inter = relu(minimum(e, tgt_e) - maximum(s, tgt_s));
  const Tensor uni = (e - s) + (tgt_e - tgt_s) - inter;
  const Tensor hull = maximum(e, tgt_e) - minimum(s, tgt_s);
  const Tensor g = div_or_zero(inter, uni) - div_or_zero(hull - uni, hull);
  const Tensor giou_loss = add_scalar(scale(g, -1.0), 1.0);

  SpanLossTerms out;
  out.l1 = sum(l1);
  out.giou = sum(giou_loss);
  out.total = scale(out.l1, w.lambda_l1) + scale(out.giou, w.lambda_iou);
  return out;
}

Tensor span_loss(const Tensor& start, const Tensor& end, const TimeSpan& target, const LossWeights& w) {
  const TimeSpan one[] = {target};
  return span_loss(start, end, one, w).total;
}

LayerSetLoss layer_set_loss(const LayerPrediction& pred, std::span<const Target> targets,
                            const LossWeights& w, std::size_t* clamped) {
  const std::size_t k = targets.size();
  const std::size_t n = pred.spans.rows();
  LayerSetLoss out;
  if (k == 0) {
    out.loss = Tensor::scalar(0.0);
    return out;
  }
  if (k > n) {
    throw DimensionError("final_set_loss: " + std::to_string(k) + " targets exceed " +
                         std::to_string(n) + " predictions");
  }
  const std::size_t n_queries = pred.correspondence.cols();
  if (pred.correspondence.rows() != n) {
    throw DimensionError("final_set_loss: correspondence rows do not match predictions");
  }

  const std::vector<TimeSpan> predicted = spans_from_tensor(pred.spans);
  const CostMatrix cost =
      build_cost_matrix(targets, predicted, pred.correspondence.data(), n_queries, w.match());
  out.assignment = hungarian(cost);

  std::vector<std::pair<std::size_t, std::size_t>> start_idx, end_idx;
  std::vector<TimeSpan> matched_targets;
  for (const auto& [ti, pj] : out.assignment.pairs) {
    start_idx.emplace_back(pj, 0);
    end_idx.emplace_back(pj, 1);
    matched_targets.push_back(targets[ti].span);
  }
  const SpanLossTerms span = span_loss(pick(pred.spans, start_idx), pick(pred.spans, end_idx), matched_targets, w);
  const Tensor sg = set_guidance_loss(pred.correspondence, guidance_targets(n, n_queries), clamped);

  out.loss = scale(sg, w.lambda_sg) + span.total;
  out.parts.l1 = span.l1.item();
  out.parts.giou = span.giou.item();
  out.parts.set_guidance = sg.item();
  out.parts.total = w.lambda_sg * out.parts.set_guidance + w.lambda_l1 * out.parts.l1 +
                    w.lambda_iou * out.parts.giou;
  return out;
}

SetLoss final_set_loss(const ModelOutput& output, std::span<const Target> targets,
                       const LossWeights& w, std::size_t* clamped) {
  SetLoss out;
  LayerSetLoss main = layer_set_loss(output.layer(0), targets, w, clamped);
  out.loss = main.loss;
  static_cast<LayerLoss&>(out.breakdown) = main.parts;
  out.assignment = std::move(main.assignment);
  for (std::size_t l = 1; l < output.layer_count(); ++l) {
    LayerSetLoss aux = layer_set_loss(output.layer(l), targets, w, clamped);
    out.loss = out.loss + aux.loss;
    out.breakdown.per_layer.push_back(aux.parts);
    out.aux_assignments.push_back(std::move(aux.assignment));
  }
  return out;
}

}  // namespace spanset
