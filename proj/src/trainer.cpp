#include "spanset/trainer.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

#include "spanset/error.hpp"

namespace spanset {

using json = nlohmann::json;

namespace {

std::uint64_t derive_seed(std::uint64_t seed, std::uint32_t stream, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), stream,
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
  std::uint32_t out[2];
  seq.generate(out, out + 2);
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

constexpr std::uint32_t kShuffleStream = 0x5348;
constexpr std::uint32_t kDropoutStream = 0x4450;

}  // namespace

// ---------------------------------------------------------------------------
// Config

std::size_t TrainConfig::drop_step() const {
  if (lr_drop_step) return *lr_drop_step;
  return static_cast<std::size_t>(std::llround(0.7 * static_cast<double>(total_steps)));
}

double TrainConfig::lr_at(std::size_t step) const {
  if (schedule == LrSchedule::linear) {
    if (total_steps <= 1) return lr;
    const double frac = static_cast<double>(std::min(step, total_steps - 1)) / static_cast<double>(total_steps - 1);
    return lr * (1.0 - (1.0 - lr_drop_factor) * frac);
  }
  return step < drop_step() ? lr : lr * lr_drop_factor;
}

void TrainConfig::validate() const {
  if (!(lr > 0.0) || !std::isfinite(lr)) throw std::invalid_argument("train config: lr must be positive");
  if (!(weight_decay > 0.0) || !std::isfinite(weight_decay)) {
    throw std::invalid_argument("train config: weight_decay must be positive");
  }
  if (batch_size == 0) throw std::invalid_argument("train config: batch_size must be positive");
  if (total_steps == 0) throw std::invalid_argument("train config: total_steps must be positive");
  if (drop_step() > total_steps) throw std::invalid_argument("train config: lr_drop_step exceeds total_steps");
  if (!(lr_drop_factor > 0.0 && lr_drop_factor <= 1.0)) {
    throw std::invalid_argument("train config: lr_drop_factor must lie in (0, 1]");
  }
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw std::invalid_argument("train config: betas must lie in [0, 1)");
  }
  if (!(adam_eps > 0.0)) throw std::invalid_argument("train config: adam_eps must be positive");
  if (!(grad_clip_norm > 0.0)) throw std::invalid_argument("train config: grad_clip_norm must be positive");
  if (max_nonfinite_steps == 0) throw std::invalid_argument("train config: max_nonfinite_steps must be positive");
  weights.validate();
}

std::string train_config_to_json(const TrainConfig& c) {
  json j{{"lr", c.lr},
         {"weight_decay", c.weight_decay},
         {"batch_size", c.batch_size},
         {"total_steps", c.total_steps},
         {"lr_drop_step", c.drop_step()},
         {"lr_drop_factor", c.lr_drop_factor},
         {"schedule", c.schedule == LrSchedule::step ? "step" : "linear"},
         {"beta1", c.beta1},
         {"beta2", c.beta2},
         {"adam_eps", c.adam_eps},
         {"grad_clip_norm", c.grad_clip_norm},
         {"seed", c.seed},
         {"lambda_l1", c.weights.lambda_l1},
         {"lambda_iou", c.weights.lambda_iou},
         {"lambda_sg", c.weights.lambda_sg},
         {"max_nonfinite_steps", c.max_nonfinite_steps}};
  return j.dump();
}

TrainConfig train_config_from_json(const std::string& text) {
  TrainConfig c;
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw DataError(std::string("train config: ") + e.what());
  }
  if (!j.is_object()) throw DataError("train config: expected an object");
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "lr") c.lr = v.get<double>();
      else if (key == "weight_decay") c.weight_decay = v.get<double>();
      else if (key == "batch_size") c.batch_size = v.get<std::size_t>();
      else if (key == "total_steps") c.total_steps = v.get<std::size_t>();
      else if (key == "lr_drop_step") c.lr_drop_step = v.get<std::size_t>();
      else if (key == "lr_drop_factor") c.lr_drop_factor = v.get<double>();
      else if (key == "schedule") {
        const auto s = v.get<std::string>();
        if (s == "step") c.schedule = LrSchedule::step;
        else if (s == "linear") c.schedule = LrSchedule::linear;
        else throw DataError("train config: unknown schedule '" + s + "'");
      } else if (key == "beta1") c.beta1 = v.get<double>();
      else if (key == "beta2") c.beta2 = v.get<double>();
      else if (key == "adam_eps") c.adam_eps = v.get<double>();
      else if (key == "grad_clip_norm") c.grad_clip_norm = v.get<double>();
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else if (key == "lambda_l1") c.weights.lambda_l1 = v.get<double>();
      else if (key == "lambda_iou") c.weights.lambda_iou = v.get<double>();
      else if (key == "lambda_sg") c.weights.lambda_sg = v.get<double>();
      else if (key == "max_nonfinite_steps") c.max_nonfinite_steps = v.get<std::size_t>();
      else throw DataError("train config: unknown key '" + key + "'");
    }
  } catch (const json::exception& e) {
    throw DataError(std::string("train config: ") + e.what());
  }
  return c;
}

// ---------------------------------------------------------------------------
// Optimizer

bool adamw_step(std::vector<Tensor>& params, const std::vector<std::vector<double>>& grads, AdamState& state,
                const AdamHyper& h) {
  if (grads.size() != params.size()) throw DimensionError("adamw_step: gradient count differs from parameters");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].size() != params[i].numel()) {
      throw DimensionError("adamw_step: gradient " + std::to_string(i) + " has the wrong size");
    }
  }
  for (const auto& g : grads) {
    for (double x : g) {
      if (!std::isfinite(x)) {
        ++state.skipped;
        return false;
      }
    }
  }
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.numel(), 0.0);
      state.v.emplace_back(p.numel(), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw DimensionError("adamw_step: optimizer state does not fit parameters");

  ++state.t;
  const double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(h.beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i].mutable_data();
    auto& m = state.m[i];
    auto& v = state.v[i];
    const auto& g = grads[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = h.beta1 * m[j] + (1.0 - h.beta1) * g[j];
      v[j] = h.beta2 * v[j] + (1.0 - h.beta2) * g[j] * g[j];
      const double m_hat = m[j] / bc1;
      const double v_hat = v[j] / bc2;
      p[j] -= h.lr * (m_hat / (std::sqrt(v_hat) + h.eps)) + h.lr * h.weight_decay * p[j];
    }
  }
  return true;
}

double global_norm(const std::vector<std::vector<double>>& grads) {
  double sq = 0.0;
  for (const auto& g : grads) {
    for (double x : g) sq += x * x;
  }
  return std::sqrt(sq);
}

double clip_global_norm(std::vector<std::vector<double>>& grads, double max_norm) {
  const double norm = global_norm(grads);
  if (std::isfinite(norm) && norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& g : grads) {
      for (double& x : g) x *= s;
    }
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Curve log

std::string curve_csv_header() { return "step,lr,l1,giou,set_guidance,total,grad_norm"; }

std::string curve_csv_row(const CurveRow& r) {
  char buf[320];
  std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g", r.step, r.lr, r.l1, r.giou, r.set_guidance,
                r.total, r.grad_norm);
  return buf;
}

std::string curve_to_csv(const std::vector<CurveRow>& curve) {
  std::string out = curve_csv_header() + "\n";
  for (const CurveRow& r : curve) out += curve_csv_row(r) + "\n";
  return out;
}

std::vector<CurveRow> curve_from_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != curve_csv_header()) throw DataError("curve csv: unexpected header");
  std::vector<CurveRow> out;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    CurveRow r;
    char tail = 0;
    if (std::sscanf(line.c_str(), "%zu,%lf,%lf,%lf,%lf,%lf,%lf%c", &r.step, &r.lr, &r.l1, &r.giou, &r.set_guidance,
                    &r.total, &r.grad_norm, &tail) != 7) {
      throw DataError("curve csv: malformed line " + std::to_string(line_no));
    }
    out.push_back(r);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Phase analysis

namespace {

std::vector<double> centered_average(const std::vector<double>& x, std::size_t width) {
  const std::size_t n = x.size();
  std::vector<double> prefix(n + 1, 0.0);
  for (std::size_t i = 0; i < n; ++i) prefix[i + 1] = prefix[i] + x[i];
  const std::size_t half = width / 2;
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t lo = i >= half ? i - half : 0;
    const std::size_t hi = std::min(n, lo + width);
    out[i] = (prefix[hi] - prefix[lo]) / static_cast<double>(hi - lo);
  }
  return out;
}

std::size_t fraction_of(std::size_t n, double f) {
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(f * static_cast<double>(n))));
}

}  // namespace

PhaseReport analyze_phases(const std::vector<CurveRow>& curve) {
  PhaseReport r;
  const std::size_t n = curve.size();
  r.total_steps = n;
  if (n < 2) return r;
  r.smoothing = fraction_of(n, 0.01);
  r.window = fraction_of(n, 0.05);
  r.rebound_window = fraction_of(n, 0.02);

  std::vector<double> sg(n), span(n);
  for (std::size_t i = 0; i < n; ++i) {
    sg[i] = curve[i].set_guidance;
    span[i] = curve[i].l1 + curve[i].giou;
  }
  sg = centered_average(sg, r.smoothing);
  span = centered_average(span, r.smoothing);

  const std::size_t w = std::min(r.window, n - 1);
  double best = -std::numeric_limits<double>::infinity();
  std::size_t best_start = 0;
  for (std::size_t i = 0; i + w < n; ++i) {
    if (!(sg[i] > 0.0)) continue;
    const double drop = (sg[i] - sg[i + w]) / sg[i];
    if (drop > best) {
      best = drop;
      best_start = i;
    }
  }
  r.sg_drop_fraction = std::isfinite(best) ? best : 0.0;
  r.sg_drop_step = std::min(n - 1, best_start + w / 2);

  const std::size_t reach = r.window;
  const std::size_t lo = r.sg_drop_step >= reach ? r.sg_drop_step - reach : 0;
  const std::size_t hi = std::min(n - 1, r.sg_drop_step + reach);
  const std::size_t rw = r.rebound_window;
  r.rebound_delta = 0.0;
  for (std::size_t j = lo; j + rw <= hi; ++j) {
    const double delta = span[j + rw] - span[j];
    if (delta > r.rebound_delta) {
      r.rebound_delta = delta;
      r.rebound_step = j;
    }
  }
  r.span_rebound = r.rebound_delta > 0.0;
  return r;
}

std::string PhaseReport::to_json() const {
  return json{{"total_steps", total_steps},
              {"window", window},
              {"sg_drop_step", sg_drop_step},
              {"sg_drop_fraction", sg_drop_fraction},
              {"rebound_window", rebound_window},
              {"span_rebound", span_rebound},
              {"rebound_delta", rebound_delta},
              {"rebound_step", rebound_step},
              {"smoothing", smoothing}}
      .dump(2);
}

// ---------------------------------------------------------------------------
// Trainer

Trainer::Trainer(GroundingModel& model, const Corpus& corpus, TrainConfig config)
    : model_(model), corpus_(corpus), config_(std::move(config)) {
  config_.validate();
  if (corpus_.empty()) throw DataError("train: empty corpus");
  for (const GroundingSample& s : corpus_) {
    if (s.feature_dim != model_.config().d_in || s.frame_count != model_.config().frame_count) {
      throw DataError("train: sample " + std::to_string(s.sample_id) + " does not fit the model input shape");
    }
    if (s.n_queries() == 0 || s.n_queries() > model_.config().max_queries) {
      throw DataError("train: sample " + std::to_string(s.sample_id) + " has an unsupported query count");
    }
  }
  params_ = model_.parameters().tensors();
}

const std::vector<std::size_t>& Trainer::epoch_order(std::size_t epoch) const {
  if (epoch != cached_epoch_) {
    cached_order_.resize(corpus_.size());
    std::iota(cached_order_.begin(), cached_order_.end(), 0);
    std::mt19937_64 rng(derive_seed(config_.seed, kShuffleStream, epoch));
    std::shuffle(cached_order_.begin(), cached_order_.end(), rng);
    cached_epoch_ = epoch;
  }
  return cached_order_;
}

std::vector<std::size_t> Trainer::batch_indices(std::size_t step) const {
  const std::size_t n = corpus_.size();
  std::vector<std::size_t> out;
  out.reserve(config_.batch_size);
  for (std::size_t b = 0; b < config_.batch_size; ++b) {
    const std::size_t pos = step * config_.batch_size + b;
    out.push_back(epoch_order(pos / n)[pos % n]);
  }
  return out;
}

const CurveRow& Trainer::run_step() {
  if (done()) throw std::logic_error("Trainer::run_step: training already finished");
  const std::size_t step = step_;
  model_.set_training(true);
  model_.reseed_dropout(derive_seed(config_.seed, kDropoutStream, step));
  model_.parameters().zero_grad();

  std::vector<const GroundingSample*> members;
  for (std::size_t i : batch_indices(step)) members.push_back(&corpus_[i]);
  const auto outputs = model_.forward(Batch::from_samples(members));

  const double inv_b = 1.0 / static_cast<double>(members.size());
  Tensor loss;
  CurveRow row;
  row.step = step;
  row.lr = config_.lr_at(step);
  // Non-finite spans cannot be matched, so such a step counts as a non-finite loss.
  bool finite_outputs = true;
  for (const ModelOutput& out : outputs) {
    for (std::size_t l = 0; l < out.layer_count() && finite_outputs; ++l) {
      const LayerPrediction pred = out.layer(l);
      for (double v : pred.spans.data()) finite_outputs = finite_outputs && std::isfinite(v);
      for (double v : pred.correspondence.data()) finite_outputs = finite_outputs && std::isfinite(v);
    }
  }
  for (std::size_t i = 0; i < outputs.size() && finite_outputs; ++i) {
    SetLoss sl = final_set_loss(outputs[i], members[i]->targets, config_.weights);
    loss = loss.defined() ? loss + sl.loss : sl.loss;
    row.l1 += inv_b * sl.breakdown.l1;
    row.giou += inv_b * sl.breakdown.giou;
    row.set_guidance += inv_b * sl.breakdown.set_guidance;
    row.total += inv_b * sl.breakdown.total;
  }
  if (finite_outputs) loss = scale(loss, inv_b);

  if (!finite_outputs || !std::isfinite(loss.item())) {
    if (!finite_outputs) row.l1 = row.giou = row.set_guidance = row.total = std::numeric_limits<double>::quiet_NaN();
    ++consecutive_nonfinite_;
    ++adam_.skipped;
    row.grad_norm = std::numeric_limits<double>::quiet_NaN();
    if (consecutive_nonfinite_ >= config_.max_nonfinite_steps) {
      throw DivergenceError("training diverged: loss non-finite for " + std::to_string(consecutive_nonfinite_) +
                            " consecutive steps (last at step " + std::to_string(step) + ")");
    }
  } else {
    consecutive_nonfinite_ = 0;
    backward(loss);
    std::vector<std::vector<double>> grads;
    grads.reserve(params_.size());
    for (const Tensor& p : params_) {
      if (p.has_grad()) grads.emplace_back(p.grad().begin(), p.grad().end());
      else grads.emplace_back(p.numel(), 0.0);
    }
    row.grad_norm = clip_global_norm(grads, config_.grad_clip_norm);
    AdamHyper hyper{row.lr, config_.beta1, config_.beta2, config_.adam_eps, config_.weight_decay};
    adamw_step(params_, grads, adam_, hyper);
  }
  model_.parameters().zero_grad();
  curve_.push_back(row);
  ++step_;
  return curve_.back();
}

void Trainer::run(const std::function<void(const Trainer&)>& after_step) {
  while (!done()) {
    run_step();
    if (after_step) after_step(*this);
  }
}

Checkpoint Trainer::checkpoint() const {
  Checkpoint ckpt = model_.to_checkpoint();
  json meta = json::parse(ckpt.metadata);
  meta["train_config"] = json::parse(train_config_to_json(config_));
  meta["train_state"] = {{"step", step_},
                         {"adam_t", adam_.t},
                         {"adam_skipped", adam_.skipped},
                         {"consecutive_nonfinite", consecutive_nonfinite_}};
  ckpt.metadata = meta.dump();
  std::size_t i = 0;
  for (const auto& [name, t] : model_.parameters()) {
    if (!adam_.m.empty()) {
      ckpt.tensors.push_back(NamedTensor{"adam.m." + name, t.shape(), adam_.m[i]});
      ckpt.tensors.push_back(NamedTensor{"adam.v." + name, t.shape(), adam_.v[i]});
    }
    ++i;
  }
  std::vector<double> rows;
  rows.reserve(curve_.size() * 7);
  for (const CurveRow& r : curve_) {
    rows.insert(rows.end(), {static_cast<double>(r.step), r.lr, r.l1, r.giou, r.set_guidance, r.total, r.grad_norm});
  }
  ckpt.tensors.push_back(NamedTensor{"train.curve", {curve_.size(), 7}, std::move(rows)});
  return ckpt;
}

void Trainer::restore(const Checkpoint& ckpt) {
  json meta;
  try {
    meta = json::parse(ckpt.metadata);
  } catch (const json::parse_error& e) {
    throw DataError(std::string("checkpoint metadata: ") + e.what());
  }
  model_.load_parameters(ckpt);
  adam_ = AdamState{};
  step_ = 0;
  consecutive_nonfinite_ = 0;
  curve_.clear();
  if (!meta.contains("train_state")) return;
  try {
    const json& st = meta.at("train_state");
    step_ = st.at("step").get<std::size_t>();
    adam_.t = st.at("adam_t").get<std::size_t>();
    adam_.skipped = st.at("adam_skipped").get<std::size_t>();
    consecutive_nonfinite_ = st.at("consecutive_nonfinite").get<std::size_t>();
  } catch (const json::exception& e) {
    throw DataError(std::string("checkpoint train state: ") + e.what());
  }
  if (adam_.t > 0) {
    for (const auto& [name, t] : model_.parameters()) {
      const NamedTensor* m = ckpt.find("adam.m." + name);
      const NamedTensor* v = ckpt.find("adam.v." + name);
      if (!m || !v || m->data.size() != t.numel() || v->data.size() != t.numel()) {
        throw DataError("checkpoint: optimizer state missing or mis-shaped for " + name);
      }
      adam_.m.push_back(m->data);
      adam_.v.push_back(v->data);
    }
  }
  if (const NamedTensor* c = ckpt.find("train.curve")) {
    if (c->shape.size() != 2 || c->shape[1] != 7 || c->shape[0] != step_) {
      throw DataError("checkpoint: curve log does not match the step counter");
    }
    for (std::size_t r = 0; r < step_; ++r) {
      const double* d = c->data.data() + r * 7;
      curve_.push_back(CurveRow{static_cast<std::size_t>(d[0]), d[1], d[2], d[3], d[4], d[5], d[6]});
    }
  }
  if (step_ > config_.total_steps) throw DataError("checkpoint: step counter beyond total_steps");
}

TrainResult train(GroundingModel& model, const Corpus& corpus, const TrainConfig& config) {
  Trainer trainer(model, corpus, config);
  trainer.run();
  TrainResult out;
  out.curve = trainer.curve();
  out.phases = analyze_phases(out.curve);
  out.skipped_steps = trainer.optimizer().skipped;
  return out;
}

}  // namespace spanset
