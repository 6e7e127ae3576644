#include "spanset/model.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "spanset/error.hpp"

namespace spanset {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Configuration

std::size_t ModelConfig::heads() const noexcept {
  return n_heads != 0 ? n_heads : std::max<std::size_t>(1, d_model / 64);
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("ModelConfig: " + what); };
  if (d_in == 0 || d_model == 0 || ffn_width == 0) fail("widths must be positive");
  if (d_model % heads() != 0) fail("d_model must be divisible by the head count");
  if (proposals_per_query == 0) fail("proposals_per_query must be >= 1");
  if (max_queries == 0 || frame_count == 0) fail("max_queries and frame_count must be >= 1");
  if (n_dec_layers == 0) fail("at least one decoder layer is required");
  if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must lie in [0, 1)");
  if (!(temperature > 0.0)) fail("temperature must be positive");
}

std::string model_config_to_json(const ModelConfig& c) {
  const json j = {{"d_in", c.d_in},
                  {"d_model", c.d_model},
                  {"n_heads", c.n_heads},
                  {"n_enc_layers", c.n_enc_layers},
                  {"n_dec_layers", c.n_dec_layers},
                  {"ffn_width", c.ffn_width},
                  {"proposals_per_query", c.proposals_per_query},
                  {"max_queries", c.max_queries},
                  {"frame_count", c.frame_count},
                  {"dropout", c.dropout},
                  {"temperature", c.temperature},
                  {"similarity", c.similarity == Similarity::cosine ? "cosine" : "dot"},
                  {"video_positional", c.video_positional},
                  {"text_positional", c.text_positional}};
  return j.dump();
}

ModelConfig model_config_from_json(const std::string& text) {
  ModelConfig c;
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw DataError(std::string("model config: ") + e.what());
  }
  if (!j.is_object()) throw DataError("model config: expected an object");
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "d_in") c.d_in = value.get<std::size_t>();
      else if (key == "d_model") c.d_model = value.get<std::size_t>();
      else if (key == "n_heads") c.n_heads = value.get<std::size_t>();
      else if (key == "n_enc_layers") c.n_enc_layers = value.get<std::size_t>();
      else if (key == "n_dec_layers") c.n_dec_layers = value.get<std::size_t>();
      else if (key == "ffn_width") c.ffn_width = value.get<std::size_t>();
      else if (key == "proposals_per_query") c.proposals_per_query = value.get<std::size_t>();
      else if (key == "max_queries") c.max_queries = value.get<std::size_t>();
      else if (key == "frame_count") c.frame_count = value.get<std::size_t>();
      else if (key == "dropout") c.dropout = value.get<double>();
      else if (key == "temperature") c.temperature = value.get<double>();
      else if (key == "video_positional") c.video_positional = value.get<bool>();
      else if (key == "text_positional") c.text_positional = value.get<bool>();
      else if (key == "similarity") {
        const auto s = value.get<std::string>();
        if (s == "cosine") c.similarity = Similarity::cosine;
        else if (s == "dot") c.similarity = Similarity::dot;
        else throw DataError("model config: unknown similarity '" + s + "'");
      } else {
        throw DataError("model config: unknown key '" + key + "'");
      }
    }
  } catch (const json::exception& e) {
    throw DataError(std::string("model config: ") + e.what());
  }
  return c;
}

std::vector<double> sinusoid_table(std::size_t positions, std::size_t width) {
  std::vector<double> table(positions * width);
  for (std::size_t p = 0; p < positions; ++p) {
    for (std::size_t i = 0; i < width; ++i) {
      const double exponent = static_cast<double>(2 * (i / 2)) / static_cast<double>(width);
      const double angle = static_cast<double>(p) / std::pow(10000.0, exponent);
      table[p * width + i] = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  }
  return table;
}

PositionalEncoding PositionalEncoding::build(const ModelConfig& config) {
  PositionalEncoding pe;
  pe.video = config.video_positional ? sinusoid_table(config.frame_count, config.d_model)
                                     : std::vector<double>(config.frame_count * config.d_model, 0.0);
  pe.text = config.text_positional ? sinusoid_table(config.max_queries, config.d_model)
                                   : std::vector<double>(config.max_queries * config.d_model, 0.0);
  return pe;
}

// ---------------------------------------------------------------------------
// Parameters

Tensor& Parameters::add(const std::string& name, Tensor t) {
  if (index_.count(name)) throw std::logic_error("Parameters: duplicate name " + name);
  index_[name] = entries_.size();
  entries_.emplace_back(name, std::move(t));
  return entries_.back().second;
}

const Tensor& Parameters::operator[](const std::string& name) const {
  const auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("Parameters: no parameter named " + name);
  return entries_[it->second].second;
}

std::size_t Parameters::scalar_count() const noexcept {
  std::size_t n = 0;
  for (const auto& [name, t] : entries_) n += t.numel();
  return n;
}

std::vector<Tensor> Parameters::tensors() const {
  std::vector<Tensor> out;
  out.reserve(entries_.size());
  for (const auto& [name, t] : entries_) out.push_back(t);
  return out;
}

void Parameters::zero_grad() {
  for (auto& [name, t] : entries_) t.zero_grad();
}

// ---------------------------------------------------------------------------
// Batches

Batch Batch::from_samples(std::span<const GroundingSample* const> samples, std::size_t pad_to) {
  if (samples.empty()) throw DimensionError("Batch: no samples");
  Batch b;
  b.size = samples.size();
  b.frame_count = samples.front()->frame_count;
  b.feature_dim = samples.front()->feature_dim;
  b.padded_queries = pad_to;
  for (const GroundingSample* s : samples) {
    if (s->frame_count != b.frame_count || s->feature_dim != b.feature_dim) {
      throw DimensionError("Batch: samples disagree on frame count or feature width");
    }
    b.padded_queries = std::max(b.padded_queries, s->n_queries());
    b.n_queries.push_back(s->n_queries());
  }
  std::vector<double> frames, queries(b.size * b.padded_queries * b.feature_dim, 0.0);
  frames.reserve(b.size * b.frame_count * b.feature_dim);
  for (std::size_t i = 0; i < b.size; ++i) {
    const GroundingSample& s = *samples[i];
    frames.insert(frames.end(), s.frames.begin(), s.frames.end());
    std::copy(s.queries.begin(), s.queries.end(),
              queries.begin() + static_cast<std::ptrdiff_t>(i * b.padded_queries * b.feature_dim));
  }
  b.frames = Tensor::from({b.size * b.frame_count, b.feature_dim}, std::move(frames));
  b.queries = Tensor::from({b.size * b.padded_queries, b.feature_dim}, std::move(queries));
  return b;
}

Batch Batch::from_sample(const GroundingSample& sample, std::size_t pad_to) {
  const GroundingSample* one[] = {&sample};
  return from_samples(one, pad_to);
}

// ---------------------------------------------------------------------------
// Outputs

std::vector<TimeSpan> spans_from_tensor(const Tensor& spans) {
  std::vector<TimeSpan> out;
  out.reserve(spans.rows());
  for (std::size_t i = 0; i < spans.rows(); ++i) out.emplace_back(spans(i, 0), spans(i, 1));
  return out;
}

std::vector<TimeSpan> ModelOutput::span_values() const { return spans_from_tensor(spans); }

LayerPrediction ModelOutput::layer(std::size_t i) const {
  if (i == 0) return LayerPrediction{spans, correspondence};
  return aux_outputs.at(i - 1);
}

// ---------------------------------------------------------------------------
// Model

namespace {

Tensor xavier(std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> u(-bound, bound);
  std::vector<double> w(fan_in * fan_out);
  for (double& v : w) v = u(rng);
  return Tensor::from({fan_in, fan_out}, std::move(w), true);
}

void add_linear(Parameters& ps, const std::string& name, std::size_t in, std::size_t out,
                std::mt19937_64& rng, const char* w = "w", const char* b = "b") {
  ps.add(name + "." + w, xavier(in, out, rng));
  ps.add(name + "." + b, Tensor::zeros({out}, true));
}

void add_norm_params(Parameters& ps, const std::string& name, std::size_t width) {
  ps.add(name + ".gain", Tensor::from({width}, std::vector<double>(width, 1.0), true));
  ps.add(name + ".bias", Tensor::zeros({width}, true));
}

void add_attention(Parameters& ps, const std::string& name, std::size_t d, std::mt19937_64& rng) {
  for (const char* proj : {"q", "k", "v", "o"}) {
    add_linear(ps, name + "." + proj, d, d, rng);
  }
}

void add_ffn(Parameters& ps, const std::string& name, std::size_t d, std::size_t hidden,
             std::mt19937_64& rng) {
  add_linear(ps, name + ".in", d, hidden, rng);
  add_linear(ps, name + ".out", hidden, d, rng);
}

}  // namespace

GroundingModel::GroundingModel(ModelConfig config, std::uint64_t seed)
    : config_(config), pe_(PositionalEncoding::build(config)), dropout_rng_(seed ^ 0x9e3779b97f4a7c15ULL) {
  config_.validate();
  std::mt19937_64 rng(seed);
  const std::size_t d = config_.d_model;
  add_linear(params_, "video_proj", config_.d_in, d, rng);
  add_linear(params_, "text_proj", config_.d_in, d, rng);
  for (std::size_t l = 0; l < config_.n_enc_layers; ++l) {
    const std::string pre = "enc." + std::to_string(l);
    add_attention(params_, pre + ".self_attn", d, rng);
    add_norm_params(params_, pre + ".norm1", d);
    add_ffn(params_, pre + ".ffn", d, config_.ffn_width, rng);
    add_norm_params(params_, pre + ".norm2", d);
  }
  for (std::size_t l = 0; l < config_.n_dec_layers; ++l) {
    const std::string pre = "dec." + std::to_string(l);
    add_attention(params_, pre + ".self_attn", d, rng);
    add_norm_params(params_, pre + ".norm1", d);
    add_attention(params_, pre + ".cross_attn", d, rng);
    add_norm_params(params_, pre + ".norm2", d);
    add_ffn(params_, pre + ".ffn", d, config_.ffn_width, rng);
    add_norm_params(params_, pre + ".norm3", d);
  }
  add_norm_params(params_, "dec.out_norm", d);
  add_linear(params_, "head.hidden", d, d, rng);
  add_linear(params_, "head.span", d, 2, rng);

  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> proposals(config_.max_proposals() * d);
  for (double& v : proposals) v = 0.02 * normal(rng);
  params_.add("proposals", Tensor::from({config_.max_proposals(), d}, std::move(proposals), true));
}

Tensor GroundingModel::attention_block(const std::string& prefix, const Tensor& query_in,
                                       const Tensor& key_in, const Tensor& value_in,
                                       const AttentionLayout& layout,
                                       std::vector<AttentionMap>* maps) {
  const Tensor q = linear(query_in, p(prefix + ".q.w"), p(prefix + ".q.b"));
  const Tensor k = linear(key_in, p(prefix + ".k.w"), p(prefix + ".k.b"));
  const Tensor v = linear(value_in, p(prefix + ".v.w"), p(prefix + ".v.b"));
  const Tensor a = multi_head_attention(q, k, v, config_.heads(), layout, maps);
  return linear(a, p(prefix + ".o.w"), p(prefix + ".o.b"));
}

Tensor GroundingModel::feed_forward(const std::string& prefix, const Tensor& x) {
  Tensor h = relu(linear(x, p(prefix + ".in.w"), p(prefix + ".in.b")));
  if (training_) h = dropout(h, config_.dropout, dropout_rng_);
  return linear(h, p(prefix + ".out.w"), p(prefix + ".out.b"));
}

Tensor GroundingModel::add_norm(const std::string& prefix, const Tensor& x, const Tensor& branch) {
  const Tensor b = training_ ? dropout(branch, config_.dropout, dropout_rng_) : branch;
  return layer_norm(x + b, p(prefix + ".gain"), p(prefix + ".bias"));
}

EncodedBatch GroundingModel::encode(const Batch& batch) {
  const std::size_t t = config_.frame_count;
  if (batch.frame_count != t) {
    throw DimensionError("encode: batch has " + std::to_string(batch.frame_count) +
                         " frames, model expects " + std::to_string(t));
  }
  if (batch.feature_dim != config_.d_in) {
    throw DimensionError("encode: feature width " + std::to_string(batch.feature_dim) +
                         " does not match d_in " + std::to_string(config_.d_in));
  }
  if (batch.padded_queries > config_.max_queries) {
    throw DimensionError("encode: " + std::to_string(batch.padded_queries) +
                         " query slots exceed max_queries " + std::to_string(config_.max_queries));
  }
  const std::size_t d = config_.d_model;
  const std::size_t kp = batch.padded_queries;
  const std::size_t len = t + kp;
  const std::size_t b = batch.size;

  EncodedBatch enc;
  enc.frame_count = t;
  enc.padded_queries = kp;
  enc.n_queries = batch.n_queries;

  const Tensor video = linear(batch.frames, p("video_proj.w"), p("video_proj.b"));
  const Tensor text = linear(batch.queries, p("text_proj.w"), p("text_proj.b"));
  // Interleave to one [frames; queries] block per sample.
  std::vector<std::size_t> order;
  order.reserve(b * len);
  std::vector<double> pos(b * len * d);
  enc.self_layout.q_offsets.push_back(0);
  enc.self_layout.k_offsets.push_back(0);
  for (std::size_t s = 0; s < b; ++s) {
    for (std::size_t f = 0; f < t; ++f) order.push_back(s * t + f);
    for (std::size_t k = 0; k < kp; ++k) order.push_back(b * t + s * kp + k);
    std::copy(pe_.video.begin(), pe_.video.begin() + static_cast<std::ptrdiff_t>(t * d),
              pos.begin() + static_cast<std::ptrdiff_t>(s * len * d));
    std::copy(pe_.text.begin(), pe_.text.begin() + static_cast<std::ptrdiff_t>(kp * d),
              pos.begin() + static_cast<std::ptrdiff_t>((s * len + t) * d));
    for (std::size_t k = 0; k < len; ++k) {
      enc.self_layout.key_mask.push_back(k >= t + batch.n_queries[s] ? 1 : 0);
    }
    enc.self_layout.q_offsets.push_back((s + 1) * len);
    enc.self_layout.k_offsets.push_back((s + 1) * len);
  }
  enc.positional = Tensor::from({b * len, d}, std::move(pos));
  Tensor x = gather_rows(concat_rows({video, text}), order);

  for (std::size_t l = 0; l < config_.n_enc_layers; ++l) {
    const std::string pre = "enc." + std::to_string(l);
    const Tensor qk = x + enc.positional;
    x = add_norm(pre + ".norm1", x, attention_block(pre + ".self_attn", qk, qk, x, enc.self_layout, nullptr));
    x = add_norm(pre + ".norm2", x, feed_forward(pre + ".ffn", x));
  }
  enc.memory = x;
  return enc;
}

std::vector<ModelOutput> GroundingModel::decode(const EncodedBatch& enc, bool record_attention) {
  const std::size_t b = enc.n_queries.size();
  const std::size_t t = enc.frame_count;
  const std::size_t len = t + enc.padded_queries;
  const std::size_t ppq = config_.proposals_per_query;

  std::vector<std::size_t> proposal_rows;
  AttentionLayout self_layout, cross_layout;
  self_layout.q_offsets.push_back(0);
  self_layout.k_offsets.push_back(0);
  cross_layout.q_offsets.push_back(0);
  cross_layout.k_offsets.push_back(0);
  cross_layout.key_mask = enc.self_layout.key_mask;
  std::size_t total = 0;
  for (std::size_t s = 0; s < b; ++s) {
    if (enc.n_queries[s] > config_.max_queries) {
      throw DimensionError("decode: " + std::to_string(enc.n_queries[s]) +
                           " queries exceed max_queries " + std::to_string(config_.max_queries));
    }
    const std::size_t n = ppq * enc.n_queries[s];
    for (std::size_t i = 0; i < n; ++i) proposal_rows.push_back(i);
    total += n;
    self_layout.q_offsets.push_back(total);
    self_layout.k_offsets.push_back(total);
    cross_layout.q_offsets.push_back(total);
    cross_layout.k_offsets.push_back((s + 1) * len);
  }
  self_layout.key_mask.assign(total, 0);

  std::vector<ModelOutput> outputs(b);
  if (total == 0) {
    for (std::size_t s = 0; s < b; ++s) {
      outputs[s].spans = Tensor::zeros({0, 2});
      outputs[s].correspondence = Tensor::zeros({0, 0});
    }
    return outputs;
  }

  const Tensor proposals = gather_rows(p("proposals"), proposal_rows);
  const Tensor memory_keys = enc.memory + enc.positional;
  Tensor tgt = proposals;
  const std::size_t layers = config_.n_dec_layers;
  std::vector<LayerPrediction> per_layer_stacked;
  std::vector<std::vector<LayerPrediction>> per_sample(b);

  for (std::size_t l = 0; l < layers; ++l) {
    const std::string pre = "dec." + std::to_string(l);
    const Tensor qk = tgt + proposals;
    tgt = add_norm(pre + ".norm1", tgt, attention_block(pre + ".self_attn", qk, qk, tgt, self_layout, nullptr));
    std::vector<AttentionMap> maps;
    tgt = add_norm(pre + ".norm2", tgt,
                   attention_block(pre + ".cross_attn", tgt + proposals, memory_keys, enc.memory,
                                   cross_layout, record_attention ? &maps : nullptr));
    tgt = add_norm(pre + ".norm3", tgt, feed_forward(pre + ".ffn", tgt));

    const Tensor out = layer_norm(tgt, p("dec.out_norm.gain"), p("dec.out_norm.bias"));
    const Tensor hidden = relu(linear(out, p("head.hidden.w"), p("head.hidden.b")));
    const Tensor spans = sort_pairs(sigmoid(linear(hidden, p("head.span.w"), p("head.span.b"))));

    for (std::size_t s = 0; s < b; ++s) {
      const std::size_t k = enc.n_queries[s];
      const std::size_t n = ppq * k;
      const std::size_t off = self_layout.q_offsets[s];
      LayerPrediction pred;
      if (n == 0) {
        pred.spans = Tensor::zeros({0, 2});
        pred.correspondence = Tensor::zeros({0, 0});
      } else {
        pred.spans = slice_rows(spans, off, n);
        const Tensor dec_rows = slice_rows(out, off, n);
        const Tensor text_rows = slice_rows(enc.memory, s * len + t, k);
        const Tensor logits =
            config_.similarity == Similarity::cosine
                ? scale(cosine_similarity(dec_rows, text_rows), 1.0 / config_.temperature)
                : scale(matmul(dec_rows, transpose(text_rows)),
                        1.0 / std::sqrt(static_cast<double>(config_.d_model)));
        pred.correspondence = softmax_rows(logits);
      }
      per_sample[s].push_back(std::move(pred));
      if (record_attention) {
        // Drop the padded query columns; they carry zero weight.
        const AttentionMap& m = maps[s];
        AttentionMap trimmed{m.rows, t + k, {}};
        for (std::size_t r = 0; r < m.rows; ++r) {
          trimmed.weights.insert(trimmed.weights.end(), m.weights.begin() + static_cast<std::ptrdiff_t>(r * m.cols),
                                 m.weights.begin() + static_cast<std::ptrdiff_t>(r * m.cols + t + k));
        }
        outputs[s].enc_dec_attention.push_back(std::move(trimmed));
      }
    }
  }

  for (std::size_t s = 0; s < b; ++s) {
    outputs[s].spans = per_sample[s].back().spans;
    outputs[s].correspondence = per_sample[s].back().correspondence;
    for (std::size_t l = 0; l + 1 < layers; ++l) outputs[s].aux_outputs.push_back(per_sample[s][l]);
  }
  return outputs;
}

std::vector<ModelOutput> GroundingModel::forward(const Batch& batch, bool record_attention) {
  return decode(encode(batch), record_attention);
}

ModelOutput GroundingModel::forward(const GroundingSample& sample, bool record_attention) {
  return std::move(forward(Batch::from_sample(sample), record_attention).front());
}

// ---------------------------------------------------------------------------
// Checkpoints

Checkpoint GroundingModel::to_checkpoint() const {
  Checkpoint ckpt;
  ckpt.metadata = json{{"model_config", json::parse(model_config_to_json(config_))}}.dump();
  for (const auto& [name, t] : params_) {
    ckpt.tensors.push_back(NamedTensor{name, t.shape(), std::vector<double>(t.data().begin(), t.data().end())});
  }
  return ckpt;
}

GroundingModel GroundingModel::from_checkpoint(const Checkpoint& ckpt) {
  json meta;
  try {
    meta = json::parse(ckpt.metadata);
  } catch (const json::parse_error& e) {
    throw DataError(std::string("checkpoint metadata: ") + e.what());
  }
  if (!meta.contains("model_config")) throw DataError("checkpoint metadata: missing model_config");
  ModelConfig config = model_config_from_json(meta["model_config"].dump());
  try {
    config.validate();
  } catch (const std::invalid_argument& e) {
    throw DataError(std::string("checkpoint: ") + e.what());
  }
  GroundingModel model(config, 0);
  model.load_parameters(ckpt);
  return model;
}

void GroundingModel::load_parameters(const Checkpoint& ckpt) {
  for (const auto& [name, t] : params_) {
    const NamedTensor* saved = ckpt.find(name);
    if (!saved) throw DataError("checkpoint: missing parameter " + name);
    if (saved->shape != t.shape()) {
      throw DataError("checkpoint: parameter " + name + " has shape " + shape_str(saved->shape) +
                      ", model expects " + shape_str(t.shape()));
    }
    Tensor target = t;
    std::copy(saved->data.begin(), saved->data.end(), target.mutable_data().begin());
  }
}

}  // namespace spanset
