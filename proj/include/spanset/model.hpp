#ifndef SPANSET_MODEL_HPP
#define SPANSET_MODEL_HPP

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "spanset/checkpoint.hpp"
#include "spanset/corpus.hpp"
#include "spanset/interval.hpp"
#include "spanset/tensor.hpp"

namespace spanset {

enum class Similarity { cosine, dot };

struct ModelConfig {
  std::size_t d_in = 32;
  std::size_t d_model = 512;
  /// 0 selects d_model / 64 (at least 1).
  std::size_t n_heads = 0;
  std::size_t n_enc_layers = 4;
  std::size_t n_dec_layers = 4;
  std::size_t ffn_width = 2048;
  std::size_t proposals_per_query = 10;
  std::size_t max_queries = 4;
  std::size_t frame_count = 64;
  double dropout = 0.1;
  /// Softmax temperature applied to the proposal/query similarity.
  double temperature = 0.07;
  Similarity similarity = Similarity::cosine;
  bool video_positional = true;
  bool text_positional = true;

  std::size_t heads() const noexcept;
  std::size_t max_proposals() const noexcept { return proposals_per_query * max_queries; }
  /// Throws std::invalid_argument on inconsistent settings.
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

std::string model_config_to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const std::string& text);

/// Sinusoidal table: row p, column 2i holds sin(p / 10000^(2i/width)),
/// column 2i+1 the matching cosine.
std::vector<double> sinusoid_table(std::size_t positions, std::size_t width);

/// Separate fixed encodings for frame positions and query slots.
struct PositionalEncoding {
  std::vector<double> video;  // frame_count x d_model
  std::vector<double> text;   // max_queries x d_model

  static PositionalEncoding build(const ModelConfig& config);
};

/// Ordered set of named trainable tensors.
class Parameters {
 public:
  Tensor& add(const std::string& name, Tensor t);
  const Tensor& operator[](const std::string& name) const;
  std::size_t size() const noexcept { return entries_.size(); }
  std::size_t scalar_count() const noexcept;

  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }
  std::vector<Tensor> tensors() const;
  void zero_grad();

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Mini-batch of samples whose query slots are zero-padded to a common count.
struct Batch {
  std::size_t size = 0;
  std::size_t frame_count = 0;
  std::size_t feature_dim = 0;
  std::size_t padded_queries = 0;
  std::vector<std::size_t> n_queries;  // real query count per sample
  Tensor frames;                       // (size * frame_count) x feature_dim
  Tensor queries;                      // (size * padded_queries) x feature_dim

  /// `pad_to` raises the padded query count above the batch maximum.
  static Batch from_samples(std::span<const GroundingSample* const> samples, std::size_t pad_to = 0);
  static Batch from_sample(const GroundingSample& sample, std::size_t pad_to = 0);
  std::size_t sequence_length() const noexcept { return frame_count + padded_queries; }
};

/// Encoder output for a batch: one (T + K_pad) row block per sample.
struct EncodedBatch {
  Tensor memory;
  Tensor positional;  // same shape as memory
  std::size_t frame_count = 0;
  std::size_t padded_queries = 0;
  std::vector<std::size_t> n_queries;
  AttentionLayout self_layout;  // encoder segments, padded query slots masked
};

struct LayerPrediction {
  Tensor spans;           // N x 2, each row (s, e) with s <= e
  Tensor correspondence;  // N x K, rows are probability vectors
};

struct ModelOutput {
  Tensor spans;
  Tensor correspondence;
  /// Intermediate decoder layers, first to penultimate.
  std::vector<LayerPrediction> aux_outputs;
  /// Encoder-decoder attention of every decoder layer, N x (T + K), when recorded.
  std::vector<AttentionMap> enc_dec_attention;

  std::size_t n_predictions() const { return spans.rows(); }
  std::size_t n_queries() const { return correspondence.cols(); }
  std::vector<TimeSpan> span_values() const;
  /// Index 0 is the final layer; 1.. are the auxiliary outputs in layer order.
  LayerPrediction layer(std::size_t i) const;
  std::size_t layer_count() const noexcept { return 1 + aux_outputs.size(); }
};

std::vector<TimeSpan> spans_from_tensor(const Tensor& spans);

/// Transformer encoder-decoder over concatenated frame and query features,
/// decoding proposals_per_query * K learnable proposals in parallel.
class GroundingModel {
 public:
  /// Xavier-uniform weights, zero biases, unit layer-norm gains and
  /// proposal embeddings drawn from N(0, 1) * 0.02.
  GroundingModel(ModelConfig config, std::uint64_t seed);

  const ModelConfig& config() const noexcept { return config_; }
  Parameters& parameters() noexcept { return params_; }
  const Parameters& parameters() const noexcept { return params_; }

  void set_training(bool training) noexcept { training_ = training; }
  bool training() const noexcept { return training_; }
  void reseed_dropout(std::uint64_t seed) { dropout_rng_.seed(seed); }

  EncodedBatch encode(const Batch& batch);
  std::vector<ModelOutput> decode(const EncodedBatch& encoded, bool record_attention = false);
  std::vector<ModelOutput> forward(const Batch& batch, bool record_attention = false);
  ModelOutput forward(const GroundingSample& sample, bool record_attention = false);

  /// Checkpoint with the config as metadata and one tensor per parameter.
  Checkpoint to_checkpoint() const;
  /// Throws DataError when the checkpoint's config or shapes do not fit.
  static GroundingModel from_checkpoint(const Checkpoint& ckpt);
  /// Copies parameter values; throws DataError on a missing or mis-shaped entry.
  void load_parameters(const Checkpoint& ckpt);

 private:
  Tensor attention_block(const std::string& prefix, const Tensor& query_in, const Tensor& key_in,
                         const Tensor& value_in, const AttentionLayout& layout,
                         std::vector<AttentionMap>* maps);
  Tensor feed_forward(const std::string& prefix, const Tensor& x);
  Tensor add_norm(const std::string& prefix, const Tensor& x, const Tensor& branch);
  const Tensor& p(const std::string& name) const { return params_[name]; }

  ModelConfig config_;
  PositionalEncoding pe_;
  Parameters params_;
  bool training_ = false;
  std::mt19937_64 dropout_rng_;
};

}  // namespace spanset

#endif  // SPANSET_MODEL_HPP
