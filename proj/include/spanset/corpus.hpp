#ifndef SPANSET_CORPUS_HPP
#define SPANSET_CORPUS_HPP

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "spanset/assignment.hpp"
#include "spanset/interval.hpp"

namespace spanset {

/// One synthetic "video": frame features, query features and the span each
/// query describes. targets[i] always refers to query row i.
struct GroundingSample {
  std::uint64_t sample_id = 0;
  std::size_t frame_count = 0;
  std::size_t feature_dim = 0;
  std::vector<double> frames;   // frame_count x feature_dim, row-major
  std::vector<double> queries;  // n_queries() x feature_dim, row-major
  std::vector<Target> targets;

  std::size_t n_queries() const noexcept { return targets.size(); }
  std::span<const double> frame(std::size_t t) const {
    return std::span<const double>(frames).subspan(t * feature_dim, feature_dim);
  }
  std::span<const double> query(std::size_t k) const {
    return std::span<const double>(queries).subspan(k * feature_dim, feature_dim);
  }

  friend bool operator==(const GroundingSample&, const GroundingSample&) = default;
};

struct CorpusSpec {
  std::size_t n_samples = 1000;
  std::size_t frame_count = 64;
  std::size_t feature_dim = 32;
  std::size_t min_queries = 1;
  std::size_t max_queries = 4;
  double noise_sigma = 0.1;
  std::size_t signature_bank_size = 64;
  /// Seeds the signature bank. Splits generated with different `seed` but the
  /// same `bank_seed` share event signatures.
  std::uint64_t bank_seed = 0;
  std::uint64_t seed = 0;
  /// Id of the first sample; ids run consecutively from here.
  std::uint64_t first_sample_id = 0;

  /// Throws DataError for T < 4, d_in < 4, an empty or inverted query range,
  /// or a bank too small to give every sample distinct signatures.
  void validate() const;

  friend bool operator==(const CorpusSpec&, const CorpusSpec&) = default;
};

using Corpus = std::vector<GroundingSample>;

/// Unit-norm event signatures shared by every sample of a spec.
std::vector<std::vector<double>> signature_bank(const CorpusSpec& spec);

/// Deterministic in (spec, sample_id).
GroundingSample generate_sample(const CorpusSpec& spec,
                                const std::vector<std::vector<double>>& bank,
                                std::uint64_t sample_id);

Corpus generate(const CorpusSpec& spec);

/// Non-learned baseline: per query, threshold frame/query cosine similarity at
/// 0.5 and return the longest run of frames above it. Falls back to the single
/// best frame when none passes.
std::vector<TimeSpan> oracle_localize(const GroundingSample& sample);

/// Frame index range [first, last] whose centers lie in the span; empty when
/// first > last.
std::pair<std::size_t, std::size_t> frames_covered(const TimeSpan& span, std::size_t frame_count);

// Corpus files are JSON lines, one sample per line; the spec lives in a
// sidecar "<path>.header.json". Doubles are written in shortest round-trip
// form, so reloading is bit-exact.

std::filesystem::path corpus_header_path(const std::filesystem::path& corpus_path);
void save_corpus(const std::filesystem::path& path, const CorpusSpec& spec, const Corpus& corpus);
/// Throws DataError on missing files or malformed records.
Corpus load_corpus(const std::filesystem::path& path, CorpusSpec* spec = nullptr);

std::string spec_to_json(const CorpusSpec& spec);
/// Unknown keys are rejected; missing keys keep their defaults.
CorpusSpec spec_from_json(const std::string& text);

}  // namespace spanset

#endif  // SPANSET_CORPUS_HPP
