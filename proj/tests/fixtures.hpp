#ifndef SPANSET_TESTS_FIXTURES_HPP
#define SPANSET_TESTS_FIXTURES_HPP

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>

#include "spanset/corpus.hpp"
#include "spanset/model.hpp"

namespace fixture {

inline spanset::CorpusSpec micro_spec(std::size_t n, std::uint64_t seed = 1) {
  spanset::CorpusSpec spec;
  spec.n_samples = n;
  spec.frame_count = 8;
  spec.feature_dim = 6;
  spec.min_queries = 1;
  spec.max_queries = 2;
  spec.signature_bank_size = 8;
  spec.seed = seed;
  return spec;
}

/// T=8, K<=2, d_model=16, one encoder and one decoder layer.
inline spanset::ModelConfig micro_config() {
  spanset::ModelConfig c;
  c.d_in = 6;
  c.d_model = 16;
  c.n_heads = 2;
  c.n_enc_layers = 1;
  c.n_dec_layers = 1;
  c.ffn_width = 24;
  c.proposals_per_query = 3;
  c.max_queries = 2;
  c.frame_count = 8;
  c.dropout = 0.0;
  return c;
}

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("spanset-" + tag + "-" + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

}  // namespace fixture

#endif  // SPANSET_TESTS_FIXTURES_HPP
