#ifndef SPANSET_CHECKPOINT_HPP
#define SPANSET_CHECKPOINT_HPP

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "spanset/tensor.hpp"

namespace spanset {

/// Binary layout, all integers and floats little-endian:
///
///   magic "SPANCKPT" | u32 version | u64 meta_len | meta bytes (JSON text)
///   u64 count | count x { u32 name_len | name | u32 ndim | u64 dims[ndim] | f64 data[] }
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  Shape shape;
  std::vector<double> data;
};

struct Checkpoint {
  std::string metadata;
  std::vector<NamedTensor> tensors;

  /// nullptr when absent.
  const NamedTensor* find(const std::string& name) const;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
/// Throws DataError on a bad magic, unsupported version or truncated file.
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace spanset

#endif  // SPANSET_CHECKPOINT_HPP
