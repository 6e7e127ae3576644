#ifndef SPANSET_MANIFEST_HPP
#define SPANSET_MANIFEST_HPP

#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace spanset {

/// SHA-1 of "blob <size>\0<content>", the id git gives the same bytes.
std::string git_blob_sha1(std::string_view content);
/// Throws DataError when the file cannot be read.
std::string git_blob_sha1_file(const std::filesystem::path& path);

struct ManifestFile {
  std::string path;
  std::string sha1;
};

/// Record of one command invocation: configuration, hashed inputs and
/// outputs, wall time.
struct RunManifest {
  std::string command;
  /// Named JSON documents (corpus_spec, model_config, train_config, ...).
  std::vector<std::pair<std::string, std::string>> config;
  std::vector<ManifestFile> inputs;
  std::vector<ManifestFile> outputs;
  double seconds = 0.0;

  void add_input(const std::filesystem::path& path);
  void add_output(const std::filesystem::path& path);
  std::string to_json() const;
  /// Writes <dir>/manifest.json, replacing any earlier one.
  std::filesystem::path write(const std::filesystem::path& dir) const;
};

}  // namespace spanset

#endif  // SPANSET_MANIFEST_HPP
