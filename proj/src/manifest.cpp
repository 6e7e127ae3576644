#include "spanset/manifest.hpp"

#include <openssl/evp.h>

#include <json.hpp>

#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "spanset/error.hpp"

namespace spanset {

using json = nlohmann::json;

std::string git_blob_sha1(std::string_view content) {
  const std::string header = "blob " + std::to_string(content.size()) + '\0';
  const std::string payload = header + std::string(content);
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(payload.data(), payload.size(), digest, &len, EVP_sha1(), nullptr) != 1) {
    throw std::runtime_error("sha1 digest failed");
  }
  std::string hex;
  char buf[3];
  for (unsigned int i = 0; i < len; ++i) {
    const unsigned char c = digest[i];
    std::snprintf(buf, sizeof buf, "%02x", c);
    hex += buf;
  }
  return hex;
}

std::string git_blob_sha1_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return git_blob_sha1(ss.str());
}

void RunManifest::add_input(const std::filesystem::path& path) {
  inputs.push_back(ManifestFile{path.string(), git_blob_sha1_file(path)});
}

void RunManifest::add_output(const std::filesystem::path& path) {
  outputs.push_back(ManifestFile{path.string(), git_blob_sha1_file(path)});
}

std::string RunManifest::to_json() const {
  json cfg = json::object();
  for (const auto& [name, text] : config) cfg[name] = json::parse(text);
  auto files = [](const std::vector<ManifestFile>& list) {
    json arr = json::array();
    for (const auto& f : list) arr.push_back({{"path", f.path}, {"sha1", f.sha1}});
    return arr;
  };
  return json{{"command", command},
              {"config", cfg},
              {"inputs", files(inputs)},
              {"outputs", files(outputs)},
              {"seconds", seconds}}
      .dump(2);
}

std::filesystem::path RunManifest::write(const std::filesystem::path& dir) const {
  const auto path = dir / "manifest.json";
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << to_json() << '\n';
  return path;
}

}  // namespace spanset
