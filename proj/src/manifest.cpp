#include "stfm/manifest.hpp"

#include "json.hpp"

#include "stfm/image_io.hpp"

namespace stfm {

std::string content_digest(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  static const char* hex = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<size_t>(i)] = hex[h & 0xf];
    h >>= 4;
  }
  return out;
}

std::string digest_file(const std::string& path) {
  return content_digest(read_file(path));
}

std::string manifest_to_json(const RunManifest& manifest) {
  nlohmann::json j;
  j["command"] = manifest.command;
  j["seed"] = manifest.seed;
  if (!manifest.config_json.empty()) {
    // Embed as parsed JSON when possible so the manifest stays one document.
    try {
      j["config"] = nlohmann::json::parse(manifest.config_json);
    } catch (const nlohmann::json::exception&) {
      j["config"] = manifest.config_json;
    }
  }
  nlohmann::json inputs = nlohmann::json::object();
  for (const auto& [path, digest] : manifest.input_digests)
    inputs[path] = digest;
  j["inputs"] = inputs;
  j["outputs"] = manifest.outputs;
  return j.dump(2) + "\n";
}

void write_manifest(const RunManifest& manifest, const std::string& path) {
  write_file_atomic(path, manifest_to_json(manifest));
}

}  // namespace stfm
