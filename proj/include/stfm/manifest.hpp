#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace stfm {

// 64-bit FNV-1a of the bytes, as 16 hex digits. Content addressing for run
// reproducibility, not cryptography.
std::string content_digest(const std::string& bytes);
std::string digest_file(const std::string& path);

// Everything needed to reproduce a run: the command, the fully resolved
// configuration, the seed, digests of the inputs, and where outputs go.
// Written before any long-running work starts.
struct RunManifest {
  std::string command;
  std::string config_json;  // resolved configuration, flags already applied
  std::uint64_t seed = 0;
  std::vector<std::pair<std::string, std::string>> input_digests;
  std::vector<std::string> outputs;
};

std::string manifest_to_json(const RunManifest& manifest);
void write_manifest(const RunManifest& manifest, const std::string& path);

}  // namespace stfm
