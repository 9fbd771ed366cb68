#pragma once

#include <optional>
#include <string>

#include "stfm/model.hpp"

namespace stfm {

struct Checkpoint {
  ModelParams params;
  MatcherConfig config;
};

// Binary layout: magic "STFM1" (5 bytes), u32 parameter count, then per
// parameter u16 name length, UTF-8 name, u8 rank, u32 per dimension, and the
// values as little-endian 32-bit floats in row-major order. The matcher
// configuration lives in a JSON sidecar at `path + ".json"`.
void save_checkpoint(const ModelParams& params, const MatcherConfig& config,
                     const std::string& path);

// Loads both files and verifies the parameter set against the architecture
// the sidecar describes (exact names and shapes). When `expected` is given,
// the stored configuration must match it field for field; a channel-count
// difference is the classic teacher-for-student mix-up and is reported as
// such. Malformed bytes raise FormatError naming the offset.
Checkpoint load_checkpoint(const std::string& path,
                           const std::optional<MatcherConfig>& expected = {});

std::string config_to_json(const MatcherConfig& config);
MatcherConfig config_from_json(const std::string& text);

}  // namespace stfm
