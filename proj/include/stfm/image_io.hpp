#pragma once

#include <string>
#include <vector>

#include "stfm/geometry.hpp"

namespace stfm {

// Writes content to a temp sibling and renames it into place, so readers
// never observe a partially written file.
void write_file_atomic(const std::string& path, const std::string& content);
std::string read_file(const std::string& path);

// Binary P6, 8-bit. Values quantized with round(v * 255).
void write_ppm(const std::string& path, int height, int width,
               const std::vector<double>& rgb01);

struct PpmImage {
  int height = 0, width = 0;
  std::vector<double> rgb;  // H*W*3, values k/255
};
PpmImage read_ppm(const std::string& path);

// Depth container: 16-byte header (magic "DPT1", height u32 LE, width u32 LE,
// reserved u32), then H*W little-endian f32, row-major, meters.
void write_depth(const std::string& path, const DepthMap& depth);
DepthMap read_depth(const std::string& path);

// The value a double depth becomes after a trip through 32-bit storage.
inline double to_storage_precision(double v) {
  return static_cast<double>(static_cast<float>(v));
}

}  // namespace stfm
