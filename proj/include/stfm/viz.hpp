#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "stfm/eval.hpp"
#include "stfm/geometry.hpp"

namespace stfm {

// Writes a P6 PPM of the two frames side by side (A left, B right) with one
// line per match, colored blue (confidence 0) to red (confidence 1);
// matches flagged as outliers render pure red regardless of confidence.
// An empty inlier_mask treats every match as an inlier; otherwise the mask
// must align with the matches. An empty match set renders just the frames.
void render_matches(const RgbdFrame& frame_a, const RgbdFrame& frame_b,
                    const std::vector<ScoredMatch>& matches,
                    const std::vector<std::uint8_t>& inlier_mask,
                    const std::string& path);

// The line color for a confidence value; exposed for tests.
void confidence_color(double confidence, double rgb[3]);

}  // namespace stfm
