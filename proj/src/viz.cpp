#include "stfm/viz.hpp"

#include <algorithm>
#include <cmath>

#include "stfm/error.hpp"
#include "stfm/image_io.hpp"

namespace stfm {
namespace {

struct Canvas {
  int height = 0, width = 0;
  std::vector<double> rgb;  // H*W*3

  void set(int y, int x, const double color[3]) {
    if (y < 0 || y >= height || x < 0 || x >= width) return;
    double* px = &rgb[(static_cast<size_t>(y) * width + x) * 3];
    px[0] = color[0];
    px[1] = color[1];
    px[2] = color[2];
  }
};

void blit(Canvas& canvas, const RgbdFrame& frame, int x_offset) {
  for (int y = 0; y < frame.height; ++y)
    for (int x = 0; x < frame.width; ++x)
      for (int c = 0; c < 3; ++c)
        canvas.rgb[(static_cast<size_t>(y) * canvas.width + x + x_offset) * 3 +
                   c] = frame.pixel(y, x, c);
}

void draw_line(Canvas& canvas, double x0, double y0, double x1, double y1,
               const double color[3]) {
  const double dx = x1 - x0, dy = y1 - y0;
  const int steps =
      std::max(1, static_cast<int>(std::ceil(std::max(std::fabs(dx),
                                                      std::fabs(dy)))));
  for (int s = 0; s <= steps; ++s) {
    const double t = static_cast<double>(s) / steps;
    canvas.set(static_cast<int>(std::lround(y0 + t * dy)),
               static_cast<int>(std::lround(x0 + t * dx)), color);
  }
}

}  // namespace

void confidence_color(double confidence, double rgb[3]) {
  const double c = std::clamp(confidence, 0.0, 1.0);
  rgb[0] = c;
  rgb[1] = 0.15;
  rgb[2] = 1.0 - c;
}

void render_matches(const RgbdFrame& frame_a, const RgbdFrame& frame_b,
                    const std::vector<ScoredMatch>& matches,
                    const std::vector<std::uint8_t>& inlier_mask,
                    const std::string& path) {
  if (!inlier_mask.empty() && inlier_mask.size() != matches.size()) {
    throw ContractError("render_matches: inlier mask does not align with "
                        "the match set");
  }
  Canvas canvas;
  canvas.height = std::max(frame_a.height, frame_b.height);
  canvas.width = frame_a.width + frame_b.width;
  canvas.rgb.assign(static_cast<size_t>(canvas.height) * canvas.width * 3,
                    0.0);
  blit(canvas, frame_a, 0);
  blit(canvas, frame_b, frame_a.width);

  static constexpr double kOutlierRed[3] = {1.0, 0.0, 0.0};
  for (size_t i = 0; i < matches.size(); ++i) {
    const ScoredMatch& m = matches[i];
    double color[3];
    if (!inlier_mask.empty() && inlier_mask[i] == 0) {
      color[0] = kOutlierRed[0];
      color[1] = kOutlierRed[1];
      color[2] = kOutlierRed[2];
    } else {
      confidence_color(m.confidence, color);
    }
    draw_line(canvas, m.a.x(), m.a.y(), m.b.x() + frame_a.width, m.b.y(),
              color);
  }
  write_ppm(path, canvas.height, canvas.width, canvas.rgb);
}

}  // namespace stfm
