#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "stfm/geometry.hpp"

namespace stfm {

enum class SceneKind { kTexturedPlanes, kBoxRoom };

SceneKind scene_kind_from_string(const std::string& name);
std::string to_string(SceneKind kind);

struct SceneConfig {
  SceneKind kind = SceneKind::kTexturedPlanes;
  // 0 = uniform-color surfaces, 1 = a distinct procedural texture per plane.
  // Values in between shrink the texture bank so patterns repeat across
  // planes and leave part of the scene untextured.
  double richness = 1.0;
  int height = 64;
  int width = 64;
  // 0 = draw the patch count from the seed (3..8). An explicit 1 produces a
  // single large plane, the only configuration with a ground-truth homography.
  int plane_count = 0;

  void validate() const;
};

// One-sided rectangular patch: origin + u*edge_u + v*edge_v for u,v in [0,1].
// Only the side the unit normal points toward is visible; rays arriving from
// behind pass through. Painting is procedural from (u, v).
struct PlanePatch {
  Eigen::Vector3d origin = Eigen::Vector3d::Zero();
  Eigen::Vector3d edge_u = Eigen::Vector3d::UnitX();
  Eigen::Vector3d edge_v = Eigen::Vector3d::UnitY();
  Eigen::Vector3d normal = Eigen::Vector3d::UnitZ();

  int pattern = 0;  // 0 flat, 1 checker, 2 stripes, 3 dots, 4 rings
  Eigen::Vector3d color_a = Eigen::Vector3d::Ones();
  Eigen::Vector3d color_b = Eigen::Vector3d::Zero();
  double tiles_u = 4.0;
  double tiles_v = 4.0;
  double phase = 0.0;
};

struct Scene {
  SceneConfig config;
  std::vector<PlanePatch> patches;
  Eigen::Vector3d light = Eigen::Vector3d(0.0, 0.0, -1.0);  // toward the source
  double ambient = 0.35;
};

// Deterministic: the same (seed, config) always yields the same scene.
Scene generate_scene(std::uint64_t seed, const SceneConfig& config);

// Per-frame photometric jitter applied after shading.
struct FrameJitter {
  double brightness = 0.0;  // additive offset, result clamped to [0, 1]
  double gamma = 1.0;       // applied before the offset
};

struct RayHit {
  double t = 0.0;  // z-depth along the ray; 0 = no hit
  int patch = -1;
  double u = 0.0, v = 0.0;  // patch coordinates of the hit
};

// Casts the ray through pixel (px, py) — subpixel coordinates are fine — and
// returns the nearest front-facing patch intersection.
RayHit trace_ray(const Scene& scene, const CameraPose& pose,
                 const CameraIntrinsics& intrinsics, double px, double py);

struct RenderedView {
  std::vector<double> image;  // H*W*3, RGB in [0,1]
  DepthMap depth;             // z-depth in meters; 0 where no patch is hit
  std::vector<int> patch_id;  // H*W, -1 = background
};

RenderedView render_view(const Scene& scene, const CameraPose& pose,
                         const CameraIntrinsics& intrinsics,
                         const FrameJitter& jitter = {});

struct ScenePair {
  RgbdFrame frame_a, frame_b;
  double overlap_score = 0.0;
  std::optional<Eigen::Matrix3d> gt_homography;  // single-plane scenes only
};

// Ray-cast rendering of both views with exact per-pixel depth, Lambertian
// shading, and optional photometric jitter. overlap_score is the fraction of
// valid frame-A coarse cells with a mutual-NN match in frame B; zero-overlap
// poses yield overlap_score 0 rather than an error.
ScenePair render_pair(const Scene& scene, const CameraPose& pose_a,
                      const CameraPose& pose_b,
                      const CameraIntrinsics& intrinsics,
                      const FrameJitter& jitter_a = {},
                      const FrameJitter& jitter_b = {});

struct DatasetIndexEntry {
  std::string pair_id;
  double overlap = 0.0;
};

// Renders n_pairs scene pairs whose overlap falls in [overlap_lo, overlap_hi]
// (poses are rejection-sampled; 1000 consecutive rejections for one pair is a
// configuration error) and writes them under out_dir:
//   <out_dir>/index.json                      [{pair_id, overlap}, ...]
//   <out_dir>/<pair_id>/{a,b}.ppm             binary P6, 8-bit RGB
//   <out_dir>/<pair_id>/{a,b}.depth           DPT1 header + f32 LE row-major
//   <out_dir>/<pair_id>/meta.json             intrinsics, poses, gt_homography
// Stored overlaps are recomputed after depth is narrowed to 32-bit storage
// precision, so reloading a pair reproduces them. Byte-identical for a fixed
// (seed, config) regardless of thread count.
std::vector<DatasetIndexEntry> build_dataset(std::uint64_t seed, int n_pairs,
                                             double overlap_lo,
                                             double overlap_hi,
                                             const std::string& out_dir,
                                             const SceneConfig& config,
                                             int threads = 1);

std::vector<DatasetIndexEntry> load_index(const std::string& root);

// Reads one pair back. overlap_score is recomputed from the stored frames
// (training needs the correspondences anyway); it matches the index entry to
// within round-trip precision.
ScenePair load_pair(const std::string& root, const std::string& pair_id);

}  // namespace stfm
