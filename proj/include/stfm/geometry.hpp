#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <optional>
#include <utility>
#include <vector>

#include "stfm/error.hpp"

namespace stfm {

// Pinhole intrinsics in pixels.
struct CameraIntrinsics {
  double fx = 0, fy = 0, cx = 0, cy = 0;

  Eigen::Matrix3d k() const {
    Eigen::Matrix3d m;
    m << fx, 0, cx, 0, fy, cy, 0, 0, 1;
    return m;
  }
  // Pixel -> normalized image coordinates (z = 1).
  Eigen::Vector3d normalize(const Eigen::Vector2d& px) const {
    return {(px.x() - cx) / fx, (px.y() - cy) / fy, 1.0};
  }
  Eigen::Vector2d project(const Eigen::Vector3d& x_cam) const {
    return {fx * x_cam.x() / x_cam.z() + cx, fy * x_cam.y() / x_cam.z() + cy};
  }
  void validate() const;
};

// World -> camera transform: X_cam = R X_world + t.
struct CameraPose {
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();

  Eigen::Vector3d to_camera(const Eigen::Vector3d& xw) const {
    return rotation * xw + translation;
  }
  Eigen::Vector3d to_world(const Eigen::Vector3d& xc) const {
    return rotation.transpose() * (xc - translation);
  }
  Eigen::Vector3d center() const {
    return -rotation.transpose() * translation;
  }
  void validate() const;  // orthonormal, det +1, both within 1e-9
};

// Relative transform a -> b: X_b = R X_a + t.
struct RelativePose {
  Eigen::Matrix3d rotation;
  Eigen::Vector3d translation;
};
RelativePose relative_pose(const CameraPose& a, const CameraPose& b);

Eigen::Matrix3d skew(const Eigen::Vector3d& v);
// E = [t]x R for the a -> b relative pose.
Eigen::Matrix3d essential_from_poses(const CameraPose& a, const CameraPose& b);

// Per-pixel z-depth in meters; 0 marks invalid.
struct DepthMap {
  int height = 0, width = 0;
  std::vector<double> values;  // row-major

  double at(int y, int x) const {
    return values[static_cast<size_t>(y) * width + x];
  }
  double& at(int y, int x) {
    return values[static_cast<size_t>(y) * width + x];
  }
  bool valid(int y, int x) const { return at(y, x) > 0.0; }
  void validate() const;  // finite and >= 0
};

// One rendered view: RGB in [0,1] plus aligned depth and calibration.
struct RgbdFrame {
  int height = 0, width = 0;
  std::vector<double> image;  // H*W*3 row-major, RGB interleaved
  DepthMap depth;
  CameraIntrinsics intrinsics;
  CameraPose pose;

  double pixel(int y, int x, int c) const {
    return image[(static_cast<size_t>(y) * width + x) * 3 + c];
  }
  double& pixel(int y, int x, int c) {
    return image[(static_cast<size_t>(y) * width + x) * 3 + c];
  }
  void validate() const;  // H, W divisible by 8; image in [0,1]
};

// Ground-truth matches on the coarse grid plus subpixel fine targets.
//
// Grid convention: coarse cell (iy, ix) sits at image pixel (8*ix, 8*iy) and
// at fine-map pixel (4*ix, 4*iy); a fine-map pixel (fx, fy) sits at image
// pixel (2*fx, 2*fy). Fine targets are stored relative to the matched cell's
// fine-map position, so with stride 8 and fine scale 2 every offset component
// lies in [-2, 2] — inside a 5x5 fine window by construction.
struct CorrespondenceGT {
  int grid_h = 0, grid_w = 0;
  std::vector<std::pair<int, int>> coarse_matches;  // flat A-cell, B-cell
  std::vector<Eigen::Vector2d> fine_offsets;        // (dx, dy) in fine px
  std::vector<std::uint8_t> valid_mask;             // per A coarse cell
};

// Exact pixel coordinates of GT match k in frames A and B.
std::pair<Eigen::Vector2d, Eigen::Vector2d> gt_pixel_match(
    const CorrespondenceGT& gt, int k, int stride = 8, int fine_scale = 2);

// Unproject every A grid cell through its depth, transform into B, reproject;
// keep mutual nearest neighbors on the coarse grid, rejecting cells whose
// reprojected depth disagrees with B's depth map by more than 5% (occlusion).
CorrespondenceGT warp_correspondences(const RgbdFrame& frame_a,
                                      const RgbdFrame& frame_b,
                                      int coarse_grid_stride = 8,
                                      int fine_scale = 2);

// Subpixel correspondences on a step-strided pixel grid (depth-validated,
// no coarse-cell quantization) — the geometric oracle used by evaluation.
struct PixelMatch {
  Eigen::Vector2d a, b;
};
std::vector<PixelMatch> dense_correspondences(const RgbdFrame& frame_a,
                                              const RgbdFrame& frame_b,
                                              int step);

// Symmetric squared epipolar distance in normalized image coordinates:
// (x'ᵀEx)² · (1/‖Ex‖²₍₁,₂₎ + 1/‖Eᵀx'‖²₍₁,₂₎).
double epipolar_error(const Eigen::Vector2d& a_px, const Eigen::Vector2d& b_px,
                      const CameraIntrinsics& ka, const CameraIntrinsics& kb,
                      const RelativePose& pose_ab);
// Same metric given a precomputed essential matrix and normalized points.
double symmetric_epipolar_sq(const Eigen::Matrix3d& e,
                             const Eigen::Vector3d& xa,
                             const Eigen::Vector3d& xb);

// Robust estimate: essential matrix (with recovered pose) or homography.
struct TwoViewEstimate {
  Eigen::Matrix3d matrix = Eigen::Matrix3d::Zero();
  std::vector<std::uint8_t> inlier_mask;
  bool has_pose = false;
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();  // unit norm
};

// Normalized 8-point solver inside RANSAC, least-squares refit on the
// consensus set, singular values projected to (s, s, 0), then a
// cheirality-checked decomposition into (R, unit t).
//
// `threshold` is on the symmetric squared epipolar error in normalized
// coordinates. Zero-baseline input is inherently ambiguous: the rotation
// comes back near identity but the translation direction is arbitrary.
TwoViewEstimate estimate_essential_ransac(
    const std::vector<PixelMatch>& matches, const CameraIntrinsics& ka,
    const CameraIntrinsics& kb, double threshold, int iterations,
    std::uint64_t seed);

// Normalized 4-point DLT inside RANSAC; inliers by symmetric transfer error
// d(b, H a)² + d(a, H⁻¹ b)² < threshold_px²; refit on inliers; h₃₃ = 1.
TwoViewEstimate estimate_homography_ransac(
    const std::vector<PixelMatch>& matches, double threshold_px,
    int iterations, std::uint64_t seed);

struct PoseError {
  double rotation_deg = 0, translation_deg = 0, max_deg = 0;
};
// Rotation error arccos((tr(R_est R_gtᵀ) − 1)/2); translation error is the
// plain angle between unit vectors (antipodal directions score 180°).
PoseError pose_error(const Eigen::Matrix3d& r_est,
                     const Eigen::Vector3d& t_est, const CameraPose& gt_a,
                     const CameraPose& gt_b);

// Mean distance between the four image corners mapped by both homographies.
double corner_error(const Eigen::Matrix3d& h_est, const Eigen::Matrix3d& h_gt,
                    int width, int height);

// Exact area under the cumulative-recall-vs-error step curve on [0, t],
// normalized by t, as a percentage; one value per threshold. Non-finite
// errors count as failures at +infinity.
std::vector<double> auc(const std::vector<double>& errors,
                        const std::vector<double>& thresholds);

}  // namespace stfm
