#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "stfm/checkpoint.hpp"
#include "stfm/geometry.hpp"
#include "stfm/scene.hpp"
#include "stfm/train.hpp"

namespace stfm {

struct ScoredMatch {
  Eigen::Vector2d a = Eigen::Vector2d::Zero();
  Eigen::Vector2d b = Eigen::Vector2d::Zero();
  double confidence = 0.0;
};

// Produces matches for one dataset pair; the evaluation drivers are generic
// over this so oracle correspondences can stand in for a model.
using MatchFn = std::function<std::vector<ScoredMatch>(const ScenePair&)>;

// Runs the checkpointed matcher on each pair; input channels (RGB vs RGB-D)
// follow the checkpoint's configuration.
MatchFn model_matcher(const Checkpoint& checkpoint,
                      DepthNorm depth_norm = DepthNorm::kFixed10);

// Ground-truth correspondences on a step-strided pixel grid, confidence 1.
MatchFn oracle_matcher(int step = 4);

struct PairEval {
  std::string pair_id;
  int n_matches = 0;
  int n_inliers = 0;
  // Pose runs: max of rotation/translation angle in degrees. Homography
  // runs: mean corner error in pixels. Estimation failure -> +infinity.
  double error = 0.0;
};

struct EvalReport {
  std::string kind;  // "pose" or "homography"
  std::vector<double> thresholds;
  std::vector<double> auc_values;  // percentages, one per threshold
  double mean_inliers = 0.0;
  std::vector<PairEval> pairs;
  std::string config_digest;

  std::string to_json() const;
  std::string to_csv() const;
};

struct PoseEvalOptions {
  std::vector<double> thresholds_deg = {5.0, 10.0, 20.0};
  // Symmetric squared epipolar error in normalized coordinates, both for
  // RANSAC consensus and for the reported inlier counts.
  double ransac_threshold = 5e-4;
  int ransac_iterations = 500;
  std::uint64_t seed = 0;
};

// match -> essential RANSAC -> pose error (max angle) per pair; AUC over the
// exact cumulative step integral. Failed estimates score +infinity; inlier
// counts are measured against the ground-truth pose.
EvalReport eval_pose(const MatchFn& match_fn, const std::string& dataset,
                     const PoseEvalOptions& options = {});
EvalReport eval_pose(const Checkpoint& checkpoint, const std::string& dataset,
                     const PoseEvalOptions& options = {});

struct HomographyEvalOptions {
  std::vector<double> thresholds_px = {3.0, 5.0, 10.0};
  int top_k = 1000;  // matches kept, by descending confidence
  double ransac_threshold_px = 3.0;
  int ransac_iterations = 500;
  std::uint64_t seed = 0;
};

// Planar-dataset protocol: top-k matches by confidence, homography RANSAC,
// mean corner error against the stored ground truth. Pairs without a stored
// homography are skipped with a warning.
EvalReport eval_homography(const MatchFn& match_fn, const std::string& dataset,
                           const HomographyEvalOptions& options = {});
EvalReport eval_homography(const Checkpoint& checkpoint,
                           const std::string& dataset,
                           const HomographyEvalOptions& options = {});

// Fraction of matches whose reprojection error under the GT homography falls
// below each threshold. Zero matches -> all zeros with a warning.
std::vector<double> mma(
    const std::vector<ScoredMatch>& matches, const Eigen::Matrix3d& gt_h,
    const std::vector<double>& thresholds_px = {1, 2, 3, 4, 5, 6, 7, 8, 9,
                                                10});

// Matches with symmetric epipolar error below the threshold under the GT
// relative pose.
int count_inliers(const std::vector<ScoredMatch>& matches,
                  const CameraIntrinsics& ka, const CameraIntrinsics& kb,
                  const RelativePose& gt_pose, double threshold = 5e-4);

struct ParamCount {
  long total = 0;
  std::vector<std::pair<std::string, long>> by_module;  // prefix -> count
};

// Exact trainable-parameter count, grouped by top-level name prefix
// (backbone / coarse / fine).
ParamCount param_count(const Checkpoint& checkpoint);

}  // namespace stfm
