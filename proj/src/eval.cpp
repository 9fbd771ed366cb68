#include "stfm/eval.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <limits>
#include <sstream>

#include "json.hpp"

#include "stfm/error.hpp"
#include "stfm/manifest.hpp"
#include "stfm/rng.hpp"

namespace stfm {
namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

Tensor frame_to_tensor(const RgbdFrame& frame, bool with_depth,
                       double depth_lo, double depth_scale) {
  const int hw = frame.height * frame.width;
  const int channels = with_depth ? 4 : 3;
  std::vector<double> v(static_cast<size_t>(channels * hw));
  for (int px = 0; px < hw; ++px) {
    for (int c = 0; c < 3; ++c)
      v[static_cast<size_t>(c) * hw + px] =
          frame.image[static_cast<size_t>(px) * 3 + c];
    if (with_depth) {
      const double d = frame.depth.values[static_cast<size_t>(px)];
      v[static_cast<size_t>(3) * hw + px] =
          d > 0.0 ? (d - depth_lo) * depth_scale : 0.0;
    }
  }
  return Tensor::from({channels, frame.height, frame.width}, std::move(v),
                      false);
}

void pair_depth_norm(const ScenePair& pair, DepthNorm norm, double& lo,
                     double& scale) {
  if (norm == DepthNorm::kFixed10) {
    lo = 0.0;
    scale = 0.1;
    return;
  }
  double mn = 0.0, mx = 0.0;
  bool any = false;
  for (const RgbdFrame* frame : {&pair.frame_a, &pair.frame_b}) {
    for (double d : frame->depth.values) {
      if (d <= 0.0) continue;
      if (!any || d < mn) mn = d;
      if (!any || d > mx) mx = d;
      any = true;
    }
  }
  lo = any ? mn : 0.0;
  scale = 1.0 / std::max(mx - mn, 1e-9);
}

std::vector<PixelMatch> to_pixel_matches(
    const std::vector<ScoredMatch>& matches) {
  std::vector<PixelMatch> out;
  out.reserve(matches.size());
  for (const ScoredMatch& m : matches) out.push_back({m.a, m.b});
  return out;
}

nlohmann::json report_json(const EvalReport& report) {
  nlohmann::json j;
  j["kind"] = report.kind;
  j["thresholds"] = report.thresholds;
  j["auc"] = report.auc_values;
  j["mean_inliers"] = report.mean_inliers;
  j["config_digest"] = report.config_digest;
  nlohmann::json rows = nlohmann::json::array();
  for (const PairEval& p : report.pairs) {
    nlohmann::json row;
    row["pair_id"] = p.pair_id;
    row["n_matches"] = p.n_matches;
    row["n_inliers"] = p.n_inliers;
    // JSON has no infinity literal; failures serialize as null.
    if (std::isfinite(p.error)) {
      row["error"] = p.error;
    } else {
      row["error"] = nullptr;
    }
    rows.push_back(row);
  }
  j["pairs"] = rows;
  return j;
}

}  // namespace

MatchFn model_matcher(const Checkpoint& checkpoint, DepthNorm depth_norm) {
  const bool with_depth = checkpoint.config.input_channels == 4;
  // The callable owns a copy; tensors share storage so this is shallow.
  return [checkpoint, with_depth, depth_norm](const ScenePair& pair) {
    double lo = 0.0, scale = 0.1;
    pair_depth_norm(pair, depth_norm, lo, scale);
    const Tensor in_a = frame_to_tensor(pair.frame_a, with_depth, lo, scale);
    const Tensor in_b = frame_to_tensor(pair.frame_b, with_depth, lo, scale);
    const MatchOutput out =
        match_pair(in_a, in_b, checkpoint.params, checkpoint.config);
    std::vector<ScoredMatch> matches;
    matches.reserve(out.fine.matches.size());
    for (const FineMatch& m : out.fine.matches)
      matches.push_back({m.point_a, m.point_b, m.confidence});
    return matches;
  };
}

MatchFn oracle_matcher(int step) {
  return [step](const ScenePair& pair) {
    std::vector<ScoredMatch> matches;
    for (const PixelMatch& m :
         dense_correspondences(pair.frame_a, pair.frame_b, step))
      matches.push_back({m.a, m.b, 1.0});
    return matches;
  };
}

std::string EvalReport::to_json() const {
  return report_json(*this).dump(2) + "\n";
}

std::string EvalReport::to_csv() const {
  std::ostringstream out;
  out.precision(17);
  out << "pair_id,n_matches,n_inliers,error\n";
  for (const PairEval& p : pairs) {
    out << p.pair_id << "," << p.n_matches << "," << p.n_inliers << ",";
    if (std::isfinite(p.error)) {
      out << p.error;
    } else {
      out << "inf";
    }
    out << "\n";
  }
  return out.str();
}

EvalReport eval_pose(const MatchFn& match_fn, const std::string& dataset,
                     const PoseEvalOptions& options) {
  const auto index = load_index(dataset);
  if (index.empty()) {
    throw ContractError("eval_pose: dataset " + dataset + " is empty");
  }
  EvalReport report;
  report.kind = "pose";
  report.thresholds = options.thresholds_deg;

  std::vector<double> errors;
  double inlier_sum = 0.0;
  for (size_t i = 0; i < index.size(); ++i) {
    const ScenePair pair = load_pair(dataset, index[i].pair_id);
    const std::vector<ScoredMatch> matches = match_fn(pair);

    PairEval row;
    row.pair_id = index[i].pair_id;
    row.n_matches = static_cast<int>(matches.size());
    row.n_inliers = count_inliers(
        matches, pair.frame_a.intrinsics, pair.frame_b.intrinsics,
        relative_pose(pair.frame_a.pose, pair.frame_b.pose),
        options.ransac_threshold);
    row.error = kInf;
    if (matches.size() >= 8) {
      const TwoViewEstimate est = estimate_essential_ransac(
          to_pixel_matches(matches), pair.frame_a.intrinsics,
          pair.frame_b.intrinsics, options.ransac_threshold,
          options.ransac_iterations, mix(options.seed, i));
      if (est.has_pose) {
        row.error = pose_error(est.rotation, est.translation,
                               pair.frame_a.pose, pair.frame_b.pose)
                        .max_deg;
      }
    }
    errors.push_back(row.error);
    inlier_sum += row.n_inliers;
    report.pairs.push_back(std::move(row));
  }
  report.auc_values = auc(errors, report.thresholds);
  report.mean_inliers = inlier_sum / static_cast<double>(report.pairs.size());
  report.config_digest = content_digest(
      "pose|" + dataset + "|" + std::to_string(options.ransac_threshold) +
      "|" + std::to_string(options.ransac_iterations) + "|" +
      std::to_string(options.seed));
  return report;
}

EvalReport eval_pose(const Checkpoint& checkpoint, const std::string& dataset,
                     const PoseEvalOptions& options) {
  EvalReport report = eval_pose(model_matcher(checkpoint), dataset, options);
  report.config_digest =
      content_digest(config_to_json(checkpoint.config) + report.config_digest);
  return report;
}

EvalReport eval_homography(const MatchFn& match_fn, const std::string& dataset,
                           const HomographyEvalOptions& options) {
  const auto index = load_index(dataset);
  if (index.empty()) {
    throw ContractError("eval_homography: dataset " + dataset + " is empty");
  }
  EvalReport report;
  report.kind = "homography";
  report.thresholds = options.thresholds_px;

  std::vector<double> errors;
  double inlier_sum = 0.0;
  size_t skipped = 0;
  for (size_t i = 0; i < index.size(); ++i) {
    const ScenePair pair = load_pair(dataset, index[i].pair_id);
    if (!pair.gt_homography) {
      ++skipped;
      continue;
    }
    std::vector<ScoredMatch> matches = match_fn(pair);
    // Top-k by confidence; stable so equal confidences keep match order.
    std::stable_sort(matches.begin(), matches.end(),
                     [](const ScoredMatch& x, const ScoredMatch& y) {
                       return x.confidence > y.confidence;
                     });
    if (static_cast<int>(matches.size()) > options.top_k)
      matches.resize(static_cast<size_t>(options.top_k));

    PairEval row;
    row.pair_id = index[i].pair_id;
    row.n_matches = static_cast<int>(matches.size());
    row.error = kInf;
    if (matches.size() >= 4) {
      const TwoViewEstimate est = estimate_homography_ransac(
          to_pixel_matches(matches), options.ransac_threshold_px,
          options.ransac_iterations, mix(options.seed, i));
      if (est.matrix.squaredNorm() > 0.0) {
        row.error = corner_error(est.matrix, *pair.gt_homography,
                                 pair.frame_a.width, pair.frame_a.height);
        for (std::uint8_t m : est.inlier_mask) row.n_inliers += m != 0;
      }
    }
    errors.push_back(row.error);
    inlier_sum += row.n_inliers;
    report.pairs.push_back(std::move(row));
  }
  if (skipped > 0) {
    std::cerr << "warning: eval_homography skipped " << skipped
              << " pairs without a stored homography\n";
  }
  if (report.pairs.empty()) {
    throw ContractError("eval_homography: no pairs with ground-truth "
                        "homographies in " + dataset);
  }
  report.auc_values = auc(errors, report.thresholds);
  report.mean_inliers = inlier_sum / static_cast<double>(report.pairs.size());
  report.config_digest = content_digest(
      "homography|" + dataset + "|" + std::to_string(options.top_k) + "|" +
      std::to_string(options.ransac_threshold_px) + "|" +
      std::to_string(options.ransac_iterations) + "|" +
      std::to_string(options.seed));
  return report;
}

EvalReport eval_homography(const Checkpoint& checkpoint,
                           const std::string& dataset,
                           const HomographyEvalOptions& options) {
  EvalReport report =
      eval_homography(model_matcher(checkpoint), dataset, options);
  report.config_digest =
      content_digest(config_to_json(checkpoint.config) + report.config_digest);
  return report;
}

std::vector<double> mma(const std::vector<ScoredMatch>& matches,
                        const Eigen::Matrix3d& gt_h,
                        const std::vector<double>& thresholds_px) {
  std::vector<double> acc(thresholds_px.size(), 0.0);
  if (matches.empty()) {
    std::cerr << "warning: mma called with zero matches\n";
    return acc;
  }
  for (const ScoredMatch& m : matches) {
    const Eigen::Vector3d mapped = gt_h * m.a.homogeneous();
    const double err = mapped.z() != 0.0
                           ? (mapped.hnormalized() - m.b).norm()
                           : kInf;
    for (size_t t = 0; t < thresholds_px.size(); ++t)
      if (err < thresholds_px[t]) acc[t] += 1.0;
  }
  for (double& a : acc) a /= static_cast<double>(matches.size());
  return acc;
}

int count_inliers(const std::vector<ScoredMatch>& matches,
                  const CameraIntrinsics& ka, const CameraIntrinsics& kb,
                  const RelativePose& gt_pose, double threshold) {
  int count = 0;
  for (const ScoredMatch& m : matches)
    if (epipolar_error(m.a, m.b, ka, kb, gt_pose) < threshold) ++count;
  return count;
}

ParamCount param_count(const Checkpoint& checkpoint) {
  ParamCount result;
  for (const std::string& name : checkpoint.params.names()) {
    const long n = checkpoint.params.at(name).numel();
    result.total += n;
    const std::string prefix = name.substr(0, name.find('.'));
    auto it = std::find_if(result.by_module.begin(), result.by_module.end(),
                           [&](const auto& e) { return e.first == prefix; });
    if (it == result.by_module.end()) {
      result.by_module.emplace_back(prefix, n);
    } else {
      it->second += n;
    }
  }
  return result;
}

}  // namespace stfm
