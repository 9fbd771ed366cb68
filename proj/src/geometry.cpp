#include "stfm/geometry.hpp"

#include <Eigen/SVD>
#include <algorithm>
#include <cmath>
#include <limits>

#include "stfm/rng.hpp"

namespace stfm {

namespace {
constexpr double kPi = 3.14159265358979323846;
constexpr double kInf = std::numeric_limits<double>::infinity();

double deg(double rad) { return rad * 180.0 / kPi; }

double clamped_acos(double c) {
  return std::acos(std::min(1.0, std::max(-1.0, c)));
}
}  // namespace

void CameraIntrinsics::validate() const {
  if (!(fx > 0.0) || !(fy > 0.0))
    throw ConfigError("intrinsics need positive focal lengths, got fx=" +
                      std::to_string(fx) + " fy=" + std::to_string(fy));
}

void CameraPose::validate() const {
  const Eigen::Matrix3d rtr = rotation.transpose() * rotation;
  if ((rtr - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() > 1e-9)
    throw ConfigError("pose rotation is not orthonormal within 1e-9");
  if (std::fabs(rotation.determinant() - 1.0) > 1e-9)
    throw ConfigError("pose rotation determinant is not +1 within 1e-9");
  if (!translation.allFinite())
    throw ConfigError("pose translation is not finite");
}

void DepthMap::validate() const {
  if (height <= 0 || width <= 0 ||
      values.size() != static_cast<size_t>(height) * width)
    throw DimensionError("depth map storage does not match " +
                         std::to_string(height) + "x" + std::to_string(width));
  for (double v : values)
    if (!(v >= 0.0) || !std::isfinite(v))
      throw DomainError("depth map has a negative or non-finite value");
}

void RgbdFrame::validate() const {
  if (height % 8 != 0 || width % 8 != 0)
    throw ConfigError("frame size " + std::to_string(width) + "x" +
                      std::to_string(height) + " must be divisible by 8");
  if (image.size() != static_cast<size_t>(height) * width * 3)
    throw DimensionError("frame image storage does not match its size");
  for (double v : image)
    if (!(v >= 0.0 && v <= 1.0))
      throw DomainError("frame image value outside [0,1]");
  depth.validate();
  if (depth.height != height || depth.width != width)
    throw DimensionError("depth map not aligned with image");
  intrinsics.validate();
  pose.validate();
}

RelativePose relative_pose(const CameraPose& a, const CameraPose& b) {
  RelativePose rp;
  rp.rotation = b.rotation * a.rotation.transpose();
  rp.translation = b.translation - rp.rotation * a.translation;
  return rp;
}

Eigen::Matrix3d skew(const Eigen::Vector3d& v) {
  Eigen::Matrix3d m;
  m << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
  return m;
}

Eigen::Matrix3d essential_from_poses(const CameraPose& a,
                                     const CameraPose& b) {
  const RelativePose rp = relative_pose(a, b);
  return skew(rp.translation) * rp.rotation;
}

namespace {

// Unproject pixel (exact grid point) of `a` through its depth and land in
// `b`; returns (u, v, depth_in_b) or nothing if invalid / behind / occluded.
std::optional<Eigen::Vector3d> warp_pixel(const RgbdFrame& a,
                                          const RgbdFrame& b, double ax,
                                          double ay) {
  const int ix = static_cast<int>(std::lround(ax));
  const int iy = static_cast<int>(std::lround(ay));
  if (ix < 0 || ix >= a.width || iy < 0 || iy >= a.height) return std::nullopt;
  const double d = a.depth.at(iy, ix);
  if (d <= 0.0) return std::nullopt;
  const Eigen::Vector3d x_cam_a = d * a.intrinsics.normalize({ax, ay});
  const Eigen::Vector3d x_cam_b = b.pose.to_camera(a.pose.to_world(x_cam_a));
  if (x_cam_b.z() <= 0.0) return std::nullopt;
  const Eigen::Vector2d uv = b.intrinsics.project(x_cam_b);
  if (uv.x() < 0.0 || uv.x() > b.width - 1 || uv.y() < 0.0 ||
      uv.y() > b.height - 1)
    return std::nullopt;
  // occlusion: compare against B's depth at the nearest pixel
  const int bx = static_cast<int>(std::lround(uv.x()));
  const int by = static_cast<int>(std::lround(uv.y()));
  const double db = b.depth.at(by, bx);
  if (db <= 0.0) return std::nullopt;
  if (std::fabs(x_cam_b.z() - db) / db > 0.05) return std::nullopt;
  return Eigen::Vector3d(uv.x(), uv.y(), x_cam_b.z());
}

// Nearest coarse cell of each source cell's reprojection, or -1.
std::vector<int> nearest_cell_assignment(const RgbdFrame& from,
                                         const RgbdFrame& to, int stride,
                                         std::vector<Eigen::Vector2d>* uv_out,
                                         std::vector<std::uint8_t>* valid) {
  const int gh = from.height / stride, gw = from.width / stride;
  const int tgh = to.height / stride, tgw = to.width / stride;
  std::vector<int> assign(static_cast<size_t>(gh) * gw, -1);
  if (uv_out) uv_out->assign(static_cast<size_t>(gh) * gw, {0, 0});
  if (valid) valid->assign(static_cast<size_t>(gh) * gw, 0);
  for (int iy = 0; iy < gh; ++iy) {
    for (int ix = 0; ix < gw; ++ix) {
      const int i = iy * gw + ix;
      const double ax = stride * ix, ay = stride * iy;
      if (valid && from.depth.at(static_cast<int>(ay), static_cast<int>(ax)) >
                       0.0)
        (*valid)[static_cast<size_t>(i)] = 1;
      const auto hit = warp_pixel(from, to, ax, ay);
      if (!hit) continue;
      const int jx = static_cast<int>(std::lround(hit->x() / stride));
      const int jy = static_cast<int>(std::lround(hit->y() / stride));
      if (jx < 0 || jx >= tgw || jy < 0 || jy >= tgh) continue;
      assign[static_cast<size_t>(i)] = jy * tgw + jx;
      if (uv_out) (*uv_out)[static_cast<size_t>(i)] = {hit->x(), hit->y()};
    }
  }
  return assign;
}

}  // namespace

CorrespondenceGT warp_correspondences(const RgbdFrame& frame_a,
                                      const RgbdFrame& frame_b,
                                      int coarse_grid_stride, int fine_scale) {
  const int stride = coarse_grid_stride;
  CorrespondenceGT gt;
  gt.grid_h = frame_a.height / stride;
  gt.grid_w = frame_a.width / stride;

  std::vector<Eigen::Vector2d> uv_ab;
  const std::vector<int> a_to_b = nearest_cell_assignment(
      frame_a, frame_b, stride, &uv_ab, &gt.valid_mask);
  const std::vector<int> b_to_a =
      nearest_cell_assignment(frame_b, frame_a, stride, nullptr, nullptr);

  const int cell_to_fine = stride / fine_scale;  // coarse cell -> fine px
  const int bgw = frame_b.width / stride;
  for (size_t i = 0; i < a_to_b.size(); ++i) {
    const int j = a_to_b[i];
    if (j < 0 || b_to_a[static_cast<size_t>(j)] != static_cast<int>(i))
      continue;  // not mutual
    gt.coarse_matches.emplace_back(static_cast<int>(i), j);
    const Eigen::Vector2d uv = uv_ab[i];
    const double fx = uv.x() / fine_scale - cell_to_fine * (j % bgw);
    const double fy = uv.y() / fine_scale - cell_to_fine * (j / bgw);
    gt.fine_offsets.emplace_back(fx, fy);
  }
  return gt;
}

std::pair<Eigen::Vector2d, Eigen::Vector2d> gt_pixel_match(
    const CorrespondenceGT& gt, int k, int stride, int fine_scale) {
  const auto [i, j] = gt.coarse_matches[static_cast<size_t>(k)];
  const Eigen::Vector2d a(stride * (i % gt.grid_w), stride * (i / gt.grid_w));
  const int cell_to_fine = stride / fine_scale;
  const Eigen::Vector2d& off = gt.fine_offsets[static_cast<size_t>(k)];
  const Eigen::Vector2d b(
      fine_scale * (cell_to_fine * (j % gt.grid_w) + off.x()),
      fine_scale * (cell_to_fine * (j / gt.grid_w) + off.y()));
  return {a, b};
}

std::vector<PixelMatch> dense_correspondences(const RgbdFrame& frame_a,
                                              const RgbdFrame& frame_b,
                                              int step) {
  if (step < 1) throw ConfigError("dense_correspondences step must be >= 1");
  std::vector<PixelMatch> out;
  for (int y = 0; y < frame_a.height; y += step) {
    for (int x = 0; x < frame_a.width; x += step) {
      const auto hit = warp_pixel(frame_a, frame_b, x, y);
      if (hit)
        out.push_back({Eigen::Vector2d(x, y),
                       Eigen::Vector2d(hit->x(), hit->y())});
    }
  }
  return out;
}

double symmetric_epipolar_sq(const Eigen::Matrix3d& e,
                             const Eigen::Vector3d& xa,
                             const Eigen::Vector3d& xb) {
  const double v = xb.dot(e * xa);
  if (v == 0.0) return 0.0;
  const Eigen::Vector3d l = e * xa;
  const Eigen::Vector3d lp = e.transpose() * xb;
  const double d1 = l.x() * l.x() + l.y() * l.y();
  const double d2 = lp.x() * lp.x() + lp.y() * lp.y();
  const double inv1 = d1 > 0.0 ? 1.0 / d1 : kInf;
  const double inv2 = d2 > 0.0 ? 1.0 / d2 : kInf;
  return v * v * (inv1 + inv2);
}

double epipolar_error(const Eigen::Vector2d& a_px, const Eigen::Vector2d& b_px,
                      const CameraIntrinsics& ka, const CameraIntrinsics& kb,
                      const RelativePose& pose_ab) {
  ka.validate();
  kb.validate();
  const Eigen::Matrix3d e = skew(pose_ab.translation) * pose_ab.rotation;
  if (e.cwiseAbs().maxCoeff() < 1e-15)
    throw ContractError("degenerate (all-zero) essential matrix");
  return symmetric_epipolar_sq(e, ka.normalize(a_px), kb.normalize(b_px));
}

namespace {

// Similarity that moves points to zero mean and sqrt(2) mean distance.
Eigen::Matrix3d hartley_transform(const std::vector<Eigen::Vector2d>& pts,
                                  const std::vector<int>& idx) {
  Eigen::Vector2d mean = Eigen::Vector2d::Zero();
  for (int i : idx) mean += pts[static_cast<size_t>(i)];
  mean /= static_cast<double>(idx.size());
  double dist = 0.0;
  for (int i : idx) dist += (pts[static_cast<size_t>(i)] - mean).norm();
  dist /= static_cast<double>(idx.size());
  const double s = dist > 1e-12 ? std::sqrt(2.0) / dist : 1.0;
  Eigen::Matrix3d t;
  t << s, 0, -s * mean.x(), 0, s, -s * mean.y(), 0, 0, 1;
  return t;
}

Eigen::Matrix3d project_to_essential(const Eigen::Matrix3d& e) {
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(
      e, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const double s = (svd.singularValues()(0) + svd.singularValues()(1)) / 2.0;
  return svd.matrixU() * Eigen::Vector3d(s, s, 0.0).asDiagonal() *
         svd.matrixV().transpose();
}

// Least-squares eight-point solve x_bᵀ E x_a = 0 over the index subset,
// with Hartley conditioning on both sides. Points are normalized (z = 1).
std::optional<Eigen::Matrix3d> solve_eight_point(
    const std::vector<Eigen::Vector2d>& xa,
    const std::vector<Eigen::Vector2d>& xb, const std::vector<int>& idx) {
  const Eigen::Matrix3d ta = hartley_transform(xa, idx);
  const Eigen::Matrix3d tb = hartley_transform(xb, idx);
  Eigen::MatrixXd a(idx.size(), 9);
  for (size_t r = 0; r < idx.size(); ++r) {
    const size_t i = static_cast<size_t>(idx[r]);
    const Eigen::Vector3d pa = ta * Eigen::Vector3d(xa[i].x(), xa[i].y(), 1.0);
    const Eigen::Vector3d pb = tb * Eigen::Vector3d(xb[i].x(), xb[i].y(), 1.0);
    a.row(static_cast<Eigen::Index>(r)) << pb.x() * pa.x(), pb.x() * pa.y(),
        pb.x(), pb.y() * pa.x(), pb.y() * pa.y(), pb.y(), pa.x(), pa.y(), 1.0;
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeFullV);
  const Eigen::VectorXd e = svd.matrixV().col(8);
  if (!e.allFinite()) return std::nullopt;
  Eigen::Matrix3d eh;
  eh << e(0), e(1), e(2), e(3), e(4), e(5), e(6), e(7), e(8);
  Eigen::Matrix3d est = tb.transpose() * eh * ta;
  const double n = est.norm();
  if (!(n > 1e-12) || !est.allFinite()) return std::nullopt;
  return Eigen::Matrix3d(est / n);
}

// Depths of a triangulated point in both cameras for ray pair (xa, xb).
std::pair<double, double> triangulate_depths(const Eigen::Matrix3d& r,
                                             const Eigen::Vector3d& t,
                                             const Eigen::Vector3d& xa,
                                             const Eigen::Vector3d& xb) {
  Eigen::Matrix<double, 3, 2> a;
  a.col(0) = r * xa;
  a.col(1) = -xb;
  const Eigen::Vector2d d =
      (a.transpose() * a).ldlt().solve(a.transpose() * (-t));
  return {d(0), d(1)};
}

// How many RANSAC trials guarantee 99.9% confidence at this inlier ratio.
int trials_needed(double inlier_ratio, int sample_size, int cap) {
  if (inlier_ratio <= 0.0) return cap;
  const double p_good = std::pow(inlier_ratio, sample_size);
  if (p_good >= 1.0) return 1;
  const double n = std::log(1e-3) / std::log(1.0 - p_good);
  if (!(n < static_cast<double>(cap))) return cap;
  return std::max(1, static_cast<int>(std::ceil(n)));
}

std::vector<int> sample_distinct(Rng& rng, int count, int n) {
  std::vector<int> out;
  out.reserve(static_cast<size_t>(count));
  while (static_cast<int>(out.size()) < count) {
    const int c = static_cast<int>(rng.uniform_index(static_cast<size_t>(n)));
    if (std::find(out.begin(), out.end(), c) == out.end()) out.push_back(c);
  }
  return out;
}

}  // namespace

TwoViewEstimate estimate_essential_ransac(const std::vector<PixelMatch>& matches,
                                          const CameraIntrinsics& ka,
                                          const CameraIntrinsics& kb,
                                          double threshold, int iterations,
                                          std::uint64_t seed) {
  const int n = static_cast<int>(matches.size());
  if (n < 8)
    throw EstimationError("essential RANSAC needs at least 8 matches, got " +
                          std::to_string(n));
  if (!(threshold > 0.0)) throw ConfigError("RANSAC threshold must be > 0");
  ka.validate();
  kb.validate();

  std::vector<Eigen::Vector2d> xa(static_cast<size_t>(n)),
      xb(static_cast<size_t>(n));
  std::vector<Eigen::Vector3d> ha(static_cast<size_t>(n)),
      hb(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    ha[static_cast<size_t>(i)] = ka.normalize(matches[static_cast<size_t>(i)].a);
    hb[static_cast<size_t>(i)] = kb.normalize(matches[static_cast<size_t>(i)].b);
    xa[static_cast<size_t>(i)] = ha[static_cast<size_t>(i)].head<2>();
    xb[static_cast<size_t>(i)] = hb[static_cast<size_t>(i)].head<2>();
  }

  Rng rng(seed);
  std::vector<std::uint8_t> best_mask;
  int best_inliers = -1;
  int budget = iterations;
  for (int it = 0; it < budget; ++it) {
    const std::vector<int> sample = sample_distinct(rng, 8, n);
    const auto model = solve_eight_point(xa, xb, sample);
    if (!model) continue;
    const Eigen::Matrix3d e = project_to_essential(*model);
    std::vector<std::uint8_t> mask(static_cast<size_t>(n), 0);
    int count = 0;
    for (int i = 0; i < n; ++i) {
      if (symmetric_epipolar_sq(e, ha[static_cast<size_t>(i)],
                                hb[static_cast<size_t>(i)]) < threshold) {
        mask[static_cast<size_t>(i)] = 1;
        ++count;
      }
    }
    if (count > best_inliers) {
      best_inliers = count;
      best_mask = std::move(mask);
      budget = std::min(
          iterations,
          std::max(it + 1, trials_needed(static_cast<double>(count) / n, 8,
                                         iterations)));
    }
  }
  if (best_inliers < 8)
    throw EstimationError(
        "essential RANSAC found no consensus (best inlier count " +
        std::to_string(std::max(0, best_inliers)) + ")");

  // least-squares refit on the consensus set, then project to (s, s, 0)
  std::vector<int> inlier_idx;
  for (int i = 0; i < n; ++i)
    if (best_mask[static_cast<size_t>(i)]) inlier_idx.push_back(i);
  const auto refit = solve_eight_point(xa, xb, inlier_idx);
  Eigen::Matrix3d e_final =
      project_to_essential(refit ? *refit : Eigen::Matrix3d::Zero());
  if (!refit)
    throw EstimationError("essential refit failed on the consensus set");

  TwoViewEstimate est;
  est.matrix = e_final;
  est.inlier_mask.assign(static_cast<size_t>(n), 0);
  for (int i = 0; i < n; ++i)
    if (symmetric_epipolar_sq(e_final, ha[static_cast<size_t>(i)],
                              hb[static_cast<size_t>(i)]) < threshold)
      est.inlier_mask[static_cast<size_t>(i)] = 1;

  // cheirality-checked decomposition
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(
      e_final, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Matrix3d u = svd.matrixU(), v = svd.matrixV();
  if (u.determinant() < 0) u.col(2) *= -1.0;
  if (v.determinant() < 0) v.col(2) *= -1.0;
  Eigen::Matrix3d w;
  w << 0, -1, 0, 1, 0, 0, 0, 0, 1;
  const Eigen::Matrix3d r1 = u * w * v.transpose();
  const Eigen::Matrix3d r2 = u * w.transpose() * v.transpose();
  const Eigen::Vector3d t = u.col(2);
  int best_front = -1;
  const std::pair<Eigen::Matrix3d, Eigen::Vector3d> candidates[4] = {
      {r1, t}, {r1, Eigen::Vector3d(-t)}, {r2, t}, {r2, Eigen::Vector3d(-t)}};
  for (const auto& [r, tc] : candidates) {
    int front = 0;
    for (int i : inlier_idx) {
      const auto [da, db] = triangulate_depths(r, tc, ha[static_cast<size_t>(i)],
                                               hb[static_cast<size_t>(i)]);
      if (da > 0.0 && db > 0.0) ++front;
    }
    if (front > best_front) {
      best_front = front;
      est.rotation = r;
      est.translation = tc;
    }
  }
  const double tn = est.translation.norm();
  if (tn > 1e-12) est.translation /= tn;
  est.has_pose = true;
  return est;
}

namespace {

bool any_three_collinear(const std::vector<Eigen::Vector2d>& pts,
                         const std::vector<int>& idx) {
  for (size_t i = 0; i < idx.size(); ++i)
    for (size_t j = i + 1; j < idx.size(); ++j)
      for (size_t k = j + 1; k < idx.size(); ++k) {
        const Eigen::Vector2d u =
            pts[static_cast<size_t>(idx[j])] - pts[static_cast<size_t>(idx[i])];
        const Eigen::Vector2d v =
            pts[static_cast<size_t>(idx[k])] - pts[static_cast<size_t>(idx[i])];
        const double area = std::fabs(u.x() * v.y() - u.y() * v.x());
        if (area < 1e-9 * (1.0 + u.squaredNorm() + v.squaredNorm()))
          return true;
      }
  return false;
}

std::optional<Eigen::Matrix3d> solve_dlt_homography(
    const std::vector<Eigen::Vector2d>& pa,
    const std::vector<Eigen::Vector2d>& pb, const std::vector<int>& idx) {
  const Eigen::Matrix3d ta = hartley_transform(pa, idx);
  const Eigen::Matrix3d tb = hartley_transform(pb, idx);
  Eigen::MatrixXd a(2 * idx.size(), 9);
  for (size_t r = 0; r < idx.size(); ++r) {
    const size_t i = static_cast<size_t>(idx[r]);
    const Eigen::Vector3d p = ta * Eigen::Vector3d(pa[i].x(), pa[i].y(), 1.0);
    const Eigen::Vector3d q = tb * Eigen::Vector3d(pb[i].x(), pb[i].y(), 1.0);
    a.row(static_cast<Eigen::Index>(2 * r)) << 0, 0, 0, -p.x(), -p.y(), -1.0,
        q.y() * p.x(), q.y() * p.y(), q.y();
    a.row(static_cast<Eigen::Index>(2 * r + 1)) << p.x(), p.y(), 1.0, 0, 0, 0,
        -q.x() * p.x(), -q.x() * p.y(), -q.x();
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeFullV);
  const Eigen::VectorXd h = svd.matrixV().col(8);
  if (!h.allFinite()) return std::nullopt;
  Eigen::Matrix3d hn;
  hn << h(0), h(1), h(2), h(3), h(4), h(5), h(6), h(7), h(8);
  Eigen::Matrix3d est = tb.inverse() * hn * ta;
  if (!est.allFinite() || std::fabs(est(2, 2)) < 1e-12) return std::nullopt;
  return Eigen::Matrix3d(est / est(2, 2));
}

double symmetric_transfer_sq(const Eigen::Matrix3d& h,
                             const Eigen::Matrix3d& h_inv,
                             const Eigen::Vector2d& a,
                             const Eigen::Vector2d& b) {
  const Eigen::Vector3d fb = h * Eigen::Vector3d(a.x(), a.y(), 1.0);
  const Eigen::Vector3d fa = h_inv * Eigen::Vector3d(b.x(), b.y(), 1.0);
  if (std::fabs(fb.z()) < 1e-12 || std::fabs(fa.z()) < 1e-12) return kInf;
  const double d1 = (fb.head<2>() / fb.z() - b).squaredNorm();
  const double d2 = (fa.head<2>() / fa.z() - a).squaredNorm();
  return d1 + d2;
}

}  // namespace

TwoViewEstimate estimate_homography_ransac(const std::vector<PixelMatch>& matches,
                                           double threshold_px, int iterations,
                                           std::uint64_t seed) {
  const int n = static_cast<int>(matches.size());
  if (n < 4)
    throw EstimationError("homography RANSAC needs at least 4 matches, got " +
                          std::to_string(n));
  if (!(threshold_px > 0.0)) throw ConfigError("RANSAC threshold must be > 0");
  std::vector<Eigen::Vector2d> pa(static_cast<size_t>(n)),
      pb(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    pa[static_cast<size_t>(i)] = matches[static_cast<size_t>(i)].a;
    pb[static_cast<size_t>(i)] = matches[static_cast<size_t>(i)].b;
  }
  const double thr_sq = threshold_px * threshold_px;

  Rng rng(seed);
  std::vector<std::uint8_t> best_mask;
  int best_inliers = -1;
  int budget = iterations;
  for (int it = 0; it < budget; ++it) {
    std::vector<int> sample =
        n == 4 ? std::vector<int>{0, 1, 2, 3} : sample_distinct(rng, 4, n);
    if (any_three_collinear(pa, sample) || any_three_collinear(pb, sample))
      continue;
    const auto model = solve_dlt_homography(pa, pb, sample);
    if (!model) continue;
    const Eigen::Matrix3d h = *model;
    if (std::fabs(h.determinant()) < 1e-15) continue;
    const Eigen::Matrix3d h_inv = h.inverse();
    std::vector<std::uint8_t> mask(static_cast<size_t>(n), 0);
    int count = 0;
    for (int i = 0; i < n; ++i) {
      if (symmetric_transfer_sq(h, h_inv, pa[static_cast<size_t>(i)],
                                pb[static_cast<size_t>(i)]) < thr_sq) {
        mask[static_cast<size_t>(i)] = 1;
        ++count;
      }
    }
    if (count > best_inliers) {
      best_inliers = count;
      best_mask = std::move(mask);
      budget = std::min(
          iterations,
          std::max(it + 1, trials_needed(static_cast<double>(count) / n, 4,
                                         iterations)));
    }
  }
  if (best_inliers < 4)
    throw EstimationError(
        "homography RANSAC found no consensus (degenerate or collinear data)");

  std::vector<int> inlier_idx;
  for (int i = 0; i < n; ++i)
    if (best_mask[static_cast<size_t>(i)]) inlier_idx.push_back(i);
  const auto refit = solve_dlt_homography(pa, pb, inlier_idx);
  if (!refit) throw EstimationError("homography refit failed on inliers");

  TwoViewEstimate est;
  est.matrix = *refit;
  const Eigen::Matrix3d h_inv = est.matrix.inverse();
  est.inlier_mask.assign(static_cast<size_t>(n), 0);
  for (int i = 0; i < n; ++i)
    if (symmetric_transfer_sq(est.matrix, h_inv, pa[static_cast<size_t>(i)],
                              pb[static_cast<size_t>(i)]) < thr_sq)
      est.inlier_mask[static_cast<size_t>(i)] = 1;
  return est;
}

PoseError pose_error(const Eigen::Matrix3d& r_est,
                     const Eigen::Vector3d& t_est, const CameraPose& gt_a,
                     const CameraPose& gt_b) {
  const RelativePose gt = relative_pose(gt_a, gt_b);
  PoseError pe;
  const double tr = (r_est * gt.rotation.transpose()).trace();
  pe.rotation_deg = deg(clamped_acos((tr - 1.0) / 2.0));
  const double ne = t_est.norm(), ng = gt.translation.norm();
  if (ne > 1e-12 && ng > 1e-12)
    pe.translation_deg =
        deg(clamped_acos(t_est.dot(gt.translation) / (ne * ng)));
  else
    pe.translation_deg = 0.0;  // zero-baseline GT: direction undefined
  pe.max_deg = std::max(pe.rotation_deg, pe.translation_deg);
  return pe;
}

double corner_error(const Eigen::Matrix3d& h_est, const Eigen::Matrix3d& h_gt,
                    int width, int height) {
  if (std::fabs(h_est.determinant()) < 1e-12 ||
      std::fabs(h_gt.determinant()) < 1e-12)
    throw ContractError("corner_error on a singular homography");
  const Eigen::Vector2d corners[4] = {{0, 0},
                                      {static_cast<double>(width), 0},
                                      {0, static_cast<double>(height)},
                                      {static_cast<double>(width),
                                       static_cast<double>(height)}};
  double total = 0.0;
  for (const auto& c : corners) {
    const Eigen::Vector3d p = Eigen::Vector3d(c.x(), c.y(), 1.0);
    const Eigen::Vector3d qe = h_est * p, qg = h_gt * p;
    if (qe.z() == 0.0 || qg.z() == 0.0) return kInf;
    total += (qe.head<2>() / qe.z() - qg.head<2>() / qg.z()).norm();
  }
  return total / 4.0;
}

std::vector<double> auc(const std::vector<double>& errors,
                        const std::vector<double>& thresholds) {
  if (errors.empty()) throw ContractError("auc of an empty error list");
  for (size_t i = 0; i < thresholds.size(); ++i) {
    if (!(thresholds[i] > 0.0))
      throw ConfigError("auc thresholds must be positive");
    if (i > 0 && !(thresholds[i] > thresholds[i - 1]))
      throw ConfigError("auc thresholds must be strictly increasing");
  }
  std::vector<double> sorted;
  sorted.reserve(errors.size());
  for (double e : errors)
    sorted.push_back(std::isnan(e) ? kInf : std::max(0.0, e));
  std::sort(sorted.begin(), sorted.end());
  const double n = static_cast<double>(sorted.size());

  std::vector<double> out;
  out.reserve(thresholds.size());
  for (double t : thresholds) {
    double area = 0.0;
    for (size_t k = 0; k < sorted.size(); ++k) {
      const double lo = sorted[k];
      if (!(lo < t)) break;
      const double hi =
          (k + 1 < sorted.size()) ? std::min(sorted[k + 1], t) : t;
      if (hi > lo) area += (hi - lo) * (static_cast<double>(k) + 1.0) / n;
    }
    out.push_back(100.0 * area / t);
  }
  return out;
}

}  // namespace stfm
