#include "stfm/scene.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>

#include "json.hpp"
#include "stfm/error.hpp"
#include "stfm/image_io.hpp"
#include "stfm/parallel.hpp"
#include "stfm/rng.hpp"

namespace stfm {

namespace {

using nlohmann::json;

// Stateless seed mix so per-pair generators are independent of thread count.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed + (salt + 1) * 0x9e3779b97f4a7c15ull;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

double fract(double x) { return x - std::floor(x); }

Eigen::Vector3d texture_color(const PlanePatch& p, double u, double v) {
  const double uu = u * p.tiles_u + p.phase;
  const double vv = v * p.tiles_v;
  bool alt = false;
  switch (p.pattern) {
    case 0:
      return p.color_a;
    case 1: {  // checkerboard
      const long cell = std::lround(std::floor(uu)) + std::lround(std::floor(vv));
      alt = (cell % 2) != 0;
      break;
    }
    case 2:  // stripes along v
      alt = fract(uu) >= 0.5;
      break;
    case 3: {  // dot grid
      const double du = fract(uu) - 0.5, dv = fract(vv) - 0.5;
      alt = std::sqrt(du * du + dv * dv) < 0.3;
      break;
    }
    case 4: {  // concentric rings about the patch center
      const double du = uu - 0.5 * p.tiles_u, dv = vv - 0.5 * p.tiles_v;
      alt = (std::lround(std::floor(2.0 * std::sqrt(du * du + dv * dv))) % 2) != 0;
      break;
    }
    default:
      throw ContractError("unknown texture pattern " + std::to_string(p.pattern));
  }
  return alt ? p.color_b : p.color_a;
}

// Patch from a center point, unit normal, and in-plane extents.
PlanePatch make_patch(const Eigen::Vector3d& center, const Eigen::Vector3d& normal,
                      double size_u, double size_v) {
  PlanePatch p;
  p.normal = normal.normalized();
  const Eigen::Vector3d up_hint =
      std::abs(p.normal.y()) < 0.95 ? Eigen::Vector3d(0, 1, 0) : Eigen::Vector3d(1, 0, 0);
  const Eigen::Vector3d u_dir = up_hint.cross(p.normal).normalized();
  const Eigen::Vector3d v_dir = p.normal.cross(u_dir);
  p.edge_u = u_dir * size_u;
  p.edge_v = v_dir * size_v;
  p.origin = center - 0.5 * p.edge_u - 0.5 * p.edge_v;
  return p;
}

Eigen::Vector3d random_bright_color(Rng& rng) {
  return {rng.uniform(0.25, 1.0), rng.uniform(0.25, 1.0), rng.uniform(0.25, 1.0)};
}

struct Paint {
  int pattern = 0;
  Eigen::Vector3d color_a, color_b;
  double tiles_u = 4, tiles_v = 4, phase = 0;
};

// Assigns textures after the geometry exists. Richness r maps to a flat-plane
// count of round((1-r)*n) and a bank of round(r^2*n) distinct textures shared
// by the remaining planes, so lowering r both removes texture and makes the
// textures that remain repeat across planes.
void paint_patches(std::vector<PlanePatch>& patches, double richness, Rng& rng) {
  const int n = static_cast<int>(patches.size());
  const int flat_count = std::clamp<int>(std::lround((1.0 - richness) * n), 0, n);
  const int bank_size = std::clamp<int>(std::lround(richness * richness * n), 1, n);

  const double grey = rng.uniform(0.45, 0.75);
  const Eigen::Vector3d flat_color(grey, grey * rng.uniform(0.9, 1.05),
                                   grey * rng.uniform(0.9, 1.05));

  std::vector<Paint> bank(bank_size);
  for (int j = 0; j < bank_size; ++j) {
    Paint& t = bank[j];
    t.pattern = 1 + (j % 4);
    t.color_a = random_bright_color(rng);
    t.color_b = random_bright_color(rng);
    for (int tries = 0; tries < 8 && (t.color_a - t.color_b).norm() < 0.35; ++tries) {
      t.color_b = random_bright_color(rng);
    }
    t.tiles_u = rng.uniform_int(3, 6);
    t.tiles_v = rng.uniform_int(3, 6);
    t.phase = rng.uniform(0.0, 1.0);
  }

  for (int i = 0; i < n; ++i) {
    PlanePatch& p = patches[i];
    if (i < flat_count) {
      p.pattern = 0;
      p.color_a = flat_color;
      p.color_b = flat_color;
      continue;
    }
    const Paint& t = bank[(i - flat_count) % bank_size];
    p.pattern = t.pattern;
    p.color_a = t.color_a;
    p.color_b = t.color_b;
    p.phase = t.phase;
    // Keep the physical pattern cell near the bank's intent on large walls.
    const double len_u = p.edge_u.norm(), len_v = p.edge_v.norm();
    p.tiles_u = std::max(2.0, std::round(t.tiles_u * std::max(1.0, len_u / 2.0)));
    p.tiles_v = std::max(2.0, std::round(t.tiles_v * std::max(1.0, len_v / 2.0)));
  }
}

std::vector<PlanePatch> textured_plane_geometry(Rng& rng, int plane_count) {
  std::vector<PlanePatch> patches;
  const int n = plane_count > 0 ? plane_count : rng.uniform_int(3, 8);
  if (n == 1) {
    // Single large plane covering the whole field of view: the planar case.
    const Eigen::Vector3d center(rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3),
                                 rng.uniform(2.5, 3.5));
    const Eigen::Vector3d normal =
        Eigen::Vector3d(rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3), -1.0).normalized();
    patches.push_back(make_patch(center, normal, 7.0, 7.0));
    return patches;
  }
  for (int i = 0; i < n; ++i) {
    const Eigen::Vector3d center(rng.uniform(-1.4, 1.4), rng.uniform(-1.4, 1.4),
                                 rng.uniform(2.0, 4.5));
    const Eigen::Vector3d normal =
        Eigen::Vector3d(rng.uniform(-0.35, 0.35), rng.uniform(-0.35, 0.35), -1.0)
            .normalized();
    patches.push_back(
        make_patch(center, normal, rng.uniform(0.9, 2.2), rng.uniform(0.9, 2.2)));
  }
  return patches;
}

std::vector<PlanePatch> box_room_geometry(Rng& rng) {
  // Axis-aligned room [-2,2] x [-1.5,1.5] x [-1,6], normals pointing inward.
  std::vector<PlanePatch> walls;
  PlanePatch p;
  p.origin = {-2, -1.5, 6};  // back wall
  p.edge_u = {4, 0, 0};
  p.edge_v = {0, 3, 0};
  p.normal = {0, 0, -1};
  walls.push_back(p);
  p.origin = {-2, -1.5, -1};  // front wall (behind the cameras)
  p.normal = {0, 0, 1};
  walls.push_back(p);
  p.origin = {-2, -1.5, -1};  // left wall
  p.edge_u = {0, 0, 7};
  p.edge_v = {0, 3, 0};
  p.normal = {1, 0, 0};
  walls.push_back(p);
  p.origin = {2, -1.5, -1};  // right wall
  p.normal = {-1, 0, 0};
  walls.push_back(p);
  p.origin = {-2, 1.5, -1};  // floor (image y points down)
  p.edge_u = {4, 0, 0};
  p.edge_v = {0, 0, 7};
  p.normal = {0, -1, 0};
  walls.push_back(p);
  p.origin = {-2, -1.5, -1};  // ceiling
  p.normal = {0, 1, 0};
  walls.push_back(p);

  const int extras = rng.uniform_int(2, 4);  // free-floating boards for parallax
  for (int i = 0; i < extras; ++i) {
    const Eigen::Vector3d center(rng.uniform(-1.3, 1.3), rng.uniform(-0.9, 0.9),
                                 rng.uniform(1.8, 4.8));
    const Eigen::Vector3d normal =
        Eigen::Vector3d(rng.uniform(-0.4, 0.4), rng.uniform(-0.4, 0.4), -1.0).normalized();
    walls.push_back(
        make_patch(center, normal, rng.uniform(0.7, 1.6), rng.uniform(0.7, 1.6)));
  }
  return walls;
}

double overlap_from_gt(const CorrespondenceGT& gt) {
  int valid = 0;
  for (std::uint8_t m : gt.valid_mask) valid += m != 0;
  if (valid == 0) return 0.0;
  return static_cast<double>(gt.coarse_matches.size()) / valid;
}

RgbdFrame frame_from_view(RenderedView&& view, const CameraIntrinsics& intrinsics,
                          const CameraPose& pose) {
  RgbdFrame frame;
  frame.height = view.depth.height;
  frame.width = view.depth.width;
  frame.image = std::move(view.image);
  frame.depth = std::move(view.depth);
  frame.intrinsics = intrinsics;
  frame.pose = pose;
  return frame;
}

// Plane-induced homography between the two views, pixel to pixel.
Eigen::Matrix3d plane_homography(const PlanePatch& patch, const CameraPose& pose_a,
                                 const CameraPose& pose_b,
                                 const CameraIntrinsics& intrinsics) {
  const Eigen::Vector3d n_w = patch.normal;
  const double d_w = n_w.dot(patch.origin);  // plane: n_w . X = d_w
  const Eigen::Vector3d n_a = pose_a.rotation * n_w;
  const double d_a = d_w + n_a.dot(pose_a.translation);
  if (std::abs(d_a) < 1e-9) {
    throw ContractError("camera A lies on the scene plane");
  }
  const RelativePose rel = relative_pose(pose_a, pose_b);
  const Eigen::Matrix3d k = intrinsics.k();
  Eigen::Matrix3d h =
      k * (rel.rotation + rel.translation * n_a.transpose() / d_a) * k.inverse();
  if (std::abs(h(2, 2)) > 1e-12) h /= h(2, 2);
  return h;
}

CameraPose look_at(const Eigen::Vector3d& eye, const Eigen::Vector3d& target,
                   double roll) {
  const Eigen::Vector3d z = (target - eye).normalized();
  const Eigen::Vector3d up_hint =
      std::abs(z.y()) < 0.95 ? Eigen::Vector3d(0, 1, 0) : Eigen::Vector3d(1, 0, 0);
  Eigen::Vector3d x = up_hint.cross(z).normalized();
  Eigen::Vector3d y = z.cross(x);
  const Eigen::Vector3d x_rolled = std::cos(roll) * x + std::sin(roll) * y;
  const Eigen::Vector3d y_rolled = -std::sin(roll) * x + std::cos(roll) * y;
  CameraPose pose;
  pose.rotation.row(0) = x_rolled;
  pose.rotation.row(1) = y_rolled;
  pose.rotation.row(2) = z;
  pose.translation = -pose.rotation * eye;
  return pose;
}

Eigen::Vector3d random_unit(Rng& rng) {
  Eigen::Vector3d v;
  do {
    v = {rng.normal(), rng.normal(), rng.normal()};
  } while (v.norm() < 1e-6);
  return v.normalized();
}

struct SampledViews {
  CameraPose pose_a, pose_b;
  FrameJitter jitter_a, jitter_b;
};

SampledViews sample_views(Rng& rng, SceneKind kind, bool planar) {
  SampledViews s;
  if (kind == SceneKind::kTexturedPlanes) {
    const Eigen::Vector3d eye_a(rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3),
                                rng.uniform(-0.25, 0.25));
    const Eigen::Vector3d target_a(rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5),
                                   rng.uniform(2.6, 3.4));
    const double roll_a = rng.uniform(-0.06, 0.06);
    // Planar pairs keep a short baseline: depth is narrowed to 32 bits on
    // disk, and the induced pixel error grows with f*|t|/z^2, so a long
    // baseline would push stored-homography consistency past 1e-6 px.
    const double baseline =
        planar ? rng.uniform(0.08, 0.35) : rng.uniform(0.15, 0.8);
    const double spread = planar ? 0.65 : 0.45;
    const Eigen::Vector3d eye_b = eye_a + random_unit(rng) * baseline;
    const Eigen::Vector3d target_b =
        target_a +
        Eigen::Vector3d(rng.uniform(-spread, spread), rng.uniform(-spread, spread), 0);
    const double roll_b = roll_a + rng.uniform(-0.05, 0.05);
    s.pose_a = look_at(eye_a, target_a, roll_a);
    s.pose_b = look_at(eye_b, target_b, roll_b);
  } else {
    const Eigen::Vector3d eye_a(rng.uniform(-0.7, 0.7), rng.uniform(-0.5, 0.5),
                                rng.uniform(-0.2, 1.2));
    const double yaw_a = rng.uniform(-0.5, 0.5);
    const double pitch_a = rng.uniform(-0.25, 0.25);
    const auto view_dir = [](double yaw, double pitch) {
      return Eigen::Vector3d(std::sin(yaw) * std::cos(pitch), std::sin(pitch),
                             std::cos(yaw) * std::cos(pitch));
    };
    const double roll_a = rng.uniform(-0.06, 0.06);
    const Eigen::Vector3d eye_b = eye_a + random_unit(rng) * rng.uniform(0.1, 0.6);
    const double yaw_b = yaw_a + rng.uniform(-0.25, 0.25);
    const double pitch_b = pitch_a + rng.uniform(-0.12, 0.12);
    const double roll_b = roll_a + rng.uniform(-0.05, 0.05);
    s.pose_a = look_at(eye_a, eye_a + 3.0 * view_dir(yaw_a, pitch_a), roll_a);
    s.pose_b = look_at(eye_b, eye_b + 3.0 * view_dir(yaw_b, pitch_b), roll_b);
  }
  s.jitter_a = {};
  s.jitter_b.brightness = rng.uniform(-0.12, 0.12);
  s.jitter_b.gamma = rng.uniform(0.85, 1.18);
  return s;
}

std::string pair_name(int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "pair_%05d", index);
  return buf;
}

json pose_to_json(const CameraPose& pose) {
  json j;
  j["rotation"] = json::array();
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) j["rotation"].push_back(pose.rotation(r, c));
  }
  j["translation"] = {pose.translation.x(), pose.translation.y(),
                      pose.translation.z()};
  return j;
}

CameraPose pose_from_json(const json& j) {
  CameraPose pose;
  const auto& r = j.at("rotation");
  const auto& t = j.at("translation");
  if (r.size() != 9 || t.size() != 3) {
    throw FormatError("pose entry must hold 9 rotation and 3 translation values");
  }
  for (int i = 0; i < 9; ++i) pose.rotation(i / 3, i % 3) = r[i].get<double>();
  for (int i = 0; i < 3; ++i) pose.translation(i) = t[i].get<double>();
  return pose;
}

}  // namespace

SceneKind scene_kind_from_string(const std::string& name) {
  if (name == "textured-planes") return SceneKind::kTexturedPlanes;
  if (name == "box-room") return SceneKind::kBoxRoom;
  throw ConfigError("unknown scene kind: " + name);
}

std::string to_string(SceneKind kind) {
  return kind == SceneKind::kTexturedPlanes ? "textured-planes" : "box-room";
}

void SceneConfig::validate() const {
  if (height <= 0 || width <= 0 || height % 8 != 0 || width % 8 != 0) {
    throw ConfigError("scene size must be positive and divisible by 8, got " +
                      std::to_string(height) + "x" + std::to_string(width));
  }
  if (!(richness >= 0.0 && richness <= 1.0)) {
    throw ConfigError("texture richness must lie in [0, 1]");
  }
  if (plane_count < 0 || plane_count > 16) {
    throw ConfigError("plane_count must lie in [0, 16]");
  }
}

Scene generate_scene(std::uint64_t seed, const SceneConfig& config) {
  config.validate();
  Rng rng(mix_seed(seed, 0x5ce4e));
  Scene scene;
  scene.config = config;
  if (config.kind == SceneKind::kTexturedPlanes) {
    scene.patches = textured_plane_geometry(rng, config.plane_count);
    scene.light =
        Eigen::Vector3d(rng.uniform(-0.45, 0.45), rng.uniform(-0.45, 0.45), -1.0)
            .normalized();
  } else {
    scene.patches = box_room_geometry(rng);
    scene.light =
        Eigen::Vector3d(rng.uniform(-0.5, 0.5), -1.0, rng.uniform(-0.5, 0.5))
            .normalized();
  }
  paint_patches(scene.patches, config.richness, rng);
  scene.ambient = rng.uniform(0.3, 0.42);
  return scene;
}

RayHit trace_ray(const Scene& scene, const CameraPose& pose,
                 const CameraIntrinsics& intrinsics, double px, double py) {
  const Eigen::Vector3d dir_cam = intrinsics.normalize({px, py});
  const Eigen::Vector3d dir = pose.rotation.transpose() * dir_cam;
  const Eigen::Vector3d origin = pose.center();

  RayHit best;
  double best_t = std::numeric_limits<double>::infinity();
  for (int i = 0; i < static_cast<int>(scene.patches.size()); ++i) {
    const PlanePatch& p = scene.patches[i];
    if (dir.dot(p.normal) >= 0.0) continue;  // back side or grazing
    Eigen::Matrix3d m;
    m.col(0) = dir;
    m.col(1) = -p.edge_u;
    m.col(2) = -p.edge_v;
    if (std::abs(m.determinant()) < 1e-14) continue;
    const Eigen::Vector3d tuv = m.partialPivLu().solve(p.origin - origin);
    const double t = tuv(0), u = tuv(1), v = tuv(2);
    if (t <= 1e-9 || t >= best_t) continue;
    if (u < 0.0 || u > 1.0 || v < 0.0 || v > 1.0) continue;
    best_t = t;
    best.t = t;  // dir_cam has z = 1, so the ray parameter is the z-depth
    best.patch = i;
    best.u = u;
    best.v = v;
  }
  return best;
}

RenderedView render_view(const Scene& scene, const CameraPose& pose,
                         const CameraIntrinsics& intrinsics,
                         const FrameJitter& jitter) {
  const int h = scene.config.height, w = scene.config.width;
  RenderedView view;
  view.image.assign(static_cast<std::size_t>(h) * w * 3, 0.0);
  view.depth.height = h;
  view.depth.width = w;
  view.depth.values.assign(static_cast<std::size_t>(h) * w, 0.0);
  view.patch_id.assign(static_cast<std::size_t>(h) * w, -1);

  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const RayHit hit = trace_ray(scene, pose, intrinsics, x, y);
      if (hit.patch < 0) continue;
      const std::size_t px = static_cast<std::size_t>(y) * w + x;
      view.depth.values[px] = hit.t;
      view.patch_id[px] = hit.patch;
      const PlanePatch& patch = scene.patches[hit.patch];
      const double shade =
          scene.ambient +
          (1.0 - scene.ambient) * std::max(0.0, patch.normal.dot(scene.light));
      Eigen::Vector3d color = texture_color(patch, hit.u, hit.v) * shade;
      for (int c = 0; c < 3; ++c) {
        double v = color(c);
        if (jitter.gamma != 1.0) v = std::pow(std::max(0.0, v), jitter.gamma);
        view.image[px * 3 + c] = std::clamp(v + jitter.brightness, 0.0, 1.0);
      }
    }
  }
  return view;
}

ScenePair render_pair(const Scene& scene, const CameraPose& pose_a,
                      const CameraPose& pose_b,
                      const CameraIntrinsics& intrinsics,
                      const FrameJitter& jitter_a, const FrameJitter& jitter_b) {
  ScenePair pair;
  pair.frame_a =
      frame_from_view(render_view(scene, pose_a, intrinsics, jitter_a), intrinsics, pose_a);
  pair.frame_b =
      frame_from_view(render_view(scene, pose_b, intrinsics, jitter_b), intrinsics, pose_b);
  pair.overlap_score = overlap_from_gt(warp_correspondences(pair.frame_a, pair.frame_b));
  if (scene.patches.size() == 1) {
    pair.gt_homography = plane_homography(scene.patches[0], pose_a, pose_b, intrinsics);
  }
  return pair;
}

std::vector<DatasetIndexEntry> build_dataset(std::uint64_t seed, int n_pairs,
                                             double overlap_lo, double overlap_hi,
                                             const std::string& out_dir,
                                             const SceneConfig& config,
                                             int threads) {
  config.validate();
  if (n_pairs <= 0) throw ConfigError("n_pairs must be positive");
  if (!(overlap_lo >= 0.0 && overlap_lo < overlap_hi && overlap_hi <= 1.0)) {
    throw ConfigError("overlap range must satisfy 0 <= lo < hi <= 1");
  }
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir + ": " + ec.message());

  const CameraIntrinsics intrinsics{70.0 * config.width / 64.0,
                                    70.0 * config.width / 64.0, config.width / 2.0,
                                    config.height / 2.0};

  std::vector<DatasetIndexEntry> entries(n_pairs);
  parallel_for(
      n_pairs,
      [&](int i) {
        Rng rng(mix_seed(seed, static_cast<std::uint64_t>(i)));
        const Scene scene = generate_scene(rng.next_u64(), config);
        ScenePair pair;
        bool accepted = false;
        for (int attempt = 0; attempt < 1000; ++attempt) {
          const SampledViews views =
              sample_views(rng, config.kind, scene.patches.size() == 1);
          pair = render_pair(scene, views.pose_a, views.pose_b, intrinsics,
                             views.jitter_a, views.jitter_b);
          // Narrow depth to what the file format keeps, then score overlap on
          // the narrowed frames so a reloaded pair reproduces the stored value.
          for (double& d : pair.frame_a.depth.values) d = to_storage_precision(d);
          for (double& d : pair.frame_b.depth.values) d = to_storage_precision(d);
          pair.overlap_score =
              overlap_from_gt(warp_correspondences(pair.frame_a, pair.frame_b));
          if (pair.overlap_score >= overlap_lo && pair.overlap_score <= overlap_hi) {
            accepted = true;
            break;
          }
        }
        if (!accepted) {
          throw ConfigError("pair " + std::to_string(i) + ": 1000 pose samples missed overlap [" +
                            std::to_string(overlap_lo) + ", " + std::to_string(overlap_hi) + "]");
        }

        const std::string id = pair_name(i);
        const std::string dir = out_dir + "/" + id;
        std::error_code dir_ec;
        std::filesystem::create_directories(dir, dir_ec);
        if (dir_ec) throw IoError("cannot create " + dir + ": " + dir_ec.message());

        write_ppm(dir + "/a.ppm", config.height, config.width, pair.frame_a.image);
        write_ppm(dir + "/b.ppm", config.height, config.width, pair.frame_b.image);
        write_depth(dir + "/a.depth", pair.frame_a.depth);
        write_depth(dir + "/b.depth", pair.frame_b.depth);

        json meta;
        meta["intrinsics"] = {{"fx", intrinsics.fx},
                              {"fy", intrinsics.fy},
                              {"cx", intrinsics.cx},
                              {"cy", intrinsics.cy}};
        meta["pose_a"] = pose_to_json(pair.frame_a.pose);
        meta["pose_b"] = pose_to_json(pair.frame_b.pose);
        if (pair.gt_homography) {
          meta["gt_homography"] = json::array();
          for (int r = 0; r < 3; ++r) {
            for (int c = 0; c < 3; ++c) {
              meta["gt_homography"].push_back((*pair.gt_homography)(r, c));
            }
          }
        } else {
          meta["gt_homography"] = nullptr;
        }
        write_file_atomic(dir + "/meta.json", meta.dump(2) + "\n");
        entries[i] = {id, pair.overlap_score};
      },
      threads);

  json index = json::array();
  for (const DatasetIndexEntry& e : entries) {
    index.push_back({{"pair_id", e.pair_id}, {"overlap", e.overlap}});
  }
  write_file_atomic(out_dir + "/index.json", index.dump(2) + "\n");
  return entries;
}

std::vector<DatasetIndexEntry> load_index(const std::string& root) {
  json index;
  try {
    index = json::parse(read_file(root + "/index.json"));
  } catch (const json::exception& e) {
    throw FormatError(root + "/index.json: " + e.what());
  }
  if (!index.is_array()) throw FormatError(root + "/index.json: expected an array");
  std::vector<DatasetIndexEntry> entries;
  entries.reserve(index.size());
  try {
    for (const auto& item : index) {
      entries.push_back({item.at("pair_id").get<std::string>(),
                         item.at("overlap").get<double>()});
    }
  } catch (const json::exception& e) {
    throw FormatError(root + "/index.json: " + e.what());
  }
  return entries;
}

ScenePair load_pair(const std::string& root, const std::string& pair_id) {
  const std::string dir = root + "/" + pair_id;
  json meta;
  try {
    meta = json::parse(read_file(dir + "/meta.json"));
  } catch (const json::exception& e) {
    throw FormatError(dir + "/meta.json: " + e.what());
  }

  ScenePair pair;
  try {
    const auto& k = meta.at("intrinsics");
    const CameraIntrinsics intrinsics{k.at("fx").get<double>(), k.at("fy").get<double>(),
                                      k.at("cx").get<double>(), k.at("cy").get<double>()};
    pair.frame_a.intrinsics = intrinsics;
    pair.frame_b.intrinsics = intrinsics;
    pair.frame_a.pose = pose_from_json(meta.at("pose_a"));
    pair.frame_b.pose = pose_from_json(meta.at("pose_b"));
    const auto& h = meta.at("gt_homography");
    if (!h.is_null()) {
      if (h.size() != 9) throw FormatError("gt_homography must hold 9 values");
      Eigen::Matrix3d hm;
      for (int i = 0; i < 9; ++i) hm(i / 3, i % 3) = h[i].get<double>();
      pair.gt_homography = hm;
    }
  } catch (const json::exception& e) {
    throw FormatError(dir + "/meta.json: " + e.what());
  }

  for (const char* side : {"a", "b"}) {
    RgbdFrame& frame = side[0] == 'a' ? pair.frame_a : pair.frame_b;
    const PpmImage image = read_ppm(dir + "/" + side + ".ppm");
    frame.height = image.height;
    frame.width = image.width;
    frame.image = image.rgb;
    frame.depth = read_depth(dir + "/" + side + ".depth");
    if (frame.depth.height != frame.height || frame.depth.width != frame.width) {
      throw FormatError(dir + ": image is " + std::to_string(frame.height) + "x" +
                        std::to_string(frame.width) + " but depth is " +
                        std::to_string(frame.depth.height) + "x" +
                        std::to_string(frame.depth.width));
    }
    frame.validate();
  }
  pair.overlap_score = overlap_from_gt(warp_correspondences(pair.frame_a, pair.frame_b));
  return pair;
}

}  // namespace stfm
