#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "stfm/tensor.hpp"

namespace stfm {

// Image stride of the coarse grid and of the fine feature map.
inline constexpr int kCoarseStride = 8;
inline constexpr int kFineStride = 2;
// Fine-map cells per coarse cell along each axis.
inline constexpr int kFinePerCoarse = kCoarseStride / kFineStride;

struct MatcherConfig {
  int input_channels = 3;  // 3 = RGB student, 4 = RGB-D teacher
  int coarse_dim = 64;
  int fine_dim = 32;
  int coarse_layers = 4;  // interleaved self/cross blocks at 1/8 resolution
  int fine_layers = 1;
  int heads = 8;
  double tau = 0.1;        // dual-softmax temperature
  double theta_c = 0.2;    // coarse confidence threshold
  int window = 5;          // fine window size w

  void validate() const;
};

// Named parameter store with a deterministic registration order; the order
// defines checkpoint layout and the initialization RNG stream.
class ModelParams {
 public:
  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;
  bool contains(const std::string& name) const;
  void insert(const std::string& name, Tensor tensor);
  const std::vector<std::string>& names() const { return names_; }
  std::size_t size() const { return names_.size(); }

  // Xavier-uniform weights, zero biases, unit layer-norm gains.
  static ModelParams init(const MatcherConfig& config, std::uint64_t seed);

 private:
  std::vector<std::string> names_;
  std::unordered_map<std::string, Tensor> map_;
};

struct FeatureMaps {
  Tensor coarse;  // [c x H/8 x W/8]
  Tensor fine;    // [fine_dim x H/2 x W/2]
};

// FPN forward for one image [input_channels x H x W]; H, W divisible by 8.
FeatureMaps extract_features(const Tensor& image, const ModelParams& params,
                             const MatcherConfig& config);

// Adds the fixed 2-D sinusoidal encoding (input-independent; c divisible
// by 4: half the channels per spatial axis, sine/cosine interleaved).
Tensor positional_encode(const Tensor& f_c);

// [c x h x w] -> [hw x c], rows in row-major (y, x) order.
Tensor flatten_map(const Tensor& f);

// L_c interleaved blocks (self on A and B, then cross A<-B and B<-A from the
// post-self snapshots). Weights are shared between the two streams, so
// swapping the inputs swaps the outputs exactly.
std::pair<Tensor, Tensor> coarse_transformer(const Tensor& fa, const Tensor& fb,
                                             const ModelParams& params,
                                             const MatcherConfig& config);

// S_c(i,j) = <A_i, B_j> / c.
Tensor correlation_matrix(const Tensor& fa_hat, const Tensor& fb_hat);

struct DualSoftmax {
  Tensor s_c;  // retained for distillation losses
  Tensor q_h;  // row-wise softmax of S_c / tau
  Tensor q_v;  // column-wise softmax of S_c / tau
  Tensor p_c;  // Q_H ⊙ Q_V
};
DualSoftmax dual_softmax(const Tensor& s_c, double tau);

struct CoarseMatchSet {
  std::vector<std::pair<int, int>> matches;  // flat (A cell, B cell)
  std::vector<double> confidence;            // P_c at each match
  Tensor s_c, q_h, q_v, p_c;
  int grid_h = 0, grid_w = 0;
};

// Mutual argmax of P_c with confidence > theta_c; argmax ties broken by the
// smallest flattened index. An empty result is legal.
CoarseMatchSet select_coarse_matches(const DualSoftmax& probs, double theta_c,
                                     int grid_h, int grid_w);

struct FineWindowPair {
  Tensor a, b;  // [w^2 x (fine_dim + c)]
};

// w x w fine-feature crops centered at each match (zero-padded at borders),
// with the match's coarse feature vector broadcast-concatenated to every
// window position.
std::vector<FineWindowPair> crop_fine_windows(
    const Tensor& ff_a, const Tensor& ff_b, const Tensor& fa_hat,
    const Tensor& fb_hat, const std::vector<std::pair<int, int>>& matches,
    int grid_h, int grid_w, int window);

struct FineResult {
  Tensor heatmap;    // [1 x w^2], sums to 1
  Tensor mu_offset;  // [1 x 2], (dx, dy) in fine px relative to window center
  Tensor sigma2;     // scalar total variance (trace of the covariance)
};

// Projects the concatenated windows to fine_dim, runs L_f self/cross blocks,
// correlates the center feature of window A against all of window B, and
// reduces the softmax heatmap to its expectation and total variance.
FineResult fine_transformer_and_heatmap(const FineWindowPair& window_pair,
                                        const ModelParams& params,
                                        const MatcherConfig& config);

struct FineMatch {
  int coarse_a = 0, coarse_b = 0;  // flat coarse indices
  FineResult result;
  Eigen::Vector2d mu_fine;  // absolute fine-map coordinates of the B match
  Eigen::Vector2d point_a;  // image coordinates (A side is on the coarse grid)
  Eigen::Vector2d point_b;  // image coordinates, = mu_fine * 2
  double confidence = 0.0;
};

struct FineMatchSet {
  std::vector<FineMatch> matches;
  int window = 0;
};

struct MatchOutput {
  CoarseMatchSet coarse;
  FineMatchSet fine;
};

// Full pipeline. When forced_matches is non-null the fine branch runs at
// those coarse pairs instead of the selected ones (training-time evaluation
// at ground-truth locations); selection output is still returned.
MatchOutput match_pair(const Tensor& image_a, const Tensor& image_b,
                       const ModelParams& params, const MatcherConfig& config,
                       const std::vector<std::pair<int, int>>* forced_matches = nullptr);

}  // namespace stfm
