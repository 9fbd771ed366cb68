#include "stfm/model.hpp"

#include <cmath>

#include "stfm/error.hpp"
#include "stfm/rng.hpp"

namespace stfm {

namespace {

// Backbone channel widths for the three encoder stages (1/2, 1/4, 1/8). The
// top-down pathway runs at kW2 channels.
constexpr int kW1 = 16;
constexpr int kW2 = 32;
constexpr int kW3 = 64;

std::string layer_prefix(const std::string& base, int layer, const char* kind) {
  return base + ".l" + std::to_string(layer) + "." + kind;
}

Tensor conv_bias(const Tensor& x, const ModelParams& params,
                 const std::string& name, int stride, int padding) {
  return add_channel_bias(conv2d(x, params.at(name + ".w"), stride, padding),
                          params.at(name + ".b"));
}

// Multi-head scaled dot-product attention; q from q_src, k/v from kv_src.
Tensor attention(const Tensor& q_src, const Tensor& kv_src,
                 const ModelParams& params, const std::string& prefix,
                 int heads) {
  const int c = q_src.dim(1);
  const int head_dim = c / heads;
  const Tensor q = add_rowvec(matmul(q_src, params.at(prefix + ".wq")),
                              params.at(prefix + ".bq"));
  const Tensor k = add_rowvec(matmul(kv_src, params.at(prefix + ".wk")),
                              params.at(prefix + ".bk"));
  const Tensor v = add_rowvec(matmul(kv_src, params.at(prefix + ".wv")),
                              params.at(prefix + ".bv"));
  std::vector<Tensor> heads_out;
  heads_out.reserve(heads);
  const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
  for (int h = 0; h < heads; ++h) {
    const int lo = h * head_dim, hi = lo + head_dim;
    const Tensor scores =
        mul(matmul(slice_cols(q, lo, hi), transpose(slice_cols(k, lo, hi))), scale);
    heads_out.push_back(matmul(softmax_T(scores, 1.0, 1), slice_cols(v, lo, hi)));
  }
  return add_rowvec(matmul(concat_cols(heads_out), params.at(prefix + ".wo")),
                    params.at(prefix + ".bo"));
}

// Pre-norm attention block with residuals: with every weight zero the block
// is the identity. For self-attention pass src = x (the same handle).
Tensor attn_block(const Tensor& x, const Tensor& src, const ModelParams& params,
                  const std::string& prefix, int heads) {
  const Tensor xn =
      layer_norm(x, params.at(prefix + ".norm1.g"), params.at(prefix + ".norm1.b"));
  const Tensor srcn =
      src.ptr() == x.ptr()
          ? xn
          : layer_norm(src, params.at(prefix + ".norm1.g"),
                       params.at(prefix + ".norm1.b"));
  const Tensor attended = add(x, attention(xn, srcn, params, prefix, heads));
  const Tensor an = layer_norm(attended, params.at(prefix + ".norm2.g"),
                               params.at(prefix + ".norm2.b"));
  Tensor ff = add_rowvec(matmul(an, params.at(prefix + ".ffn.w1")),
                         params.at(prefix + ".ffn.b1"));
  ff = add_rowvec(matmul(relu(ff), params.at(prefix + ".ffn.w2")),
                  params.at(prefix + ".ffn.b2"));
  return add(attended, ff);
}

// Interleaved self/cross stack shared by the coarse and fine transformers.
// Cross-attention consumes post-self snapshots of both streams, so the
// computation is exactly symmetric under swapping (A, B).
std::pair<Tensor, Tensor> interleaved_stack(Tensor fa, Tensor fb,
                                            const ModelParams& params,
                                            const std::string& base, int layers,
                                            int heads) {
  for (int l = 0; l < layers; ++l) {
    const std::string self_p = layer_prefix(base, l, "self");
    fa = attn_block(fa, fa, params, self_p, heads);
    fb = attn_block(fb, fb, params, self_p, heads);
    const std::string cross_p = layer_prefix(base, l, "cross");
    const Tensor fa_snap = fa, fb_snap = fb;
    fa = attn_block(fa_snap, fb_snap, params, cross_p, heads);
    fb = attn_block(fb_snap, fa_snap, params, cross_p, heads);
  }
  return {fa, fb};
}

void register_conv(ModelParams& params, Rng& rng, const std::string& name,
                   int out_ch, int in_ch, int k) {
  const double limit =
      std::sqrt(6.0 / (in_ch * k * k + out_ch * k * k));
  std::vector<double> w(static_cast<std::size_t>(out_ch) * in_ch * k * k);
  for (double& v : w) v = rng.uniform(-limit, limit);
  params.insert(name + ".w", Tensor::from({out_ch, in_ch, k, k}, std::move(w), true));
  params.insert(name + ".b", Tensor::zeros({out_ch}, true));
}

void register_linear(ModelParams& params, Rng& rng, const std::string& w_name,
                     const std::string& b_name, int in_dim, int out_dim) {
  const double limit = std::sqrt(6.0 / (in_dim + out_dim));
  std::vector<double> w(static_cast<std::size_t>(in_dim) * out_dim);
  for (double& v : w) v = rng.uniform(-limit, limit);
  params.insert(w_name, Tensor::from({in_dim, out_dim}, std::move(w), true));
  params.insert(b_name, Tensor::zeros({out_dim}, true));
}

void register_block(ModelParams& params, Rng& rng, const std::string& prefix,
                    int dim) {
  for (const char* name : {"q", "k", "v", "o"}) {
    register_linear(params, rng, prefix + ".w" + name, prefix + ".b" + name, dim,
                    dim);
  }
  params.insert(prefix + ".norm1.g", Tensor::full({dim}, 1.0, true));
  params.insert(prefix + ".norm1.b", Tensor::zeros({dim}, true));
  register_linear(params, rng, prefix + ".ffn.w1", prefix + ".ffn.b1", dim, 2 * dim);
  register_linear(params, rng, prefix + ".ffn.w2", prefix + ".ffn.b2", 2 * dim, dim);
  params.insert(prefix + ".norm2.g", Tensor::full({dim}, 1.0, true));
  params.insert(prefix + ".norm2.b", Tensor::zeros({dim}, true));
}

}  // namespace

void MatcherConfig::validate() const {
  if (input_channels != 3 && input_channels != 4) {
    throw ConfigError("input_channels must be 3 (RGB) or 4 (RGB-D), got " +
                      std::to_string(input_channels));
  }
  if (coarse_dim <= 0 || heads <= 0 || coarse_dim % heads != 0) {
    throw ConfigError("coarse_dim must be a positive multiple of heads");
  }
  if (coarse_dim % 4 != 0) {
    throw ConfigError("coarse_dim must be divisible by 4 for positional encoding");
  }
  if (fine_dim <= 0 || fine_dim % heads != 0) {
    throw ConfigError("fine_dim must be a positive multiple of heads");
  }
  if (coarse_layers < 1 || fine_layers < 1) {
    throw ConfigError("coarse_layers and fine_layers must be at least 1");
  }
  if (!(tau > 0.0)) throw ConfigError("tau must be positive");
  if (!(theta_c > 0.0 && theta_c < 1.0)) {
    throw ConfigError("theta_c must lie in (0, 1)");
  }
  if (window < 1 || window % 2 == 0) {
    throw ConfigError("window must be odd and positive");
  }
}

Tensor& ModelParams::at(const std::string& name) {
  const auto it = map_.find(name);
  if (it == map_.end()) throw ContractError("unknown parameter: " + name);
  return it->second;
}

const Tensor& ModelParams::at(const std::string& name) const {
  const auto it = map_.find(name);
  if (it == map_.end()) throw ContractError("unknown parameter: " + name);
  return it->second;
}

bool ModelParams::contains(const std::string& name) const {
  return map_.count(name) != 0;
}

void ModelParams::insert(const std::string& name, Tensor tensor) {
  if (!map_.emplace(name, std::move(tensor)).second) {
    throw ContractError("duplicate parameter: " + name);
  }
  names_.push_back(name);
}

ModelParams ModelParams::init(const MatcherConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  ModelParams params;

  register_conv(params, rng, "backbone.enc1.down", kW1, config.input_channels, 3);
  register_conv(params, rng, "backbone.enc1.refine", kW1, kW1, 3);
  register_conv(params, rng, "backbone.enc2.down", kW2, kW1, 3);
  register_conv(params, rng, "backbone.enc2.refine", kW2, kW2, 3);
  register_conv(params, rng, "backbone.enc3.down", kW3, kW2, 3);
  register_conv(params, rng, "backbone.enc3.refine", kW3, kW3, 3);
  register_conv(params, rng, "backbone.lat3", config.coarse_dim, kW3, 1);
  register_conv(params, rng, "backbone.bridge3", kW2, config.coarse_dim, 1);
  register_conv(params, rng, "backbone.lat2", kW2, kW2, 1);
  register_conv(params, rng, "backbone.smooth2", kW2, kW2, 3);
  register_conv(params, rng, "backbone.lat1", kW2, kW1, 1);
  register_conv(params, rng, "backbone.smooth1", config.fine_dim, kW2, 3);

  for (int l = 0; l < config.coarse_layers; ++l) {
    register_block(params, rng, layer_prefix("coarse", l, "self"), config.coarse_dim);
    register_block(params, rng, layer_prefix("coarse", l, "cross"), config.coarse_dim);
  }

  register_linear(params, rng, "fine.proj.w", "fine.proj.b",
                  config.fine_dim + config.coarse_dim, config.fine_dim);
  for (int l = 0; l < config.fine_layers; ++l) {
    register_block(params, rng, layer_prefix("fine", l, "self"), config.fine_dim);
    register_block(params, rng, layer_prefix("fine", l, "cross"), config.fine_dim);
  }
  return params;
}

FeatureMaps extract_features(const Tensor& image, const ModelParams& params,
                             const MatcherConfig& config) {
  if (image.rank() != 3) {
    throw DimensionError("extract_features expects [C x H x W], got " +
                         shape_str(image.shape()));
  }
  if (image.dim(0) != config.input_channels) {
    throw DimensionError("model expects " + std::to_string(config.input_channels) +
                         " input channels, image has " + std::to_string(image.dim(0)));
  }
  if (image.dim(1) % 8 != 0 || image.dim(2) % 8 != 0) {
    throw DimensionError("image dimensions must be divisible by 8, got " +
                         shape_str(image.shape()));
  }

  const Tensor c1 = relu(conv_bias(relu(conv_bias(image, params, "backbone.enc1.down", 2, 1)),
                                   params, "backbone.enc1.refine", 1, 1));
  const Tensor c2 = relu(conv_bias(relu(conv_bias(c1, params, "backbone.enc2.down", 2, 1)),
                                   params, "backbone.enc2.refine", 1, 1));
  const Tensor c3 = relu(conv_bias(relu(conv_bias(c2, params, "backbone.enc3.down", 2, 1)),
                                   params, "backbone.enc3.refine", 1, 1));

  FeatureMaps maps;
  maps.coarse = conv_bias(c3, params, "backbone.lat3", 1, 0);
  const Tensor up3 = upsample2(conv_bias(maps.coarse, params, "backbone.bridge3", 1, 0));
  const Tensor p2 = conv_bias(add(conv_bias(c2, params, "backbone.lat2", 1, 0), up3),
                              params, "backbone.smooth2", 1, 1);
  const Tensor p1 = add(conv_bias(c1, params, "backbone.lat1", 1, 0), upsample2(p2));
  maps.fine = conv_bias(p1, params, "backbone.smooth1", 1, 1);
  return maps;
}

Tensor positional_encode(const Tensor& f_c) {
  if (f_c.rank() != 3) {
    throw DimensionError("positional_encode expects [c x h x w], got " +
                         shape_str(f_c.shape()));
  }
  const int c = f_c.dim(0), h = f_c.dim(1), w = f_c.dim(2);
  if (c % 4 != 0) {
    throw DimensionError("positional encoding needs channels divisible by 4, got " +
                         std::to_string(c));
  }
  const int half = c / 2;
  const int bands = half / 2;
  std::vector<double> pe(static_cast<std::size_t>(c) * h * w);
  for (int ch = 0; ch < c; ++ch) {
    const bool x_axis = ch < half;
    const int within = x_axis ? ch : ch - half;
    const int band = within / 2;
    const bool is_sin = within % 2 == 0;
    const double omega = std::pow(10000.0, -static_cast<double>(band) / bands);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const double pos = x_axis ? x : y;
        pe[(static_cast<std::size_t>(ch) * h + y) * w + x] =
            is_sin ? std::sin(pos * omega) : std::cos(pos * omega);
      }
    }
  }
  return add(f_c, make_tensor({c, h, w}, std::move(pe), false));
}

Tensor flatten_map(const Tensor& f) {
  if (f.rank() != 3) {
    throw DimensionError("flatten_map expects [c x h x w], got " +
                         shape_str(f.shape()));
  }
  return transpose(reshape(f, {f.dim(0), f.dim(1) * f.dim(2)}));
}

std::pair<Tensor, Tensor> coarse_transformer(const Tensor& fa, const Tensor& fb,
                                             const ModelParams& params,
                                             const MatcherConfig& config) {
  return interleaved_stack(fa, fb, params, "coarse", config.coarse_layers,
                           config.heads);
}

Tensor correlation_matrix(const Tensor& fa_hat, const Tensor& fb_hat) {
  if (fa_hat.rank() != 2 || fb_hat.rank() != 2 || fa_hat.dim(1) != fb_hat.dim(1)) {
    throw DimensionError("correlation_matrix expects [n x c] and [m x c], got " +
                         shape_str(fa_hat.shape()) + " and " +
                         shape_str(fb_hat.shape()));
  }
  return mul(matmul(fa_hat, transpose(fb_hat)), 1.0 / fa_hat.dim(1));
}

DualSoftmax dual_softmax(const Tensor& s_c, double tau) {
  if (!(tau > 0.0)) throw ConfigError("tau must be positive");
  DualSoftmax out;
  out.s_c = s_c;
  out.q_h = softmax_T(s_c, tau, 1);
  out.q_v = softmax_T(s_c, tau, 0);
  out.p_c = mul(out.q_h, out.q_v);
  return out;
}

CoarseMatchSet select_coarse_matches(const DualSoftmax& probs, double theta_c,
                                     int grid_h, int grid_w) {
  const Tensor& p_c = probs.p_c;
  const int n = p_c.dim(0), m = p_c.dim(1);
  if (n != grid_h * grid_w) {
    throw DimensionError("P_c rows (" + std::to_string(n) +
                         ") disagree with grid " + std::to_string(grid_h) + "x" +
                         std::to_string(grid_w));
  }
  const std::vector<double>& v = p_c.value();
  // Argmax per row and per column; ties keep the smallest index because only
  // a strictly larger value displaces the incumbent.
  std::vector<int> row_best(n, 0), col_best(m, 0);
  for (int i = 0; i < n; ++i) {
    for (int j = 1; j < m; ++j) {
      if (v[i * m + j] > v[i * m + row_best[i]]) row_best[i] = j;
    }
  }
  for (int j = 0; j < m; ++j) {
    for (int i = 1; i < n; ++i) {
      if (v[i * m + j] > v[col_best[j] * m + j]) col_best[j] = i;
    }
  }

  CoarseMatchSet set;
  set.s_c = probs.s_c;
  set.q_h = probs.q_h;
  set.q_v = probs.q_v;
  set.p_c = probs.p_c;
  set.grid_h = grid_h;
  set.grid_w = grid_w;
  for (int i = 0; i < n; ++i) {
    const int j = row_best[i];
    if (col_best[j] != i) continue;
    if (v[i * m + j] <= theta_c) continue;
    set.matches.emplace_back(i, j);
    set.confidence.push_back(v[i * m + j]);
  }
  return set;
}

std::vector<FineWindowPair> crop_fine_windows(
    const Tensor& ff_a, const Tensor& ff_b, const Tensor& fa_hat,
    const Tensor& fb_hat, const std::vector<std::pair<int, int>>& matches,
    int grid_h, int grid_w, int window) {
  if (window < 1 || window % 2 == 0) {
    throw ConfigError("window must be odd and positive");
  }
  std::vector<FineWindowPair> out;
  out.reserve(matches.size());
  const int w2 = window * window;
  for (const auto& [i, j] : matches) {
    if (i < 0 || i >= grid_h * grid_w || j < 0 || j >= grid_h * grid_w) {
      throw DimensionError("match index out of grid range");
    }
    FineWindowPair pair;
    const int ay = i / grid_w, ax = i % grid_w;
    const int by = j / grid_w, bx = j % grid_w;
    pair.a = concat_cols(
        {crop_window(ff_a, kFinePerCoarse * ay, kFinePerCoarse * ax, window),
         gather_rows(fa_hat, std::vector<int>(w2, i))});
    pair.b = concat_cols(
        {crop_window(ff_b, kFinePerCoarse * by, kFinePerCoarse * bx, window),
         gather_rows(fb_hat, std::vector<int>(w2, j))});
    out.push_back(std::move(pair));
  }
  return out;
}

FineResult fine_transformer_and_heatmap(const FineWindowPair& window_pair,
                                        const ModelParams& params,
                                        const MatcherConfig& config) {
  Tensor a = add_rowvec(matmul(window_pair.a, params.at("fine.proj.w")),
                        params.at("fine.proj.b"));
  Tensor b = add_rowvec(matmul(window_pair.b, params.at("fine.proj.w")),
                        params.at("fine.proj.b"));
  std::tie(a, b) =
      interleaved_stack(a, b, params, "fine", config.fine_layers, config.heads);

  const int w2 = a.dim(0);
  const int w = static_cast<int>(std::lround(std::sqrt(static_cast<double>(w2))));
  if (w * w != w2) throw DimensionError("window rows are not a square count");
  const int center = (w2 - 1) / 2;
  const int radius = (w - 1) / 2;

  const Tensor query = gather_rows(a, {center});
  const Tensor scores =
      mul(matmul(query, transpose(b)), 1.0 / static_cast<double>(a.dim(1)));

  FineResult result;
  result.heatmap = softmax_T(scores, 1.0, 1);

  // Window coordinates relative to the center, (dx, dy), matching the
  // row-major (dy, dx) layout of crop_window.
  std::vector<double> coords(static_cast<std::size_t>(w2) * 2);
  std::vector<double> sq_norm(static_cast<std::size_t>(w2));
  for (int dy = 0; dy < w; ++dy) {
    for (int dx = 0; dx < w; ++dx) {
      const int p = dy * w + dx;
      coords[p * 2 + 0] = dx - radius;
      coords[p * 2 + 1] = dy - radius;
      sq_norm[p] = static_cast<double>((dx - radius) * (dx - radius) +
                                       (dy - radius) * (dy - radius));
    }
  }
  result.mu_offset =
      matmul(result.heatmap, make_tensor({w2, 2}, std::move(coords), false));
  const Tensor e_sq = sum(
      mul(result.heatmap, make_tensor({1, w2}, std::move(sq_norm), false)));
  result.sigma2 = sub(e_sq, sum(square(result.mu_offset)));
  return result;
}

MatchOutput match_pair(const Tensor& image_a, const Tensor& image_b,
                       const ModelParams& params, const MatcherConfig& config,
                       const std::vector<std::pair<int, int>>* forced_matches) {
  config.validate();
  const FeatureMaps feats_a = extract_features(image_a, params, config);
  const FeatureMaps feats_b = extract_features(image_b, params, config);
  const int grid_h = feats_a.coarse.dim(1), grid_w = feats_a.coarse.dim(2);

  const Tensor fa = flatten_map(positional_encode(feats_a.coarse));
  const Tensor fb = flatten_map(positional_encode(feats_b.coarse));
  const auto [fa_hat, fb_hat] = coarse_transformer(fa, fb, params, config);
  const DualSoftmax probs = dual_softmax(correlation_matrix(fa_hat, fb_hat), config.tau);

  MatchOutput out;
  out.coarse = select_coarse_matches(probs, config.theta_c, grid_h, grid_w);

  const std::vector<std::pair<int, int>>& fine_at =
      forced_matches != nullptr ? *forced_matches : out.coarse.matches;
  const std::vector<FineWindowPair> windows =
      crop_fine_windows(feats_a.fine, feats_b.fine, fa_hat, fb_hat, fine_at,
                        grid_h, grid_w, config.window);

  out.fine.window = config.window;
  out.fine.matches.reserve(fine_at.size());
  const std::vector<double>& pc = out.coarse.p_c.value();
  const int m = out.coarse.p_c.dim(1);
  for (std::size_t k = 0; k < fine_at.size(); ++k) {
    FineMatch match;
    match.coarse_a = fine_at[k].first;
    match.coarse_b = fine_at[k].second;
    match.result = fine_transformer_and_heatmap(windows[k], params, config);
    const int by = match.coarse_b / grid_w, bx = match.coarse_b % grid_w;
    const int ay = match.coarse_a / grid_w, ax = match.coarse_a % grid_w;
    match.mu_fine =
        Eigen::Vector2d(kFinePerCoarse * bx + match.result.mu_offset.value()[0],
                        kFinePerCoarse * by + match.result.mu_offset.value()[1]);
    match.point_a = Eigen::Vector2d(kCoarseStride * ax, kCoarseStride * ay);
    match.point_b = kFineStride * match.mu_fine;
    match.confidence = pc[match.coarse_a * m + match.coarse_b];
    out.fine.matches.push_back(std::move(match));
  }
  return out;
}

}  // namespace stfm
