#include "stfm/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iostream>
#include <numeric>
#include <optional>
#include <sstream>
#include <utility>

#include "stfm/error.hpp"
#include "stfm/geometry.hpp"
#include "stfm/image_io.hpp"
#include "stfm/rng.hpp"
#include "stfm/scene.hpp"

namespace stfm {
namespace {

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Frames are kept packed between epochs (8-bit color exactly as stored on
// disk, 32-bit depth) and expanded to tensors per forward pass.
struct PackedFrame {
  int h = 0, w = 0;
  std::vector<std::uint8_t> rgb;  // H*W*3 interleaved
  std::vector<float> depth;       // H*W

  static PackedFrame pack(const RgbdFrame& frame) {
    PackedFrame p;
    p.h = frame.height;
    p.w = frame.width;
    p.rgb.resize(frame.image.size());
    for (size_t i = 0; i < frame.image.size(); ++i)
      p.rgb[i] = static_cast<std::uint8_t>(
          std::lround(frame.image[i] * 255.0));
    p.depth.assign(frame.depth.values.begin(), frame.depth.values.end());
    return p;
  }
};

struct TrainingPair {
  std::string pair_id;
  PackedFrame a, b;
  double depth_lo = 0.0, depth_scale = 0.1;  // normalized = (d - lo) * scale
  std::vector<std::pair<int, int>> gt;       // coarse GT, flat indices
  std::vector<std::pair<int, int>> forced;   // fine supervision subset
  std::vector<std::optional<Eigen::Vector2d>> targets;  // aligned with forced
  // Frozen-teacher cache, student role only.
  std::vector<float> teacher_logits;  // S_c / tau, [hw x hw]
  std::vector<Eigen::Vector2d> mu_t;
  std::vector<double> sigma2_t;
};

Tensor frame_tensor(const PackedFrame& frame, bool with_depth,
                    double depth_lo, double depth_scale) {
  const int hw = frame.h * frame.w;
  const int channels = with_depth ? 4 : 3;
  std::vector<double> v(static_cast<size_t>(channels * hw));
  for (int y = 0; y < frame.h; ++y) {
    for (int x = 0; x < frame.w; ++x) {
      const size_t px = static_cast<size_t>(y) * frame.w + x;
      for (int c = 0; c < 3; ++c)
        v[static_cast<size_t>(c) * hw + px] =
            frame.rgb[px * 3 + c] / 255.0;
      if (with_depth) {
        const double d = frame.depth[px];
        v[static_cast<size_t>(3) * hw + px] =
            d > 0.0 ? (d - depth_lo) * depth_scale : 0.0;
      }
    }
  }
  return Tensor::from({channels, frame.h, frame.w}, std::move(v), false);
}

void set_depth_norm(TrainingPair& pair, DepthNorm norm) {
  if (norm == DepthNorm::kFixed10) {
    pair.depth_lo = 0.0;
    pair.depth_scale = 0.1;
    return;
  }
  double lo = 0.0, hi = 0.0;
  bool any = false;
  for (const auto* frame : {&pair.a, &pair.b}) {
    for (float d : frame->depth) {
      if (d <= 0.0f) continue;
      if (!any || d < lo) lo = d;
      if (!any || d > hi) hi = d;
      any = true;
    }
  }
  pair.depth_lo = any ? lo : 0.0;
  pair.depth_scale = 1.0 / std::max(hi - lo, 1e-9);
}

// Deterministic subsample of the GT matches used for fine supervision.
void choose_forced(TrainingPair& pair, const CorrespondenceGT& gt, int cap,
                   std::uint64_t seed) {
  std::vector<size_t> order(gt.coarse_matches.size());
  std::iota(order.begin(), order.end(), size_t{0});
  if (static_cast<int>(order.size()) > cap) {
    Rng rng(seed);
    for (size_t i = order.size() - 1; i > 0; --i) {
      const size_t j = rng.next_u64() % (i + 1);
      std::swap(order[i], order[j]);
    }
    order.resize(static_cast<size_t>(cap));
    std::sort(order.begin(), order.end());
  }
  for (size_t k : order) {
    pair.forced.push_back(gt.coarse_matches[k]);
    pair.targets.emplace_back(gt.fine_offsets[k]);
  }
}

std::vector<TrainingPair> load_training_pairs(const TrainConfig& config) {
  const auto index = load_index(config.dataset);
  std::vector<TrainingPair> pairs;
  pairs.reserve(index.size());
  size_t skipped = 0;
  for (size_t i = 0; i < index.size(); ++i) {
    const ScenePair scene_pair = load_pair(config.dataset, index[i].pair_id);
    const CorrespondenceGT gt =
        warp_correspondences(scene_pair.frame_a, scene_pair.frame_b);
    if (gt.coarse_matches.empty()) {
      ++skipped;
      continue;
    }
    TrainingPair pair;
    pair.pair_id = index[i].pair_id;
    pair.a = PackedFrame::pack(scene_pair.frame_a);
    pair.b = PackedFrame::pack(scene_pair.frame_b);
    set_depth_norm(pair, config.depth_norm);
    pair.gt = gt.coarse_matches;
    choose_forced(pair, gt, config.max_fine_matches, mix(config.seed, i));
    pairs.push_back(std::move(pair));
  }
  if (skipped > 0) {
    std::cerr << "warning: skipped " << skipped
              << " dataset pairs without coarse ground truth\n";
  }
  if (pairs.empty()) {
    throw ContractError("dataset " + config.dataset +
                        " contains no trainable pairs");
  }
  return pairs;
}

// Runs the frozen teacher once per pair and caches everything the
// distillation terms need: the correlation logits and the fine mean/variance
// at the student's fine-supervision pairs. No tape is active here, so none
// of this participates in the gradient.
void cache_teacher_outputs(std::vector<TrainingPair>& pairs,
                           const TrainConfig& config) {
  MatcherConfig teacher_config = config.matcher;
  teacher_config.input_channels = 4;
  const Checkpoint teacher =
      load_checkpoint(config.teacher_checkpoint, teacher_config);
  for (TrainingPair& pair : pairs) {
    const Tensor in_a =
        frame_tensor(pair.a, true, pair.depth_lo, pair.depth_scale);
    const Tensor in_b =
        frame_tensor(pair.b, true, pair.depth_lo, pair.depth_scale);
    const MatchOutput out = match_pair(in_a, in_b, teacher.params,
                                       teacher.config, &pair.forced);
    const std::vector<double>& s_c = out.coarse.s_c.value();
    pair.teacher_logits.resize(s_c.size());
    for (size_t i = 0; i < s_c.size(); ++i)
      pair.teacher_logits[i] =
          static_cast<float>(s_c[i] / teacher.config.tau);
    for (const FineMatch& match : out.fine.matches) {
      const auto& mu = match.result.mu_offset.value();
      pair.mu_t.emplace_back(mu[0], mu[1]);
      pair.sigma2_t.push_back(match.result.sigma2.item());
    }
  }
}

struct PairLosses {
  Tensor total;
  double l_c = 0.0, l_f = 0.0, l_mqd = 0.0, l_att = 0.0;
};

PairLosses pair_losses(const TrainingPair& pair, const ModelParams& params,
                       const TrainConfig& config, bool mqd_active,
                       bool att_active) {
  const bool teacher_input = config.role == TrainRole::kTeacher;
  const Tensor in_a =
      frame_tensor(pair.a, teacher_input, pair.depth_lo, pair.depth_scale);
  const Tensor in_b =
      frame_tensor(pair.b, teacher_input, pair.depth_lo, pair.depth_scale);
  const MatchOutput out =
      match_pair(in_a, in_b, params, config.matcher, &pair.forced);

  const LossWeights& w = config.loss;
  PairLosses losses;
  const Tensor l_c = coarse_loss(out.coarse.p_c, pair.gt, w.alpha, w.gamma);
  const Tensor l_f = fine_loss(out.fine, pair.targets);
  losses.l_c = l_c.item();
  losses.l_f = l_f.item();
  losses.total = add(mul(l_c, w.lambda0), mul(l_f, w.lambda1));

  if (mqd_active) {
    std::vector<double> o_t(pair.teacher_logits.begin(),
                            pair.teacher_logits.end());
    const Tensor teacher_logits = make_tensor(
        out.coarse.s_c.shape(), std::move(o_t), /*connected=*/false);
    const Tensor student_logits = mul(out.coarse.s_c, 1.0 / config.matcher.tau);
    MqdOptions options;
    options.temperature = w.temperature;
    options.alpha = w.alpha;
    options.gamma = w.gamma;
    const Tensor l_mqd =
        mqd_loss(student_logits, teacher_logits, pair.gt, options);
    losses.l_mqd = l_mqd.item();
    losses.total = add(losses.total, mul(l_mqd, w.lambda2));
  }
  if (att_active) {
    std::vector<Tensor> mu_s, mu_t, sigma2_t;
    for (size_t k = 0; k < out.fine.matches.size(); ++k) {
      mu_s.push_back(out.fine.matches[k].result.mu_offset);
      mu_t.push_back(make_tensor({1, 2},
                                 {pair.mu_t[k].x(), pair.mu_t[k].y()},
                                 /*connected=*/false));
      sigma2_t.push_back(Tensor::scalar(pair.sigma2_t[k]));
    }
    const Tensor l_att = attentive_loss(mu_s, mu_t, sigma2_t);
    losses.l_att = l_att.item();
    losses.total = add(losses.total, mul(l_att, w.lambda3));
  }
  return losses;
}

std::string stats_json(const EpochStats& s) {
  std::ostringstream out;
  out.precision(17);
  out << "{\"epoch\": " << s.epoch << ", \"L_c\": " << s.l_c
      << ", \"L_f\": " << s.l_f << ", \"L_MQD\": " << s.l_mqd
      << ", \"L_att\": " << s.l_att << ", \"total\": " << s.total
      << ", \"wall_time_s\": " << s.wall_time_s << "}";
  return out.str();
}

TrainResult run_training(const TrainConfig& config) {
  config.validate();
  std::vector<TrainingPair> pairs = load_training_pairs(config);

  const LossWeights& w = config.loss;
  const bool student = config.role == TrainRole::kStudent;
  const bool mqd_active = student && config.use_mqd && w.lambda2 > 0.0;
  const bool att_active = student && config.use_att && w.lambda3 > 0.0;
  if (mqd_active || att_active) cache_teacher_outputs(pairs, config);

  ModelParams params = ModelParams::init(config.matcher, config.seed);
  OptimizerState state = OptimizerState::init(params);

  TrainResult result;
  std::string log_text;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<size_t> order(pairs.size());
    std::iota(order.begin(), order.end(), size_t{0});
    Rng shuffle_rng(mix(config.seed, 0x10000ULL + epoch));
    for (size_t i = order.size() - 1; i > 0; --i) {
      const size_t j = shuffle_rng.next_u64() % (i + 1);
      std::swap(order[i], order[j]);
    }

    EpochStats stats;
    stats.epoch = epoch;
    for (size_t start = 0; start < order.size();
         start += static_cast<size_t>(config.batch_size)) {
      const size_t stop = std::min(
          order.size(), start + static_cast<size_t>(config.batch_size));
      ComputationTape tape;
      Tensor batch_total;
      for (size_t k = start; k < stop; ++k) {
        const PairLosses losses = pair_losses(pairs[order[k]], params, config,
                                              mqd_active, att_active);
        batch_total = batch_total.defined() ? add(batch_total, losses.total)
                                            : losses.total;
        stats.l_c += losses.l_c;
        stats.l_f += losses.l_f;
        stats.l_mqd += losses.l_mqd;
        stats.l_att += losses.l_att;
        stats.total += losses.total.item();
      }
      batch_total = mul(batch_total, 1.0 / static_cast<double>(stop - start));
      tape.backward(batch_total);
      adamw_step(params, state, config.learning_rate, config.weight_decay);
      for (const std::string& name : params.names())
        params.at(name).zero_grad();
    }
    const double n = static_cast<double>(pairs.size());
    stats.l_c /= n;
    stats.l_f /= n;
    stats.l_mqd /= n;
    stats.l_att /= n;
    stats.total /= n;
    stats.wall_time_s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
            .count();
    result.log.push_back(stats);
    if (!config.log_path.empty()) {
      log_text += stats_json(stats) + "\n";
      write_file_atomic(config.log_path, log_text);
    }
  }

  result.checkpoint.params = std::move(params);
  result.checkpoint.config = config.matcher;
  if (!config.checkpoint_path.empty()) {
    save_checkpoint(result.checkpoint.params, result.checkpoint.config,
                    config.checkpoint_path);
  }
  return result;
}

}  // namespace

TrainRole train_role_from_string(const std::string& name) {
  if (name == "teacher") return TrainRole::kTeacher;
  if (name == "student") return TrainRole::kStudent;
  if (name == "baseline" || name == "unimodal-baseline")
    return TrainRole::kBaseline;
  throw ConfigError("unknown training role: " + name);
}

std::string to_string(TrainRole role) {
  switch (role) {
    case TrainRole::kTeacher: return "teacher";
    case TrainRole::kStudent: return "student";
    case TrainRole::kBaseline: return "baseline";
  }
  return "unknown";
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0))
    throw ConfigError("learning rate must be > 0");
  if (!(weight_decay >= 0.0))
    throw ConfigError("weight decay must be >= 0");
  if (batch_size < 1) throw ConfigError("batch size must be >= 1");
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (max_fine_matches < 1)
    throw ConfigError("max_fine_matches must be >= 1");
  if (dataset.empty()) throw ConfigError("dataset path is required");
  loss.validate();
  matcher.validate();
  if (role == TrainRole::kStudent) {
    if (teacher_checkpoint.empty())
      throw ConfigError("student role requires a teacher checkpoint");
  } else if (use_mqd || use_att) {
    throw ConfigError("distillation flags require the student role");
  }
  const int expected_channels = role == TrainRole::kTeacher ? 4 : 3;
  if (matcher.input_channels != expected_channels) {
    throw ConfigError(to_string(role) + " training expects " +
                      std::to_string(expected_channels) +
                      " input channels, got " +
                      std::to_string(matcher.input_channels));
  }
}

OptimizerState OptimizerState::init(const ModelParams& params) {
  OptimizerState state;
  state.m.reserve(params.size());
  state.v.reserve(params.size());
  for (const std::string& name : params.names()) {
    const size_t n = params.at(name).value().size();
    state.m.emplace_back(n, 0.0);
    state.v.emplace_back(n, 0.0);
  }
  return state;
}

void adamw_step(ModelParams& params, OptimizerState& state, double lr,
                double weight_decay) {
  if (state.m.size() != params.size()) {
    throw ContractError("optimizer state does not match the parameter set");
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(OptimizerState::kBeta1, state.step);
  const double bc2 = 1.0 - std::pow(OptimizerState::kBeta2, state.step);
  size_t pi = 0;
  for (const std::string& name : params.names()) {
    Tensor& t = params.at(name);
    if (!t.has_grad()) {
      throw ContractError("adamw_step: parameter " + name +
                          " has no gradient");
    }
    const std::vector<double>& g = t.grad();
    auto& x = t.mutable_value();
    auto& m = state.m[pi];
    auto& v = state.v[pi];
    for (size_t i = 0; i < x.size(); ++i) {
      m[i] = OptimizerState::kBeta1 * m[i] +
             (1.0 - OptimizerState::kBeta1) * g[i];
      v[i] = OptimizerState::kBeta2 * v[i] +
             (1.0 - OptimizerState::kBeta2) * g[i] * g[i];
      const double m_hat = m[i] / bc1;
      const double v_hat = v[i] / bc2;
      x[i] -= lr * weight_decay * x[i] +
              lr * m_hat / (std::sqrt(v_hat) + OptimizerState::kEps);
    }
    ++pi;
  }
}

TrainResult train_teacher(const TrainConfig& config) {
  if (config.role != TrainRole::kTeacher)
    throw ConfigError("train_teacher requires the teacher role");
  return run_training(config);
}

TrainResult train_student(const TrainConfig& config) {
  if (config.role != TrainRole::kStudent)
    throw ConfigError("train_student requires the student role");
  return run_training(config);
}

TrainResult train_student(const TrainConfig& config,
                          const std::string& teacher_checkpoint) {
  TrainConfig with_teacher = config;
  with_teacher.teacher_checkpoint = teacher_checkpoint;
  return train_student(with_teacher);
}

TrainResult train_baseline(const TrainConfig& config) {
  if (config.role != TrainRole::kBaseline)
    throw ConfigError("train_baseline requires the baseline role");
  return run_training(config);
}

}  // namespace stfm
