#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "stfm/checkpoint.hpp"
#include "stfm/losses.hpp"
#include "stfm/model.hpp"

namespace stfm {

enum class TrainRole { kTeacher, kStudent, kBaseline };

TrainRole train_role_from_string(const std::string& name);
std::string to_string(TrainRole role);

// How the depth channel of the four-channel teacher input is normalized:
// fixed 0-10 m scaling for metric room scenes, per-pair min-max over the
// positive depths of both frames otherwise.
enum class DepthNorm { kFixed10, kMinMax };

struct TrainConfig {
  double learning_rate = 1e-3;
  double weight_decay = 1e-2;
  int batch_size = 4;  // gradient averaged across the batch
  int epochs = 10;
  std::uint64_t seed = 0;
  LossWeights loss;
  std::string dataset;  // dataset root directory
  TrainRole role = TrainRole::kTeacher;
  // Distillation terms, student role only. A term contributes only when its
  // flag is set and its weight is nonzero; with both inactive the student
  // run degenerates to the unimodal baseline bit for bit.
  bool use_mqd = false;
  bool use_att = false;
  std::string teacher_checkpoint;  // required for the student role
  MatcherConfig matcher;           // 4 input channels for teacher, else 3
  DepthNorm depth_norm = DepthNorm::kFixed10;
  // Fine supervision runs at the ground-truth coarse pairs, subsampled to at
  // most this many windows per pair (deterministic in the seed).
  int max_fine_matches = 16;
  std::string checkpoint_path;  // written when non-empty
  std::string log_path;         // JSONL, one record per epoch; optional

  void validate() const;
};

struct OptimizerState {
  // First/second moment estimates aligned with params.names().
  std::vector<std::vector<double>> m, v;
  long step = 0;
  static constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;

  static OptimizerState init(const ModelParams& params);
};

// Decoupled AdamW update in place from the gradients stored on the
// parameters: theta <- theta - lr*wd*theta - lr * m_hat / (sqrt(v_hat) + eps).
// A trainable parameter without a populated gradient is a contract error.
void adamw_step(ModelParams& params, OptimizerState& state, double lr,
                double weight_decay);

struct EpochStats {
  int epoch = 0;
  double l_c = 0.0, l_f = 0.0, l_mqd = 0.0, l_att = 0.0, total = 0.0;
  double wall_time_s = 0.0;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<EpochStats> log;
};

// Supervised training of the RGB-D teacher (4-channel inputs).
TrainResult train_teacher(const TrainConfig& config);

// Distillation training of the RGB student against a frozen teacher; the
// teacher checkpoint must share the student's architecture apart from the
// input channel count. The explicit-path overload mirrors the CLI.
TrainResult train_student(const TrainConfig& config);
TrainResult train_student(const TrainConfig& config,
                          const std::string& teacher_checkpoint);

// RGB-only baseline: the student architecture without distillation.
TrainResult train_baseline(const TrainConfig& config);

}  // namespace stfm
