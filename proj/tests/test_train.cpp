#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <doctest.h>
#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include "stfm/checkpoint.hpp"
#include "stfm/error.hpp"
#include "stfm/image_io.hpp"
#include "stfm/model.hpp"
#include "stfm/scene.hpp"
#include "stfm/tensor.hpp"
#include "stfm/train.hpp"

using namespace stfm;

namespace {

std::string temp_root() {
  static std::string root = [] {
    auto path = std::filesystem::temp_directory_path() / "stfm_train_tests";
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
    return path.string();
  }();
  return root;
}

// Eight box-room pairs shared by every training test in this file.
const std::string& toy_dataset() {
  static std::string dir = [] {
    SceneConfig scene;
    scene.kind = SceneKind::kBoxRoom;
    scene.richness = 0.6;
    scene.height = 64;
    scene.width = 64;
    const std::string out = temp_root() + "/toy_data";
    build_dataset(/*seed=*/3, /*n_pairs=*/8, /*overlap_lo=*/0.4,
                  /*overlap_hi=*/0.8, out, scene);
    return out;
  }();
  return dir;
}

MatcherConfig tiny_matcher(int input_channels) {
  MatcherConfig config;
  config.input_channels = input_channels;
  config.coarse_dim = 8;
  config.fine_dim = 4;
  config.coarse_layers = 1;
  config.fine_layers = 1;
  config.heads = 2;
  return config;
}

TrainConfig base_config(TrainRole role) {
  TrainConfig config;
  config.role = role;
  config.dataset = toy_dataset();
  config.matcher = tiny_matcher(role == TrainRole::kTeacher ? 4 : 3);
  config.epochs = 2;
  config.seed = 11;
  return config;
}

// A briefly trained teacher checkpoint, built once on first use.
const std::string& quick_teacher() {
  static std::string path = [] {
    TrainConfig config = base_config(TrainRole::kTeacher);
    config.checkpoint_path = temp_root() + "/quick_teacher.ckpt";
    train_teacher(config);
    return config.checkpoint_path;
  }();
  return path;
}

}  // namespace

TEST_CASE("train config validation catches role and range errors") {
  TrainConfig config = base_config(TrainRole::kTeacher);
  CHECK_NOTHROW(config.validate());

  TrainConfig bad = config;
  bad.learning_rate = 0.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = config;
  bad.batch_size = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = config;
  bad.epochs = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = config;
  bad.dataset.clear();
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  // Student role requires a teacher; other roles forbid distillation flags.
  bad = base_config(TrainRole::kStudent);
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad.teacher_checkpoint = "somewhere.ckpt";
  CHECK_NOTHROW(bad.validate());
  bad = base_config(TrainRole::kTeacher);
  bad.use_mqd = true;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = base_config(TrainRole::kBaseline);
  bad.use_att = true;
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  // Channel counts are pinned by the role.
  bad = base_config(TrainRole::kTeacher);
  bad.matcher.input_channels = 3;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = base_config(TrainRole::kBaseline);
  bad.matcher.input_channels = 4;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("adamw leaves parameters alone under zero gradient and decay") {
  ModelParams params;
  params.insert("p", Tensor::from({2}, {1.0, 2.0}, true));
  OptimizerState state = OptimizerState::init(params);
  {
    ComputationTape tape;
    tape.backward(mul(sum(params.at("p")), 0.0));
  }
  adamw_step(params, state, /*lr=*/0.1, /*weight_decay=*/0.0);
  CHECK(params.at("p").value()[0] == 1.0);
  CHECK(params.at("p").value()[1] == 2.0);
  CHECK(state.step == 1);
}

TEST_CASE("adamw requires populated gradients") {
  ModelParams params;
  params.insert("p", Tensor::from({2}, {1.0, 2.0}, true));
  OptimizerState state = OptimizerState::init(params);
  CHECK_THROWS_AS(adamw_step(params, state, 0.1, 0.0), ContractError);
}

TEST_CASE("adamw single step descends and decoupled decay shrinks weights") {
  ModelParams params;
  params.insert("p", Tensor::from({1}, {1.0}, true));
  OptimizerState state = OptimizerState::init(params);
  {
    // f(theta) = theta^2 / 2, gradient = theta = 1.
    ComputationTape tape;
    tape.backward(mul(square(params.at("p")), 0.5));
  }
  adamw_step(params, state, 0.1, 0.0);
  CHECK(std::fabs(params.at("p").value()[0]) < 1.0);

  // Pure decay: gradient zero, weight decay 0.5, lr 0.1 -> x *= (1 - 0.05).
  ModelParams decay;
  decay.insert("p", Tensor::from({1}, {2.0}, true));
  OptimizerState dstate = OptimizerState::init(decay);
  {
    ComputationTape tape;
    tape.backward(mul(sum(decay.at("p")), 0.0));
  }
  adamw_step(decay, dstate, 0.1, 0.5);
  CHECK(decay.at("p").value()[0] == doctest::Approx(1.9).epsilon(1e-12));
}

TEST_CASE("adamw reaches a 2-D quadratic optimum within 200 steps") {
  // f(theta) = 2 (x - a)^2 + 0.5 (y - b)^2 around theta* = (1.02, 0.98).
  const double a = 1.02, b = 0.98;
  ModelParams params;
  params.insert("theta", Tensor::from({2}, {1.0, 1.0}, true));
  OptimizerState state = OptimizerState::init(params);
  for (int step = 0; step < 200; ++step) {
    {
      ComputationTape tape;
      const Tensor target = Tensor::from({2}, {a, b}, false);
      const Tensor diff = sub(params.at("theta"), target);
      const Tensor scale = Tensor::from({2}, {2.0, 0.5}, false);
      tape.backward(sum(mul(scale, square(diff))));
    }
    adamw_step(params, state, /*lr=*/5e-4, /*weight_decay=*/0.0);
    for (const std::string& name : params.names())
      params.at(name).zero_grad();
  }
  const auto& theta = params.at("theta").value();
  const double dist = std::hypot(theta[0] - a, theta[1] - b);
  CHECK(dist < 1e-3);
}

TEST_CASE("teacher training overfits the toy dataset and matches itself") {
  TrainConfig config = base_config(TrainRole::kTeacher);
  config.epochs = 200;
  config.checkpoint_path = temp_root() + "/overfit_teacher.ckpt";
  config.log_path = temp_root() + "/overfit_teacher.log";
  const TrainResult result = train_teacher(config);

  REQUIRE(result.log.size() == 200);
  const double initial = result.log.front().l_c;
  const double last = result.log.back().l_c;
  CHECK(last < 0.1 * initial);

  // The loss curve is non-increasing under a 10-epoch moving average, up to
  // constant-rate optimizer dither at the convergence floor: the allowance
  // is pinned at 1% of the initial average, two orders below the descent the
  // curve has to exhibit overall.
  std::vector<double> ma;
  for (size_t i = 0; i + 10 <= result.log.size(); ++i) {
    double s = 0.0;
    for (size_t k = i; k < i + 10; ++k) s += result.log[k].total;
    ma.push_back(s / 10.0);
  }
  const double dither = 0.01 * ma.front();
  for (size_t i = 1; i < ma.size(); ++i) CHECK(ma[i] <= ma[i - 1] + dither);
  CHECK(ma.back() < 0.1 * ma.front());

  // The training log file holds one JSON record per epoch.
  std::istringstream log_stream(read_file(config.log_path));
  std::string line;
  int lines = 0;
  while (std::getline(log_stream, line))
    if (!line.empty()) ++lines;
  CHECK(lines == 200);

  // A trained matcher run against the same frame matches cells to
  // themselves: at least 90% of selections lie on the diagonal.
  const Checkpoint ckpt = load_checkpoint(config.checkpoint_path);
  const ScenePair pair =
      load_pair(config.dataset, load_index(config.dataset)[0].pair_id);
  const int h = pair.frame_a.height, w = pair.frame_a.width;
  std::vector<double> rgbd(static_cast<size_t>(4 * h * w));
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const size_t px = static_cast<size_t>(y) * w + x;
      for (int c = 0; c < 3; ++c)
        rgbd[static_cast<size_t>(c) * h * w + px] =
            pair.frame_a.image[px * 3 + c];
      rgbd[static_cast<size_t>(3) * h * w + px] =
          pair.frame_a.depth.values[px] / 10.0;
    }
  }
  const Tensor self = Tensor::from({4, h, w}, std::move(rgbd), false);
  const MatchOutput out = match_pair(self, self, ckpt.params, ckpt.config);
  REQUIRE(!out.coarse.matches.empty());
  int diagonal = 0;
  for (const auto& [i, j] : out.coarse.matches)
    if (i == j) ++diagonal;
  CHECK(diagonal >=
        static_cast<int>(0.9 * static_cast<double>(out.coarse.matches.size())));
}

TEST_CASE("fixed seeds reproduce checkpoints bit for bit") {
  TrainConfig config = base_config(TrainRole::kTeacher);
  config.checkpoint_path = temp_root() + "/repro_a.ckpt";
  train_teacher(config);
  config.checkpoint_path = temp_root() + "/repro_b.ckpt";
  train_teacher(config);
  CHECK(read_file(temp_root() + "/repro_a.ckpt") ==
        read_file(temp_root() + "/repro_b.ckpt"));
  CHECK(read_file(temp_root() + "/repro_a.ckpt.json") ==
        read_file(temp_root() + "/repro_b.ckpt.json"));
}

TEST_CASE("student training distills from a frozen teacher") {
  const std::string teacher_bytes_before = read_file(quick_teacher());

  TrainConfig student = base_config(TrainRole::kStudent);
  student.teacher_checkpoint = quick_teacher();
  student.use_mqd = true;
  student.use_att = true;
  student.checkpoint_path = temp_root() + "/student.ckpt";
  const TrainResult result = train_student(student);

  // Distillation terms actually participated.
  bool saw_mqd = false;
  for (const EpochStats& s : result.log) saw_mqd |= s.l_mqd != 0.0;
  CHECK(saw_mqd);

  // The teacher is untouched on disk (and never entered the optimizer).
  CHECK(read_file(quick_teacher()) == teacher_bytes_before);

  // Distillation changes the outcome relative to the plain baseline.
  TrainConfig baseline = base_config(TrainRole::kBaseline);
  baseline.checkpoint_path = temp_root() + "/baseline.ckpt";
  train_baseline(baseline);
  CHECK(read_file(student.checkpoint_path) !=
        read_file(baseline.checkpoint_path));
}

TEST_CASE("student with zero distillation weights equals the baseline bit "
          "for bit") {
  TrainConfig student = base_config(TrainRole::kStudent);
  student.teacher_checkpoint = quick_teacher();
  student.use_mqd = true;
  student.use_att = true;
  student.loss.lambda2 = 0.0;
  student.loss.lambda3 = 0.0;
  student.checkpoint_path = temp_root() + "/student_degenerate.ckpt";
  train_student(student);

  TrainConfig baseline = base_config(TrainRole::kBaseline);
  baseline.checkpoint_path = temp_root() + "/baseline_degenerate.ckpt";
  train_baseline(baseline);

  CHECK(read_file(student.checkpoint_path) ==
        read_file(baseline.checkpoint_path));
}

TEST_CASE("student training rejects a teacher with a different architecture") {
  // A teacher whose transformer width differs from the student's.
  TrainConfig wide = base_config(TrainRole::kTeacher);
  wide.matcher.coarse_dim = 16;
  wide.epochs = 1;
  wide.checkpoint_path = temp_root() + "/wide_teacher.ckpt";
  train_teacher(wide);

  TrainConfig student = base_config(TrainRole::kStudent);
  student.teacher_checkpoint = wide.checkpoint_path;
  student.use_mqd = true;
  CHECK_THROWS_AS(train_student(student), ConfigError);
}

TEST_CASE("checkpoint save and load round-trip to storage precision") {
  const MatcherConfig config = tiny_matcher(3);
  const ModelParams params = ModelParams::init(config, 42);
  const std::string path = temp_root() + "/roundtrip.ckpt";
  save_checkpoint(params, config, path);
  const Checkpoint loaded = load_checkpoint(path);

  CHECK(loaded.config.input_channels == 3);
  CHECK(loaded.config.coarse_dim == config.coarse_dim);
  CHECK(loaded.params.size() == params.size());
  for (const std::string& name : params.names()) {
    REQUIRE(loaded.params.contains(name));
    const auto& original = params.at(name).value();
    const auto& round = loaded.params.at(name).value();
    REQUIRE(original.size() == round.size());
    for (size_t i = 0; i < original.size(); ++i)
      CHECK(round[i] == to_storage_precision(original[i]));
  }
}

TEST_CASE("checkpoint loading rejects malformed files") {
  const MatcherConfig config = tiny_matcher(3);
  const ModelParams params = ModelParams::init(config, 1);
  const std::string path = temp_root() + "/corrupt.ckpt";
  save_checkpoint(params, config, path);

  // Corrupted magic byte.
  std::string bytes = read_file(path);
  bytes[0] = 'X';
  write_file_atomic(path, bytes);
  CHECK_THROWS_AS(load_checkpoint(path), FormatError);

  // Truncation mid-values.
  save_checkpoint(params, config, path);
  bytes = read_file(path);
  write_file_atomic(path, bytes.substr(0, bytes.size() / 2));
  CHECK_THROWS_AS(load_checkpoint(path), FormatError);

  // Trailing garbage.
  save_checkpoint(params, config, path);
  bytes = read_file(path);
  write_file_atomic(path, bytes + "zz");
  CHECK_THROWS_AS(load_checkpoint(path), FormatError);

  // Missing sidecar.
  save_checkpoint(params, config, path);
  std::filesystem::remove(path + ".json");
  CHECK_THROWS_AS(load_checkpoint(path), IoError);
}

TEST_CASE("loading a four-channel checkpoint into a three-channel config is "
          "a configuration error") {
  const MatcherConfig teacher = tiny_matcher(4);
  const std::string path = temp_root() + "/four_channel.ckpt";
  save_checkpoint(ModelParams::init(teacher, 5), teacher, path);

  CHECK_NOTHROW(load_checkpoint(path));
  CHECK_NOTHROW(load_checkpoint(path, tiny_matcher(4)));
  CHECK_THROWS_AS(load_checkpoint(path, tiny_matcher(3)), ConfigError);
}
