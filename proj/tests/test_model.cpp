#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <doctest.h>
#include <set>
#include <vector>

#include "stfm/error.hpp"
#include "stfm/model.hpp"
#include "stfm/rng.hpp"
#include "stfm/tensor.hpp"

using namespace stfm;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  std::vector<double> v(static_cast<size_t>(shape_numel(shape)));
  for (auto& x : v) x = scale * rng.normal();
  return Tensor::from(std::move(shape), std::move(v), false);
}

MatcherConfig tiny_config() {
  MatcherConfig config;
  config.coarse_dim = 8;
  config.fine_dim = 4;
  config.coarse_layers = 1;
  config.fine_layers = 1;
  config.heads = 2;
  return config;
}

void zero_params_with_prefix(ModelParams& params, const std::string& prefix) {
  for (const std::string& name : params.names()) {
    if (name.rfind(prefix, 0) != 0) continue;
    for (double& v : params.at(name).mutable_value()) v = 0.0;
  }
}

}  // namespace

TEST_CASE("config validation enforces the documented invariants") {
  MatcherConfig config;
  CHECK_NOTHROW(config.validate());
  config.heads = 7;  // does not divide 64
  CHECK_THROWS_AS(config.validate(), ConfigError);
  config = MatcherConfig{};
  config.window = 4;
  CHECK_THROWS_AS(config.validate(), ConfigError);
  config = MatcherConfig{};
  config.tau = 0.0;
  CHECK_THROWS_AS(config.validate(), ConfigError);
  config = MatcherConfig{};
  config.theta_c = 1.0;
  CHECK_THROWS_AS(config.validate(), ConfigError);
  config = MatcherConfig{};
  config.input_channels = 5;
  CHECK_THROWS_AS(config.validate(), ConfigError);
}

TEST_CASE("parameter initialization is deterministic and ordered") {
  const MatcherConfig config = tiny_config();
  const ModelParams a = ModelParams::init(config, 3);
  const ModelParams b = ModelParams::init(config, 3);
  REQUIRE(a.names() == b.names());
  for (const std::string& name : a.names()) {
    CHECK(a.at(name).value() == b.at(name).value());
    CHECK(a.at(name).requires_grad());
  }
  const ModelParams c = ModelParams::init(config, 4);
  bool any_differs = false;
  for (const std::string& name : a.names()) {
    if (a.at(name).value() != c.at(name).value()) any_differs = true;
  }
  CHECK(any_differs);

  // Every parameter lives under one of the three module prefixes.
  for (const std::string& name : a.names()) {
    const bool known = name.rfind("backbone.", 0) == 0 ||
                       name.rfind("coarse.", 0) == 0 || name.rfind("fine.", 0) == 0;
    CHECK(known);
  }
}

TEST_CASE("64x64 input maps to an 8x8 coarse and 32x32 fine grid") {
  MatcherConfig config;
  const ModelParams params = ModelParams::init(config, 1);
  Rng rng(10);
  const Tensor image = random_tensor({3, 64, 64}, rng, 0.3);
  const FeatureMaps maps = extract_features(image, params, config);
  CHECK(maps.coarse.shape() == Shape{64, 8, 8});
  CHECK(maps.fine.shape() == Shape{32, 32, 32});

  const Tensor odd = random_tensor({3, 60, 64}, rng);
  CHECK_THROWS_AS(extract_features(odd, params, config), DimensionError);
}

TEST_CASE("zero input with zero biases produces zero feature maps") {
  MatcherConfig config = tiny_config();
  const ModelParams params = ModelParams::init(config, 2);  // biases start at 0
  const Tensor image = Tensor::zeros({3, 32, 32});
  const FeatureMaps maps = extract_features(image, params, config);
  for (double v : maps.coarse.value()) CHECK(v == 0.0);
  for (double v : maps.fine.value()) CHECK(v == 0.0);
}

TEST_CASE("teacher accepts 4-channel input; student rejects it") {
  MatcherConfig student = tiny_config();
  MatcherConfig teacher = tiny_config();
  teacher.input_channels = 4;
  const ModelParams sp = ModelParams::init(student, 5);
  const ModelParams tp = ModelParams::init(teacher, 5);
  Rng rng(11);
  const Tensor rgb = random_tensor({3, 32, 32}, rng, 0.3);
  const Tensor rgbd = random_tensor({4, 32, 32}, rng, 0.3);
  CHECK_NOTHROW(extract_features(rgbd, tp, teacher));
  CHECK_THROWS_AS(extract_features(rgbd, sp, student), DimensionError);
  CHECK_THROWS_AS(extract_features(rgb, tp, teacher), DimensionError);
}

TEST_CASE("positional encoding: zero at origin sines, input-independent, distinct") {
  const int c = 16, h = 8, w = 8;
  const Tensor zeros = Tensor::zeros({c, h, w});
  const Tensor pe = positional_encode(zeros);

  // Sine channels at (0, 0) are sin(0) = 0.
  for (int ch = 0; ch < c; ch += 2) CHECK(pe.value()[ch * h * w] == 0.0);

  // encode(F) - F is the same for every F.
  Rng rng(3);
  const Tensor f = random_tensor({c, h, w}, rng);
  const Tensor enc = positional_encode(f);
  for (int i = 0; i < f.numel(); ++i) {
    CHECK(enc.value()[i] - f.value()[i] == doctest::Approx(pe.value()[i]).epsilon(1e-12));
  }

  // All 64 grid positions carry distinct encoding vectors.
  for (int p = 0; p < h * w; ++p) {
    for (int q = p + 1; q < h * w; ++q) {
      double max_diff = 0.0;
      for (int ch = 0; ch < c; ++ch) {
        max_diff = std::max(max_diff, std::abs(pe.value()[ch * h * w + p] -
                                               pe.value()[ch * h * w + q]));
      }
      CHECK(max_diff > 1e-6);
    }
  }

  CHECK_THROWS_AS(positional_encode(Tensor::zeros({6, 2, 2})), DimensionError);
}

TEST_CASE("flatten_map lays rows out in (y, x) order") {
  // Channel ch at (y, x) holds 100*ch + y*4 + x.
  std::vector<double> v(2 * 3 * 4);
  for (int ch = 0; ch < 2; ++ch) {
    for (int p = 0; p < 12; ++p) v[ch * 12 + p] = 100 * ch + p;
  }
  const Tensor flat = flatten_map(Tensor::from({2, 3, 4}, std::move(v)));
  REQUIRE(flat.shape() == Shape{12, 2});
  for (int p = 0; p < 12; ++p) {
    CHECK(flat.value()[p * 2 + 0] == p);
    CHECK(flat.value()[p * 2 + 1] == 100 + p);
  }
}

TEST_CASE("coarse transformer with zero weights is the identity") {
  MatcherConfig config = tiny_config();
  config.coarse_layers = 2;
  ModelParams params = ModelParams::init(config, 7);
  zero_params_with_prefix(params, "coarse.");
  Rng rng(8);
  const Tensor fa = random_tensor({10, config.coarse_dim}, rng);
  const Tensor fb = random_tensor({10, config.coarse_dim}, rng);
  const auto [oa, ob] = coarse_transformer(fa, fb, params, config);
  CHECK(oa.value() == fa.value());
  CHECK(ob.value() == fb.value());
}

TEST_CASE("coarse transformer is exactly symmetric under swapping the pair") {
  MatcherConfig config = tiny_config();
  config.coarse_layers = 3;
  const ModelParams params = ModelParams::init(config, 9);
  Rng rng(12);
  const Tensor fa = random_tensor({9, config.coarse_dim}, rng);
  const Tensor fb = random_tensor({9, config.coarse_dim}, rng);
  const auto [oa, ob] = coarse_transformer(fa, fb, params, config);
  const auto [ob_swapped, oa_swapped] = coarse_transformer(fb, fa, params, config);
  CHECK(oa.value() == oa_swapped.value());
  CHECK(ob.value() == ob_swapped.value());
  CHECK(oa.shape() == Shape{9, config.coarse_dim});
}

TEST_CASE("correlation matrix matches definition and brute force") {
  // Identity features with c = hw: S_c = I / c.
  const int n = 4;
  std::vector<double> eye(n * n, 0.0);
  for (int i = 0; i < n; ++i) eye[i * n + i] = 1.0;
  const Tensor id = Tensor::from({n, n}, eye);
  const Tensor s_eye = correlation_matrix(id, id);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      CHECK(s_eye.value()[i * n + j] == (i == j ? 1.0 / n : 0.0));
    }
  }

  // A zero feature row gives a zero score row.
  Rng rng(14);
  Tensor fa = random_tensor({5, 6}, rng);
  const Tensor fb = random_tensor({7, 6}, rng);
  for (int k = 0; k < 6; ++k) fa.mutable_value()[2 * 6 + k] = 0.0;
  const Tensor s = correlation_matrix(fa, fb);
  REQUIRE(s.shape() == Shape{5, 7});
  for (int j = 0; j < 7; ++j) CHECK(s.value()[2 * 7 + j] == 0.0);

  // Brute-force double loop.
  for (int i = 0; i < 5; ++i) {
    for (int j = 0; j < 7; ++j) {
      double dot = 0.0;
      for (int k = 0; k < 6; ++k) {
        dot += fa.value()[i * 6 + k] * fb.value()[j * 6 + k];
      }
      CHECK(std::abs(s.value()[i * 7 + j] - dot / 6.0) < 1e-12);
    }
  }
}

TEST_CASE("dual softmax: uniform scores, sharp identity, probability bounds") {
  const Tensor flat = Tensor::full({2, 2}, 0.3);
  const DualSoftmax u = dual_softmax(flat, 0.1);
  for (double v : u.q_h.value()) CHECK(v == 0.5);
  for (double v : u.q_v.value()) CHECK(v == 0.5);
  for (double v : u.p_c.value()) CHECK(v == 0.25);

  // S_c = I, tau = 0.1: P_c(0,0) = (e^10 / (e^10 + 1))^2.
  std::vector<double> eye = {1, 0, 0, 1};
  const DualSoftmax sharp = dual_softmax(Tensor::from({2, 2}, eye), 0.1);
  const double expected_side = 1.0 / (1.0 + std::exp(-10.0));
  CHECK(std::abs(sharp.p_c.value()[0] - expected_side * expected_side) < 1e-12);
  CHECK(sharp.p_c.value()[0] == doctest::Approx(0.99991).epsilon(1e-4));

  // Random scores: rows of Q_H and columns of Q_V sum to 1; P_c = Q_H ⊙ Q_V;
  // each entry lies in (0,1) and below min(Q_H, Q_V).
  Rng rng(15);
  const Tensor s = random_tensor({6, 6}, rng, 2.0);
  const DualSoftmax d = dual_softmax(s, 0.1);
  for (int i = 0; i < 6; ++i) {
    double row = 0.0, col = 0.0;
    for (int j = 0; j < 6; ++j) {
      row += d.q_h.value()[i * 6 + j];
      col += d.q_v.value()[j * 6 + i];
    }
    CHECK(std::abs(row - 1.0) < 1e-6);
    CHECK(std::abs(col - 1.0) < 1e-6);
  }
  for (int k = 0; k < 36; ++k) {
    const double p = d.p_c.value()[k];
    CHECK(p > 0.0);
    CHECK(p < 1.0);
    CHECK(std::abs(p - d.q_h.value()[k] * d.q_v.value()[k]) < 1e-12);
    CHECK(p <= std::min(d.q_h.value()[k], d.q_v.value()[k]) + 1e-15);
  }
}

TEST_CASE("match selection: mutuality, threshold, and tie-breaking") {
  const auto probs_from = [](Shape shape, std::vector<double> v) {
    DualSoftmax ds;
    ds.p_c = Tensor::from(std::move(shape), std::move(v));
    ds.s_c = ds.p_c;
    ds.q_h = ds.p_c;
    ds.q_v = ds.p_c;
    return ds;
  };

  // 0.9 I: every diagonal pair selected.
  std::vector<double> diag(9, 0.0);
  for (int i = 0; i < 3; ++i) diag[i * 3 + i] = 0.9;
  const CoarseMatchSet all = select_coarse_matches(probs_from({3, 3}, diag), 0.2, 1, 3);
  REQUIRE(all.matches.size() == 3);
  for (int i = 0; i < 3; ++i) {
    CHECK(all.matches[i] == std::pair<int, int>(i, i));
    CHECK(all.confidence[i] == 0.9);
  }

  // Uniform probabilities below the threshold: empty set.
  const CoarseMatchSet none = select_coarse_matches(
      probs_from({9, 9}, std::vector<double>(81, 1.0 / 81)), 0.2, 3, 3);
  CHECK(none.matches.empty());

  // Row max at (0,1) = 0.5 loses column 1 to (2,1) = 0.6: mutuality rejects it.
  std::vector<double> v(9, 0.01);
  v[0 * 3 + 1] = 0.5;
  v[2 * 3 + 1] = 0.6;
  const CoarseMatchSet mutual = select_coarse_matches(probs_from({3, 3}, v), 0.2, 1, 3);
  REQUIRE(mutual.matches.size() == 1);
  CHECK(mutual.matches[0] == std::pair<int, int>(2, 1));

  // Argmax ties resolve to the smallest index.
  std::vector<double> tie(9, 0.0);
  tie[0] = 0.4;
  tie[1] = 0.4;
  const CoarseMatchSet smallest = select_coarse_matches(probs_from({3, 3}, tie), 0.2, 1, 3);
  REQUIRE(smallest.matches.size() == 1);
  CHECK(smallest.matches[0] == std::pair<int, int>(0, 0));
}

TEST_CASE("fine window crops: center content, zero padding, channel count") {
  const int grid = 4, fine_hw = 16, fine_dim = 2, c = 3;
  std::vector<double> ff(fine_dim * fine_hw * fine_hw);
  for (size_t i = 0; i < ff.size(); ++i) ff[i] = static_cast<double>(i) + 1.0;
  const Tensor fine_map = Tensor::from({fine_dim, fine_hw, fine_hw}, ff);
  std::vector<double> coarse_rows(grid * grid * c);
  for (size_t i = 0; i < coarse_rows.size(); ++i) coarse_rows[i] = 1000.0 + i;
  const Tensor f_hat = Tensor::from({grid * grid, c}, coarse_rows);

  const std::vector<std::pair<int, int>> matches = {{5, 5}, {0, 15}};
  const auto windows =
      crop_fine_windows(fine_map, fine_map, f_hat, f_hat, matches, grid, grid, 5);
  REQUIRE(windows.size() == 2);
  CHECK(windows[0].a.shape() == Shape{25, fine_dim + c});

  // Interior match (cell 5 -> fine center (4,4)): window center row equals the
  // fine map there, and the coarse columns equal row 5 of the flat features.
  const auto& wa = windows[0].a.value();
  for (int ch = 0; ch < fine_dim; ++ch) {
    CHECK(wa[12 * (fine_dim + c) + ch] == fine_map.value()[(ch * 16 + 4) * 16 + 4]);
  }
  for (int k = 0; k < c; ++k) {
    for (int p = 0; p < 25; ++p) {
      CHECK(wa[p * (fine_dim + c) + fine_dim + k] == f_hat.value()[5 * c + k]);
    }
  }

  // Corner match (cell 0 -> fine center (0,0)): positions above/left of the
  // image are zero in the fine columns, broadcast coarse columns are not.
  const auto& corner = windows[1].a.value();
  for (int dy = 0; dy < 5; ++dy) {
    for (int dx = 0; dx < 5; ++dx) {
      if (dy >= 2 && dx >= 2) continue;  // inside the image
      for (int ch = 0; ch < fine_dim; ++ch) {
        CHECK(corner[(dy * 5 + dx) * (fine_dim + c) + ch] == 0.0);
      }
    }
  }
  CHECK(corner[0 * (fine_dim + c) + fine_dim] == f_hat.value()[0]);
}

TEST_CASE("fine heatmap: uniform weights give the window center and sigma^2 = 4") {
  MatcherConfig config = tiny_config();
  ModelParams params = ModelParams::init(config, 20);
  zero_params_with_prefix(params, "fine.");
  Rng rng(21);
  FineWindowPair window;
  window.a = random_tensor({25, config.fine_dim + config.coarse_dim}, rng);
  window.b = random_tensor({25, config.fine_dim + config.coarse_dim}, rng);
  const FineResult r = fine_transformer_and_heatmap(window, params, config);
  REQUIRE(r.heatmap.shape() == Shape{1, 25});
  for (double v : r.heatmap.value()) CHECK(v == doctest::Approx(0.04).epsilon(1e-12));
  CHECK(std::abs(r.mu_offset.value()[0]) < 1e-12);
  CHECK(std::abs(r.mu_offset.value()[1]) < 1e-12);
  CHECK(r.sigma2.item() == doctest::Approx(4.0).epsilon(1e-12));
}

TEST_CASE("fine heatmap: a one-hot distribution pins mu and zeroes sigma^2") {
  MatcherConfig config = tiny_config();
  ModelParams params = ModelParams::init(config, 22);
  // Identity projection of the first fine_dim columns; everything else zero,
  // so the transformer is the identity and scores come straight from inputs.
  zero_params_with_prefix(params, "fine.");
  Tensor& proj = params.at("fine.proj.w");
  for (int d = 0; d < config.fine_dim; ++d) {
    proj.mutable_value()[d * config.fine_dim + d] = 1.0;
  }
  FineWindowPair window;
  window.a = Tensor::zeros({25, config.fine_dim + config.coarse_dim});
  window.b = Tensor::zeros({25, config.fine_dim + config.coarse_dim});
  const double big = 100.0;
  window.a.mutable_value()[12 * (config.fine_dim + config.coarse_dim)] = big;
  const int target = 17;  // (dy, dx) = (3, 2) -> offset (0, 1)
  window.b.mutable_value()[target * (config.fine_dim + config.coarse_dim)] = big;
  const FineResult r = fine_transformer_and_heatmap(window, params, config);
  CHECK(r.heatmap.value()[target] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(r.mu_offset.value()[0] == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(r.mu_offset.value()[1] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(r.sigma2.item() == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("fine heatmap invariants hold for random features") {
  MatcherConfig config = tiny_config();
  const ModelParams params = ModelParams::init(config, 23);
  Rng rng(24);
  for (int trial = 0; trial < 5; ++trial) {
    FineWindowPair window;
    window.a = random_tensor({25, config.fine_dim + config.coarse_dim}, rng);
    window.b = random_tensor({25, config.fine_dim + config.coarse_dim}, rng);
    const FineResult r = fine_transformer_and_heatmap(window, params, config);
    double total = 0.0;
    for (double v : r.heatmap.value()) total += v;
    CHECK(std::abs(total - 1.0) < 1e-9);
    CHECK(std::abs(r.mu_offset.value()[0]) <= 2.0);
    CHECK(std::abs(r.mu_offset.value()[1]) <= 2.0);
    CHECK(r.sigma2.item() >= -1e-12);
    CHECK(r.sigma2.item() <= 2.0 * 4.0 * 2.0);
  }
}

TEST_CASE("match_pair completes with untrained weights on both model kinds") {
  MatcherConfig student = tiny_config();
  MatcherConfig teacher = tiny_config();
  teacher.input_channels = 4;
  const ModelParams sp = ModelParams::init(student, 30);
  const ModelParams tp = ModelParams::init(teacher, 30);
  Rng rng(31);
  const Tensor rgb_a = random_tensor({3, 32, 32}, rng, 0.3);
  const Tensor rgb_b = random_tensor({3, 32, 32}, rng, 0.3);
  const Tensor rgbd_a = random_tensor({4, 32, 32}, rng, 0.3);
  const Tensor rgbd_b = random_tensor({4, 32, 32}, rng, 0.3);

  const MatchOutput s = match_pair(rgb_a, rgb_b, sp, student);
  const MatchOutput t = match_pair(rgbd_a, rgbd_b, tp, teacher);

  for (const MatchOutput* out : {&s, &t}) {
    CHECK(out->coarse.s_c.shape() == Shape{16, 16});
    CHECK(out->coarse.grid_h == 4);
    CHECK(out->fine.matches.size() == out->coarse.matches.size());
    // Every selected match is a mutual argmax with confidence above theta_c.
    const auto& p = out->coarse.p_c.value();
    for (size_t k = 0; k < out->coarse.matches.size(); ++k) {
      const auto [i, j] = out->coarse.matches[k];
      CHECK(out->coarse.confidence[k] > student.theta_c);
      for (int jj = 0; jj < 16; ++jj) CHECK(p[i * 16 + j] >= p[i * 16 + jj]);
      for (int ii = 0; ii < 16; ++ii) CHECK(p[i * 16 + j] >= p[ii * 16 + j]);
    }
    for (const FineMatch& fm : out->fine.matches) {
      CHECK(fm.point_b.x() == 2.0 * fm.mu_fine.x());
      CHECK(fm.point_b.y() == 2.0 * fm.mu_fine.y());
      CHECK(std::abs(fm.mu_fine.x() - kFinePerCoarse * (fm.coarse_b % 4)) <= 2.0);
    }
  }
}

TEST_CASE("forced matches route the fine branch to chosen coarse cells") {
  MatcherConfig config = tiny_config();
  const ModelParams params = ModelParams::init(config, 33);
  Rng rng(34);
  const Tensor a = random_tensor({3, 32, 32}, rng, 0.3);
  const Tensor b = random_tensor({3, 32, 32}, rng, 0.3);
  const std::vector<std::pair<int, int>> forced = {{0, 5}, {9, 9}, {15, 2}};
  const MatchOutput out = match_pair(a, b, params, config, &forced);
  REQUIRE(out.fine.matches.size() == 3);
  for (size_t k = 0; k < forced.size(); ++k) {
    CHECK(out.fine.matches[k].coarse_a == forced[k].first);
    CHECK(out.fine.matches[k].coarse_b == forced[k].second);
  }
}
