#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <doctest.h>
#include <thread>
#include <vector>

#include "gradcheck.hpp"
#include "stfm/rng.hpp"
#include "stfm/tensor.hpp"

using namespace stfm;
using stfm::testing::max_fd_error;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, bool requires_grad = true,
                     double scale = 1.0) {
  std::vector<double> v(static_cast<size_t>(shape_numel(shape)));
  for (auto& x : v) x = scale * rng.normal();
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

}  // namespace

TEST_CASE("tensor construction enforces shape/data agreement") {
  CHECK_THROWS_AS(Tensor::from({2, 3}, {1.0, 2.0}), DimensionError);
  CHECK_THROWS_AS(Tensor::from({0, 3}, {}), DimensionError);
  Tensor t = Tensor::from({2, 2}, {1, 2, 3, 4});
  CHECK(t.numel() == 4);
  CHECK(t.value()[2] == 3.0);
  CHECK_THROWS_AS(t.item(), ContractError);
  CHECK(Tensor::scalar(7.0).item() == 7.0);
}

TEST_CASE("matmul forward identities") {
  Tensor I = Tensor::from({2, 2}, {1, 0, 0, 1});
  Tensor A = Tensor::from({2, 2}, {1, 2, 3, 4});
  Tensor C = matmul(I, A);
  for (int i = 0; i < 4; ++i) CHECK(C.value()[i] == doctest::Approx(A.value()[i]));

  Tensor P = Tensor::from({2, 2}, {1, 0, 0, 0});
  Tensor Q = Tensor::from({2, 2}, {0, 0, 0, 1});
  Tensor Z = matmul(P, Q);
  for (double v : Z.value()) CHECK(v == 0.0);

  CHECK_THROWS_AS(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})),
                  DimensionError);
}

TEST_CASE("matmul gradient matches finite differences") {
  Rng rng(7);
  Tensor a = random_tensor({3, 4}, rng);
  Tensor b = random_tensor({4, 2}, rng);
  const double err =
      max_fd_error([&] { return sum(matmul(a, b)); }, {a, b});
  CHECK(err < 1e-6);
}

TEST_CASE("softmax_T forward values") {
  Tensor even = softmax_T(Tensor::from({2}, {0, 0}), 3.7, 0);
  CHECK(even.value()[0] == doctest::Approx(0.5));
  CHECK(even.value()[1] == doctest::Approx(0.5));

  Tensor sharp = softmax_T(Tensor::from({2}, {1, 0}), 0.1, 0);
  CHECK(sharp.value()[0] == doctest::Approx(0.9999546).epsilon(1e-6));
  CHECK(sharp.value()[1] == doctest::Approx(4.54e-5).epsilon(1e-3));

  CHECK_THROWS_AS(softmax_T(Tensor::zeros({3}), 0.0, 0), ConfigError);
  CHECK_THROWS_AS(softmax_T(Tensor::zeros({3}), -1.0, 0), ConfigError);
}

TEST_CASE("softmax_T slices sum to one across axes and temperatures") {
  Rng rng(11);
  for (double T : {0.05, 0.1, 1.0, 10.0}) {
    Tensor x = random_tensor({5, 7}, rng, false, 3.0);
    Tensor rows = softmax_T(x, T, 1);
    for (int r = 0; r < 5; ++r) {
      double s = 0.0;
      for (int c = 0; c < 7; ++c) s += rows.value()[r * 7 + c];
      CHECK(std::fabs(s - 1.0) < 1e-9);
    }
    Tensor cols = softmax_T(x, T, 0);
    for (int c = 0; c < 7; ++c) {
      double s = 0.0;
      for (int r = 0; r < 5; ++r) s += cols.value()[r * 7 + c];
      CHECK(std::fabs(s - 1.0) < 1e-9);
    }
  }
}

TEST_CASE("softmax_T gradient matches finite differences") {
  Rng rng(13);
  Tensor x = random_tensor({3, 5}, rng);
  Tensor w = random_tensor({3, 5}, rng, false);
  for (int axis : {0, 1}) {
    const double err = max_fd_error(
        [&] { return sum(mul(softmax_T(x, 0.37, axis), w)); }, {x});
    CHECK(err < 1e-5);
  }
}

TEST_CASE("conv2d forward identities and shape rules") {
  Rng rng(17);
  Tensor img = random_tensor({1, 4, 4}, rng, false);
  Tensor unit = Tensor::from({1, 1, 1, 1}, {1.0});
  Tensor same = conv2d(img, unit, 1, 0);
  REQUIRE(same.shape() == Shape{1, 4, 4});
  for (int i = 0; i < 16; ++i)
    CHECK(same.value()[i] == doctest::Approx(img.value()[i]));

  Tensor zk = Tensor::zeros({2, 1, 3, 3});
  Tensor z = conv2d(img, zk, 1, 1);
  REQUIRE(z.shape() == Shape{2, 4, 4});
  for (double v : z.value()) CHECK(v == 0.0);

  // H' = floor((H + 2p - k)/stride) + 1
  Tensor strided = conv2d(random_tensor({1, 9, 9}, rng, false),
                          Tensor::zeros({1, 1, 3, 3}), 2, 1);
  CHECK(strided.shape() == Shape{1, 5, 5});

  CHECK_THROWS_AS(conv2d(Tensor::zeros({1, 2, 2}), Tensor::zeros({1, 1, 5, 5}), 1, 0),
                  DimensionError);
  CHECK_THROWS_AS(conv2d(Tensor::zeros({2, 4, 4}), Tensor::zeros({1, 3, 3, 3}), 1, 1),
                  DimensionError);
  CHECK_THROWS_AS(conv2d(Tensor::zeros({1, 4, 4}), Tensor::zeros({1, 1, 2, 2}), 1, 0),
                  ConfigError);
}

TEST_CASE("conv2d gradient matches finite differences") {
  Rng rng(19);
  Tensor img = random_tensor({2, 8, 8}, rng);
  Tensor ker = random_tensor({3, 2, 3, 3}, rng, true, 0.5);
  Tensor w = random_tensor({3, 8, 8}, rng, false);
  const double err = max_fd_error(
      [&] { return sum(mul(conv2d(img, ker, 1, 1), w)); }, {img, ker});
  CHECK(err < 1e-5);

  Tensor w2 = random_tensor({3, 4, 4}, rng, false);
  const double err2 = max_fd_error(
      [&] { return sum(mul(conv2d(img, ker, 2, 1), w2)); }, {img, ker});
  CHECK(err2 < 1e-5);
}

TEST_CASE("add_channel_bias broadcasts per channel") {
  Rng rng(23);
  Tensor img = random_tensor({2, 3, 3}, rng);
  Tensor b = Tensor::from({2}, {1.0, -2.0}, true);
  Tensor y = add_channel_bias(img, b);
  CHECK(y.value()[0] == doctest::Approx(img.value()[0] + 1.0));
  CHECK(y.value()[9] == doctest::Approx(img.value()[9] - 2.0));
  Tensor w = random_tensor({2, 3, 3}, rng, false);
  const double err = max_fd_error(
      [&] { return sum(mul(add_channel_bias(img, b), w)); }, {img, b});
  CHECK(err < 1e-6);
}

TEST_CASE("elementwise forward semantics and domain errors") {
  Tensor r = relu(Tensor::from({2}, {-1, 2}));
  CHECK(r.value()[0] == 0.0);
  CHECK(r.value()[1] == 2.0);

  Tensor e = exp(Tensor::zeros({3}));
  for (double v : e.value()) CHECK(v == doctest::Approx(1.0));

  CHECK_THROWS_AS(add(Tensor::zeros({2}), Tensor::zeros({3})), DimensionError);

  CHECK_THROWS_WITH_AS(
      div(Tensor::from({3}, {1, 1, 1}), Tensor::from({3}, {1, 0, 1})),
      doctest::Contains("index 1"), DomainError);
  CHECK_THROWS_WITH_AS(log(Tensor::from({2}, {1, -1})),
                       doctest::Contains("index 1"), DomainError);
  CHECK_THROWS_AS(stfm::sqrt(Tensor::from({1}, {-4})), DomainError);

  Tensor s = add(mul(Tensor::from({2}, {1, 2}), 3.0), -1.0);
  CHECK(s.value()[0] == 2.0);
  CHECK(s.value()[1] == 5.0);
}

TEST_CASE("elementwise gradients match finite differences") {
  Rng rng(29);
  Tensor a = random_tensor({4, 4}, rng);
  Tensor b = random_tensor({4, 4}, rng);
  CHECK(max_fd_error([&] { return sum(mul(a, b)); }, {a, b}) < 1e-8);
  CHECK(max_fd_error([&] { return sum(add(a, b)); }, {a, b}) < 1e-8);
  CHECK(max_fd_error([&] { return sum(sub(a, b)); }, {a, b}) < 1e-8);

  // keep divisor away from zero for a clean FD probe
  Tensor bpos = add(square(b), 0.5);
  CHECK(max_fd_error([&] { return sum(div(a, add(square(b), 0.5))); }, {a, b}) <
        1e-6);

  Tensor apos = Tensor::from({3}, {0.3, 1.7, 2.2}, true);
  CHECK(max_fd_error([&] { return sum(log(apos)); }, {apos}) < 1e-7);
  CHECK(max_fd_error([&] { return sum(stfm::sqrt(apos)); }, {apos}) < 1e-7);
  CHECK(max_fd_error([&] { return sum(exp(a)); }, {a}) < 1e-7);
  CHECK(max_fd_error([&] { return sum(square(a)); }, {a}) < 1e-7);
  CHECK(max_fd_error([&] { return sum(relu(add(a, 0.123))); }, {a}) < 1e-6);
  CHECK(max_fd_error([&] { return sum(clamp_min(a, 0.1)); }, {a}) < 1e-6);
}

TEST_CASE("clamp_min forward and cutoff") {
  Tensor y = clamp_min(Tensor::from({3}, {-1.0, 0.05, 2.0}), 0.1);
  CHECK(y.value()[0] == 0.1);
  CHECK(y.value()[1] == 0.1);
  CHECK(y.value()[2] == 2.0);
}

TEST_CASE("layer_norm forward properties") {
  Tensor g1 = Tensor::full({4}, 1.0);
  Tensor b0 = Tensor::zeros({4});
  Tensor flat = layer_norm(Tensor::full({2, 4}, 3.25), g1, b0);
  for (double v : flat.value()) CHECK(std::fabs(v) < 1e-6);

  // rows with population variance >= 1 normalize to ~unit variance
  Tensor x = Tensor::from({2, 8}, {-3, -2, -1, 0, 1, 2, 3, 4,
                                   8, 6, 4, 2, 0, -2, -4, -6});
  Tensor g8 = Tensor::full({8}, 1.0);
  Tensor b8 = Tensor::zeros({8});
  Tensor y = layer_norm(x, g8, b8);
  for (int r = 0; r < 2; ++r) {
    double mu = 0.0, var = 0.0;
    for (int c = 0; c < 8; ++c) mu += y.value()[r * 8 + c];
    mu /= 8;
    for (int c = 0; c < 8; ++c) {
      const double d = y.value()[r * 8 + c] - mu;
      var += d * d;
    }
    var /= 8;
    CHECK(std::fabs(mu) < 1e-9);
    CHECK(std::fabs(var - 1.0) < 1e-6);
  }
}

TEST_CASE("layer_norm gradient matches finite differences") {
  Rng rng(31);
  Tensor x = random_tensor({2, 8}, rng);
  Tensor g = random_tensor({8}, rng);
  Tensor b = random_tensor({8}, rng);
  Tensor w = random_tensor({2, 8}, rng, false);
  const double err = max_fd_error(
      [&] { return sum(mul(layer_norm(x, g, b), w)); }, {x, g, b});
  CHECK(err < 1e-5);
}

TEST_CASE("backward populates gradients and clears the tape") {
  Tensor x = Tensor::from({4}, {1, -2, 3, 0.5}, true);

  {
    x.zero_grad();
    ComputationTape tape;
    backward(sum(x));
    CHECK(tape.size() == 0);  // cleared
    for (double g : x.grad()) CHECK(g == doctest::Approx(1.0));
  }
  {
    x.zero_grad();
    ComputationTape tape;
    backward(mul(sum(square(x)), 0.5));
    for (int i = 0; i < 4; ++i)
      CHECK(x.grad()[i] == doctest::Approx(x.value()[i]));
  }
}

TEST_CASE("backward contract errors") {
  Tensor x = Tensor::from({2, 2}, {1, 2, 3, 4}, true);
  {
    ComputationTape tape;
    Tensor y = mul(x, 2.0);
    CHECK_THROWS_AS(backward(y), ContractError);  // non-scalar loss
  }
  {
    ComputationTape tape;
    CHECK_THROWS_AS(tape.backward(Tensor::scalar(1.0)), ContractError);  // empty
  }
  CHECK_THROWS_AS(backward(Tensor::scalar(1.0)), ContractError);  // no tape
}

TEST_CASE("gradient accumulates across backward calls") {
  Tensor x = Tensor::from({3}, {1, 2, 3}, true);
  x.zero_grad();
  {
    ComputationTape tape;
    backward(sum(x));
    backward(mul(sum(x), 2.0));
  }
  for (double g : x.grad()) CHECK(g == doctest::Approx(3.0));
}

TEST_CASE("composite graph matches finite differences") {
  Rng rng(37);
  Tensor a = random_tensor({3, 4}, rng);
  Tensor b = random_tensor({4, 3}, rng);
  const double err = max_fd_error(
      [&] {
        Tensor p = softmax_T(matmul(a, b), 0.7, 1);
        return mul(sum(log(clamp_min(p, 1e-12))), -1.0 / 9.0);
      },
      {a, b});
  CHECK(err < 1e-5);
}

TEST_CASE("stop_gradient blocks flow and keeps values") {
  Rng rng(41);
  Tensor x = random_tensor({5}, rng);
  Tensor y = random_tensor({5}, rng);
  Tensor s = stop_gradient(x);
  for (int i = 0; i < 5; ++i) CHECK(s.value()[i] == x.value()[i]);

  x.zero_grad();
  y.zero_grad();
  {
    ComputationTape tape;
    backward(sum(mul(stop_gradient(x), y)));
  }
  for (double g : x.grad()) CHECK(g == 0.0);
  for (int i = 0; i < 5; ++i) CHECK(y.grad()[i] == doctest::Approx(x.value()[i]));

  // loss = sum(x / stop(sigma)): grad(sigma) = 0, grad(x) = 1/sigma
  Tensor sigma = Tensor::from({5}, {1, 2, 4, 8, 16}, true);
  x.zero_grad();
  sigma.zero_grad();
  {
    ComputationTape tape;
    backward(sum(div(x, stop_gradient(sigma))));
  }
  for (double g : sigma.grad()) CHECK(g == 0.0);
  for (int i = 0; i < 5; ++i)
    CHECK(x.grad()[i] == doctest::Approx(1.0 / sigma.value()[i]));
}

TEST_CASE("shape ops: transpose, reshape, slice, concat, gather") {
  Rng rng(43);
  Tensor x = random_tensor({3, 4}, rng);

  Tensor xt = transpose(x);
  REQUIRE(xt.shape() == Shape{4, 3});
  CHECK(xt.value()[1 * 3 + 2] == x.value()[2 * 4 + 1]);

  Tensor r = reshape(x, {2, 6});
  CHECK(r.value() == x.value());
  CHECK_THROWS_AS(reshape(x, {5, 2}), DimensionError);

  Tensor sc = slice_cols(x, 1, 3);
  REQUIRE(sc.shape() == Shape{3, 2});
  CHECK(sc.value()[0] == x.value()[1]);
  CHECK_THROWS_AS(slice_cols(x, 3, 2), DimensionError);

  Tensor cc = concat_cols({sc, x});
  REQUIRE(cc.shape() == Shape{3, 6});
  CHECK(cc.value()[2] == x.value()[0]);

  Tensor gr = gather_rows(x, {2, 0, 2});
  REQUIRE(gr.shape() == Shape{3, 4});
  CHECK(gr.value()[0] == x.value()[2 * 4]);
  CHECK_THROWS_AS(gather_rows(x, {3}), DimensionError);

  Tensor ge = gather_elems(x, {0, 5, 11});
  CHECK(ge.value()[2] == x.value()[11]);
  CHECK_THROWS_AS(gather_elems(x, {12}), DimensionError);

  Tensor w1 = random_tensor({4, 3}, rng, false);
  CHECK(max_fd_error([&] { return sum(mul(transpose(x), w1)); }, {x}) < 1e-7);
  Tensor w2 = random_tensor({3, 2}, rng, false);
  CHECK(max_fd_error([&] { return sum(mul(slice_cols(x, 1, 3), w2)); }, {x}) <
        1e-7);
  Tensor w3 = random_tensor({3, 8}, rng, false);
  CHECK(max_fd_error(
            [&] { return sum(mul(concat_cols({x, slice_cols(x, 0, 4)}), w3)); },
            {x}) < 1e-7);
  Tensor w4 = random_tensor({3, 4}, rng, false);
  CHECK(max_fd_error(
            [&] { return sum(mul(gather_rows(x, {1, 1, 2}), w4)); }, {x}) <
        1e-7);
  CHECK(max_fd_error([&] { return sum(gather_elems(x, {0, 0, 7})); }, {x}) <
        1e-7);
}

TEST_CASE("upsample2 and crop_window geometry") {
  Rng rng(47);
  Tensor x = random_tensor({2, 3, 3}, rng);
  Tensor up = upsample2(x);
  REQUIRE(up.shape() == Shape{2, 6, 6});
  CHECK(up.value()[0] == x.value()[0]);
  CHECK(up.value()[1] == x.value()[0]);
  CHECK(up.value()[6] == x.value()[0]);
  CHECK(up.value()[2] == x.value()[1]);

  Tensor win = crop_window(x, 0, 0, 3);  // upper-left corner: pad with zeros
  REQUIRE(win.shape() == Shape{9, 2});
  CHECK(win.value()[0 * 2 + 0] == 0.0);             // (-1,-1) out of range
  CHECK(win.value()[4 * 2 + 0] == x.value()[0]);    // centre tap
  CHECK(win.value()[8 * 2 + 1] == x.value()[9 + 4]);  // (+1,+1), channel 1
  CHECK_THROWS_AS(crop_window(x, 1, 1, 4), ConfigError);

  Tensor wu = random_tensor({2, 6, 6}, rng, false);
  CHECK(max_fd_error([&] { return sum(mul(upsample2(x), wu)); }, {x}) < 1e-7);
  Tensor wc = random_tensor({9, 2}, rng, false);
  CHECK(max_fd_error([&] { return sum(mul(crop_window(x, 1, 2, 3), wc)); },
                     {x}) < 1e-7);
}

TEST_CASE("independent tapes on separate threads") {
  auto run = [](double scale, double* out) {
    Tensor x = Tensor::from({2}, {scale, 2.0 * scale}, true);
    ComputationTape tape;
    backward(sum(square(x)));
    *out = x.grad()[0];
  };
  double g1 = 0.0, g2 = 0.0;
  std::thread t1(run, 1.0, &g1);
  std::thread t2(run, 3.0, &g2);
  t1.join();
  t2.join();
  CHECK(g1 == doctest::Approx(2.0));
  CHECK(g2 == doctest::Approx(6.0));
}
