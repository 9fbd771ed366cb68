#include "stfm/tensor.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <sstream>
#include <utility>

namespace stfm {

using MatRM =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<MatRM>;
using MapCM = Eigen::Map<const MatRM>;

int shape_numel(const Shape& shape) {
  int n = 1;
  for (int d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

thread_local ComputationTape* tls_active = nullptr;
thread_local ComputationTape* tls_backward = nullptr;

void check_shape(const Shape& shape, size_t len) {
  for (int d : shape) {
    if (d <= 0)
      throw DimensionError("tensor shape " + shape_str(shape) +
                           " has a non-positive dimension");
  }
  if (static_cast<size_t>(shape_numel(shape)) != len)
    throw DimensionError("shape " + shape_str(shape) + " wants " +
                         std::to_string(shape_numel(shape)) +
                         " elements, got " + std::to_string(len));
}

void check_defined(const Tensor& t, const char* what) {
  if (!t.defined())
    throw ContractError(std::string("undefined tensor passed as ") + what);
}

// True when the current thread is tracing and a gradient could flow through
// at least one of the inputs.
bool tracing(std::initializer_list<const Tensor*> ins) {
  if (tls_active == nullptr) return false;
  for (const Tensor* t : ins)
    if (t->defined() && t->ptr()->connected) return true;
  return false;
}

void record(const std::shared_ptr<TensorData>& out,
            std::function<void()> pull) {
  tls_active->record(out, std::move(pull));
}

}  // namespace

Tensor make_tensor(Shape shape, std::vector<double> value, bool connected) {
  auto d = std::make_shared<TensorData>();
  d->shape = std::move(shape);
  d->value = std::move(value);
  d->connected = connected;
  return Tensor(std::move(d));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double fill, bool requires_grad) {
  std::vector<double> v(static_cast<size_t>(shape_numel(shape)), fill);
  check_shape(shape, v.size());
  Tensor t = make_tensor(std::move(shape), std::move(v), requires_grad);
  t.data_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::from(Shape shape, std::vector<double> data,
                    bool requires_grad) {
  check_shape(shape, data.size());
  Tensor t = make_tensor(std::move(shape), std::move(data), requires_grad);
  t.data_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::scalar(double v, bool requires_grad) {
  return from({1}, {v}, requires_grad);
}

const std::vector<double>& Tensor::grad() const {
  if (data_->grad.empty())
    throw ContractError("gradient requested but never populated; run backward");
  return data_->grad;
}

void Tensor::zero_grad() { data_->grad.assign(data_->value.size(), 0.0); }

double Tensor::item() const {
  if (numel() != 1)
    throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return data_->value[0];
}

// ---- ComputationTape --------------------------------------------------------

ComputationTape::ComputationTape() {
  previous_ = tls_active;
  tls_active = this;
}

ComputationTape::~ComputationTape() { tls_active = previous_; }

ComputationTape* ComputationTape::active() { return tls_active; }

void ComputationTape::record(const std::shared_ptr<TensorData>& out,
                             std::function<void()> pull) {
  nodes_.push_back({out, std::move(pull)});
}

void ComputationTape::clear() {
  for (auto& t : touched_) t->adjoint.clear();
  touched_.clear();
  nodes_.clear();
}

std::vector<double>& ComputationTape::adjoint_of(
    const std::shared_ptr<TensorData>& t) {
  if (t->adjoint.empty()) {
    t->adjoint.assign(t->value.size(), 0.0);
    tls_backward->touched_.push_back(t);
  }
  return t->adjoint;
}

const std::vector<double>* ComputationTape::adjoint_if_any(
    const std::shared_ptr<TensorData>& t) {
  return t->adjoint.empty() ? nullptr : &t->adjoint;
}

void ComputationTape::backward(const Tensor& loss) {
  check_defined(loss, "loss");
  if (nodes_.empty()) throw ContractError("backward on an empty tape");
  if (loss.numel() != 1)
    throw ContractError("backward needs a scalar loss, got shape " +
                        shape_str(loss.shape()));
  tls_backward = this;
  adjoint_of(loss.ptr())[0] = 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->pull();
  for (auto& t : touched_) {
    if (t->requires_grad) {
      if (t->grad.empty()) t->grad.assign(t->value.size(), 0.0);
      for (size_t i = 0; i < t->grad.size(); ++i) t->grad[i] += t->adjoint[i];
    }
  }
  tls_backward = nullptr;
  clear();
}

void backward(const Tensor& loss) {
  if (tls_active == nullptr)
    throw ContractError("backward called with no active tape");
  tls_active->backward(loss);
}

// ---- Operations -------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_defined(a, "matmul lhs");
  check_defined(b, "matmul rhs");
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw DimensionError("matmul shape mismatch: " + shape_str(a.shape()) +
                         " x " + shape_str(b.shape()));
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(static_cast<size_t>(m) * n);
  MapM(out.data(), m, n).noalias() =
      MapCM(a.value().data(), m, k) * MapCM(b.value().data(), k, n);
  const bool tr = tracing({&a, &b});
  Tensor c = make_tensor({m, n}, std::move(out), tr);
  if (tr) {
    auto ad = a.ptr(), bd = b.ptr(), cd = c.ptr();
    record(cd, [ad, bd, cd, m, k, n] {
      const auto* dC = ComputationTape::adjoint_if_any(cd);
      if (!dC) return;
      MapCM G(dC->data(), m, n);
      if (ad->connected) {
        MapM dA(ComputationTape::adjoint_of(ad).data(), m, k);
        dA.noalias() += G * MapCM(bd->value.data(), k, n).transpose();
      }
      if (bd->connected) {
        MapM dB(ComputationTape::adjoint_of(bd).data(), k, n);
        dB.noalias() += MapCM(ad->value.data(), m, k).transpose() * G;
      }
    });
  }
  return c;
}

Tensor transpose(const Tensor& a) {
  check_defined(a, "transpose input");
  if (a.rank() != 2)
    throw DimensionError("transpose needs a matrix, got " +
                         shape_str(a.shape()));
  const int m = a.dim(0), n = a.dim(1);
  std::vector<double> out(static_cast<size_t>(m) * n);
  MapM(out.data(), n, m).noalias() = MapCM(a.value().data(), m, n).transpose();
  const bool tr = tracing({&a});
  Tensor c = make_tensor({n, m}, std::move(out), tr);
  if (tr) {
    auto ad = a.ptr(), cd = c.ptr();
    record(cd, [ad, cd, m, n] {
      const auto* dC = ComputationTape::adjoint_if_any(cd);
      if (!dC) return;
      MapM dA(ComputationTape::adjoint_of(ad).data(), m, n);
      dA.noalias() += MapCM(dC->data(), n, m).transpose();
    });
  }
  return c;
}

Tensor reshape(const Tensor& a, Shape shape) {
  check_defined(a, "reshape input");
  check_shape(shape, a.value().size());
  const bool tr = tracing({&a});
  Tensor c = make_tensor(std::move(shape), a.value(), tr);
  if (tr) {
    auto ad = a.ptr(), cd = c.ptr();
    record(cd, [ad, cd] {
      const auto* dC = ComputationTape::adjoint_if_any(cd);
      if (!dC) return;
      auto& dA = ComputationTape::adjoint_of(ad);
      for (size_t i = 0; i < dA.size(); ++i) dA[i] += (*dC)[i];
    });
  }
  return c;
}

Tensor softmax_T(const Tensor& logits, double temperature, int axis) {
  check_defined(logits, "softmax input");
  if (temperature <= 0.0)
    throw ConfigError("softmax temperature must be positive, got " +
                      std::to_string(temperature));
  if (axis < 0 || axis >= logits.rank())
    throw DimensionError("softmax axis " + std::to_string(axis) +
                         " out of range for " + shape_str(logits.shape()));
  const Shape& sh = logits.shape();
  const int L = sh[static_cast<size_t>(axis)];
  int outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= sh[static_cast<size_t>(i)];
  for (int i = axis + 1; i < logits.rank(); ++i)
    inner *= sh[static_cast<size_t>(i)];
  const auto& x = logits.value();
  std::vector<double> out(x.size());
  for (int o = 0; o < outer; ++o) {
    for (int in = 0; in < inner; ++in) {
      const size_t base = static_cast<size_t>(o) * L * inner + in;
      double hi = -HUGE_VAL;
      for (int l = 0; l < L; ++l)
        hi = std::max(hi, x[base + static_cast<size_t>(l) * inner]);
      double s = 0.0;
      for (int l = 0; l < L; ++l) {
        const size_t p = base + static_cast<size_t>(l) * inner;
        out[p] = std::exp((x[p] - hi) / temperature);
        s += out[p];
      }
      for (int l = 0; l < L; ++l) out[base + static_cast<size_t>(l) * inner] /= s;
    }
  }
  const bool tr = tracing({&logits});
  Tensor y = make_tensor(sh, std::move(out), tr);
  if (tr) {
    auto xd = logits.ptr(), yd = y.ptr();
    record(yd, [xd, yd, temperature, outer, L, inner] {
      const auto* dY = ComputationTape::adjoint_if_any(yd);
      if (!dY) return;
      auto& dX = ComputationTape::adjoint_of(xd);
      const auto& Y = yd->value;
      for (int o = 0; o < outer; ++o) {
        for (int in = 0; in < inner; ++in) {
          const size_t base = static_cast<size_t>(o) * L * inner + in;
          double dot = 0.0;
          for (int l = 0; l < L; ++l) {
            const size_t p = base + static_cast<size_t>(l) * inner;
            dot += (*dY)[p] * Y[p];
          }
          for (int l = 0; l < L; ++l) {
            const size_t p = base + static_cast<size_t>(l) * inner;
            dX[p] += Y[p] * ((*dY)[p] - dot) / temperature;
          }
        }
      }
    });
  }
  return y;
}

namespace {

// Gathers conv patches: columns indexed by output pixel, rows by
// (channel, ky, kx). Zero padding handled by skipping out-of-range taps.
void im2col(const std::vector<double>& in, int C, int H, int W, int k,
            int stride, int padding, int Ho, int Wo, std::vector<double>& col) {
  col.assign(static_cast<size_t>(C) * k * k * Ho * Wo, 0.0);
  const int cols = Ho * Wo;
  for (int c = 0; c < C; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const size_t row = static_cast<size_t>((c * k + ky) * k + kx);
        double* dst = col.data() + row * cols;
        for (int oy = 0; oy < Ho; ++oy) {
          const int sy = oy * stride + ky - padding;
          if (sy < 0 || sy >= H) continue;
          const double* src = in.data() + (static_cast<size_t>(c) * H + sy) * W;
          for (int ox = 0; ox < Wo; ++ox) {
            const int sx = ox * stride + kx - padding;
            if (sx >= 0 && sx < W) dst[oy * Wo + ox] = src[sx];
          }
        }
      }
    }
  }
}

void col2im_add(const std::vector<double>& col, int C, int H, int W, int k,
                int stride, int padding, int Ho, int Wo,
                std::vector<double>& out) {
  const int cols = Ho * Wo;
  for (int c = 0; c < C; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const size_t row = static_cast<size_t>((c * k + ky) * k + kx);
        const double* src = col.data() + row * cols;
        for (int oy = 0; oy < Ho; ++oy) {
          const int sy = oy * stride + ky - padding;
          if (sy < 0 || sy >= H) continue;
          double* dst = out.data() + (static_cast<size_t>(c) * H + sy) * W;
          for (int ox = 0; ox < Wo; ++ox) {
            const int sx = ox * stride + kx - padding;
            if (sx >= 0 && sx < W) dst[sx] += src[oy * Wo + ox];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernels, int stride,
              int padding) {
  check_defined(input, "conv input");
  check_defined(kernels, "conv kernels");
  if (input.rank() != 3)
    throw DimensionError("conv input must be CxHxW, got " +
                         shape_str(input.shape()));
  if (kernels.rank() != 4 || kernels.dim(2) != kernels.dim(3))
    throw DimensionError("conv kernels must be OxIxkxk, got " +
                         shape_str(kernels.shape()));
  const int Ci = input.dim(0), H = input.dim(1), W = input.dim(2);
  const int Co = kernels.dim(0), k = kernels.dim(2);
  if (kernels.dim(1) != Ci)
    throw DimensionError("conv channel mismatch: input " +
                         shape_str(input.shape()) + " vs kernels " +
                         shape_str(kernels.shape()));
  if (k % 2 == 0)
    throw ConfigError("conv kernel size must be odd, got " + std::to_string(k));
  if (stride < 1 || padding < 0)
    throw ConfigError("conv stride must be >=1 and padding >=0");
  if (H + 2 * padding < k || W + 2 * padding < k)
    throw DimensionError("conv kernel " + std::to_string(k) +
                         " larger than padded input " +
                         shape_str(input.shape()) + " with padding " +
                         std::to_string(padding));
  const int Ho = (H + 2 * padding - k) / stride + 1;
  const int Wo = (W + 2 * padding - k) / stride + 1;
  const int ckk = Ci * k * k, pix = Ho * Wo;

  std::vector<double> col;
  im2col(input.value(), Ci, H, W, k, stride, padding, Ho, Wo, col);
  std::vector<double> out(static_cast<size_t>(Co) * pix);
  MapM(out.data(), Co, pix).noalias() =
      MapCM(kernels.value().data(), Co, ckk) * MapCM(col.data(), ckk, pix);

  const bool tr = tracing({&input, &kernels});
  Tensor y = make_tensor({Co, Ho, Wo}, std::move(out), tr);
  if (tr) {
    auto in_d = input.ptr(), kr_d = kernels.ptr(), out_d = y.ptr();
    record(out_d, [in_d, kr_d, out_d, Ci, H, W, Co, k, stride, padding, Ho, Wo,
                   ckk, pix] {
      const auto* dY = ComputationTape::adjoint_if_any(out_d);
      if (!dY) return;
      MapCM G(dY->data(), Co, pix);
      std::vector<double> col;  // recomputed: cheaper than keeping it alive
      im2col(in_d->value, Ci, H, W, k, stride, padding, Ho, Wo, col);
      if (kr_d->connected) {
        MapM dK(ComputationTape::adjoint_of(kr_d).data(), Co, ckk);
        dK.noalias() += G * MapCM(col.data(), ckk, pix).transpose();
      }
      if (in_d->connected) {
        std::vector<double> dcol(static_cast<size_t>(ckk) * pix);
        MapM(dcol.data(), ckk, pix).noalias() =
            MapCM(kr_d->value.data(), Co, ckk).transpose() * G;
        col2im_add(dcol, Ci, H, W, k, stride, padding, Ho, Wo,
                   ComputationTape::adjoint_of(in_d));
      }
    });
  }
  return y;
}

Tensor add_channel_bias(const Tensor& x, const Tensor& bias) {
  check_defined(x, "bias input");
  check_defined(bias, "bias vector");
  if (x.rank() != 3 || bias.rank() != 1 || bias.dim(0) != x.dim(0))
    throw DimensionError("channel bias wants CxHxW plus [C], got " +
                         shape_str(x.shape()) + " and " +
                         shape_str(bias.shape()));
  const int C = x.dim(0), pix = x.dim(1) * x.dim(2);
  std::vector<double> out(x.value());
  for (int c = 0; c < C; ++c) {
    const double b = bias.value()[static_cast<size_t>(c)];
    double* row = out.data() + static_cast<size_t>(c) * pix;
    for (int p = 0; p < pix; ++p) row[p] += b;
  }
  const bool tr = tracing({&x, &bias});
  Tensor y = make_tensor(x.shape(), std::move(out), tr);
  if (tr) {
    auto xd = x.ptr(), bd = bias.ptr(), yd = y.ptr();
    record(yd, [xd, bd, yd, C, pix] {
      const auto* dY = ComputationTape::adjoint_if_any(yd);
      if (!dY) return;
      if (xd->connected) {
        auto& dX = ComputationTape::adjoint_of(xd);
        for (size_t i = 0; i < dX.size(); ++i) dX[i] += (*dY)[i];
      }
      if (bd->connected) {
        auto& dB = ComputationTape::adjoint_of(bd);
        for (int c = 0; c < C; ++c) {
          double s = 0.0;
          const double* row = dY->data() + static_cast<size_t>(c) * pix;
          for (int p = 0; p < pix; ++p) s += row[p];
          dB[static_cast<size_t>(c)] += s;
        }
      }
    });
  }
  return y;
}

namespace {

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + " shape mismatch: " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

// Shared skeleton for elementwise binary ops with per-element pulls.
template <class Fwd, class Pull>
Tensor binary_op(const Tensor& a, const Tensor& b, const char* name, Fwd fwd,
                 Pull pull) {
  check_defined(a, name);
  check_defined(b, name);
  check_same_shape(a, b, name);
  const size_t n = a.value().size();
  std::vector<double> out(n);
  for (size_t i = 0; i < n; ++i) out[i] = fwd(a.value()[i], b.value()[i], i);
  const bool tr = tracing({&a, &b});
  Tensor c = make_tensor(a.shape(), std::move(out), tr);
  if (tr) {
    auto ad = a.ptr(), bd = b.ptr(), cd = c.ptr();
    record(cd, [ad, bd, cd, n, pull] {
      const auto* dC = ComputationTape::adjoint_if_any(cd);
      if (!dC) return;
      std::vector<double>* dA =
          ad->connected ? &ComputationTape::adjoint_of(ad) : nullptr;
      std::vector<double>* dB =
          bd->connected ? &ComputationTape::adjoint_of(bd) : nullptr;
      for (size_t i = 0; i < n; ++i)
        pull((*dC)[i], ad->value[i], bd->value[i], dA ? &(*dA)[i] : nullptr,
             dB ? &(*dB)[i] : nullptr);
    });
  }
  return c;
}

template <class Fwd, class Pull>
Tensor unary_op(const Tensor& a, const char* name, Fwd fwd, Pull pull) {
  check_defined(a, name);
  const size_t n = a.value().size();
  std::vector<double> out(n);
  for (size_t i = 0; i < n; ++i) out[i] = fwd(a.value()[i], i);
  const bool tr = tracing({&a});
  Tensor c = make_tensor(a.shape(), std::move(out), tr);
  if (tr) {
    auto ad = a.ptr(), cd = c.ptr();
    record(cd, [ad, cd, n, pull] {
      const auto* dC = ComputationTape::adjoint_if_any(cd);
      if (!dC) return;
      auto& dA = ComputationTape::adjoint_of(ad);
      for (size_t i = 0; i < n; ++i)
        dA[i] += pull((*dC)[i], ad->value[i], cd->value[i]);
    });
  }
  return c;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "add", [](double x, double y, size_t) { return x + y; },
      [](double g, double, double, double* da, double* db) {
        if (da) *da += g;
        if (db) *db += g;
      });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "sub", [](double x, double y, size_t) { return x - y; },
      [](double g, double, double, double* da, double* db) {
        if (da) *da += g;
        if (db) *db -= g;
      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "mul", [](double x, double y, size_t) { return x * y; },
      [](double g, double x, double y, double* da, double* db) {
        if (da) *da += g * y;
        if (db) *db += g * x;
      });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "div",
      [](double x, double y, size_t i) {
        if (y == 0.0)
          throw DomainError("division by zero at flat index " +
                            std::to_string(i));
        return x / y;
      },
      [](double g, double x, double y, double* da, double* db) {
        if (da) *da += g / y;
        if (db) *db -= g * x / (y * y);
      });
}

Tensor add(const Tensor& a, double s) {
  return unary_op(
      a, "add", [s](double x, size_t) { return x + s; },
      [](double g, double, double) { return g; });
}

Tensor mul(const Tensor& a, double s) {
  return unary_op(
      a, "mul", [s](double x, size_t) { return x * s; },
      [s](double g, double, double) { return g * s; });
}

Tensor exp(const Tensor& a) {
  return unary_op(
      a, "exp", [](double x, size_t) { return std::exp(x); },
      [](double g, double, double y) { return g * y; });
}

Tensor log(const Tensor& a) {
  return unary_op(
      a, "log",
      [](double x, size_t i) {
        if (x <= 0.0)
          throw DomainError("log of non-positive value at flat index " +
                            std::to_string(i));
        return std::log(x);
      },
      [](double g, double x, double) { return g / x; });
}

Tensor relu(const Tensor& a) {
  return unary_op(
      a, "relu", [](double x, size_t) { return x > 0.0 ? x : 0.0; },
      [](double g, double x, double) { return x > 0.0 ? g : 0.0; });
}

Tensor square(const Tensor& a) {
  return unary_op(
      a, "square", [](double x, size_t) { return x * x; },
      [](double g, double x, double) { return 2.0 * x * g; });
}

Tensor sqrt(const Tensor& a) {
  return unary_op(
      a, "sqrt",
      [](double x, size_t i) {
        if (x < 0.0)
          throw DomainError("sqrt of negative value at flat index " +
                            std::to_string(i));
        return std::sqrt(x);
      },
      [](double g, double, double y) { return y > 0.0 ? g / (2.0 * y) : 0.0; });
}

Tensor clamp_min(const Tensor& a, double lo) {
  return unary_op(
      a, "clamp_min", [lo](double x, size_t) { return x < lo ? lo : x; },
      [lo](double g, double x, double) { return x >= lo ? g : 0.0; });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
  check_defined(x, "layer_norm input");
  check_defined(gain, "layer_norm gain");
  check_defined(bias, "layer_norm bias");
  const int C = x.dim(x.rank() - 1);
  if (gain.rank() != 1 || gain.dim(0) != C || bias.rank() != 1 ||
      bias.dim(0) != C)
    throw DimensionError("layer_norm affine wants [" + std::to_string(C) +
                         "], got gain " + shape_str(gain.shape()) +
                         " and bias " + shape_str(bias.shape()));
  constexpr double kEps = 1e-6;
  const int N = x.numel() / C;
  const auto& xv = x.value();
  std::vector<double> out(xv.size());
  auto xhat = std::make_shared<std::vector<double>>(xv.size());
  auto inv_s = std::make_shared<std::vector<double>>(static_cast<size_t>(N));
  for (int r = 0; r < N; ++r) {
    const double* row = xv.data() + static_cast<size_t>(r) * C;
    double mu = 0.0;
    for (int c = 0; c < C; ++c) mu += row[c];
    mu /= C;
    double var = 0.0;
    for (int c = 0; c < C; ++c) var += (row[c] - mu) * (row[c] - mu);
    var /= C;
    const double is = 1.0 / std::sqrt(var + kEps);
    (*inv_s)[static_cast<size_t>(r)] = is;
    for (int c = 0; c < C; ++c) {
      const size_t p = static_cast<size_t>(r) * C + c;
      (*xhat)[p] = (row[c] - mu) * is;
      out[p] = gain.value()[static_cast<size_t>(c)] * (*xhat)[p] +
               bias.value()[static_cast<size_t>(c)];
    }
  }
  const bool tr = tracing({&x, &gain, &bias});
  Tensor y = make_tensor(x.shape(), std::move(out), tr);
  if (tr) {
    auto xd = x.ptr(), gd = gain.ptr(), bd = bias.ptr(), yd = y.ptr();
    record(yd, [xd, gd, bd, yd, xhat, inv_s, N, C] {
      const auto* dY = ComputationTape::adjoint_if_any(yd);
      if (!dY) return;
      for (int r = 0; r < N; ++r) {
        const size_t off = static_cast<size_t>(r) * C;
        if (xd->connected) {
          auto& dX = ComputationTape::adjoint_of(xd);
          double m1 = 0.0, m2 = 0.0;  // mean(dxhat), mean(dxhat*xhat)
          for (int c = 0; c < C; ++c) {
            const double dxh = (*dY)[off + c] * gd->value[static_cast<size_t>(c)];
            m1 += dxh;
            m2 += dxh * (*xhat)[off + c];
          }
          m1 /= C;
          m2 /= C;
          const double is = (*inv_s)[static_cast<size_t>(r)];
          for (int c = 0; c < C; ++c) {
            const double dxh = (*dY)[off + c] * gd->value[static_cast<size_t>(c)];
            dX[off + c] += is * (dxh - m1 - (*xhat)[off + c] * m2);
          }
        }
        if (gd->connected) {
          auto& dG = ComputationTape::adjoint_of(gd);
          for (int c = 0; c < C; ++c)
            dG[static_cast<size_t>(c)] += (*dY)[off + c] * (*xhat)[off + c];
        }
        if (bd->connected) {
          auto& dB = ComputationTape::adjoint_of(bd);
          for (int c = 0; c < C; ++c) dB[static_cast<size_t>(c)] += (*dY)[off + c];
        }
      }
    });
  }
  return y;
}

Tensor sum(const Tensor& a) {
  check_defined(a, "sum input");
  double s = 0.0;
  for (double v : a.value()) s += v;
  const bool tr = tracing({&a});
  Tensor c = make_tensor({1}, {s}, tr);
  if (tr) {
    auto ad = a.ptr(), cd = c.ptr();
    record(cd, [ad, cd] {
      const auto* dC = ComputationTape::adjoint_if_any(cd);
      if (!dC) return;
      auto& dA = ComputationTape::adjoint_of(ad);
      for (double& g : dA) g += (*dC)[0];
    });
  }
  return c;
}

Tensor mean(const Tensor& a) {
  check_defined(a, "mean input");
  return mul(sum(a), 1.0 / a.numel());
}

Tensor add_rowvec(const Tensor& x, const Tensor& v) {
  check_defined(x, "add_rowvec input");
  check_defined(v, "add_rowvec vector");
  if (x.rank() != 2 || v.rank() != 1 || v.dim(0) != x.dim(1))
    throw DimensionError("add_rowvec wants [NxC] plus [C], got " +
                         shape_str(x.shape()) + " and " + shape_str(v.shape()));
  const int N = x.dim(0), C = x.dim(1);
  std::vector<double> out(x.value());
  for (int r = 0; r < N; ++r)
    for (int c = 0; c < C; ++c)
      out[static_cast<size_t>(r) * C + c] += v.value()[static_cast<size_t>(c)];
  const bool tr = tracing({&x, &v});
  Tensor y = make_tensor(x.shape(), std::move(out), tr);
  if (tr) {
    auto xd = x.ptr(), vd = v.ptr(), yd = y.ptr();
    record(yd, [xd, vd, yd, N, C] {
      const auto* dY = ComputationTape::adjoint_if_any(yd);
      if (!dY) return;
      if (xd->connected) {
        auto& dX = ComputationTape::adjoint_of(xd);
        for (size_t i = 0; i < dX.size(); ++i) dX[i] += (*dY)[i];
      }
      if (vd->connected) {
        auto& dV = ComputationTape::adjoint_of(vd);
        for (int r = 0; r < N; ++r)
          for (int c = 0; c < C; ++c)
            dV[static_cast<size_t>(c)] += (*dY)[static_cast<size_t>(r) * C + c];
      }
    });
  }
  return y;
}

Tensor slice_cols(const Tensor& x, int lo, int hi) {
  check_defined(x, "slice_cols input");
  if (x.rank() != 2 || lo < 0 || hi <= lo || hi > x.dim(1))
    throw DimensionError("slice_cols [" + std::to_string(lo) + ", " +
                         std::to_string(hi) + ") invalid for " +
                         shape_str(x.shape()));
  const int N = x.dim(0), C = x.dim(1), K = hi - lo;
  std::vector<double> out(static_cast<size_t>(N) * K);
  for (int r = 0; r < N; ++r)
    for (int c = 0; c < K; ++c)
      out[static_cast<size_t>(r) * K + c] =
          x.value()[static_cast<size_t>(r) * C + lo + c];
  const bool tr = tracing({&x});
  Tensor y = make_tensor({N, K}, std::move(out), tr);
  if (tr) {
    auto xd = x.ptr(), yd = y.ptr();
    record(yd, [xd, yd, N, C, K, lo] {
      const auto* dY = ComputationTape::adjoint_if_any(yd);
      if (!dY) return;
      auto& dX = ComputationTape::adjoint_of(xd);
      for (int r = 0; r < N; ++r)
        for (int c = 0; c < K; ++c)
          dX[static_cast<size_t>(r) * C + lo + c] +=
              (*dY)[static_cast<size_t>(r) * K + c];
    });
  }
  return y;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ContractError("concat_cols of nothing");
  const int N = parts.front().dim(0);
  int C = 0;
  for (const auto& p : parts) {
    check_defined(p, "concat_cols part");
    if (p.rank() != 2 || p.dim(0) != N)
      throw DimensionError("concat_cols row mismatch: " +
                           shape_str(parts.front().shape()) + " vs " +
                           shape_str(p.shape()));
    C += p.dim(1);
  }
  std::vector<double> out(static_cast<size_t>(N) * C);
  int off = 0;
  for (const auto& p : parts) {
    const int K = p.dim(1);
    for (int r = 0; r < N; ++r)
      for (int c = 0; c < K; ++c)
        out[static_cast<size_t>(r) * C + off + c] =
            p.value()[static_cast<size_t>(r) * K + c];
    off += K;
  }
  bool tr = false;
  if (ComputationTape::active() != nullptr)
    for (const auto& p : parts)
      if (p.ptr()->connected) tr = true;
  Tensor y = make_tensor({N, C}, std::move(out), tr);
  if (tr) {
    std::vector<std::shared_ptr<TensorData>> pd;
    pd.reserve(parts.size());
    std::vector<int> widths;
    for (const auto& p : parts) {
      pd.push_back(p.ptr());
      widths.push_back(p.dim(1));
    }
    auto yd = y.ptr();
    record(yd, [pd, widths, yd, N, C] {
      const auto* dY = ComputationTape::adjoint_if_any(yd);
      if (!dY) return;
      int off = 0;
      for (size_t i = 0; i < pd.size(); ++i) {
        const int K = widths[i];
        if (pd[i]->connected) {
          auto& dP = ComputationTape::adjoint_of(pd[i]);
          for (int r = 0; r < N; ++r)
            for (int c = 0; c < K; ++c)
              dP[static_cast<size_t>(r) * K + c] +=
                  (*dY)[static_cast<size_t>(r) * C + off + c];
        }
        off += K;
      }
    });
  }
  return y;
}

Tensor gather_rows(const Tensor& x, const std::vector<int>& rows) {
  check_defined(x, "gather_rows input");
  if (x.rank() != 2)
    throw DimensionError("gather_rows wants a matrix, got " +
                         shape_str(x.shape()));
  const int N = x.dim(0), C = x.dim(1), K = static_cast<int>(rows.size());
  for (int r : rows)
    if (r < 0 || r >= N)
      throw DimensionError("gather_rows index " + std::to_string(r) +
                           " out of range for " + shape_str(x.shape()));
  std::vector<double> out(static_cast<size_t>(K) * C);
  for (int i = 0; i < K; ++i)
    std::copy_n(x.value().data() + static_cast<size_t>(rows[static_cast<size_t>(
                                       i)]) * C,
                C, out.data() + static_cast<size_t>(i) * C);
  const bool tr = tracing({&x});
  Tensor y = make_tensor({K, C}, std::move(out), tr);
  if (tr) {
    auto xd = x.ptr(), yd = y.ptr();
    record(yd, [xd, yd, rows, C] {
      const auto* dY = ComputationTape::adjoint_if_any(yd);
      if (!dY) return;
      auto& dX = ComputationTape::adjoint_of(xd);
      for (size_t i = 0; i < rows.size(); ++i)
        for (int c = 0; c < C; ++c)
          dX[static_cast<size_t>(rows[i]) * C + c] += (*dY)[i * C + c];
    });
  }
  return y;
}

Tensor gather_elems(const Tensor& a, const std::vector<int>& indices) {
  check_defined(a, "gather_elems input");
  const int n = a.numel();
  for (int i : indices)
    if (i < 0 || i >= n)
      throw DimensionError("gather_elems index " + std::to_string(i) +
                           " out of range for " + shape_str(a.shape()));
  std::vector<double> out(indices.size());
  for (size_t k = 0; k < indices.size(); ++k)
    out[k] = a.value()[static_cast<size_t>(indices[k])];
  const bool tr = tracing({&a});
  Tensor y =
      make_tensor({static_cast<int>(indices.size())}, std::move(out), tr);
  if (tr) {
    auto ad = a.ptr(), yd = y.ptr();
    record(yd, [ad, yd, indices] {
      const auto* dY = ComputationTape::adjoint_if_any(yd);
      if (!dY) return;
      auto& dA = ComputationTape::adjoint_of(ad);
      for (size_t k = 0; k < indices.size(); ++k)
        dA[static_cast<size_t>(indices[k])] += (*dY)[k];
    });
  }
  return y;
}

Tensor upsample2(const Tensor& x) {
  check_defined(x, "upsample input");
  if (x.rank() != 3)
    throw DimensionError("upsample2 wants CxHxW, got " + shape_str(x.shape()));
  const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
  std::vector<double> out(static_cast<size_t>(C) * 4 * H * W);
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < 2 * H; ++y)
      for (int xx = 0; xx < 2 * W; ++xx)
        out[(static_cast<size_t>(c) * 2 * H + y) * 2 * W + xx] =
            x.value()[(static_cast<size_t>(c) * H + y / 2) * W + xx / 2];
  const bool tr = tracing({&x});
  Tensor y = make_tensor({C, 2 * H, 2 * W}, std::move(out), tr);
  if (tr) {
    auto xd = x.ptr(), yd = y.ptr();
    record(yd, [xd, yd, C, H, W] {
      const auto* dY = ComputationTape::adjoint_if_any(yd);
      if (!dY) return;
      auto& dX = ComputationTape::adjoint_of(xd);
      for (int c = 0; c < C; ++c)
        for (int y2 = 0; y2 < 2 * H; ++y2)
          for (int x2 = 0; x2 < 2 * W; ++x2)
            dX[(static_cast<size_t>(c) * H + y2 / 2) * W + x2 / 2] +=
                (*dY)[(static_cast<size_t>(c) * 2 * H + y2) * 2 * W + x2];
    });
  }
  return y;
}

Tensor crop_window(const Tensor& x, int cy, int cx, int w) {
  check_defined(x, "crop input");
  if (x.rank() != 3)
    throw DimensionError("crop_window wants CxHxW, got " +
                         shape_str(x.shape()));
  if (w < 1 || w % 2 == 0)
    throw ConfigError("crop window size must be odd and positive, got " +
                      std::to_string(w));
  const int C = x.dim(0), H = x.dim(1), W = x.dim(2), h = w / 2;
  std::vector<double> out(static_cast<size_t>(w) * w * C, 0.0);
  for (int dy = 0; dy < w; ++dy) {
    const int sy = cy - h + dy;
    if (sy < 0 || sy >= H) continue;
    for (int dx = 0; dx < w; ++dx) {
      const int sx = cx - h + dx;
      if (sx < 0 || sx >= W) continue;
      for (int c = 0; c < C; ++c)
        out[static_cast<size_t>(dy * w + dx) * C + c] =
            x.value()[(static_cast<size_t>(c) * H + sy) * W + sx];
    }
  }
  const bool tr = tracing({&x});
  Tensor y = make_tensor({w * w, C}, std::move(out), tr);
  if (tr) {
    auto xd = x.ptr(), yd = y.ptr();
    record(yd, [xd, yd, C, H, W, h, w, cy, cx] {
      const auto* dY = ComputationTape::adjoint_if_any(yd);
      if (!dY) return;
      auto& dX = ComputationTape::adjoint_of(xd);
      for (int dy = 0; dy < w; ++dy) {
        const int sy = cy - h + dy;
        if (sy < 0 || sy >= H) continue;
        for (int dx = 0; dx < w; ++dx) {
          const int sx = cx - h + dx;
          if (sx < 0 || sx >= W) continue;
          for (int c = 0; c < C; ++c)
            dX[(static_cast<size_t>(c) * H + sy) * W + sx] +=
                (*dY)[static_cast<size_t>(dy * w + dx) * C + c];
        }
      }
    });
  }
  return y;
}

Tensor stop_gradient(const Tensor& x) {
  check_defined(x, "stop_gradient input");
  return make_tensor(x.shape(), x.value(), /*connected=*/false);
}

}  // namespace stfm
