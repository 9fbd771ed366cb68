#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "stfm/error.hpp"

namespace stfm {

using Shape = std::vector<int>;

int shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Reference-counted storage behind a Tensor handle. `adjoint` is scratch
// space owned by the running backward pass; `grad` persists and accumulates
// across backward calls until zero_grad().
struct TensorData {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;     // empty until first backward populates it
  std::vector<double> adjoint;  // transient, managed by ComputationTape
  bool requires_grad = false;
  bool connected = false;  // true if gradients can flow to a leaf through it
};

// Cheap-to-copy handle on shared storage. Ops are free functions declared
// below; they record adjoints on the thread's active ComputationTape.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double fill, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> data,
                     bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);

  bool defined() const { return data_ != nullptr; }
  const Shape& shape() const { return data_->shape; }
  int rank() const { return static_cast<int>(data_->shape.size()); }
  int dim(int i) const { return data_->shape[static_cast<size_t>(i)]; }
  int numel() const { return static_cast<int>(data_->value.size()); }

  const std::vector<double>& value() const { return data_->value; }
  // In-place mutation is for optimizer updates and initialization only; it
  // must never touch a tensor that a live tape references.
  std::vector<double>& mutable_value() { return data_->value; }

  bool requires_grad() const { return data_->requires_grad; }
  bool has_grad() const { return !data_->grad.empty(); }
  const std::vector<double>& grad() const;
  void zero_grad();

  double item() const;  // value of a one-element tensor

  const std::shared_ptr<TensorData>& ptr() const { return data_; }

 private:
  explicit Tensor(std::shared_ptr<TensorData> d) : data_(std::move(d)) {}
  std::shared_ptr<TensorData> data_;
  friend Tensor make_tensor(Shape, std::vector<double>, bool);
};

Tensor make_tensor(Shape shape, std::vector<double> value, bool connected);

// Define-by-run tape. One tape is active per thread at a time (RAII scopes
// nest); ops record pull closures while a tape is active and gradients can
// reach a leaf. backward() replays the closures in reverse, accumulates into
// grad of every requires_grad tensor reached, then clears the tape.
class ComputationTape {
 public:
  ComputationTape();
  ~ComputationTape();
  ComputationTape(const ComputationTape&) = delete;
  ComputationTape& operator=(const ComputationTape&) = delete;

  static ComputationTape* active();

  void record(const std::shared_ptr<TensorData>& out,
              std::function<void()> pull);
  std::size_t size() const { return nodes_.size(); }
  void clear();

  void backward(const Tensor& loss);

  // Scratch-buffer access for pull closures.
  static std::vector<double>& adjoint_of(const std::shared_ptr<TensorData>& t);
  static const std::vector<double>* adjoint_if_any(
      const std::shared_ptr<TensorData>& t);

 private:
  struct Node {
    std::shared_ptr<TensorData> out;
    std::function<void()> pull;
  };
  std::vector<Node> nodes_;
  std::vector<std::shared_ptr<TensorData>> touched_;
  ComputationTape* previous_ = nullptr;
};

void backward(const Tensor& loss);

// ---- Operations ------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

// Softmax with temperature along `axis`; slices sum to 1.
Tensor softmax_T(const Tensor& logits, double temperature, int axis);

// Cross-correlation conv on a single image: input [C_in×H×W], kernels
// [C_out×C_in×k×k], output [C_out×H'×W'] with H' = (H+2p−k)/stride + 1.
Tensor conv2d(const Tensor& input, const Tensor& kernels, int stride,
              int padding);
// Adds bias[c] to every pixel of channel c of x [C×H×W].
Tensor add_channel_bias(const Tensor& x, const Tensor& bias);

// Elementwise; shapes must match exactly (scalar variants below).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, double s);
Tensor mul(const Tensor& a, double s);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor square(const Tensor& a);
Tensor sqrt(const Tensor& a);
// max(a, lo) elementwise; gradient is zero where the clamp engages.
Tensor clamp_min(const Tensor& a, double lo);

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias);

Tensor sum(const Tensor& a);   // scalar
Tensor mean(const Tensor& a);  // scalar

// Row-space helpers for [N×C] matrices.
Tensor add_rowvec(const Tensor& x, const Tensor& v);  // v: [C]
Tensor slice_cols(const Tensor& x, int lo, int hi);   // columns [lo, hi)
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor gather_rows(const Tensor& x, const std::vector<int>& rows);

// Flat-index gather: out[k] = a.value[indices[k]].
Tensor gather_elems(const Tensor& a, const std::vector<int>& indices);

// Nearest-neighbour 2× upsample of [C×H×W].
Tensor upsample2(const Tensor& x);

// w×w window of [C×H×W] centred at (cy, cx), zero-padded at borders,
// flattened to [w²×C] row-major over (dy, dx).
Tensor crop_window(const Tensor& x, int cy, int cx, int w);

Tensor stop_gradient(const Tensor& x);

}  // namespace stfm
