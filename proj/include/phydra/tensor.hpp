#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <vector>

#include "phydra/errors.hpp"

namespace phydra {

using Shape = std::vector<std::int64_t>;

std::string shape_str(const Shape& s);
std::int64_t shape_numel(const Shape& s);

// Counts forward multiply-adds of batched matrix multiplications.
// Thread-local so per-view worker threads do not race.
class FlopCounter {
 public:
  static void reset();
  static std::uint64_t madds();
  static void add(std::uint64_t n);
};

struct TensorNode {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // allocated lazily, same size as values
  bool requires_grad = false;
  bool needs_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void()> backprop;

  std::int64_t numel() const { return static_cast<std::int64_t>(values.size()); }
  void ensure_grad() {
    if (grad.size() != values.size()) grad.assign(values.size(), 0.0);
  }
};

// Dense N-dimensional tensor of doubles with reverse-mode differentiation.
// Tensors are immutable once produced by an op; a Tensor value is a cheap
// shared handle to its node.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorNode> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor from_data(Shape shape, std::vector<double> data);
  // A leaf that participates in backward().
  static Tensor leaf(Shape shape, std::vector<double> data);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  std::int64_t dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
  std::int64_t numel() const { return node_->numel(); }

  const std::vector<double>& data() const { return node_->values; }
  // Direct mutation is only legal on leaves that no op has consumed yet
  // (parameter init, finite-difference probes).
  std::vector<double>& mutable_data() { return node_->values; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool v) {
    node_->requires_grad = v;
    node_->needs_grad = v || !node_->parents.empty();
  }
  const std::vector<double>& grad() const;
  void zero_grad() {
    if (!node_->grad.empty()) node_->grad.assign(node_->values.size(), 0.0);
  }

  double item() const;
  double at(std::initializer_list<std::int64_t> idx) const;

  const std::shared_ptr<TensorNode>& node() const { return node_; }

 private:
  std::shared_ptr<TensorNode> node_;
};

// Populates .grad on every needs_grad node reachable from `loss`.
// loss must be scalar; traversal and accumulation order are deterministic.
void backward(const Tensor& loss);

bool grad_enabled();

// Disables graph recording in scope (inference paths).
struct NoGradGuard {
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// ---- elementwise ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);
Tensor neg(const Tensor& a);
Tensor leaky_relu(const Tensor& a, double slope);
Tensor softplus(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor exp_elem(const Tensor& a);
Tensor log_elem(const Tensor& a);
Tensor clamp(const Tensor& a, double lo, double hi);
Tensor clamp_min(const Tensor& a, double lo);
// Rounds half away from zero in the forward pass, identity in backward.
Tensor round_ste(const Tensor& a);
// Standard normal CDF, differentiable (d/dx = pdf).
Tensor normal_cdf_elem(const Tensor& a);
// out[i] = mask[i] != 0 ? a[i] : 0. A select, not a multiply: masked-out
// positions never read a[i], so poisoned (NaN) values cannot leak through.
Tensor where_mask(const Tensor& a, const Tensor& mask01);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(const Tensor& a, double c) { return scale(a, c); }
inline Tensor operator*(double c, const Tensor& a) { return scale(a, c); }

// ---- shape ----
Tensor reshape(const Tensor& a, Shape shape);
Tensor permute(const Tensor& a, const std::vector<int>& perm);
Tensor transpose_last2(const Tensor& a);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor narrow(const Tensor& a, int axis, std::int64_t start, std::int64_t len);
// Mirror padding on the bottom/right spatial borders of a [B,C,H,W] tensor.
Tensor pad_reflect(const Tensor& a, std::int64_t pad_h, std::int64_t pad_w);
Tensor crop_spatial(const Tensor& a, std::int64_t h, std::int64_t w);

// ---- reductions ----
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor mse(const Tensor& a, const Tensor& b);

// ---- linear algebra / attention primitives ----
// a: [B,M,K], b: [B,K,N] -> [B,M,N]; adds B*M*N*K to the flop counter.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor softmax_lastdim(const Tensor& a);
// x: [..., F] times w: [F, O] plus optional bias [O].
Tensor linear_lastdim(const Tensor& x, const Tensor& w, const Tensor& bias);
// x: [N, C] -> [M, C] with out[m] = x[idx[m]].
Tensor gather_rows(const Tensor& x, const std::vector<std::int64_t>& idx);
// x: [M, C] -> [N, C] zero-initialized with out[idx[m]] += x[m].
Tensor scatter_rows(const Tensor& x, const std::vector<std::int64_t>& idx,
                    std::int64_t n_rows);

// ---- convolution ----
// x: [B,Ci,H,W], w: [Co,Ci,kh,kw], bias: [Co] or undefined.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride,
              int pad);
// w: [C,1,kh,kw], one filter per channel.
Tensor conv2d_depthwise(const Tensor& x, const Tensor& w, const Tensor& bias,
                        int stride, int pad);
// Transposed convolution. x: [B,Ci,H,W], w: [Ci,Co,kh,kw].
// Output spatial size: (H-1)*stride - 2*pad + kh + output_pad.
// With matched (w, stride, pad) and divisible geometry it is the adjoint of
// conv2d: <conv(x), y> == <x, deconv(y)>.
Tensor deconv2d(const Tensor& x, const Tensor& w, const Tensor& bias,
                int stride, int pad, int output_pad);

// ---- broadcast helpers ----
// x: [B,C,H,W] * m: [B,1,H,W]
Tensor mul_channel_map(const Tensor& x, const Tensor& m);
// x: [B,C,H,W] * s: [B,C] (per-batch per-channel scalar)
Tensor mul_channel_scalar(const Tensor& x, const Tensor& s);
Tensor add_channel_bias(const Tensor& x, const Tensor& bias);  // bias: [C]
Tensor add_rowvec(const Tensor& x, const Tensor& bias);        // x:[N,O]+[O]
Tensor global_avg_pool(const Tensor& x);                       // [B,C,H,W]->[B,C]

}  // namespace phydra
