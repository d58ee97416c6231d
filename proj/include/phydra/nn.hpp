#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "phydra/rng.hpp"
#include "phydra/tensor.hpp"

namespace phydra {

// Ordered parameter store. Insertion order pins the serialization layout and
// the optimizer's update order, which keeps runs bit-reproducible.
class ParamRegistry {
 public:
  // Gaussian init with the given std.
  Tensor add(const std::string& name, Shape shape, Rng& rng, double std);
  Tensor add_const(const std::string& name, Shape shape, double value);

  const std::vector<std::pair<std::string, Tensor>>& items() const {
    return items_;
  }
  bool has(const std::string& name) const { return index_.count(name) > 0; }
  Tensor find(const std::string& name) const;
  // Overwrites registered values in place; every name must match in shape.
  void load_values(const std::vector<std::pair<std::string, Tensor>>& items);
  std::int64_t total_params() const;

 private:
  std::vector<std::pair<std::string, Tensor>> items_;
  std::unordered_map<std::string, size_t> index_;
};

constexpr double kLeakySlope = 0.01;

struct Conv2dLayer {
  Tensor w, b;
  int stride = 1, pad = 0;
  Conv2dLayer() = default;
  Conv2dLayer(ParamRegistry& reg, const std::string& prefix, int in_ch,
              int out_ch, int k, int stride, int pad, Rng& rng,
              double bias_init = 0.0);
  Tensor operator()(const Tensor& x) const { return conv2d(x, w, b, stride, pad); }
};

struct Deconv2dLayer {
  Tensor w, b;  // w: [in, out, k, k]
  int stride = 1, pad = 0, opad = 0;
  Deconv2dLayer() = default;
  Deconv2dLayer(ParamRegistry& reg, const std::string& prefix, int in_ch,
                int out_ch, int k, int stride, int pad, int opad, Rng& rng,
                double bias_init = 0.0);
  Tensor operator()(const Tensor& x) const {
    return deconv2d(x, w, b, stride, pad, opad);
  }
};

struct DepthwiseConv2dLayer {
  Tensor w;  // [C,1,k,k], bias-free
  int pad = 0;
  DepthwiseConv2dLayer() = default;
  DepthwiseConv2dLayer(ParamRegistry& reg, const std::string& prefix, int ch,
                       int k, Rng& rng);
  Tensor operator()(const Tensor& x) const {
    return conv2d_depthwise(x, w, Tensor(), 1, pad);
  }
};

struct LinearLayer {
  Tensor w, b;  // [F,O], [O]
  LinearLayer() = default;
  LinearLayer(ParamRegistry& reg, const std::string& prefix, int in_f,
              int out_f, Rng& rng);
  Tensor operator()(const Tensor& x) const { return linear_lastdim(x, w, b); }
};

// Selective Kernel Module: two parallel depthwise branches (3x3 and 5x5),
// per-channel softmax gating between them from pooled statistics, and a 1x1
// output projection. Shape preserving.
struct Skm {
  DepthwiseConv2dLayer dw3, dw5;
  LinearLayer gate1, gate2;  // C -> hidden -> 2C
  Conv2dLayer proj;          // 1x1, carries the only bias
  int channels = 0;

  Skm() = default;
  Skm(ParamRegistry& reg, const std::string& prefix, int ch, Rng& rng);
  Tensor forward(const Tensor& x) const;
  // gates_out, when non-null, receives the per-channel branch weights
  // as a [B, C, 2] tensor (rows sum to 1).
  Tensor forward(const Tensor& x, Tensor* gates_out) const;
};

// 1x1 expand -> depthwise 3x3 -> 1x1 reduce with a residual connection.
struct DepthRb {
  Conv2dLayer expand;  // C -> 2C
  DepthwiseConv2dLayer dw;
  Conv2dLayer reduce;  // 2C -> C
  DepthRb() = default;
  DepthRb(ParamRegistry& reg, const std::string& prefix, int ch, Rng& rng);
  Tensor forward(const Tensor& x) const;
};

// Lightweight fusion network F: concatenate [aligned, base] along channels,
// two 3x3 convs with a leaky nonlinearity between, then add base back.
struct FusionNet {
  Conv2dLayer c1;  // 2C -> C
  Conv2dLayer c2;  // C -> C
  FusionNet() = default;
  FusionNet(ParamRegistry& reg, const std::string& prefix, int ch, Rng& rng);
  Tensor forward(const Tensor& aligned, const Tensor& base) const;
};

// Checkerboard anchor/non-anchor partition of an H x W grid:
// (i + j) even is anchor.
struct CheckerboardMask {
  std::int64_t h = 0, w = 0;
  std::vector<std::uint8_t> is_anchor;  // row-major

  static CheckerboardMask make(std::int64_t h, std::int64_t w);
  std::int64_t anchor_count() const;
  std::int64_t nonanchor_count() const;
  std::vector<std::int64_t> anchor_positions() const;
  std::vector<std::int64_t> nonanchor_positions() const;
  // [B,C,H,W] tensor: 1 at anchors (or at non-anchors when inverted), else 0.
  Tensor mask_tensor(std::int64_t b, std::int64_t c, bool inverted = false) const;
};

// Checkerboard-window local context. Each non-anchor position attends over
// the anchor-parity cells of its window x window neighborhood (12 cells for
// window 5); out-of-border cells contribute zero-valued features, matching
// conv zero padding. Output is zero at every anchor position. The attended
// values come only from anchor positions of anchor_ctx, so poisoned
// non-anchor entries cannot reach the output.
struct LocalContextAttention {
  LinearLayer q;  // feats channels -> attn channels
  LinearLayer k;  // ctx channels -> attn channels
  LinearLayer v;  // ctx channels -> out channels
  int window = 5;

  LocalContextAttention() = default;
  LocalContextAttention(ParamRegistry& reg, const std::string& prefix,
                        int feat_ch, int ctx_ch, int attn_ch, int out_ch,
                        int window, Rng& rng);
  // anchor_ctx: [B,Cctx,H,W]; feats: [B,Cfeat,H,W]
  Tensor forward(const Tensor& anchor_ctx, const Tensor& feats,
                 const CheckerboardMask& mask) const;
};

}  // namespace phydra
