#pragma once

#include <vector>

#include "phydra/nn.hpp"
#include "phydra/tensor.hpp"

namespace phydra {

enum class Axis { kHorizontal, kVertical };

// Soft correspondence maps between two sources along one folded axis.
// Every row of each map is a probability vector.
struct ParallaxAttentionMaps {
  Tensor to_main;  // [B*H, W, W] (horizontal) or [B*W, H, H] (vertical)
  Tensor to_side;  // same shape, opposite direction
  Axis axis = Axis::kHorizontal;
};

// Per-position reliability of the aligned reference, in (0, 1].
struct ConsistencyMap {
  Tensor values;  // [B,1,H,W]
};

// Convex recombination of side-source positions; [B,C,H,W].
struct AlignedFeature {
  Tensor values;
};

struct ParallaxOutput {
  AlignedFeature aligned;
  ConsistencyMap consistency;
  ParallaxAttentionMaps maps;
};

// Query/key transforms for both attention passes. The identity stub
// (Q = f_main, K = f_side) isolates the attention math from learned
// weights for oracle tests.
struct OpamWeights {
  bool identity = false;
  Skm q_hor, k_hor, q_ver, k_ver;

  OpamWeights() = default;
  OpamWeights(ParamRegistry& reg, const std::string& prefix, int channels,
              Rng& rng);
  static OpamWeights identity_stub() {
    OpamWeights w;
    w.identity = true;
    return w;
  }
};

// One parallax-attention pass between f_main and f_side along the given
// axis. Rows (or columns) are folded into the batch; the cross-correlation
// map is a plain Q K^T batched product with softmax over the last dim in
// both directions; consistency is the per-position inner product of the two
// opposing attention rows; the aligned feature recombines f_side rows.
ParallaxOutput parallax_attention(const Tensor& f_main, const Tensor& f_side,
                                  Axis axis, const OpamWeights& weights);

struct OpamOutput {
  AlignedFeature aligned;      // vertically aligned feature
  ConsistencyMap consistency;  // horizontal * vertical product
  ParallaxAttentionMaps horizontal;
  ParallaxAttentionMaps vertical;
};

// Two-stage pass: horizontal attention on (f_main, f_side), then vertical
// attention on (f_main, horizontally-aligned). The composition attends over
// the full 2-D domain of f_side at cubic cost.
OpamOutput opam(const Tensor& f_main, const Tensor& f_side,
                const OpamWeights& weights);

// Reference-only full 2-D attention (quartic cost): every position of
// f_main attends over all H*W positions of f_side with a single softmax.
// Guarded to max(H, W) <= 32; not a product path.
Tensor full_2d_attention_oracle(const Tensor& f_main, const Tensor& f_side,
                                const OpamWeights& weights);

}  // namespace phydra
