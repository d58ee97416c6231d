#include "phydra/opam.hpp"

namespace phydra {

namespace {

constexpr double kConsistencyFloor = 1e-12;

// [B,C,H,W] -> [B*H, W, C]
Tensor fold_rows(const Tensor& x) {
  return reshape(permute(x, {0, 2, 3, 1}), {x.dim(0) * x.dim(2), x.dim(3), x.dim(1)});
}

// [B,C,H,W] -> [B*W, H, C]
Tensor fold_cols(const Tensor& x) {
  return reshape(permute(x, {0, 3, 2, 1}), {x.dim(0) * x.dim(3), x.dim(2), x.dim(1)});
}

}  // namespace

OpamWeights::OpamWeights(ParamRegistry& reg, const std::string& prefix,
                         int channels, Rng& rng) {
  q_hor = Skm(reg, prefix + ".q_hor", channels, rng);
  k_hor = Skm(reg, prefix + ".k_hor", channels, rng);
  q_ver = Skm(reg, prefix + ".q_ver", channels, rng);
  k_ver = Skm(reg, prefix + ".k_ver", channels, rng);
}

ParallaxOutput parallax_attention(const Tensor& f_main, const Tensor& f_side,
                                  Axis axis, const OpamWeights& weights) {
  if (f_main.rank() != 4 || f_main.shape() != f_side.shape())
    throw shape_error("parallax_attention: sources must share [B,C,H,W], got " +
                      shape_str(f_main.shape()) + " vs " +
                      shape_str(f_side.shape()));
  std::int64_t b = f_main.dim(0), c = f_main.dim(1);
  std::int64_t h = f_main.dim(2), w = f_main.dim(3);

  Tensor q = f_main, k = f_side;
  if (!weights.identity) {
    const Skm& sq = axis == Axis::kHorizontal ? weights.q_hor : weights.q_ver;
    const Skm& sk = axis == Axis::kHorizontal ? weights.k_hor : weights.k_ver;
    q = sq.forward(f_main);
    k = sk.forward(f_side);
  }

  bool horizontal = axis == Axis::kHorizontal;
  std::int64_t folded = horizontal ? w : h;  // attention length
  Tensor qb = horizontal ? fold_rows(q) : fold_cols(q);
  Tensor kb = horizontal ? fold_rows(k) : fold_cols(k);
  Tensor vb = horizontal ? fold_rows(f_side) : fold_cols(f_side);

  Tensor m = matmul(qb, transpose_last2(kb));  // [B*fold, L, L]
  ParallaxAttentionMaps maps;
  maps.axis = axis;
  maps.to_main = softmax_lastdim(m);
  maps.to_side = softmax_lastdim(transpose_last2(m));

  // consistency: inner product of row i of to_main with column i of to_side
  std::int64_t rows = maps.to_main.dim(0);
  Tensor lhs = reshape(maps.to_main, {rows * folded, 1, folded});
  Tensor rhs = reshape(transpose_last2(maps.to_side), {rows * folded, folded, 1});
  Tensor cons = matmul(lhs, rhs);  // [rows*L, 1, 1]
  Tensor cons_grid;
  if (horizontal) {
    cons_grid = reshape(cons, {b, 1, h, w});
  } else {
    cons_grid = reshape(permute(reshape(cons, {b, w, h}), {0, 2, 1}), {b, 1, h, w});
  }
  cons_grid = clamp(cons_grid, kConsistencyFloor, 1.0);

  Tensor aligned_b = matmul(maps.to_main, vb);  // [B*fold, L, C]
  Tensor aligned;
  if (horizontal) {
    aligned = permute(reshape(aligned_b, {b, h, w, c}), {0, 3, 1, 2});
  } else {
    aligned = permute(reshape(aligned_b, {b, w, h, c}), {0, 3, 2, 1});
  }

  return {AlignedFeature{aligned}, ConsistencyMap{cons_grid}, std::move(maps)};
}

OpamOutput opam(const Tensor& f_main, const Tensor& f_side,
                const OpamWeights& weights) {
  ParallaxOutput hor =
      parallax_attention(f_main, f_side, Axis::kHorizontal, weights);
  ParallaxOutput ver = parallax_attention(f_main, hor.aligned.values,
                                          Axis::kVertical, weights);
  Tensor cons = clamp(mul(hor.consistency.values, ver.consistency.values),
                      kConsistencyFloor, 1.0);
  return {ver.aligned, ConsistencyMap{cons}, std::move(hor.maps),
          std::move(ver.maps)};
}

Tensor full_2d_attention_oracle(const Tensor& f_main, const Tensor& f_side,
                                const OpamWeights& weights) {
  if (f_main.rank() != 4 || f_main.shape() != f_side.shape())
    throw shape_error("2d attention oracle: shape mismatch");
  std::int64_t b = f_main.dim(0), c = f_main.dim(1);
  std::int64_t h = f_main.dim(2), w = f_main.dim(3);
  if (std::max(h, w) > 32)
    throw contract_error("2d attention oracle refused: N = " +
                         std::to_string(std::max(h, w)) + " exceeds 32");
  Tensor q = f_main, k = f_side;
  if (!weights.identity) {
    q = weights.q_hor.forward(f_main);
    k = weights.k_hor.forward(f_side);
  }
  Tensor qf = reshape(permute(q, {0, 2, 3, 1}), {b, h * w, c});
  Tensor kf = reshape(permute(k, {0, 2, 3, 1}), {b, h * w, c});
  Tensor vf = reshape(permute(f_side, {0, 2, 3, 1}), {b, h * w, c});
  Tensor attn = softmax_lastdim(matmul(qf, transpose_last2(kf)));
  Tensor out = matmul(attn, vf);
  return permute(reshape(out, {b, h, w, c}), {0, 3, 1, 2});
}

}  // namespace phydra
