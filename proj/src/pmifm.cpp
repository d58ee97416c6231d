#include "phydra/pmifm.hpp"

namespace phydra {

PmifmWeights::PmifmWeights(ParamRegistry& reg, const std::string& prefix,
                           int channels, Rng& rng) {
  opam = OpamWeights(reg, prefix + ".opam", channels, rng);
  fusion = FusionNet(reg, prefix + ".fusion", channels, rng);
}

PmifmWeights PmifmWeights::with_stub_opam(ParamRegistry& reg,
                                          const std::string& prefix,
                                          int channels, Rng& rng) {
  PmifmWeights w;
  w.opam = OpamWeights::identity_stub();
  w.fusion = FusionNet(reg, prefix + ".fusion", channels, rng);
  return w;
}

PmifmResult pmifm_full(const Tensor& main, const std::vector<Tensor>& sides,
                       const PmifmWeights& weights) {
  if (main.rank() != 4) throw shape_error("pmifm: main source must be [B,C,H,W]");
  for (size_t i = 0; i < sides.size(); ++i) {
    if (sides[i].shape() != main.shape())
      throw shape_error("pmifm: side source " + std::to_string(i) + " has " +
                        shape_str(sides[i].shape()) + ", main is " +
                        shape_str(main.shape()));
  }

  PmifmResult result;
  if (sides.empty()) {
    result.weighted_sum = Tensor::zeros(main.shape());
    result.fused = weights.fusion.forward(result.weighted_sum, main);
    return result;
  }

  std::vector<Tensor> aligned;
  aligned.reserve(sides.size());
  std::vector<Tensor> cons;
  cons.reserve(sides.size());
  for (const Tensor& side : sides) {
    OpamOutput out = opam(main, side, weights.opam);
    aligned.push_back(out.aligned.values);
    cons.push_back(out.consistency.values);
  }
  result.consistencies = cons;

  // softmax over the source axis, independently at each position
  std::int64_t s = static_cast<std::int64_t>(sides.size());
  Tensor stacked = concat(cons, 1);  // [B,S,H,W]
  Tensor weights_map = permute(
      softmax_lastdim(permute(stacked, {0, 2, 3, 1})), {0, 3, 1, 2});
  result.fusion_weights = weights_map;

  Tensor fused_sum;
  for (std::int64_t i = 0; i < s; ++i) {
    Tensor wk = narrow(weights_map, 1, i, 1);  // [B,1,H,W]
    Tensor term = mul_channel_map(aligned[static_cast<size_t>(i)], wk);
    fused_sum = i == 0 ? term : add(fused_sum, term);
  }
  result.weighted_sum = fused_sum;
  result.fused = weights.fusion.forward(fused_sum, main);
  return result;
}

Tensor pmifm(const Tensor& main, const std::vector<Tensor>& sides,
             const PmifmWeights& weights) {
  return pmifm_full(main, sides, weights).fused;
}

std::vector<Tensor> pmifm_consistency_probe(const Tensor& main,
                                            const std::vector<Tensor>& sides,
                                            const PmifmWeights& weights) {
  return pmifm_full(main, sides, weights).consistencies;
}

}  // namespace phydra
