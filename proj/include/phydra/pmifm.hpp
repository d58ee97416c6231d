#pragma once

#include <vector>

#include "phydra/opam.hpp"

namespace phydra {

// One weight set serves every side source, so the module accepts any number
// of input views without reconfiguration.
struct PmifmWeights {
  OpamWeights opam;
  FusionNet fusion;

  PmifmWeights() = default;
  PmifmWeights(ParamRegistry& reg, const std::string& prefix, int channels,
               Rng& rng);
  // Identity-stub attention with a real fusion net (fixture/test use).
  static PmifmWeights with_stub_opam(ParamRegistry& reg,
                                     const std::string& prefix, int channels,
                                     Rng& rng);
};

struct PmifmResult {
  Tensor fused;         // F(f_t, main): the module output
  Tensor weighted_sum;  // f_t, relevance-weighted sum of aligned features
  std::vector<Tensor> consistencies;  // raw per-source maps [B,1,H,W]
  Tensor fusion_weights;  // [B,S,H,W], softmax over sources per position;
                          // undefined when the side set is empty
};

// Parallax multi-information fusion: per-source OPAM against the main
// source, per-position softmax over the stacked consistency maps, weighted
// sum of the aligned features, then the fusion net against the main source.
// An empty side set contributes a zero aligned sum.
PmifmResult pmifm_full(const Tensor& main, const std::vector<Tensor>& sides,
                       const PmifmWeights& weights);

Tensor pmifm(const Tensor& main, const std::vector<Tensor>& sides,
             const PmifmWeights& weights);

// The raw consistency maps the fusion used, one per side source.
std::vector<Tensor> pmifm_consistency_probe(const Tensor& main,
                                            const std::vector<Tensor>& sides,
                                            const PmifmWeights& weights);

}  // namespace phydra
