#pragma once

#include <vector>

#include "phydra/pmifm.hpp"

namespace phydra {

// Per-element conditional Gaussian; sigma is floored at sigma_min so the
// discretized distribution never degenerates into a table-breaking spike.
struct GaussianParams {
  Tensor mu;     // [B, s_c, H', W']
  Tensor sigma;  // same shape, >= sigma_min everywhere
};

// Entropy parameter head: concatenate the available contexts, two 1x1 conv
// layers, split into mu and a raw scale mapped through softplus + sigma_min.
struct EpNet {
  Conv2dLayer c1, c2;
  int in_channels = 0;
  int out_channels = 0;  // slice channels
  double sigma_min = 0.11;

  EpNet() = default;
  EpNet(ParamRegistry& reg, const std::string& prefix, int in_ch, int hidden,
        int slice_ch, double sigma_min, Rng& rng);
  GaussianParams forward(const std::vector<Tensor>& contexts) const;
};

// Global context weights: queries/keys projected from the channel context at
// non-anchor/anchor positions, values from the current slice's anchors.
struct PgcmWeights {
  LinearLayer q, k, v;
  Conv2dLayer conv;  // 3x3
  DepthRb depth_rb;

  PgcmWeights() = default;
  PgcmWeights(ParamRegistry& reg, const std::string& prefix, int slice_ch,
              Rng& rng);
};

struct ParaEmConfig {
  int slices = 8;
  int slice_channels = 24;
  int window = 5;
  int phi_h_channels = 384;
  int ep_hidden = 128;
  double sigma_min = 0.11;
};

// Context machinery of the slice-wise checkerboard entropy model. One weight
// set serves every slice; all contexts depend only on already-decoded data,
// so the decoder reproduces the encoder's parameters bit-identically.
struct ParaEm {
  ParaEmConfig cfg;
  PmifmWeights pccm;         // channel-context fusion over prior slices
  LocalContextAttention lc;  // checkerboard-window local context
  PgcmWeights pgcm;
  EpNet ep_anchor;     // contexts: (phi_ch, phi_h)
  EpNet ep_nonanchor;  // contexts: (phi_ch, phi_h, phi_lc, phi_gc)

  ParaEm() = default;
  ParaEm(ParamRegistry& reg, const std::string& prefix, const ParaEmConfig& cfg,
         Rng& rng);

  // Phi_ch for 1-based slice index i. Slice 1 has no context (zero tensor);
  // otherwise PMIFM with main source y^{i-1} and side set y^{<i-1}.
  // decoded_slices must hold at least i-1 entries.
  Tensor channel_context(const std::vector<Tensor>& decoded_slices,
                         int slice_index, std::int64_t b, std::int64_t h,
                         std::int64_t w) const;
  GaussianParams anchor_params(const Tensor& phi_ch, const Tensor& phi_h) const;
  // Checkerboard local context from the decoded anchor half of the slice;
  // queries come from (phi_ch, phi_h).
  Tensor local_context(const Tensor& slice_with_anchors, const Tensor& phi_ch,
                       const Tensor& phi_h, const CheckerboardMask& mask) const;
  // Attention stage of the global context (gather anchors, attend from
  // non-anchors, scatter back); exposed for oracle tests.
  Tensor global_context_attention(const Tensor& phi_ch,
                                  const Tensor& slice_with_anchors,
                                  const CheckerboardMask& mask) const;
  // Full Phi_gc: attention, 3x3 conv, DepthRB, zeroed at anchors.
  Tensor global_context(const Tensor& phi_ch, const Tensor& slice_with_anchors,
                        const CheckerboardMask& mask) const;
  GaussianParams nonanchor_params(const Tensor& phi_ch, const Tensor& phi_h,
                                  const Tensor& phi_lc,
                                  const Tensor& phi_gc) const;
};

// Differentiable rate estimate for the training path: sum over masked
// elements of -log2 p with p = Phi((v+.5-mu)/sigma) - Phi((v-.5-mu)/sigma).
// Values are noise-relaxed, so no tail folding applies.
Tensor slice_rate_bits_train(const Tensor& values, const GaussianParams& params,
                             const Tensor& mask01, double sigma_min);

// Inference-side estimate on integer symbols (v - mu), tail-folded exactly
// like the coder's tables.
double symbol_rate_bits(const std::vector<std::int64_t>& symbols,
                        const std::vector<double>& sigmas, int support,
                        double sigma_min);

// Folded discretized-Gaussian pmf of symbol s (integer offsets from mu = 0).
double gaussian_pmf_folded(std::int64_t s, double sigma, int support);

}  // namespace phydra
