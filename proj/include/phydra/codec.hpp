#pragma once

#include <vector>

#include "phydra/pmifm.hpp"
#include "phydra/rng.hpp"

namespace phydra {

struct LatentPair {
  Tensor y;  // [B, latent, H/16, W/16]
  Tensor z;  // [B, latent, H/64, W/64]
};

// Four stride-2 conv stages ending at latent_channels (x16 downsampling).
struct AnalysisEncoder {
  Conv2dLayer c1, c2, c3, c4;
  AnalysisEncoder() = default;
  AnalysisEncoder(ParamRegistry& reg, const std::string& prefix, int hidden,
                  int latent, Rng& rng);
  Tensor forward(const Tensor& x) const;
};

// latent -> hyper-latent, spatial /4.
struct HyperEncoder {
  Conv2dLayer c1, c2, c3;
  HyperEncoder() = default;
  HyperEncoder(ParamRegistry& reg, const std::string& prefix, int latent,
               int hidden, Rng& rng);
  Tensor forward(const Tensor& y) const;
};

// hyper-latent -> hyperprior feature at the latent's spatial size.
struct HyperDecoder {
  Deconv2dLayer d1, d2;
  Conv2dLayer c3;
  HyperDecoder() = default;
  HyperDecoder(ParamRegistry& reg, const std::string& prefix, int latent,
               int hidden, int out_ch, Rng& rng);
  Tensor forward(const Tensor& z_hat) const;
};

// Independent per-view transform; reads exactly one view.
// pre: x is [B,3,H,W], H and W multiples of 64, pixel values in [0,1].
LatentPair encode_view(const AnalysisEncoder& enc, const HyperEncoder& henc,
                       const Tensor& x);

// Rounds half away from zero. mean, when defined, recenters:
// round(t - mean) + mean.
Tensor quantize_inference(const Tensor& t, const Tensor& mean);
// Same forward, straight-through gradient (training reconstruction path).
Tensor quantize_ste(const Tensor& t, const Tensor& mean);
// Additive uniform noise in (-0.5, 0.5) (training rate path).
Tensor add_uniform_noise(const Tensor& t, Rng& rng);

// Parallax joint decoder: two submodules of PMIFM + deconv. The first
// upsamples x2 to the latent feature set, the second x8 back to RGB.
struct ParaJd {
  PmifmWeights fuse1, fuse2;
  Deconv2dLayer up1;        // latent -> latent, x2
  Deconv2dLayer up2a, up2b, up2c;  // latent -> hidden -> hidden -> 3, x8

  ParaJd() = default;
  ParaJd(ParamRegistry& reg, const std::string& prefix, int latent, int hidden,
         Rng& rng);

  // latents: one [B,latent,h,w] tensor per view, identical shapes.
  // Output is cropped to (orig_h, orig_w); clamped to [0,1] unless training
  // (the training path feeds the distortion term unclamped).
  std::vector<Tensor> forward(const std::vector<Tensor>& latents,
                              std::int64_t orig_h, std::int64_t orig_w,
                              bool training) const;
};

// lambda * sum_k MSE(x_k, xhat_k) + sum_k (bits_y_k + bits_z_k) / pixels.
// Rates are scalar tensors of estimated bits; pixels is per-view original
// H*W so the rate term is bits per pixel of one view.
Tensor rd_loss(const std::vector<Tensor>& x, const std::vector<Tensor>& x_hat,
               const std::vector<Tensor>& rate_y_bits,
               const std::vector<Tensor>& rate_z_bits, double lambda,
               std::int64_t pixels_per_view);

}  // namespace phydra
