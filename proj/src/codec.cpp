#include "phydra/codec.hpp"

namespace phydra {

AnalysisEncoder::AnalysisEncoder(ParamRegistry& reg, const std::string& prefix,
                                 int hidden, int latent, Rng& rng) {
  c1 = Conv2dLayer(reg, prefix + ".c1", 3, hidden, 5, 2, 2, rng);
  c2 = Conv2dLayer(reg, prefix + ".c2", hidden, hidden, 5, 2, 2, rng);
  c3 = Conv2dLayer(reg, prefix + ".c3", hidden, hidden, 5, 2, 2, rng);
  c4 = Conv2dLayer(reg, prefix + ".c4", hidden, latent, 5, 2, 2, rng);
}

Tensor AnalysisEncoder::forward(const Tensor& x) const {
  Tensor h = leaky_relu(c1(x), kLeakySlope);
  h = leaky_relu(c2(h), kLeakySlope);
  h = leaky_relu(c3(h), kLeakySlope);
  return c4(h);
}

HyperEncoder::HyperEncoder(ParamRegistry& reg, const std::string& prefix,
                           int latent, int hidden, Rng& rng) {
  c1 = Conv2dLayer(reg, prefix + ".c1", latent, hidden, 3, 1, 1, rng);
  c2 = Conv2dLayer(reg, prefix + ".c2", hidden, hidden, 5, 2, 2, rng);
  c3 = Conv2dLayer(reg, prefix + ".c3", hidden, latent, 5, 2, 2, rng);
}

Tensor HyperEncoder::forward(const Tensor& y) const {
  Tensor h = leaky_relu(c1(y), kLeakySlope);
  h = leaky_relu(c2(h), kLeakySlope);
  return c3(h);
}

HyperDecoder::HyperDecoder(ParamRegistry& reg, const std::string& prefix,
                           int latent, int hidden, int out_ch, Rng& rng) {
  d1 = Deconv2dLayer(reg, prefix + ".d1", latent, hidden, 5, 2, 2, 1, rng);
  d2 = Deconv2dLayer(reg, prefix + ".d2", hidden, hidden, 5, 2, 2, 1, rng);
  c3 = Conv2dLayer(reg, prefix + ".c3", hidden, out_ch, 3, 1, 1, rng);
}

Tensor HyperDecoder::forward(const Tensor& z_hat) const {
  Tensor h = leaky_relu(d1(z_hat), kLeakySlope);
  h = leaky_relu(d2(h), kLeakySlope);
  return c3(h);
}

LatentPair encode_view(const AnalysisEncoder& enc, const HyperEncoder& henc,
                       const Tensor& x) {
  if (x.rank() != 4 || x.dim(1) != 3)
    throw shape_error("encode_view: expected [B,3,H,W], got " +
                      shape_str(x.shape()));
  if (x.dim(2) % 64 != 0 || x.dim(3) % 64 != 0)
    throw shape_error("encode_view: spatial dims must be multiples of 64, got " +
                      shape_str(x.shape()));
  for (double v : x.data()) {
    if (!(v >= 0.0 && v <= 1.0))
      throw config_error("encode_view: pixel values must lie in [0,1]");
  }
  LatentPair out;
  out.y = enc.forward(x);
  out.z = henc.forward(out.y);
  return out;
}

Tensor quantize_inference(const Tensor& t, const Tensor& mean) {
  NoGradGuard guard;
  if (!mean.defined()) return round_ste(t);
  if (mean.shape() != t.shape())
    throw shape_error("quantize: mean shape " + shape_str(mean.shape()) +
                      " does not match " + shape_str(t.shape()));
  return add(round_ste(sub(t, mean)), mean);
}

Tensor quantize_ste(const Tensor& t, const Tensor& mean) {
  if (!mean.defined()) return round_ste(t);
  if (mean.shape() != t.shape())
    throw shape_error("quantize: mean shape " + shape_str(mean.shape()) +
                      " does not match " + shape_str(t.shape()));
  return add(round_ste(sub(t, mean)), mean);
}

Tensor add_uniform_noise(const Tensor& t, Rng& rng) {
  Tensor noise = Tensor::zeros(t.shape());
  for (auto& v : noise.mutable_data()) v = rng.uniform() - 0.5;
  return add(t, noise);
}

ParaJd::ParaJd(ParamRegistry& reg, const std::string& prefix, int latent,
               int hidden, Rng& rng) {
  fuse1 = PmifmWeights(reg, prefix + ".fuse1", latent, rng);
  fuse2 = PmifmWeights(reg, prefix + ".fuse2", latent, rng);
  up1 = Deconv2dLayer(reg, prefix + ".up1", latent, latent, 5, 2, 2, 1, rng);
  up2a = Deconv2dLayer(reg, prefix + ".up2a", latent, hidden, 5, 2, 2, 1, rng);
  up2b = Deconv2dLayer(reg, prefix + ".up2b", hidden, hidden, 5, 2, 2, 1, rng);
  // mid-gray output at init
  up2c = Deconv2dLayer(reg, prefix + ".up2c", hidden, 3, 5, 2, 2, 1, rng, 0.5);
}

std::vector<Tensor> ParaJd::forward(const std::vector<Tensor>& latents,
                                    std::int64_t orig_h, std::int64_t orig_w,
                                    bool training) const {
  if (latents.empty()) throw shape_error("para_jd: no views");
  for (size_t k = 1; k < latents.size(); ++k) {
    if (latents[k].shape() != latents[0].shape())
      throw shape_error("para_jd: latent shapes diverge: " +
                        shape_str(latents[k].shape()) + " vs " +
                        shape_str(latents[0].shape()));
  }
  size_t n = latents.size();
  auto others = [&](const std::vector<Tensor>& all, size_t k) {
    std::vector<Tensor> rest;
    rest.reserve(all.size() - 1);
    for (size_t i = 0; i < all.size(); ++i)
      if (i != k) rest.push_back(all[i]);
    return rest;
  };

  std::vector<Tensor> feats(n);
  for (size_t k = 0; k < n; ++k) {
    Tensor fused = pmifm(latents[k], others(latents, k), fuse1);
    feats[k] = leaky_relu(up1(fused), kLeakySlope);
  }

  std::vector<Tensor> out(n);
  for (size_t k = 0; k < n; ++k) {
    Tensor fused = pmifm(feats[k], others(feats, k), fuse2);
    Tensor h = leaky_relu(up2a(fused), kLeakySlope);
    h = leaky_relu(up2b(h), kLeakySlope);
    Tensor x = up2c(h);
    x = crop_spatial(x, orig_h, orig_w);
    out[k] = training ? x : clamp(x, 0.0, 1.0);
  }
  return out;
}

Tensor rd_loss(const std::vector<Tensor>& x, const std::vector<Tensor>& x_hat,
               const std::vector<Tensor>& rate_y_bits,
               const std::vector<Tensor>& rate_z_bits, double lambda,
               std::int64_t pixels_per_view) {
  if (lambda <= 0.0)
    throw config_error("rd_loss: lambda must be positive, got " +
                       std::to_string(lambda));
  if (x.size() != x_hat.size() || x.size() != rate_y_bits.size() ||
      x.size() != rate_z_bits.size() || x.empty())
    throw shape_error("rd_loss: per-view argument lists must align");
  Tensor distortion;
  Tensor bits;
  for (size_t k = 0; k < x.size(); ++k) {
    Tensor d = mse(x[k], x_hat[k]);
    Tensor r = add(rate_y_bits[k], rate_z_bits[k]);
    distortion = k == 0 ? d : add(distortion, d);
    bits = k == 0 ? r : add(bits, r);
  }
  Tensor rate_bpp = scale(bits, 1.0 / static_cast<double>(pixels_per_view));
  return add(scale(distortion, lambda), rate_bpp);
}

}  // namespace phydra
