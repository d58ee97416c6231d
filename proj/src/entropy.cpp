#include "phydra/entropy.hpp"

#include <cmath>

#include "phydra/mathfn.hpp"

namespace phydra {

namespace {

constexpr double kLog2E = 1.44269504088896340736;

double softplus_inverse(double y) { return std::log(std::exp(y) - 1.0); }

}  // namespace

EpNet::EpNet(ParamRegistry& reg, const std::string& prefix, int in_ch,
             int hidden, int slice_ch, double sigma_min, Rng& rng)
    : in_channels(in_ch), out_channels(slice_ch), sigma_min(sigma_min) {
  c1 = Conv2dLayer(reg, prefix + ".c1", in_ch, hidden, 1, 1, 0, rng);
  c2 = Conv2dLayer(reg, prefix + ".c2", hidden, 2 * slice_ch, 1, 1, 0, rng);
  // start near sigma = 1 so early rate estimates are sane
  Tensor bias = c2.b;
  double raw = softplus_inverse(1.0 - sigma_min);
  for (int c = slice_ch; c < 2 * slice_ch; ++c)
    bias.mutable_data()[static_cast<size_t>(c)] = raw;
}

GaussianParams EpNet::forward(const std::vector<Tensor>& contexts) const {
  if (contexts.empty()) throw contract_error("entropy parameters: no contexts");
  std::int64_t total = 0;
  for (const auto& c : contexts) total += c.dim(1);
  if (total != in_channels)
    throw contract_error("entropy parameters: context set has " +
                         std::to_string(total) + " channels, this head needs " +
                         std::to_string(in_channels));
  Tensor h = contexts.size() == 1 ? contexts[0] : concat(contexts, 1);
  h = leaky_relu(c1(h), kLeakySlope);
  Tensor out = c2(h);
  GaussianParams p;
  p.mu = narrow(out, 1, 0, out_channels);
  p.sigma = add_scalar(softplus(narrow(out, 1, out_channels, out_channels)),
                       sigma_min);
  return p;
}

PgcmWeights::PgcmWeights(ParamRegistry& reg, const std::string& prefix,
                         int slice_ch, Rng& rng) {
  q = LinearLayer(reg, prefix + ".q", slice_ch, slice_ch, rng);
  k = LinearLayer(reg, prefix + ".k", slice_ch, slice_ch, rng);
  v = LinearLayer(reg, prefix + ".v", slice_ch, slice_ch, rng);
  conv = Conv2dLayer(reg, prefix + ".conv", slice_ch, slice_ch, 3, 1, 1, rng);
  depth_rb = DepthRb(reg, prefix + ".rb", slice_ch, rng);
}

ParaEm::ParaEm(ParamRegistry& reg, const std::string& prefix,
               const ParaEmConfig& cfg, Rng& rng)
    : cfg(cfg) {
  pccm = PmifmWeights(reg, prefix + ".pccm", cfg.slice_channels, rng);
  lc = LocalContextAttention(reg, prefix + ".lc",
                             cfg.slice_channels + cfg.phi_h_channels,
                             cfg.slice_channels, cfg.slice_channels,
                             cfg.slice_channels, cfg.window, rng);
  pgcm = PgcmWeights(reg, prefix + ".pgcm", cfg.slice_channels, rng);
  ep_anchor = EpNet(reg, prefix + ".ep_ac",
                    cfg.slice_channels + cfg.phi_h_channels, cfg.ep_hidden,
                    cfg.slice_channels, cfg.sigma_min, rng);
  ep_nonanchor = EpNet(reg, prefix + ".ep_na",
                       3 * cfg.slice_channels + cfg.phi_h_channels,
                       cfg.ep_hidden, cfg.slice_channels, cfg.sigma_min, rng);
}

Tensor ParaEm::channel_context(const std::vector<Tensor>& decoded_slices,
                               int slice_index, std::int64_t b, std::int64_t h,
                               std::int64_t w) const {
  if (slice_index < 1 || slice_index > cfg.slices)
    throw contract_error("channel context: slice index " +
                         std::to_string(slice_index) + " outside 1.." +
                         std::to_string(cfg.slices));
  if (static_cast<int>(decoded_slices.size()) < slice_index - 1)
    throw contract_error("channel context: slice " +
                         std::to_string(slice_index) + " requires " +
                         std::to_string(slice_index - 1) +
                         " decoded slices, have " +
                         std::to_string(decoded_slices.size()));
  if (slice_index == 1)
    return Tensor::zeros({b, cfg.slice_channels, h, w});
  Tensor main = decoded_slices[static_cast<size_t>(slice_index - 2)];
  std::vector<Tensor> sides(decoded_slices.begin(),
                            decoded_slices.begin() + (slice_index - 2));
  return pmifm(main, sides, pccm);
}

GaussianParams ParaEm::anchor_params(const Tensor& phi_ch,
                                     const Tensor& phi_h) const {
  return ep_anchor.forward({phi_ch, phi_h});
}

Tensor ParaEm::local_context(const Tensor& slice_with_anchors,
                             const Tensor& phi_ch, const Tensor& phi_h,
                             const CheckerboardMask& mask) const {
  Tensor feats = concat({phi_ch, phi_h}, 1);
  return lc.forward(slice_with_anchors, feats, mask);
}

Tensor ParaEm::global_context_attention(const Tensor& phi_ch,
                                        const Tensor& slice_with_anchors,
                                        const CheckerboardMask& mask) const {
  std::int64_t b = phi_ch.dim(0), c = phi_ch.dim(1);
  std::int64_t h = phi_ch.dim(2), w = phi_ch.dim(3);
  if (slice_with_anchors.shape() != phi_ch.shape())
    throw shape_error("global context: slice " +
                      shape_str(slice_with_anchors.shape()) +
                      " vs channel context " + shape_str(phi_ch.shape()));
  auto anchors = mask.anchor_positions();
  auto nonanchors = mask.nonanchor_positions();
  std::int64_t na = static_cast<std::int64_t>(anchors.size());
  std::int64_t nn = static_cast<std::int64_t>(nonanchors.size());
  if (nn == 0) return Tensor::zeros(phi_ch.shape());

  Tensor ctx_rows = reshape(permute(phi_ch, {0, 2, 3, 1}), {b * h * w, c});
  Tensor slice_rows =
      reshape(permute(slice_with_anchors, {0, 2, 3, 1}), {b * h * w, c});

  std::vector<std::int64_t> a_idx, n_idx;
  a_idx.reserve(static_cast<size_t>(b * na));
  n_idx.reserve(static_cast<size_t>(b * nn));
  for (std::int64_t bi = 0; bi < b; ++bi) {
    for (auto p : anchors) a_idx.push_back(bi * h * w + p);
    for (auto p : nonanchors) n_idx.push_back(bi * h * w + p);
  }

  // gather before projecting: non-anchor slice values are never read
  Tensor queries = reshape(pgcm.q(gather_rows(ctx_rows, n_idx)), {b, nn, c});
  Tensor keys = reshape(pgcm.k(gather_rows(ctx_rows, a_idx)), {b, na, c});
  Tensor values = reshape(pgcm.v(gather_rows(slice_rows, a_idx)), {b, na, c});

  Tensor scores = scale(matmul(queries, transpose_last2(keys)),
                        1.0 / std::sqrt(static_cast<double>(c)));
  Tensor attn = softmax_lastdim(scores);          // [B, Nn, Na]
  Tensor attended = matmul(attn, values);         // [B, Nn, C]
  Tensor grid = scatter_rows(reshape(attended, {b * nn, c}), n_idx, b * h * w);
  return permute(reshape(grid, {b, h, w, c}), {0, 3, 1, 2});
}

Tensor ParaEm::global_context(const Tensor& phi_ch,
                              const Tensor& slice_with_anchors,
                              const CheckerboardMask& mask) const {
  Tensor attended = global_context_attention(phi_ch, slice_with_anchors, mask);
  Tensor out = pgcm.depth_rb.forward(pgcm.conv(attended));
  std::int64_t b = out.dim(0), c = out.dim(1);
  return where_mask(out, mask.mask_tensor(b, c, /*inverted=*/true));
}

GaussianParams ParaEm::nonanchor_params(const Tensor& phi_ch,
                                        const Tensor& phi_h,
                                        const Tensor& phi_lc,
                                        const Tensor& phi_gc) const {
  return ep_nonanchor.forward({phi_ch, phi_h, phi_lc, phi_gc});
}

Tensor slice_rate_bits_train(const Tensor& values, const GaussianParams& params,
                             const Tensor& mask01, double sigma_min) {
  for (double s : params.sigma.data())
    if (s < sigma_min)
      throw contract_error("slice rate: sigma below the sigma_min floor");
  Tensor centered = sub(values, params.mu);
  Tensor upper = div(add_scalar(centered, 0.5), params.sigma);
  Tensor lower = div(add_scalar(centered, -0.5), params.sigma);
  Tensor p = sub(normal_cdf_elem(upper), normal_cdf_elem(lower));
  Tensor bits = scale(log_elem(clamp_min(p, 1e-12)), -kLog2E);
  return sum(where_mask(bits, mask01));
}

double gaussian_pmf_folded(std::int64_t s, double sigma, int support) {
  double lo = static_cast<double>(s) - 0.5;
  double hi = static_cast<double>(s) + 0.5;
  if (s <= -support) return normal_cdf((static_cast<double>(-support) + 0.5) / sigma);
  if (s >= support) return normal_cdf(-(static_cast<double>(support) - 0.5) / sigma);
  return gauss_interval_prob(lo, hi, 0.0, sigma);
}

double symbol_rate_bits(const std::vector<std::int64_t>& symbols,
                        const std::vector<double>& sigmas, int support,
                        double sigma_min) {
  if (symbols.size() != sigmas.size())
    throw contract_error("symbol rate: length mismatch");
  double bits = 0.0;
  for (size_t i = 0; i < symbols.size(); ++i) {
    if (sigmas[i] < sigma_min)
      throw contract_error("symbol rate: sigma below the sigma_min floor");
    double p = gaussian_pmf_folded(symbols[i], sigmas[i], support);
    bits += -std::log2(std::max(p, 1e-300));
  }
  return bits;
}

}  // namespace phydra
