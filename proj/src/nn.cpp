#include "phydra/nn.hpp"

#include <cmath>

namespace phydra {

namespace {

double he_std(std::int64_t fan_in) {
  return std::sqrt(2.0 / static_cast<double>(fan_in));
}

}  // namespace

Tensor ParamRegistry::add(const std::string& name, Shape shape, Rng& rng,
                          double std) {
  if (index_.count(name))
    throw config_error("duplicate parameter name: " + name);
  std::vector<double> data(static_cast<size_t>(shape_numel(shape)));
  for (auto& v : data) v = rng.normal() * std;
  Tensor t = Tensor::leaf(std::move(shape), std::move(data));
  index_[name] = items_.size();
  items_.emplace_back(name, t);
  return t;
}

Tensor ParamRegistry::add_const(const std::string& name, Shape shape,
                                double value) {
  if (index_.count(name))
    throw config_error("duplicate parameter name: " + name);
  Tensor t = Tensor::full(std::move(shape), value);
  t.set_requires_grad(true);
  index_[name] = items_.size();
  items_.emplace_back(name, t);
  return t;
}

Tensor ParamRegistry::find(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw config_error("unknown parameter: " + name);
  return items_[it->second].second;
}

void ParamRegistry::load_values(
    const std::vector<std::pair<std::string, Tensor>>& items) {
  if (items.size() != items_.size())
    throw config_error("weight count mismatch: file has " +
                       std::to_string(items.size()) + ", model expects " +
                       std::to_string(items_.size()));
  for (const auto& [name, t] : items) {
    auto it = index_.find(name);
    if (it == index_.end())
      throw config_error("weight file contains unknown parameter " + name);
    Tensor dst = items_[it->second].second;
    if (dst.shape() != t.shape())
      throw config_error("shape mismatch for " + name + ": file " +
                         shape_str(t.shape()) + ", model " +
                         shape_str(dst.shape()));
    dst.mutable_data() = t.data();
  }
}

std::int64_t ParamRegistry::total_params() const {
  std::int64_t n = 0;
  for (const auto& [name, t] : items_) n += t.numel();
  return n;
}

Conv2dLayer::Conv2dLayer(ParamRegistry& reg, const std::string& prefix,
                         int in_ch, int out_ch, int k, int stride, int pad,
                         Rng& rng, double bias_init)
    : stride(stride), pad(pad) {
  w = reg.add(prefix + ".w", {out_ch, in_ch, k, k}, rng,
              he_std(static_cast<std::int64_t>(in_ch) * k * k));
  b = reg.add_const(prefix + ".b", {out_ch}, bias_init);
}

Deconv2dLayer::Deconv2dLayer(ParamRegistry& reg, const std::string& prefix,
                             int in_ch, int out_ch, int k, int stride, int pad,
                             int opad, Rng& rng, double bias_init)
    : stride(stride), pad(pad), opad(opad) {
  w = reg.add(prefix + ".w", {in_ch, out_ch, k, k}, rng,
              he_std(static_cast<std::int64_t>(in_ch) * k * k /
                     (stride * static_cast<std::int64_t>(stride))));
  b = reg.add_const(prefix + ".b", {out_ch}, bias_init);
}

DepthwiseConv2dLayer::DepthwiseConv2dLayer(ParamRegistry& reg,
                                           const std::string& prefix, int ch,
                                           int k, Rng& rng)
    : pad(k / 2) {
  w = reg.add(prefix + ".w", {ch, 1, k, k}, rng,
              he_std(static_cast<std::int64_t>(k) * k));
}

LinearLayer::LinearLayer(ParamRegistry& reg, const std::string& prefix,
                         int in_f, int out_f, Rng& rng) {
  w = reg.add(prefix + ".w", {in_f, out_f}, rng, he_std(in_f));
  b = reg.add_const(prefix + ".b", {out_f}, 0.0);
}

Skm::Skm(ParamRegistry& reg, const std::string& prefix, int ch, Rng& rng)
    : channels(ch) {
  dw3 = DepthwiseConv2dLayer(reg, prefix + ".dw3", ch, 3, rng);
  dw5 = DepthwiseConv2dLayer(reg, prefix + ".dw5", ch, 5, rng);
  int hidden = std::max(ch / 4, 4);
  gate1 = LinearLayer(reg, prefix + ".gate1", ch, hidden, rng);
  gate2 = LinearLayer(reg, prefix + ".gate2", hidden, 2 * ch, rng);
  proj = Conv2dLayer(reg, prefix + ".proj", ch, ch, 1, 1, 0, rng);
}

Tensor Skm::forward(const Tensor& x) const { return forward(x, nullptr); }

Tensor Skm::forward(const Tensor& x, Tensor* gates_out) const {
  if (x.dim(1) != channels)
    throw config_error("skm: input has " + std::to_string(x.dim(1)) +
                       " channels, weights built for " +
                       std::to_string(channels));
  std::int64_t b = x.dim(0);
  Tensor b3 = dw3(x);
  Tensor b5 = dw5(x);
  Tensor pooled = global_avg_pool(add(b3, b5));  // [B,C]
  Tensor h = leaky_relu(gate1(pooled), kLeakySlope);
  Tensor logits = gate2(h);                                   // [B,2C]
  Tensor pair = permute(reshape(logits, {b, 2, channels}), {0, 2, 1});
  Tensor gates = softmax_lastdim(pair);                       // [B,C,2]
  if (gates_out) *gates_out = gates;
  Tensor g3 = reshape(narrow(gates, 2, 0, 1), {b, channels});
  Tensor g5 = reshape(narrow(gates, 2, 1, 1), {b, channels});
  Tensor fused = add(mul_channel_scalar(b3, g3), mul_channel_scalar(b5, g5));
  return proj(fused);
}

DepthRb::DepthRb(ParamRegistry& reg, const std::string& prefix, int ch,
                 Rng& rng) {
  expand = Conv2dLayer(reg, prefix + ".expand", ch, 2 * ch, 1, 1, 0, rng);
  dw = DepthwiseConv2dLayer(reg, prefix + ".dw", 2 * ch, 3, rng);
  reduce = Conv2dLayer(reg, prefix + ".reduce", 2 * ch, ch, 1, 1, 0, rng);
}

Tensor DepthRb::forward(const Tensor& x) const {
  Tensor h = leaky_relu(expand(x), kLeakySlope);
  h = leaky_relu(dw(h), kLeakySlope);
  return add(x, reduce(h));
}

FusionNet::FusionNet(ParamRegistry& reg, const std::string& prefix, int ch,
                     Rng& rng) {
  c1 = Conv2dLayer(reg, prefix + ".c1", 2 * ch, ch, 3, 1, 1, rng);
  c2 = Conv2dLayer(reg, prefix + ".c2", ch, ch, 3, 1, 1, rng);
}

Tensor FusionNet::forward(const Tensor& aligned, const Tensor& base) const {
  if (aligned.shape() != base.shape())
    throw shape_error("fusion net: aligned " + shape_str(aligned.shape()) +
                      " vs base " + shape_str(base.shape()));
  Tensor h = leaky_relu(c1(concat({aligned, base}, 1)), kLeakySlope);
  return add(c2(h), base);
}

CheckerboardMask CheckerboardMask::make(std::int64_t h, std::int64_t w) {
  if (h < 1 || w < 1) throw config_error("checkerboard: empty grid");
  CheckerboardMask m;
  m.h = h;
  m.w = w;
  m.is_anchor.resize(static_cast<size_t>(h * w));
  for (std::int64_t i = 0; i < h; ++i)
    for (std::int64_t j = 0; j < w; ++j)
      m.is_anchor[static_cast<size_t>(i * w + j)] = ((i + j) % 2 == 0) ? 1 : 0;
  return m;
}

std::int64_t CheckerboardMask::anchor_count() const {
  std::int64_t n = 0;
  for (auto v : is_anchor) n += v;
  return n;
}

std::int64_t CheckerboardMask::nonanchor_count() const {
  return h * w - anchor_count();
}

std::vector<std::int64_t> CheckerboardMask::anchor_positions() const {
  std::vector<std::int64_t> out;
  for (std::int64_t p = 0; p < h * w; ++p)
    if (is_anchor[static_cast<size_t>(p)]) out.push_back(p);
  return out;
}

std::vector<std::int64_t> CheckerboardMask::nonanchor_positions() const {
  std::vector<std::int64_t> out;
  for (std::int64_t p = 0; p < h * w; ++p)
    if (!is_anchor[static_cast<size_t>(p)]) out.push_back(p);
  return out;
}

Tensor CheckerboardMask::mask_tensor(std::int64_t b, std::int64_t c,
                                     bool inverted) const {
  Tensor t = Tensor::zeros({b, c, h, w});
  auto& d = t.mutable_data();
  std::int64_t plane = h * w;
  for (std::int64_t bc = 0; bc < b * c; ++bc)
    for (std::int64_t p = 0; p < plane; ++p) {
      bool on = is_anchor[static_cast<size_t>(p)] != 0;
      if (inverted) on = !on;
      d[static_cast<size_t>(bc * plane + p)] = on ? 1.0 : 0.0;
    }
  return t;
}

LocalContextAttention::LocalContextAttention(ParamRegistry& reg,
                                             const std::string& prefix,
                                             int feat_ch, int ctx_ch,
                                             int attn_ch, int out_ch,
                                             int window, Rng& rng)
    : window(window) {
  if (window % 2 == 0)
    throw config_error("local context attention: window must be odd, got " +
                       std::to_string(window));
  q = LinearLayer(reg, prefix + ".q", feat_ch, attn_ch, rng);
  k = LinearLayer(reg, prefix + ".k", ctx_ch, attn_ch, rng);
  v = LinearLayer(reg, prefix + ".v", ctx_ch, out_ch, rng);
}

Tensor LocalContextAttention::forward(const Tensor& anchor_ctx,
                                      const Tensor& feats,
                                      const CheckerboardMask& mask) const {
  if (window % 2 == 0) throw config_error("local context: even window");
  if (anchor_ctx.rank() != 4 || feats.rank() != 4)
    throw shape_error("local context: expected [B,C,H,W] inputs");
  std::int64_t b = anchor_ctx.dim(0);
  std::int64_t h = anchor_ctx.dim(2), w = anchor_ctx.dim(3);
  if (mask.h != h || mask.w != w)
    throw shape_error("local context: mask size mismatch");
  std::int64_t ctx_ch = anchor_ctx.dim(1);
  std::int64_t out_ch = v.w.dim(1);
  std::int64_t attn_ch = k.w.dim(1);

  auto nonanchor = mask.nonanchor_positions();
  std::int64_t nn = static_cast<std::int64_t>(nonanchor.size());
  if (nn == 0) return Tensor::zeros({b, out_ch, h, w});

  // select anchors (NaN-safe), flatten to [B*H*W, Cctx], append a zero row
  // that stands in for out-of-border window cells
  Tensor ctx_sel = where_mask(anchor_ctx, mask.mask_tensor(b, ctx_ch));
  Tensor rows = reshape(permute(ctx_sel, {0, 2, 3, 1}), {b * h * w, ctx_ch});
  Tensor rows0 = concat({rows, Tensor::zeros({1, ctx_ch})}, 0);
  Tensor keys = k(rows0);    // [B*H*W+1, attn]
  Tensor values = v(rows0);  // [B*H*W+1, out]

  Tensor feat_rows =
      reshape(permute(feats, {0, 2, 3, 1}), {b * h * w, feats.dim(1)});
  std::vector<std::int64_t> q_idx;
  q_idx.reserve(static_cast<size_t>(b * nn));
  for (std::int64_t bi = 0; bi < b; ++bi)
    for (auto p : nonanchor) q_idx.push_back(bi * h * w + p);
  Tensor queries = q(gather_rows(feat_rows, q_idx));  // [B*Nn, attn]

  // window cells with anchor parity, same offsets at every position
  int r = window / 2;
  std::vector<std::pair<int, int>> offsets;
  for (int di = -r; di <= r; ++di)
    for (int dj = -r; dj <= r; ++dj)
      if ((di + dj) % 2 != 0) offsets.emplace_back(di, dj);
  std::int64_t wn = static_cast<std::int64_t>(offsets.size());
  std::int64_t zero_row = b * h * w;

  std::vector<std::int64_t> win_idx;
  win_idx.reserve(static_cast<size_t>(b * nn * wn));
  for (std::int64_t bi = 0; bi < b; ++bi)
    for (auto p : nonanchor) {
      std::int64_t i = p / w, j = p % w;
      for (auto [di, dj] : offsets) {
        std::int64_t ii = i + di, jj = j + dj;
        bool inside = ii >= 0 && ii < h && jj >= 0 && jj < w;
        win_idx.push_back(inside ? bi * h * w + ii * w + jj : zero_row);
      }
    }

  Tensor kg = reshape(gather_rows(keys, win_idx), {b * nn, wn, attn_ch});
  Tensor vg = reshape(gather_rows(values, win_idx), {b * nn, wn, out_ch});
  Tensor qb = reshape(queries, {b * nn, 1, attn_ch});
  Tensor scores =
      scale(matmul(qb, transpose_last2(kg)), 1.0 / std::sqrt(static_cast<double>(attn_ch)));
  Tensor attn = softmax_lastdim(scores);            // [B*Nn, 1, Wn]
  Tensor ctx = reshape(matmul(attn, vg), {b * nn, out_ch});

  Tensor grid = scatter_rows(ctx, q_idx, b * h * w);
  return permute(reshape(grid, {b, h, w, out_ch}), {0, 3, 1, 2});
}

}  // namespace phydra
