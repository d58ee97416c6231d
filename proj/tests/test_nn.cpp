#include <cmath>
#include <vector>

#include "doctest.h"
#include "phydra/nn.hpp"
#include "testutil.hpp"

using namespace phydra;
using testutil::finite_difference_check;
using testutil::random_tensor;

namespace {

void zero_params(ParamRegistry& reg) {
  for (const auto& [name, t] : reg.items()) {
    Tensor handle = t;
    std::fill(handle.mutable_data().begin(), handle.mutable_data().end(), 0.0);
  }
}

// Brute-force oracle for the checkerboard windowed attention: explicit
// per-position loops over the anchor-parity window cells, zero features
// outside the border.
Tensor local_attention_oracle(const LocalContextAttention& lc,
                              const Tensor& anchor_ctx, const Tensor& feats,
                              const CheckerboardMask& mask) {
  std::int64_t b = anchor_ctx.dim(0), cc = anchor_ctx.dim(1);
  std::int64_t h = anchor_ctx.dim(2), w = anchor_ctx.dim(3);
  std::int64_t fc = feats.dim(1);
  std::int64_t ac = lc.k.w.dim(1), oc = lc.v.w.dim(1);
  int r = lc.window / 2;
  Tensor out = Tensor::zeros({b, oc, h, w});

  auto ctx_at = [&](std::int64_t bi, std::int64_t i, std::int64_t j,
                    std::int64_t c) -> double {
    if (i < 0 || i >= h || j < 0 || j >= w) return 0.0;
    if (!mask.is_anchor[static_cast<size_t>(i * w + j)]) return 0.0;
    return anchor_ctx.at({bi, c, i, j});
  };

  for (std::int64_t bi = 0; bi < b; ++bi)
    for (std::int64_t i = 0; i < h; ++i)
      for (std::int64_t j = 0; j < w; ++j) {
        if (mask.is_anchor[static_cast<size_t>(i * w + j)]) continue;
        // query projection
        std::vector<double> qv(static_cast<size_t>(ac));
        for (std::int64_t a = 0; a < ac; ++a) {
          double acc = lc.q.b.at({a});
          for (std::int64_t f = 0; f < fc; ++f)
            acc += feats.at({bi, f, i, j}) * lc.q.w.at({f, a});
          qv[static_cast<size_t>(a)] = acc;
        }
        // window cells with anchor parity
        std::vector<std::pair<std::int64_t, std::int64_t>> cells;
        for (int di = -r; di <= r; ++di)
          for (int dj = -r; dj <= r; ++dj)
            if ((di + dj) % 2 != 0) cells.emplace_back(i + di, j + dj);
        std::vector<double> scores(cells.size());
        std::vector<std::vector<double>> vals(cells.size());
        for (size_t ci = 0; ci < cells.size(); ++ci) {
          auto [ii, jj] = cells[ci];
          double s = 0.0;
          std::vector<double> kv(static_cast<size_t>(ac));
          vals[ci].resize(static_cast<size_t>(oc));
          for (std::int64_t a = 0; a < ac; ++a) {
            double acc = lc.k.b.at({a});
            for (std::int64_t c = 0; c < cc; ++c)
              acc += ctx_at(bi, ii, jj, c) * lc.k.w.at({c, a});
            kv[static_cast<size_t>(a)] = acc;
          }
          for (std::int64_t o = 0; o < oc; ++o) {
            double acc = lc.v.b.at({o});
            for (std::int64_t c = 0; c < cc; ++c)
              acc += ctx_at(bi, ii, jj, c) * lc.v.w.at({c, o});
            vals[ci][static_cast<size_t>(o)] = acc;
          }
          for (std::int64_t a = 0; a < ac; ++a)
            s += qv[static_cast<size_t>(a)] * kv[static_cast<size_t>(a)];
          scores[ci] = s / std::sqrt(static_cast<double>(ac));
        }
        double mx = scores[0];
        for (double s : scores) mx = std::max(mx, s);
        double z = 0.0;
        for (double& s : scores) {
          s = std::exp(s - mx);
          z += s;
        }
        for (std::int64_t o = 0; o < oc; ++o) {
          double acc = 0.0;
          for (size_t ci = 0; ci < cells.size(); ++ci)
            acc += scores[ci] / z * vals[ci][static_cast<size_t>(o)];
          out.mutable_data()[static_cast<size_t>(((bi * oc + o) * h + i) * w + j)] =
              acc;
        }
      }
  return out;
}

}  // namespace

TEST_SUITE("nn") {

TEST_CASE("skm preserves shape and rejects channel mismatch") {
  Rng rng(21);
  ParamRegistry reg;
  Skm skm(reg, "skm", 6, rng);
  Tensor x = random_tensor({2, 6, 5, 7}, rng);
  CHECK(skm.forward(x).shape() == x.shape());
  CHECK_THROWS_AS(skm.forward(random_tensor({1, 4, 5, 5}, rng)), config_error);
}

TEST_CASE("skm on zero input returns the projection bias map") {
  Rng rng(22);
  ParamRegistry reg;
  Skm skm(reg, "skm", 4, rng);
  // give the projection a recognizable bias
  for (std::int64_t c = 0; c < 4; ++c)
    skm.proj.b.mutable_data()[static_cast<size_t>(c)] = 0.25 * static_cast<double>(c + 1);
  Tensor y = skm.forward(Tensor::zeros({1, 4, 3, 3}));
  for (std::int64_t c = 0; c < 4; ++c)
    for (std::int64_t i = 0; i < 3; ++i)
      for (std::int64_t j = 0; j < 3; ++j)
        CHECK(y.at({0, c, i, j}) == doctest::Approx(0.25 * static_cast<double>(c + 1)).epsilon(1e-12));
}

TEST_CASE("skm branch gates sum to 1 per channel") {
  Rng rng(23);
  ParamRegistry reg;
  Skm skm(reg, "skm", 5, rng);
  Tensor gates;
  skm.forward(random_tensor({3, 5, 4, 4}, rng), &gates);
  REQUIRE(gates.shape() == Shape{3, 5, 2});
  for (std::int64_t b = 0; b < 3; ++b)
    for (std::int64_t c = 0; c < 5; ++c)
      CHECK(std::fabs(gates.at({b, c, 0}) + gates.at({b, c, 1}) - 1.0) < 1e-6);
}

TEST_CASE("depth_rb with zero weights is the identity") {
  Rng rng(24);
  ParamRegistry reg;
  DepthRb rb(reg, "rb", 3, rng);
  zero_params(reg);
  Tensor x = random_tensor({2, 3, 4, 5}, rng);
  CHECK(testutil::max_abs_diff(rb.forward(x), x) == 0.0);
}

TEST_CASE("depth_rb preserves arbitrary spatial sizes") {
  Rng rng(25);
  ParamRegistry reg;
  DepthRb rb(reg, "rb", 4, rng);
  for (auto [h, w] : std::vector<std::pair<int, int>>{{1, 1}, {2, 7}, {5, 3}}) {
    Tensor x = random_tensor({1, 4, h, w}, rng);
    CHECK(rb.forward(x).shape() == x.shape());
  }
}

TEST_CASE("depth_rb gradient check") {
  Rng rng(26);
  ParamRegistry reg;
  DepthRb rb(reg, "rb", 3, rng);
  Tensor x = random_tensor({1, 3, 3, 3}, rng, -1, 1, true);
  std::vector<Tensor> leaves = {x};
  for (auto& [n, t] : reg.items()) leaves.push_back(t);
  auto build = [&] {
    Tensor y = rb.forward(x);
    return mean(mul(y, y));
  };
  CHECK(finite_difference_check(build, leaves) < 1e-5);
}

TEST_CASE("fusion net residual identity with zero weights") {
  Rng rng(27);
  ParamRegistry reg;
  FusionNet f(reg, "f", 3, rng);
  zero_params(reg);
  Tensor base = random_tensor({1, 3, 4, 4}, rng);
  Tensor out = f.forward(Tensor::zeros({1, 3, 4, 4}), base);
  CHECK(testutil::max_abs_diff(out, base) == 0.0);
}

TEST_CASE("fusion net shape contract and mismatch error") {
  Rng rng(28);
  ParamRegistry reg;
  FusionNet f(reg, "f", 4, rng);
  Tensor base = random_tensor({2, 4, 3, 5}, rng);
  Tensor aligned = random_tensor({2, 4, 3, 5}, rng);
  CHECK(f.forward(aligned, base).shape() == base.shape());
  CHECK_THROWS_AS(f.forward(random_tensor({2, 4, 5, 3}, rng), base), shape_error);
}

TEST_CASE("fusion net gradient flows to both inputs") {
  Rng rng(29);
  ParamRegistry reg;
  FusionNet f(reg, "f", 2, rng);
  Tensor base = random_tensor({1, 2, 3, 3}, rng, -1, 1, true);
  Tensor aligned = random_tensor({1, 2, 3, 3}, rng, -1, 1, true);
  auto build = [&] {
    Tensor y = f.forward(aligned, base);
    return mean(mul(y, y));
  };
  CHECK(finite_difference_check(build, {base, aligned}) < 1e-5);
  double ga = 0.0, gb = 0.0;
  for (double g : aligned.grad()) ga += std::fabs(g);
  for (double g : base.grad()) gb += std::fabs(g);
  CHECK(ga > 0.0);
  CHECK(gb > 0.0);
}

TEST_CASE("checkerboard partition parity, 1x1 and counting cases") {
  auto m2 = CheckerboardMask::make(2, 2);
  CHECK(m2.anchor_positions() == std::vector<std::int64_t>{0, 3});
  CHECK(m2.nonanchor_positions() == std::vector<std::int64_t>{1, 2});

  auto m1 = CheckerboardMask::make(1, 1);
  CHECK(m1.anchor_count() == 1);
  CHECK(m1.nonanchor_count() == 0);

  auto m46 = CheckerboardMask::make(4, 6);
  CHECK(m46.anchor_count() == 12);
  CHECK(m46.nonanchor_count() == 12);
}

TEST_CASE("local attention rejects even windows") {
  Rng rng(30);
  ParamRegistry reg;
  CHECK_THROWS_AS(LocalContextAttention(reg, "lc", 3, 3, 4, 3, 4, rng),
                  config_error);
}

TEST_CASE("local attention with all-zero anchors gives the value bias response") {
  Rng rng(31);
  ParamRegistry reg;
  LocalContextAttention lc(reg, "lc", 3, 3, 4, 3, 5, rng);
  for (std::int64_t o = 0; o < 3; ++o)
    lc.v.b.mutable_data()[static_cast<size_t>(o)] = 0.5 + static_cast<double>(o);
  auto mask = CheckerboardMask::make(4, 4);
  Tensor out = lc.forward(Tensor::zeros({1, 3, 4, 4}),
                          random_tensor({1, 3, 4, 4}, rng), mask);
  for (std::int64_t i = 0; i < 4; ++i)
    for (std::int64_t j = 0; j < 4; ++j)
      for (std::int64_t o = 0; o < 3; ++o) {
        double expect = mask.is_anchor[static_cast<size_t>(i * 4 + j)]
                            ? 0.0
                            : 0.5 + static_cast<double>(o);
        CHECK(out.at({0, o, i, j}) == doctest::Approx(expect).epsilon(1e-9));
      }
}

TEST_CASE("local attention is zero at every anchor position") {
  Rng rng(32);
  ParamRegistry reg;
  LocalContextAttention lc(reg, "lc", 2, 2, 4, 2, 5, rng);
  auto mask = CheckerboardMask::make(5, 6);
  Tensor out = lc.forward(random_tensor({2, 2, 5, 6}, rng),
                          random_tensor({2, 2, 5, 6}, rng), mask);
  for (std::int64_t b = 0; b < 2; ++b)
    for (std::int64_t c = 0; c < 2; ++c)
      for (auto p : mask.anchor_positions())
        CHECK(out.at({b, c, p / 6, p % 6}) == 0.0);
}

TEST_CASE("local attention equals brute-force masked-window oracle") {
  Rng rng(33);
  ParamRegistry reg;
  LocalContextAttention lc(reg, "lc", 3, 3, 4, 3, 5, rng);
  auto mask = CheckerboardMask::make(4, 4);
  Tensor slice = random_tensor({1, 3, 4, 4}, rng);
  Tensor feats = random_tensor({1, 3, 4, 4}, rng);
  Tensor got = lc.forward(slice, feats, mask);
  Tensor want = local_attention_oracle(lc, slice, feats, mask);
  CHECK(testutil::max_rel_diff(got, want) < 1e-6);
}

TEST_CASE("local attention never reads non-anchor values") {
  Rng rng(34);
  ParamRegistry reg;
  LocalContextAttention lc(reg, "lc", 2, 2, 4, 2, 5, rng);
  auto mask = CheckerboardMask::make(4, 6);
  Tensor slice = random_tensor({1, 2, 4, 6}, rng);
  for (std::int64_t c = 0; c < 2; ++c)
    for (auto p : mask.nonanchor_positions())
      slice.mutable_data()[static_cast<size_t>((c * 4 + p / 6) * 6 + p % 6)] =
          std::nan("");
  Tensor out = lc.forward(slice, random_tensor({1, 2, 4, 6}, rng), mask);
  for (double v : out.data()) CHECK(std::isfinite(v));
}

TEST_CASE("local attention gradient check") {
  Rng rng(35);
  ParamRegistry reg;
  LocalContextAttention lc(reg, "lc", 2, 2, 3, 2, 3, rng);
  auto mask = CheckerboardMask::make(3, 4);
  Tensor slice = random_tensor({1, 2, 3, 4}, rng, -1, 1, true);
  Tensor feats = random_tensor({1, 2, 3, 4}, rng, -1, 1, true);
  std::vector<Tensor> leaves = {slice, feats};
  for (auto& [n, t] : reg.items()) leaves.push_back(t);
  auto build = [&] {
    Tensor y = lc.forward(slice, feats, mask);
    return mean(mul(y, y));
  };
  CHECK(finite_difference_check(build, leaves) < 1e-5);
}

TEST_CASE("registry load rejects bad names and shapes") {
  Rng rng(36);
  ParamRegistry reg;
  Conv2dLayer c(reg, "c", 2, 3, 3, 1, 1, rng);
  CHECK_THROWS_AS(reg.load_values({{"nope", Tensor::zeros({1})}}), config_error);
  CHECK_THROWS_AS(
      reg.load_values({{"c.w", Tensor::zeros({1})}, {"c.b", Tensor::zeros({3})}}),
      config_error);
}

}  // TEST_SUITE
