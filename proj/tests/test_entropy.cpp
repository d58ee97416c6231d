#include <cmath>
#include <vector>

#include "doctest.h"
#include "phydra/entropy.hpp"
#include "phydra/mathfn.hpp"
#include "testutil.hpp"

using namespace phydra;
using testutil::finite_difference_check;
using testutil::random_tensor;

namespace {

ParaEmConfig small_cfg() {
  ParaEmConfig cfg;
  cfg.slices = 4;
  cfg.slice_channels = 6;
  cfg.window = 3;
  cfg.phi_h_channels = 8;
  cfg.ep_hidden = 10;
  return cfg;
}

}  // namespace

TEST_SUITE("entropy") {

TEST_CASE("channel context base cases") {
  Rng rng(91);
  ParamRegistry reg;
  auto cfg = small_cfg();
  ParaEm em(reg, "em", cfg, rng);

  // slice 1: no context
  Tensor phi1 = em.channel_context({}, 1, 1, 4, 4);
  CHECK(phi1.shape() == Shape{1, 6, 4, 4});
  for (double v : phi1.data()) CHECK(v == 0.0);

  // slice 2: empty side set, so the fusion net refines slice 1 alone
  Tensor s1 = random_tensor({1, 6, 4, 4}, rng);
  Tensor phi2 = em.channel_context({s1}, 2, 1, 4, 4);
  Tensor want = em.pccm.fusion.forward(Tensor::zeros(s1.shape()), s1);
  CHECK(testutil::max_abs_diff(phi2, want) == 0.0);

  CHECK_THROWS_AS(em.channel_context({s1}, 4, 1, 4, 4), contract_error);
}

TEST_CASE("channel context for slice 4 equals the manual composition") {
  Rng rng(92);
  ParamRegistry reg;
  auto cfg = small_cfg();
  ParaEm em(reg, "em", cfg, rng);
  std::vector<Tensor> slices = {random_tensor({1, 6, 4, 4}, rng),
                                random_tensor({1, 6, 4, 4}, rng),
                                random_tensor({1, 6, 4, 4}, rng)};
  Tensor got = em.channel_context(slices, 4, 1, 4, 4);

  // manual composition: opam per side, per-position softmax over stacked
  // consistencies, weighted sum, then the fusion net
  Tensor main = slices[2];
  std::vector<Tensor> aligned, cons;
  for (int k = 0; k < 2; ++k) {
    auto o = opam(main, slices[static_cast<size_t>(k)], em.pccm.opam);
    aligned.push_back(o.aligned.values);
    cons.push_back(o.consistency.values);
  }
  Tensor stacked = concat(cons, 1);
  Tensor wmap =
      permute(softmax_lastdim(permute(stacked, {0, 2, 3, 1})), {0, 3, 1, 2});
  Tensor fsum = add(mul_channel_map(aligned[0], narrow(wmap, 1, 0, 1)),
                    mul_channel_map(aligned[1], narrow(wmap, 1, 1, 1)));
  Tensor want = em.pccm.fusion.forward(fsum, main);
  CHECK(testutil::max_abs_diff(got, want) == 0.0);
}

TEST_CASE("global context attention with a single anchor returns its value projection") {
  Rng rng(93);
  ParamRegistry reg;
  auto cfg = small_cfg();
  ParaEm em(reg, "em", cfg, rng);
  auto mask = CheckerboardMask::make(1, 2);  // anchor (0,0), non-anchor (0,1)
  Tensor phi_ch = random_tensor({1, 6, 1, 2}, rng);
  Tensor slice = random_tensor({1, 6, 1, 2}, rng);
  Tensor got = em.global_context_attention(phi_ch, slice, mask);
  // value projection of the lone anchor
  for (std::int64_t c = 0; c < 6; ++c) {
    double want = em.pgcm.v.b.at({c});
    for (std::int64_t f = 0; f < 6; ++f)
      want += slice.at({0, f, 0, 0}) * em.pgcm.v.w.at({f, c});
    CHECK(got.at({0, c, 0, 1}) == doctest::Approx(want).epsilon(1e-9));
    CHECK(got.at({0, c, 0, 0}) == 0.0);
  }
}

TEST_CASE("global context is zero at all anchor positions") {
  Rng rng(94);
  ParamRegistry reg;
  auto cfg = small_cfg();
  ParaEm em(reg, "em", cfg, rng);
  auto mask = CheckerboardMask::make(4, 4);
  Tensor phi_gc = em.global_context(random_tensor({2, 6, 4, 4}, rng),
                                    random_tensor({2, 6, 4, 4}, rng), mask);
  for (std::int64_t b = 0; b < 2; ++b)
    for (std::int64_t c = 0; c < 6; ++c)
      for (auto p : mask.anchor_positions())
        CHECK(phi_gc.at({b, c, p / 4, p % 4}) == 0.0);
}

TEST_CASE("global context attention equals a brute-force gather-and-attend oracle") {
  Rng rng(95);
  ParamRegistry reg;
  auto cfg = small_cfg();
  ParaEm em(reg, "em", cfg, rng);
  auto mask = CheckerboardMask::make(4, 4);
  Tensor phi_ch = random_tensor({1, 6, 4, 4}, rng);
  Tensor slice = random_tensor({1, 6, 4, 4}, rng);
  Tensor got = em.global_context_attention(phi_ch, slice, mask);

  auto proj = [&](const LinearLayer& l, const Tensor& t, std::int64_t i,
                  std::int64_t j) {
    std::vector<double> out(6);
    for (std::int64_t o = 0; o < 6; ++o) {
      double acc = l.b.at({o});
      for (std::int64_t f = 0; f < 6; ++f) acc += t.at({0, f, i, j}) * l.w.at({f, o});
      out[static_cast<size_t>(o)] = acc;
    }
    return out;
  };
  auto anchors = mask.anchor_positions();
  for (auto p : mask.nonanchor_positions()) {
    auto q = proj(em.pgcm.q, phi_ch, p / 4, p % 4);
    std::vector<double> scores;
    std::vector<std::vector<double>> vals;
    for (auto a : anchors) {
      auto kk = proj(em.pgcm.k, phi_ch, a / 4, a % 4);
      auto vv = proj(em.pgcm.v, slice, a / 4, a % 4);
      double s = 0.0;
      for (int f = 0; f < 6; ++f) s += q[static_cast<size_t>(f)] * kk[static_cast<size_t>(f)];
      scores.push_back(s / std::sqrt(6.0));
      vals.push_back(vv);
    }
    double mx = scores[0];
    for (double s : scores) mx = std::max(mx, s);
    double z = 0.0;
    for (double& s : scores) {
      s = std::exp(s - mx);
      z += s;
    }
    for (std::int64_t c = 0; c < 6; ++c) {
      double want = 0.0;
      for (size_t a = 0; a < anchors.size(); ++a)
        want += scores[a] / z * vals[a][static_cast<size_t>(c)];
      CHECK(testutil::rel_err(got.at({0, c, p / 4, p % 4}), want, 1e-6) < 1e-6);
    }
  }
}

TEST_CASE("global context never reads non-anchor slice values") {
  Rng rng(96);
  ParamRegistry reg;
  auto cfg = small_cfg();
  ParaEm em(reg, "em", cfg, rng);
  auto mask = CheckerboardMask::make(4, 4);
  Tensor slice = random_tensor({1, 6, 4, 4}, rng);
  for (std::int64_t c = 0; c < 6; ++c)
    for (auto p : mask.nonanchor_positions())
      slice.mutable_data()[static_cast<size_t>((c * 4 + p / 4) * 4 + p % 4)] =
          std::nan("");
  Tensor out = em.global_context(random_tensor({1, 6, 4, 4}, rng), slice, mask);
  for (double v : out.data()) CHECK(std::isfinite(v));
}

TEST_CASE("entropy parameter head: sigma floor and zero-weight closed form") {
  Rng rng(97);
  ParamRegistry reg;
  EpNet ep(reg, "ep", 8, 6, 4, 0.11, rng);
  Tensor ctx = random_tensor({1, 8, 3, 3}, rng, -5, 5);
  auto p = ep.forward({ctx});
  for (double s : p.sigma.data()) CHECK(s >= 0.11);

  // zero weights, known biases
  for (const auto& [name, t] : reg.items()) {
    Tensor h = t;
    std::fill(h.mutable_data().begin(), h.mutable_data().end(), 0.0);
  }
  Tensor b2 = ep.c2.b;
  for (int c = 0; c < 4; ++c) b2.mutable_data()[static_cast<size_t>(c)] = 0.2 * c;
  for (int c = 4; c < 8; ++c) b2.mutable_data()[static_cast<size_t>(c)] = -0.3;
  auto pz = ep.forward({Tensor::zeros({1, 8, 2, 2})});
  for (int c = 0; c < 4; ++c)
    CHECK(pz.mu.at({0, c, 0, 0}) == doctest::Approx(0.2 * c).epsilon(1e-12));
  double want_sigma = std::log1p(std::exp(-0.3)) + 0.11;
  for (double s : pz.sigma.data())
    CHECK(s == doctest::Approx(want_sigma).epsilon(1e-12));
}

TEST_CASE("entropy parameter head rejects the wrong context set") {
  Rng rng(98);
  ParamRegistry reg;
  auto cfg = small_cfg();
  ParaEm em(reg, "em", cfg, rng);
  Tensor phi_ch = random_tensor({1, 6, 2, 2}, rng);
  Tensor phi_h = random_tensor({1, 8, 2, 2}, rng);
  Tensor phi_lc = random_tensor({1, 6, 2, 2}, rng);
  Tensor phi_gc = random_tensor({1, 6, 2, 2}, rng);
  CHECK_NOTHROW(em.anchor_params(phi_ch, phi_h));
  CHECK_NOTHROW(em.nonanchor_params(phi_ch, phi_h, phi_lc, phi_gc));
  // anchors must not receive the non-anchor context set and vice versa
  CHECK_THROWS_AS(em.ep_anchor.forward({phi_ch, phi_h, phi_lc, phi_gc}),
                  contract_error);
  CHECK_THROWS_AS(em.ep_nonanchor.forward({phi_ch, phi_h}), contract_error);
}

TEST_CASE("entropy parameter gradient check") {
  Rng rng(99);
  ParamRegistry reg;
  EpNet ep(reg, "ep", 5, 6, 3, 0.11, rng);
  Tensor ctx = random_tensor({1, 5, 2, 2}, rng, -1, 1, true);
  std::vector<Tensor> leaves = {ctx};
  for (auto& [n, t] : reg.items()) leaves.push_back(t);
  auto build = [&] {
    auto p = ep.forward({ctx});
    return add(mean(mul(p.mu, p.mu)), mean(p.sigma));
  };
  CHECK(finite_difference_check(build, leaves) < 1e-5);
}

TEST_CASE("rate formula closed forms") {
  // central bucket of a unit Gaussian
  double p0 = gaussian_pmf_folded(0, 1.0, 64);
  CHECK(p0 == doctest::Approx(0.3829249225480262).epsilon(1e-10));
  CHECK(-std::log2(p0) == doctest::Approx(1.385).epsilon(1e-3));

  // p at the mean dominates its neighbors
  CHECK(gaussian_pmf_folded(0, 0.7, 64) >= gaussian_pmf_folded(1, 0.7, 64));
  CHECK(gaussian_pmf_folded(0, 0.7, 64) >= gaussian_pmf_folded(-1, 0.7, 64));

  double bits = symbol_rate_bits({0}, {1.0}, 64, 0.11);
  CHECK(bits == doctest::Approx(1.385).epsilon(1e-3));
  CHECK_THROWS_AS(symbol_rate_bits({0}, {0.05}, 64, 0.11), contract_error);
}

TEST_CASE("training rate estimate matches the symbol estimate on integers") {
  Rng rng(100);
  GaussianParams p;
  p.mu = Tensor::zeros({1, 1, 2, 2});
  p.sigma = Tensor::from_data({1, 1, 2, 2}, {1.0, 0.8, 1.3, 2.0});
  Tensor vals = Tensor::from_data({1, 1, 2, 2}, {0.0, 1.0, -2.0, 3.0});
  Tensor mask = Tensor::full({1, 1, 2, 2}, 1.0);
  double train_bits = slice_rate_bits_train(vals, p, mask, 0.11).item();
  double sym_bits = symbol_rate_bits({0, 1, -2, 3}, {1.0, 0.8, 1.3, 2.0}, 64, 0.11);
  CHECK(train_bits == doctest::Approx(sym_bits).epsilon(1e-9));

  GaussianParams bad;
  bad.mu = Tensor::zeros({1});
  bad.sigma = Tensor::from_data({1}, {0.01});
  CHECK_THROWS_AS(
      slice_rate_bits_train(Tensor::zeros({1}), bad, Tensor::full({1}, 1.0), 0.11),
      contract_error);
}

TEST_CASE("rate gradient flows to mu, sigma and values") {
  Rng rng(101);
  Tensor mu = random_tensor({1, 1, 2, 2}, rng, -0.5, 0.5, true);
  Tensor raw = random_tensor({1, 1, 2, 2}, rng, -0.5, 0.5, true);
  Tensor vals = random_tensor({1, 1, 2, 2}, rng, -2, 2, true);
  Tensor mask = Tensor::from_data({1, 1, 2, 2}, {1, 0, 1, 1});
  auto build = [&] {
    GaussianParams p{mu, add_scalar(softplus(raw), 0.11)};
    return slice_rate_bits_train(vals, p, mask, 0.11);
  };
  CHECK(finite_difference_check(build, {mu, raw, vals}) < 1e-5);
}

}  // TEST_SUITE
