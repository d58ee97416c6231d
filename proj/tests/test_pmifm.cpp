#include <cmath>
#include <vector>

#include "doctest.h"
#include "phydra/pmifm.hpp"
#include "testutil.hpp"

using namespace phydra;
using testutil::finite_difference_check;
using testutil::random_tensor;

TEST_SUITE("pmifm") {

TEST_CASE("single side source gets weight one and its aligned feature") {
  Rng rng(61);
  ParamRegistry reg;
  PmifmWeights weights = PmifmWeights::with_stub_opam(reg, "p", 3, rng);
  Tensor main = random_tensor({1, 3, 4, 4}, rng);
  Tensor side = random_tensor({1, 3, 4, 4}, rng);
  auto r = pmifm_full(main, {side}, weights);
  for (double v : r.fusion_weights.data()) CHECK(v == 1.0);
  Tensor aligned = opam(main, side, weights.opam).aligned.values;
  CHECK(testutil::max_abs_diff(r.weighted_sum, aligned) == 0.0);
}

TEST_CASE("empty side set fuses a zero reference") {
  Rng rng(62);
  ParamRegistry reg;
  PmifmWeights weights(reg, "p", 2, rng);
  Tensor main = random_tensor({1, 2, 3, 3}, rng);
  auto r = pmifm_full(main, {}, weights);
  CHECK(r.consistencies.empty());
  for (double v : r.weighted_sum.data()) CHECK(v == 0.0);
  Tensor expect = weights.fusion.forward(Tensor::zeros(main.shape()), main);
  CHECK(testutil::max_abs_diff(r.fused, expect) == 0.0);
}

TEST_CASE("pmifm with one side source is opam followed by the fusion net") {
  Rng rng(63);
  ParamRegistry reg;
  PmifmWeights weights(reg, "p", 3, rng);
  Tensor main = random_tensor({1, 3, 4, 4}, rng);
  Tensor side = random_tensor({1, 3, 4, 4}, rng);
  Tensor got = pmifm(main, {side}, weights);
  Tensor aligned = opam(main, side, weights.opam).aligned.values;
  Tensor want = weights.fusion.forward(aligned, main);
  CHECK(testutil::max_abs_diff(got, want) == 0.0);
}

TEST_CASE("fusion weights sum to one per position") {
  Rng rng(64);
  ParamRegistry reg;
  PmifmWeights weights(reg, "p", 2, rng);
  Tensor main = random_tensor({2, 2, 3, 5}, rng);
  std::vector<Tensor> sides = {random_tensor({2, 2, 3, 5}, rng),
                               random_tensor({2, 2, 3, 5}, rng),
                               random_tensor({2, 2, 3, 5}, rng)};
  auto r = pmifm_full(main, sides, weights);
  REQUIRE(r.fusion_weights.shape() == Shape{2, 3, 3, 5});
  for (std::int64_t b = 0; b < 2; ++b)
    for (std::int64_t i = 0; i < 3; ++i)
      for (std::int64_t j = 0; j < 5; ++j) {
        double s = 0.0;
        for (std::int64_t k = 0; k < 3; ++k) s += r.fusion_weights.at({b, k, i, j});
        CHECK(std::fabs(s - 1.0) < 1e-6);
      }
}

TEST_CASE("side-source permutation changes the output only by reassociation") {
  Rng rng(65);
  ParamRegistry reg;
  PmifmWeights weights(reg, "p", 3, rng);
  Tensor main = random_tensor({1, 3, 4, 4}, rng);
  std::vector<Tensor> sides = {random_tensor({1, 3, 4, 4}, rng),
                               random_tensor({1, 3, 4, 4}, rng),
                               random_tensor({1, 3, 4, 4}, rng)};
  Tensor a = pmifm(main, sides, weights);
  Tensor b = pmifm(main, {sides[2], sides[0], sides[1]}, weights);
  CHECK(testutil::max_abs_diff(a, b) <= 1e-6);
}

TEST_CASE("copy of the main source outweighs a noise source") {
  Rng rng(66);
  ParamRegistry reg;
  PmifmWeights weights = PmifmWeights::with_stub_opam(reg, "p", 3, rng);
  // smooth main source, one exact copy, one pure-noise side
  Tensor main = Tensor::zeros({1, 3, 6, 6});
  for (std::int64_t c = 0; c < 3; ++c)
    for (std::int64_t i = 0; i < 6; ++i)
      for (std::int64_t j = 0; j < 6; ++j)
        main.mutable_data()[static_cast<size_t>((c * 6 + i) * 6 + j)] =
            std::sin(0.9 * static_cast<double>(i) + 0.31 * static_cast<double>(c)) +
            std::cos(1.1 * static_cast<double>(j));
  Tensor copy = Tensor::from_data(main.shape(), main.data());
  Tensor noise = random_tensor({1, 3, 6, 6}, rng, -2.0, 2.0);
  auto r = pmifm_full(main, {copy, noise}, weights);
  double mean_copy = 0.0, mean_noise = 0.0;
  for (std::int64_t i = 0; i < 6; ++i)
    for (std::int64_t j = 0; j < 6; ++j) {
      mean_copy += r.fusion_weights.at({0, 0, i, j});
      mean_noise += r.fusion_weights.at({0, 1, i, j});
    }
  CHECK(mean_copy > mean_noise);

  // monotone relevance: replacing the noise source with another copy of the
  // main source never decreases that slot's mean weight
  auto r2 = pmifm_full(main, {copy, Tensor::from_data(main.shape(), main.data())},
                       weights);
  double mean_slot1 = 0.0;
  for (std::int64_t i = 0; i < 6; ++i)
    for (std::int64_t j = 0; j < 6; ++j) mean_slot1 += r2.fusion_weights.at({0, 1, i, j});
  CHECK(mean_slot1 >= mean_noise);
}

TEST_CASE("occluded block has lower consistency than its surroundings") {
  // Position-distinctive multi-frequency texture: matching is well posed, so
  // the clean surroundings cycle back sharply while the noise block cannot.
  Rng rng(5000);
  ParamRegistry reg;
  PmifmWeights weights = PmifmWeights::with_stub_opam(reg, "p", 3, rng);
  Tensor main = Tensor::zeros({1, 3, 8, 8});
  for (std::int64_t c = 0; c < 3; ++c)
    for (int k = 0; k < 4; ++k) {
      double w1 = rng.uniform(0.4, 2.6), w2 = rng.uniform(0.4, 2.6);
      double ph = rng.uniform(0.0, 6.28), a = 2.0 * rng.uniform(0.4, 1.0);
      for (std::int64_t i = 0; i < 8; ++i)
        for (std::int64_t j = 0; j < 8; ++j)
          main.mutable_data()[static_cast<size_t>((c * 8 + i) * 8 + j)] +=
              a * std::sin(w1 * static_cast<double>(i) + w2 * static_cast<double>(j) + ph);
    }
  Tensor side = Tensor::from_data(main.shape(), main.data());
  // noise-occlude a 3x3 block of the side view
  for (std::int64_t c = 0; c < 3; ++c)
    for (std::int64_t i = 2; i < 5; ++i)
      for (std::int64_t j = 2; j < 5; ++j)
        side.mutable_data()[static_cast<size_t>((c * 8 + i) * 8 + j)] =
            rng.uniform(-1.2, 1.2);
  auto maps = pmifm_consistency_probe(main, {side}, weights);
  REQUIRE(maps.size() == 1);
  double inside = 0.0, outside = 0.0;
  int n_in = 0, n_out = 0;
  for (std::int64_t i = 0; i < 8; ++i)
    for (std::int64_t j = 0; j < 8; ++j) {
      double v = maps[0].at({0, 0, i, j});
      CHECK(v > 0.0);
      CHECK(v <= 1.0 + 1e-9);
      if (i >= 2 && i < 5 && j >= 2 && j < 5) {
        inside += v;
        ++n_in;
      } else {
        outside += v;
        ++n_out;
      }
    }
  CHECK(inside / n_in < outside / n_out);
}

TEST_CASE("probe returns one near-uniform map per identical side source") {
  Rng rng(68);
  ParamRegistry reg;
  PmifmWeights weights = PmifmWeights::with_stub_opam(reg, "p", 2, rng);
  Tensor main = scale(random_tensor({1, 2, 4, 4}, rng), 3.0);
  std::vector<Tensor> sides = {Tensor::from_data(main.shape(), main.data()),
                               Tensor::from_data(main.shape(), main.data())};
  auto maps = pmifm_consistency_probe(main, sides, weights);
  CHECK(maps.size() == 2);
  for (const auto& m : maps)
    for (double v : m.data()) {
      CHECK(v > 0.0);
      CHECK(v <= 1.0 + 1e-9);
    }
}

TEST_CASE("shape mismatch in any side source is rejected") {
  Rng rng(69);
  ParamRegistry reg;
  PmifmWeights weights(reg, "p", 2, rng);
  Tensor main = random_tensor({1, 2, 4, 4}, rng);
  CHECK_THROWS_AS(pmifm(main, {random_tensor({1, 2, 4, 5}, rng)}, weights),
                  shape_error);
}

TEST_CASE("pmifm gradient check through attention, softmax fusion and F") {
  Rng rng(70);
  ParamRegistry reg;
  PmifmWeights weights(reg, "p", 2, rng);
  Tensor main = random_tensor({1, 2, 3, 3}, rng, -1, 1, true);
  Tensor s1 = random_tensor({1, 2, 3, 3}, rng, -1, 1, true);
  Tensor s2 = random_tensor({1, 2, 3, 3}, rng, -1, 1, true);
  std::vector<Tensor> leaves = {main, s1, s2};
  for (auto& [n, t] : reg.items()) leaves.push_back(t);
  auto build = [&] {
    Tensor y = pmifm(main, {s1, s2}, weights);
    return mean(mul(y, y));
  };
  CHECK(finite_difference_check(build, leaves) < 1e-5);
}

}  // TEST_SUITE
