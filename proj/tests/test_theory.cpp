#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "rt/theory.hpp"
#include "test_util.hpp"

using namespace rt;
using namespace rt::testing;

namespace {

// Brute-force oracle: enumerate permutations of k elements and count cycles.
std::uint64_t stirling_by_enumeration(int k, int r) {
  std::vector<int> perm(static_cast<std::size_t>(k));
  std::iota(perm.begin(), perm.end(), 0);
  std::uint64_t count = 0;
  do {
    std::vector<bool> seen(static_cast<std::size_t>(k), false);
    int cycles = 0;
    for (int i = 0; i < k; ++i) {
      if (seen[static_cast<std::size_t>(i)]) continue;
      ++cycles;
      int j = i;
      while (!seen[static_cast<std::size_t>(j)]) {
        seen[static_cast<std::size_t>(j)] = true;
        j = perm[static_cast<std::size_t>(j)];
      }
    }
    if (cycles == r) ++count;
  } while (std::next_permutation(perm.begin(), perm.end()));
  return count;
}

NormFreeTransformerLayer random_tf_layer(index_t d, Rng& rng) {
  NormFreeTransformerLayer l;
  const double std = 1.0 / std::sqrt(static_cast<double>(d));
  l.q_proj = rng.normal_mat(d, d, std);
  l.k_proj = rng.normal_mat(d, d, std);
  l.v_proj = rng.normal_mat(d, d, std);
  l.mlp.w_in = rng.normal_mat(2 * d, d, std);
  l.mlp.b_in = rng.normal_vec(2 * d, 0.1);
  l.mlp.w_out = rng.normal_mat(d, 2 * d, std);
  l.mlp.b_out = rng.normal_vec(d, 0.1);
  return l;
}

double slice_dot(const Vec& a, const Vec& b, index_t off, index_t len) {
  double acc = 0.0;
  for (index_t i = 0; i < len; ++i)
    acc += a[static_cast<std::size_t>(off + i)] * b[static_cast<std::size_t>(off + i)];
  return acc;
}

}  // namespace

TEST_CASE("stirling numbers: single-cycle counts are factorials") {
  for (int k = 1; k <= 8; ++k)
    CHECK(stirling_first_kind(k, 1) == factorial_u64(k - 1));
}

TEST_CASE("stirling numbers: rows sum to k!") {
  for (int k = 1; k <= 10; ++k) {
    std::uint64_t sum = 0;
    for (int r = 0; r <= k; ++r) sum += stirling_first_kind(k, r);
    CHECK(sum == factorial_u64(k));
  }
}

TEST_CASE("stirling numbers match brute-force cycle enumeration") {
  CHECK(stirling_first_kind(3, 2) == 3);
  for (int k = 1; k <= 6; ++k)
    for (int r = 0; r <= k; ++r) CHECK(stirling_first_kind(k, r) == stirling_by_enumeration(k, r));
}

TEST_CASE("stirling numbers: contract errors") {
  CHECK_THROWS_AS(stirling_first_kind(5, 6), std::logic_error);
  CHECK_THROWS_AS(stirling_first_kind(21, 1), std::logic_error);
  CHECK_THROWS_AS(stirling_first_kind(-1, 0), std::logic_error);
}

TEST_CASE("closed-form Jacobian at k=2 is (aV + a^2 V^2)/2") {
  Rng rng(80);
  SimplifiedLayerCfg cfg{0.7, rng.normal_mat(3, 3), 8};
  const Mat j = stirling_jacobian(cfg, 2);
  const Mat v2 = matmul(cfg.v, cfg.v);
  for (index_t r = 0; r < 3; ++r)
    for (index_t c = 0; c < 3; ++c) {
      const double want = 0.5 * (cfg.alpha * cfg.v.at(r, c) +
                                 cfg.alpha * cfg.alpha * v2.at(r, c));
      CHECK(j.at(r, c) == doctest::Approx(want).epsilon(1e-12));
    }
}

TEST_CASE("closed-form Jacobian vanishes for V = 0 when k >= 2") {
  SimplifiedLayerCfg cfg{0.9, Mat(3, 3), 8};
  for (int k : {2, 5, 8}) {
    const Mat j = stirling_jacobian(cfg, k);
    for (double x : j.data) CHECK(x == 0.0);
  }
}

TEST_CASE("recurrence Jacobian at k=1 is I + aV") {
  Rng rng(81);
  SimplifiedLayerCfg cfg{0.4, rng.normal_mat(4, 4), 4};
  const Mat j = recurrence_jacobian(cfg, 1);
  for (index_t r = 0; r < 4; ++r)
    for (index_t c = 0; c < 4; ++c)
      CHECK(j.at(r, c) ==
            doctest::Approx((r == c ? 1.0 : 0.0) + cfg.alpha * cfg.v.at(r, c)).epsilon(1e-14));
}

TEST_CASE("recurrence Jacobian vanishes without coupling (alpha = 0) for k >= 2") {
  Rng rng(82);
  SimplifiedLayerCfg cfg{0.0, rng.normal_mat(3, 3), 6};
  for (int k : {2, 4, 6}) {
    const Mat j = recurrence_jacobian(cfg, k);
    for (double x : j.data) CHECK(x == 0.0);
  }
}

TEST_CASE("scalar case evaluates both routes to the same number") {
  Mat v(1, 1);
  v.at(0, 0) = 1.0;
  SimplifiedLayerCfg cfg{0.5, v, 4};
  const double want = (1.0 * 0.5 * 2 + 3 * 0.25 + 1 * 0.125) / 6.0;  // (1/6)(1.0+0.75+0.125)
  CHECK(stirling_jacobian(cfg, 3).at(0, 0) == doctest::Approx(want).epsilon(1e-14));
  CHECK(recurrence_jacobian(cfg, 3).at(0, 0) == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("closed form matches the exact recurrence Jacobian") {
  Rng rng(83);
  for (int rep = 0; rep < 20; ++rep) {
    const index_t d = rng.uniform_int(1, 4);
    SimplifiedLayerCfg cfg{rng.uniform(0.05, 0.95), rng.normal_mat(d, d), 8};
    for (int k = 2; k <= 8; ++k) {
      const Mat a = stirling_jacobian(cfg, k);
      const Mat b = recurrence_jacobian(cfg, k);
      for (std::size_t i = 0; i < a.data.size(); ++i)
        CHECK(std::abs(a.data[i] - b.data[i]) < 1e-10);
    }
  }
}

TEST_CASE("shortest-path term is exactly (alpha/k) V") {
  Rng rng(84);
  SimplifiedLayerCfg cfg{0.37, rng.normal_mat(3, 3), 12};
  for (int k = 2; k <= 12; ++k) {
    // Integer identities behind the coefficient.
    CHECK(stirling_first_kind(k, 1) == factorial_u64(k - 1));
    CHECK(static_cast<std::uint64_t>(k) * stirling_first_kind(k, 1) == factorial_u64(k));
    const Mat term = stirling_jacobian_term(cfg, k, 1);
    for (index_t r = 0; r < 3; ++r)
      for (index_t c = 0; c < 3; ++c)
        CHECK(term.at(r, c) ==
              doctest::Approx(cfg.alpha / k * cfg.v.at(r, c)).epsilon(1e-15));
  }
}

TEST_CASE("orthonormal V with alpha < 1: no gradient explosion") {
  Rng rng(85);
  const Mat v = random_orthonormal(4, rng);
  for (double alpha : {0.3, 0.9}) {
    SimplifiedLayerCfg cfg{alpha, v, 12};
    for (int k = 2; k <= 12; ++k) {
      double bound = 0.0;
      for (int r = 1; r <= k; ++r)
        bound += static_cast<double>(stirling_first_kind(k, r)) /
                 static_cast<double>(factorial_u64(k)) * std::pow(alpha, r);
      CHECK(bound <= 1.0 + 1e-12);
      const double norm = spectral_norm(stirling_jacobian(cfg, k));
      CHECK(norm <= bound + 1e-9);
      // Non-vanishing floor: the one-hop term is (alpha/k) V with singular
      // values alpha/k; the longer-path terms can interfere with at most
      // their combined operator norm.
      const double interference = bound - alpha / k;
      CHECK(norm >= alpha / k - interference - 1e-9);
      CHECK(norm > 0.0);
    }
  }
}

TEST_CASE("simulator: degenerate zero-parameter layer keeps the block bookkeeping") {
  NormFreeTransformerLayer tf;
  tf.q_proj = Mat(1, 1);
  tf.k_proj = Mat(1, 1);
  tf.v_proj = Mat(1, 1);
  tf.mlp.w_in = Mat(2, 1);
  tf.mlp.b_in = Vec(2, 0.0);
  tf.mlp.w_out = Mat(1, 2);
  tf.mlp.b_out = Vec(1, 0.0);
  const SimulatedStack sim = build_simulator({tf});
  Rng rng(86);
  const std::vector<Vec> xs = random_inputs(5, 1, rng);
  const LayerIO io = rt_forward_naive(sim.layers[0], embed_simulator_input(sim.blocks, xs));
  for (std::size_t i = 0; i < xs.size(); ++i) {
    CHECK(io.z[i][0] == xs[i][0]);  // carry
    CHECK(io.z[i][1] == xs[i][0]);  // live: x + a with a == 0
    CHECK(io.z[i][2] == 0.0);       // scratch
  }
}

TEST_CASE("simulator reproduces a stacked baseline exactly in the live block") {
  Rng rng(87);
  const index_t dp = 4, n = 8, layers = 3;
  for (int rep = 0; rep < 3; ++rep) {
    std::vector<NormFreeTransformerLayer> tf;
    for (index_t l = 0; l < layers; ++l) tf.push_back(random_tf_layer(dp, rng));
    const SimulatedStack sim = build_simulator(tf);
    const std::vector<Vec> xs = random_inputs(n, dp, rng);

    // Oracle: run the norm-free baseline stack at width d'.
    std::vector<std::vector<Vec>> tf_inputs{xs};
    std::vector<LayerIO> tf_ios;
    for (index_t l = 0; l < layers; ++l) {
      LayerIO io = transformer_forward_io(norm_free_layer_params(tf[static_cast<std::size_t>(l)]),
                                          tf_inputs.back());
      tf_inputs.push_back(io.z);
      tf_ios.push_back(std::move(io));
    }

    std::vector<Vec> wide = embed_simulator_input(sim.blocks, xs);
    std::vector<LayerIO> rt_ios;
    for (index_t l = 0; l < layers; ++l) {
      LayerIO io = rt_forward_naive(sim.layers[static_cast<std::size_t>(l)], wide);
      wide = io.z;
      rt_ios.push_back(std::move(io));
    }

    for (index_t l = 0; l < layers; ++l) {
      const std::size_t ls = static_cast<std::size_t>(l);
      const index_t read = sim.blocks.read_off(l);
      const index_t out = sim.blocks.out_off(l);
      const index_t scr = sim.blocks.scratch_off();
      for (index_t i = 0; i < n; ++i) {
        const std::size_t is = static_cast<std::size_t>(i);
        // Scratch returns to zero and the read block is preserved exactly.
        for (index_t c = 0; c < dp; ++c) {
          CHECK(rt_ios[ls].z[is][static_cast<std::size_t>(scr + c)] == 0.0);
          CHECK(rt_ios[ls].z[is][static_cast<std::size_t>(read + c)] ==
                rt_ios[ls].x[is][static_cast<std::size_t>(read + c)]);
        }
        // The out block tracks the baseline layer output.
        for (index_t c = 0; c < dp; ++c)
          CHECK(std::abs(rt_ios[ls].z[is][static_cast<std::size_t>(out + c)] -
                         tf_ios[ls].z[is][static_cast<std::size_t>(c)]) < 1e-12);

        // Attention logits: wide dot products equal the embedded d'-dots
        // exactly, and match the baseline oracle's logits.
        for (index_t j = 0; j <= i; ++j) {
          const std::size_t js = static_cast<std::size_t>(j);
          const Vec& wide_k =
              j == i ? matvec(sim.layers[ls].k_proj, rt_ios[ls].x[is])  // temporary pair
                     : rt_ios[ls].cache.keys[js];
          const double wide_logit = dot(wide_k, rt_ios[ls].q[is]);
          const double embedded =
              slice_dot(wide_k, rt_ios[ls].q[is], sim.blocks.carry_off(), dp);
          CHECK(wide_logit == embedded);
          const double oracle_logit =
              dot(tf_ios[ls].cache.keys[js], tf_ios[ls].q[is]);
          if (l < 2)
            CHECK(wide_logit == oracle_logit);
          else
            CHECK(std::abs(wide_logit - oracle_logit) < 1e-12);
        }
      }
    }

    // Final stacked output sits in the live block for an odd layer count.
    const LayerIO& last = rt_ios[static_cast<std::size_t>(layers - 1)];
    for (index_t i = 0; i < n; ++i)
      for (index_t c = 0; c < dp; ++c)
        CHECK(std::abs(last.z[static_cast<std::size_t>(i)]
                             [static_cast<std::size_t>(sim.blocks.live_off() + c)] -
                       tf_inputs.back()[static_cast<std::size_t>(i)][static_cast<std::size_t>(c)]) <
              1e-12);
  }
}

TEST_CASE("previous-token concentration approaches the explicit recurrence") {
  Rng rng(88);
  const index_t d = 8, n = 16;
  LayerParams p = random_layer(d, 1, rng);
  p.v_proj = Mat::identity(d);
  p.out_proj = Mat::identity(d);
  p.alpha_res = 1.0;
  const std::vector<Vec> xs = random_inputs(n, d, rng);
  const RnnEmulationReport rep = rnn_emulation_check(p, xs, {10.0, 25.0, 50.0});
  REQUIRE(rep.points.size() == 3);
  CAPTURE(rep.points[0].max_rel_err);
  CAPTURE(rep.points[1].max_rel_err);
  CAPTURE(rep.points[2].max_rel_err);
  CHECK(rep.monotone_decreasing);
  CHECK(rep.points[2].max_rel_err < 1e-3);

  // Without concentration the premise fails and the deviation is large.
  const RnnEmulationReport flat = rnn_emulation_check(p, xs, {0.0});
  CHECK(flat.points[0].max_rel_err > 0.05);
}
