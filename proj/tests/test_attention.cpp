#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "rt/attention.hpp"
#include "rt/rng.hpp"

using namespace rt;

namespace {

struct KvSet {
  std::vector<Vec> keys, values;
  std::vector<index_t> pos;
};

KvSet random_kvs(index_t n, index_t d, Rng& rng) {
  KvSet s;
  for (index_t i = 0; i < n; ++i) {
    s.keys.push_back(rng.normal_vec(d));
    s.values.push_back(rng.normal_vec(d));
    s.pos.push_back(i);
  }
  return s;
}

}  // namespace

TEST_CASE("single pair returns its value exactly") {
  Rng rng(1);
  const KvSet s = random_kvs(1, 5, rng);
  const Vec q = rng.normal_vec(5);
  const Vec out = attn_reference(s.keys, s.values, q, {}, 3, s.pos);
  CHECK(out == s.values[0]);
}

TEST_CASE("identical keys give the arithmetic mean of values") {
  Rng rng(2);
  const index_t n = 6, d = 4;
  KvSet s;
  const Vec k = rng.normal_vec(d);
  for (index_t i = 0; i < n; ++i) {
    s.keys.push_back(k);
    s.values.push_back(rng.normal_vec(d));
    s.pos.push_back(i);
  }
  const Vec q = rng.normal_vec(d);
  const Vec out = attn_reference(s.keys, s.values, q, {}, n, s.pos);
  for (index_t c = 0; c < d; ++c) {
    double mean = 0.0;
    for (index_t i = 0; i < n; ++i) mean += s.values[static_cast<std::size_t>(i)][static_cast<std::size_t>(c)];
    mean /= static_cast<double>(n);
    CHECK(out[static_cast<std::size_t>(c)] == doctest::Approx(mean).epsilon(1e-12));
  }
}

TEST_CASE("two pairs with logits (t, 0) reduce to a scalar sigmoid blend") {
  // keys e1*t and 0 against q = e1: logits are (t, 0); values are basis vectors.
  const double t = 3.0;
  KvSet s;
  s.keys = {Vec{t, 0.0}, Vec{0.0, 0.0}};
  s.values = {Vec{1.0, 0.0}, Vec{0.0, 1.0}};
  s.pos = {0, 1};
  const Vec q{1.0, 0.0};
  const Vec out = attn_reference(s.keys, s.values, q, {}, 2, s.pos);
  const double sig = 1.0 / (1.0 + std::exp(-t));
  CHECK(out[0] == doctest::Approx(sig).epsilon(1e-12));
  CHECK(out[1] == doctest::Approx(1.0 - sig).epsilon(1e-12));
}

TEST_CASE("empty kv list is a contract violation") {
  std::vector<Vec> none;
  std::vector<index_t> nopos;
  CHECK_THROWS_AS(attn_reference(none, none, Vec{1.0}, {}, 0, nopos), std::logic_error);
}

TEST_CASE("dimension mismatch is a shape error") {
  std::vector<Vec> keys{Vec{1.0, 2.0}};
  std::vector<Vec> values{Vec{1.0, 2.0}};
  std::vector<index_t> pos{0};
  CHECK_THROWS_AS(attn_reference(keys, values, Vec{1.0, 2.0, 3.0}, {}, 1, pos),
                  std::invalid_argument);
}

TEST_CASE("accumulator: one tile then finalize equals the reference") {
  Rng rng(7);
  const KvSet s = random_kvs(5, 6, rng);
  const Vec q = rng.normal_vec(6);
  SoftmaxAccumulator acc(6);
  acc = acc_update_tile(acc, q, s.keys, s.values, {}, 8, s.pos);
  const Vec got = acc_finalize(acc);
  const Vec want = attn_reference(s.keys, s.values, q, {}, 8, s.pos);
  CHECK(max_abs_diff(got, want) < 1e-12);
}

TEST_CASE("accumulator: split A then B equals concatenated tile") {
  Rng rng(8);
  for (int rep = 0; rep < 20; ++rep) {
    const KvSet s = random_kvs(8, 4, rng);
    const Vec q = rng.normal_vec(4);
    const std::size_t cut = static_cast<std::size_t>(rng.uniform_int(1, 7));

    SoftmaxAccumulator split(4);
    acc_absorb_tile(split, q, std::span<const Vec>(s.keys.data(), cut),
                    std::span<const Vec>(s.values.data(), cut), {}, 9,
                    std::span<const index_t>(s.pos.data(), cut));
    acc_absorb_tile(split, q, std::span<const Vec>(s.keys.data() + cut, 8 - cut),
                    std::span<const Vec>(s.values.data() + cut, 8 - cut), {}, 9,
                    std::span<const index_t>(s.pos.data() + cut, 8 - cut));

    const Vec want = attn_reference(s.keys, s.values, q, {}, 9, s.pos);
    CHECK(max_abs_diff(acc_finalize(split), want) < 1e-12);
  }
}

TEST_CASE("absorbing a lower-max tile leaves the running max unchanged") {
  Rng rng(9);
  const KvSet s = random_kvs(4, 3, rng);
  const Vec q = rng.normal_vec(3);
  SoftmaxAccumulator acc(3);
  acc_absorb_tile(acc, q, s.keys, s.values, {}, 5, s.pos);
  const double m_before = acc.m;

  // A tile whose single logit sits far below the current max.
  Vec weak_key(3, 0.0);
  for (std::size_t i = 0; i < 3; ++i) weak_key[i] = -10.0 * q[i];
  std::vector<Vec> keys{weak_key}, values{rng.normal_vec(3)};
  std::vector<index_t> pos{7};
  acc_absorb_tile(acc, q, keys, values, {}, 5, pos);
  CHECK(acc.m == m_before);
}

TEST_CASE("finalize of identical pairs returns the value") {
  Rng rng(10);
  const Vec k = rng.normal_vec(4);
  const Vec v = rng.normal_vec(4);
  const Vec q = rng.normal_vec(4);
  SoftmaxAccumulator acc(4);
  std::vector<Vec> keys(6, k), values(6, v);
  std::vector<index_t> pos{0, 1, 2, 3, 4, 5};
  acc_absorb_tile(acc, q, keys, values, {}, 6, pos);
  CHECK(max_abs_diff(acc_finalize(acc), v) < 1e-12);
}

TEST_CASE("finalize without updates is an error") {
  SoftmaxAccumulator acc(3);
  CHECK_THROWS_AS(acc_finalize(acc), std::logic_error);
}

TEST_CASE("random 16-pair accumulation matches the reference") {
  Rng rng(11);
  const KvSet s = random_kvs(16, 8, rng);
  const Vec q = rng.normal_vec(8);
  SoftmaxAccumulator acc(8);
  acc_absorb_tile(acc, q, s.keys, s.values, {}, 16, s.pos);
  CHECK(max_abs_diff(acc_finalize(acc), attn_reference(s.keys, s.values, q, {}, 16, s.pos)) <
        1e-12);
}

TEST_CASE("property: any tile partition and order matches the reference") {
  Rng rng(12);
  for (int rep = 0; rep < 40; ++rep) {
    const index_t n = rng.uniform_int(1, 64);
    const index_t d = rng.uniform_int(1, 8);
    const KvSet s = random_kvs(n, d, rng);
    const Vec q = rng.normal_vec(d);
    BiasSpec bias;
    if (rep % 3 == 1) bias = BiasSpec{BiasKind::alibi, 0.5, 0.0, 8.0};
    if (rep % 3 == 2) bias = BiasSpec{BiasKind::prev_token, 1.0, 4.0, 8.0};

    // Random partition into tiles, absorbed in shuffled order.
    std::vector<std::pair<std::size_t, std::size_t>> tiles;
    std::size_t at = 0;
    while (at < static_cast<std::size_t>(n)) {
      const std::size_t len = static_cast<std::size_t>(
          rng.uniform_int(1, std::max<index_t>(1, n - static_cast<index_t>(at))));
      tiles.push_back({at, len});
      at += len;
    }
    for (std::size_t i = tiles.size(); i > 1; --i)
      std::swap(tiles[i - 1], tiles[static_cast<std::size_t>(rng.uniform_int(0, static_cast<index_t>(i) - 1))]);

    SoftmaxAccumulator acc(d);
    for (const auto& [off, len] : tiles)
      acc_absorb_tile(acc, q, std::span<const Vec>(s.keys.data() + off, len),
                      std::span<const Vec>(s.values.data() + off, len), bias, n,
                      std::span<const index_t>(s.pos.data() + off, len));
    const Vec want = attn_reference(s.keys, s.values, q, bias, n, s.pos);
    CHECK(max_abs_diff(acc_finalize(acc), want) < 1e-12);
  }
}

TEST_CASE("property: output is a convex combination of values") {
  Rng rng(13);
  for (int rep = 0; rep < 20; ++rep) {
    const index_t n = rng.uniform_int(1, 20);
    const index_t d = rng.uniform_int(1, 6);
    const KvSet s = random_kvs(n, d, rng);
    const Vec q = rng.normal_vec(d);
    const Vec out = attn_reference(s.keys, s.values, q, {}, n, s.pos);
    for (index_t c = 0; c < d; ++c) {
      double lo = s.values[0][static_cast<std::size_t>(c)];
      double hi = lo;
      for (index_t i = 1; i < n; ++i) {
        lo = std::min(lo, s.values[static_cast<std::size_t>(i)][static_cast<std::size_t>(c)]);
        hi = std::max(hi, s.values[static_cast<std::size_t>(i)][static_cast<std::size_t>(c)]);
      }
      CHECK(out[static_cast<std::size_t>(c)] >= lo - 1e-12);
      CHECK(out[static_cast<std::size_t>(c)] <= hi + 1e-12);
    }
  }
}

TEST_CASE("property: shifting every logit by a constant leaves the output unchanged") {
  Rng rng(14);
  for (int rep = 0; rep < 10; ++rep) {
    const index_t n = rng.uniform_int(2, 12);
    const index_t d = rng.uniform_int(2, 6);
    KvSet s = random_kvs(n, d, rng);
    const Vec q = rng.normal_vec(d);
    const Vec base = attn_reference(s.keys, s.values, q, {}, n, s.pos);

    // Shift keys along q so every logit moves by the same constant.
    const double c = rng.uniform(-5.0, 5.0);
    const double qq = dot(q, q);
    KvSet shifted = s;
    for (Vec& k : shifted.keys)
      for (std::size_t i = 0; i < k.size(); ++i) k[i] += c * q[i] / qq;
    const Vec out = attn_reference(shifted.keys, shifted.values, q, {}, n, shifted.pos);
    CHECK(max_abs_diff(base, out) < 1e-12);
  }
}

TEST_CASE("alibi bias clamps at max_bias and prev_token hits only the predecessor") {
  const BiasSpec alibi{BiasKind::alibi, 1.0, 0.0, 8.0};
  CHECK(bias_value(alibi, 5, 4) == doctest::Approx(-1.0));
  CHECK(bias_value(alibi, 100, 0) == doctest::Approx(-8.0));
  CHECK(bias_value(alibi, 3, 3) == doctest::Approx(0.0));

  const BiasSpec prev{BiasKind::prev_token, 1.0, 7.5, 8.0};
  CHECK(bias_value(prev, 5, 4) == doctest::Approx(7.5));
  CHECK(bias_value(prev, 5, 3) == doctest::Approx(0.0));
  CHECK(bias_value(prev, 5, 5) == doctest::Approx(0.0));

  // Geometric head slopes.
  CHECK(alibi_head_slope(0, 2) == doctest::Approx(std::pow(2.0, -4.0)));
  CHECK(alibi_head_slope(1, 2) == doctest::Approx(std::pow(2.0, -8.0)));
}
