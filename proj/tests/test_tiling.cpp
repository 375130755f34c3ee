#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "rt/tiling.hpp"
#include "test_util.hpp"

using namespace rt;
using namespace rt::testing;

TEST_CASE("tile size is the largest power of two dividing t") {
  CHECK(tile_size(6) == 2);
  CHECK(tile_size(7) == 1);
  CHECK(tile_size(8) == 8);
  CHECK(tile_size(12) == 4);
  CHECK_THROWS_AS(tile_size(0), std::logic_error);
}

TEST_CASE("step 6 serves queries 7..8 with keys 5..6") {
  const Schedule s = build_schedule(16);
  bool found = false;
  for (const TileEvent& ev : s.events)
    if (ev.kind == TileKind::persistent_tile && ev.s == 5 && ev.e == 6) {
      CHECK(ev.u == 7);
      CHECK(ev.v == 8);
      found = true;
    }
  CHECK(found);
}

TEST_CASE("schedule for n=1 is a single temp_self event") {
  const Schedule s = build_schedule(1);
  REQUIRE(s.events.size() == 1);
  CHECK(s.events[0].kind == TileKind::temp_self);
  CHECK(s.events[0].u == 1);
}

TEST_CASE("schedule for n=4 enumerated by hand") {
  const Schedule s = build_schedule(4);
  // temp(1), kv1 -> q2, temp(2), kv1..2 -> q3..4, temp(3), kv3 -> q4, temp(4)
  REQUIRE(s.events.size() == 7);
  CHECK(s.events[0].kind == TileKind::temp_self);
  CHECK(s.events[1].kind == TileKind::persistent_tile);
  CHECK(s.events[1].s == 1);
  CHECK(s.events[1].e == 1);
  CHECK(s.events[1].u == 2);
  CHECK(s.events[1].v == 2);
  CHECK(s.events[3].s == 1);
  CHECK(s.events[3].e == 2);
  CHECK(s.events[3].u == 3);
  CHECK(s.events[3].v == 4);
  CHECK(s.events[5].s == 3);
  CHECK(s.events[5].e == 3);
  CHECK(s.events[5].u == 4);
  CHECK(s.events[5].v == 4);
  CHECK(s.events[6].kind == TileKind::temp_self);
  CHECK(s.events[6].u == 4);
}

TEST_CASE("canonical schedules validate over a range of lengths") {
  for (index_t n = 1; n <= 128; ++n) {
    const ScheduleReport rep = validate_schedule(build_schedule(n));
    CAPTURE(n);
    CAPTURE(rep.message);
    CHECK(rep.ok);
  }
  CHECK(validate_schedule(build_schedule(512)).ok);
}

TEST_CASE("persistent event count is n-1") {
  for (index_t n : {1, 2, 3, 7, 16, 65, 128}) {
    const Schedule s = build_schedule(n);
    index_t persistent = 0;
    for (const TileEvent& ev : s.events)
      if (ev.kind == TileKind::persistent_tile) ++persistent;
    CHECK(persistent == n - 1);
  }
}

TEST_CASE("capped tile size still validates and covers") {
  for (index_t cap : {1, 2, 4}) {
    const Schedule s = build_schedule(64, cap);
    for (const TileEvent& ev : s.events)
      if (ev.kind == TileKind::persistent_tile) CHECK(ev.e - ev.s + 1 <= cap);
    CHECK(validate_schedule(s).ok);
  }
}

TEST_CASE("a duplicated tile fails with pair covered twice") {
  Schedule s = build_schedule(8);
  for (std::size_t i = 0; i < s.events.size(); ++i)
    if (s.events[i].kind == TileKind::persistent_tile) {
      s.events.push_back(s.events[i]);
      break;
    }
  const ScheduleReport rep = validate_schedule(s);
  CHECK_FALSE(rep.ok);
  CHECK(rep.message.find("covered twice") != std::string::npos);
}

TEST_CASE("kv range overlapping the query range fails causality") {
  Schedule s = build_schedule(8);
  for (TileEvent& ev : s.events)
    if (ev.kind == TileKind::persistent_tile && ev.u > 2) {
      ev.s = ev.u;  // keys no longer precede the queries
      ev.e = ev.u;
      break;
    }
  const ScheduleReport rep = validate_schedule(s);
  CHECK_FALSE(rep.ok);
  CHECK(rep.message.find("causality") != std::string::npos);
}

TEST_CASE("a missing temp_self is reported") {
  Schedule s = build_schedule(4);
  for (std::size_t i = 0; i < s.events.size(); ++i)
    if (s.events[i].kind == TileKind::temp_self && s.events[i].u == 4) {
      s.events.erase(s.events.begin() + static_cast<std::ptrdiff_t>(i));
      break;
    }
  CHECK_FALSE(validate_schedule(s).ok);
}

TEST_CASE("tiled forward at N=1 matches the naive forward") {
  Rng rng(50);
  LayerParams p = random_layer(6, 2, rng);
  const std::vector<Vec> xs = random_inputs(1, 6, rng);
  CHECK(max_seq_diff(rt_forward_tiled(p, xs).z, rt_forward_naive(p, xs).z) == 0.0);
}

TEST_CASE("tiled forward matches naive at N=64 and the clamped N=65") {
  Rng rng(51);
  RandomLayerOpts opts;
  opts.bias = BiasKind::alibi;
  LayerParams p = random_layer(16, 2, rng, opts);
  p.alpha_res = 0.8;
  for (index_t n : {64, 65}) {
    const std::vector<Vec> xs = random_inputs(n, 16, rng);
    const LayerIO naive = rt_forward_naive(p, xs);
    const LayerIO tiled = rt_forward_tiled(p, xs);
    CHECK(max_seq_diff(tiled.z, naive.z) < 1e-10);
    CHECK(max_seq_diff(tiled.a, naive.a) < 1e-10);
    for (index_t j = 0; j < n; ++j)
      CHECK(max_abs_diff(tiled.cache.keys[static_cast<std::size_t>(j)],
                         naive.cache.keys[static_cast<std::size_t>(j)]) < 1e-10);
  }
}

TEST_CASE("property: tiled equals naive over random shapes and configurations") {
  Rng rng(52);
  for (int rep = 0; rep < 30; ++rep) {
    const index_t n = rng.uniform_int(1, 96);
    const index_t d_pick = rng.uniform_int(0, 2);
    const index_t d = d_pick == 0 ? 4 : (d_pick == 1 ? 8 : 16);
    const int heads_pick = static_cast<int>(rng.uniform_int(0, 2));
    const int heads = heads_pick == 0 ? 1 : (heads_pick == 1 ? 2 : 4);
    if (d % heads != 0) continue;
    RandomLayerOpts opts;
    opts.qk_norm = rng.uniform() < 0.5;
    opts.bias = rng.uniform() < 0.5 ? BiasKind::alibi : BiasKind::none;
    LayerParams p = random_layer(d, heads, rng, opts);
    const std::vector<Vec> xs = random_inputs(n, d, rng);
    CHECK(max_seq_diff(rt_forward_tiled(p, xs).z, rt_forward_naive(p, xs).z) < 1e-10);
  }
}

TEST_CASE("tiled forward with a tile cap still matches naive") {
  Rng rng(53);
  LayerParams p = random_layer(8, 2, rng);
  const std::vector<Vec> xs = random_inputs(40, 8, rng);
  const LayerIO naive = rt_forward_naive(p, xs);
  for (index_t cap : {1, 2, 8}) {
    CHECK(max_seq_diff(rt_forward_tiled(p, xs, cap).z, naive.z) < 1e-10);
  }
}
