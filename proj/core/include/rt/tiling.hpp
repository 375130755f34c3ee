#pragma once

#include <string>
#include <vector>

#include "rt/layers.hpp"

namespace rt {

enum class TileKind { temp_self, persistent_tile };

// One unit of the exact schedule. Positions are 1-based inclusive, matching
// the schedule's arithmetic (tile size is derived from the 2-adic valuation
// of the step index). temp_self has u == v == s == e; persistent_tile
// requires e < u (key/value positions strictly precede the queries).
struct TileEvent {
  TileKind kind;
  index_t u, v;  // query range
  index_t s, e;  // key/value range
};

struct Schedule {
  std::vector<TileEvent> events;
  index_t n = 0;
};

// 2^(nu_2(t)): the largest power of two dividing t. Requires t >= 1.
index_t tile_size(index_t t);

// Canonical schedule: for each step t a temp_self event, and for t < n a
// persistent event delivering keys/values (t-P+1..t) to queries
// (t+1..min(t+P, n)) with P = tile_size(t). An optional cap bounds P.
Schedule build_schedule(index_t n, index_t max_tile = 0);

struct ScheduleReport {
  bool ok = true;
  std::string message;       // first violation, empty when ok
  index_t event_index = -1;  // offending event, -1 when ok
};

// Checks that (a) every causal (query, kv) pair is covered by exactly one
// persistent event, (b) every position has exactly one temp_self event, and
// (c) no event reads a key/value position whose output is not yet computable
// at that point in the order. Returns the first violation instead of throwing.
ScheduleReport validate_schedule(const Schedule& s);

// Executes the canonical schedule with one online-softmax accumulator per
// (position, head): queries are precomputed up front, each temp_self event
// finalizes the position and reveals its persistent pair, each persistent
// event folds a revealed tile into the pending query accumulators. The result
// matches rt_forward_naive up to floating-point reordering.
LayerIO rt_forward_tiled(const LayerParams& p, const std::vector<Vec>& xs,
                         index_t max_tile = 0);

}  // namespace rt
