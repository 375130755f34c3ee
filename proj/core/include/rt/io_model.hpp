#pragma once

#include <span>
#include <string>
#include <vector>

#include "rt/tiling.hpp"

namespace rt {

// Abstract element-movement and FLOP accounting for one layer's attention
// schedule. The unit of traffic is the scalar element (dtype-agnostic);
// multiply by bytes-per-element for byte counts. FLOPs per (query, kv)
// interaction: 2d for the logit dot, 2d for the value accumulate, plus a
// configurable softmax/rescale constant.
struct TrafficReport {
  index_t n = 0;
  index_t d = 0;
  std::string schedule_kind;

  index_t kv_pairs_loaded = 0;
  index_t kv_elements_loaded = 0;  // pairs * 2d
  index_t q_elements_loaded = 0;
  index_t o_elements_moved = 0;
  index_t flops = 0;

  double arithmetic_intensity = 0.0;      // flops / (kv + q + o)
  double ai_excluding_queries = 0.0;      // flops / (kv + o)
};

inline constexpr index_t kDefaultSoftmaxFlopsPerPair = 4;

// One-query-at-a-time schedule: step t loads its t-1 persistent pairs plus
// the temporary pair and one query, so kv pair loads total n(n+1)/2.
TrafficReport count_naive(index_t n, index_t d,
                          index_t softmax_flops_per_pair = kDefaultSoftmaxFlopsPerPair);

// Walks build_schedule(n): each persistent event loads its kv range once and
// its query range once; temp_self events load one pair and one query. The
// interaction count (and hence FLOPs) is identical to the naive schedule.
TrafficReport count_tiled(index_t n, index_t d,
                          index_t softmax_flops_per_pair = kDefaultSoftmaxFlopsPerPair);

struct AsymptoticsRow {
  index_t n = 0;
  TrafficReport naive;
  TrafficReport tiled;
  double naive_loads_per_n2 = 0.0;    // (kv + q elements) / n^2
  double tiled_loads_per_nlogn = 0.0; // (kv + q elements) / (n * log2 n)
};

struct AsymptoticsTable {
  std::vector<AsymptoticsRow> rows;
  double tiled_band_lo = 0.0, tiled_band_hi = 0.0;
  double naive_band_lo = 0.0, naive_band_hi = 0.0;
  bool tiled_ai_strictly_increasing = false;
  // max/min relative spread of the naive arithmetic intensity across rows
  double naive_ai_spread = 0.0;
};

AsymptoticsTable asymptotics_check(std::span<const index_t> ns, index_t d);

}  // namespace rt
