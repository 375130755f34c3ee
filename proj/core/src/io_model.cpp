#include "rt/io_model.hpp"

#include <cmath>
#include <stdexcept>

namespace rt {

namespace {

void finish(TrafficReport& r) {
  const double moved = static_cast<double>(r.kv_elements_loaded + r.q_elements_loaded +
                                           r.o_elements_moved);
  const double moved_no_q =
      static_cast<double>(r.kv_elements_loaded + r.o_elements_moved);
  r.arithmetic_intensity = static_cast<double>(r.flops) / moved;
  r.ai_excluding_queries = static_cast<double>(r.flops) / moved_no_q;
}

}  // namespace

TrafficReport count_naive(index_t n, index_t d, index_t softmax_flops_per_pair) {
  if (n < 1 || d < 1) throw std::logic_error("count_naive: n and d must be >= 1");
  TrafficReport r;
  r.n = n;
  r.d = d;
  r.schedule_kind = "naive";
  r.kv_pairs_loaded = n * (n + 1) / 2;
  r.kv_elements_loaded = r.kv_pairs_loaded * 2 * d;
  r.q_elements_loaded = n * d;
  r.o_elements_moved = n * d;
  const index_t interactions = r.kv_pairs_loaded;  // each loaded pair meets one query
  r.flops = interactions * (4 * d + softmax_flops_per_pair);
  finish(r);
  return r;
}

TrafficReport count_tiled(index_t n, index_t d, index_t softmax_flops_per_pair) {
  if (n < 1 || d < 1) throw std::logic_error("count_tiled: n and d must be >= 1");
  TrafficReport r;
  r.n = n;
  r.d = d;
  r.schedule_kind = "tiled";
  index_t interactions = 0;
  const Schedule s = build_schedule(n);
  for (const TileEvent& ev : s.events) {
    const index_t width = ev.e - ev.s + 1;
    const index_t height = ev.v - ev.u + 1;
    r.kv_pairs_loaded += width;
    r.q_elements_loaded += height * d;
    interactions += width * height;
  }
  r.kv_elements_loaded = r.kv_pairs_loaded * 2 * d;
  r.o_elements_moved = n * d;
  r.flops = interactions * (4 * d + softmax_flops_per_pair);
  finish(r);
  return r;
}

AsymptoticsTable asymptotics_check(std::span<const index_t> ns, index_t d) {
  AsymptoticsTable t;
  double prev_ai = -1.0;
  double naive_ai_lo = 0.0, naive_ai_hi = 0.0;
  t.tiled_ai_strictly_increasing = true;
  for (std::size_t i = 0; i < ns.size(); ++i) {
    const index_t n = ns[i];
    if (n < 2) throw std::logic_error("asymptotics_check: n must be >= 2");
    AsymptoticsRow row;
    row.n = n;
    row.naive = count_naive(n, d);
    row.tiled = count_tiled(n, d);
    const double naive_loads =
        static_cast<double>(row.naive.kv_elements_loaded + row.naive.q_elements_loaded);
    const double tiled_loads =
        static_cast<double>(row.tiled.kv_elements_loaded + row.tiled.q_elements_loaded);
    row.naive_loads_per_n2 = naive_loads / (static_cast<double>(n) * static_cast<double>(n));
    row.tiled_loads_per_nlogn =
        tiled_loads / (static_cast<double>(n) * std::log2(static_cast<double>(n)));

    if (i == 0) {
      t.tiled_band_lo = t.tiled_band_hi = row.tiled_loads_per_nlogn;
      t.naive_band_lo = t.naive_band_hi = row.naive_loads_per_n2;
      naive_ai_lo = naive_ai_hi = row.naive.arithmetic_intensity;
    } else {
      t.tiled_band_lo = std::min(t.tiled_band_lo, row.tiled_loads_per_nlogn);
      t.tiled_band_hi = std::max(t.tiled_band_hi, row.tiled_loads_per_nlogn);
      t.naive_band_lo = std::min(t.naive_band_lo, row.naive_loads_per_n2);
      t.naive_band_hi = std::max(t.naive_band_hi, row.naive_loads_per_n2);
      naive_ai_lo = std::min(naive_ai_lo, row.naive.arithmetic_intensity);
      naive_ai_hi = std::max(naive_ai_hi, row.naive.arithmetic_intensity);
    }
    if (prev_ai >= 0.0 && row.tiled.arithmetic_intensity <= prev_ai)
      t.tiled_ai_strictly_increasing = false;
    prev_ai = row.tiled.arithmetic_intensity;
    t.rows.push_back(std::move(row));
  }
  t.naive_ai_spread = naive_ai_lo > 0.0 ? (naive_ai_hi - naive_ai_lo) / naive_ai_lo : 0.0;
  return t;
}

}  // namespace rt
