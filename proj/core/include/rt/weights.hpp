#pragma once

#include <string>
#include <vector>

#include "rt/layers.hpp"

namespace rt {

// RTW1 weight container.
//
// Layout (all integers little-endian):
//   bytes 0..3   magic "RTW1"
//   u32          D (embedding dimension)
//   u32          H (heads)
//   u32          hidden (MLP width)
//   u32          L (layer count)
//   then a sequence of tensors, each encoded as
//   u64          element count
//   f64[count]   row-major little-endian payload
//
// Tensor order: for each layer l = 0..L-1:
//   q_proj (DxD), k_proj (DxD), v_proj (DxD), out_proj (DxD),
//   mlp.w_in (hidden x D), mlp.b_in (hidden), mlp.w_out (D x hidden),
//   mlp.b_out (D)
// Model bundles append two trailing tensors after the layers:
//   embed (vocab x D), unembed (vocab x D)
// The reader distinguishes the two by the presence of trailing tensors.

struct WeightsHeader {
  index_t d = 0;
  int heads = 0;
  index_t hidden = 0;
  index_t layers = 0;
};

void save_layer_stack(const std::string& path, const std::vector<LayerParams>& layers);
std::vector<LayerParams> load_layer_stack(const std::string& path, WeightsHeader* header = nullptr);

struct ModelBundle {
  WeightsHeader header;
  std::vector<LayerParams> layers;
  Mat embed;    // vocab x D
  Mat unembed;  // vocab x D
};

void save_model_bundle(const std::string& path, const std::vector<LayerParams>& layers,
                       const Mat& embed, const Mat& unembed);
ModelBundle load_model_bundle(const std::string& path);

}  // namespace rt
