#include "rt/weights.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace rt {

namespace {

constexpr char kMagic[4] = {'R', 'T', 'W', '1'};

void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b), 8);
}

void put_f64(std::ostream& os, double d) {
  std::uint64_t bits;
  std::memcpy(&bits, &d, 8);
  put_u64(os, bits);
}

std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw std::runtime_error("RTW1: truncated header");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

std::uint64_t get_u64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  if (!is) throw std::runtime_error("RTW1: truncated stream");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

void put_tensor(std::ostream& os, const double* data, std::size_t count) {
  put_u64(os, count);
  for (std::size_t i = 0; i < count; ++i) put_f64(os, data[i]);
}

std::vector<double> get_tensor(std::istream& is, std::size_t expected) {
  const std::uint64_t count = get_u64(is);
  if (expected && count != expected)
    throw std::runtime_error("RTW1: tensor length " + std::to_string(count) +
                             " does not match expected " + std::to_string(expected));
  std::vector<double> out(count);
  for (auto& d : out) {
    const std::uint64_t bits = get_u64(is);
    std::memcpy(&d, &bits, 8);
  }
  return out;
}

void write_layers(std::ostream& os, const std::vector<LayerParams>& layers) {
  const LayerParams& first = layers.front();
  put_u32(os, static_cast<std::uint32_t>(first.dim()));
  put_u32(os, static_cast<std::uint32_t>(first.num_heads));
  put_u32(os, static_cast<std::uint32_t>(first.mlp.hidden()));
  put_u32(os, static_cast<std::uint32_t>(layers.size()));
  for (const LayerParams& p : layers) {
    if (p.mlp_fn)
      throw std::runtime_error("RTW1: functional MLP layers are not serializable");
    put_tensor(os, p.q_proj.data.data(), p.q_proj.data.size());
    put_tensor(os, p.k_proj.data.data(), p.k_proj.data.size());
    put_tensor(os, p.v_proj.data.data(), p.v_proj.data.size());
    put_tensor(os, p.out_proj.data.data(), p.out_proj.data.size());
    put_tensor(os, p.mlp.w_in.data.data(), p.mlp.w_in.data.size());
    put_tensor(os, p.mlp.b_in.data(), p.mlp.b_in.size());
    put_tensor(os, p.mlp.w_out.data.data(), p.mlp.w_out.data.size());
    put_tensor(os, p.mlp.b_out.data(), p.mlp.b_out.size());
  }
}

std::vector<LayerParams> read_layers(std::istream& is, WeightsHeader& h) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0)
    throw std::runtime_error("RTW1: bad magic");
  h.d = get_u32(is);
  h.heads = static_cast<int>(get_u32(is));
  h.hidden = get_u32(is);
  h.layers = get_u32(is);
  if (h.d < 1 || h.heads < 1 || h.hidden < 1 || h.layers < 0)
    throw std::runtime_error("RTW1: invalid header fields");

  const std::size_t d = static_cast<std::size_t>(h.d);
  const std::size_t hid = static_cast<std::size_t>(h.hidden);
  std::vector<LayerParams> layers;
  for (index_t l = 0; l < h.layers; ++l) {
    LayerParams p;
    p.num_heads = h.heads;
    p.q_proj = Mat(h.d, h.d);
    p.q_proj.data = get_tensor(is, d * d);
    p.k_proj = Mat(h.d, h.d);
    p.k_proj.data = get_tensor(is, d * d);
    p.v_proj = Mat(h.d, h.d);
    p.v_proj.data = get_tensor(is, d * d);
    p.out_proj = Mat(h.d, h.d);
    p.out_proj.data = get_tensor(is, d * d);
    p.mlp.w_in = Mat(h.hidden, h.d);
    p.mlp.w_in.data = get_tensor(is, hid * d);
    p.mlp.b_in = get_tensor(is, hid);
    p.mlp.w_out = Mat(h.d, h.hidden);
    p.mlp.w_out.data = get_tensor(is, d * hid);
    p.mlp.b_out = get_tensor(is, d);
    layers.push_back(std::move(p));
  }
  return layers;
}

}  // namespace

void save_layer_stack(const std::string& path, const std::vector<LayerParams>& layers) {
  if (layers.empty()) throw std::runtime_error("save_layer_stack: no layers");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open for writing: " + path);
  os.write(kMagic, 4);
  write_layers(os, layers);
  if (!os) throw std::runtime_error("write failed: " + path);
}

std::vector<LayerParams> load_layer_stack(const std::string& path, WeightsHeader* header) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open: " + path);
  WeightsHeader h;
  std::vector<LayerParams> layers = read_layers(is, h);
  if (header) *header = h;
  return layers;
}

void save_model_bundle(const std::string& path, const std::vector<LayerParams>& layers,
                       const Mat& embed, const Mat& unembed) {
  if (layers.empty()) throw std::runtime_error("save_model_bundle: no layers");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open for writing: " + path);
  os.write(kMagic, 4);
  write_layers(os, layers);
  put_tensor(os, embed.data.data(), embed.data.size());
  put_tensor(os, unembed.data.data(), unembed.data.size());
  if (!os) throw std::runtime_error("write failed: " + path);
}

ModelBundle load_model_bundle(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open: " + path);
  ModelBundle b;
  b.layers = read_layers(is, b.header);
  std::vector<double> embed = get_tensor(is, 0);
  std::vector<double> unembed = get_tensor(is, 0);
  if (embed.size() % static_cast<std::size_t>(b.header.d) != 0 || embed.size() != unembed.size())
    throw std::runtime_error("RTW1: malformed embedding tensors");
  const index_t vocab = static_cast<index_t>(embed.size()) / b.header.d;
  b.embed = Mat(vocab, b.header.d);
  b.embed.data = std::move(embed);
  b.unembed = Mat(vocab, b.header.d);
  b.unembed.data = std::move(unembed);
  return b;
}

}  // namespace rt
