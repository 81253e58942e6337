#pragma once

#include <array>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <iterator>
#include <ostream>
#include <string>
#include <vector>

#include "ercmoe/errors.hpp"
#include "ercmoe/model.hpp"

namespace ercmoe {

// Layout, all integers and reals little-endian:
//   0   char[8]  "ERCMOE1\0"
//   8   u32      layer_count
//   12  u32      n
//   16  u32      K
//   20  u32      d
//   24  u32      D
//   28  u8       variant (0 = MoE, 1 = AoE)
//   29  u32      r (0 for MoE)
//   33  f64[]    per layer: MoE R, then per expert Wg, Wp, Wo
//                           AoE per expert W_down, W_up, Wp, Wo
inline constexpr std::array<char, 8> kCheckpointMagic{'E', 'R', 'C', 'M', 'O', 'E', '1', '\0'};
inline constexpr std::size_t kCheckpointHeaderBytes = 33;

namespace detail {

inline void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

inline void put_f64(std::vector<unsigned char>& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>(bits >> (8 * i)));
}

class ByteReader {
 public:
  explicit ByteReader(const std::vector<unsigned char>& bytes) : bytes_(bytes) {}

  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

  void need(std::size_t n, const char* what) const {
    if (remaining() < n) throw IoError(std::string("truncated checkpoint: expected ") + what, pos_);
  }

  std::uint8_t u8(const char* what) {
    need(1, what);
    return bytes_[pos_++];
  }

  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }

  double f64(const char* what) {
    need(8, what);
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
    const double v = std::bit_cast<double>(bits);
    if (!std::isfinite(v)) throw IoError("corrupt checkpoint: non-finite parameter", pos_);
    pos_ += 8;
    return v;
  }

 private:
  const std::vector<unsigned char>& bytes_;
  std::size_t pos_ = 0;
};

inline void read_tensor(ByteReader& r, Tensor& t) {
  for (double& v : t.values()) v = r.f64("parameter payload");
}

}  // namespace detail

inline std::vector<unsigned char> encode_checkpoint(const Model& model) {
  std::vector<unsigned char> out(kCheckpointMagic.begin(), kCheckpointMagic.end());
  const ModelShape& s = model.shape;
  detail::put_u32(out, static_cast<std::uint32_t>(s.layers));
  detail::put_u32(out, static_cast<std::uint32_t>(s.num_experts));
  detail::put_u32(out, static_cast<std::uint32_t>(s.top_k));
  detail::put_u32(out, static_cast<std::uint32_t>(s.model_dim));
  detail::put_u32(out, static_cast<std::uint32_t>(s.hidden_dim));
  out.push_back(static_cast<unsigned char>(s.variant));
  detail::put_u32(out, static_cast<std::uint32_t>(s.variant == Variant::Aoe ? s.rank : 0));
  auto put = [&](const Tensor& t) {
    for (double v : t.data()) detail::put_f64(out, v);
  };
  for (const MoeLayer& l : model.moe) {
    put(l.router);
    for (const Expert& e : l.experts) {
      put(e.gate);
      put(e.proj);
      put(e.out);
    }
  }
  for (const AoeLayer& l : model.aoe)
    for (const AoeExpert& e : l.experts) {
      put(e.gate_down);
      put(e.gate_up);
      put(e.proj);
      put(e.out);
    }
  return out;
}

inline Model decode_checkpoint(const std::vector<unsigned char>& bytes) {
  if (bytes.empty()) throw IoError("empty checkpoint", 0);
  if (bytes.size() < kCheckpointMagic.size() ||
      !std::equal(kCheckpointMagic.begin(), kCheckpointMagic.end(), bytes.begin())) {
    throw IoError("bad checkpoint magic", 0);
  }
  detail::ByteReader r(bytes);
  for (std::size_t i = 0; i < kCheckpointMagic.size(); ++i) r.u8("magic");

  ModelShape s;
  s.layers = r.u32("layer_count");
  s.num_experts = r.u32("n");
  s.top_k = r.u32("K");
  s.model_dim = r.u32("d");
  s.hidden_dim = r.u32("D");
  const std::size_t variant_at = r.offset();
  const std::uint8_t tag = r.u8("variant");
  if (tag > 1) throw IoError("unknown variant tag " + std::to_string(tag), variant_at);
  s.variant = static_cast<Variant>(tag);
  const std::size_t rank_at = r.offset();
  s.rank = r.u32("r");

  if (s.layers == 0 || s.num_experts == 0 || s.top_k == 0 || s.top_k > s.num_experts || s.model_dim == 0 ||
      s.hidden_dim == 0) {
    throw IoError("corrupt checkpoint header", 8);
  }
  if (s.variant == Variant::Aoe ? s.rank == 0 : s.rank != 0) throw IoError("inconsistent rank field", rank_at);

  const std::uint64_t n = s.num_experts, d = s.model_dim, h = s.hidden_dim, rk = s.rank;
  // Reject absurd headers before the exact u64 products can overflow.
  const long double approx = static_cast<long double>(s.layers) * 8.0L * n *
                             (s.variant == Variant::Moe ? d + 3.0L * d * h : d * rk + rk * h + 2.0L * d * h);
  if (approx > static_cast<long double>(bytes.size())) {
    throw IoError("payload shorter than header implies", bytes.size());
  }
  const std::uint64_t per_layer =
      s.variant == Variant::Moe ? n * d + n * 3 * d * h : n * (d * rk + rk * h + 2 * d * h);
  const std::uint64_t expected = per_layer * s.layers * 8;
  if (expected != r.remaining()) {
    throw IoError("payload is " + std::to_string(r.remaining()) + " bytes, header implies " + std::to_string(expected),
                  r.remaining() < expected ? bytes.size() : kCheckpointHeaderBytes + expected);
  }

  Model m;
  m.shape = s;
  for (std::size_t l = 0; l < s.layers; ++l) {
    if (s.variant == Variant::Moe) {
      MoeLayer layer;
      layer.router = Tensor({n, d});
      detail::read_tensor(r, layer.router);
      for (std::size_t i = 0; i < n; ++i) {
        Expert e{Tensor({d, h}), Tensor({d, h}), Tensor({h, d})};
        detail::read_tensor(r, e.gate);
        detail::read_tensor(r, e.proj);
        detail::read_tensor(r, e.out);
        layer.experts.push_back(std::move(e));
      }
      m.moe.push_back(std::move(layer));
    } else {
      AoeLayer layer;
      for (std::size_t i = 0; i < n; ++i) {
        AoeExpert e{Tensor({d, s.rank}), Tensor({s.rank, h}), Tensor({d, h}), Tensor({h, d})};
        detail::read_tensor(r, e.gate_down);
        detail::read_tensor(r, e.gate_up);
        detail::read_tensor(r, e.proj);
        detail::read_tensor(r, e.out);
        layer.experts.push_back(std::move(e));
      }
      m.aoe.push_back(std::move(layer));
    }
  }
  return m;
}

inline void save_checkpoint(const std::string& path, const Model& model) {
  const auto bytes = encode_checkpoint(model);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open '" + path + "' for writing", 0);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write failed for '" + path + "'", 0);
}

inline Model load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path + "'", 0);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace ercmoe
