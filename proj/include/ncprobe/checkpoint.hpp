#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <string>
#include <vector>

#include "ncprobe/nn.hpp"

namespace ncprobe {

class CheckpointError : public std::runtime_error {
 public:
  CheckpointError(const std::string& what, std::size_t offset)
      : std::runtime_error(what + " at byte " + std::to_string(offset)), offset(offset) {}
  std::size_t offset;
};

inline constexpr char kCheckpointMagic[5] = {'N', 'C', 'P', 'K', '1'};

namespace detail {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void raw(const char* p, std::size_t n) { buf_.insert(buf_.end(), p, p + n); }
  void tensor(const Tensor& t) {
    for (double v : t.data()) f64(v);
  }
  std::vector<std::uint8_t> take() { return std::move(buf_); }

 private:
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> b) : b_(b) {}
  std::size_t offset() const { return pos_; }
  bool done() const { return pos_ == b_.size(); }
  void need(std::size_t n) const {
    if (b_.size() - pos_ < n) throw CheckpointError("truncated checkpoint", pos_);
  }
  std::uint8_t u8() {
    need(1);
    return b_[pos_++];
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b_[pos_++]) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b_[pos_++]) << (8 * i);
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  Tensor tensor(Shape s) {
    for (auto e : s)
      if (e == 0) throw CheckpointError("zero extent in layer manifest", pos_);
    need(shape_numel(s) * 8);
    Tensor t(std::move(s));
    for (auto& v : t.data()) v = f64();
    return t;
  }

 private:
  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

inline Shape param_shape(const Layer& l) {
  switch (l.kind) {
    case LayerKind::Linear:
    case LayerKind::OutputLinear: return {l.in, l.out};
    case LayerKind::Conv3x3:
    case LayerKind::ConvStem2x2: return {l.out, l.in, l.kernel, l.kernel};
    case LayerKind::BatchNorm: return {l.out};
    default: return {};
  }
}

}  // namespace detail

// Layout (little-endian): magic "NCPK1"; u64 seed; u8 family; u64 depth, width,
// classes; u32 input rank + u64 extents; u32 layer count, then per layer
// {u8 kind, u64 in, out, kernel, stride, pad, u8 spatial, f64 eps, momentum};
// u32 block count + u64 block ends; u64 head index; then per parameterized layer
// in order: weight, bias, and for BatchNorm running mean and running variance,
// as raw f64 buffers whose shapes follow from the manifest.
inline std::vector<std::uint8_t> encode_checkpoint(const Network& net) {
  detail::ByteWriter w;
  w.raw(kCheckpointMagic, sizeof kCheckpointMagic);
  w.u64(net.seed);
  w.u8(static_cast<std::uint8_t>(net.family));
  w.u64(net.depth);
  w.u64(net.width);
  w.u64(net.classes);
  w.u32(static_cast<std::uint32_t>(net.input_shape.size()));
  for (auto e : net.input_shape) w.u64(e);
  w.u32(static_cast<std::uint32_t>(net.layers.size()));
  for (const auto& l : net.layers) {
    w.u8(static_cast<std::uint8_t>(l.kind));
    w.u64(l.in);
    w.u64(l.out);
    w.u64(l.kernel);
    w.u64(l.stride);
    w.u64(l.pad);
    w.u8(l.spatial ? 1 : 0);
    w.f64(l.eps);
    w.f64(l.momentum);
  }
  w.u32(static_cast<std::uint32_t>(net.block_ends.size()));
  for (auto b : net.block_ends) w.u64(b);
  w.u64(net.head_index);
  for (const auto& l : net.layers) {
    if (!l.has_params()) continue;
    w.tensor(l.weight);
    w.tensor(l.bias);
    if (l.kind == LayerKind::BatchNorm) {
      w.tensor(l.running_mean);
      w.tensor(l.running_var);
    }
  }
  return w.take();
}

inline Network decode_checkpoint(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes);
  r.need(sizeof kCheckpointMagic);
  if (std::memcmp(bytes.data(), kCheckpointMagic, sizeof kCheckpointMagic) != 0)
    throw CheckpointError("bad checkpoint magic", 0);
  for (std::size_t i = 0; i < sizeof kCheckpointMagic; ++i) r.u8();
  Network net;
  net.seed = r.u64();
  const auto fam_off = r.offset();
  const auto fam = r.u8();
  if (fam > static_cast<std::uint8_t>(ArchFamily::Probe)) throw CheckpointError("unknown architecture family", fam_off);
  net.family = static_cast<ArchFamily>(fam);
  net.depth = r.u64();
  net.width = r.u64();
  net.classes = r.u64();
  const auto rank = r.u32();
  if (rank > 8) throw CheckpointError("implausible input rank", r.offset() - 4);
  for (std::uint32_t i = 0; i < rank; ++i) net.input_shape.push_back(r.u64());
  const auto nlayers = r.u32();
  if (nlayers > (1u << 20)) throw CheckpointError("implausible layer count", r.offset() - 4);
  for (std::uint32_t i = 0; i < nlayers; ++i) {
    Layer l;
    const auto off = r.offset();
    const auto kind = r.u8();
    if (kind < 1 || kind > 7) throw CheckpointError("unknown layer kind " + std::to_string(kind), off);
    l.kind = static_cast<LayerKind>(kind);
    l.in = r.u64();
    l.out = r.u64();
    l.kernel = r.u64();
    l.stride = r.u64();
    l.pad = r.u64();
    l.spatial = r.u8() != 0;
    l.eps = r.f64();
    l.momentum = r.f64();
    net.layers.push_back(std::move(l));
  }
  const auto nblocks = r.u32();
  if (nblocks > nlayers) throw CheckpointError("more blocks than layers", r.offset() - 4);
  for (std::uint32_t i = 0; i < nblocks; ++i) {
    const auto off = r.offset();
    const auto b = r.u64();
    if (b >= nlayers || (!net.block_ends.empty() && b <= net.block_ends.back()))
      throw CheckpointError("block boundaries must be increasing layer indices", off);
    net.block_ends.push_back(b);
  }
  const auto head_off = r.offset();
  net.head_index = r.u64();
  if (net.head_index >= nlayers || net.layers[net.head_index].kind != LayerKind::OutputLinear ||
      (!net.block_ends.empty() && net.block_ends.back() >= net.head_index))
    throw CheckpointError("head index does not name the output layer", head_off);
  for (auto& l : net.layers) {
    if (!l.has_params()) continue;
    l.weight = r.tensor(detail::param_shape(l));
    l.bias = r.tensor({l.out});
    if (l.kind == LayerKind::BatchNorm) {
      l.running_mean = r.tensor({l.out});
      l.running_var = r.tensor({l.out});
    }
  }
  if (!r.done()) throw CheckpointError("trailing bytes after checkpoint", r.offset());
  return net;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + p.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_atomic(const std::filesystem::path& p, std::span<const std::uint8_t> bytes) {
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  auto tmp = p;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, p);
}

inline void write_file_atomic(const std::filesystem::path& p, std::string_view text) {
  write_file_atomic(p, std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

inline void save_checkpoint(const Network& net, const std::filesystem::path& p) {
  write_file_atomic(p, encode_checkpoint(net));
}

inline Network load_checkpoint(const std::filesystem::path& p) { return decode_checkpoint(read_file_bytes(p)); }

}  // namespace ncprobe
