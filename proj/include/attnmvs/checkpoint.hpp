#pragma once

// Binary checkpoints: a metadata string plus named float32 tensors, guarded by
// a CRC-32 over everything before the trailer.
//
//   "AMVSCKPT" u32 version u32 meta_len meta u32 count
//   { u32 name_len name u32 rank i64 dims[rank] f32 values[numel] } * count
//   u32 crc32

#include <zlib.h>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <string>
#include <vector>

#include "attnmvs/errors.hpp"
#include "attnmvs/params.hpp"

namespace attnmvs {

struct Checkpoint {
  std::string metadata;
  std::map<std::string, Tensor<float>> tensors;
};

namespace detail {

constexpr char kCheckpointMagic[8] = {'A', 'M', 'V', 'S', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kCheckpointVersion = 1;

template <typename V>
void put(std::string& buf, V v) {
  char bytes[sizeof(V)];
  std::memcpy(bytes, &v, sizeof(V));
  buf.append(bytes, sizeof(V));
}

class Reader {
 public:
  Reader(const std::string& buf, std::size_t end, std::string source) : buf_(buf), end_(end), source_(std::move(source)) {}

  template <typename V>
  V get() {
    need(sizeof(V));
    V v;
    std::memcpy(&v, buf_.data() + pos_, sizeof(V));
    pos_ += sizeof(V);
    return v;
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t position() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > end_) throw ParseError(source_, 0, "truncated checkpoint");
  }
  const std::string& buf_;
  std::size_t end_;
  std::size_t pos_ = 0;
  std::string source_;
};

inline std::uint32_t crc_of(const std::string& buf, std::size_t n) {
  return static_cast<std::uint32_t>(crc32(0L, reinterpret_cast<const Bytef*>(buf.data()), static_cast<uInt>(n)));
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::string buf(detail::kCheckpointMagic, sizeof(detail::kCheckpointMagic));
  detail::put(buf, detail::kCheckpointVersion);
  detail::put(buf, static_cast<std::uint32_t>(ckpt.metadata.size()));
  buf += ckpt.metadata;
  detail::put(buf, static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& [name, t] : ckpt.tensors) {
    detail::put(buf, static_cast<std::uint32_t>(name.size()));
    buf += name;
    detail::put(buf, static_cast<std::uint32_t>(t.rank()));
    for (auto e : t.shape()) detail::put(buf, static_cast<std::int64_t>(e));
    for (float v : t.values()) detail::put(buf, v);
  }
  detail::put(buf, detail::crc_of(buf, buf.size()));
  // Write-then-rename keeps the previous file intact if the process dies mid-write.
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("cannot open for writing: " + tmp.string());
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw IoError("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw NotFound("checkpoint not found: " + path.string());
  std::ifstream in(path, std::ios::binary);
  std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::string src = path.string();
  if (buf.size() < sizeof(detail::kCheckpointMagic) + 4 ||
      std::memcmp(buf.data(), detail::kCheckpointMagic, sizeof(detail::kCheckpointMagic)) != 0)
    throw ParseError(src, 0, "not a checkpoint file");
  const std::size_t body = buf.size() - 4;
  std::uint32_t stored = 0;
  std::memcpy(&stored, buf.data() + body, 4);
  if (stored != detail::crc_of(buf, body)) throw ParseError(src, 0, "checkpoint checksum mismatch");

  detail::Reader r(buf, body, src);
  r.bytes(sizeof(detail::kCheckpointMagic));
  if (const auto version = r.get<std::uint32_t>(); version != detail::kCheckpointVersion)
    throw ParseError(src, 0, "unsupported checkpoint version " + std::to_string(version));
  Checkpoint ckpt;
  ckpt.metadata = r.bytes(r.get<std::uint32_t>());
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.bytes(r.get<std::uint32_t>());
    const auto rank = r.get<std::uint32_t>();
    Shape shape;
    for (std::uint32_t d = 0; d < rank; ++d) {
      const auto e = r.get<std::int64_t>();
      if (e < 0) throw ParseError(src, 0, "negative extent in tensor " + name);
      shape.push_back(e);
    }
    std::vector<float> values(static_cast<std::size_t>(shape_numel(shape)));
    for (auto& v : values) v = r.get<float>();
    ckpt.tensors.emplace(std::move(name), Tensor<float>(std::move(shape), std::move(values)));
  }
  if (r.position() != body) throw ParseError(src, 0, "trailing bytes in checkpoint");
  return ckpt;
}

template <typename T>
void store_parameters(Checkpoint& ckpt, const ParameterList<T>& params, const std::string& prefix = "") {
  for (const auto& p : params) ckpt.tensors.insert_or_assign(prefix + p.name, p.tensor.template cast<float>());
}

/// Copies checkpoint values into existing parameters; every parameter must be present with its shape.
template <typename T>
void restore_parameters(const Checkpoint& ckpt, ParameterList<T>& params, const std::string& prefix = "") {
  for (auto& p : params) {
    const auto it = ckpt.tensors.find(prefix + p.name);
    if (it == ckpt.tensors.end()) throw NotFound("checkpoint lacks tensor " + prefix + p.name);
    if (it->second.shape() != p.tensor.shape())
      throw ShapeError("checkpoint tensor " + p.name + " has shape " + shape_str(it->second.shape()) + ", expected " +
                       shape_str(p.tensor.shape()));
    auto dst = p.tensor.mutable_values();
    const auto src = it->second.values();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(src[i]);
  }
}

}  // namespace attnmvs
