#pragma once

// Binary checkpoints. Layout, all integers little-endian:
//   8 bytes  magic "BAYESCKP"
//   u32      format version
//   u64      entry count
//   per entry: u64 name length, name bytes, u64 rank, rank x u64 extents,
//              float64 payload in row-major order
// Entries are written in the order given, so a model's checkpoint is stable
// across runs.

#include <array>
#include <bit>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "bayes_layers/layer.hpp"

namespace bayes_layers {

inline constexpr std::array<char, 8> kCheckpointMagic = {'B', 'A', 'Y', 'E', 'S', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointEntry {
  std::string name;
  Tensor value;
};

using Checkpoint = std::vector<CheckpointEntry>;

namespace detail {

template <typename U>
void put_le(std::string& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

class ByteReader {
 public:
  ByteReader(const std::string& bytes, std::string source) : bytes_(bytes), source_(std::move(source)) {}

  template <typename U>
  U get_le(const char* what) {
    need(sizeof(U), what);
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      v |= static_cast<U>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(U);
    return v;
  }

  std::string get_bytes(std::size_t n, const char* what) {
    need(n, what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool at_end() const { return pos_ == bytes_.size(); }
  std::size_t remaining() const { return bytes_.size() - pos_; }

  [[noreturn]] void bad(const std::string& msg) const {
    fail(ErrorKind::kParse, source_ + ": " + msg + " at byte " + std::to_string(pos_));
  }

 private:
  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n) bad(std::string("truncated while reading ") + what);
  }

  const std::string& bytes_;
  std::string source_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ckpt) {
  std::string out(kCheckpointMagic.begin(), kCheckpointMagic.end());
  detail::put_le<std::uint32_t>(out, kCheckpointVersion);
  detail::put_le<std::uint64_t>(out, ckpt.size());
  for (const auto& e : ckpt) {
    detail::put_le<std::uint64_t>(out, e.name.size());
    out += e.name;
    detail::put_le<std::uint64_t>(out, e.value.rank());
    for (std::size_t d : e.value.shape()) detail::put_le<std::uint64_t>(out, d);
    for (double v : e.value.data()) detail::put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

inline Checkpoint deserialize_checkpoint(const std::string& bytes, const std::string& source = "checkpoint") {
  detail::ByteReader r(bytes, source);
  if (r.get_bytes(kCheckpointMagic.size(), "magic") != std::string(kCheckpointMagic.begin(), kCheckpointMagic.end())) {
    fail(ErrorKind::kParse, source + ": not a checkpoint (bad magic)");
  }
  const auto version = r.get_le<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    fail(ErrorKind::kParse, source + ": unsupported checkpoint version " + std::to_string(version));
  }
  const auto count = r.get_le<std::uint64_t>("entry count");
  Checkpoint out;
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto len = r.get_le<std::uint64_t>("name length");
    if (len > r.remaining()) r.bad("name length " + std::to_string(len) + " exceeds file size");
    CheckpointEntry e;
    e.name = r.get_bytes(len, "name");
    const auto rank = r.get_le<std::uint64_t>("rank");
    if (rank > 32) r.bad("implausible rank " + std::to_string(rank) + " for '" + e.name + "'");
    Shape shape;
    std::size_t n = 1;
    for (std::uint64_t k = 0; k < rank; ++k) {
      shape.push_back(r.get_le<std::uint64_t>("extent"));
      if (shape.back() != 0 && n > r.remaining() / shape.back()) r.bad("extents of '" + e.name + "' exceed file size");
      n *= shape.back();
    }
    if (n > r.remaining() / 8) r.bad("payload of '" + e.name + "' exceeds file size");
    std::vector<double> data(n);
    for (auto& v : data) v = std::bit_cast<double>(r.get_le<std::uint64_t>("payload"));
    e.value = Tensor(std::move(shape), std::move(data));
    out.push_back(std::move(e));
  }
  if (!r.at_end()) r.bad("trailing bytes after " + std::to_string(count) + " entries");
  return out;
}

/// Writes to a sibling temporary file, then renames over `path`.
inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  const std::string bytes = serialize_checkpoint(ckpt);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorKind::kIo, "cannot write '" + tmp + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) fail(ErrorKind::kIo, "write failed for '" + tmp + "'");
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) fail(ErrorKind::kIo, "cannot rename '" + tmp + "' to '" + path + "'");
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::kIo, "cannot open checkpoint '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return deserialize_checkpoint(ss.str(), path);
}

/// All of the model's parameters under their hierarchical names.
inline Checkpoint model_checkpoint(const Layer& model) {
  Checkpoint out;
  for (const auto& [name, p] : model.named_parameters()) out.push_back({name, p.value()});
  return out;
}

inline const CheckpointEntry* find_entry(const Checkpoint& ckpt, const std::string& name) {
  for (const auto& e : ckpt)
    if (e.name == name) return &e;
  return nullptr;
}

/// Assigns every model parameter from the checkpoint. Missing names or shape
/// mismatches are errors; entries the model does not own are ignored, which is
/// how metadata rides along.
inline void restore(const Layer& model, const Checkpoint& ckpt) {
  for (auto& [name, p] : model.named_parameters()) {
    const CheckpointEntry* e = find_entry(ckpt, name);
    if (e == nullptr) fail(ErrorKind::kParse, "checkpoint has no entry for parameter '" + name + "'");
    if (e->value.shape() != p.shape()) {
      fail(ErrorKind::kShape, "checkpoint entry '" + name + "' has shape " + shape_string(e->value.shape()) +
                                  ", parameter has " + shape_string(p.shape()));
    }
    p.assign(e->value);
  }
}

}  // namespace bayes_layers
