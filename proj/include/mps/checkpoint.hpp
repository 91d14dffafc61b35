#pragma once

// Binary checkpoint layout (all integers u32 little-endian):
//   "MPSG" | version | dim heads layers patch_count patch_input_dim ffn_dim group_b0 group_b1
//   | every tensor of the canonical declaration order as little-endian f64, row-major.
// Tensor shapes follow from the config block, so no per-tensor headers are stored.

#include <mps/encoder.hpp>

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace mps::enc {

inline constexpr std::array<char, 4> kCheckpointMagic{'M', 'P', 'S', 'G'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

inline void put_f64(std::string& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFFu));
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  std::uint64_t take(int n) {
    if (pos_ + static_cast<std::size_t>(n) > bytes_.size())
      throw Error(ErrorKind::ParseError, "checkpoint truncated at byte " + std::to_string(pos_));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_++])) << (8 * i);
    return v;
  }
  std::uint32_t u32() { return static_cast<std::uint32_t>(take(4)); }
  double f64() { return std::bit_cast<double>(take(8)); }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_checkpoint(const EncoderParams& params, const EncoderConfig& cfg) {
  std::string out(kCheckpointMagic.begin(), kCheckpointMagic.end());
  detail::put_u32(out, kCheckpointVersion);
  for (int v : {cfg.dim, cfg.heads, cfg.layers, cfg.patch_count, cfg.patch_input_dim, cfg.ffn_dim,
                cfg.group_boundaries[0], cfg.group_boundaries[1]})
    detail::put_u32(out, static_cast<std::uint32_t>(v));
  for_each_tensor(params, [&](const std::string&, int, TensorRole, const Matrix& t) {
    for (double v : t.flat()) detail::put_f64(out, v);
  });
  return out;
}

struct Checkpoint {
  EncoderConfig config;
  EncoderParams params;
};

inline Checkpoint deserialize_checkpoint(std::string_view bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kCheckpointMagic.data(), 4) != 0)
    throw Error(ErrorKind::ParseError, "not an MPSG checkpoint");
  detail::Reader r(bytes.substr(4));
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw Error(ErrorKind::ParseError, "unsupported checkpoint version " + std::to_string(version));
  Checkpoint ck;
  auto& c = ck.config;
  for (int* f : {&c.dim, &c.heads, &c.layers, &c.patch_count, &c.patch_input_dim, &c.ffn_dim,
                 &c.group_boundaries[0], &c.group_boundaries[1]})
    *f = static_cast<int>(r.u32());
  c.validate();
  // Shapes come from a fresh init; values are then overwritten.
  ck.params = init_params(c, 0);
  for_each_tensor(ck.params, [&](const std::string&, int, TensorRole, Matrix& t) {
    for (double& v : t.flat()) v = r.f64();
  });
  if (!r.done()) throw Error(ErrorKind::ParseError, "trailing bytes after checkpoint tensors");
  return ck;
}

/// Writes via a temporary file and rename.
inline void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw Error(ErrorKind::IoError, "cannot open " + tmp.string());
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw Error(ErrorKind::IoError, "write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw Error(ErrorKind::IoError, "rename to " + path.string() + ": " + ec.message());
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error(ErrorKind::IoError, "cannot open " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

/// FNV-1a over the checkpoint bytes; used as a parameter fingerprint.
inline std::uint64_t fingerprint(std::string_view bytes) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : bytes) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  return h;
}

inline std::uint64_t params_hash(const EncoderParams& p, const EncoderConfig& cfg) {
  return fingerprint(serialize_checkpoint(p, cfg));
}

}  // namespace mps::enc
