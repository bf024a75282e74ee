#include "mtlab/checkpoint.h"

#include <bit>
#include <fstream>
#include <sstream>

#include <fmt/format.h>
#include <zlib.h>

namespace mtlab {
namespace {

constexpr std::string_view kMagic = "MTLBCKPT";
constexpr std::uint32_t kVersion = 1;
constexpr std::size_t kTrailerSize = 8 + 4;

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  std::uint64_t u64() { return read_le(8); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(read_le(4)); }
  double f64() { return std::bit_cast<double>(read_le(8)); }
  std::string_view take(std::size_t n) {
    need(n);
    std::string_view s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw Error("checkpoint: truncated payload");
  }
  std::uint64_t read_le(std::size_t n) {
    need(n);
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < n; ++i) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += n;
    return v;
  }

  std::string_view bytes_;
  std::size_t pos_ = 0;
};

std::uint32_t crc_of(std::string_view bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks.
  std::size_t pos = 0;
  while (pos < bytes.size()) {
    const std::size_t n = std::min<std::size_t>(bytes.size() - pos, 1u << 30);
    crc = crc32(crc, reinterpret_cast<const Bytef*>(bytes.data() + pos), static_cast<uInt>(n));
    pos += n;
  }
  return static_cast<std::uint32_t>(crc);
}

}  // namespace

const TensorBlock& CheckpointFile::block(std::string_view name) const {
  for (const auto& b : blocks)
    if (b.name == name) return b;
  throw Error(fmt::format("checkpoint: missing block '{}'", name));
}

std::string encode_checkpoint(const CheckpointFile& file) {
  std::string out(kMagic);
  put_u32(out, kVersion);
  const std::string header = file.header.dump();
  put_u64(out, header.size());
  out += header;
  put_u64(out, file.blocks.size());
  for (const auto& b : file.blocks) {
    if (shape_numel(b.shape) != b.data.size()) {
      throw Error(fmt::format("checkpoint: block '{}' shape {} holds {} values", b.name,
                              shape_string(b.shape), b.data.size()));
    }
    put_u32(out, static_cast<std::uint32_t>(b.name.size()));
    out += b.name;
    put_u32(out, static_cast<std::uint32_t>(b.shape.size()));
    for (std::size_t d : b.shape) put_u64(out, d);
    for (double v : b.data) put_u64(out, std::bit_cast<std::uint64_t>(v));
  }
  const std::uint32_t crc = crc_of(out);
  const std::uint64_t payload = out.size();
  put_u64(out, payload);
  put_u32(out, crc);
  return out;
}

CheckpointFile decode_checkpoint(std::string_view bytes) {
  if (bytes.size() < kMagic.size() + kTrailerSize || bytes.substr(0, kMagic.size()) != kMagic) {
    throw Error("checkpoint: not an mtlab checkpoint (bad magic or too short)");
  }
  Reader trailer(bytes.substr(bytes.size() - kTrailerSize));
  const std::uint64_t payload_len = trailer.u64();
  const std::uint32_t stored_crc = trailer.u32();
  if (payload_len != bytes.size() - kTrailerSize) {
    throw Error(fmt::format("checkpoint: length mismatch (recorded {}, found {}); file truncated or corrupt",
                            payload_len, bytes.size() - kTrailerSize));
  }
  const std::string_view payload = bytes.substr(0, payload_len);
  if (crc_of(payload) != stored_crc) throw Error("checkpoint: checksum mismatch; file corrupt");

  Reader r(payload);
  r.take(kMagic.size());
  const std::uint32_t version = r.u32();
  if (version != kVersion) throw Error(fmt::format("checkpoint: unsupported version {}", version));
  CheckpointFile file;
  const std::uint64_t header_len = r.u64();
  file.header = nlohmann::json::parse(r.take(header_len));
  const std::uint64_t count = r.u64();
  for (std::uint64_t i = 0; i < count; ++i) {
    TensorBlock b;
    b.name = std::string(r.take(r.u32()));
    const std::uint32_t rank = r.u32();
    for (std::uint32_t k = 0; k < rank; ++k) b.shape.push_back(r.u64());
    const std::size_t n = shape_numel(b.shape);
    if (n > r.remaining() / 8) throw Error("checkpoint: truncated payload");
    b.data.resize(n);
    for (double& v : b.data) v = r.f64();
    file.blocks.push_back(std::move(b));
  }
  if (r.remaining() != 0) throw Error("checkpoint: trailing bytes after last block");
  return file;
}

void write_checkpoint(const CheckpointFile& file, const std::filesystem::path& path) {
  write_file(path, encode_checkpoint(file));
}

CheckpointFile read_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file(path)); }

std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error(fmt::format("cannot open {}", path.string()));
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, std::string_view contents) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error(fmt::format("cannot write {}", path.string()));
  f.write(contents.data(), static_cast<std::streamsize>(contents.size()));
  if (!f) throw Error(fmt::format("failed writing {}", path.string()));
}

}  // namespace mtlab
