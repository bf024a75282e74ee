#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "mtlab/tensor.h"

namespace mtlab {

struct TensorBlock {
  std::string name;
  Shape shape;
  std::vector<double> data;
};

// Binary container shared by model and training checkpoints.
//
//   "MTLBCKPT" | u32 version | u64 header_len | header (JSON text)
//   u64 block_count | per block: u32 name_len, name, u32 rank, u64 dims[rank],
//                                f64 data[numel]
//   u64 payload_len | u32 crc32(payload)
//
// All integers and floats little-endian; payload is every byte before the
// trailer.
struct CheckpointFile {
  nlohmann::json header;
  std::vector<TensorBlock> blocks;

  const TensorBlock& block(std::string_view name) const;
};

std::string encode_checkpoint(const CheckpointFile& file);
// Throws on bad magic, length mismatch, checksum mismatch or truncation.
CheckpointFile decode_checkpoint(std::string_view bytes);

void write_checkpoint(const CheckpointFile& file, const std::filesystem::path& path);
CheckpointFile read_checkpoint(const std::filesystem::path& path);

// Whole-file helpers used across the project.
std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view contents);

}  // namespace mtlab
