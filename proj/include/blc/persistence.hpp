#pragma once

// BLT1 tensor files and checkpoint directories.
//
// BLT1 layout (all integers little-endian):
//   bytes 0..3   magic "BLT1" (0x42 0x4C 0x54 0x31)
//   byte  4      dtype: 0 = float32, 1 = float64
//   byte  5      order, 1..4
//   bytes 6..7   reserved, zero
//   then         order x u64 extents
//   then         row-major IEEE-754 payload, 4 or 8 bytes per value
//
// A checkpoint directory holds one BLT1 file per parameter plus
// manifest.json, which is written last through an atomic rename.

#include "blc/tensor.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace blc {

inline constexpr int kManifestVersion = 1;
inline constexpr const char* kManifestName = "manifest.json";

std::vector<std::uint8_t> encode_tensor(const Tensor& t);
/// Validates magic, dtype, order, reserved bytes and payload length before
/// allocating. Format, Version or Length errors.
Tensor decode_tensor(std::span<const std::uint8_t> bytes);

void write_tensor(const Tensor& t, const std::filesystem::path& path);
Tensor read_tensor(const std::filesystem::path& path);

std::string sha256_hex(std::span<const std::uint8_t> bytes);

struct Checkpoint {
  std::string arch;
  std::uint64_t seed = 0;
  /// Resolved configuration echo plus model metadata (shapes, flags).
  nlohmann::json config = nlohmann::json::object();
  std::map<std::string, Tensor> tensors;
};

void write_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& dir);
/// Integrity error on a missing file or hash mismatch (naming the tensor),
/// Version error on an unsupported manifest version.
Checkpoint read_checkpoint(const std::filesystem::path& dir);

/// File name used for a parameter, e.g. "mlp.W_I1" -> "mlp.W_I1.blt".
std::string tensor_file_name(const std::string& param);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace blc
