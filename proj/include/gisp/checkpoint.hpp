#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "gisp/model.hpp"

namespace gisp {

inline constexpr char kCheckpointMagic[8] = {'G', 'I', 'S', 'P', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

// Binary checkpoint, all integers and floats little-endian:
//
//   offset  size  field
//   0       8     magic "GISPCKPT"
//   8       4     u32 version (1)
//   12      28    i32 n_layers, n_heads, d_model, d_head, d_ff, vocab_size, max_seq_len
//   40      8     u64 rng_seed
//   48      4     u32 per_layer (0 = uniform widths, 1 = table follows)
//   52      8*L   per_layer == 1 only: i32 heads, i32 ff for each layer
//   ..      8     u64 parameter count P
//   ..      8*P   f64 parameters in TransformerWeights::for_each order
struct Checkpoint {
  ModelConfig config;
  TransformerWeights weights;
};

std::vector<std::uint8_t> serialize_checkpoint(const TransformerWeights& weights, const ModelConfig& config);
Checkpoint parse_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const std::filesystem::path& path, const TransformerWeights& weights,
                     const ModelConfig& config);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// FNV-1a 64 over the serialized bytes.
std::uint64_t fnv1a64(const std::vector<std::uint8_t>& bytes);
std::uint64_t model_fingerprint(const TransformerWeights& weights, const ModelConfig& config);
std::string fingerprint_hex(std::uint64_t fp);
std::uint64_t parse_fingerprint_hex(const std::string& text);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
// Writes to a temporary sibling then renames over the target.
void write_file_atomic(const std::filesystem::path& path, const std::string& contents);
void write_file_atomic(const std::filesystem::path& path, const std::vector<std::uint8_t>& contents);

}  // namespace gisp
