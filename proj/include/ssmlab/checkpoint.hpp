#pragma once

// Binary checkpoint, all integers little-endian:
//
//   magic      5 bytes "SSMB1"
//   config     10 x int64: vocab_size, d_model, d_inner, d_state, d_conv,
//              n_layers, dt_rank, attn_stride, seed, arch
//   count      uint64 number of tensors
//   tensor*    uint64 name length, UTF-8 name, uint64 rank, rank x uint64 dims,
//              product(dims) x float64 payload
//
// Tensors appear in named_parameters() order.

#include <filesystem>
#include <string>
#include <vector>

#include "ssmlab/model.hpp"

namespace ssmlab {

inline constexpr char kCheckpointMagic[] = "SSMB1";

std::vector<unsigned char> serialize_model(const Model& model);
Model deserialize_model(const std::vector<unsigned char>& bytes);

void save_checkpoint(const Model& model, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);

}  // namespace ssmlab
