#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "lumen/tensor.hpp"

namespace lumen {

// Binary parameter file:
//   "LMDT1"
//   repeated until EOF:
//     u32 name_length, name bytes (UTF-8), u32 rank, u32 dims[rank],
//     f32 values[prod(dims)]
// All integers and floats little-endian.
inline constexpr char kCheckpointMagic[] = "LMDT1";

std::string encode_checkpoint(const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> decode_checkpoint(const std::string& bytes);

void write_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> read_checkpoint(const std::filesystem::path& path);

// Text blocks ride along as rank-1 tensors holding one byte value per element.
NamedTensor text_entry(const std::string& name, const std::string& text);
std::string entry_text(const NamedTensor& entry);

}  // namespace lumen
