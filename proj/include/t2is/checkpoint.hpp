#pragma once

#include <iosfwd>
#include <string>

#include "t2is/model.hpp"

namespace t2is {

// Binary checkpoint, little endian:
//
//   magic      8 bytes  "T2ISCKPT"
//   version    u32      1
//   config     u32 length + UTF-8 JSON object
//   count      u32      number of tensors
//   per tensor u32 name length, name bytes, u32 rank, rank × u64 dims,
//              numel × f32 values (row major)
//
// Tensors appear in ModelParams::for_each order. Loading checks names and
// shapes against the config stored in the same file.
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(std::ostream& out, const ModelParams<float>& params);
ModelParams<float> load_checkpoint(std::istream& in);

void save_checkpoint_file(const std::string& path, const ModelParams<float>& params);
ModelParams<float> load_checkpoint_file(const std::string& path);

std::string config_to_json(const ModelConfig& config);
ModelConfig config_from_json(const std::string& text);

}  // namespace t2is
