#pragma once

// Weight checkpoint, version 1, all integers and floats little-endian:
//
//   magic        8 bytes  "TDMODEL1"
//   version      u32      1
//   config       14 x i32 image_channels image_size patch_size vision_width
//                         vision_layers vision_heads text_width text_layers
//                         text_heads embed_dim mlp_ratio n_classes
//                         n_prompt_tokens prompt_depth
//                2 x f64  logit_scale ln_eps
//   n_arrays     u32
//   per array    u16 name length, name bytes, u32 rows, u32 cols,
//                rows*cols f64 in row-major order
//
// Arrays appear in DualEncoder::visit_weights order. The model hash is the
// SHA-256 of the whole serialized checkpoint.

#include <string>
#include <vector>

#include "tokalign/binary_io.hpp"
#include "tokalign/model.hpp"

namespace tokalign {

std::vector<std::uint8_t> serialize_model(const DualEncoder& model);
DualEncoder deserialize_model(std::span<const std::uint8_t> bytes);

void save_model(const DualEncoder& model, const std::string& path);
DualEncoder load_model(const std::string& path);

io::Digest model_hash(const DualEncoder& model);

}  // namespace tokalign
