#pragma once

#include "unifusion/tensor.hpp"

#include <map>
#include <string>

namespace unifusion {

// Tensor file: a UTF-8 JSON header {name -> {shape, byte_offset}} terminated
// by a newline, then little-endian f64 blobs in header order. Offsets are
// relative to the first byte after the newline.
void save_tensor_file(const std::string& path, const std::map<std::string, Tensor>& entries);
std::map<std::string, Tensor> load_tensor_file(const std::string& path);

} // namespace unifusion
