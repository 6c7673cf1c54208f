#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "fedmoe/matrix.hpp"

namespace fedmoe {

/// A trainable tensor with its gradient accumulator. `layer` is the trunk
/// layer index for federated tensors and -1 for everything else.
struct Parameter {
  Parameter() = default;
  Parameter(std::string role, int layer, Matrix value);

  std::string role;
  int layer = -1;
  Matrix value;
  Matrix grad;

  void zero_grad() { grad.fill(0.0); }
};

using ParamRefs = std::vector<Parameter*>;

struct NamedTensor {
  int layer = -1;
  std::string role;
  Matrix value;

  bool operator==(const NamedTensor&) const = default;
};

using TensorList = std::vector<NamedTensor>;

TensorList snapshot(const ParamRefs& params);

/// Copies values into `params`; names, order and shapes must match exactly.
void load_into(const ParamRefs& params, const TensorList& tensors);

// Wire format, little-endian:
//   "FMTS" u32 version=1 u32 count
//   per tensor: i32 layer, u32 role_len, role bytes, u32 rows, u32 cols,
//               rows*cols f64 row-major
std::vector<unsigned char> serialize_tensors(const TensorList& tensors);
TensorList deserialize_tensors(std::span<const unsigned char> bytes);

void write_tensor_file(const std::filesystem::path& path, const TensorList& tensors);
TensorList read_tensor_file(const std::filesystem::path& path);

/// FNV-1a over the serialized bytes.
std::uint64_t tensor_hash(const TensorList& tensors);
std::string hash_hex(std::uint64_t h);

}  // namespace fedmoe
