#pragma once

#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "ikd/binary_io.hpp"
#include "ikd/tensor.hpp"

namespace ikd {

/// Binary named-tensor archive:
///   "IKDT" | u32 version | u64 count |
///   count x ( u32 name_len | name bytes (UTF-8) | u32 rank | rank x u64 extent |
///             numel x f32 )
/// All integers and floats little-endian.
constexpr std::uint32_t kCheckpointVersion = 1;

using NamedTensors = std::vector<std::pair<std::string, Tensor<float>>>;

void write_tensors(std::ostream& os, const NamedTensors& tensors);
NamedTensors read_tensors(std::istream& is);

void save_tensors(const std::string& path, const NamedTensors& tensors);
NamedTensors load_tensors(const std::string& path);

}  // namespace ikd
