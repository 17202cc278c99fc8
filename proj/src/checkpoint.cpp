#include "ikd/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "ikd/binary_io.hpp"

namespace ikd {

void write_tensors(std::ostream& os, const NamedTensors& tensors) {
  os.write("IKDT", 4);
  bin::put_u32(os, kCheckpointVersion);
  bin::put_u64(os, tensors.size());
  for (const auto& [name, t] : tensors) {
    bin::put_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    bin::put_u32(os, static_cast<std::uint32_t>(t.rank()));
    for (auto e : t.shape()) bin::put_u64(os, e);
    for (float v : t.data()) bin::put_f32(os, v);
  }
  if (!os) throw FormatError("checkpoint: write failed");
}

NamedTensors read_tensors(std::istream& is) {
  bin::Reader r(is, "checkpoint");
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, "IKDT", 4) != 0) throw FormatError("checkpoint: bad magic at offset 0");
  const auto version = r.u32();
  if (version != kCheckpointVersion)
    throw FormatError("checkpoint: unsupported version " + std::to_string(version));
  const auto count = r.u64();
  NamedTensors out;
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto len = r.u32();
    std::string name(len, '\0');
    r.bytes(name.data(), len);
    const auto rank = r.u32();
    Shape shape(rank);
    for (auto& e : shape) e = r.u64();
    std::vector<float> data(shape_numel(shape));
    for (auto& v : data) v = r.f32();
    out.emplace_back(std::move(name), Tensor<float>(std::move(shape), std::move(data)));
  }
  return out;
}

void save_tensors(const std::string& path, const NamedTensors& tensors) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("checkpoint: cannot open '" + path + "' for writing");
  write_tensors(os, tensors);
}

NamedTensors load_tensors(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("checkpoint: cannot open '" + path + "'");
  return read_tensors(is);
}

}  // namespace ikd
