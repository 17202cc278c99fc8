#include "ikd/point_cloud.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "ikd/tensor.hpp"

namespace ikd {

float normalized_intensity(float raw) {
  return std::clamp(raw / kIntensityScale, 0.0f, 1.0f);
}

float normalized_return_number(float raw) {
  return std::clamp(raw / kReturnNumberScale, 0.0f, 1.0f);
}

std::vector<Vec3> PointCloud::positions() const {
  std::vector<Vec3> out;
  out.reserve(points.size());
  for (const auto& p : points) out.push_back({p.x, p.y, p.z});
  return out;
}

void PointCloud::validate(std::size_t num_classes) const {
  if (points.empty()) throw ContractError("point cloud is empty");
  if (has_labels() && labels.size() != points.size())
    throw ContractError("point cloud has " + std::to_string(labels.size()) + " labels for " +
                        std::to_string(points.size()) + " points");
  for (std::size_t i = 0; i < points.size(); ++i) {
    const auto& p = points[i];
    if (!std::isfinite(p.x) || !std::isfinite(p.y) || !std::isfinite(p.z))
      throw ContractError("point " + std::to_string(i) + " has non-finite coordinates");
  }
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] >= num_classes)
      throw ContractError("point " + std::to_string(i) + " label " + std::to_string(labels[i]) +
                          " >= class count " + std::to_string(num_classes));
}

void write_xyzp_text(std::ostream& os, const PointCloud& cloud) {
  os << "# x y z intensity return_number" << (cloud.has_labels() ? " label" : "") << '\n';
  os << std::setprecision(9);
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const auto& p = cloud.points[i];
    os << p.x << ' ' << p.y << ' ' << p.z << ' ' << p.intensity << ' ' << p.return_number;
    if (cloud.has_labels()) os << ' ' << int(cloud.labels[i]);
    os << '\n';
  }
}

void write_xyzp_binary(std::ostream& os, const PointCloud& cloud) {
  os.write("XYZP", 4);
  bin::put_u32(os, kXyzpVersion);
  bin::put_u64(os, cloud.size());
  bin::put_u8(os, cloud.has_labels() ? 1 : 0);
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const auto& p = cloud.points[i];
    for (float v : {p.x, p.y, p.z, p.intensity, p.return_number}) bin::put_f32(os, v);
    if (cloud.has_labels()) bin::put_u8(os, cloud.labels[i]);
  }
}

namespace {

PointCloud read_binary(std::istream& is) {
  bin::Reader r(is, "xyzp");
  char magic[4];
  r.bytes(magic, 4);
  const auto version = r.u32();
  if (version != kXyzpVersion)
    throw FormatError("xyzp: unsupported version " + std::to_string(version) + " at byte offset 4");
  const auto n = r.u64();
  const bool has_label = r.u8() != 0;
  PointCloud cloud;
  cloud.points.reserve(std::min<std::uint64_t>(n, 1u << 24));
  for (std::uint64_t i = 0; i < n; ++i) {
    PointRecord p;
    p.x = r.f32();
    p.y = r.f32();
    p.z = r.f32();
    p.intensity = r.f32();
    p.return_number = r.f32();
    cloud.points.push_back(p);
    if (has_label) cloud.labels.push_back(r.u8());
  }
  return cloud;
}

PointCloud read_text(std::istream& is) {
  PointCloud cloud;
  std::string line;
  std::size_t lineno = 0;
  int fields_seen = -1;
  while (std::getline(is, line)) {
    ++lineno;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream ls(line);
    std::vector<double> v;
    std::string tok;
    while (ls >> tok) {
      try {
        std::size_t used = 0;
        v.push_back(std::stod(tok, &used));
        if (used != tok.size()) throw std::invalid_argument(tok);
      } catch (const std::exception&) {
        throw FormatError("xyzp: line " + std::to_string(lineno) + ": cannot parse '" + tok + "'");
      }
    }
    if (v.size() != 5 && v.size() != 6)
      throw FormatError("xyzp: line " + std::to_string(lineno) + ": expected 5 or 6 fields, got " +
                        std::to_string(v.size()));
    if (fields_seen >= 0 && static_cast<int>(v.size()) != fields_seen)
      throw FormatError("xyzp: line " + std::to_string(lineno) +
                        ": label column present on some lines only");
    fields_seen = static_cast<int>(v.size());
    cloud.points.push_back({float(v[0]), float(v[1]), float(v[2]), float(v[3]), float(v[4])});
    if (v.size() == 6) {
      if (v[5] < 0 || v[5] > 255 || v[5] != std::floor(v[5]))
        throw FormatError("xyzp: line " + std::to_string(lineno) + ": invalid label");
      cloud.labels.push_back(static_cast<std::uint8_t>(v[5]));
    }
  }
  return cloud;
}

}  // namespace

PointCloud read_xyzp(std::istream& is) {
  char head[4] = {0, 0, 0, 0};
  is.read(head, 4);
  const auto got = is.gcount();
  is.clear();
  is.seekg(0);
  if (got == 4 && std::memcmp(head, "XYZP", 4) == 0) return read_binary(is);
  return read_text(is);
}

void save_xyzp(const std::string& path, const PointCloud& cloud, bool binary) {
  std::ofstream os(path, binary ? std::ios::binary : std::ios::out);
  if (!os) throw FormatError("xyzp: cannot open '" + path + "' for writing");
  if (binary)
    write_xyzp_binary(os, cloud);
  else
    write_xyzp_text(os, cloud);
}

PointCloud load_xyzp(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("xyzp: cannot open '" + path + "'");
  return read_xyzp(is);
}

}  // namespace ikd
