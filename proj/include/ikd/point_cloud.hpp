#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "ikd/binary_io.hpp"

namespace ikd {

struct Vec3 {
  double x = 0, y = 0, z = 0;
  friend bool operator==(const Vec3&, const Vec3&) = default;
};

/// One LiDAR return as stored on disk: coordinates in meters, intensity in
/// raw sensor units, return number as a small integer.
struct PointRecord {
  float x = 0, y = 0, z = 0;
  float intensity = 0;
  float return_number = 1;
  friend bool operator==(const PointRecord&, const PointRecord&) = default;
};

inline constexpr float kIntensityScale = 65535.0f;
inline constexpr float kReturnNumberScale = 7.0f;

float normalized_intensity(float raw);
float normalized_return_number(float raw);

struct PointCloud {
  std::vector<PointRecord> points;
  std::vector<std::uint8_t> labels;  // empty, or one class index per point

  std::size_t size() const { return points.size(); }
  bool has_labels() const { return !labels.empty(); }
  std::vector<Vec3> positions() const;

  /// Throws ContractError when empty, non-finite, or labels are out of range.
  void validate(std::size_t num_classes) const;
};

/// ".xyzp" point files. Text: one point per line, `x y z intensity
/// return_number [label]`, '#' comments. Binary: "XYZP" | u32 version |
/// u64 N | u8 has_label | N x (5 x f32 [+ u8 label]), little-endian.
inline constexpr std::uint32_t kXyzpVersion = 1;

void write_xyzp_text(std::ostream& os, const PointCloud& cloud);
void write_xyzp_binary(std::ostream& os, const PointCloud& cloud);
PointCloud read_xyzp(std::istream& is);

void save_xyzp(const std::string& path, const PointCloud& cloud, bool binary = true);
PointCloud load_xyzp(const std::string& path);

}  // namespace ikd
