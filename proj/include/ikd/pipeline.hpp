#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "ikd/gradcheck.hpp"
#include "ikd/image_io.hpp"
#include "ikd/ikd_net.hpp"
#include "ikd/metrics.hpp"

namespace ikd {

// Class scheme of the synthetic scenes.
inline constexpr std::uint8_t kOthers = 0, kGround = 1, kTree = 2, kBuilding = 3;
inline constexpr std::size_t kSceneClasses = 4;
const std::vector<std::string>& scene_class_names();

struct Scene {
  std::vector<float> image;            // [3, H, W], values in [0, 1]
  std::vector<std::uint8_t> labels;    // H*W class indices
  PointCloud cloud;                    // labelled
  RasterGrid grid;

  std::size_t height() const { return grid.height; }
  std::size_t width() const { return grid.width; }
  /// Throws ContractError on size mismatches, labels >= num_classes or
  /// points outside the grid.
  void validate(std::size_t num_classes = kSceneClasses) const;
};

struct SynthOptions {
  std::size_t size = 64;            // square scene, pixels per side
  double cell_size = 1.0;           // metres per pixel
  double point_density = 0.75;      // points per pixel
  // Objects per 64x64 pixels; scaled with the scene area.
  double buildings = 5.0, trees = 10.0, others = 8.0;
  double image_noise = 0.04;

  KeyValues to_key_values() const;
  static SynthOptions from_key_values(const KeyValues& kv);
  static const std::set<std::string>& keys();
};

/// Deterministic per seed. Image values are multiples of 1/255 so that a
/// saved scene reloads exactly.
Scene synth_scene(std::uint64_t seed, const SynthOptions& options = {});

struct TileWindow {
  std::size_t row = 0, col = 0;  // top-left pixel in the scene
  std::size_t size = 0;
};

struct TileSet {
  std::vector<TileWindow> windows;
  std::vector<std::vector<std::size_t>> point_indices;  // per window, ascending
};

/// Window starts along one axis: stride round(tile * (1 - overlap)), last
/// window clamped to the border.
std::vector<std::size_t> tile_offsets(std::size_t extent, std::size_t tile, double overlap);
TileSet tile_dataset(const Scene& scene, std::size_t tile, double overlap = 0.2);
Scene extract_tile(const Scene& scene, const TileWindow& window,
                   const std::vector<std::size_t>& point_indices);

struct Split {
  std::vector<std::size_t> train, val, test;
};
/// Seeded 8:1:1 split of n items (val and test take round(n/10) each).
Split split_811(std::size_t n, std::uint64_t seed);

/// Scene directory: image.ppm, labels.pgm, cloud.xyzp (binary), grid.txt,
/// and dsm.pgm (16-bit, elevation / dsm_scale) on save.
void save_scene(const Scene& scene, const std::string& dir);
Scene load_scene(const std::string& dir);
inline constexpr double kDsmScale = 0.01;  // metres per DSM count

Image16 dsm_image(const Scene& scene, std::size_t passes = 2);

NetInput<float> scene_input(const NetworkConfig& config, const Scene& tile, std::uint64_t seed);

struct TrainOptions {
  std::uint64_t steps = 200;
  std::size_t batch_size = 1;
  std::uint64_t checkpoint_every = 100;  // 0 = only at the end

  KeyValues to_key_values() const;
  static TrainOptions from_key_values(const KeyValues& kv);
  static const std::set<std::string>& keys();
};

/// Tile order for a global step: sample g = step * batch + j is taken from
/// the seeded permutation of epoch g / n.
std::vector<std::size_t> batch_indices(std::size_t tiles, std::size_t batch_size,
                                       std::uint64_t step, std::uint64_t seed);

struct TrainLogRow {
  std::uint64_t step = 0;
  LossBreakdown<float>::Values loss;
};

/// Runs optimizer steps until `optimizer.steps() == options.steps`. When
/// `out_dir` is non-empty, appends rows to out_dir/train_log.csv and writes
/// out_dir/checkpoint.ikdnet every checkpoint_every steps and at the end
/// (atomically; a failing step leaves the last good checkpoint). `on_step`
/// may be empty.
std::vector<TrainLogRow> train(IkdNet<float>& net, Optimizer& optimizer,
                               const std::vector<NetInput<float>>& tiles,
                               const TrainOptions& options, const std::string& out_dir = "",
                               const std::function<void(const TrainLogRow&)>& on_step = {});

/// Per-pixel argmax over classes; ties go to the lower class.
std::vector<std::uint8_t> argmax_labels(const Tensor<float>& probs);
std::vector<std::uint8_t> argmax_rows(const Tensor<float>& probs);

struct Evaluation {
  ConfusionMatrix image;
  ConfusionMatrix points;  // all zero for image-only models
};
Evaluation evaluate(IkdNet<float>& net, const std::vector<NetInput<float>>& tiles);

/// Fixed class palette: others gray, ground brown, tree green, building red.
/// Classes beyond 3 take further fixed colors (up to 8).
const std::vector<std::array<std::uint8_t, 3>>& class_palette();
Image8 colorize_labels(const std::vector<std::uint8_t>& labels, std::size_t height,
                       std::size_t width);
/// Inverse of colorize_labels; throws FormatError on a color outside the palette.
std::vector<std::uint8_t> decode_palette(const Image8& image);

Image8 label_image(const std::vector<std::uint8_t>& labels, std::size_t height, std::size_t width);
Image8 rgb_image(const std::vector<float>& image_chw, std::size_t height, std::size_t width);
std::vector<float> image_from_rgb(const Image8& rgb);

/// 256-entry pseudo-color table (blue -> gray -> red); entry 128 is mid-gray.
const std::array<std::array<std::uint8_t, 3>, 256>& pseudo_color_lut();
/// Channel mean, min-max stretch to 0..255 (constant map -> 128), LUT.
std::vector<std::uint8_t> stretch_feature_map(const Tensor<float>& map);
Image8 visualize_feature_map(const Tensor<float>& map);

/// 16x16 tile, 64 points, depth 3, widths 4, GKG at every level plus CKG.
NetworkConfig micro_network_config();
/// Gradient check of l_total over every parameter of a double-precision
/// network on one synthetic tile (square configs only).
GradCheckReport network_grad_check(const NetworkConfig& config, std::uint64_t seed,
                                   const GradCheckOptions& options);

}  // namespace ikd
