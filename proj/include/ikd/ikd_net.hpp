#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ikd/config.hpp"
#include "ikd/dimension_sensor.hpp"
#include "ikd/fusion.hpp"
#include "ikd/objectives.hpp"
#include "ikd/point_branch.hpp"

namespace ikd {

struct NetworkConfig {
  std::size_t num_classes = 4;
  std::size_t height = 64, width = 64;
  std::size_t points = 2048;  // points sampled per tile (all if fewer)
  std::size_t neighbors = 16;
  std::size_t depth = 4;
  std::size_t image_base_width = 16;
  std::size_t point_base_width = 8;
  // Decoder fusion: the deepest gkg_count levels use GKG, the next
  // cat_count levels plain concatenation.
  std::size_t gkg_count = 4;
  std::size_t cat_count = 0;
  bool ckg = true;
  bool image_only = false;
  std::size_t passes_full = 2;
  std::size_t passes_coarse = 1;
  bool ds_gradient = true;
  bool gkg_force_open = false;  // F_global := 1, for ablation and tests
  LossTerms loss;
  std::uint64_t seed = 0;

  void validate() const;
  KeyValues to_key_values() const;
  static NetworkConfig from_key_values(const KeyValues& kv);
  static const std::set<std::string>& keys();

  std::size_t passes_at(std::size_t level) const { return level == 0 ? passes_full : passes_coarse; }
  std::size_t image_width_at(std::size_t level) const { return image_base_width << level; }
  std::size_t point_width_at(std::size_t level) const;

  enum class Fusion { None, Gkg, Cat };
  Fusion fusion_at(std::size_t level) const;
  /// Channels leaving decoder level d after fusion.
  std::size_t fused_width_at(std::size_t level) const;
};

/// One tile in network-ready form. Point positions are tile-local: x, y
/// relative to the grid origin, z relative to the lowest point.
template <typename T>
struct NetInput {
  Tensor<T> image;                        // [3, H, W]
  RasterGrid grid;                        // tile-local, origin (0, 0)
  PointHierarchy hierarchy;               // empty for image-only models
  Tensor<T> point_features;               // [N, 5]
  std::vector<std::uint8_t> pixel_labels; // H*W, or empty
  std::vector<std::uint8_t> point_labels; // N, or empty
};

inline constexpr std::size_t kDownsampleRatio = 4;
inline constexpr double kElevationScale = 10.0;

/// Builds the network input for one tile. Throws ContractError when the
/// image or labels do not match the config or a point lies outside `grid`.
/// Clouds larger than config.points are subsampled with a seeded draw;
/// points without labels take the label of the pixel they project to.
template <typename T>
NetInput<T> prepare_input(const NetworkConfig& config, const std::vector<float>& image_chw,
                          const PointCloud& cloud, const RasterGrid& grid,
                          const std::vector<std::uint8_t>& pixel_labels, std::uint64_t seed);

template <typename T>
struct ForwardResult {
  Tensor<T> logits;           // [N_cls, H, W]
  Tensor<T> p_img;            // [N_cls, H, W]
  Tensor<T> p_pc_points;      // [N, N_cls]
  Tensor<T> p_pc_projected;   // [N_cls, H, W]
  std::vector<std::uint8_t> hole_mask;  // residual holes of the projection
  std::map<std::string, Tensor<T>> maps;  // intermediate maps by name
};

template <typename T>
class IkdNet {
 public:
  explicit IkdNet(const NetworkConfig& config);

  ForwardResult<T> forward(const NetInput<T>& input, Mode mode);
  LossBreakdown<T> loss(const ForwardResult<T>& out, const NetInput<T>& input) const;

  const NetworkConfig& config() const { return config_; }
  ParameterStore<T>& store() { return store_; }
  const ParameterStore<T>& store() const { return store_; }

 private:
  struct Block {
    ConvBnRelu<T> a, b;
    Tensor<T> operator()(const Tensor<T>& x, Mode mode) { return b(a(x, mode), mode); }
  };

  NetworkConfig config_;
  ParameterStore<T> store_;
  std::vector<Block> encoder_;
  Block bottleneck_;
  std::vector<Block> decoder_;  // index = level
  PointBranch<T> point_;
  std::vector<GkgGate<T>> gkg_;  // index = level (unused levels left empty)
  CkgGate<T> ckg_;
  Conv2d<T> head_;
};

struct OptimizerConfig {
  enum class Kind { Adam, Sgd };
  Kind kind = Kind::Adam;
  double learning_rate = 1e-3;
  double beta1 = 0.9, beta2 = 0.999, epsilon = 1e-8;
  double momentum = 0.9;
  double weight_decay = 0.0;

  /// Adam: lr 1e-3, no weight decay. SGD: lr 0.01, momentum 0.9, weight decay 1e-4.
  static OptimizerConfig defaults(Kind kind);
  KeyValues to_key_values() const;
  static OptimizerConfig from_key_values(const KeyValues& kv);
  static const std::set<std::string>& keys();
};

class Optimizer {
 public:
  explicit Optimizer(const OptimizerConfig& config = {}) : config_(config) {}

  /// One update of every parameter that received a gradient.
  void step(ParameterStore<float>& store);
  std::uint64_t steps() const { return steps_; }
  const OptimizerConfig& config() const { return config_; }

  NamedTensors export_state() const;
  void import_state(const NamedTensors& tensors, std::uint64_t steps);

 private:
  OptimizerConfig config_;
  std::uint64_t steps_ = 0;
  std::map<std::string, std::vector<float>> first_, second_;
};

/// Forward, holistic loss, backward and one optimizer update over a batch;
/// gradients are averaged over the batch. Returns the batch-mean terms.
/// A non-finite term raises NumericFault naming it; parameters stay untouched.
LossBreakdown<float>::Values train_step(IkdNet<float>& net,
                                        const std::vector<const NetInput<float>*>& batch,
                                        Optimizer& optimizer);

/// Checkpoint file: "IKDNET 1" line, `key = value` lines for the network
/// and optimizer settings plus `step`, a "---" line, then the tensor archive
/// (parameters, batch-norm buffers, optimizer moments).
void save_checkpoint(const std::string& path, const IkdNet<float>& net, const Optimizer& optimizer);

struct LoadedCheckpoint {
  NetworkConfig config;
  OptimizerConfig optimizer_config;
  std::uint64_t step = 0;
  NamedTensors tensors;
};

LoadedCheckpoint load_checkpoint(const std::string& path);
/// Restores parameters and buffers into `net` and state into `optimizer`.
void restore(const LoadedCheckpoint& ckpt, IkdNet<float>& net, Optimizer& optimizer);

}  // namespace ikd
