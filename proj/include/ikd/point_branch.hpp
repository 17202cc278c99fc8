#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "ikd/knn.hpp"
#include "ikd/layers.hpp"

namespace ikd {

/// Result of one random downsampling step.
struct SamplingTrace {
  std::vector<std::int64_t> kept;          // ascending indices into the stage input
  std::vector<std::int64_t> nearest_kept;  // per input point: position in `kept` of its nearest kept point
};

/// Keeps floor(N/ratio) points uniformly without replacement; every input
/// point is mapped to its nearest kept point (ties by lower index).
SamplingTrace random_downsample(std::span<const Vec3> points, std::size_t ratio,
                                std::uint64_t seed);

/// Geometry of the encoder stages. Stage s holds floor(N / ratio^s) points.
struct PointHierarchy {
  std::vector<std::vector<Vec3>> positions;  // depth + 1 levels
  std::vector<NeighborIndex> neighbors;      // depth levels (k clipped to the level size)
  std::vector<SamplingTrace> traces;         // depth transitions

  std::size_t depth() const { return traces.size(); }
};

PointHierarchy build_hierarchy(std::span<const Vec3> points, std::size_t k, std::size_t depth,
                               std::size_t ratio, std::uint64_t seed);

/// Relative point position encoding input: for every (i, k) the 10-vector
/// [p_i, p_i^k, p_i - p_i^k, |p_i - p_i^k|], as an [N*K, 10] constant.
template <typename T>
Tensor<T> relative_position_features(std::span<const Vec3> points, const NeighborIndex& neighbors);

/// Softmax-weighted sum over the neighbor axis. features: [N, K, d];
/// scorer maps d -> d. Returns [N, d].
template <typename T>
Tensor<T> attention_pool(const Tensor<T>& features, const Linear<T>& scorer);

/// Local feature aggregation: spatial encoding of each neighborhood,
/// concatenation with the neighbors' features, attention pooling, and a
/// residual projection to the output width.
template <typename T>
struct LfaBlock {
  LfaBlock() = default;
  LfaBlock(ParameterStore<T>& store, const std::string& name, std::size_t in, std::size_t out);

  /// features: [N, in] -> [N, out]
  Tensor<T> operator()(const Tensor<T>& features, std::span<const Vec3> points,
                       const NeighborIndex& neighbors, Mode mode);

  SharedMlp<T> encoding;  // 10 -> in
  Linear<T> scorer;       // 2*in -> 2*in
  SharedMlp<T> project;   // 2*in -> out, no activation
  SharedMlp<T> shortcut;  // in -> out, no activation
};

/// Nearest-point interpolation of coarse features onto the finer stage,
/// concatenated with the stage's skip features, then a shared MLP.
template <typename T>
struct DecoderBlock {
  DecoderBlock() = default;
  DecoderBlock(ParameterStore<T>& store, const std::string& name, std::size_t coarse,
               std::size_t skip, std::size_t out);

  Tensor<T> operator()(const Tensor<T>& coarse, const SamplingTrace& trace,
                       const Tensor<T>& skip, Mode mode);

  SharedMlp<T> mlp;
};

/// Gathers coarse rows onto the fine stage: row i = coarse[nearest_kept[i]].
template <typename T>
Tensor<T> interpolate_nearest(const Tensor<T>& coarse, const SamplingTrace& trace);

struct PointBranchConfig {
  std::size_t input_features = 5;
  std::size_t base_width = 8;
  std::size_t depth = 4;
  std::size_t num_classes = 4;
};

/// Width of encoder stage s: base * 2^(s+1).
std::size_t point_stage_width(const PointBranchConfig& config, std::size_t stage);

template <typename T>
struct PointBranchOutput {
  std::vector<Tensor<T>> encoder;  // per stage s: [N_s, width(s)]
  std::vector<Tensor<T>> decoder;  // per depth d: [N_d, width(d)]
  Tensor<T> logits;                // [N, num_classes]
};

template <typename T>
class PointBranch {
 public:
  PointBranch() = default;
  PointBranch(ParameterStore<T>& store, const PointBranchConfig& config);

  /// features: [N, input_features] on hierarchy level 0.
  PointBranchOutput<T> operator()(const Tensor<T>& features, const PointHierarchy& hierarchy,
                                  Mode mode);

  const PointBranchConfig& config() const { return config_; }

 private:
  PointBranchConfig config_;
  SharedMlp<T> input_;
  std::vector<LfaBlock<T>> encoders_;
  SharedMlp<T> bottleneck_;
  std::vector<DecoderBlock<T>> decoders_;  // index d
  SharedMlp<T> head_hidden_;
  Linear<T> head_;
};

}  // namespace ikd
