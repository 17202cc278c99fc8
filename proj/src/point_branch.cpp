#include "ikd/point_branch.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace ikd {

SamplingTrace random_downsample(std::span<const Vec3> points, std::size_t ratio,
                                std::uint64_t seed) {
  const auto n = points.size();
  if (ratio == 0) throw ContractError("random_downsample: ratio must be positive");
  if (n < ratio)
    throw ContractError("random_downsample: N=" + std::to_string(n) + " < ratio " +
                        std::to_string(ratio));
  const auto keep = n / ratio;
  std::vector<std::int64_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < keep; ++i) {
    const auto j = i + static_cast<std::size_t>(rng() % (n - i));
    std::swap(perm[i], perm[j]);
  }
  SamplingTrace trace;
  trace.kept.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(keep));
  std::sort(trace.kept.begin(), trace.kept.end());

  std::vector<Vec3> kept_pts;
  kept_pts.reserve(keep);
  for (auto k : trace.kept) kept_pts.push_back(points[static_cast<std::size_t>(k)]);
  std::vector<std::int64_t> position_of(n, -1);
  for (std::size_t j = 0; j < keep; ++j)
    position_of[static_cast<std::size_t>(trace.kept[j])] = static_cast<std::int64_t>(j);

  KdTree tree(kept_pts);
  trace.nearest_kept.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (position_of[i] >= 0) {
      trace.nearest_kept[i] = position_of[i];
    } else {
      trace.nearest_kept[i] = tree.nearest(points[i], 1).front();
    }
  }
  return trace;
}

PointHierarchy build_hierarchy(std::span<const Vec3> points, std::size_t k, std::size_t depth,
                               std::size_t ratio, std::uint64_t seed) {
  PointHierarchy h;
  h.positions.emplace_back(points.begin(), points.end());
  for (std::size_t s = 0; s < depth; ++s) {
    const auto& level = h.positions.back();
    h.neighbors.push_back(knn_search(level, std::min(k, level.size())));
    auto trace = random_downsample(level, ratio, mix_seed(seed, "stage" + std::to_string(s)));
    std::vector<Vec3> next;
    next.reserve(trace.kept.size());
    for (auto i : trace.kept) next.push_back(level[static_cast<std::size_t>(i)]);
    h.traces.push_back(std::move(trace));
    h.positions.push_back(std::move(next));
  }
  return h;
}

template <typename T>
Tensor<T> relative_position_features(std::span<const Vec3> points, const NeighborIndex& nb) {
  if (nb.count != points.size())
    throw ContractError("relative_position_features: neighbor table covers " +
                        std::to_string(nb.count) + " points, cloud has " +
                        std::to_string(points.size()));
  std::vector<T> out(nb.count * nb.k * 10);
  for (std::size_t i = 0; i < nb.count; ++i) {
    const auto& p = points[i];
    for (std::size_t k = 0; k < nb.k; ++k) {
      const auto j = nb.index[i * nb.k + k];
      if (j < 0 || static_cast<std::size_t>(j) >= points.size())
        throw ContractError("relative_position_features: neighbor index " + std::to_string(j) +
                            " out of range");
      const auto& q = points[static_cast<std::size_t>(j)];
      const double dx = p.x - q.x, dy = p.y - q.y, dz = p.z - q.z;
      T* row = out.data() + (i * nb.k + k) * 10;
      const double v[10] = {p.x, p.y, p.z, q.x, q.y, q.z, dx, dy, dz,
                            std::sqrt(dx * dx + dy * dy + dz * dz)};
      for (int c = 0; c < 10; ++c) row[c] = static_cast<T>(v[c]);
    }
  }
  return Tensor<T>({nb.count * nb.k, 10}, std::move(out));
}

template <typename T>
Tensor<T> attention_pool(const Tensor<T>& features, const Linear<T>& scorer) {
  if (features.rank() != 3)
    throw ContractError("attention_pool: expects [N,K,d], got " + shape_str(features.shape()));
  const auto n = features.dim(0), k = features.dim(1), d = features.dim(2);
  auto flat = ops::reshape(features, Shape{n * k, d});
  auto scores = ops::softmax(ops::reshape(scorer(flat), Shape{n, k, d}), 1);
  return ops::sum_axis(ops::mul(features, scores), 1);
}

template <typename T>
LfaBlock<T>::LfaBlock(ParameterStore<T>& store, const std::string& name, std::size_t in,
                      std::size_t out)
    : encoding(store, name + ".locse", 10, in),
      scorer(store, name + ".score", 2 * in, 2 * in, false),
      project(store, name + ".proj", 2 * in, out, false),
      shortcut(store, name + ".short", in, out, false) {}

template <typename T>
Tensor<T> LfaBlock<T>::operator()(const Tensor<T>& features, std::span<const Vec3> points,
                                  const NeighborIndex& neighbors, Mode mode) {
  const auto n = neighbors.count, k = neighbors.k;
  const auto in = features.dim(1);
  auto r = encoding(relative_position_features<T>(points, neighbors), mode);  // [N*K, in]
  auto f = ops::gather_rows(features, neighbors.index);                       // [N*K, in]
  auto fk = ops::reshape(ops::concat<T>({r, f}, 1), Shape{n, k, 2 * in});
  auto pooled = attention_pool(fk, scorer);
  return ops::relu(ops::add(project(pooled, mode), shortcut(features, mode)));
}

template <typename T>
Tensor<T> interpolate_nearest(const Tensor<T>& coarse, const SamplingTrace& trace) {
  if (coarse.rank() != 2 || coarse.dim(0) != trace.kept.size())
    throw ContractError("interpolate_nearest: coarse features " + shape_str(coarse.shape()) +
                        " do not match a trace keeping " + std::to_string(trace.kept.size()) +
                        " points");
  return ops::gather_rows(coarse, trace.nearest_kept);
}

template <typename T>
DecoderBlock<T>::DecoderBlock(ParameterStore<T>& store, const std::string& name,
                              std::size_t coarse, std::size_t skip, std::size_t out)
    : mlp(store, name + ".mlp", coarse + skip, out) {}

template <typename T>
Tensor<T> DecoderBlock<T>::operator()(const Tensor<T>& coarse, const SamplingTrace& trace,
                                      const Tensor<T>& skip, Mode mode) {
  auto up = interpolate_nearest(coarse, trace);
  if (up.dim(0) != skip.dim(0))
    throw ContractError("decoder: trace maps " + std::to_string(up.dim(0)) +
                        " points but skip has " + std::to_string(skip.dim(0)));
  return mlp(ops::concat<T>({up, skip}, 1), mode);
}

std::size_t point_stage_width(const PointBranchConfig& config, std::size_t stage) {
  return config.base_width << (stage + 1);
}

template <typename T>
PointBranch<T>::PointBranch(ParameterStore<T>& store, const PointBranchConfig& config)
    : config_(config),
      input_(store, "pc.input", config.input_features, config.base_width) {
  std::size_t in = config.base_width;
  for (std::size_t s = 0; s < config.depth; ++s) {
    const auto out = point_stage_width(config, s);
    encoders_.emplace_back(store, "pc.enc" + std::to_string(s), in, out);
    in = out;
  }
  const auto deepest = point_stage_width(config, config.depth - 1);
  bottleneck_ = SharedMlp<T>(store, "pc.bottleneck", deepest, deepest);
  decoders_.resize(config.depth);
  std::size_t coarse = deepest;
  for (std::size_t d = config.depth; d-- > 0;) {
    const auto w = point_stage_width(config, d);
    decoders_[d] = DecoderBlock<T>(store, "pc.dec" + std::to_string(d), coarse, w, w);
    coarse = w;
  }
  const auto w0 = point_stage_width(config, 0);
  head_hidden_ = SharedMlp<T>(store, "pc.head_hidden", w0, w0);
  head_ = Linear<T>(store, "pc.head", w0, config.num_classes);
}

template <typename T>
PointBranchOutput<T> PointBranch<T>::operator()(const Tensor<T>& features,
                                                const PointHierarchy& h, Mode mode) {
  if (h.depth() != config_.depth)
    throw ContractError("point branch: hierarchy depth " + std::to_string(h.depth()) +
                        " != configured depth " + std::to_string(config_.depth));
  if (features.rank() != 2 || features.dim(0) != h.positions[0].size() ||
      features.dim(1) != config_.input_features)
    throw ContractError("point branch: features " + shape_str(features.shape()) +
                        " do not match " + std::to_string(h.positions[0].size()) + " points x " +
                        std::to_string(config_.input_features));
  PointBranchOutput<T> out;
  auto f = input_(features, mode);
  for (std::size_t s = 0; s < config_.depth; ++s) {
    auto e = encoders_[s](f, h.positions[s], h.neighbors[s], mode);
    out.encoder.push_back(e);
    f = ops::gather_rows(e, h.traces[s].kept);
  }
  auto prev = bottleneck_(f, mode);
  out.decoder.resize(config_.depth);
  for (std::size_t d = config_.depth; d-- > 0;) {
    prev = decoders_[d](prev, h.traces[d], out.encoder[d], mode);
    out.decoder[d] = prev;
  }
  out.logits = head_(head_hidden_(prev, mode));
  return out;
}

#define IKD_PB_INSTANTIATE(T)                                                                  \
  template Tensor<T> relative_position_features<T>(std::span<const Vec3>, const NeighborIndex&); \
  template Tensor<T> attention_pool<T>(const Tensor<T>&, const Linear<T>&);                    \
  template Tensor<T> interpolate_nearest<T>(const Tensor<T>&, const SamplingTrace&);           \
  template struct LfaBlock<T>;                                                                 \
  template struct DecoderBlock<T>;                                                             \
  template class PointBranch<T>;

IKD_PB_INSTANTIATE(float)
IKD_PB_INSTANTIATE(double)

#undef IKD_PB_INSTANTIATE

}  // namespace ikd
