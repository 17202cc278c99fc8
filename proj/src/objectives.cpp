#include "ikd/objectives.hpp"

#include <cmath>
#include <iomanip>
#include <ostream>

namespace ikd {

namespace {

template <typename T>
void require_rows_normalized(std::string_view op, const Tensor<T>& probs) {
  const auto m = probs.dim(0), c = probs.dim(1);
  const auto v = probs.data();
  for (std::size_t i = 0; i < m; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < c; ++j) s += static_cast<double>(v[i * c + j]);
    if (std::abs(s - 1.0) > 1e-4)
      throw ContractError(std::string(op) + ": distribution " + std::to_string(i) + " sums to " +
                          std::to_string(s));
  }
}

std::vector<std::int64_t> kept_rows(std::size_t m, std::span<const std::uint8_t> ignore,
                                    std::string_view op) {
  if (!ignore.empty() && ignore.size() != m)
    throw ContractError(std::string(op) + ": mask has " + std::to_string(ignore.size()) +
                        " entries for " + std::to_string(m) + " elements");
  std::vector<std::int64_t> rows;
  rows.reserve(m);
  for (std::size_t i = 0; i < m; ++i)
    if (ignore.empty() || !ignore[i]) rows.push_back(static_cast<std::int64_t>(i));
  return rows;
}

// [C, H, W] -> [H*W, C]
template <typename T>
Tensor<T> pixels_as_rows(const Tensor<T>& map) {
  const auto c = map.dim(0), hw = map.dim(1) * map.dim(2);
  return ops::transpose(ops::reshape(map, Shape{c, hw}));
}

}  // namespace

template <typename T>
Tensor<T> cross_entropy_loss(const Tensor<T>& probs, std::span<const std::uint8_t> labels,
                             std::span<const std::uint8_t> ignore) {
  if (probs.rank() != 2 || probs.dim(0) != labels.size())
    throw ContractError("cross_entropy: probabilities " + shape_str(probs.shape()) + " for " +
                        std::to_string(labels.size()) + " labels");
  require_rows_normalized("cross_entropy", probs);
  auto rows = kept_rows(labels.size(), ignore, "cross_entropy");
  if (rows.empty()) return Tensor<T>::scalar(T(0));
  std::vector<std::int64_t> cols;
  cols.reserve(rows.size());
  for (auto r : rows) {
    const auto y = labels[static_cast<std::size_t>(r)];
    if (y >= probs.dim(1))
      throw ContractError("cross_entropy: label " + std::to_string(y) + " at element " +
                          std::to_string(r) + " >= class count " + std::to_string(probs.dim(1)));
    cols.push_back(y);
  }
  auto p = ops::gather_rows(probs, rows);
  auto logp = ops::log(ops::clamp_min(ops::pick(p, cols), T(kProbabilityFloor)));
  return ops::scale(ops::mean(logp), T(-1));
}

template <typename T>
Tensor<T> cross_entropy_map(const Tensor<T>& probs, std::span<const std::uint8_t> labels,
                            std::span<const std::uint8_t> ignore) {
  if (probs.rank() != 3)
    throw ContractError("cross_entropy: expects [C,H,W], got " + shape_str(probs.shape()));
  return cross_entropy_loss(pixels_as_rows(probs), labels, ignore);
}

template <typename T>
Tensor<T> pixel_similarity_loss(const Tensor<T>& p_img, const Tensor<T>& p_pc,
                                std::span<const std::uint8_t> hole_mask, bool detach_target) {
  if (p_img.rank() != 3 || p_img.shape() != p_pc.shape())
    throw ContractError("pixel_similarity: incompatible shapes " + shape_str(p_img.shape()) +
                        " and " + shape_str(p_pc.shape()));
  const auto hw = p_img.dim(1) * p_img.dim(2);
  auto rows = kept_rows(hw, hole_mask, "pixel_similarity");
  if (rows.empty()) return Tensor<T>::scalar(T(0));
  const auto floor = T(kProbabilityFloor);
  auto p = ops::clamp_min(pixels_as_rows(p_img), floor);
  auto q = ops::clamp_min(pixels_as_rows(detach_target ? p_pc.detach() : p_pc), floor);
  auto kl = ops::sum_axis(ops::mul(p, ops::sub(ops::log(p), ops::log(q))), 1);  // [HW]
  auto valid = ops::gather_rows(ops::reshape(kl, Shape{hw, 1}), rows);
  return ops::mean(valid);
}

template <typename T>
typename LossBreakdown<T>::Values LossBreakdown<T>::values() const {
  return {static_cast<double>(l_ce_img.item()), static_cast<double>(l_ce_pc.item()),
          static_cast<double>(l_pi_sc.item()), static_cast<double>(l_total.item())};
}

template <typename T>
LossBreakdown<T> holistic_loss(const Tensor<T>& p_img, std::span<const std::uint8_t> y_img,
                               const Tensor<T>& p_pc_points,
                               std::span<const std::uint8_t> y_points,
                               const Tensor<T>& p_pc_projected,
                               std::span<const std::uint8_t> hole_mask, const LossTerms& terms) {
  LossBreakdown<T> out;
  out.l_ce_img = cross_entropy_map(p_img, y_img);
  out.l_ce_pc = terms.point_ce ? cross_entropy_loss(p_pc_points, y_points)
                               : Tensor<T>::scalar(T(0));
  out.l_pi_sc = terms.similarity
                    ? pixel_similarity_loss(p_img, p_pc_projected, hole_mask, terms.detach_target)
                    : Tensor<T>::scalar(T(0));
  out.l_total = ops::add(ops::add(out.l_ce_img, out.l_ce_pc), out.l_pi_sc);
  return out;
}

void write_loss_header(std::ostream& os) {
  os << "step,l_ce_img,l_ce_pc,l_pi_sc,l_total,learning_rate\n";
}

void write_loss_row(std::ostream& os, std::uint64_t step, const LossBreakdown<float>::Values& v,
                    double learning_rate) {
  os << step << std::setprecision(9) << ',' << v.l_ce_img << ',' << v.l_ce_pc << ','
     << v.l_pi_sc << ',' << v.l_total << ',' << learning_rate << '\n';
}

#define IKD_OBJ_INSTANTIATE(T)                                                                 \
  template Tensor<T> cross_entropy_loss<T>(const Tensor<T>&, std::span<const std::uint8_t>,    \
                                           std::span<const std::uint8_t>);                     \
  template Tensor<T> cross_entropy_map<T>(const Tensor<T>&, std::span<const std::uint8_t>,     \
                                          std::span<const std::uint8_t>);                      \
  template Tensor<T> pixel_similarity_loss<T>(const Tensor<T>&, const Tensor<T>&,              \
                                              std::span<const std::uint8_t>, bool);            \
  template struct LossBreakdown<T>;                                                            \
  template LossBreakdown<T> holistic_loss<T>(                                                  \
      const Tensor<T>&, std::span<const std::uint8_t>, const Tensor<T>&,                       \
      std::span<const std::uint8_t>, const Tensor<T>&, std::span<const std::uint8_t>,          \
      const LossTerms&);

IKD_OBJ_INSTANTIATE(float)
IKD_OBJ_INSTANTIATE(double)

#undef IKD_OBJ_INSTANTIATE

}  // namespace ikd
