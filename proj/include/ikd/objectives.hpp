#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

#include "ikd/ops.hpp"

namespace ikd {

inline constexpr double kProbabilityFloor = 1e-12;

/// Mean of -log p[i, y_i] over rows not flagged in `ignore` (empty = none).
/// probs: [M, C] with rows summing to 1. Returns 0 when every row is ignored.
template <typename T>
Tensor<T> cross_entropy_loss(const Tensor<T>& probs, std::span<const std::uint8_t> labels,
                             std::span<const std::uint8_t> ignore = {});

/// Same over a [C, H, W] probability map and H*W labels.
template <typename T>
Tensor<T> cross_entropy_map(const Tensor<T>& probs, std::span<const std::uint8_t> labels,
                            std::span<const std::uint8_t> ignore = {});

/// Mean over unmasked pixels of sum_c p log(p / q), both [C, H, W]. q is
/// detached unless `detach_target` is false.
template <typename T>
Tensor<T> pixel_similarity_loss(const Tensor<T>& p_img, const Tensor<T>& p_pc,
                                std::span<const std::uint8_t> hole_mask,
                                bool detach_target = true);

struct LossTerms {
  bool point_ce = true;
  bool similarity = true;
  bool detach_target = true;
};

template <typename T>
struct LossBreakdown {
  Tensor<T> l_ce_img, l_ce_pc, l_pi_sc, l_total;

  struct Values {
    double l_ce_img = 0, l_ce_pc = 0, l_pi_sc = 0, l_total = 0;
  };
  Values values() const;
};

/// l_total = (l_ce_img + l_ce_pc) + l_pi_sc. Disabled terms are constant 0.
template <typename T>
LossBreakdown<T> holistic_loss(const Tensor<T>& p_img, std::span<const std::uint8_t> y_img,
                               const Tensor<T>& p_pc_points,
                               std::span<const std::uint8_t> y_points,
                               const Tensor<T>& p_pc_projected,
                               std::span<const std::uint8_t> hole_mask,
                               const LossTerms& terms = {});

/// Per-step training log: step,l_ce_img,l_ce_pc,l_pi_sc,l_total,learning_rate
void write_loss_header(std::ostream& os);
void write_loss_row(std::ostream& os, std::uint64_t step,
                    const LossBreakdown<float>::Values& v, double learning_rate);

}  // namespace ikd
