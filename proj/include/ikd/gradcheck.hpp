#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "ikd/tensor.hpp"

namespace ikd {

struct LeafCheck {
  std::string name;
  std::size_t checked = 0;  // number of entries compared
  double max_rel_error = 0;
  double analytic_at_max = 0;
  double numeric_at_max = 0;
  bool pass = true;
};

struct GradCheckReport {
  std::vector<LeafCheck> leaves;
  double tol = 0;
  bool pass() const;
  double max_rel_error() const;
  std::string summary() const;
};

struct GradCheckOptions {
  double step = 1e-5;
  double tol = 1e-4;
  // Caps the number of entries perturbed per leaf (chosen uniformly by
  // seed); nullopt checks every entry.
  std::optional<std::size_t> max_entries_per_leaf;
  std::uint64_t seed = 0;
};

/// Relative error |a - n| / max(1, |a|, |n|).
double grad_rel_error(double analytic, double numeric);

/// Compares reverse-mode gradients of a scalar function against central
/// differences. `f` must rebuild the computation from the leaves on each
/// call; it is invoked once under a tape and then repeatedly without one.
GradCheckReport grad_check(const std::function<Tensor<double>()>& f,
                           const std::vector<std::pair<std::string, Tensor<double>>>& leaves,
                           const GradCheckOptions& options = {});

}  // namespace ikd
