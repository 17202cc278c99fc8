#include "ikd/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

namespace ikd {

bool GradCheckReport::pass() const {
  return std::all_of(leaves.begin(), leaves.end(), [](const LeafCheck& l) { return l.pass; });
}

double GradCheckReport::max_rel_error() const {
  double m = 0;
  for (const auto& l : leaves) m = std::max(m, l.max_rel_error);
  return m;
}

std::string GradCheckReport::summary() const {
  std::ostringstream os;
  for (const auto& l : leaves) {
    os << (l.pass ? "ok   " : "FAIL ") << l.name << " entries=" << l.checked
       << " max_rel_err=" << l.max_rel_error;
    if (!l.pass) os << " (analytic " << l.analytic_at_max << " vs numeric " << l.numeric_at_max << ")";
    os << '\n';
  }
  return os.str();
}

double grad_rel_error(double analytic, double numeric) {
  const double denom = std::max({1.0, std::abs(analytic), std::abs(numeric)});
  return std::abs(analytic - numeric) / denom;
}

GradCheckReport grad_check(const std::function<Tensor<double>()>& f,
                           const std::vector<std::pair<std::string, Tensor<double>>>& leaves,
                           const GradCheckOptions& options) {
  if (!(options.step > 0)) throw ContractError("grad_check: step must be positive");
  for (const auto& [name, leaf] : leaves) {
    if (!leaf.impl()->is_leaf()) throw ContractError("grad_check: '" + name + "' is not a leaf");
  }

  std::vector<std::vector<double>> analytic;
  {
    std::vector<bool> saved;
    for (const auto& [name, leaf] : leaves) {
      auto t = leaf;
      saved.push_back(t.requires_grad());
      t.set_requires_grad(true);
      t.zero_grad();
    }
    Tape<double> tape;
    TapeScope<double> scope(tape);
    auto out = f();
    if (out.numel() != 1)
      throw ContractError("grad_check: function is not scalar-valued, shape " +
                          shape_str(out.shape()));
    backward(tape, out);
    for (std::size_t i = 0; i < leaves.size(); ++i) {
      auto t = leaves[i].second;
      std::vector<double> g(t.numel(), 0.0);
      if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), g.begin());
      analytic.push_back(std::move(g));
      t.zero_grad();
      t.set_requires_grad(saved[i]);
    }
  }

  auto eval = [&]() {
    NoGradScope<double> off;
    return f().item();
  };

  GradCheckReport report;
  report.tol = options.tol;
  std::mt19937_64 rng(options.seed);
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    auto t = leaves[li].second;
    std::vector<std::size_t> entries(t.numel());
    std::iota(entries.begin(), entries.end(), std::size_t{0});
    if (options.max_entries_per_leaf && entries.size() > *options.max_entries_per_leaf) {
      // Partial Fisher-Yates with the engine's raw output keeps the choice
      // stable across standard libraries.
      for (std::size_t i = 0; i < *options.max_entries_per_leaf; ++i) {
        const auto j = i + rng() % (entries.size() - i);
        std::swap(entries[i], entries[j]);
      }
      entries.resize(*options.max_entries_per_leaf);
      std::sort(entries.begin(), entries.end());
    }
    LeafCheck lc;
    lc.name = leaves[li].first;
    auto values = t.mutable_data();
    for (auto e : entries) {
      const double orig = values[e];
      values[e] = orig + options.step;
      const double up = eval();
      values[e] = orig - options.step;
      const double down = eval();
      values[e] = orig;
      const double numeric = (up - down) / (2 * options.step);
      const double err = grad_rel_error(analytic[li][e], numeric);
      if (err > lc.max_rel_error || lc.checked == 0) {
        lc.max_rel_error = std::max(lc.max_rel_error, err);
        if (err >= lc.max_rel_error) {
          lc.analytic_at_max = analytic[li][e];
          lc.numeric_at_max = numeric;
        }
      }
      ++lc.checked;
    }
    lc.pass = lc.max_rel_error < options.tol;
    report.leaves.push_back(std::move(lc));
  }
  return report;
}

}  // namespace ikd
