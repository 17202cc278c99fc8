#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace ikd {

/// K x K counts; entry (g, p) counts elements with truth g predicted as p.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t k = 0) : k_(k), counts_(k * k, 0) {}

  std::size_t classes() const { return k_; }
  std::uint64_t at(std::size_t truth, std::size_t pred) const { return counts_[truth * k_ + pred]; }
  std::uint64_t& at(std::size_t truth, std::size_t pred) { return counts_[truth * k_ + pred]; }
  std::uint64_t total() const;
  std::uint64_t true_positive(std::size_t c) const { return at(c, c); }
  std::uint64_t false_negative(std::size_t c) const;
  std::uint64_t false_positive(std::size_t c) const;

  /// Counts pred/truth pairs not flagged in `ignore` (empty = none).
  void add(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth,
           std::span<const std::uint8_t> ignore = {});
  /// Elementwise sum; both matrices must have the same K.
  void merge(const ConfusionMatrix& other);

  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;

 private:
  std::size_t k_;
  std::vector<std::uint64_t> counts_;
};

ConfusionMatrix confusion_matrix(std::span<const std::uint8_t> pred,
                                 std::span<const std::uint8_t> truth, std::size_t k,
                                 std::span<const std::uint8_t> ignore = {});

/// Class means skip classes whose value is undefined (zero denominator).
struct SummaryMetrics {
  double oa = 0, mean_acc = 0, kappa = 0, miou = 0;
  std::vector<std::optional<double>> acc, iou;
};

struct F1Scores {
  std::vector<std::optional<double>> per_class;
  double mean = 0;
};

SummaryMetrics summary_metrics(const ConfusionMatrix& cm);
F1Scores f1_scores(const ConfusionMatrix& cm);

struct MetricsReport {
  SummaryMetrics summary;
  F1Scores f1;
  std::vector<std::string> class_names;
};

MetricsReport make_report(const ConfusionMatrix& cm, std::vector<std::string> class_names = {});

/// CSV with a summary section (metric,value) and a per-class section
/// (class,name,acc,iou,f1); undefined values are written as "undefined".
void write_metrics_csv(std::ostream& os, const MetricsReport& report);
/// Aligned plain-text table of the same content.
void write_metrics_text(std::ostream& os, const MetricsReport& report);

}  // namespace ikd
