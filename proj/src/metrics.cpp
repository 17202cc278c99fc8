#include "ikd/metrics.hpp"

#include <iomanip>
#include <numeric>
#include <ostream>
#include <sstream>

#include "ikd/tensor.hpp"

namespace ikd {

std::uint64_t ConfusionMatrix::total() const {
  return std::accumulate(counts_.begin(), counts_.end(), std::uint64_t{0});
}

std::uint64_t ConfusionMatrix::false_negative(std::size_t c) const {
  std::uint64_t s = 0;
  for (std::size_t p = 0; p < k_; ++p) s += at(c, p);
  return s - at(c, c);
}

std::uint64_t ConfusionMatrix::false_positive(std::size_t c) const {
  std::uint64_t s = 0;
  for (std::size_t g = 0; g < k_; ++g) s += at(g, c);
  return s - at(c, c);
}

void ConfusionMatrix::add(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth,
                          std::span<const std::uint8_t> ignore) {
  if (pred.size() != truth.size() || (!ignore.empty() && ignore.size() != pred.size()))
    throw ContractError("confusion_matrix: " + std::to_string(pred.size()) + " predictions, " +
                        std::to_string(truth.size()) + " labels, " +
                        std::to_string(ignore.size()) + " mask entries");
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (!ignore.empty() && ignore[i]) continue;
    if (pred[i] >= k_ || truth[i] >= k_)
      throw ContractError("confusion_matrix: label at element " + std::to_string(i) +
                          " outside " + std::to_string(k_) + " classes");
    ++at(truth[i], pred[i]);
  }
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.k_ != k_)
    throw ContractError("confusion_matrix: cannot merge K=" + std::to_string(other.k_) +
                        " into K=" + std::to_string(k_));
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

ConfusionMatrix confusion_matrix(std::span<const std::uint8_t> pred,
                                 std::span<const std::uint8_t> truth, std::size_t k,
                                 std::span<const std::uint8_t> ignore) {
  ConfusionMatrix cm(k);
  cm.add(pred, truth, ignore);
  return cm;
}

namespace {

double mean_defined(const std::vector<std::optional<double>>& v) {
  double s = 0;
  std::size_t n = 0;
  for (const auto& x : v)
    if (x) s += *x, ++n;
  return n ? s / static_cast<double>(n) : 0.0;
}

void require_nonempty(const ConfusionMatrix& cm) {
  if (cm.total() == 0) throw ContractError("metrics: confusion matrix is empty");
}

}  // namespace

SummaryMetrics summary_metrics(const ConfusionMatrix& cm) {
  require_nonempty(cm);
  const auto k = cm.classes();
  const double all = static_cast<double>(cm.total());
  SummaryMetrics m;
  double correct = 0, pe = 0;
  for (std::size_t c = 0; c < k; ++c) {
    const double tp = static_cast<double>(cm.true_positive(c));
    const double fn = static_cast<double>(cm.false_negative(c));
    const double fp = static_cast<double>(cm.false_positive(c));
    correct += tp;
    pe += (tp + fp) * (tp + fn);
    m.acc.push_back(tp + fn > 0 ? std::optional<double>(tp / (tp + fn)) : std::nullopt);
    m.iou.push_back(tp + fp + fn > 0 ? std::optional<double>(tp / (tp + fp + fn)) : std::nullopt);
  }
  m.oa = correct / all;
  pe /= all * all;
  // p_e == 1 only when a single class fills both truth and prediction.
  m.kappa = pe < 1.0 ? (m.oa - pe) / (1.0 - pe) : 1.0;
  m.mean_acc = mean_defined(m.acc);
  m.miou = mean_defined(m.iou);
  return m;
}

F1Scores f1_scores(const ConfusionMatrix& cm) {
  require_nonempty(cm);
  F1Scores f;
  for (std::size_t c = 0; c < cm.classes(); ++c) {
    const double tp = static_cast<double>(cm.true_positive(c));
    const double denom = 2 * tp + static_cast<double>(cm.false_positive(c)) +
                         static_cast<double>(cm.false_negative(c));
    f.per_class.push_back(denom > 0 ? std::optional<double>(2 * tp / denom) : std::nullopt);
  }
  f.mean = mean_defined(f.per_class);
  return f;
}

MetricsReport make_report(const ConfusionMatrix& cm, std::vector<std::string> class_names) {
  MetricsReport r{summary_metrics(cm), f1_scores(cm), std::move(class_names)};
  for (std::size_t c = r.class_names.size(); c < cm.classes(); ++c)
    r.class_names.push_back("class" + std::to_string(c));
  return r;
}

namespace {

std::string fmt(const std::optional<double>& v) {
  if (!v) return "undefined";
  std::ostringstream os;
  os << std::fixed << std::setprecision(6) << *v;
  return os.str();
}

}  // namespace

void write_metrics_csv(std::ostream& os, const MetricsReport& r) {
  os << "metric,value\n";
  os << "OA," << fmt(r.summary.oa) << '\n';
  os << "MeanAcc," << fmt(r.summary.mean_acc) << '\n';
  os << "Kappa," << fmt(r.summary.kappa) << '\n';
  os << "mIoU," << fmt(r.summary.miou) << '\n';
  os << "MeanF1," << fmt(r.f1.mean) << '\n';
  os << "\nclass,name,acc,iou,f1\n";
  for (std::size_t c = 0; c < r.summary.acc.size(); ++c)
    os << c << ',' << r.class_names[c] << ',' << fmt(r.summary.acc[c]) << ','
       << fmt(r.summary.iou[c]) << ',' << fmt(r.f1.per_class[c]) << '\n';
}

void write_metrics_text(std::ostream& os, const MetricsReport& r) {
  os << std::left;
  os << std::setw(10) << "OA" << fmt(r.summary.oa) << '\n';
  os << std::setw(10) << "MeanAcc" << fmt(r.summary.mean_acc) << '\n';
  os << std::setw(10) << "Kappa" << fmt(r.summary.kappa) << '\n';
  os << std::setw(10) << "mIoU" << fmt(r.summary.miou) << '\n';
  os << std::setw(10) << "MeanF1" << fmt(r.f1.mean) << "\n\n";
  os << std::setw(6) << "class" << std::setw(12) << "name" << std::setw(12) << "acc"
     << std::setw(12) << "iou" << "f1\n";
  for (std::size_t c = 0; c < r.summary.acc.size(); ++c)
    os << std::setw(6) << c << std::setw(12) << r.class_names[c] << std::setw(12)
       << fmt(r.summary.acc[c]) << std::setw(12) << fmt(r.summary.iou[c])
       << fmt(r.f1.per_class[c]) << '\n';
}

}  // namespace ikd
