#include "gues/metrics.hpp"

namespace gues {

ConfusionMatrix::ConfusionMatrix(Index classes) {
  if (classes < 2) throw Error("confusion matrix needs at least 2 classes");
  counts.setZero(classes, classes);
}

void ConfusionMatrix::add(int truth, int predicted) {
  if (truth < 0 || truth >= classes() || predicted < 0 || predicted >= classes()) {
    throw Error("confusion: label out of range (" + std::to_string(truth) + ", " +
                std::to_string(predicted) + ") for " + std::to_string(classes()) + " classes");
  }
  ++counts(truth, predicted);
}

ConfusionMatrix& ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.classes() != classes()) throw Error("confusion: cannot merge different class counts");
  counts += other.counts;
  return *this;
}

ConfusionMatrix confusion(std::span<const int> truth, std::span<const int> predicted, Index classes) {
  if (truth.size() != predicted.size()) {
    throw Error("confusion: " + std::to_string(truth.size()) + " labels vs " +
                std::to_string(predicted.size()) + " predictions");
  }
  ConfusionMatrix cm(classes);
  for (std::size_t i = 0; i < truth.size(); ++i) cm.add(truth[i], predicted[i]);
  return cm;
}

double accuracy(const ConfusionMatrix& cm) {
  const auto n = cm.total();
  if (n == 0) throw UndefinedMetric("accuracy: no samples");
  return static_cast<double>(cm.counts.trace()) / static_cast<double>(n);
}

double qwk(const ConfusionMatrix& cm) {
  const auto n = cm.total();
  if (n == 0) throw UndefinedMetric("qwk: no samples");
  const Index c = cm.classes();
  const Eigen::MatrixXd observed = cm.counts.cast<double>();
  const Eigen::VectorXd rows = observed.rowwise().sum();
  const Eigen::VectorXd cols = observed.colwise().sum().transpose();
  const Eigen::MatrixXd expected = rows * cols.transpose() / static_cast<double>(n);
  const double norm = static_cast<double>((c - 1) * (c - 1));
  double num = 0.0, den = 0.0;
  for (Index i = 0; i < c; ++i) {
    for (Index j = 0; j < c; ++j) {
      const double w = static_cast<double>((i - j) * (i - j)) / norm;
      num += w * observed(i, j);
      den += w * expected(i, j);
    }
  }
  if (den == 0.0) throw UndefinedMetric("qwk: undefined (degenerate marginals)");
  return 1.0 - num / den;
}

double avg_metric(double acc, double kappa) { return 0.5 * (acc + kappa); }

}  // namespace gues
