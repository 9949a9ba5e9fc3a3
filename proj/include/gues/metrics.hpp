#pragma once

#include <cstdint>
#include <span>

#include <Eigen/Dense>

#include "gues/tensor.hpp"

namespace gues {

class UndefinedMetric : public Error {
 public:
  using Error::Error;
};

/// counts(i, j): samples with true class i predicted as j.
struct ConfusionMatrix {
  Eigen::Matrix<std::int64_t, Eigen::Dynamic, Eigen::Dynamic> counts;

  explicit ConfusionMatrix(Index classes = 2);

  Index classes() const { return counts.rows(); }
  std::int64_t total() const { return counts.sum(); }
  void add(int truth, int predicted);
  ConfusionMatrix& merge(const ConfusionMatrix& other);
};

ConfusionMatrix confusion(std::span<const int> truth, std::span<const int> predicted, Index classes);

/// trace / n.
double accuracy(const ConfusionMatrix& cm);
/// 1 - sum(W O) / sum(W E), W = (i - j)^2 / (C - 1)^2, E = rowsum colsum^T / n.
double qwk(const ConfusionMatrix& cm);
double avg_metric(double acc, double qwk);

}  // namespace gues
