#pragma once

#include <array>
#include <filesystem>
#include <span>
#include <vector>

#include "gues/image.hpp"
#include "gues/ops.hpp"
#include "gues/vae.hpp"

namespace gues {

inline constexpr Index kNumGrades = 5;

/// Frozen-source stand-in: three (conv 3x3 stride 2, batch norm, relu)
/// blocks with 16/32/64 channels, global average pooling, linear head.
struct SourceClassifier {
  std::array<Tensor, 3> conv_w;
  std::array<Tensor, 3> bn_gamma, bn_beta;
  std::array<Tensor, 3> bn_mean, bn_var;  // running statistics
  Tensor head_w, head_b;
  Index classes = kNumGrades;

  explicit SourceClassifier(std::uint64_t seed = 0, Index classes = kNumGrades);

  /// Logits (N, classes). Inputs are clamped to [0, 1] first.
  /// `bn_momentum` weights the batch statistics in a kBatchUpdate pass.
  Tensor forward(const Tensor& x, BatchNormMode mode, double bn_momentum = 0.1) const;

  std::vector<NamedTensor> named_parameters() const;
  /// Parameters plus running statistics, in checkpoint order.
  std::vector<NamedTensor> named_state() const;
  std::vector<Tensor> parameters() const;
  std::vector<Tensor> norm_affine_parameters() const;
  /// Everything except the linear head.
  std::vector<Tensor> feature_parameters() const;
  std::vector<Tensor> head_parameters() const { return {head_w, head_b}; }

  SourceClassifier clone() const;
};

/// Deterministic logits from running statistics.
Tensor predict(const SourceClassifier& model, const Tensor& batch);
std::vector<int> argmax_rows(const Tensor& logits);

/// -(1/N) sum_n sum_j t_nj log softmax(logits)_nj with
/// t = (1 - s) onehot + s / C.
Tensor smoothed_cross_entropy(const Tensor& logits, std::span<const int> labels, double smoothing);
/// Same, with each sample's term scaled by `class_weights[label]`.
Tensor smoothed_cross_entropy(const Tensor& logits, std::span<const int> labels, double smoothing,
                              std::span<const double> class_weights);

struct SourceTrainOptions {
  int epochs = 20;
  double smoothing = 0.1;
  double learning_rate = 0.05;
  double momentum = 0.9;
  Index batch_size = 16;
  std::uint64_t seed = 0;
  /// Per-class loss weight (1 / (C * frequency))^power; 0 disables it.
  double class_balance_power = 0.5;
  /// Cosine-anneal the learning rate from `learning_rate` towards 0.
  bool cosine_decay = true;
};

/// Replaces the running statistics with the cumulative average of batch
/// statistics over `images`, weights fixed.
void recalibrate_statistics(SourceClassifier& model, std::span<const Image> images, Index batch_size);

/// Mean training loss per epoch. After at least one epoch the running
/// statistics are recalibrated on the training set.
std::vector<double> train_source(SourceClassifier& model, std::span<const Image> images,
                                 std::span<const int> labels, const SourceTrainOptions& opts);

void save_classifier(const std::filesystem::path& path, const SourceClassifier& model);
void load_classifier(const std::filesystem::path& path, SourceClassifier& model);

}  // namespace gues
