#pragma once

#include <optional>
#include <span>
#include <vector>

#include "gues/classifier.hpp"
#include "gues/vae.hpp"

namespace gues {

/// Iterative sign-gradient perturbation search.
struct IterativeConfig {
  double step_alpha = 0.005;
  int iterations = 20;
  std::optional<double> epsilon;  // elementwise bound on |delta|, off by default
  std::uint64_t seed = 0;         // for delta_0 ~ U(-0.01, 0.01)
  /// Move along +sign(grad) (loss ascent) instead of the default descent.
  bool ascent = false;

  void validate() const;
};

/// delta + s * alpha * sign(grad), s = -1 for descent, sign(0) = 0, then
/// the optional clamp to [-epsilon, epsilon].
Tensor sign_step(const Tensor& delta, const Buffer& grad, const IterativeConfig& cfg);

/// Cross-entropy of the frozen classifier on x + delta for label y.
double classifier_loss(const SourceClassifier& classifier, const Tensor& x, const Tensor& delta, int y);

/// Gradient of that loss with respect to the classifier input.
Buffer input_gradient(const SourceClassifier& classifier, const Tensor& x, const Tensor& delta, int y);

/// One iteration for a single (1, 3, H, W) sample.
Tensor unadv_step(const Tensor& x, const Tensor& delta, const SourceClassifier& classifier, int y,
                  const IterativeConfig& cfg);

/// Seeded delta_0 shaped like x.
Tensor initial_perturbation(const Tensor& x, std::uint64_t seed);

/// K iterations from delta_0.
Tensor optimize_unadversarial(const Tensor& x, int y, const SourceClassifier& classifier,
                              const IterativeConfig& cfg);

struct ComparisonRow {
  std::string condition;  // plain | iterative | gues
  std::uint64_t seed = 0;
  double accuracy = 0.0;
};

/// Accuracy of the frozen classifier on plain, iteratively perturbed and
/// GUES-generated versions of a labeled held-out set. Labels are used only
/// by the iterative search and for scoring.
std::vector<ComparisonRow> compare_generative_vs_iterative(const SourceClassifier& classifier,
                                                           const GuesModel& gues,
                                                           std::span<const Image> images,
                                                           std::span<const int> labels,
                                                           const IterativeConfig& cfg,
                                                           std::uint64_t seed);

}  // namespace gues
