#pragma once

#include <span>
#include <string>
#include <vector>

#include "gues/classifier.hpp"
#include "gues/optim.hpp"

namespace gues {

enum class TtaMethod { kTent, kShotIm };

std::string to_string(TtaMethod method);

/// Adaptation state for one classifier trajectory.
///   tent:    only batch-norm affine parameters train
///   shot_im: the feature extractor trains, the linear head stays frozen
struct TtaState {
  TtaMethod method = TtaMethod::kTent;
  std::vector<Tensor> params;
  SgdState sgd;
  Index batch_size = 64;
};

TtaState make_tta_state(const SourceClassifier& model, TtaMethod method, double learning_rate,
                        double momentum, Index batch_size);

/// -sum p ln p with 0 ln 0 = 0. Throws on negative entries or when the
/// entries do not sum to one within 1e-9.
double entropy(std::span<const double> probabilities);

/// Mean per-row prediction entropy of `logits` (graph-recorded).
Tensor mean_entropy(const Tensor& logits);
/// mean_entropy(logits) - H(mean softmax row) (graph-recorded).
Tensor information_maximization_loss(const Tensor& logits);

struct TtaStepResult {
  Tensor logits;  // predictions of the adaptation forward pass
  double loss = 0.0;
};

/// Forward with current-batch statistics, one SGD step on mean entropy.
TtaStepResult tent_step(SourceClassifier& model, const Tensor& batch, TtaState& state);
/// Forward with current-batch statistics, one SGD step on the
/// information-maximization objective. Needs at least two samples.
TtaStepResult shot_im_step(SourceClassifier& model, const Tensor& batch, TtaState& state);
TtaStepResult tta_step(SourceClassifier& model, const Tensor& batch, TtaState& state);

}  // namespace gues
