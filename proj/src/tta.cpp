#include "gues/tta.hpp"

#include <cmath>

namespace gues {

std::string to_string(TtaMethod method) {
  return method == TtaMethod::kTent ? "tent" : "shot_im";
}

TtaState make_tta_state(const SourceClassifier& model, TtaMethod method, double learning_rate,
                        double momentum, Index batch_size) {
  if (batch_size < 1) throw Error("tta: batch size must be at least 1");
  TtaState state;
  state.method = method;
  state.params = method == TtaMethod::kTent ? model.norm_affine_parameters() : model.feature_parameters();
  state.sgd = make_sgd(state.params, learning_rate, momentum);
  state.batch_size = batch_size;
  return state;
}

double entropy(std::span<const double> probabilities) {
  double total = 0.0, h = 0.0;
  for (double p : probabilities) {
    if (p < 0.0) throw Error("entropy: negative probability");
    total += p;
    if (p > 0.0) h -= p * std::log(p);
  }
  if (std::abs(total - 1.0) > 1e-9) throw Error("entropy: probabilities do not sum to 1");
  return h;
}

Tensor mean_entropy(const Tensor& logits) {
  const Tensor plogp = mul(softmax(logits), log_softmax(logits));
  return scale(sum(plogp), -1.0 / static_cast<double>(logits.dim(0)));
}

Tensor information_maximization_loss(const Tensor& logits) {
  const Tensor p_bar = mean(softmax(logits), 0);
  const Tensor neg_marginal_entropy = sum(mul(p_bar, log(p_bar)));
  return add(mean_entropy(logits), neg_marginal_entropy);
}

namespace {

TtaStepResult run_step(SourceClassifier& model, const Tensor& batch, TtaState& state,
                       Tensor (*objective)(const Tensor&), const char* name) {
  // Only the adapted subset accumulates gradients.
  const std::vector<Tensor> all = model.parameters();
  std::vector<bool> saved;
  for (auto t : all) {
    saved.push_back(t.requires_grad());
    t.set_requires_grad(false);
  }
  for (auto& p : state.params) p.set_requires_grad(true);
  TtaStepResult result;
  {
    Graph graph;
    GraphScope scope(graph);
    const Tensor logits = model.forward(batch, BatchNormMode::kBatch);
    const Tensor loss = objective(logits);
    result.loss = loss.item();
    if (!std::isfinite(result.loss)) {
      throw NumericError(std::string(name) + ": non-finite loss");
    }
    result.logits = logits.detach();
    graph.backward(loss);
  }
  for (auto& p : state.params) {
    if (!p.has_grad()) p.mutable_grad();
  }
  sgd_step(state.params, state.sgd);
  for (std::size_t i = 0; i < all.size(); ++i) {
    Tensor t = all[i];
    t.set_requires_grad(saved[i]);
  }
  return result;
}

}  // namespace

TtaStepResult tent_step(SourceClassifier& model, const Tensor& batch, TtaState& state) {
  if (batch.dim(0) < 1) throw Error("tent: empty batch");
  return run_step(model, batch, state, &mean_entropy, "tent");
}

TtaStepResult shot_im_step(SourceClassifier& model, const Tensor& batch, TtaState& state) {
  if (batch.dim(0) < 2) throw Error("shot_im: batch needs at least 2 samples");
  return run_step(model, batch, state, &information_maximization_loss, "shot_im");
}

TtaStepResult tta_step(SourceClassifier& model, const Tensor& batch, TtaState& state) {
  return state.method == TtaMethod::kTent ? tent_step(model, batch, state)
                                          : shot_im_step(model, batch, state);
}

}  // namespace gues
