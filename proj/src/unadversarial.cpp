#include "gues/unadversarial.hpp"

#include <cmath>

#include "gues/ops.hpp"

namespace gues {

void IterativeConfig::validate() const {
  if (!(step_alpha > 0.0)) throw Error("iterative: step_alpha must be positive");
  if (iterations < 1) throw Error("iterative: iterations must be at least 1");
  if (epsilon && !(*epsilon > 0.0)) throw Error("iterative: epsilon must be positive");
}

Tensor sign_step(const Tensor& delta, const Buffer& grad, const IterativeConfig& cfg) {
  if (grad.size() != delta.numel()) throw ShapeError("sign_step: gradient size mismatch");
  if (!grad.isFinite().all()) throw NumericError("unadv_step: non-finite input gradient");
  const double dir = cfg.ascent ? cfg.step_alpha : -cfg.step_alpha;
  Buffer next = delta.data();
  for (Index i = 0; i < next.size(); ++i) {
    const double s = grad[i] > 0.0 ? 1.0 : (grad[i] < 0.0 ? -1.0 : 0.0);
    next[i] += dir * s;
    if (cfg.epsilon) next[i] = std::clamp(next[i], -*cfg.epsilon, *cfg.epsilon);
  }
  return Tensor(delta.shape(), std::move(next));
}

namespace {

Tensor loss_graph(const SourceClassifier& classifier, const Tensor& x, const Tensor& delta, int y) {
  const Tensor logits = predict(classifier, add(x, delta));
  const int labels[] = {y};
  return smoothed_cross_entropy(logits, labels, 0.0);
}

}  // namespace

double classifier_loss(const SourceClassifier& classifier, const Tensor& x, const Tensor& delta, int y) {
  return loss_graph(classifier, x, delta, y).item();
}

Buffer input_gradient(const SourceClassifier& classifier, const Tensor& x, const Tensor& delta, int y) {
  if (x.rank() != 4 || x.dim(0) != 1) {
    throw ShapeError("unadv_step: expects a single (1, 3, H, W) sample, got " + shape_str(x.shape()));
  }
  if (x.shape() != delta.shape()) throw ShapeError("unadv_step: x and delta differ in shape");
  // Frozen weights: only the perturbation is a leaf that records.
  const std::vector<Tensor> params = classifier.parameters();
  std::vector<bool> saved;
  for (auto t : params) {
    saved.push_back(t.requires_grad());
    t.set_requires_grad(false);
  }
  Tensor d = delta.detach();
  d.set_requires_grad(true);
  {
    Graph graph;
    GraphScope scope(graph);
    graph.backward(loss_graph(classifier, x.detach(), d, y));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor t = params[i];
    t.set_requires_grad(saved[i]);
  }
  // d(loss)/dx equals d(loss)/d(delta) since they enter as x + delta.
  return d.has_grad() ? d.grad() : Buffer::Zero(d.numel());
}

Tensor unadv_step(const Tensor& x, const Tensor& delta, const SourceClassifier& classifier, int y,
                  const IterativeConfig& cfg) {
  return sign_step(delta, input_gradient(classifier, x, delta, y), cfg);
}

Tensor initial_perturbation(const Tensor& x, std::uint64_t seed) {
  Rng rng(seed);
  Buffer d(x.numel());
  for (Index i = 0; i < d.size(); ++i) d[i] = rng.uniform(-0.01, 0.01);
  return Tensor(x.shape(), std::move(d));
}

Tensor optimize_unadversarial(const Tensor& x, int y, const SourceClassifier& classifier,
                              const IterativeConfig& cfg) {
  cfg.validate();
  Tensor delta = initial_perturbation(x, cfg.seed);
  if (cfg.epsilon) {
    delta.mutable_data() = delta.data().cwiseMax(-*cfg.epsilon).cwiseMin(*cfg.epsilon);
  }
  for (int k = 0; k < cfg.iterations; ++k) delta = unadv_step(x, delta, classifier, y, cfg);
  return delta;
}

std::vector<ComparisonRow> compare_generative_vs_iterative(const SourceClassifier& classifier,
                                                           const GuesModel& gues,
                                                           std::span<const Image> images,
                                                           std::span<const int> labels,
                                                           const IterativeConfig& cfg,
                                                           std::uint64_t seed) {
  if (images.size() != labels.size() || images.empty()) {
    throw Error("compare: need a non-empty labeled set");
  }
  std::size_t plain = 0, iterative = 0, generative = 0;
  Rng noise_rng(seed);
  for (std::size_t i = 0; i < images.size(); ++i) {
    const Tensor x = to_batch(images.subspan(i, 1));
    const int y = labels[i];
    plain += argmax_rows(predict(classifier, x))[0] == y;

    IterativeConfig sample_cfg = cfg;
    sample_cfg.seed = seed * 1000003ULL + i;
    const Tensor delta = optimize_unadversarial(x, y, classifier, sample_cfg);
    iterative += argmax_rows(predict(classifier, add(x, delta)))[0] == y;

    const LatentGaussian q = encode(gues, x);
    const Tensor noise = gaussian_noise_like(q.mu, noise_rng);
    const Tensor x_hat = add(x, decode(gues, reparameterize(q, noise)));
    generative += argmax_rows(predict(classifier, x_hat))[0] == y;
  }
  const double n = static_cast<double>(images.size());
  return {{"plain", seed, plain / n}, {"iterative", seed, iterative / n}, {"gues", seed, generative / n}};
}

}  // namespace gues
