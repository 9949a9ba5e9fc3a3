#include "gues/classifier.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "gues/checkpoint.hpp"
#include "gues/optim.hpp"

namespace gues {

namespace {

constexpr std::array<Index, 4> kWidths{3, 16, 32, 64};

Tensor uniform_param(Shape shape, Index fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  Buffer data(numel_of(shape));
  for (Index i = 0; i < data.size(); ++i) data[i] = rng.uniform(-bound, bound);
  return Tensor(std::move(shape), std::move(data), true);
}

Tensor copy_of(const Tensor& t) {
  Tensor c = t.detach();
  c.set_requires_grad(t.requires_grad());
  return c;
}

}  // namespace

SourceClassifier::SourceClassifier(std::uint64_t seed, Index num_classes) : classes(num_classes) {
  Rng rng(seed);
  for (std::size_t i = 0; i < 3; ++i) {
    const Index cin = kWidths[i], cout = kWidths[i + 1];
    conv_w[i] = uniform_param({cout, cin, 3, 3}, cin * 9, rng);
    bn_gamma[i] = Tensor::ones({cout}, true);
    bn_beta[i] = Tensor::zeros({cout}, true);
    bn_mean[i] = Tensor::zeros({cout});
    bn_var[i] = Tensor::ones({cout});
  }
  head_w = uniform_param({kWidths.back(), classes}, kWidths.back(), rng);
  head_b = uniform_param({classes}, kWidths.back(), rng);
}

Tensor SourceClassifier::forward(const Tensor& x, BatchNormMode mode, double bn_momentum) const {
  if (x.rank() != 4 || x.dim(1) != 3) {
    throw ShapeError("classifier: expected (N, 3, H, W), got " + shape_str(x.shape()));
  }
  Tensor h = clamp(x, 0.0, 1.0);
  for (std::size_t i = 0; i < 3; ++i) {
    h = conv2d(h, conv_w[i], {2, 1});
    Tensor mean_i = bn_mean[i], var_i = bn_var[i];
    h = relu(batch_norm(h, bn_gamma[i], bn_beta[i], mean_i, var_i, {mode, bn_momentum, 1e-5}));
  }
  const Index n = h.dim(0), c = h.dim(1);
  h = mean(reshape(h, {n, c, h.dim(2) * h.dim(3)}), 2);
  return bias_add(matmul(h, head_w), head_b);
}

std::vector<NamedTensor> SourceClassifier::named_parameters() const {
  std::vector<NamedTensor> out;
  for (std::size_t i = 0; i < 3; ++i) {
    const std::string p = "block" + std::to_string(i + 1);
    out.push_back({p + ".conv.weight", conv_w[i]});
    out.push_back({p + ".bn.weight", bn_gamma[i]});
    out.push_back({p + ".bn.bias", bn_beta[i]});
  }
  out.push_back({"head.weight", head_w});
  out.push_back({"head.bias", head_b});
  return out;
}

std::vector<NamedTensor> SourceClassifier::named_state() const {
  std::vector<NamedTensor> out = named_parameters();
  for (std::size_t i = 0; i < 3; ++i) {
    const std::string p = "block" + std::to_string(i + 1);
    out.push_back({p + ".bn.running_mean", bn_mean[i]});
    out.push_back({p + ".bn.running_var", bn_var[i]});
  }
  return out;
}

std::vector<Tensor> SourceClassifier::parameters() const {
  std::vector<Tensor> out;
  for (auto& p : named_parameters()) out.push_back(p.tensor);
  return out;
}

std::vector<Tensor> SourceClassifier::norm_affine_parameters() const {
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < 3; ++i) {
    out.push_back(bn_gamma[i]);
    out.push_back(bn_beta[i]);
  }
  return out;
}

std::vector<Tensor> SourceClassifier::feature_parameters() const {
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < 3; ++i) {
    out.push_back(conv_w[i]);
    out.push_back(bn_gamma[i]);
    out.push_back(bn_beta[i]);
  }
  return out;
}

SourceClassifier SourceClassifier::clone() const {
  SourceClassifier c = *this;
  for (std::size_t i = 0; i < 3; ++i) {
    c.conv_w[i] = copy_of(conv_w[i]);
    c.bn_gamma[i] = copy_of(bn_gamma[i]);
    c.bn_beta[i] = copy_of(bn_beta[i]);
    c.bn_mean[i] = copy_of(bn_mean[i]);
    c.bn_var[i] = copy_of(bn_var[i]);
  }
  c.head_w = copy_of(head_w);
  c.head_b = copy_of(head_b);
  return c;
}

Tensor predict(const SourceClassifier& model, const Tensor& batch) {
  return model.forward(batch, BatchNormMode::kRunning);
}

std::vector<int> argmax_rows(const Tensor& logits) {
  const Index rows = logits.dim(0), cols = logits.dim(1);
  std::vector<int> out(static_cast<std::size_t>(rows));
  for (Index r = 0; r < rows; ++r) {
    Index best = 0;
    logits.data().segment(r * cols, cols).maxCoeff(&best);
    out[static_cast<std::size_t>(r)] = static_cast<int>(best);
  }
  return out;
}

Tensor smoothed_cross_entropy(const Tensor& logits, std::span<const int> labels, double smoothing) {
  return smoothed_cross_entropy(logits, labels, smoothing, {});
}

Tensor smoothed_cross_entropy(const Tensor& logits, std::span<const int> labels, double smoothing,
                              std::span<const double> class_weights) {
  if (logits.rank() != 2 || static_cast<std::size_t>(logits.dim(0)) != labels.size()) {
    throw ShapeError("cross entropy: logits " + shape_str(logits.shape()) + " vs " +
                     std::to_string(labels.size()) + " labels");
  }
  const Index n = logits.dim(0), c = logits.dim(1);
  Buffer target = Buffer::Constant(n * c, smoothing / static_cast<double>(c));
  for (Index i = 0; i < n; ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= c) throw Error("cross entropy: label " + std::to_string(y) + " out of range");
    target[i * c + y] += 1.0 - smoothing;
    if (!class_weights.empty()) target.segment(i * c, c) *= class_weights[static_cast<std::size_t>(y)];
  }
  const Tensor t({n, c}, std::move(target));
  return scale(sum(mul(log_softmax(logits), t)), -1.0 / static_cast<double>(n));
}

std::vector<double> train_source(SourceClassifier& model, std::span<const Image> images,
                                 std::span<const int> labels, const SourceTrainOptions& opts) {
  if (images.empty()) throw Error("train_source: empty dataset");
  if (images.size() != labels.size()) throw Error("train_source: images and labels differ in length");
  std::vector<double> weights;
  if (opts.class_balance_power != 0.0) {
    std::vector<double> freq(static_cast<std::size_t>(model.classes), 0.0);
    for (int y : labels) {
      if (y < 0 || y >= model.classes) throw Error("train_source: label " + std::to_string(y) + " out of range");
      freq[static_cast<std::size_t>(y)] += 1.0 / static_cast<double>(labels.size());
    }
    for (double f : freq) {
      weights.push_back(f > 0.0 ? std::pow(1.0 / (static_cast<double>(model.classes) * f), opts.class_balance_power)
                                : 0.0);
    }
  }
  std::vector<Tensor> params = model.parameters();
  SgdState sgd = make_sgd(params, opts.learning_rate, opts.momentum);
  Rng rng(opts.seed);
  std::vector<std::size_t> order(images.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<double> history;
  const auto b = static_cast<std::size_t>(opts.batch_size);
  for (int epoch = 0; epoch < opts.epochs; ++epoch) {
    if (opts.cosine_decay) {
      const double progress = static_cast<double>(epoch) / static_cast<double>(opts.epochs);
      sgd.learning_rate = 0.5 * opts.learning_rate * (1.0 + std::cos(std::numbers::pi * progress));
    }
    rng.shuffle(order);
    double total = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += b) {
      const std::size_t end = std::min(order.size(), start + b);
      std::vector<Image> batch;
      std::vector<int> y;
      for (std::size_t i = start; i < end; ++i) {
        batch.push_back(images[order[i]]);
        y.push_back(labels[order[i]]);
      }
      Graph graph;
      GraphScope scope(graph);
      const Tensor logits = model.forward(to_batch(batch), BatchNormMode::kBatchUpdate);
      const Tensor loss = smoothed_cross_entropy(logits, y, opts.smoothing, weights);
      if (!std::isfinite(loss.item())) throw NumericError("train_source: non-finite loss");
      graph.backward(loss);
      sgd_step(params, sgd);
      total += loss.item();
      ++batches;
    }
    history.push_back(total / static_cast<double>(batches));
  }
  if (opts.epochs > 0) recalibrate_statistics(model, images, opts.batch_size);
  return history;
}

void recalibrate_statistics(SourceClassifier& model, std::span<const Image> images, Index batch_size) {
  if (images.empty()) throw Error("recalibrate_statistics: empty dataset");
  const auto b = static_cast<std::size_t>(batch_size);
  std::size_t k = 0;
  for (std::size_t start = 0; start < images.size(); start += b, ++k) {
    const std::size_t end = std::min(images.size(), start + b);
    const std::vector<Image> batch(images.begin() + static_cast<std::ptrdiff_t>(start),
                                   images.begin() + static_cast<std::ptrdiff_t>(end));
    model.forward(to_batch(batch), BatchNormMode::kBatchUpdate, 1.0 / static_cast<double>(k + 1));
  }
}

void save_classifier(const std::filesystem::path& path, const SourceClassifier& model) {
  write_checkpoint(path, kClassifierMagic, model.named_state());
}

void load_classifier(const std::filesystem::path& path, SourceClassifier& model) {
  load_into(read_checkpoint(path, kClassifierMagic), model.named_state());
}

}  // namespace gues
