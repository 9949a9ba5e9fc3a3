#include "gues/vae.hpp"

#include <cmath>
#include <sstream>

#include "gues/ops.hpp"
#include "gues/saliency.hpp"

namespace gues {

namespace {

constexpr std::array<Index, 5> kChannels{3, 16, 32, 64, 64};
constexpr double kLeakySlope = 0.2;

Tensor uniform_param(Shape shape, Index fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  Buffer data(numel_of(shape));
  for (Index i = 0; i < data.size(); ++i) data[i] = rng.uniform(-bound, bound);
  return Tensor(std::move(shape), std::move(data), true);
}

Tensor deep_copy(const Tensor& t) {
  Tensor c = t.detach();
  c.set_requires_grad(t.requires_grad());
  return c;
}

}  // namespace

void GuesConfig::validate() const {
  if (!(alpha > 0.0)) throw Error("gues config: alpha must be positive");
  if (!(beta > 0.0)) throw Error("gues config: beta must be positive");
  if (!(learning_rate > 0.0)) throw Error("gues config: learning_rate must be positive");
  if (momentum < 0.0 || momentum >= 1.0) throw Error("gues config: momentum must lie in [0, 1)");
  if (batch_size < 1) throw Error("gues config: batch_size must be at least 1");
  if (steps_per_batch < 1) throw Error("gues config: steps_per_batch must be at least 1");
}

GuesModel::GuesModel(GuesModelOptions opts, std::uint64_t seed) : options(opts) {
  if (opts.height % 16 != 0 || opts.width % 16 != 0 || opts.height < 16 || opts.width < 16) {
    throw ShapeError("gues model: image size " + std::to_string(opts.height) + "x" +
                     std::to_string(opts.width) + " must be a positive multiple of 16");
  }
  if (opts.latent_dim < 1) throw ShapeError("gues model: latent_dim must be positive");
  Rng rng(seed);
  for (std::size_t i = 0; i + 1 < kChannels.size(); ++i) {
    const Index cin = kChannels[i], cout = kChannels[i + 1];
    enc_conv_w.push_back(uniform_param({cout, cin, 3, 3}, cin * 9, rng));
    enc_conv_b.push_back(uniform_param({cout}, cin * 9, rng));
  }
  const Index flat = kChannels.back() * bottleneck_height() * bottleneck_width();
  mu_w = uniform_param({flat, opts.latent_dim}, flat, rng);
  mu_b = uniform_param({opts.latent_dim}, flat, rng);
  log_var_w = uniform_param({flat, opts.latent_dim}, flat, rng);
  log_var_b = uniform_param({opts.latent_dim}, flat, rng);
  if (opts.zero_init_heads) {
    for (Tensor* t : {&mu_w, &mu_b, &log_var_w, &log_var_b}) t->mutable_data().setZero();
  }
  dec_fc_w = uniform_param({opts.latent_dim, flat}, opts.latent_dim, rng);
  dec_fc_b = uniform_param({flat}, opts.latent_dim, rng);
  for (std::size_t i = kChannels.size() - 1; i > 0; --i) {
    const Index cin = kChannels[i], cout = kChannels[i - 1];
    dec_conv_w.push_back(uniform_param({cin, cout, 3, 3}, cout * 9, rng));
    dec_conv_b.push_back(uniform_param({cout}, cout * 9, rng));
  }
  if (opts.zero_init_output) {
    dec_conv_w.back().mutable_data().setZero();
    dec_conv_b.back().mutable_data().setZero();
  }
}

std::vector<NamedTensor> GuesModel::named_parameters() const {
  std::vector<NamedTensor> out;
  for (std::size_t i = 0; i < enc_conv_w.size(); ++i) {
    out.push_back({"encoder.conv" + std::to_string(i + 1) + ".weight", enc_conv_w[i]});
    out.push_back({"encoder.conv" + std::to_string(i + 1) + ".bias", enc_conv_b[i]});
  }
  out.push_back({"encoder.mu.weight", mu_w});
  out.push_back({"encoder.mu.bias", mu_b});
  out.push_back({"encoder.log_var.weight", log_var_w});
  out.push_back({"encoder.log_var.bias", log_var_b});
  out.push_back({"decoder.fc.weight", dec_fc_w});
  out.push_back({"decoder.fc.bias", dec_fc_b});
  for (std::size_t i = 0; i < dec_conv_w.size(); ++i) {
    out.push_back({"decoder.deconv" + std::to_string(i + 1) + ".weight", dec_conv_w[i]});
    out.push_back({"decoder.deconv" + std::to_string(i + 1) + ".bias", dec_conv_b[i]});
  }
  return out;
}

std::vector<Tensor> GuesModel::parameters() const {
  std::vector<Tensor> out;
  for (auto& p : named_parameters()) out.push_back(p.tensor);
  return out;
}

GuesModel GuesModel::clone() const {
  GuesModel c = *this;
  for (auto* group : {&c.enc_conv_w, &c.enc_conv_b, &c.dec_conv_w, &c.dec_conv_b}) {
    for (auto& t : *group) t = deep_copy(t);
  }
  for (Tensor* t : {&c.mu_w, &c.mu_b, &c.log_var_w, &c.log_var_b, &c.dec_fc_w, &c.dec_fc_b}) {
    *t = deep_copy(*t);
  }
  return c;
}

LatentGaussian encode(const GuesModel& model, const Tensor& x) {
  if (x.rank() != 4 || x.dim(1) != 3) {
    throw ShapeError("encode: expected (N, 3, H, W), got " + shape_str(x.shape()));
  }
  if (x.dim(2) != model.options.height || x.dim(3) != model.options.width) {
    throw ShapeError("encode: input " + shape_str(x.shape()) + " does not match the configured " +
                     std::to_string(model.options.height) + "x" + std::to_string(model.options.width) +
                     " (both must be multiples of 16)");
  }
  Tensor h = x;
  for (std::size_t i = 0; i < model.enc_conv_w.size(); ++i) {
    h = leaky_relu(bias_add(conv2d(h, model.enc_conv_w[i], {2, 1}), model.enc_conv_b[i]), kLeakySlope);
  }
  h = reshape(h, {x.dim(0), h.numel() / x.dim(0)});
  return {bias_add(matmul(h, model.mu_w), model.mu_b),
          bias_add(matmul(h, model.log_var_w), model.log_var_b)};
}

Tensor reparameterize(const LatentGaussian& q, const Tensor& noise) {
  if (noise.shape() != q.mu.shape() || q.log_var.shape() != q.mu.shape()) {
    throw ShapeError("reparameterize: noise " + shape_str(noise.shape()) + " vs mu " +
                     shape_str(q.mu.shape()) + " vs log_var " + shape_str(q.log_var.shape()));
  }
  const Tensor eps = noise.detach();
  return add(q.mu, mul(exp(scale(q.log_var, 0.5)), eps));
}

Tensor decode(const GuesModel& model, const Tensor& z) {
  if (z.rank() != 2 || z.dim(1) != model.options.latent_dim) {
    throw ShapeError("decode: expected (N, " + std::to_string(model.options.latent_dim) + "), got " +
                     shape_str(z.shape()));
  }
  Tensor h = leaky_relu(bias_add(matmul(z, model.dec_fc_w), model.dec_fc_b), kLeakySlope);
  h = reshape(h, {z.dim(0), kChannels.back(), model.bottleneck_height(), model.bottleneck_width()});
  const std::size_t last = model.dec_conv_w.size() - 1;
  for (std::size_t i = 0; i <= last; ++i) {
    h = bias_add(conv2d_transpose(h, model.dec_conv_w[i], {2, 1, 1}), model.dec_conv_b[i]);
    h = i == last ? tanh(h) : leaky_relu(h, kLeakySlope);
  }
  return h;
}

UnadversarialExample generate(const GuesModel& model, const Tensor& x, const Tensor& noise) {
  const LatentGaussian q = encode(model, x);
  Tensor delta = decode(model, reparameterize(q, noise));
  Tensor x_hat = add(x, delta);
  return {x, std::move(delta), std::move(x_hat)};
}

Tensor kl_loss(const LatentGaussian& q) {
  if (q.mu.shape() != q.log_var.shape() || q.mu.rank() != 2) {
    throw ShapeError("kl_loss: mu " + shape_str(q.mu.shape()) + " and log_var " +
                     shape_str(q.log_var.shape()) + " must both be (N, d)");
  }
  const Tensor terms = sub(add(mul(q.mu, q.mu), exp(q.log_var)), shift(q.log_var, 1.0));
  return scale(sum(terms), 0.5 / static_cast<double>(q.mu.dim(0)));
}

Tensor recon_loss(const Tensor& x_hat, const Tensor& target) {
  if (x_hat.shape() != target.shape()) {
    throw ShapeError("recon_loss: x_hat " + shape_str(x_hat.shape()) + " vs target " +
                     shape_str(target.shape()));
  }
  const Tensor diff = sub(x_hat, target.detach());
  return mean(mul(diff, diff));
}

Tensor gues_loss(const LatentGaussian& q, const Tensor& x_hat, const Tensor& target, double alpha,
                 double beta) {
  return add(scale(kl_loss(q), alpha), scale(recon_loss(x_hat, target), beta));
}

GuesAdapter::GuesAdapter(GuesModel& model, const GuesConfig& config)
    : model_(model), config_(config), params_(model.parameters()),
      sgd_(make_sgd(params_, config.learning_rate, config.momentum)), noise_rng_(config.seed) {
  config_.validate();
}

Tensor GuesAdapter::step(const Tensor& x, Index batch_index, BatchLoss* report) {
  const Tensor target = saliency_targets(x, config_.saliency);
  const Tensor input = x.detach();
  Tensor emitted;
  Tensor noise;
  for (int s = 0; s < config_.steps_per_batch; ++s) {
    Graph graph;
    GraphScope scope(graph);
    const LatentGaussian q = encode(model_, input);
    noise = gaussian_noise_like(q.mu, noise_rng_);
    const Tensor delta = decode(model_, reparameterize(q, noise));
    const Tensor x_hat = add(input, delta);
    const Tensor kl = kl_loss(q);
    const Tensor mse = recon_loss(x_hat, target);
    const Tensor loss = add(scale(kl, config_.alpha), scale(mse, config_.beta));
    if (!std::isfinite(loss.item())) {
      std::ostringstream msg;
      msg << "gues adaptation: non-finite loss at batch " << batch_index << " (kl=" << kl.item()
          << ", mse=" << mse.item() << ")";
      throw NumericError(msg.str());
    }
    if (s == 0) {
      emitted = x_hat.detach();
      if (report != nullptr) *report = {batch_index, kl.item(), mse.item(), loss.item()};
    }
    graph.backward(loss);
    sgd_step(params_, sgd_);
  }
  if (config_.emission == EmissionMode::kPostUpdate) {
    emitted = generate(model_, input, noise).x_hat.detach();
  }
  return emitted;
}

AdaptationReport adapt_stream(GuesModel& model, BatchSource& stream, const GuesConfig& config,
                              const EmissionSink& sink) {
  GuesAdapter adapter(model, config);
  AdaptationReport report;
  while (auto batch = stream.next()) {
    BatchLoss loss;
    const Tensor x = to_batch(batch->images);
    const Tensor x_hat = adapter.step(x, batch->index, &loss);
    report.trajectory.push_back(loss);
    if (sink) sink(*batch, x_hat);
  }
  return report;
}

}  // namespace gues
