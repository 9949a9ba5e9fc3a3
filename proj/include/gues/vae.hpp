#pragma once

#include <functional>
#include <string>
#include <vector>

#include "gues/optim.hpp"
#include "gues/saliency.hpp"
#include "gues/stream.hpp"
#include "gues/tensor.hpp"

namespace gues {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

/// Which model state produces the emitted x_hat of a batch.
enum class EmissionMode {
  kForwardPass,  // the x_hat computed in the batch's own training forward pass
  kPostUpdate,   // regenerate after the batch's update, same noise
};

struct GuesConfig {
  double alpha = 1.0;  // KL weight
  double beta = 1.0;   // reconstruction weight
  double learning_rate = 1e-5;
  double momentum = 0.9;
  Index batch_size = 64;
  std::uint64_t seed = 0;
  int steps_per_batch = 1;
  EmissionMode emission = EmissionMode::kForwardPass;
  SaliencyOptions saliency;

  void validate() const;
};

/// Posterior q(z|x) = N(mu, exp(log_var)), both (N, latent_dim).
struct LatentGaussian {
  Tensor mu;
  Tensor log_var;
};

/// x_hat = x + delta; x_hat is never clamped here.
struct UnadversarialExample {
  Tensor x;
  Tensor delta;
  Tensor x_hat;
};

struct GuesModelOptions {
  Index height = 64;
  Index width = 64;
  Index latent_dim = 10;
  /// Final transposed conv starts at zero, so the generator starts as identity.
  bool zero_init_output = true;
  /// mu / log_var heads start at zero.
  bool zero_init_heads = false;
};

/// Convolutional VAE perturbation generator.
///
/// Encoder: four 3x3 stride-2 convs (3 -> 16 -> 32 -> 64 -> 64, leaky ReLU)
/// and two linear heads. Decoder: linear to 64 x H/16 x W/16, then four 3x3
/// stride-2 transposed convs (64 -> 64 -> 32 -> 16 -> 3) ending in tanh.
struct GuesModel {
  GuesModelOptions options;
  std::vector<Tensor> enc_conv_w, enc_conv_b;
  Tensor mu_w, mu_b, log_var_w, log_var_b;
  Tensor dec_fc_w, dec_fc_b;
  std::vector<Tensor> dec_conv_w, dec_conv_b;

  explicit GuesModel(GuesModelOptions options = {}, std::uint64_t seed = 0);

  /// Trainable tensors in fixed registration order.
  std::vector<NamedTensor> named_parameters() const;
  std::vector<Tensor> parameters() const;
  GuesModel clone() const;
  Index bottleneck_height() const { return options.height / 16; }
  Index bottleneck_width() const { return options.width / 16; }
};

LatentGaussian encode(const GuesModel& model, const Tensor& x);
/// z = mu + exp(0.5 log_var) * noise; `noise` is treated as a constant.
Tensor reparameterize(const LatentGaussian& q, const Tensor& noise);
Tensor decode(const GuesModel& model, const Tensor& z);
UnadversarialExample generate(const GuesModel& model, const Tensor& x, const Tensor& noise);

/// Batch mean of 0.5 * sum_d (mu^2 + exp(log_var) - log_var - 1).
Tensor kl_loss(const LatentGaussian& q);
/// Mean over all elements of (x_hat - target)^2.
Tensor recon_loss(const Tensor& x_hat, const Tensor& target);
Tensor gues_loss(const LatentGaussian& q, const Tensor& x_hat, const Tensor& target, double alpha,
                 double beta);

struct BatchLoss {
  Index batch_index = 0;
  double kl = 0.0;
  double mse = 0.0;
  double total = 0.0;
};

struct AdaptationReport {
  std::vector<BatchLoss> trajectory;
};

/// Online generator training: one call per arriving batch.
class GuesAdapter {
 public:
  GuesAdapter(GuesModel& model, const GuesConfig& config);

  /// Saliency targets, forward, loss, update(s). Returns the emitted x_hat
  /// (N, 3, H, W) for the batch.
  Tensor step(const Tensor& x, Index batch_index, BatchLoss* loss = nullptr);

 private:
  GuesModel& model_;
  GuesConfig config_;
  std::vector<Tensor> params_;
  SgdState sgd_;
  Rng noise_rng_;
};

using EmissionSink = std::function<void(const StreamBatch& batch, const Tensor& x_hat)>;

/// Consumes `stream` once, in order, adapting `model` on every batch and
/// handing each batch's x_hat to `sink`.
AdaptationReport adapt_stream(GuesModel& model, BatchSource& stream, const GuesConfig& config,
                              const EmissionSink& sink = {});

}  // namespace gues
