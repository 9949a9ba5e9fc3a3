#pragma once

#include <map>
#include <string>
#include <vector>

#include "gues/tensor.hpp"

namespace gues {

// Differentiable primitives. Every function records a node on the active
// graph when one of its inputs requires a gradient.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor shift(const Tensor& x, double offset);
/// Adds a per-channel vector along axis 1 of an (N, C, ...) tensor.
Tensor bias_add(const Tensor& x, const Tensor& bias);

/// (m, k) x (k, n). Each output row is computed independently, so a row's
/// value never depends on how many other rows share the call.
Tensor matmul(const Tensor& a, const Tensor& b);

struct Conv2dOptions {
  Index stride = 1;
  Index padding = 0;
};

struct ConvTranspose2dOptions {
  Index stride = 1;
  Index padding = 0;
  Index output_padding = 0;
};

/// x: (N, C, H, W), kernel: (K, C, kh, kw).
Tensor conv2d(const Tensor& x, const Tensor& kernel, Conv2dOptions opts = {});
/// x: (N, Cin, H, W), kernel: (Cin, Cout, kh, kw).
/// Output extent (H - 1) * stride - 2 * padding + kh + output_padding.
Tensor conv2d_transpose(const Tensor& x, const Tensor& kernel, ConvTranspose2dOptions opts = {});

Index conv_output_size(Index in, Index kernel, Index stride, Index padding);
Index conv_transpose_output_size(Index in, Index kernel, Index stride, Index padding,
                                 Index output_padding);

Tensor relu(const Tensor& x);
Tensor leaky_relu(const Tensor& x, double negative_slope = 0.2);
Tensor tanh(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);

Tensor sum(const Tensor& x);
Tensor sum(const Tensor& x, int axis);
Tensor mean(const Tensor& x);
Tensor mean(const Tensor& x, int axis);

Tensor reshape(const Tensor& x, Shape shape);
Tensor concat(const std::vector<Tensor>& xs, int axis);
Tensor clamp(const Tensor& x, double lo, double hi);

/// Softmax over the last axis.
Tensor softmax(const Tensor& x);
Tensor log_softmax(const Tensor& x);

/// Standard-normal tensor shaped like `like`; never requires a gradient.
Tensor gaussian_noise_like(const Tensor& like, Rng& rng);

enum class BatchNormMode {
  kRunning,      // normalize with running statistics
  kBatch,        // normalize with batch statistics, leave running stats alone
  kBatchUpdate,  // batch statistics plus a running-statistics update
};

struct BatchNormOptions {
  BatchNormMode mode = BatchNormMode::kRunning;
  double momentum = 0.1;
  double eps = 1e-5;
};

/// x: (N, C, ...) normalized per channel. running_mean / running_var are
/// updated in place only in kBatchUpdate mode.
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  Tensor& running_mean, Tensor& running_var, BatchNormOptions opts = {});

/// Attribute bag for name-based dispatch.
struct Attrs {
  std::map<std::string, double> scalars;
  Shape shape;
  std::uint64_t seed = 0;

  double get(const std::string& key, double fallback) const {
    auto it = scalars.find(key);
    return it == scalars.end() ? fallback : it->second;
  }
};

/// Name-based dispatch over the primitive set; unknown names throw
/// UnknownPrimitive.
Tensor apply_primitive(const std::string& op, const std::vector<Tensor>& inputs,
                       const Attrs& attrs = {});

const std::vector<std::string>& primitive_names();

}  // namespace gues
