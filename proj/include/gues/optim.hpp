#pragma once

#include <span>
#include <vector>

#include "gues/tensor.hpp"

namespace gues {

/// SGD with heavy-ball momentum: v <- momentum * v + grad; p <- p - lr * v.
struct SgdState {
  double learning_rate = 1e-5;
  double momentum = 0.9;
  std::vector<Buffer> velocity;
};

/// Zero-initialized velocity buffers, one per parameter.
SgdState make_sgd(std::span<const Tensor> params, double learning_rate, double momentum);

/// Applies one update and zeroes the gradients. Throws when a parameter has
/// no gradient or the parameter list does not match the velocity buffers.
void sgd_step(std::span<Tensor> params, SgdState& state);

void zero_grads(std::span<Tensor> params);

}  // namespace gues
