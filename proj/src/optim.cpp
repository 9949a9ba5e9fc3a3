#include "gues/optim.hpp"

namespace gues {

SgdState make_sgd(std::span<const Tensor> params, double learning_rate, double momentum) {
  if (!(learning_rate > 0.0)) throw Error("sgd: learning rate must be positive");
  if (momentum < 0.0 || momentum >= 1.0) throw Error("sgd: momentum must lie in [0, 1)");
  SgdState state{learning_rate, momentum, {}};
  state.velocity.reserve(params.size());
  for (const auto& p : params) state.velocity.push_back(Buffer::Zero(p.numel()));
  return state;
}

void sgd_step(std::span<Tensor> params, SgdState& state) {
  if (params.size() != state.velocity.size()) {
    throw Error("sgd: " + std::to_string(params.size()) + " parameters but " +
                std::to_string(state.velocity.size()) + " velocity buffers");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].has_grad()) {
      throw Error("sgd: parameter " + std::to_string(i) + " has no gradient");
    }
    if (params[i].numel() != state.velocity[i].size()) {
      throw ShapeError("sgd: velocity buffer " + std::to_string(i) + " does not match parameter");
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    Buffer& v = state.velocity[i];
    v = state.momentum * v + params[i].grad();
    params[i].mutable_data() -= state.learning_rate * v;
    params[i].zero_grad();
  }
}

void zero_grads(std::span<Tensor> params) {
  for (auto& p : params) p.zero_grad();
}

}  // namespace gues
