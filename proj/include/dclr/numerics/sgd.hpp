#pragma once

#include <span>

#include "dclr/numerics/tensor.hpp"

namespace dclr::numerics {

/// p <- p - lr * g, elementwise.
template <typename T>
void sgd_step(BasicTensor<T>& param, const BasicTensor<T>& grad, T lr) {
  require(lr > T(0), "sgd_step: learning rate must be positive");
  require(param.shape() == grad.shape(),
          "sgd_step: parameter " + shape_str(param.shape()) + " vs gradient " + shape_str(grad.shape()));
  for (std::size_t i = 0; i < param.numel(); ++i) param[i] -= lr * grad[i];
  check_finite(param, "sgd_step");
}

template <typename T>
void sgd_step(std::span<BasicTensor<T>* const> params, std::span<const BasicTensor<T>> grads, T lr) {
  require(params.size() == grads.size(), "sgd_step: parameter and gradient counts differ");
  for (std::size_t i = 0; i < params.size(); ++i) sgd_step(*params[i], grads[i], lr);
}

}  // namespace dclr::numerics
