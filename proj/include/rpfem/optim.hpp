#ifndef RPFEM_OPTIM_HPP_
#define RPFEM_OPTIM_HPP_

#include <cmath>
#include <span>
#include <vector>

#include "rpfem/tensor.hpp"

namespace rpfem {

namespace detail {

inline void check_grad_shape(const Tensor& param, const NDArray& grad) {
  if (param.shape() != grad.shape) {
    throw DimensionError("optimizer: parameter " + shape_str(param.shape()) +
                         " paired with gradient " + shape_str(grad.shape));
  }
}

}  // namespace detail

/// p <- p - lr * g, with gradients given explicitly.
inline void sgd_step(std::span<Tensor> params, std::span<const NDArray> grads, double lr) {
  if (!(lr >= 0.0)) throw ContractError("sgd_step: negative learning rate");
  if (params.size() != grads.size()) {
    throw DimensionError("sgd_step: " + std::to_string(params.size()) +
                         " parameters but " + std::to_string(grads.size()) + " gradients");
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    detail::check_grad_shape(params[k], grads[k]);
    auto values = params[k].mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) values[i] -= lr * grads[k].data[i];
  }
}

/// Same, using each parameter's accumulated grad; parameters without one
/// are left alone.
inline void sgd_step(std::span<Tensor> params, double lr) {
  for (Tensor& p : params) {
    if (!p.has_grad()) continue;
    NDArray g = p.grad();
    sgd_step(std::span<Tensor>(&p, 1), std::span<const NDArray>(&g, 1), lr);
  }
}

inline void zero_grad(std::span<Tensor> params) {
  for (Tensor& p : params) p.zero_grad();
}

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with bias-corrected moments. Moment buffers are bound to parameter
/// position, so the same parameter list must be passed on every step.
class Adam {
public:
  explicit Adam(AdamConfig config = {}) : config_(config) {
    if (!(config_.lr >= 0.0)) throw ContractError("Adam: negative learning rate");
  }

  void step(std::span<Tensor> params) {
    if (first_.empty()) {
      for (const Tensor& p : params) {
        first_.emplace_back(p.shape());
        second_.emplace_back(p.shape());
      }
    }
    if (first_.size() != params.size()) {
      throw DimensionError("Adam: parameter list changed size between steps");
    }
    ++steps_;
    const double correction1 = 1.0 - std::pow(config_.beta1, static_cast<double>(steps_));
    const double correction2 = 1.0 - std::pow(config_.beta2, static_cast<double>(steps_));
    for (std::size_t k = 0; k < params.size(); ++k) {
      Tensor& p = params[k];
      if (!p.has_grad()) continue;
      detail::check_grad_shape(p, p.grad());
      if (first_[k].shape != p.shape()) {
        throw DimensionError("Adam: parameter " + std::to_string(k) + " changed shape");
      }
      const auto& g = p.grad().data;
      auto values = p.mutable_data();
      for (std::size_t i = 0; i < values.size(); ++i) {
        double& m = first_[k].data[i];
        double& v = second_[k].data[i];
        m = config_.beta1 * m + (1.0 - config_.beta1) * g[i];
        v = config_.beta2 * v + (1.0 - config_.beta2) * g[i] * g[i];
        const double m_hat = m / correction1;
        const double v_hat = v / correction2;
        values[i] -= config_.lr * m_hat / (std::sqrt(v_hat) + config_.eps);
      }
    }
  }

  long steps() const { return steps_; }
  const AdamConfig& config() const { return config_; }

private:
  AdamConfig config_;
  std::vector<NDArray> first_;
  std::vector<NDArray> second_;
  long steps_ = 0;
};

}  // namespace rpfem

#endif  // RPFEM_OPTIM_HPP_
