#pragma once

#include <cmath>
#include <vector>

#include "sslseg/tensor.hpp"

namespace sslseg {

/// Adam with bias correction. Moment buffers are keyed by parameter index,
/// so callers must pass the same parameter list every step; frozen entries
/// are skipped via the mask (their moments also stay untouched).
template <typename T>
class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(const std::vector<Tensor<T>*>& params,
            const std::vector<const Tensor<T>*>& grads,
            const std::vector<std::uint8_t>& update_mask) {
    if (params.size() != grads.size() || params.size() != update_mask.size())
      throw std::invalid_argument("adam: list size mismatch");
    if (m_.empty()) {
      m_.resize(params.size());
      v_.resize(params.size());
      for (std::size_t i = 0; i < params.size(); ++i) {
        m_[i] = Tensor<T>::zeros(params[i]->shape);
        v_[i] = Tensor<T>::zeros(params[i]->shape);
      }
    }
    ++t_;
    const T bc1 = static_cast<T>(1.0 - std::pow(beta1_, t_));
    const T bc2 = static_cast<T>(1.0 - std::pow(beta2_, t_));
    const T lr = static_cast<T>(lr_);
    const T b1 = static_cast<T>(beta1_), b2 = static_cast<T>(beta2_);
    const T eps = static_cast<T>(eps_);
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (!update_mask[i]) continue;
      if (!params[i]->same_shape(*grads[i]))
        throw std::invalid_argument("adam: grad shape mismatch");
      auto& m = m_[i].v;
      auto& v = v_[i].v;
      const auto& g = grads[i]->v;
      m = b1 * m + (T(1) - b1) * g;
      v = b2 * v + (T(1) - b2) * g * g;
      params[i]->v -= lr * (m / bc1) / ((v / bc2).sqrt() + eps);
    }
  }

  double learning_rate() const { return lr_; }
  std::int64_t steps_taken() const { return t_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  std::int64_t t_ = 0;
  std::vector<Tensor<T>> m_, v_;
};

}  // namespace sslseg
