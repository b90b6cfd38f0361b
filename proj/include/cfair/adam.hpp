#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "cfair/errors.hpp"
#include "cfair/types.hpp"

namespace cfair {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam with bias correction. Moment buffers mirror the parameter shapes.
class AdamState {
 public:
  AdamState() = default;

  AdamState(const std::vector<Matrix*>& params, AdamConfig cfg) : cfg_(cfg) {
    if (!(cfg.lr > 0.0)) throw ConfigError("Adam learning rate must be positive");
    for (const Matrix* p : params) {
      m_.push_back(Matrix::Zero(p->rows(), p->cols()));
      v_.push_back(Matrix::Zero(p->rows(), p->cols()));
    }
  }

  long step_count() const noexcept { return step_; }
  const AdamConfig& config() const noexcept { return cfg_; }
  const std::vector<Matrix>& first_moments() const noexcept { return m_; }
  const std::vector<Matrix>& second_moments() const noexcept { return v_; }

  void step(const std::vector<Matrix*>& params, std::span<const Matrix> grads) {
    if (params.size() != m_.size() || grads.size() != m_.size())
      throw ArgumentError("adam_step: parameter/gradient count mismatch");
    for (std::size_t i = 0; i < m_.size(); ++i)
      if (params[i]->rows() != m_[i].rows() || params[i]->cols() != m_[i].cols() ||
          grads[i].rows() != m_[i].rows() || grads[i].cols() != m_[i].cols())
        throw ArgumentError("adam_step: shape mismatch in parameter " + std::to_string(i));

    ++step_;
    const double t = static_cast<double>(step_);
    const double c1 = 1.0 - std::pow(cfg_.beta1, t);
    const double c2 = 1.0 - std::pow(cfg_.beta2, t);
    for (std::size_t i = 0; i < m_.size(); ++i) {
      auto g = grads[i].array();
      m_[i].array() = cfg_.beta1 * m_[i].array() + (1.0 - cfg_.beta1) * g;
      v_[i].array() = cfg_.beta2 * v_[i].array() + (1.0 - cfg_.beta2) * g.square();
      params[i]->array() -=
          cfg_.lr * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + cfg_.eps);
    }
  }

 private:
  AdamConfig cfg_;
  long step_ = 0;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
};

inline void adam_step(AdamState& state, const std::vector<Matrix*>& params,
                      std::span<const Matrix> grads) {
  state.step(params, grads);
}

}  // namespace cfair
