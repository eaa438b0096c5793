// SPDX-License-Identifier: Apache-2.0

#include "agrifuse/optim.hpp"

#include <cmath>
#include <numbers>

#include "agrifuse/errors.hpp"

namespace agrifuse {

void Schedule::validate() const {
  if (warmup_epochs == 0 || warmup_epochs >= total_epochs) {
    throw ConfigError("schedule: need 0 < warmup < total, got " +
                      std::to_string(warmup_epochs) + "/" +
                      std::to_string(total_epochs));
  }
}

double cosine_warmup_lr(std::size_t epoch, const Schedule& s) {
  s.validate();
  if (epoch > s.total_epochs) return 0.0;
  if (epoch <= s.warmup_epochs) {
    return s.peak * static_cast<double>(epoch) /
           static_cast<double>(s.warmup_epochs);
  }
  const double progress =
      static_cast<double>(epoch - s.warmup_epochs) /
      static_cast<double>(s.total_epochs - s.warmup_epochs);
  return s.peak * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

Tensor rmse_loss(const Tensor& pred, const Tensor& target) {
  if (pred.shape() != target.shape()) {
    throw ShapeError("rmse_loss: shapes " + shape_str(pred.shape()) +
                     " vs " + shape_str(target.shape()));
  }
  Tensor residual = sub(pred, target);
  return sqrt_scalar(mean(hadamard(residual, residual)));
}

Adam::Adam(ParamMap params, double beta1, double beta2, double eps)
    : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const auto& [name, t] : params_) {
    m_.emplace_back(t->size(), 0.0);
    v_.emplace_back(t->size(), 0.0);
  }
}

void Adam::step(double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor* t = params_[i].second;
    if (!t->has_grad()) {
      throw ContractError("adam: missing gradient for parameter '" +
                          params_[i].first + "'");
    }
    auto g = t->grad();
    auto p = t->mutable_values();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = beta1_ * m[j] + (1.0 - beta1_) * g[j];
      v[j] = beta2_ * v[j] + (1.0 - beta2_) * g[j] * g[j];
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      p[j] -= lr * mhat / (std::sqrt(vhat) + eps_);
    }
  }
}

void Adam::zero_grad() {
  for (auto& [name, t] : params_) t->zero_grad();
}

}  // namespace agrifuse
