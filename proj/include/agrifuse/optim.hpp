// SPDX-License-Identifier: Apache-2.0
#ifndef AGRIFUSE_OPTIM_HPP
#define AGRIFUSE_OPTIM_HPP

#include <vector>

#include "agrifuse/serialize.hpp"
#include "agrifuse/tensor.hpp"

namespace agrifuse {

/// Linear warmup to the peak rate, then a half-cosine decay to zero.
struct Schedule {
  std::size_t warmup_epochs = 100;
  std::size_t total_epochs = 600;
  double peak = 1e-6;

  void validate() const;
};

/// epoch 0 -> 0, epoch == warmup -> peak, epoch == total -> 0; epochs past
/// the schedule return 0.
double cosine_warmup_lr(std::size_t epoch, const Schedule& s);

/// sqrt(mean((pred - target)^2)); the gradient is zero-guarded at exact
/// equality where the square root is not differentiable.
Tensor rmse_loss(const Tensor& pred, const Tensor& target);

/// Adam with bias correction over an ordered parameter set. Moments live
/// beside the optimizer; parameters update in place.
class Adam {
 public:
  explicit Adam(ParamMap params, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8);

  /// One update from the gradients currently on the parameters. Throws
  /// ContractError if any parameter is missing its gradient.
  void step(double lr);
  void zero_grad();
  std::size_t steps() const { return t_; }

 private:
  ParamMap params_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  double beta1_, beta2_, eps_;
  std::size_t t_ = 0;
};

}  // namespace agrifuse

#endif  // AGRIFUSE_OPTIM_HPP
