#pragma once

#include <codembed/tensor.hpp>

#include <cmath>
#include <cstddef>
#include <vector>

namespace codembed {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// Linear warmup over the first warmup_fraction of steps, then cosine decay
/// from peak_lr down to min_lr_ratio * peak_lr at the final step.
struct LearningRateSchedule {
  double peak_lr = 3e-4;
  double warmup_fraction = 0.05;
  double min_lr_ratio = 0.1;
  std::size_t total_steps = 1;

  /// `step` is zero-based.
  double at(std::size_t step) const {
    const auto warmup = static_cast<std::size_t>(std::ceil(warmup_fraction * static_cast<double>(total_steps)));
    if (step < warmup) return peak_lr * static_cast<double>(step + 1) / static_cast<double>(warmup);
    const std::size_t decay = total_steps > warmup + 1 ? total_steps - warmup - 1 : 1;
    const double progress = std::min(1.0, static_cast<double>(step - warmup) / static_cast<double>(decay));
    constexpr double kPi = 3.14159265358979323846;
    return peak_lr * (min_lr_ratio + (1.0 - min_lr_ratio) * 0.5 * (1.0 + std::cos(kPi * progress)));
  }
};

/// Adam with decoupled weight decay. Parameters flagged non-trainable are
/// left bitwise untouched.
template <typename Scalar>
class AdamW {
 public:
  AdamW(std::vector<Parameter<Scalar>*> params, AdamWConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    for (auto* p : params_) {
      first_.push_back(Matrix<Scalar>::Zero(p->value.rows(), p->value.cols()));
      second_.push_back(Matrix<Scalar>::Zero(p->value.rows(), p->value.cols()));
    }
  }

  void step(double lr) {
    ++steps_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(steps_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(steps_));
    const auto b1 = static_cast<Scalar>(cfg_.beta1), b2 = static_cast<Scalar>(cfg_.beta2);
    const auto step_size = static_cast<Scalar>(lr / bc1);
    const auto inv_sqrt_bc2 = static_cast<Scalar>(1.0 / std::sqrt(bc2));
    const auto eps = static_cast<Scalar>(cfg_.eps);
    const auto decay = static_cast<Scalar>(1.0 - lr * cfg_.weight_decay);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Parameter<Scalar>& p = *params_[i];
      if (!p.trainable) continue;
      first_[i] = b1 * first_[i] + (Scalar(1) - b1) * p.grad;
      second_[i] = b2 * second_[i] + (Scalar(1) - b2) * p.grad.cwiseProduct(p.grad);
      p.value *= decay;
      p.value.array() -= step_size * first_[i].array() / ((second_[i].array().sqrt() * inv_sqrt_bc2) + eps);
    }
  }

  std::size_t step_count() const { return steps_; }
  const Matrix<Scalar>& first_moment(std::size_t i) const { return first_[i]; }
  const Matrix<Scalar>& second_moment(std::size_t i) const { return second_[i]; }

 private:
  std::vector<Parameter<Scalar>*> params_;
  AdamWConfig cfg_;
  std::vector<Matrix<Scalar>> first_, second_;
  std::size_t steps_ = 0;
};

/// Global L2 norm over the gradients of trainable parameters, accumulated
/// in double.
template <typename Scalar>
double gradient_norm(const std::vector<Parameter<Scalar>*>& params) {
  double sq = 0;
  for (const auto* p : params) {
    if (!p->trainable) continue;
    for (Index k = 0; k < p->grad.size(); ++k) {
      const double g = p->grad.data()[k];
      sq += g * g;
    }
  }
  return std::sqrt(sq);
}

/// Rescales trainable gradients so their global norm is at most max_norm.
/// Returns the norm before clipping.
template <typename Scalar>
double clip_gradients(const std::vector<Parameter<Scalar>*>& params, double max_norm) {
  const double norm = gradient_norm(params);
  if (max_norm > 0 && norm > max_norm) {
    const auto f = static_cast<Scalar>(max_norm / norm);
    for (auto* p : params) {
      if (p->trainable) p->grad *= f;
    }
  }
  return norm;
}

}  // namespace codembed
