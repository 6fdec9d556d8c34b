#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace gradinv {

/// Bias-corrected Adam.
class Adam {
 public:
  Adam(std::size_t n, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps), m_(n, 0.0), v_(n, 0.0) {}

  void set_lr(double lr) { lr_ = lr; }

  void step(double* x, const double* grad, std::size_t n) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, t_);
    const double c2 = 1.0 - std::pow(beta2_, t_);
    for (std::size_t i = 0; i < n; ++i) {
      double g = grad[i];
      m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * g;
      v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * g * g;
      double mhat = m_[i] / c1;
      double vhat = v_[i] / c2;
      x[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
    }
  }

 private:
  double lr_, beta1_, beta2_, eps_;
  std::int64_t t_ = 0;
  std::vector<double> m_, v_;
};

/// Staged step-size decay for reconstruction runs: x0.1 at 3/8, 5/8 and 7/8
/// of the budget. A constant rate keeps the iterate bouncing around the
/// optimum at the step-size scale and never converges.
inline double staged_lr(double lr0, int iteration, int total_iterations) {
  if (total_iterations >= 8) {
    if (iteration >= total_iterations * 7 / 8) return lr0 * 1e-3;
    if (iteration >= total_iterations * 5 / 8) return lr0 * 1e-2;
    if (iteration >= total_iterations * 3 / 8) return lr0 * 1e-1;
  }
  return lr0;
}

}  // namespace gradinv
