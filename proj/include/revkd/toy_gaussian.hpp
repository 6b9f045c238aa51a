#pragma once

#include <cstddef>
#include <vector>

#include "revkd/divergence.hpp"

namespace revkd::toy {

struct Gaussian1D {
  double mu = 0.0;
  double sigma = 1.0;

  double pdf(double x) const;
  double log_pdf(double x) const;
};

struct Mixture1D {
  struct Component {
    double weight;
    Gaussian1D g;
  };
  std::vector<Component> components;

  /// Throws unless weights are positive and sum to 1 within 1e-12 and every sigma > 0.
  void validate() const;
  double pdf(double x) const;
  double mean() const;
  double variance() const;

  static Mixture1D single(Gaussian1D g) { return {{{1.0, g}}}; }
  /// 0.5 N(-4, 1) + 0.5 N(4, 1)
  static Mixture1D default_bimodal();
};

/// Uniform grid on [lo, hi] with trapezoidal weights.
struct Quadrature {
  double lo = -15.0;
  double hi = 15.0;
  std::size_t n_points = 4001;

  void validate() const;
  std::vector<double> nodes() const;
  std::vector<double> weights() const;
};

/// forward: integral of a log(a/b); reverse: integral of b log(b/a), with both
/// densities floored at 1e-300 before the log. The density that weights the
/// integral must have grid mass >= 1 - 1e-8 or a std::domain_error names it.
double kld_quadrature(const Mixture1D& a, const Gaussian1D& b, const Quadrature& quad, KldKind kind);

/// Gradient of the quadrature objective with respect to (mu, log sigma).
struct ParamGradient {
  double d_mu = 0.0;
  double d_log_sigma = 0.0;
  double norm() const;
};
ParamGradient kld_gradient(const Mixture1D& target, const Gaussian1D& q, const Quadrature& quad, KldKind kind);

/// Forward-KLD optimum among Gaussians: the target's mean and standard deviation.
Gaussian1D moment_match(const Mixture1D& target);

struct FitResult {
  Gaussian1D fit;
  double objective = 0.0;
  double grad_norm = 0.0;
  std::size_t steps = 0;
};

/// Gradient descent over (mu, log sigma) on KL(target || q).
FitResult fit_forward(const Mixture1D& target, const Quadrature& quad, Gaussian1D init, double lr,
                      std::size_t steps);
/// Gradient descent over (mu, log sigma) on KL(q || target).
FitResult fit_reverse(const Mixture1D& target, const Quadrature& quad, Gaussian1D init, double lr,
                      std::size_t steps);

}  // namespace revkd::toy
