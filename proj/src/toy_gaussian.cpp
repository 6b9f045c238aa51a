#include "revkd/toy_gaussian.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "revkd/errors.hpp"

namespace revkd::toy {

namespace {
constexpr double kFloor = 1e-300;
constexpr double kMassTolerance = 1e-8;
const double kLogSqrt2Pi = 0.5 * std::log(2.0 * M_PI);
}  // namespace

double Gaussian1D::log_pdf(double x) const {
  const double z = (x - mu) / sigma;
  return -0.5 * z * z - std::log(sigma) - kLogSqrt2Pi;
}

double Gaussian1D::pdf(double x) const { return std::exp(log_pdf(x)); }

void Mixture1D::validate() const {
  if (components.empty()) throw ConfigError("mixture has no components");
  double total = 0.0;
  for (const auto& c : components) {
    if (!(c.weight > 0.0)) throw ConfigError("mixture weights must be positive");
    if (!(c.g.sigma > 0.0)) throw ConfigError("mixture component sigma must be positive");
    total += c.weight;
  }
  if (std::abs(total - 1.0) > 1e-12) throw ConfigError("mixture weights must sum to 1");
}

double Mixture1D::pdf(double x) const {
  double s = 0.0;
  for (const auto& c : components) s += c.weight * c.g.pdf(x);
  return s;
}

double Mixture1D::mean() const {
  double m = 0.0;
  for (const auto& c : components) m += c.weight * c.g.mu;
  return m;
}

double Mixture1D::variance() const {
  const double m = mean();
  double second = 0.0;
  for (const auto& c : components) second += c.weight * (c.g.sigma * c.g.sigma + c.g.mu * c.g.mu);
  return second - m * m;
}

Mixture1D Mixture1D::default_bimodal() { return {{{0.5, {-4.0, 1.0}}, {0.5, {4.0, 1.0}}}}; }

void Quadrature::validate() const {
  if (!(hi > lo)) throw ConfigError("quadrature grid requires hi > lo");
  if (n_points < 101) throw ConfigError("quadrature grid requires at least 101 points");
}

std::vector<double> Quadrature::nodes() const {
  std::vector<double> x(n_points);
  const double h = (hi - lo) / static_cast<double>(n_points - 1);
  for (std::size_t i = 0; i < n_points; ++i) x[i] = lo + h * static_cast<double>(i);
  return x;
}

std::vector<double> Quadrature::weights() const {
  const double h = (hi - lo) / static_cast<double>(n_points - 1);
  std::vector<double> w(n_points, h);
  w.front() = w.back() = 0.5 * h;
  return w;
}

namespace {

struct Grid {
  std::vector<double> x, w, a, b;  // nodes, weights, target density, Gaussian density
};

Grid evaluate(const Mixture1D& a, const Gaussian1D& b, const Quadrature& quad) {
  quad.validate();
  a.validate();
  if (!(b.sigma > 0.0)) throw std::domain_error("Gaussian sigma must be positive");
  Grid g{quad.nodes(), quad.weights(), {}, {}};
  g.a.resize(g.x.size());
  g.b.resize(g.x.size());
  for (std::size_t i = 0; i < g.x.size(); ++i) {
    g.a[i] = a.pdf(g.x[i]);
    g.b[i] = b.pdf(g.x[i]);
  }
  return g;
}

void check_mass(const std::vector<double>& density, const std::vector<double>& w, const char* name) {
  double mass = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) mass += w[i] * density[i];
  if (std::abs(1.0 - mass) > kMassTolerance) {
    throw std::domain_error(std::string("quadrature grid misses mass of the ") + name +
                            " density (grid mass " + std::to_string(mass) + ")");
  }
}

}  // namespace

double kld_quadrature(const Mixture1D& a, const Gaussian1D& b, const Quadrature& quad, KldKind kind) {
  const Grid g = evaluate(a, b, quad);
  const bool fwd = kind == KldKind::forward;
  check_mass(fwd ? g.a : g.b, g.w, fwd ? "target" : "Gaussian");
  double s = 0.0;
  for (std::size_t i = 0; i < g.x.size(); ++i) {
    const double la = std::log(std::max(g.a[i], kFloor));
    const double lb = std::log(std::max(g.b[i], kFloor));
    s += fwd ? g.w[i] * g.a[i] * (la - lb) : g.w[i] * g.b[i] * (lb - la);
  }
  return s;
}

double ParamGradient::norm() const { return std::hypot(d_mu, d_log_sigma); }

ParamGradient kld_gradient(const Mixture1D& target, const Gaussian1D& q, const Quadrature& quad, KldKind kind) {
  const Grid g = evaluate(target, q, quad);
  ParamGradient grad;
  for (std::size_t i = 0; i < g.x.size(); ++i) {
    const double z = (g.x[i] - q.mu) / q.sigma;
    const double dmu = z / q.sigma;        // d log q / d mu
    const double dls = z * z - 1.0;        // d log q / d log sigma
    if (kind == KldKind::forward) {
      // d/dtheta of -sum w a log q
      grad.d_mu -= g.w[i] * g.a[i] * dmu;
      grad.d_log_sigma -= g.w[i] * g.a[i] * dls;
    } else {
      // d/dtheta of sum w q (log q - log a) = sum w q dlogq (log q - log a + 1)
      const double lq = std::log(std::max(g.b[i], kFloor));
      const double la = std::log(std::max(g.a[i], kFloor));
      const double c = g.w[i] * g.b[i] * (lq - la + 1.0);
      grad.d_mu += c * dmu;
      grad.d_log_sigma += c * dls;
    }
  }
  return grad;
}

Gaussian1D moment_match(const Mixture1D& target) {
  target.validate();
  return {target.mean(), std::sqrt(target.variance())};
}

namespace {

FitResult descend(const Mixture1D& target, const Quadrature& quad, Gaussian1D init, double lr, std::size_t steps,
                  KldKind kind) {
  if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
  if (!(init.sigma > 0.0)) throw ConfigError("initial sigma must be positive");
  double mu = init.mu;
  double log_sigma = std::log(init.sigma);
  FitResult res;
  for (std::size_t s = 0; s < steps; ++s) {
    const auto grad = kld_gradient(target, {mu, std::exp(log_sigma)}, quad, kind);
    mu -= lr * grad.d_mu;
    log_sigma -= lr * grad.d_log_sigma;
    if (!std::isfinite(mu) || !std::isfinite(log_sigma)) {
      throw TrainingAborted("Gaussian fit diverged at step " + std::to_string(s));
    }
    res.steps = s + 1;
  }
  res.fit = {mu, std::exp(log_sigma)};
  res.grad_norm = kld_gradient(target, res.fit, quad, kind).norm();
  res.objective = kld_quadrature(target, res.fit, quad, kind);
  return res;
}

}  // namespace

FitResult fit_forward(const Mixture1D& target, const Quadrature& quad, Gaussian1D init, double lr,
                      std::size_t steps) {
  return descend(target, quad, init, lr, steps, KldKind::forward);
}

FitResult fit_reverse(const Mixture1D& target, const Quadrature& quad, Gaussian1D init, double lr,
                      std::size_t steps) {
  return descend(target, quad, init, lr, steps, KldKind::reverse);
}

}  // namespace revkd::toy
