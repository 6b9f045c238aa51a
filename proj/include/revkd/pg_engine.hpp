#pragma once

#include <optional>
#include <span>
#include <vector>

#include "json.hpp"
#include "revkd/rng.hpp"
#include "revkd/tabular_lm.hpp"

namespace revkd {

enum class SampledFrom { student, teacher_mixed };

/// One rollout with per-step log-probabilities cached at sampling time.
struct Trajectory {
  Sequence x;
  Sequence y;
  std::vector<double> log_q;    // student
  std::vector<double> log_p;    // teacher
  std::vector<double> log_mix;  // sampling distribution p~
  SampledFrom sampled_from = SampledFrom::student;

  std::size_t length() const { return y.size(); }
};

/// Next-token mixture alpha * p + (1 - alpha) * q.
class MixedSampler {
 public:
  MixedSampler(const TabularLM& teacher, const TabularLM& student, double alpha);

  const TabularLM& teacher() const { return *teacher_; }
  const TabularLM& student() const { return *student_; }
  double alpha() const { return alpha_; }

  std::vector<double> next_dist(std::span<const Token> history) const;
  Trajectory rollout(const Sequence& x, std::size_t max_len, Rng& rng) const;

 private:
  const TabularLM* teacher_;
  const TabularLM* student_;
  double alpha_;
};

std::vector<double> mixed_next_dist(const MixedSampler& sampler, const Sequence& context);

/// Fills the three log-prob vectors for a given (x, y).
Trajectory make_trajectory(const TabularLM& teacher, const TabularLM& student, double alpha,
                           const Sequence& x, const Sequence& y);

/// `n` rollouts from p~ with prompts drawn uniformly. Rollout i uses its own
/// substream, so the result does not depend on the worker count.
std::vector<Trajectory> collect_rollouts(const TabularLM& teacher, const TabularLM& student, double alpha,
                                         std::span<const Sequence> prompts, std::size_t n,
                                         std::size_t max_len, Rng& rng);

enum class WeightMode { full, per_step };

/// How the suffix return R_{t+1} is normalized by length.
///  off:        raw R_{t+1}
///  term_count: R_{t+1} / (T - t), zero at t = T
///  literal:    R_{t+1} / max(T - t - 1, 1), zero at t = T
enum class LengthNorm { off, term_count, literal };

/// Per-step quantities; vectors are indexed by 0-based step s = t - 1.
struct StepSignals {
  std::vector<double> r;       // log p - log q
  std::vector<double> R;       // suffix sums R_t; R_{T+1} = 0 is implicit
  std::vector<double> R_norm;  // normalized R_{t+1} aligned to step t
  std::vector<double> w_full;  // prod_{t' <= t} q / p~
  std::vector<double> w_step;  // q / p~ at step t
  std::vector<double> rho;     // q / p~ at step t (clipped-surrogate ratio)
  /// sum_{t' > t} (w_full_{t'} / w_full_t) r_{t'}: the suffix return with each
  /// future reward importance-weighted back to step t.
  std::vector<double> R_corrected;

  double R_next(std::size_t s) const { return s + 1 < R.size() ? R[s + 1] : 0.0; }
};

/// Recomputes q-dependent terms from the live student; p and p~ come from the
/// trajectory cache. log_p must agree with the teacher within 1e-10, and with
/// `strict` the cached log_q must agree with the student too.
StepSignals step_signals(const TabularLM& teacher, const TabularLM& student, const Trajectory& traj,
                         LengthNorm length_norm, bool strict = true);

/// Normalized return used by the Long part under the given mode.
double long_return(const StepSignals& sig, std::size_t s, WeightMode mode, LengthNorm norm);

struct EstimatorConfig {
  double alpha = 0.2;
  WeightMode weight_mode = WeightMode::per_step;
  LengthNorm length_norm = LengthNorm::term_count;
  std::optional<double> clip_eps;
  /// Off replaces the exact vocabulary-sum term by its sampled score-function form.
  bool single_step_decomp = true;

  void validate() const;
};

struct GradientParts {
  ParamVector single;
  ParamVector long_part;
  ParamVector pt;
};

struct GradientEstimate {
  ParamVector grad;
  std::size_t n_trajectories = 0;
  /// Sample variance (n - 1 denominator) of per-trajectory contributions; zero
  /// and flagged when n < 2.
  ParamVector component_variance;
  bool variance_undefined = false;
  std::optional<GradientParts> parts;

  double variance_trace() const;
};

/// Mean and per-component variance of a list of contributions (ordered sum).
GradientEstimate estimate_from_contributions(std::span<const ParamVector> contributions);

/// Gradient of E_{y' ~ q(.|ctx_t)}[log p(y'|ctx_t) / q(y'|ctx_t)] with respect to
/// the student logits, summed over the vocabulary. `s` is the 0-based step.
ParamVector single_step_term(const TabularLM& teacher, const TabularLM& student, const Trajectory& traj,
                             std::size_t s);
/// Adds scale * single_step_term at the given contexts into grad.
void add_single_step_term(const TabularLM& teacher, std::size_t teacher_key, const TabularLM& student,
                          std::size_t student_key, double scale, ParamVector& grad);

/// -sum_t (R_t - 1) grad log q(y_t); the constant can be dropped to show it has zero mean.
ParamVector vanilla_pg_contribution(const TabularLM& teacher, const TabularLM& student,
                                    const Trajectory& traj, bool include_minus_one = true);

struct Contribution {
  ParamVector single;
  ParamVector long_part;
  ParamVector total() const { return single + long_part; }
};

/// Per-trajectory contribution to the combined gradient:
///   -sum_t [ w_t * single_t + mask_t * w_t * Rret_t * grad log q(y_t) ]
/// With weight_mode=full the single part uses w_full_t and the long part
/// uses w_full_t times the importance-corrected return; with per_step both use
/// q/p~ at step t. mask_t zeroes the long term where the PPO-style clipped
/// surrogate is flat.
Contribution minillm_contribution(const TabularLM& teacher, const TabularLM& student, const Trajectory& traj,
                                  const EstimatorConfig& cfg, bool strict = true);

GradientEstimate vanilla_pg_gradient(const TabularLM& teacher, const TabularLM& student,
                                     std::span<const Sequence> prompts, std::size_t n_traj,
                                     std::size_t max_len, Rng& rng);

GradientEstimate minillm_gradient(const TabularLM& teacher, const TabularLM& student,
                                  std::span<const Sequence> prompts, std::size_t n_traj,
                                  const EstimatorConfig& cfg, std::size_t max_len, Rng& rng);

/// Estimator over already-collected trajectories (stale samples allowed).
GradientEstimate minillm_gradient_from(const TabularLM& teacher, const TabularLM& student,
                                       std::span<const Trajectory> trajectories, const EstimatorConfig& cfg,
                                       bool strict = true);

/// Every (x, y) with its probability under p~ for one prompt.
struct WeightedTrajectory {
  double prob = 0.0;
  Trajectory traj;
};
std::vector<WeightedTrajectory> enumerate_trajectories(const TabularLM& teacher, const TabularLM& student,
                                                       double alpha, const Sequence& x,
                                                       std::size_t max_len);

/// sum over enumerated trajectories of prob * contribution(traj), averaged over prompts.
template <typename Fn>
ParamVector exact_expectation(const TabularLM& teacher, const TabularLM& student, double alpha,
                              std::span<const Sequence> prompts, std::size_t max_len, Fn&& contribution) {
  ParamVector acc(student.params().size(), 0.0);
  for (const auto& x : prompts) {
    for (const auto& wt : enumerate_trajectories(teacher, student, alpha, x, max_len)) {
      acc.axpy(wt.prob, contribution(wt.traj));
    }
  }
  acc *= 1.0 / static_cast<double>(prompts.size());
  return acc;
}

/// Teacher-logit reward f(y_t, ctx_<t) - log sum_y' exp f(y', ctx_<=t) at 0-based step s.
double irl_step_reward(const TabularLM& teacher, const Sequence& x, const Sequence& y, std::size_t s);
/// log sum_y' exp f(y', ctx) for the context after `history`.
double teacher_lse(const TabularLM& teacher, std::span<const Token> history);

nlohmann::json to_json(const StepSignals& sig);
nlohmann::json to_json(const GradientEstimate& est);

}  // namespace revkd
