#include "revkd/pg_engine.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "revkd/errors.hpp"
#include "revkd/parallel.hpp"
#include "revkd/report.hpp"

namespace revkd {

namespace {

constexpr double kCacheTolerance = 1e-10;

void check_cache(const std::vector<double>& cached, const std::vector<double>& live, const char* what) {
  if (cached.size() != live.size()) {
    throw std::logic_error(std::string("trajectory ") + what + " has wrong length");
  }
  for (std::size_t i = 0; i < live.size(); ++i) {
    if (!(std::abs(cached[i] - live[i]) <= kCacheTolerance)) {
      throw std::logic_error(std::string("trajectory ") + what + " inconsistent with model at step " +
                             std::to_string(i));
    }
  }
}

double norm_denominator(std::size_t T, std::size_t s, LengthNorm norm) {
  // t = s + 1 is the 1-based step; T - t terms remain after it
  const double remaining = static_cast<double>(T - s - 1);
  switch (norm) {
    case LengthNorm::off:
      return 1.0;
    case LengthNorm::term_count:
      return remaining;
    case LengthNorm::literal:
      return std::max(remaining - 1.0, 1.0);
  }
  return 1.0;
}

double normalized(double value, std::size_t T, std::size_t s, LengthNorm norm) {
  if (norm == LengthNorm::off) return value;
  if (s + 1 >= T) return 0.0;
  return value / norm_denominator(T, s, norm);
}

}  // namespace

// ---------------------------------------------------------------------------
// sampling

MixedSampler::MixedSampler(const TabularLM& teacher, const TabularLM& student, double alpha)
    : teacher_(&teacher), student_(&student), alpha_(alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) {
    throw ConfigError("teacher mix-in strength alpha must lie in [0, 1], got " + std::to_string(alpha));
  }
  if (!(teacher.vocab() == student.vocab())) {
    throw std::invalid_argument("MixedSampler: teacher and student vocabularies differ");
  }
}

std::vector<double> MixedSampler::next_dist(std::span<const Token> history) const {
  const auto p = teacher_->dist_at(teacher_->key_of(history));
  auto q = student_->dist_at(student_->key_of(history));
  for (std::size_t v = 0; v < q.size(); ++v) q[v] = alpha_ * p[v] + (1.0 - alpha_) * q[v];
  return q;
}

std::vector<double> mixed_next_dist(const MixedSampler& sampler, const Sequence& context) {
  return sampler.next_dist(context.tokens);
}

Trajectory MixedSampler::rollout(const Sequence& x, std::size_t max_len, Rng& rng) const {
  if (max_len < 1) throw std::invalid_argument("rollout: max_len must be >= 1");
  Trajectory tr;
  tr.x = x;
  tr.sampled_from = alpha_ > 0.0 ? SampledFrom::teacher_mixed : SampledFrom::student;
  std::vector<Token> history = x.tokens;
  const Token eos = student_->vocab().eos;
  while (tr.y.size() < max_len) {
    const auto lp = teacher_->log_dist_at(teacher_->key_of(history));
    const auto lq = student_->log_dist_at(student_->key_of(history));
    std::vector<double> mix(lq.size());
    for (std::size_t v = 0; v < mix.size(); ++v) {
      mix[v] = alpha_ * std::exp(lp[v]) + (1.0 - alpha_) * std::exp(lq[v]);
    }
    const auto t = static_cast<Token>(rng.categorical(mix));
    tr.y.tokens.push_back(t);
    tr.log_p.push_back(lp[t]);
    tr.log_q.push_back(lq[t]);
    tr.log_mix.push_back(std::log(mix[t]));
    history.push_back(t);
    if (t == eos) break;
  }
  tr.y.terminated = true;
  return tr;
}

Trajectory make_trajectory(const TabularLM& teacher, const TabularLM& student, double alpha,
                           const Sequence& x, const Sequence& y) {
  Trajectory tr;
  tr.x = x;
  tr.y = y;
  tr.sampled_from = alpha > 0.0 ? SampledFrom::teacher_mixed : SampledFrom::student;
  tr.log_q = step_log_probs(student, x, y);
  tr.log_p = step_log_probs(teacher, x, y);
  tr.log_mix.resize(y.size());
  for (std::size_t s = 0; s < y.size(); ++s) {
    tr.log_mix[s] = std::log(alpha * std::exp(tr.log_p[s]) + (1.0 - alpha) * std::exp(tr.log_q[s]));
  }
  return tr;
}

std::vector<Trajectory> collect_rollouts(const TabularLM& teacher, const TabularLM& student, double alpha,
                                         std::span<const Sequence> prompts, std::size_t n,
                                         std::size_t max_len, Rng& rng) {
  if (prompts.empty()) throw std::invalid_argument("collect_rollouts: empty prompt list");
  const MixedSampler sampler(teacher, student, alpha);
  const Rng base(rng.next_u64());
  std::vector<Trajectory> out(n);
  parallel_for(n, [&](std::size_t i) {
    Rng local = base.substream(i);
    const Sequence& x = prompts[local.below(prompts.size())];
    out[i] = sampler.rollout(x, max_len, local);
  });
  return out;
}

// ---------------------------------------------------------------------------
// per-step signals

StepSignals step_signals(const TabularLM& teacher, const TabularLM& student, const Trajectory& traj,
                         LengthNorm length_norm, bool strict) {
  const std::size_t T = traj.length();
  check_cache(traj.log_p, step_log_probs(teacher, traj.x, traj.y), "log_p");
  const auto log_q = step_log_probs(student, traj.x, traj.y);
  if (strict) check_cache(traj.log_q, log_q, "log_q");
  if (traj.log_mix.size() != T) throw std::logic_error("trajectory log_mix has wrong length");
  if (traj.sampled_from == SampledFrom::teacher_mixed) {
    for (double v : traj.log_mix) {
      if (!std::isfinite(v)) throw std::logic_error("teacher-mixed trajectory has non-finite log p~");
    }
  }

  StepSignals sig;
  sig.r.resize(T);
  sig.R.resize(T);
  sig.R_norm.resize(T);
  sig.w_full.resize(T);
  sig.w_step.resize(T);
  sig.rho.resize(T);
  sig.R_corrected.resize(T);

  for (std::size_t s = 0; s < T; ++s) {
    sig.r[s] = traj.log_p[s] - log_q[s];
    sig.rho[s] = std::exp(log_q[s] - traj.log_mix[s]);
    sig.w_step[s] = sig.rho[s];
    sig.w_full[s] = (s == 0 ? 1.0 : sig.w_full[s - 1]) * sig.rho[s];
  }
  double suffix = 0.0;
  double corrected = 0.0;  // C_{t+1} with C_{T+1} = 0
  for (std::size_t s = T; s-- > 0;) {
    sig.R_corrected[s] = corrected;
    corrected = sig.rho[s] * (sig.r[s] + corrected);
    suffix += sig.r[s];
    sig.R[s] = suffix;
  }
  for (std::size_t s = 0; s < T; ++s) sig.R_norm[s] = normalized(sig.R_next(s), T, s, length_norm);
  return sig;
}

double long_return(const StepSignals& sig, std::size_t s, WeightMode mode, LengthNorm norm) {
  const double raw = mode == WeightMode::full ? sig.R_corrected[s] : sig.R_next(s);
  return normalized(raw, sig.r.size(), s, norm);
}

// ---------------------------------------------------------------------------
// estimators

void EstimatorConfig::validate() const {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("alpha must lie in [0, 1]");
  if (clip_eps && !(*clip_eps > 0.0)) throw ConfigError("clip_eps must be positive");
}

double GradientEstimate::variance_trace() const {
  double s = 0.0;
  for (double v : component_variance.span()) s += v;
  return s;
}

GradientEstimate estimate_from_contributions(std::span<const ParamVector> contributions) {
  if (contributions.empty()) throw std::invalid_argument("estimate_from_contributions: no contributions");
  const std::size_t n = contributions.size();
  const std::size_t dim = contributions.front().size();
  GradientEstimate est;
  est.n_trajectories = n;
  est.grad = ParamVector(dim, 0.0);
  for (const auto& c : contributions) est.grad += c;
  est.grad *= 1.0 / static_cast<double>(n);
  est.component_variance = ParamVector(dim, 0.0);
  if (n < 2) {
    est.variance_undefined = true;
    return est;
  }
  for (const auto& c : contributions) {
    for (std::size_t i = 0; i < dim; ++i) {
      const double d = c[i] - est.grad[i];
      est.component_variance[i] += d * d;
    }
  }
  est.component_variance *= 1.0 / static_cast<double>(n - 1);
  return est;
}

void add_single_step_term(const TabularLM& teacher, std::size_t teacher_key, const TabularLM& student,
                          std::size_t student_key, double scale, ParamVector& grad) {
  const auto lq = student.log_dist_at(student_key);
  const auto lp = teacher.log_dist_at(teacher_key);
  const std::size_t V = lq.size();
  std::vector<double> q(V), r(V);
  double mean_r = 0.0;
  for (std::size_t v = 0; v < V; ++v) {
    q[v] = std::exp(lq[v]);
    r[v] = lp[v] - lq[v];
    mean_r += q[v] * r[v];
  }
  // d/dz_k sum_j q_j (log p_j - log q_j) = q_k (r_k - E_q[r]) / temperature
  const double inv_t = 1.0 / student.temperature();
  const std::size_t base = student_key * V;
  for (std::size_t v = 0; v < V; ++v) grad[base + v] += scale * inv_t * q[v] * (r[v] - mean_r);
}

ParamVector single_step_term(const TabularLM& teacher, const TabularLM& student, const Trajectory& traj,
                             std::size_t s) {
  if (s >= traj.length()) throw std::out_of_range("single_step_term: step beyond trajectory length");
  std::vector<Token> history = traj.x.tokens;
  history.insert(history.end(), traj.y.tokens.begin(), traj.y.tokens.begin() + static_cast<std::ptrdiff_t>(s));
  ParamVector g(student.params().size(), 0.0);
  add_single_step_term(teacher, teacher.key_of(history), student, student.key_of(history), 1.0, g);
  return g;
}

ParamVector vanilla_pg_contribution(const TabularLM& teacher, const TabularLM& student,
                                    const Trajectory& traj, bool include_minus_one) {
  const auto sig = step_signals(teacher, student, traj, LengthNorm::off);
  const auto keys = step_keys(student, traj.x, traj.y);
  const double shift = include_minus_one ? 1.0 : 0.0;
  ParamVector g(student.params().size(), 0.0);
  for (std::size_t s = 0; s < traj.length(); ++s) {
    add_score(student, keys[s], traj.y.tokens[s], -(sig.R[s] - shift), g);
  }
  return g;
}

Contribution minillm_contribution(const TabularLM& teacher, const TabularLM& student, const Trajectory& traj,
                                  const EstimatorConfig& cfg, bool strict) {
  const auto sig = step_signals(teacher, student, traj, cfg.length_norm, strict);
  const auto keys_q = step_keys(student, traj.x, traj.y);
  const auto keys_p = step_keys(teacher, traj.x, traj.y);
  Contribution c{ParamVector(student.params().size(), 0.0), ParamVector(student.params().size(), 0.0)};
  for (std::size_t s = 0; s < traj.length(); ++s) {
    const Token tok = traj.y.tokens[s];
    const double w = cfg.weight_mode == WeightMode::full ? sig.w_full[s] : sig.w_step[s];

    if (cfg.single_step_decomp) {
      add_single_step_term(teacher, keys_p[s], student, keys_q[s], -w, c.single);
    } else {
      add_score(student, keys_q[s], tok, -w * (sig.r[s] - 1.0), c.single);
    }

    const double adv = long_return(sig, s, cfg.weight_mode, cfg.length_norm);
    bool active = true;
    if (cfg.clip_eps) {
      // loss = -min(rho * A, clip(rho) * A): flat once the ratio leaves the trust region
      // in the direction that would increase the surrogate
      const double eps = *cfg.clip_eps;
      if (adv >= 0.0 && sig.rho[s] > 1.0 + eps) active = false;
      if (adv < 0.0 && sig.rho[s] < 1.0 - eps) active = false;
    }
    if (active) add_score(student, keys_q[s], tok, -w * adv, c.long_part);
  }
  return c;
}

GradientEstimate minillm_gradient_from(const TabularLM& teacher, const TabularLM& student,
                                       std::span<const Trajectory> trajectories, const EstimatorConfig& cfg,
                                       bool strict) {
  cfg.validate();
  std::vector<Contribution> parts(trajectories.size());
  parallel_for(trajectories.size(), [&](std::size_t i) {
    parts[i] = minillm_contribution(teacher, student, trajectories[i], cfg, strict);
  });
  std::vector<ParamVector> totals;
  totals.reserve(parts.size());
  GradientParts mean{ParamVector(student.params().size(), 0.0), ParamVector(student.params().size(), 0.0),
                     ParamVector(student.params().size(), 0.0)};
  for (const auto& c : parts) {
    totals.push_back(c.total());
    mean.single += c.single;
    mean.long_part += c.long_part;
  }
  GradientEstimate est = estimate_from_contributions(totals);
  const double inv_n = 1.0 / static_cast<double>(parts.size());
  mean.single *= inv_n;
  mean.long_part *= inv_n;
  est.parts = std::move(mean);
  return est;
}

GradientEstimate minillm_gradient(const TabularLM& teacher, const TabularLM& student,
                                  std::span<const Sequence> prompts, std::size_t n_traj,
                                  const EstimatorConfig& cfg, std::size_t max_len, Rng& rng) {
  cfg.validate();
  const auto trajs = collect_rollouts(teacher, student, cfg.alpha, prompts, n_traj, max_len, rng);
  return minillm_gradient_from(teacher, student, trajs, cfg);
}

GradientEstimate vanilla_pg_gradient(const TabularLM& teacher, const TabularLM& student,
                                     std::span<const Sequence> prompts, std::size_t n_traj,
                                     std::size_t max_len, Rng& rng) {
  const auto trajs = collect_rollouts(teacher, student, 0.0, prompts, n_traj, max_len, rng);
  std::vector<ParamVector> contributions(trajs.size());
  parallel_for(trajs.size(),
               [&](std::size_t i) { contributions[i] = vanilla_pg_contribution(teacher, student, trajs[i]); });
  return estimate_from_contributions(contributions);
}

std::vector<WeightedTrajectory> enumerate_trajectories(const TabularLM& teacher, const TabularLM& student,
                                                       double alpha, const Sequence& x,
                                                       std::size_t max_len) {
  std::vector<WeightedTrajectory> out;
  for (const Sequence& y : enumerate_sequences(student.vocab(), max_len)) {
    WeightedTrajectory wt;
    wt.traj = make_trajectory(teacher, student, alpha, x, y);
    double lm = 0.0;
    for (double v : wt.traj.log_mix) lm += v;
    wt.prob = std::exp(lm);
    if (wt.prob > 0.0) out.push_back(std::move(wt));
  }
  return out;
}

// ---------------------------------------------------------------------------
// teacher-logit reward

double teacher_lse(const TabularLM& teacher, std::span<const Token> history) {
  const auto row = teacher.row(teacher.key_of(history));
  std::vector<double> f(row.begin(), row.end());
  for (double& v : f) v /= teacher.temperature();
  return log_sum_exp(f);
}

double irl_step_reward(const TabularLM& teacher, const Sequence& x, const Sequence& y, std::size_t s) {
  if (s >= y.size()) throw std::out_of_range("irl_step_reward: step beyond response length");
  std::vector<Token> history = x.tokens;
  history.insert(history.end(), y.tokens.begin(), y.tokens.begin() + static_cast<std::ptrdiff_t>(s));
  const double f = teacher.row(teacher.key_of(history))[y.tokens[s]] / teacher.temperature();
  history.push_back(y.tokens[s]);
  return f - teacher_lse(teacher, history);
}

// ---------------------------------------------------------------------------
// serialization

namespace {
nlohmann::json numbers(std::span<const double> v) {
  nlohmann::json a = nlohmann::json::array();
  for (double x : v) a.push_back(json_number(x));
  return a;
}
}  // namespace

nlohmann::json to_json(const StepSignals& sig) {
  return {{"r", numbers(sig.r)},           {"R", numbers(sig.R)},
          {"R_norm", numbers(sig.R_norm)}, {"w_full", numbers(sig.w_full)},
          {"w_step", numbers(sig.w_step)}, {"rho", numbers(sig.rho)},
          {"R_corrected", numbers(sig.R_corrected)}};
}

nlohmann::json to_json(const GradientEstimate& est) {
  nlohmann::json j{{"grad", numbers(est.grad.span())},
                   {"n_trajectories", est.n_trajectories},
                   {"component_variance", numbers(est.component_variance.span())},
                   {"variance_undefined", est.variance_undefined}};
  if (est.parts) {
    j["parts"] = {{"single", numbers(est.parts->single.span())},
                  {"long", numbers(est.parts->long_part.span())},
                  {"pt", numbers(est.parts->pt.span())}};
  }
  return j;
}

}  // namespace revkd
