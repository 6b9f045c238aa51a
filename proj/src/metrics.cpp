#include "revkd/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <set>
#include <stdexcept>

#include "revkd/divergence.hpp"
#include "revkd/parallel.hpp"

namespace revkd {

std::size_t lcs_length(std::span<const Token> a, std::span<const Token> b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double rouge_l(const Sequence& candidate, const Sequence& reference, Token eos) {
  const auto c = candidate.content(eos);
  const auto r = reference.content(eos);
  if (c.empty() && r.empty()) return 1.0;
  if (c.empty() || r.empty()) return 0.0;
  const double lcs = static_cast<double>(lcs_length(c, r));
  if (lcs == 0.0) return 0.0;
  const double precision = lcs / static_cast<double>(c.size());
  const double recall = lcs / static_cast<double>(r.size());
  return 2.0 * precision * recall / (precision + recall);
}

double ece(const std::vector<double>& confidences, const std::vector<bool>& correct, std::size_t n_bins) {
  if (confidences.size() != correct.size()) throw std::invalid_argument("ece: length mismatch");
  if (confidences.empty()) throw std::invalid_argument("ece: no samples");
  if (n_bins == 0) throw std::invalid_argument("ece: n_bins must be positive");
  std::vector<double> conf_sum(n_bins, 0.0), acc_sum(n_bins, 0.0);
  std::vector<std::size_t> count(n_bins, 0);
  for (std::size_t i = 0; i < confidences.size(); ++i) {
    const double c = confidences[i];
    if (!(c >= 0.0 && c <= 1.0)) throw std::invalid_argument("ece: confidence outside [0, 1]");
    const auto b = std::min(n_bins - 1, static_cast<std::size_t>(c * static_cast<double>(n_bins)));
    conf_sum[b] += c;
    acc_sum[b] += correct[i] ? 1.0 : 0.0;
    ++count[b];
  }
  const double n = static_cast<double>(confidences.size());
  double total = 0.0;
  for (std::size_t b = 0; b < n_bins; ++b) {
    if (count[b] == 0) continue;
    const double m = static_cast<double>(count[b]);
    total += (m / n) * std::abs(acc_sum[b] / m - conf_sum[b] / m);
  }
  return total;
}

std::optional<double> distinct_n(std::span<const Sequence> responses, std::size_t n, Token eos) {
  if (n < 1) throw std::invalid_argument("distinct_n: n must be >= 1");
  std::set<std::vector<Token>> seen;
  std::size_t total = 0;
  for (const auto& r : responses) {
    const auto c = r.content(eos);
    if (c.size() < n) continue;
    for (std::size_t i = 0; i + n <= c.size(); ++i) {
      seen.emplace(c.begin() + static_cast<std::ptrdiff_t>(i), c.begin() + static_cast<std::ptrdiff_t>(i + n));
      ++total;
    }
  }
  if (total == 0) return std::nullopt;
  return static_cast<double>(seen.size()) / static_cast<double>(total);
}

double test_lm_loss(const TabularLM& model, std::span<const Example> pairs) {
  if (pairs.empty()) throw std::invalid_argument("test_lm_loss: empty test set");
  double total = 0.0;
  for (const auto& e : pairs) total -= log_prob_seq(model, e.x, e.y);
  return total / static_cast<double>(pairs.size());
}

// ---------------------------------------------------------------------------
// exposure bias

void finalize_exaccerr(ExposureBiasCurve& curve) {
  const std::size_t n = curve.lengths.size();
  curve.exaccerr.assign(n, std::numeric_limits<double>::quiet_NaN());
  curve.defined.assign(n, false);
  for (std::size_t i = 0; i < n; ++i) {
    const double oracle = static_cast<double>(curve.lengths[i]) * curve.step_error[i];
    if (oracle > 0.0) {
      curve.exaccerr[i] = (curve.regret[i] - oracle) / oracle * 100.0;
      curve.defined[i] = true;
    }
  }
}

namespace {

/// Per-step forward KL(p || q) along one prefix rolled out under `roller`.
std::vector<double> rollout_step_errors(const TabularLM& roller, const TabularLM& student,
                                        const TabularLM& teacher, const Sequence& x, std::size_t max_l,
                                        Rng& rng) {
  std::vector<double> errs(max_l, 0.0);
  std::vector<Token> history = x.tokens;
  const Token eos = roller.vocab().eos;
  for (std::size_t t = 0; t < max_l; ++t) {
    errs[t] = step_kld(teacher, teacher.key_of(history), student, student.key_of(history));
    const auto dist = roller.dist_at(roller.key_of(history));
    const auto tok = static_cast<Token>(rng.categorical(dist));
    if (tok == eos) break;
    history.push_back(tok);
  }
  return errs;
}

struct CumulativeStats {
  std::vector<double> mean, se;
};

CumulativeStats cumulative_stats(const std::vector<std::vector<double>>& per_rollout, std::size_t max_l) {
  const double n = static_cast<double>(per_rollout.size());
  std::vector<double> sum(max_l, 0.0), sum_sq(max_l, 0.0);
  for (const auto& errs : per_rollout) {
    double acc = 0.0;
    for (std::size_t t = 0; t < max_l; ++t) {
      acc += errs[t];
      sum[t] += acc;
      sum_sq[t] += acc * acc;
    }
  }
  CumulativeStats s{std::vector<double>(max_l), std::vector<double>(max_l)};
  for (std::size_t t = 0; t < max_l; ++t) {
    s.mean[t] = sum[t] / n;
    s.se[t] = n > 1 ? std::sqrt(std::max(0.0, (sum_sq[t] - n * s.mean[t] * s.mean[t]) / (n - 1.0)) / n)
                    : std::numeric_limits<double>::quiet_NaN();
  }
  return s;
}

}  // namespace

ExposureBiasCurve exposure_bias_curve(const TabularLM& student, const TabularLM& teacher,
                                      std::span<const Sequence> prompts, std::size_t max_l,
                                      std::size_t rollouts_per_prompt, Rng& rng) {
  if (!(student.vocab() == teacher.vocab())) throw std::invalid_argument("exposure_bias_curve: vocab mismatch");
  if (rollouts_per_prompt < 1) throw std::invalid_argument("exposure_bias_curve: n_rollouts must be >= 1");
  if (prompts.empty()) throw std::invalid_argument("exposure_bias_curve: empty prompt list");
  if (max_l < 1) throw std::invalid_argument("exposure_bias_curve: max_l must be >= 1");

  const std::size_t n = prompts.size() * rollouts_per_prompt;
  const Rng free_run(rng.next_u64());
  const Rng oracle(rng.next_u64());
  std::vector<std::vector<double>> free_errs(n), oracle_errs(n);
  parallel_for(n, [&](std::size_t i) {
    const Sequence& x = prompts[i / rollouts_per_prompt];
    Rng a = free_run.substream(i);
    Rng b = oracle.substream(i);
    free_errs[i] = rollout_step_errors(student, student, teacher, x, max_l, a);
    oracle_errs[i] = rollout_step_errors(teacher, student, teacher, x, max_l, b);
  });

  const auto R = cumulative_stats(free_errs, max_l);
  const auto E = cumulative_stats(oracle_errs, max_l);
  ExposureBiasCurve c;
  c.n_rollouts = n;
  for (std::size_t t = 0; t < max_l; ++t) {
    const double l = static_cast<double>(t + 1);
    c.lengths.push_back(t + 1);
    c.regret.push_back(R.mean[t]);
    c.regret_se.push_back(R.se[t]);
    c.step_error.push_back(E.mean[t] / l);
    c.step_error_se.push_back(E.se[t] / l);
  }
  finalize_exaccerr(c);
  return c;
}

ExposureBiasCurve exposure_bias_curve_exact(const TabularLM& student, const TabularLM& teacher,
                                            std::span<const Sequence> prompts, std::size_t max_l) {
  if (prompts.empty()) throw std::invalid_argument("exposure_bias_curve_exact: empty prompt list");
  const std::size_t order = std::max(student.order(), teacher.order());
  const ContextChain free_chain(student, order);
  const ContextChain oracle_chain(teacher, order);
  const auto err = free_chain.per_state([&](const std::vector<Token>& tail) {
    return step_kld(teacher, teacher.key_of(tail), student, student.key_of(tail));
  });
  const auto fm = free_chain.marginals(free_chain.start_distribution(prompts), max_l);
  const auto om = oracle_chain.marginals(oracle_chain.start_distribution(prompts), max_l);
  ExposureBiasCurve c;
  double r = 0.0, e = 0.0;
  for (std::size_t t = 0; t < max_l; ++t) {
    for (std::size_t s = 0; s < err.size(); ++s) {
      r += fm[t][s] * err[s];
      e += om[t][s] * err[s];
    }
    c.lengths.push_back(t + 1);
    c.regret.push_back(r);
    c.step_error.push_back(e / static_cast<double>(t + 1));
    c.regret_se.push_back(0.0);
    c.step_error_se.push_back(0.0);
  }
  finalize_exaccerr(c);
  return c;
}

// ---------------------------------------------------------------------------
// calibration

CalibrationResult calibration_probe(const TabularLM& model, const TabularLM& ground_truth,
                                    std::span<const Sequence> prompts, Token label_a, Token label_b,
                                    std::size_t draws_per_prompt, Rng& rng, std::size_t n_bins) {
  if (label_a == label_b) throw std::invalid_argument("calibration_probe: labels must differ");
  CalibrationResult res;
  for (const auto& x : prompts) {
    const auto g = next_token_dist(ground_truth, x);
    const auto q = next_token_dist(model, x);
    const double ga = g[label_a] / (g[label_a] + g[label_b]);
    const double qa = q[label_a] / (q[label_a] + q[label_b]);
    const Token predicted = qa >= 0.5 ? label_a : label_b;
    const double confidence = std::max(qa, 1.0 - qa);
    for (std::size_t d = 0; d < draws_per_prompt; ++d) {
      const Token label = rng.uniform() < ga ? label_a : label_b;
      res.confidences.push_back(confidence);
      res.correct.push_back(label == predicted);
    }
  }
  res.ece = ece(res.confidences, res.correct, n_bins);
  const auto hits = std::count(res.correct.begin(), res.correct.end(), true);
  res.accuracy = static_cast<double>(hits) / static_cast<double>(res.correct.size());
  return res;
}

}  // namespace revkd
