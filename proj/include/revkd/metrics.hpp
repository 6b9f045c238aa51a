#pragma once

#include <optional>
#include <span>
#include <vector>

#include "revkd/rng.hpp"
#include "revkd/tabular_lm.hpp"

namespace revkd {

/// LCS-based F1 (beta = 1) with EOS stripped from both sides. Two empty
/// sequences score 1, one empty sequence scores 0.
double rouge_l(const Sequence& candidate, const Sequence& reference, Token eos);
std::size_t lcs_length(std::span<const Token> a, std::span<const Token> b);

/// Expected calibration error over `n_bins` equal-width bins on [0, 1].
double ece(const std::vector<double>& confidences, const std::vector<bool>& correct, std::size_t n_bins = 10);

/// Distinct n-grams over total n-grams, pooled across responses (EOS excluded).
/// Empty when no response has n tokens.
std::optional<double> distinct_n(std::span<const Sequence> responses, std::size_t n, Token eos);

/// Mean of -log q(y | x), nats per sequence.
double test_lm_loss(const TabularLM& model, std::span<const Example> pairs);

struct ExposureBiasCurve {
  std::vector<std::size_t> lengths;
  std::vector<double> regret;     // R(l)
  std::vector<double> step_error; // eps(l)
  std::vector<double> exaccerr;   // percent; NaN where undefined
  std::vector<bool> defined;
  std::vector<double> regret_se;
  std::vector<double> step_error_se;
  std::size_t n_rollouts = 0;     // rollouts behind every point (prompts x per-prompt count)
};

/// Free-run regret R(l) = sum_{t<=l} E_{y<t ~ q}[KL(p(.|ctx) || q(.|ctx))] against
/// the oracle-prefix error l*eps(l) with prefixes drawn from the teacher. The
/// inner expectation over y_t is an exact vocabulary sum; prefixes are sampled,
/// `rollouts_per_prompt` times for every prompt. Finished (EOS) prefixes add 0.
ExposureBiasCurve exposure_bias_curve(const TabularLM& student, const TabularLM& teacher,
                                      std::span<const Sequence> prompts, std::size_t max_l,
                                      std::size_t rollouts_per_prompt, Rng& rng);

/// Same curve with prefix expectations computed exactly from prefix marginals.
ExposureBiasCurve exposure_bias_curve_exact(const TabularLM& student, const TabularLM& teacher,
                                            std::span<const Sequence> prompts, std::size_t max_l);

/// Fills exaccerr/defined from regret and step_error.
void finalize_exaccerr(ExposureBiasCurve& curve);

/// Binary calibration probe: the ground truth's first response token restricted
/// to {label_a, label_b} is the label; the model predicts the more likely label
/// and reports its renormalized probability as confidence.
struct CalibrationResult {
  std::vector<double> confidences;
  std::vector<bool> correct;
  double ece = 0.0;
  double accuracy = 0.0;
};
CalibrationResult calibration_probe(const TabularLM& model, const TabularLM& ground_truth,
                                    std::span<const Sequence> prompts, Token label_a, Token label_b,
                                    std::size_t draws_per_prompt, Rng& rng, std::size_t n_bins = 10);

}  // namespace revkd
