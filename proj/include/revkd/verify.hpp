#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "revkd/pg_engine.hpp"
#include "revkd/rng.hpp"
#include "revkd/tabular_lm.hpp"

namespace revkd {

/// A small teacher/student pair with one prompt, sized for full enumeration.
struct RandomInstance {
  TabularLM teacher;
  TabularLM student;
  Sequence x;
  std::size_t max_len = 1;
};

struct InstanceLimits {
  std::size_t max_vocab = 4;
  std::size_t max_order = 1;
  std::size_t max_len = 3;
  double logit_scale = 1.0;
};

RandomInstance random_instance(Rng& rng, const InstanceLimits& lim = {});

/// Max componentwise gap between the exact reverse-KLD gradient and central
/// differences (step h) of the enumerated reverse KLD.
double gradient_vs_finite_difference(const RandomInstance& in, double h = 1e-5);
/// Exact expectation of the vanilla score-function estimator against the oracle.
double vanilla_pg_bias(const RandomInstance& in, bool include_minus_one = true);
/// Exact expectations of the single and long parts summed, against the oracle
/// (student sampling, no length normalization, no clipping).
double decomposition_gap(const RandomInstance& in);
/// Exact expectation under the mixed sampler of the importance-weighted
/// estimator against the oracle.
double importance_bias(const RandomInstance& in, double alpha, WeightMode mode);
/// Enumerated versus chain-rule exact KLD, both directions.
double enumeration_vs_chain(const RandomInstance& in);
/// |sum_t reward_t - sum_t log p_t - (LSE(first context) - LSE(last context))|
double telescoping_gap(const TabularLM& teacher, const Sequence& x, const Sequence& y);

struct CheckResult {
  std::string suite;
  std::string check;
  std::size_t instance = 0;
  double error = 0.0;
  double tolerance = 0.0;
  bool passed = false;
  bool hard = true;  // soft checks are reported but never fail the run

  nlohmann::json to_json() const;
};

struct VerifyReport {
  std::vector<CheckResult> checks;

  bool all_hard_passed() const;
  /// One JSON object per line, no timestamps.
  std::string to_jsonl() const;
};

/// gradients | decomposition | importance | oracles | all
bool is_known_suite(const std::string& suite);
/// Throws ConfigError for an unknown suite.
VerifyReport run_verify(const std::string& suite, std::uint64_t seed);

}  // namespace revkd
