#include "revkd/verify.hpp"

#include <cmath>
#include <limits>

#include "revkd/divergence.hpp"
#include "revkd/errors.hpp"
#include "revkd/report.hpp"

namespace revkd {

namespace {

constexpr std::size_t kInstances = 20;
constexpr std::size_t kTelescopingTrajectories = 100;

ParamVector oracle(const RandomInstance& in) {
  auto g = exact_reverse_kld_gradient(in.student, in.teacher, in.x, in.max_len);
  if (!g) throw std::logic_error("random instance has a support mismatch");
  return *g;
}

}  // namespace

RandomInstance random_instance(Rng& rng, const InstanceLimits& lim) {
  const std::size_t V = 2 + rng.below(lim.max_vocab - 1);
  const Vocab vocab(V, 0);
  RandomInstance in;
  in.teacher = TabularLM::random(vocab, rng.below(lim.max_order + 1), lim.logit_scale, rng);
  in.student = TabularLM::random(vocab, rng.below(lim.max_order + 1), lim.logit_scale, rng);
  const std::size_t xlen = rng.below(3);
  for (std::size_t i = 0; i < xlen; ++i) in.x.tokens.push_back(static_cast<Token>(1 + rng.below(V - 1)));
  in.max_len = 1 + rng.below(lim.max_len);
  return in;
}

double gradient_vs_finite_difference(const RandomInstance& in, double h) {
  const ParamVector exact = oracle(in);
  const ParamVector fd = finite_diff_gradient(
      [&](const TabularLM& q) { return exact_kld(in.teacher, q, in.x, in.max_len, KldKind::reverse).value; },
      in.student, h);
  return max_abs_diff(exact, fd);
}

double vanilla_pg_bias(const RandomInstance& in, bool include_minus_one) {
  const Sequence prompts[] = {in.x};
  const ParamVector e = exact_expectation(in.teacher, in.student, 0.0, prompts, in.max_len, [&](const Trajectory& t) {
    return vanilla_pg_contribution(in.teacher, in.student, t, include_minus_one);
  });
  return max_abs_diff(e, oracle(in));
}

double decomposition_gap(const RandomInstance& in) {
  return importance_bias(in, 0.0, WeightMode::per_step);
}

double importance_bias(const RandomInstance& in, double alpha, WeightMode mode) {
  EstimatorConfig cfg;
  cfg.alpha = alpha;
  cfg.weight_mode = mode;
  cfg.length_norm = LengthNorm::off;
  cfg.clip_eps.reset();
  const Sequence prompts[] = {in.x};
  const ParamVector e = exact_expectation(in.teacher, in.student, alpha, prompts, in.max_len, [&](const Trajectory& t) {
    return minillm_contribution(in.teacher, in.student, t, cfg).total();
  });
  return max_abs_diff(e, oracle(in));
}

double enumeration_vs_chain(const RandomInstance& in) {
  double worst = 0.0;
  for (KldKind kind : {KldKind::forward, KldKind::reverse}) {
    const double a = exact_kld(in.teacher, in.student, in.x, in.max_len, kind).value;
    const double b = exact_kld_markov(in.teacher, in.student, in.x, in.max_len, kind).value;
    worst = std::max(worst, std::abs(a - b));
  }
  return worst;
}

double telescoping_gap(const TabularLM& teacher, const Sequence& x, const Sequence& y) {
  if (y.empty()) return 0.0;
  const auto lp = step_log_probs(teacher, x, y);
  double lhs = 0.0;
  for (std::size_t s = 0; s < y.size(); ++s) lhs += irl_step_reward(teacher, x, y, s) - lp[s];
  std::vector<Token> full = x.tokens;
  full.insert(full.end(), y.tokens.begin(), y.tokens.end());
  const double rhs = teacher_lse(teacher, x.tokens) - teacher_lse(teacher, full);
  return std::abs(lhs - rhs);
}

nlohmann::json CheckResult::to_json() const {
  return {{"suite", suite},         {"check", check},   {"instance", instance}, {"error", json_number(error)},
          {"tolerance", json_number(tolerance)}, {"passed", passed}, {"hard", hard}};
}

bool VerifyReport::all_hard_passed() const {
  for (const auto& c : checks) {
    if (c.hard && !c.passed) return false;
  }
  return true;
}

std::string VerifyReport::to_jsonl() const {
  std::string out;
  for (const auto& c : checks) out += c.to_json().dump() + "\n";
  return out;
}

bool is_known_suite(const std::string& s) {
  return s == "gradients" || s == "decomposition" || s == "importance" || s == "oracles" || s == "all";
}

namespace {

void add(VerifyReport& r, const std::string& suite, const std::string& check, std::size_t i, double err,
         double tol, bool hard = true) {
  r.checks.push_back({suite, check, i, err, tol, err < tol, hard});
}

std::vector<RandomInstance> instances(std::uint64_t seed, const std::string& suite) {
  Rng rng = Rng(seed).substream(suite);
  std::vector<RandomInstance> out;
  for (std::size_t i = 0; i < kInstances; ++i) out.push_back(random_instance(rng));
  return out;
}

void suite_gradients(VerifyReport& r, std::uint64_t seed) {
  const auto inst = instances(seed, "gradients");
  for (std::size_t i = 0; i < inst.size(); ++i) {
    const auto& in = inst[i];
    add(r, "gradients", "reverse_kld_gradient_vs_fd", i, gradient_vs_finite_difference(in), 1e-6);

    Rng yr = Rng(seed).substream("gradients-y").substream(static_cast<std::uint64_t>(i));
    const Sequence y = sample(in.student, in.x, in.max_len, yr);
    const ParamVector score = grad_log_prob(in.student, in.x, y);
    const ParamVector fd = finite_diff_gradient(
        [&](const TabularLM& q) { return log_prob_seq(q, in.x, y); }, in.student, 1e-5);
    add(r, "gradients", "score_vs_fd", i, max_abs_diff(score, fd), 1e-6);

    const Trajectory traj = make_trajectory(in.teacher, in.student, 0.0, in.x, y);
    const ParamVector single = single_step_term(in.teacher, in.student, traj, 0);
    const auto key_p = in.teacher.key_of(in.x.tokens);
    const ParamVector fd_single = finite_diff_gradient(
        [&](const TabularLM& q) { return -step_kld(q, q.key_of(in.x.tokens), in.teacher, key_p); }, in.student, 1e-5);
    add(r, "gradients", "single_step_vs_fd", i, max_abs_diff(single, fd_single), 1e-6);
  }
}

void suite_decomposition(VerifyReport& r, std::uint64_t seed) {
  const auto inst = instances(seed, "decomposition");
  for (std::size_t i = 0; i < inst.size(); ++i) {
    add(r, "decomposition", "vanilla_pg_unbiased", i, vanilla_pg_bias(inst[i], true), 1e-9);
    add(r, "decomposition", "vanilla_pg_without_constant", i, vanilla_pg_bias(inst[i], false), 1e-9);
    add(r, "decomposition", "single_plus_long_equals_oracle", i, decomposition_gap(inst[i]), 1e-9);
  }
}

void suite_importance(VerifyReport& r, std::uint64_t seed) {
  const auto inst = instances(seed, "importance");
  for (std::size_t i = 0; i < inst.size(); ++i) {
    for (double alpha : {0.2, 0.5, 1.0}) {
      add(r, "importance", "full_weights_alpha_" + format_double(alpha), i,
          importance_bias(inst[i], alpha, WeightMode::full), 1e-9);
    }
    add(r, "importance", "per_step_alpha_0", i, importance_bias(inst[i], 0.0, WeightMode::per_step), 1e-9);
    add(r, "importance", "per_step_alpha_0.2_bias", i, importance_bias(inst[i], 0.2, WeightMode::per_step),
        std::numeric_limits<double>::infinity(), false);
  }
}

void suite_oracles(VerifyReport& r, std::uint64_t seed) {
  const auto inst = instances(seed, "oracles");
  for (std::size_t i = 0; i < inst.size(); ++i) {
    add(r, "oracles", "exact_gradient_vs_fd", i, gradient_vs_finite_difference(inst[i]), 1e-6);
    add(r, "oracles", "enumeration_vs_chain_kld", i, enumeration_vs_chain(inst[i]), 1e-10);
  }
  Rng rng = Rng(seed).substream("telescoping");
  for (std::size_t i = 0; i < kTelescopingTrajectories; ++i) {
    const auto& in = inst[i % inst.size()];
    const Sequence y = sample(in.teacher, in.x, 1 + rng.below(8), rng);
    add(r, "oracles", "telescoping_reward", i, telescoping_gap(in.teacher, in.x, y), 1e-10);
  }
}

}  // namespace

VerifyReport run_verify(const std::string& suite, std::uint64_t seed) {
  if (!is_known_suite(suite)) {
    throw ConfigError("unknown suite '" + suite + "' (expected gradients, decomposition, importance, oracles, all)");
  }
  VerifyReport r;
  const bool all = suite == "all";
  if (all || suite == "gradients") suite_gradients(r, seed);
  if (all || suite == "decomposition") suite_decomposition(r, seed);
  if (all || suite == "importance") suite_importance(r, seed);
  if (all || suite == "oracles") suite_oracles(r, seed);
  return r;
}

}  // namespace revkd
