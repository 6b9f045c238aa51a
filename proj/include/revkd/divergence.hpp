#pragma once

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "revkd/rng.hpp"
#include "revkd/tabular_lm.hpp"

namespace revkd {

enum class KldKind { forward, reverse };
enum class KldMethod { exact, monte_carlo };

std::string to_string(KldKind k);
std::string to_string(KldMethod m);

/// A sequence-level KL divergence in nats.
struct DivergenceValue {
  double value = 0.0;
  KldKind kind = KldKind::reverse;
  KldMethod method = KldMethod::exact;
  std::size_t n_samples = 0;
  double std_error = 0.0;
  bool infinite = false;           // support mismatch: b(y) = 0 where a(y) > 0
  bool variance_undefined = false;  // fewer than two samples
};

/// forward: KL[p || q]; reverse: KL[q || p]; conditional on the single prompt x,
/// summed over every sequence from enumerate_sequences.
DivergenceValue exact_kld(const TabularLM& p, const TabularLM& q, const Sequence& x, std::size_t max_len,
                          KldKind kind);

/// Same quantity via the chain rule over prefix-state marginals. Exact, and
/// polynomial in max_len, so it serves lengths far beyond the enumeration bound.
DivergenceValue exact_kld_markov(const TabularLM& p, const TabularLM& q, const Sequence& x,
                                 std::size_t max_len, KldKind kind);

/// Uniform average of exact_kld_markov over a prompt list.
DivergenceValue exact_kld_prompts(const TabularLM& p, const TabularLM& q, std::span<const Sequence> prompts,
                                  std::size_t max_len, KldKind kind);

struct McKldOptions {
  /// Floors p's per-step probability before the log. Diagnostics only; 0 disables.
  double prob_floor = 0.0;
};

/// Mean of log q(y|x) - log p(y|x) over y ~ q, prompts drawn uniformly.
DivergenceValue mc_reverse_kld(const TabularLM& q, const TabularLM& p, std::span<const Sequence> prompts,
                               std::size_t n_samples, std::size_t max_len, Rng& rng,
                               McKldOptions opts = {});

/// Exact gradient of KL[q || p] with respect to q's logits:
///   sum_y q(y) (log q(y)/p(y) + 1) grad log q(y).
/// Empty on support mismatch.
std::optional<ParamVector> exact_reverse_kld_gradient(const TabularLM& q, const TabularLM& p,
                                                      const Sequence& x, std::size_t max_len);
std::optional<ParamVector> exact_reverse_kld_gradient(const TabularLM& q, const TabularLM& p,
                                                      std::span<const Sequence> prompts,
                                                      std::size_t max_len);

/// Central differences of `objective` around `theta`.
ParamVector finite_diff_gradient(const std::function<double(const ParamVector&)>& objective,
                                 const ParamVector& theta, double h);
/// Central differences over the logits of q.
ParamVector finite_diff_gradient(const std::function<double(const TabularLM&)>& objective,
                                 const TabularLM& q, double h);

/// Markov chain over order-K contexts driven by a sampler model. States are
/// the context keys of an order-K table over the same vocabulary; EOS ends a
/// prefix, so marginals only carry mass of prefixes still running.
class ContextChain {
 public:
  ContextChain(const TabularLM& sampler, std::size_t order);

  std::size_t num_states() const { return tails_.size(); }
  std::size_t order() const { return order_; }
  std::size_t state_of(std::span<const Token> history) const { return index_.key_of(history); }
  const std::vector<Token>& tail(std::size_t state) const { return tails_[state]; }

  /// One-hot (averaged) start distribution for a prompt list.
  std::vector<double> start_distribution(std::span<const Sequence> prompts) const;
  /// marginals[t][s]: probability that step t+1 is emitted from state s.
  std::vector<std::vector<double>> marginals(const std::vector<double>& start, std::size_t max_len) const;

  /// fn(tail) for every state.
  template <typename Fn>
  std::vector<double> per_state(Fn&& fn) const {
    std::vector<double> out(tails_.size());
    for (std::size_t s = 0; s < tails_.size(); ++s) out[s] = fn(tails_[s]);
    return out;
  }

 private:
  std::size_t order_;
  TabularLM index_;
  std::vector<std::vector<Token>> tails_;
  std::vector<std::vector<double>> probs_;         // sampler next-token distribution per state
  std::vector<std::vector<std::size_t>> next_;      // successor state per non-EOS token
  Token eos_;
};

/// KL between the next-token distributions of a and b at the given keys.
double step_kld(const TabularLM& a, std::size_t key_a, const TabularLM& b, std::size_t key_b);

}  // namespace revkd
