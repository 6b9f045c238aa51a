#include "revkd/divergence.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace revkd {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

void require_shared_vocab(const TabularLM& a, const TabularLM& b) {
  if (!(a.vocab() == b.vocab())) throw std::invalid_argument("models do not share a vocabulary");
}

DivergenceValue infinite_value(KldKind kind, KldMethod method) {
  DivergenceValue d;
  d.value = kInf;
  d.kind = kind;
  d.method = method;
  d.infinite = true;
  return d;
}

}  // namespace

std::string to_string(KldKind k) { return k == KldKind::forward ? "forward" : "reverse"; }
std::string to_string(KldMethod m) { return m == KldMethod::exact ? "exact" : "monte_carlo"; }

DivergenceValue exact_kld(const TabularLM& p, const TabularLM& q, const Sequence& x, std::size_t max_len,
                          KldKind kind) {
  require_shared_vocab(p, q);
  const TabularLM& a = kind == KldKind::forward ? p : q;
  const TabularLM& b = kind == KldKind::forward ? q : p;
  double total = 0.0;
  for (const Sequence& y : enumerate_sequences(a.vocab(), max_len)) {
    const double la = log_prob_seq(a, x, y);
    if (la == -kInf) continue;
    const double lb = log_prob_seq(b, x, y);
    if (lb == -kInf) return infinite_value(kind, KldMethod::exact);
    total += std::exp(la) * (la - lb);
  }
  DivergenceValue d;
  d.value = total;
  d.kind = kind;
  return d;
}

ContextChain::ContextChain(const TabularLM& sampler, std::size_t order)
    : order_(std::max(order, sampler.order())), index_(sampler.vocab(), order_), eos_(sampler.vocab().eos) {
  const std::size_t n = index_.num_keys();
  const std::size_t V = sampler.vocab_size();
  tails_.resize(n);
  probs_.resize(n);
  next_.resize(n);
  for (std::size_t s = 0; s < n; ++s) {
    tails_[s] = index_.key_tokens(s);
    probs_[s] = sampler.dist_at(sampler.key_of(tails_[s]));
    std::vector<Token> h = tails_[s];
    h.push_back(0);
    next_[s].resize(V);
    for (Token v = 0; v < V; ++v) {
      h.back() = v;
      next_[s][v] = index_.key_of(h);
    }
  }
}

std::vector<double> ContextChain::start_distribution(std::span<const Sequence> prompts) const {
  if (prompts.empty()) throw std::invalid_argument("ContextChain: empty prompt list");
  std::vector<double> d(num_states(), 0.0);
  const double w = 1.0 / static_cast<double>(prompts.size());
  for (const auto& x : prompts) d[state_of(x.tokens)] += w;
  return d;
}

std::vector<std::vector<double>> ContextChain::marginals(const std::vector<double>& start,
                                                         std::size_t max_len) const {
  std::vector<std::vector<double>> out;
  if (max_len == 0) return out;
  out.reserve(max_len);
  out.push_back(start);
  for (std::size_t t = 1; t < max_len; ++t) {
    const auto& cur = out.back();
    std::vector<double> nxt(num_states(), 0.0);
    for (std::size_t s = 0; s < cur.size(); ++s) {
      if (cur[s] == 0.0) continue;
      for (Token v = 0; v < probs_[s].size(); ++v) {
        if (v == eos_) continue;
        nxt[next_[s][v]] += cur[s] * probs_[s][v];
      }
    }
    out.push_back(std::move(nxt));
  }
  return out;
}

double step_kld(const TabularLM& a, std::size_t key_a, const TabularLM& b, std::size_t key_b) {
  const auto la = a.log_dist_at(key_a);
  const auto lb = b.log_dist_at(key_b);
  double s = 0.0;
  for (std::size_t v = 0; v < la.size(); ++v) {
    const double pa = std::exp(la[v]);
    if (pa == 0.0) continue;
    if (lb[v] == -kInf) return kInf;
    s += pa * (la[v] - lb[v]);
  }
  return s;
}

namespace {

DivergenceValue chain_kld(const TabularLM& p, const TabularLM& q, std::span<const Sequence> prompts,
                          std::size_t max_len, KldKind kind) {
  require_shared_vocab(p, q);
  const TabularLM& a = kind == KldKind::forward ? p : q;
  const TabularLM& b = kind == KldKind::forward ? q : p;
  const ContextChain chain(a, std::max(a.order(), b.order()));
  const auto kl = chain.per_state([&](const std::vector<Token>& tail) {
    return step_kld(a, a.key_of(tail), b, b.key_of(tail));
  });
  double total = 0.0;
  for (const auto& level : chain.marginals(chain.start_distribution(prompts), max_len)) {
    for (std::size_t s = 0; s < level.size(); ++s) {
      if (level[s] == 0.0) continue;
      if (std::isinf(kl[s])) return infinite_value(kind, KldMethod::exact);
      total += level[s] * kl[s];
    }
  }
  DivergenceValue d;
  d.value = total;
  d.kind = kind;
  return d;
}

}  // namespace

DivergenceValue exact_kld_markov(const TabularLM& p, const TabularLM& q, const Sequence& x,
                                 std::size_t max_len, KldKind kind) {
  return chain_kld(p, q, std::span<const Sequence>(&x, 1), max_len, kind);
}

DivergenceValue exact_kld_prompts(const TabularLM& p, const TabularLM& q, std::span<const Sequence> prompts,
                                  std::size_t max_len, KldKind kind) {
  if (prompts.empty()) throw std::invalid_argument("exact_kld_prompts: empty prompt list");
  return chain_kld(p, q, prompts, max_len, kind);
}

DivergenceValue mc_reverse_kld(const TabularLM& q, const TabularLM& p, std::span<const Sequence> prompts,
                               std::size_t n_samples, std::size_t max_len, Rng& rng, McKldOptions opts) {
  require_shared_vocab(p, q);
  if (n_samples < 1) throw std::invalid_argument("mc_reverse_kld: n_samples must be >= 1");
  if (prompts.empty()) throw std::invalid_argument("mc_reverse_kld: empty prompt list");
  const double log_floor = opts.prob_floor > 0.0 ? std::log(opts.prob_floor) : -kInf;

  double sum = 0.0, sum_sq = 0.0;
  bool infinite = false;
  for (std::size_t i = 0; i < n_samples; ++i) {
    const Sequence& x = prompts[rng.below(prompts.size())];
    const Sequence y = sample(q, x, max_len, rng);
    const double lq = log_prob_seq(q, x, y);
    double lp = 0.0;
    for (double v : step_log_probs(p, x, y)) lp += std::max(v, log_floor);
    const double term = lq - lp;
    if (std::isinf(term)) infinite = true;
    sum += term;
    sum_sq += term * term;
  }
  DivergenceValue d;
  d.kind = KldKind::reverse;
  d.method = KldMethod::monte_carlo;
  d.n_samples = n_samples;
  if (infinite) {
    d.value = kInf;
    d.infinite = true;
    d.std_error = std::numeric_limits<double>::quiet_NaN();
    return d;
  }
  const double n = static_cast<double>(n_samples);
  d.value = sum / n;
  if (n_samples < 2) {
    d.std_error = std::numeric_limits<double>::quiet_NaN();
    d.variance_undefined = true;
  } else {
    const double var = std::max(0.0, (sum_sq - n * d.value * d.value) / (n - 1.0));
    d.std_error = std::sqrt(var / n);
  }
  return d;
}

std::optional<ParamVector> exact_reverse_kld_gradient(const TabularLM& q, const TabularLM& p,
                                                      const Sequence& x, std::size_t max_len) {
  require_shared_vocab(p, q);
  ParamVector g(q.params().size(), 0.0);
  for (const Sequence& y : enumerate_sequences(q.vocab(), max_len)) {
    const double lq = log_prob_seq(q, x, y);
    const double mass = std::exp(lq);
    if (mass == 0.0) continue;
    const double lp = log_prob_seq(p, x, y);
    if (lp == -kInf) return std::nullopt;
    const double coef = mass * (lq - lp + 1.0);
    const auto keys = step_keys(q, x, y);
    for (std::size_t t = 0; t < y.size(); ++t) add_score(q, keys[t], y.tokens[t], coef, g);
  }
  return g;
}

std::optional<ParamVector> exact_reverse_kld_gradient(const TabularLM& q, const TabularLM& p,
                                                      std::span<const Sequence> prompts,
                                                      std::size_t max_len) {
  if (prompts.empty()) throw std::invalid_argument("exact_reverse_kld_gradient: empty prompt list");
  ParamVector g(q.params().size(), 0.0);
  for (const auto& x : prompts) {
    auto gx = exact_reverse_kld_gradient(q, p, x, max_len);
    if (!gx) return std::nullopt;
    g += *gx;
  }
  g *= 1.0 / static_cast<double>(prompts.size());
  return g;
}

ParamVector finite_diff_gradient(const std::function<double(const ParamVector&)>& objective,
                                 const ParamVector& theta, double h) {
  if (!(h > 0.0)) throw std::invalid_argument("finite_diff_gradient: h must be positive");
  ParamVector g(theta.size(), 0.0);
  ParamVector probe = theta;
  for (std::size_t i = 0; i < theta.size(); ++i) {
    probe[i] = theta[i] + h;
    const double up = objective(probe);
    probe[i] = theta[i] - h;
    const double down = objective(probe);
    probe[i] = theta[i];
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw std::domain_error("finite_diff_gradient: objective is non-finite at component " +
                              std::to_string(i));
    }
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

ParamVector finite_diff_gradient(const std::function<double(const TabularLM&)>& objective,
                                 const TabularLM& q, double h) {
  TabularLM probe = q;
  return finite_diff_gradient(
      [&](const ParamVector& theta) {
        probe.params() = theta;
        return objective(probe);
      },
      q.params(), h);
}

}  // namespace revkd
