#include "revkd/tabular_lm.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace revkd {

Vocab::Vocab(std::size_t size_, Token eos_) : size(size_), eos(eos_) {
  if (size < 2) throw std::invalid_argument("Vocab: size must be at least 2");
  if (size > 64) throw std::invalid_argument("Vocab: size above 64 is not supported");
  if (eos >= size) throw std::invalid_argument("Vocab: eos id must be < size");
}

std::vector<Token> Sequence::content(Token eos) const {
  std::vector<Token> out = tokens;
  if (!out.empty() && out.back() == eos) out.pop_back();
  return out;
}

void validate_sequence(const Vocab& vocab, const Sequence& s) {
  for (std::size_t i = 0; i < s.tokens.size(); ++i) {
    const Token t = s.tokens[i];
    if (!vocab.contains(t)) {
      throw std::invalid_argument("sequence token " + std::to_string(t) + " outside vocabulary of size " +
                                  std::to_string(vocab.size));
    }
    if (t == vocab.eos && i + 1 != s.tokens.size()) {
      throw std::invalid_argument("EOS may only appear as the final token");
    }
  }
}

// ---------------------------------------------------------------------------
// ParamVector

static void check_same_size(const ParamVector& a, const ParamVector& b) {
  if (a.size() != b.size()) {
    throw std::invalid_argument("ParamVector size mismatch: " + std::to_string(a.size()) + " vs " +
                                std::to_string(b.size()));
  }
}

ParamVector& ParamVector::operator+=(const ParamVector& o) {
  check_same_size(*this, o);
  for (std::size_t i = 0; i < values_.size(); ++i) values_[i] += o.values_[i];
  return *this;
}

ParamVector& ParamVector::operator-=(const ParamVector& o) {
  check_same_size(*this, o);
  for (std::size_t i = 0; i < values_.size(); ++i) values_[i] -= o.values_[i];
  return *this;
}

ParamVector& ParamVector::operator*=(double s) {
  for (double& v : values_) v *= s;
  return *this;
}

ParamVector& ParamVector::axpy(double s, const ParamVector& o) {
  check_same_size(*this, o);
  for (std::size_t i = 0; i < values_.size(); ++i) values_[i] += s * o.values_[i];
  return *this;
}

double ParamVector::dot(const ParamVector& o) const {
  check_same_size(*this, o);
  double acc = 0.0;
  for (std::size_t i = 0; i < values_.size(); ++i) acc += values_[i] * o.values_[i];
  return acc;
}

double ParamVector::norm() const { return std::sqrt(dot(*this)); }

double ParamVector::max_abs() const {
  double m = 0.0;
  for (double v : values_) m = std::max(m, std::abs(v));
  return m;
}

bool ParamVector::all_finite() const {
  return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
}

double max_abs_diff(const ParamVector& a, const ParamVector& b) {
  check_same_size(a, b);
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// ---------------------------------------------------------------------------
// softmax helpers

double log_sum_exp(std::span<const double> v) {
  double m = -std::numeric_limits<double>::infinity();
  for (double x : v) m = std::max(m, x);
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

std::vector<double> log_softmax(std::span<const double> logits, double temperature) {
  std::vector<double> z(logits.begin(), logits.end());
  for (double& v : z) {
    if (!std::isfinite(v)) throw std::domain_error("log_softmax: non-finite logit");
    v /= temperature;
  }
  const double lse = log_sum_exp(z);
  for (double& v : z) v -= lse;
  return z;
}

std::vector<double> softmax(std::span<const double> logits, double temperature) {
  std::vector<double> p = log_softmax(logits, temperature);
  for (double& v : p) v = std::exp(v);
  return p;
}

// ---------------------------------------------------------------------------
// TabularLM

TabularLM::TabularLM(Vocab vocab, std::size_t order, double temperature)
    : vocab_(vocab), order_(order), temperature_(temperature) {
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw std::invalid_argument("TabularLM: temperature must be positive and finite");
  }
  offsets_.resize(order_ + 2);
  offsets_[0] = 0;
  std::size_t power = 1;
  for (std::size_t j = 0; j <= order_; ++j) {
    offsets_[j + 1] = offsets_[j] + power;
    if (power > std::numeric_limits<std::size_t>::max() / vocab_.size) {
      throw std::length_error("TabularLM: context table too large");
    }
    power *= vocab_.size;
  }
  num_keys_ = offsets_[order_ + 1];
  if (num_keys_ > kEnumerationLimit) throw std::length_error("TabularLM: context table too large");
  params_ = ParamVector(num_keys_ * vocab_.size, 0.0);
}

TabularLM::TabularLM(Vocab vocab, std::size_t order, ParamVector params, double temperature)
    : TabularLM(vocab, order, temperature) {
  set_params(std::move(params));
}

TabularLM TabularLM::random(Vocab vocab, std::size_t order, double scale, Rng& rng,
                            double temperature) {
  TabularLM m(vocab, order, temperature);
  for (double& v : m.params_.span()) v = scale * rng.normal();
  return m;
}

void TabularLM::set_params(ParamVector p) {
  if (p.size() != num_keys_ * vocab_.size) {
    throw std::invalid_argument("TabularLM: parameter vector has length " + std::to_string(p.size()) +
                                ", expected " + std::to_string(num_keys_ * vocab_.size));
  }
  params_ = std::move(p);
}

std::size_t TabularLM::key_of(std::span<const Token> history) const {
  const std::size_t j = std::min(order_, history.size());
  std::size_t idx = 0;
  for (std::size_t i = history.size() - j; i < history.size(); ++i) {
    const Token t = history[i];
    if (t >= vocab_.size) {
      throw std::out_of_range("context token " + std::to_string(t) + " has no key under vocabulary size " +
                              std::to_string(vocab_.size));
    }
    idx = idx * vocab_.size + t;
  }
  return offsets_[j] + idx;
}

std::vector<Token> TabularLM::key_tokens(std::size_t key) const {
  if (key >= num_keys_) throw std::out_of_range("context key index out of range");
  std::size_t j = 0;
  while (offsets_[j + 1] <= key) ++j;
  std::size_t idx = key - offsets_[j];
  std::vector<Token> out(j);
  for (std::size_t i = j; i-- > 0;) {
    out[i] = static_cast<Token>(idx % vocab_.size);
    idx /= vocab_.size;
  }
  return out;
}

std::string TabularLM::key_string(std::size_t key) const {
  std::string s;
  for (Token t : key_tokens(key)) {
    if (!s.empty()) s += ',';
    s += std::to_string(t);
  }
  return s;
}

std::size_t TabularLM::key_from_string(const std::string& s) const {
  std::vector<Token> toks;
  if (!s.empty()) {
    std::stringstream ss(s);
    std::string part;
    while (std::getline(ss, part, ',')) {
      std::size_t pos = 0;
      const unsigned long v = std::stoul(part, &pos);
      if (pos != part.size()) throw std::invalid_argument("malformed context key '" + s + "'");
      toks.push_back(static_cast<Token>(v));
    }
  }
  if (toks.size() > order_) throw std::invalid_argument("context key '" + s + "' longer than model order");
  return key_of(toks);
}

std::span<const double> TabularLM::row(std::size_t key) const {
  if (key >= num_keys_) throw std::out_of_range("context key index out of range");
  return params_.span().subspan(key * vocab_.size, vocab_.size);
}

std::span<double> TabularLM::row(std::size_t key) {
  if (key >= num_keys_) throw std::out_of_range("context key index out of range");
  return params_.span().subspan(key * vocab_.size, vocab_.size);
}

std::vector<double> TabularLM::dist_at(std::size_t key) const { return softmax(row(key), temperature_); }

std::vector<double> TabularLM::log_dist_at(std::size_t key) const {
  return log_softmax(row(key), temperature_);
}

// ---------------------------------------------------------------------------
// operations

std::vector<std::size_t> step_keys(const TabularLM& model, const Sequence& x, const Sequence& y) {
  std::vector<Token> history = x.tokens;
  history.reserve(x.size() + y.size());
  std::vector<std::size_t> keys;
  keys.reserve(y.size());
  for (Token t : y.tokens) {
    keys.push_back(model.key_of(history));
    history.push_back(t);
  }
  return keys;
}

std::vector<double> logits(const TabularLM& model, const Sequence& context) {
  const auto r = model.row(model.key_of(context.tokens));
  return {r.begin(), r.end()};
}

std::vector<double> next_token_dist(const TabularLM& model, const Sequence& context) {
  return model.dist_at(model.key_of(context.tokens));
}

std::vector<double> step_log_probs(const TabularLM& model, const Sequence& x, const Sequence& y) {
  const auto keys = step_keys(model, x, y);
  std::vector<double> out(y.size());
  for (std::size_t t = 0; t < y.size(); ++t) {
    if (!model.vocab().contains(y.tokens[t])) throw std::out_of_range("response token outside vocabulary");
    out[t] = model.log_dist_at(keys[t])[y.tokens[t]];
  }
  return out;
}

double log_prob_seq(const TabularLM& model, const Sequence& x, const Sequence& y) {
  double s = 0.0;
  for (double v : step_log_probs(model, x, y)) s += v;
  return s;
}

Sequence sample(const TabularLM& model, const Sequence& x, std::size_t max_len, Rng& rng) {
  if (max_len < 1) throw std::invalid_argument("sample: max_len must be >= 1");
  std::vector<Token> history = x.tokens;
  Sequence y;
  while (y.size() < max_len) {
    const auto p = model.dist_at(model.key_of(history));
    const auto t = static_cast<Token>(rng.categorical(p));
    y.tokens.push_back(t);
    history.push_back(t);
    if (t == model.vocab().eos) break;
  }
  y.terminated = true;
  return y;
}

void add_score(const TabularLM& model, std::size_t key, Token token, double scale, ParamVector& grad) {
  const auto p = model.dist_at(key);
  const double inv_t = 1.0 / model.temperature();
  const std::size_t base = key * model.vocab_size();
  for (std::size_t v = 0; v < p.size(); ++v) {
    grad[base + v] += scale * inv_t * ((v == token ? 1.0 : 0.0) - p[v]);
  }
}

ParamVector grad_log_prob(const TabularLM& model, const Sequence& x, const Sequence& y) {
  ParamVector g(model.params().size(), 0.0);
  const auto keys = step_keys(model, x, y);
  for (std::size_t t = 0; t < y.size(); ++t) add_score(model, keys[t], y.tokens[t], 1.0, g);
  return g;
}

std::vector<Sequence> enumerate_sequences(const Vocab& vocab, std::size_t max_len) {
  std::size_t count = 1;
  for (std::size_t i = 0; i < max_len; ++i) {
    if (count > kEnumerationLimit / vocab.size) {
      throw std::length_error("enumerate_sequences: V^max_len exceeds the enumeration bound of " +
                              std::to_string(kEnumerationLimit) + " (V=" + std::to_string(vocab.size) +
                              ", max_len=" + std::to_string(max_len) + ")");
    }
    count *= vocab.size;
  }
  std::vector<Sequence> out;
  if (max_len == 0) return out;
  Sequence cur;
  cur.terminated = true;
  // Depth-first in token-id order yields lexicographic output for this prefix-free set.
  auto rec = [&](auto&& self) -> void {
    for (Token t = 0; t < vocab.size; ++t) {
      cur.tokens.push_back(t);
      if (t == vocab.eos || cur.size() == max_len) {
        out.push_back(cur);
      } else {
        self(self);
      }
      cur.tokens.pop_back();
    }
  };
  rec(rec);
  return out;
}

}  // namespace revkd
