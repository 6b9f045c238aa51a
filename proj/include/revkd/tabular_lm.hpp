#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "revkd/rng.hpp"

namespace revkd {

using Token = std::uint32_t;

struct Vocab {
  std::size_t size = 2;
  Token eos = 0;

  Vocab() = default;
  Vocab(std::size_t size, Token eos);

  bool contains(Token t) const { return t < size; }
  friend bool operator==(const Vocab&, const Vocab&) = default;
};

/// A token sequence. Prompts are unterminated; responses are terminated either by
/// a final EOS or by reaching the length limit.
struct Sequence {
  std::vector<Token> tokens;
  bool terminated = false;

  std::size_t size() const { return tokens.size(); }
  bool empty() const { return tokens.empty(); }
  bool ends_with(Token t) const { return !tokens.empty() && tokens.back() == t; }
  /// Tokens with a trailing EOS removed.
  std::vector<Token> content(Token eos) const;

  friend bool operator==(const Sequence&, const Sequence&) = default;
  friend auto operator<=>(const Sequence&, const Sequence&) = default;
};

/// A prompt with its response.
struct Example {
  Sequence x;
  Sequence y;
};

/// Throws std::invalid_argument if ids fall outside the vocabulary or EOS appears
/// anywhere but the final position.
void validate_sequence(const Vocab& vocab, const Sequence& s);

/// Flat parameter vector with the layout of TabularLM::params (key-major rows of V logits).
class ParamVector {
 public:
  ParamVector() = default;
  explicit ParamVector(std::size_t n, double fill = 0.0) : values_(n, fill) {}
  explicit ParamVector(std::vector<double> values) : values_(std::move(values)) {}

  std::size_t size() const { return values_.size(); }
  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }
  std::span<double> span() { return values_; }
  std::span<const double> span() const { return values_; }
  const std::vector<double>& values() const { return values_; }

  ParamVector& operator+=(const ParamVector& o);
  ParamVector& operator-=(const ParamVector& o);
  ParamVector& operator*=(double s);
  /// this += s * o
  ParamVector& axpy(double s, const ParamVector& o);

  double dot(const ParamVector& o) const;
  double norm() const;
  double max_abs() const;
  bool all_finite() const;

  friend ParamVector operator+(ParamVector a, const ParamVector& b) { return a += b; }
  friend ParamVector operator-(ParamVector a, const ParamVector& b) { return a -= b; }
  friend ParamVector operator*(double s, ParamVector a) { return a *= s; }
  friend bool operator==(const ParamVector&, const ParamVector&) = default;

 private:
  std::vector<double> values_;
};

/// Largest componentwise |a - b|.
double max_abs_diff(const ParamVector& a, const ParamVector& b);

/// Order-k autoregressive softmax model over a finite vocabulary.
///
/// The context of step t is the last min(k, |history|) tokens of (prompt, y_<t);
/// shorter contexts are implicitly left-padded with a BOS sentinel that is not a
/// vocabulary token. Context keys are laid out by the number j of real tokens
/// (j = 0..k), then by the base-V number formed by those tokens (oldest token
/// most significant). Each key owns one row of V logits in `params`.
class TabularLM {
 public:
  TabularLM() = default;
  /// All-zero logits (uniform next-token distributions).
  TabularLM(Vocab vocab, std::size_t order, double temperature = 1.0);
  TabularLM(Vocab vocab, std::size_t order, ParamVector params, double temperature = 1.0);

  /// Logits drawn i.i.d. from N(0, scale^2).
  static TabularLM random(Vocab vocab, std::size_t order, double scale, Rng& rng,
                          double temperature = 1.0);

  const Vocab& vocab() const { return vocab_; }
  std::size_t vocab_size() const { return vocab_.size; }
  std::size_t order() const { return order_; }
  double temperature() const { return temperature_; }

  std::size_t num_keys() const { return num_keys_; }
  /// Key index of the context formed by the tail of `history`.
  std::size_t key_of(std::span<const Token> history) const;
  /// Real (non-BOS) tokens of a key, oldest first.
  std::vector<Token> key_tokens(std::size_t key) const;
  /// Comma-joined token ids of the real tokens; "" for the all-BOS key.
  std::string key_string(std::size_t key) const;
  std::size_t key_from_string(const std::string& s) const;

  std::span<const double> row(std::size_t key) const;
  std::span<double> row(std::size_t key);

  const ParamVector& params() const { return params_; }
  ParamVector& params() { return params_; }
  void set_params(ParamVector p);

  /// Softmax(row / temperature).
  std::vector<double> dist_at(std::size_t key) const;
  std::vector<double> log_dist_at(std::size_t key) const;

  bool same_shape(const TabularLM& o) const {
    return vocab_ == o.vocab_ && order_ == o.order_;
  }

 private:
  Vocab vocab_;
  std::size_t order_ = 0;
  double temperature_ = 1.0;
  std::size_t num_keys_ = 1;
  std::vector<std::size_t> offsets_;  // first key index for each real-token count
  ParamVector params_;
};

/// Log-softmax of `logits / temperature`. Throws on non-finite input.
std::vector<double> log_softmax(std::span<const double> logits, double temperature = 1.0);
std::vector<double> softmax(std::span<const double> logits, double temperature = 1.0);
double log_sum_exp(std::span<const double> v);

/// Key index used by `model` at each step of y after prompt x.
std::vector<std::size_t> step_keys(const TabularLM& model, const Sequence& x, const Sequence& y);

std::vector<double> logits(const TabularLM& model, const Sequence& context);
std::vector<double> next_token_dist(const TabularLM& model, const Sequence& context);

/// log q(y | x), summed over every emitted token including the EOS step.
double log_prob_seq(const TabularLM& model, const Sequence& x, const Sequence& y);
/// Per-step log q(y_t | y_<t, x).
std::vector<double> step_log_probs(const TabularLM& model, const Sequence& x, const Sequence& y);

Sequence sample(const TabularLM& model, const Sequence& x, std::size_t max_len, Rng& rng);

/// Gradient of log_prob_seq with respect to the flattened logits.
ParamVector grad_log_prob(const TabularLM& model, const Sequence& x, const Sequence& y);
/// Adds scale * d log q(y_t|ctx) / d row(key) into grad.
void add_score(const TabularLM& model, std::size_t key, Token token, double scale,
               ParamVector& grad);

inline constexpr std::size_t kEnumerationLimit = 10'000'000;

/// All terminated sequences up to max_len in lexicographic order. Throws
/// std::length_error when V^max_len exceeds kEnumerationLimit.
std::vector<Sequence> enumerate_sequences(const Vocab& vocab, std::size_t max_len);

}  // namespace revkd
