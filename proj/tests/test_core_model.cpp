#include <cmath>
#include <filesystem>
#include <stdexcept>
#include <map>

#include "doctest.h"
#include "revkd/divergence.hpp"
#include "revkd/model_io.hpp"
#include "revkd/tabular_lm.hpp"

using namespace revkd;

namespace {

Sequence seq(std::vector<Token> t) { return Sequence{std::move(t), true}; }
Sequence prompt(std::vector<Token> t) { return Sequence{std::move(t), false}; }

}  // namespace

TEST_SUITE("core-model") {

TEST_CASE("vocab and sequence validation") {
  CHECK_THROWS_AS(Vocab(1, 0), std::invalid_argument);
  CHECK_THROWS_AS(Vocab(4, 4), std::invalid_argument);
  CHECK_THROWS_AS(Vocab(65, 0), std::invalid_argument);
  const Vocab v(3, 0);
  CHECK_NOTHROW(validate_sequence(v, seq({1, 2, 0})));
  CHECK_THROWS_AS(validate_sequence(v, seq({1, 0, 2})), std::invalid_argument);
  CHECK_THROWS_AS(validate_sequence(v, seq({3})), std::invalid_argument);
}

TEST_CASE("context key layout") {
  const TabularLM m(Vocab(3, 0), 2);
  CHECK(m.num_keys() == 1 + 3 + 9);
  CHECK(m.params().size() == 13 * 3);
  CHECK(m.key_of(std::vector<Token>{}) == 0);
  CHECK(m.key_of(std::vector<Token>{2}) == 1 + 2);
  // oldest token most significant
  CHECK(m.key_of(std::vector<Token>{1, 2}) == 4 + 1 * 3 + 2);
  CHECK(m.key_of(std::vector<Token>{0, 0, 1, 2}) == m.key_of(std::vector<Token>{1, 2}));
  for (std::size_t k = 0; k < m.num_keys(); ++k) CHECK(m.key_from_string(m.key_string(k)) == k);
  CHECK(m.key_string(0).empty());
  CHECK(m.key_string(m.key_of(std::vector<Token>{1, 2})) == "1,2");
  CHECK_THROWS_AS(m.key_of(std::vector<Token>{3}), std::out_of_range);
}

TEST_CASE("logits lookup") {
  const TabularLM m0(Vocab(2, 0), 0);
  CHECK(logits(m0, prompt({1, 1})) == std::vector<double>{0.0, 0.0});

  TabularLM m1(Vocab(2, 0), 1);
  auto row = m1.row(m1.key_from_string("1"));
  row[0] = 1.0;
  row[1] = -1.0;
  const auto a = logits(m1, prompt({0, 1}));
  CHECK(a == std::vector<double>{1.0, -1.0});
  CHECK(logits(m1, prompt({0, 1})) == a);
}

TEST_CASE("next-token distribution") {
  TabularLM m(Vocab(2, 0), 0);
  auto d = next_token_dist(m, prompt({}));
  CHECK(d[0] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(d[1] == doctest::Approx(0.5).epsilon(1e-15));

  m.row(0)[0] = std::log(3.0);
  d = next_token_dist(m, prompt({}));
  CHECK(std::abs(d[0] - 0.75) < 1e-15);
  CHECK(std::abs(d[1] - 0.25) < 1e-15);

  TabularLM m3(Vocab(3, 0), 0);
  for (double& v : m3.row(0)) v = 5.0;
  for (double p : next_token_dist(m3, prompt({}))) CHECK(std::abs(p - 1.0 / 3.0) < 1e-15);

  m3.row(0)[1] = std::nan("");
  CHECK_THROWS_AS(next_token_dist(m3, prompt({})), std::domain_error);
}

TEST_CASE("normalization on random models") {
  Rng rng(3);
  for (int i = 0; i < 10; ++i) {
    const auto m = TabularLM::random(Vocab(5, 0), 2, 3.0, rng);
    for (std::size_t k = 0; k < m.num_keys(); ++k) {
      double s = 0.0;
      for (double p : m.dist_at(k)) s += p;
      CHECK(std::abs(s - 1.0) < 1e-12);
    }
  }
}

TEST_CASE("log_prob_seq") {
  TabularLM det(Vocab(2, 0), 0);
  det.row(0)[0] = 50.0;
  CHECK(std::abs(log_prob_seq(det, prompt({}), seq({0}))) < 1e-8);

  const TabularLM uni(Vocab(2, 0), 0);
  CHECK(std::abs(log_prob_seq(uni, prompt({}), seq({1, 1, 0})) - 3.0 * std::log(0.5)) < 1e-15);

  Rng rng(5);
  const auto m = TabularLM::random(Vocab(4, 0), 2, 1.0, rng);
  const Sequence x = prompt({2});
  const Sequence y = seq({3, 1, 2, 0});
  double s = 0.0;
  std::vector<Token> h = x.tokens;
  for (Token t : y.tokens) {
    s += std::log(next_token_dist(m, Sequence{h, false})[t]);
    h.push_back(t);
  }
  CHECK(std::abs(log_prob_seq(m, x, y) - s) < 1e-12);
}

TEST_CASE("sampling") {
  TabularLM eos_first(Vocab(3, 0), 1);
  for (std::size_t k = 0; k < eos_first.num_keys(); ++k) eos_first.row(k)[0] = 60.0;
  Rng r0(1);
  const Sequence y = sample(eos_first, prompt({1}), 5, r0);
  CHECK(y.terminated);
  CHECK(y.content(0).empty());

  const TabularLM uni(Vocab(2, 0), 0);
  Rng rng(11);
  int zeros = 0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) zeros += sample(uni, prompt({}), 1, rng).tokens[0] == 0;
  const double f = static_cast<double>(zeros) / n;
  CHECK(f >= 0.494);
  CHECK(f <= 0.506);

  Rng a(99), b(99);
  const auto m = TabularLM::random(Vocab(4, 0), 1, 1.0, a);
  Rng sa(7), sb(7);
  CHECK(sample(m, prompt({1}), 10, sa) == sample(m, prompt({1}), 10, sb));
  CHECK_THROWS(sample(m, prompt({}), 0, sa));
}

TEST_CASE("truncation at max_len is terminated and consistent with enumeration") {
  TabularLM never_eos(Vocab(2, 0), 0);
  never_eos.row(0)[1] = 40.0;
  Rng rng(2);
  const Sequence y = sample(never_eos, prompt({}), 3, rng);
  CHECK(y.tokens == std::vector<Token>{1, 1, 1});
  CHECK(y.terminated);
}

TEST_CASE("sampling frequencies match sequence probabilities") {
  Rng mr(21);
  const auto m = TabularLM::random(Vocab(2, 0), 1, 1.0, mr);
  const std::size_t max_len = 3;
  std::map<std::vector<Token>, int> counts;
  Rng rng(22);
  const int n = 100000;
  for (int i = 0; i < n; ++i) ++counts[sample(m, prompt({}), max_len, rng).tokens];
  for (const auto& y : enumerate_sequences(m.vocab(), max_len)) {
    const double p = std::exp(log_prob_seq(m, prompt({}), y));
    if (p < 0.01) continue;
    const double se = std::sqrt(p * (1.0 - p) / n);
    CHECK(std::abs(counts[y.tokens] / static_cast<double>(n) - p) < 4.0 * se);
  }
}

TEST_CASE("grad_log_prob") {
  const TabularLM uni(Vocab(2, 0), 0);
  const auto g = grad_log_prob(uni, prompt({}), seq({0}));
  CHECK(g[0] == doctest::Approx(0.5));
  CHECK(g[1] == doctest::Approx(-0.5));

  Rng rng(4);
  for (std::size_t order : {1u, 2u}) {
    const auto m = TabularLM::random(Vocab(order == 1 ? 3 : 4, 0), order, 1.0, rng);
    const Sequence x = prompt({1});
    const Sequence y = seq({2, 1, 2, 0});
    const auto ga = grad_log_prob(m, x, y);
    for (std::size_t k = 0; k < m.num_keys(); ++k) {
      double s = 0.0;
      for (std::size_t v = 0; v < m.vocab_size(); ++v) s += ga[k * m.vocab_size() + v];
      CHECK(std::abs(s) < 1e-12);
    }
    const auto fd = finite_diff_gradient([&](const TabularLM& q) { return log_prob_seq(q, x, y); }, m, 1e-5);
    CHECK(max_abs_diff(ga, fd) < 1e-6);
  }
}

TEST_CASE("enumeration") {
  const Vocab v(2, 0);
  auto e1 = enumerate_sequences(v, 1);
  REQUIRE(e1.size() == 2);
  CHECK(e1[0].tokens == std::vector<Token>{0});
  CHECK(e1[1].tokens == std::vector<Token>{1});

  auto e2 = enumerate_sequences(v, 2);
  REQUIRE(e2.size() == 3);
  CHECK(e2[0].tokens == std::vector<Token>{0});
  CHECK(e2[1].tokens == std::vector<Token>{1, 0});
  CHECK(e2[2].tokens == std::vector<Token>{1, 1});
  for (const auto& s : e2) CHECK(s.terminated);

  Rng rng(8);
  for (int i = 0; i < 5; ++i) {
    const auto m = TabularLM::random(Vocab(3, 0), 2, 2.0, rng);
    double total = 0.0;
    for (const auto& y : enumerate_sequences(m.vocab(), 5)) total += std::exp(log_prob_seq(m, prompt({1}), y));
    CHECK(std::abs(total - 1.0) < 1e-10);
  }

  try {
    enumerate_sequences(Vocab(16, 0), 7);
    FAIL("expected the enumeration guard to fire");
  } catch (const std::length_error& e) {
    CHECK(std::string(e.what()).find("10000000") != std::string::npos);
  }
}

TEST_CASE("checkpoint round trip") {
  Rng rng(12);
  const auto m = TabularLM::random(Vocab(4, 1), 2, 2.0, rng, 0.7);
  const auto path = std::filesystem::temp_directory_path() / "revkd_model_roundtrip.json";
  save_model(m, path);
  const auto back = load_model(path);
  CHECK(back.same_shape(m));
  CHECK(back.temperature() == m.temperature());
  CHECK(back.params() == m.params());
  for (std::size_t k = 0; k < m.num_keys(); ++k) CHECK(back.dist_at(k) == m.dist_at(k));
  std::filesystem::remove(path);

  auto j = model_to_json(m);
  j["format"] = "something-else";
  CHECK_THROWS_AS(model_from_json(j), std::invalid_argument);
  j = model_to_json(m);
  j["logits"].erase("1");
  CHECK_THROWS_AS(model_from_json(j), std::invalid_argument);
}

TEST_CASE("param vector arithmetic") {
  ParamVector a(std::vector<double>{1.0, 2.0});
  const ParamVector b(std::vector<double>{3.0, -1.0});
  CHECK((a + b) == ParamVector(std::vector<double>{4.0, 1.0}));
  CHECK((a - b) == ParamVector(std::vector<double>{-2.0, 3.0}));
  CHECK(a.dot(b) == 1.0);
  a.axpy(2.0, b);
  CHECK(a == ParamVector(std::vector<double>{7.0, 0.0}));
  CHECK(a.max_abs() == 7.0);
  CHECK_THROWS(a += ParamVector(3));
}

}  // TEST_SUITE
