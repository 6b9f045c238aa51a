#include <cmath>
#include <stdexcept>

#include "doctest.h"
#include "revkd/divergence.hpp"

using namespace revkd;

namespace {

// V=2 order-0 model whose single step chooses EOS with probability p0.
TabularLM two_point(double p0) {
  TabularLM m(Vocab(2, 0), 0);
  m.row(0)[0] = std::log(p0);
  m.row(0)[1] = std::log(1.0 - p0);
  return m;
}

const Sequence kEmpty{};

}  // namespace

TEST_SUITE("divergence") {

TEST_CASE("exact KLD closed forms") {
  const auto p = two_point(0.5);
  const auto q = two_point(0.25);
  const double fwd = 0.5 * std::log(0.5 / 0.25) + 0.5 * std::log(0.5 / 0.75);
  const double rev = 0.25 * std::log(0.25 / 0.5) + 0.75 * std::log(0.75 / 0.5);
  CHECK(std::abs(fwd - 0.14384) < 1e-5);
  CHECK(std::abs(rev - 0.13081) < 1e-5);
  CHECK(std::abs(exact_kld(p, q, kEmpty, 1, KldKind::forward).value - fwd) < 1e-12);
  CHECK(std::abs(exact_kld(p, q, kEmpty, 1, KldKind::reverse).value - rev) < 1e-12);
  const auto d = exact_kld(p, q, kEmpty, 1, KldKind::reverse);
  CHECK(d.method == KldMethod::exact);
  CHECK(d.n_samples == 0);
  CHECK(d.std_error == 0.0);
}

TEST_CASE("identity and nonnegativity") {
  Rng rng(1);
  for (int i = 0; i < 20; ++i) {
    const auto a = TabularLM::random(Vocab(3, 0), 1, 1.5, rng);
    const auto b = TabularLM::random(Vocab(3, 0), rng.below(2) + 1, 1.5, rng);
    const Sequence x{{1}, false};
    CHECK(std::abs(exact_kld(a, a, x, 3, KldKind::reverse).value) < 1e-12);
    for (KldKind k : {KldKind::forward, KldKind::reverse}) {
      CHECK(exact_kld(a, b, x, 3, k).value >= -1e-10);
      CHECK(exact_kld_markov(a, b, x, 3, k).value >= -1e-10);
    }
  }
}

TEST_CASE("chain-rule KLD equals enumeration") {
  Rng rng(2);
  for (int i = 0; i < 20; ++i) {
    const auto a = TabularLM::random(Vocab(3, 0), rng.below(3), 1.0, rng);
    const auto b = TabularLM::random(Vocab(3, 0), rng.below(3), 1.0, rng);
    const Sequence x{{2, 1}, false};
    for (KldKind k : {KldKind::forward, KldKind::reverse}) {
      CHECK(std::abs(exact_kld(a, b, x, 4, k).value - exact_kld_markov(a, b, x, 4, k).value) < 1e-10);
    }
  }
  const auto a = TabularLM::random(Vocab(3, 0), 1, 1.0, rng);
  const auto b = TabularLM::random(Vocab(3, 0), 2, 1.0, rng);
  const std::vector<Sequence> prompts{{{1}, false}, {{2, 2}, false}, {{}, false}};
  double avg = 0.0;
  for (const auto& x : prompts) avg += exact_kld(a, b, x, 4, KldKind::reverse).value / 3.0;
  CHECK(std::abs(exact_kld_prompts(a, b, prompts, 4, KldKind::reverse).value - avg) < 1e-12);
}

TEST_CASE("monte-carlo reverse KLD") {
  const auto p = two_point(0.5);
  const auto q = two_point(0.25);
  const Sequence prompts[] = {kEmpty};
  Rng rng(3);
  const auto same = mc_reverse_kld(p, p, prompts, 1000, 1, rng);
  CHECK(std::abs(same.value) <= 4.0 * same.std_error + 1e-15);

  const auto est = mc_reverse_kld(q, p, prompts, 200000, 1, rng);
  CHECK(est.method == KldMethod::monte_carlo);
  CHECK(est.n_samples == 200000);
  CHECK(std::abs(est.value - 0.25 * std::log(0.5) - 0.75 * std::log(1.5)) < 4.0 * est.std_error);

  const auto one = mc_reverse_kld(q, p, prompts, 1, 1, rng);
  CHECK(one.variance_undefined);
  CHECK(std::isnan(one.std_error));
  CHECK_THROWS(mc_reverse_kld(q, p, prompts, 0, 1, rng));
}

TEST_CASE("monte-carlo converges on a fixed pair") {
  Rng mr(4);
  const auto q = TabularLM::random(Vocab(3, 0), 1, 1.0, mr);
  const auto p = TabularLM::random(Vocab(3, 0), 1, 1.0, mr);
  const Sequence x{{1}, false};
  const Sequence prompts[] = {x};
  const double exact = exact_kld(p, q, x, 3, KldKind::reverse).value;
  Rng rng(5);
  for (std::size_t n : {1000u, 10000u, 100000u}) {
    const auto est = mc_reverse_kld(q, p, prompts, n, 3, rng);
    CHECK(std::abs(est.value - exact) < 4.0 * est.std_error);
  }
}

TEST_CASE("exact reverse gradient") {
  Rng rng(6);
  const auto m = TabularLM::random(Vocab(3, 0), 1, 1.0, rng);
  const auto g0 = exact_reverse_kld_gradient(m, m, Sequence{{1}, false}, 3);
  REQUIRE(g0);
  CHECK(g0->max_abs() < 1e-10);

  // single step, two logits: d/dz_k KL(softmax(z) || p) = q_k (log(q_k/p_k) - KL)
  const auto p = two_point(0.5);
  const auto q = two_point(0.25);
  const double kl = 0.25 * std::log(0.5) + 0.75 * std::log(1.5);
  const auto g = exact_reverse_kld_gradient(q, p, kEmpty, 1);
  REQUIRE(g);
  CHECK(std::abs((*g)[0] - 0.25 * (std::log(0.5) - kl)) < 1e-12);
  CHECK(std::abs((*g)[1] - 0.75 * (std::log(1.5) - kl)) < 1e-12);

  for (int i = 0; i < 10; ++i) {
    const auto a = TabularLM::random(Vocab(3, 0), 1, 1.0, rng);
    const auto b = TabularLM::random(Vocab(3, 0), 1, 1.0, rng);
    const Sequence x{{2}, false};
    const auto exact = exact_reverse_kld_gradient(a, b, x, 3);
    const auto fd = finite_diff_gradient(
        [&](const TabularLM& s) { return exact_kld(b, s, x, 3, KldKind::reverse).value; }, a, 1e-5);
    CHECK(max_abs_diff(*exact, fd) < 1e-6);
  }
}

TEST_CASE("finite differences") {
  const auto zero = finite_diff_gradient([](const ParamVector&) { return 3.0; }, ParamVector(4, 1.0), 1e-5);
  CHECK(zero.max_abs() < 1e-9);
  const auto quad = finite_diff_gradient([](const ParamVector& t) { return t.dot(t); },
                                         ParamVector(std::vector<double>{1.0, 2.0}), 1e-5);
  CHECK(std::abs(quad[0] - 2.0) < 1e-6);
  CHECK(std::abs(quad[1] - 4.0) < 1e-6);
  CHECK_THROWS_AS(finite_diff_gradient([](const ParamVector&) { return std::nan(""); }, ParamVector(1), 1e-5),
                  std::domain_error);
  CHECK_THROWS(finite_diff_gradient([](const ParamVector&) { return 0.0; }, ParamVector(1), 0.0));
}

}  // TEST_SUITE
