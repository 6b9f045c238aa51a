#include <cmath>

#include "doctest.h"
#include "revkd/metrics.hpp"
#include "revkd/report.hpp"

using namespace revkd;

namespace {

Sequence resp(std::vector<Token> t) { return Sequence{std::move(t), true}; }

}  // namespace

TEST_SUITE("metrics") {

TEST_CASE("rouge-l") {
  CHECK(std::abs(rouge_l(resp({1, 2, 3, 0}), resp({1, 3, 2, 0}), 0) - 2.0 / 3.0) < 1e-12);
  CHECK(rouge_l(resp({1, 2, 3}), resp({1, 2, 3, 0}), 0) == 1.0);
  CHECK(std::abs(rouge_l(resp({1, 3}), resp({1, 2, 3}), 0) - 0.8) < 1e-12);
  CHECK(rouge_l(resp({0}), resp({0}), 0) == 1.0);
  CHECK(rouge_l(resp({0}), resp({1, 0}), 0) == 0.0);
  CHECK(rouge_l(resp({2, 2}), resp({1, 1}), 0) == 0.0);
  const std::vector<Token> a{1, 2, 3, 4, 5}, b{5, 1, 3, 4};
  CHECK(lcs_length(a, b) == 3);
}

TEST_CASE("expected calibration error") {
  CHECK(std::abs(ece({0.9, 0.9}, {true, false}) - 0.4) < 1e-12);
  CHECK(std::abs(ece({0.8, 0.8, 0.8, 0.8}, {true, true, true, true}) - 0.2) < 1e-12);
  CHECK(std::abs(ece({0.55, 0.95}, {true, true}) - 0.25) < 1e-12);
  CHECK(ece({0.7, 0.7, 0.7, 0.7, 0.7, 0.7, 0.7, 0.7, 0.7, 0.7},
            {true, true, true, true, true, true, true, false, false, false}) < 1e-12);
  CHECK_THROWS_AS(ece({0.5}, {true, false}), std::invalid_argument);
  CHECK_THROWS_AS(ece({}, {}), std::invalid_argument);
  CHECK_THROWS_AS(ece({1.2}, {true}), std::invalid_argument);
}

TEST_CASE("distinct-n") {
  const std::vector<Sequence> rep{resp({1, 1, 1, 1, 1, 0})};
  CHECK(std::abs(*distinct_n(rep, 4, 0) - 0.5) < 1e-12);
  for (std::size_t r : {1u, 2u, 5u}) {
    const std::vector<Sequence> same(r, resp({1, 2, 3, 1, 0}));
    CHECK(std::abs(*distinct_n(same, 4, 0) - 1.0 / static_cast<double>(r)) < 1e-12);
  }
  const std::vector<Sequence> shorter{resp({1, 2, 0}), resp({3, 0})};
  CHECK_FALSE(distinct_n(shorter, 4, 0).has_value());
  CHECK(*distinct_n(shorter, 1, 0) == 1.0);
  CHECK_THROWS_AS(distinct_n(shorter, 0, 0), std::invalid_argument);
}

TEST_CASE("test LM loss") {
  const TabularLM uni(Vocab(2, 0), 0);
  const std::vector<Example> one{{Sequence{}, resp({1, 0})}};
  CHECK(std::abs(test_lm_loss(uni, one) - 2.0 * std::log(2.0)) < 1e-12);
  const std::vector<Example> two{{Sequence{}, resp({0})}, {Sequence{}, resp({1, 1, 0})}};
  CHECK(std::abs(test_lm_loss(uni, two) - 2.0 * std::log(2.0)) < 1e-12);
  CHECK_THROWS_AS(test_lm_loss(uni, std::vector<Example>{}), std::invalid_argument);
}

TEST_CASE("exposure bias curve") {
  Rng mr(1);
  const auto p = TabularLM::random(Vocab(3, 0), 2, 1.0, mr);
  const auto q = TabularLM::random(Vocab(3, 0), 1, 1.0, mr);
  const std::vector<Sequence> prompts{Sequence{{1, 2}, false}, Sequence{{2, 2}, false}};

  const auto exact = exposure_bias_curve_exact(q, p, prompts, 6);
  REQUIRE(exact.lengths.size() == 6);
  CHECK(exact.lengths.front() == 1);
  // one step from the prompt: free run and oracle prefixes coincide
  CHECK(std::abs(exact.regret[0] - exact.step_error[0]) < 1e-12);
  CHECK(std::abs(exact.exaccerr[0]) < 1e-9);

  Rng rng(2);
  const auto mc = exposure_bias_curve(q, p, prompts, 6, 20000, rng);
  CHECK(mc.n_rollouts == 40000);
  for (std::size_t i = 0; i < 6; ++i) {
    CHECK(std::abs(mc.regret[i] - exact.regret[i]) < 4.0 * mc.regret_se[i] + 1e-12);
    CHECK(std::abs(mc.step_error[i] - exact.step_error[i]) < 4.0 * mc.step_error_se[i] + 1e-12);
  }

  const auto self = exposure_bias_curve_exact(p, p, prompts, 4);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK_FALSE(self.defined[i]);
    CHECK(std::isnan(self.exaccerr[i]));
  }
  CHECK_THROWS_AS(exposure_bias_curve(q, p, prompts, 4, 0, rng), std::invalid_argument);
  CHECK_THROWS_AS(exposure_bias_curve(q, p, std::vector<Sequence>{}, 4, 1, rng), std::invalid_argument);
}

TEST_CASE("exaccerr arithmetic") {
  ExposureBiasCurve c;
  c.lengths = {1, 2};
  c.regret = {0.1, 0.3};
  c.step_error = {0.1, 0.1};
  finalize_exaccerr(c);
  CHECK(std::abs(c.exaccerr[0]) < 1e-12);
  CHECK(std::abs(c.exaccerr[1] - 50.0) < 1e-9);
  CHECK(c.defined[1]);
}

TEST_CASE("calibration probe") {
  TabularLM gt(Vocab(3, 0), 0);
  gt.row(0)[1] = std::log(0.9);
  gt.row(0)[2] = std::log(0.1);
  Rng rng(3);
  const std::vector<Sequence> prompts{Sequence{}};
  const auto perfect = calibration_probe(gt, gt, prompts, 1, 2, 20000, rng);
  CHECK(perfect.ece < 0.02);
  CHECK(std::abs(perfect.accuracy - 0.9) < 0.02);
  const TabularLM uni(Vocab(3, 0), 0);
  const auto flat = calibration_probe(uni, gt, prompts, 1, 2, 1000, rng);
  for (double c : flat.confidences) CHECK(c == 0.5);
  CHECK_THROWS_AS(calibration_probe(uni, gt, prompts, 1, 1, 10, rng), std::invalid_argument);
}

TEST_CASE("metric report") {
  MetricReport r;
  r.seed = 3;
  r.add("a_nats", 1.5);
  r.add("b", std::nan(""), true);
  CHECK_NOTHROW(r.validate());
  CHECK(r.at("a_nats") == 1.5);
  CHECK(to_csv(r).rfind("name,value,flagged,seed,config_fingerprint\n", 0) == 0);
  CHECK(to_json(r)["metrics"]["b"].is_null());
  CHECK(to_json(r)["flagged"] == nlohmann::json::array({"b"}));
  r.add("c", INFINITY);
  CHECK(r.find("c")->flagged);
  CHECK_NOTHROW(r.validate());
  r.entries.push_back({"d", INFINITY, false});
  CHECK_THROWS_AS(r.validate(), std::runtime_error);
  CHECK(format_double(INFINITY) == "inf");
  CHECK(format_double(0.1) == "0.1");
}

}  // TEST_SUITE
