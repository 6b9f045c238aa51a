#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "revkd/divergence.hpp"
#include "revkd/errors.hpp"
#include "revkd/model_io.hpp"
#include "revkd/trainer.hpp"

using namespace revkd;

namespace {

TaskSpec small_spec() {
  TaskSpec s;
  s.vocab_size = 4;
  s.teacher_order = 2;
  s.student_order = 1;
  s.n_train = 400;
  s.n_valid = 40;
  s.n_test = 40;
  s.n_pt = 100;
  s.max_len = 8;
  return s;
}

SupervisedOptions quick(std::size_t epochs, std::size_t batch = 32, double lr = 1.0) {
  return SupervisedOptions{lr, epochs, batch, 1};
}

}  // namespace

TEST_SUITE("trainer") {

TEST_CASE("synthetic task layout") {
  Rng rng(1);
  const auto [task, teacher] = make_synthetic_task(small_spec(), rng);
  CHECK(task.prompts.size() == 9);
  CHECK(task.train.size() == 400);
  CHECK(task.valid.size() == 40);
  CHECK(task.pt_corpus.size() == 100);
  CHECK(teacher.order() == 2);
  for (const auto& ex : task.train) {
    CHECK(ex.y.terminated);
    CHECK(ex.y.size() <= 8);
  }
  Rng again(1);
  const auto [task2, teacher2] = make_synthetic_task(small_spec(), again);
  CHECK(teacher2.params() == teacher.params());

  auto bad = small_spec();
  bad.student_order = 2;
  CHECK_THROWS_AS(make_synthetic_task(bad, rng), ConfigError);
  bad.allow_no_gap = true;
  CHECK_NOTHROW(make_synthetic_task(bad, rng));
  bad = small_spec();
  bad.vocab_size = 1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("sft is deterministic and records epoch zero") {
  Rng rng(2);
  const auto [task, teacher] = make_synthetic_task(small_spec(), rng);
  const TabularLM init(task.vocab(), 1);
  Rng a(3), b(3);
  const auto ra = sft_train(init, task, quick(3), a);
  const auto rb = sft_train(init, task, quick(3), b);
  CHECK(ra.best_loss.model.params() == rb.best_loss.model.params());
  REQUIRE(ra.history.size() == 4);
  CHECK(ra.history[0].epoch == 0);
  CHECK(ra.history[3].valid_loss < ra.history[0].valid_loss);

  Rng c(3);
  const auto zero = sft_train(init, task, quick(0), c);
  CHECK(zero.history.size() == 1);
  CHECK(zero.best_loss.model.params() == init.params());
  CHECK(zero.best_loss.step == 0);
}

TEST_CASE("sft reaches the count-ratio maximum likelihood") {
  auto spec = small_spec();
  spec.teacher_order = 1;
  spec.allow_no_gap = true;
  spec.n_train = 50000;
  spec.n_valid = 10;
  Rng rng(4);
  const auto [task, teacher] = make_synthetic_task(spec, rng);
  const TabularLM mle = fit_counts(task.vocab(), 1, task.train, 1e-12);
  Rng r(5);
  const auto res = sft_train(TabularLM(task.vocab(), 1), task, quick(200, 50000, 2.0), r);
  double tokens = 0.0;
  for (const auto& ex : task.train) tokens += static_cast<double>(ex.y.size());
  const double per_seq = tokens / static_cast<double>(task.train.size());
  const double gap = res.history.back().train_loss / per_seq - nll_per_token(mle, task.train);
  CHECK(gap >= -1e-9);
  CHECK(gap < 1e-3);
}

TEST_CASE("word-level KD with mix 0 is plain SFT") {
  Rng rng(6);
  const auto [task, teacher] = make_synthetic_task(small_spec(), rng);
  const TabularLM init(task.vocab(), 1);
  Rng a(7), b(7);
  const auto sft = sft_train(init, task, quick(2), a);
  const auto kd = word_kd_train(init, teacher, task, quick(2), 0.0, b);
  CHECK(sft.best_loss.model.params() == kd.best_loss.model.params());
  CHECK(sft.history.back().train_loss == kd.history.back().train_loss);

  Rng c(7);
  CHECK_THROWS_AS(word_kd_train(init, teacher, task, quick(1), 1.5, c), ConfigError);
}

TEST_CASE("word-level KD follows a degenerate teacher") {
  Rng rng(8);
  const auto [task, teacher] = make_synthetic_task(small_spec(), rng);
  TabularLM eos_teacher(task.vocab(), 2);
  for (std::size_t k = 0; k < eos_teacher.num_keys(); ++k) eos_teacher.row(k)[0] = 30.0;
  Rng r(9);
  const auto res = word_kd_train(TabularLM(task.vocab(), 1), eos_teacher, task, quick(30), 1.0, r);
  CHECK(res.history.front().train_loss > 1.0);
  CHECK(res.history.back().train_loss < 0.1 * res.history.front().train_loss);
}

TEST_CASE("mixed cross-entropy minimizer for V=2") {
  auto spec = small_spec();
  spec.vocab_size = 2;
  spec.teacher_order = 1;
  spec.student_order = 0;
  spec.n_train = 500;
  Rng rng(10);
  const auto [task, gt_teacher] = make_synthetic_task(spec, rng);
  TabularLM teacher(task.vocab(), 0);
  teacher.row(0)[0] = std::log(0.3);
  teacher.row(0)[1] = std::log(0.7);
  double eos_tokens = 0.0, tokens = 0.0;
  for (const auto& ex : task.train) {
    for (Token t : ex.y.tokens) {
      eos_tokens += t == 0;
      tokens += 1.0;
    }
  }
  const double m = 0.4;
  const double target = m * 0.3 + (1.0 - m) * eos_tokens / tokens;
  Rng r(11);
  const auto res = supervised_train(TabularLM(task.vocab(), 0), &teacher, m, task.train, task,
                                    quick(300, task.train.size(), 0.5), r);
  CHECK(res.history.size() == 301);
  const double obj_fit = res.history.back().train_loss;
  double obj_best = 0.0;
  for (const auto& ex : task.train) {
    for (Token t : ex.y.tokens) {
      obj_best += -m * (0.3 * std::log(target) + 0.7 * std::log(1.0 - target)) -
                  (1.0 - m) * std::log(t == 0 ? target : 1.0 - target);
    }
  }
  obj_best /= static_cast<double>(task.train.size());
  CHECK(obj_fit >= obj_best - 1e-9);
  CHECK(obj_fit - obj_best < 1e-8);
}

TEST_CASE("sequence-level KD trains on teacher samples") {
  Rng rng(12);
  const auto [task, teacher] = make_synthetic_task(small_spec(), rng);
  const TabularLM init(task.vocab(), 1);
  Rng r(13);
  const auto res = seqkd_train(init, teacher, task, 2000, quick(10), r);
  CHECK(res.history.size() == 11);
  const double before = exact_kld_prompts(teacher, init, task.prompts, 8, KldKind::forward).value;
  const double after = exact_kld_prompts(teacher, res.best_loss.model, task.prompts, 8, KldKind::forward).value;
  CHECK(after < 0.75 * before);

  Rng g1(14), g2(14);
  const auto c1 = generate_corpus(teacher, task.prompts, 50, 8, g1);
  const auto c2 = generate_corpus(teacher, task.prompts, 50, 8, g2);
  REQUIRE(c1.size() == 50);
  for (std::size_t i = 0; i < c1.size(); ++i) CHECK(c1[i].y == c2[i].y);
}

TEST_CASE("pre-training loss gradient") {
  Rng rng(15);
  const auto q = TabularLM::random(Vocab(4, 0), 1, 1.0, rng);
  const std::vector<Sequence> batch{Sequence{{1, 2, 0}, true}, Sequence{{3, 0}, true}, Sequence{{0}, true}};
  const auto g = pt_loss_grad(q, batch);
  const auto fd = finite_diff_gradient(
      [&](const TabularLM& m) {
        double s = 0.0;
        for (const auto& d : batch) s -= log_prob_seq(m, Sequence{}, d);
        return s / 3.0;
      },
      q, 1e-5);
  CHECK(max_abs_diff(g, fd) < 1e-6);

  const std::vector<Sequence> one{batch[0]};
  const std::vector<Sequence> dup{batch[0], batch[0]};
  CHECK(max_abs_diff(pt_loss_grad(q, one), pt_loss_grad(q, dup)) < 1e-15);
  CHECK(pt_loss_grad(q, std::vector<Sequence>{}).max_abs() == 0.0);
}

TEST_CASE("a student equal to its teacher is a fixed point") {
  auto spec = small_spec();
  Rng rng(16);
  const auto [task, teacher] = make_synthetic_task(spec, rng);
  DistillConfig cfg;
  cfg.lr = 1e-2;
  cfg.steps = 100;
  cfg.pt_loss = false;
  cfg.batch = 16;
  cfg.collect_size = 64;
  cfg.eval_interval = 50;
  cfg.seed = 17;
  const Checkpoint init{teacher, 0, "init", {}, {}};
  const auto res = minillm_train(init, teacher, task, cfg);
  CHECK_FALSE(res.aborted);
  CHECK(res.last.step == 100);
  CHECK(max_abs_diff(res.last.model.params(), teacher.params()) < 1e-3);
}

TEST_CASE("a step applies exactly the reported update") {
  Rng rng(18);
  const auto [task, teacher] = make_synthetic_task(small_spec(), rng);
  TabularLM student = TabularLM::random(task.vocab(), 1, 0.5, rng);
  DistillConfig cfg;
  cfg.lr = 0.05;
  Rng roll(19);
  const auto trajs = collect_rollouts(teacher, student, cfg.alpha, task.prompts, 32, 8, roll);
  const std::vector<Sequence> pt(task.pt_corpus.begin(), task.pt_corpus.begin() + 32);
  const ParamVector before = student.params();
  const auto est = minillm_step(student, teacher, trajs, pt, cfg);
  REQUIRE(est.parts);
  const ParamVector expected = before - cfg.lr * (est.parts->single + est.parts->long_part + est.parts->pt);
  CHECK(max_abs_diff(student.params(), expected) < 1e-12);
  CHECK(est.parts->pt.max_abs() > 0.0);

  cfg.pt_loss = false;
  const auto est2 = minillm_step(student, teacher, trajs, pt, cfg);
  CHECK(est2.parts->pt.max_abs() == 0.0);
}

TEST_CASE("distillation reduces reverse KLD across a capacity gap") {
  Rng rng(20);
  const auto [task, teacher] = make_synthetic_task(small_spec(), rng);
  DistillConfig cfg;
  cfg.steps = 300;
  cfg.pt_loss = false;
  cfg.seed = 21;
  const Checkpoint init{TabularLM(task.vocab(), 1), 0, "init", {}, {}};
  const auto res = minillm_train(init, teacher, task, cfg);
  REQUIRE(res.trace.size() == 301);
  CHECK(res.trace.back().reverse_kld <= 0.8 * res.trace.front().reverse_kld);
  CHECK(res.trace.back().smoothed_kld < res.trace.front().smoothed_kld);
  CHECK(res.evals.front().first == 0);
  CHECK(res.evals.back().first == 300);

  const auto again = minillm_train(init, teacher, task, cfg);
  CHECK(again.last.model.params() == res.last.model.params());
}

TEST_CASE("distill config json") {
  DistillConfig c;
  c.alpha = 0.5;
  c.clip_eps.reset();
  c.length_norm = LengthNorm::literal;
  c.weight_mode = WeightMode::full;
  const auto back = DistillConfig::from_json(c.to_json());
  CHECK(back.to_json() == c.to_json());
  CHECK(back.fingerprint() == c.fingerprint());

  CHECK_THROWS_AS(DistillConfig::from_json(nlohmann::json{{"alpah", 0.2}}), ConfigError);
  CHECK_THROWS_AS(DistillConfig::from_json(nlohmann::json{{"alpha", 2.0}}), ConfigError);
  CHECK_THROWS_AS(DistillConfig::from_json(nlohmann::json{{"alpha", "high"}}), ConfigError);
  CHECK_THROWS_AS(DistillConfig::from_json(nlohmann::json{{"batch", 512}}), ConfigError);
  CHECK(DistillConfig::from_json(nlohmann::json{{"length_norm", false}}).length_norm == LengthNorm::off);
  CHECK(DistillConfig::from_json(nlohmann::json{{"length_norm", "on"}}).length_norm == LengthNorm::term_count);
}

TEST_CASE("checkpoint files") {
  Rng rng(22);
  const auto m = TabularLM::random(Vocab(4, 0), 1, 1.0, rng);
  Checkpoint c{m, 42, "tagged", {}, "abcd"};
  c.metrics.add("valid_rouge_l", 0.25);
  const auto path = std::filesystem::temp_directory_path() / "revkd_checkpoint_test.json";
  save_checkpoint(c, path);
  const auto back = load_checkpoint(path);
  CHECK(back.model.params() == m.params());
  CHECK(back.step == 42);
  CHECK(back.tag == "tagged");
  CHECK(back.config_fingerprint == "abcd");
  CHECK(back.metrics.at("valid_rouge_l") == 0.25);

  save_model(m, path);
  CHECK(load_checkpoint(path).model.params() == m.params());
  std::filesystem::remove(path);
}

TEST_CASE("evaluation report") {
  Rng rng(23);
  const auto [task, teacher] = make_synthetic_task(small_spec(), rng);
  const auto r = evaluate_model(teacher, teacher, task, 5);
  CHECK_NOTHROW(r.validate());
  CHECK(std::abs(r.at("reverse_kld_nats")) < 1e-12);
  CHECK(std::abs(r.at("forward_kld_nats")) < 1e-12);
  CHECK(r.find("rouge_l") != nullptr);
  CHECK(r.find("distinct_4") != nullptr);
  CHECK(r.find("ece") != nullptr);
  CHECK(r.find("exaccerr_pct_l8") != nullptr);
  CHECK_THROWS_AS(evaluate_model(TabularLM(Vocab(3, 0), 1), teacher, task, 5), ConfigError);
}

}  // TEST_SUITE
