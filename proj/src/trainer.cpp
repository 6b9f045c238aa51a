#include "revkd/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "revkd/divergence.hpp"
#include "revkd/errors.hpp"
#include "revkd/metrics.hpp"
#include "revkd/model_io.hpp"

namespace revkd {

namespace {

void shuffle_indices(std::vector<std::size_t>& idx, Rng& rng) {
  for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
}

std::string length_norm_name(LengthNorm n) {
  switch (n) {
    case LengthNorm::off: return "off";
    case LengthNorm::term_count: return "term_count";
    case LengthNorm::literal: return "literal";
  }
  return "off";
}

LengthNorm parse_length_norm(const nlohmann::json& v) {
  if (v.is_boolean()) return v.get<bool>() ? LengthNorm::term_count : LengthNorm::off;
  if (!v.is_string()) throw ConfigError("length_norm: expected a string or boolean");
  const auto s = v.get<std::string>();
  if (s == "on" || s == "term_count") return LengthNorm::term_count;
  if (s == "off") return LengthNorm::off;
  if (s == "literal") return LengthNorm::literal;
  throw ConfigError("length_norm: unknown value '" + s + "' (expected on, off, term_count, literal)");
}

WeightMode parse_weight_mode(const nlohmann::json& v) {
  if (!v.is_string()) throw ConfigError("weight_mode: expected a string");
  const auto s = v.get<std::string>();
  if (s == "full") return WeightMode::full;
  if (s == "per_step") return WeightMode::per_step;
  throw ConfigError("weight_mode: unknown value '" + s + "' (expected full, per_step)");
}

template <typename T>
T field(const nlohmann::json& j, const char* name) {
  try {
    return j.at(name).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(std::string(name) + ": wrong type");
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// synthetic task

void TaskSpec::validate() const {
  if (vocab_size < 2 || vocab_size > 64) throw ConfigError("vocab_size must be in [2, 64]");
  if (eos >= vocab_size) throw ConfigError("eos must be a vocabulary id");
  if (teacher_order < 1) throw ConfigError("teacher_order must be >= 1");
  if (student_order >= teacher_order && !allow_no_gap) {
    throw ConfigError("student_order must be < teacher_order (set allow_no_gap to override)");
  }
  if (n_prompts < 1) throw ConfigError("n_prompts must be >= 1");
  if (n_train < 1 || n_valid < 1 || n_test < 1) throw ConfigError("n_train, n_valid, n_test must be >= 1");
  if (max_len < 1) throw ConfigError("max_len must be >= 1");
  if (!(gt_logit_scale > 0.0) || !std::isfinite(gt_logit_scale)) throw ConfigError("gt_logit_scale must be positive");
  if (!(teacher_smoothing > 0.0) || !std::isfinite(teacher_smoothing)) {
    throw ConfigError("teacher_smoothing must be positive");
  }
}

TabularLM fit_counts(const Vocab& vocab, std::size_t order, std::span<const Example> data, double smoothing) {
  if (!(smoothing > 0.0)) throw std::invalid_argument("fit_counts: smoothing must be positive");
  TabularLM model(vocab, order);
  const std::size_t V = vocab.size;
  std::vector<double> counts(model.params().size(), 0.0);
  std::vector<bool> seen(model.num_keys(), false);
  for (const auto& ex : data) {
    const auto keys = step_keys(model, ex.x, ex.y);
    for (std::size_t t = 0; t < keys.size(); ++t) {
      counts[keys[t] * V + ex.y.tokens[t]] += 1.0;
      seen[keys[t]] = true;
    }
  }
  for (std::size_t k = 0; k < model.num_keys(); ++k) {
    if (!seen[k]) continue;
    auto row = model.row(k);
    for (std::size_t v = 0; v < V; ++v) row[v] = std::log(counts[k * V + v] + smoothing);
  }
  return model;
}

std::pair<SyntheticTask, TabularLM> make_synthetic_task(const TaskSpec& spec, Rng& rng) {
  spec.validate();
  const Vocab vocab = spec.vocab();
  SyntheticTask task{spec, TabularLM::random(vocab, spec.teacher_order, spec.gt_logit_scale, rng), {}, {}, {}, {},
                     {}, {}};

  std::vector<Token> content;
  for (Token v = 0; v < vocab.size; ++v) {
    if (v != vocab.eos) content.push_back(v);
  }
  for (Token a : content) {
    for (Token b : content) task.prompts.push_back(Sequence{{a, b}, false});
  }
  if (spec.n_prompts < task.prompts.size()) {
    std::vector<std::size_t> idx(task.prompts.size());
    std::iota(idx.begin(), idx.end(), 0);
    shuffle_indices(idx, rng);
    std::vector<Sequence> kept;
    for (std::size_t i = 0; i < spec.n_prompts; ++i) kept.push_back(task.prompts[idx[i]]);
    task.prompts = std::move(kept);
  }
  task.prompt_weights.assign(task.prompts.size(), 1.0 / static_cast<double>(task.prompts.size()));

  auto draw = [&](std::size_t n, std::vector<Example>& out) {
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
      const Sequence& x = task.prompts[rng.below(task.prompts.size())];
      out.push_back({x, sample(task.ground_truth, x, spec.max_len, rng)});
    }
  };
  draw(spec.n_train, task.train);
  draw(spec.n_valid, task.valid);
  draw(spec.n_test, task.test);
  task.pt_corpus.reserve(spec.n_pt);
  for (std::size_t i = 0; i < spec.n_pt; ++i) task.pt_corpus.push_back(sample(task.ground_truth, {}, spec.max_len, rng));

  TabularLM teacher = fit_counts(vocab, spec.teacher_order, task.train, spec.teacher_smoothing);
  return {std::move(task), std::move(teacher)};
}

// ---------------------------------------------------------------------------
// checkpoints

nlohmann::json to_json(const Checkpoint& c) {
  return {{"model", model_to_json(c.model)},
          {"step", c.step},
          {"tag", c.tag},
          {"config_fingerprint", c.config_fingerprint},
          {"metrics", to_json(c.metrics)}};
}

Checkpoint checkpoint_from_json(const nlohmann::json& j) {
  Checkpoint c;
  c.model = model_from_json(j.at("model"));
  c.step = j.value("step", std::size_t{0});
  c.tag = j.value("tag", std::string{});
  c.config_fingerprint = j.value("config_fingerprint", std::string{});
  if (j.contains("metrics")) {
    const auto& m = j.at("metrics");
    std::vector<std::string> flagged;
    if (m.contains("flagged")) flagged = m.at("flagged").get<std::vector<std::string>>();
    for (const auto& [name, v] : m.at("metrics").items()) {
      const bool f = std::find(flagged.begin(), flagged.end(), name) != flagged.end();
      c.metrics.add(name, v.is_null() ? std::nan("") : v.get<double>(), f);
    }
    c.metrics.seed = m.value("seed", std::uint64_t{0});
    c.metrics.config_fingerprint = m.value("config_fingerprint", std::string{});
    c.metrics.timestamp = m.value("timestamp", std::string{});
  }
  return c;
}

void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
  write_file_atomic(path, to_json(c).dump(1) + "\n");
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("cannot parse checkpoint " + path.string() + ": " + e.what());
  }
  if (!j.contains("model")) {
    Checkpoint c;
    c.model = model_from_json(j);
    return c;
  }
  return checkpoint_from_json(j);
}

// ---------------------------------------------------------------------------
// supervised baselines

double nll_per_token(const TabularLM& model, std::span<const Example> data) {
  double nll = 0.0;
  std::size_t tokens = 0;
  for (const auto& ex : data) {
    nll -= log_prob_seq(model, ex.x, ex.y);
    tokens += ex.y.size();
  }
  return tokens == 0 ? 0.0 : nll / static_cast<double>(tokens);
}

double validation_rouge(const TabularLM& model, std::span<const Example> data, std::size_t max_len,
                        std::uint64_t seed) {
  if (data.empty()) return 0.0;
  const Rng base(seed);
  double s = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    Rng r = base.substream(static_cast<std::uint64_t>(i));
    s += rouge_l(sample(model, data[i].x, max_len, r), data[i].y, model.vocab().eos);
  }
  return s / static_cast<double>(data.size());
}

namespace {

// Loss of one example under the mixed objective; adds its gradient into grad.
double example_loss_grad(const TabularLM& model, const TabularLM* teacher, double mix, const Example& ex,
                         ParamVector* grad) {
  const std::size_t V = model.vocab_size();
  const double inv_t = 1.0 / model.temperature();
  const auto keys = step_keys(model, ex.x, ex.y);
  std::vector<std::size_t> tkeys;
  if (mix > 0.0) tkeys = step_keys(*teacher, ex.x, ex.y);
  double loss = 0.0;
  for (std::size_t t = 0; t < keys.size(); ++t) {
    const Token y = ex.y.tokens[t];
    const auto lq = model.log_dist_at(keys[t]);
    if (mix == 0.0) {
      loss -= lq[y];
      if (grad) {
        for (std::size_t v = 0; v < V; ++v) {
          (*grad)[keys[t] * V + v] += (std::exp(lq[v]) - (v == y ? 1.0 : 0.0)) * inv_t;
        }
      }
      continue;
    }
    const auto p = teacher->dist_at(tkeys[t]);
    double ce = 0.0;
    for (std::size_t v = 0; v < V; ++v) {
      if (p[v] > 0.0) ce -= p[v] * lq[v];
    }
    loss += mix * ce - (1.0 - mix) * lq[y];
    if (grad) {
      for (std::size_t v = 0; v < V; ++v) {
        const double q = std::exp(lq[v]);
        (*grad)[keys[t] * V + v] += (mix * (q - p[v]) + (1.0 - mix) * (q - (v == y ? 1.0 : 0.0))) * inv_t;
      }
    }
  }
  return loss;
}

double mean_objective(const TabularLM& model, const TabularLM* teacher, double mix,
                      std::span<const Example> data) {
  if (data.empty()) return 0.0;
  double s = 0.0;
  for (const auto& ex : data) s += example_loss_grad(model, teacher, mix, ex, nullptr);
  return s / static_cast<double>(data.size());
}

Checkpoint snapshot(const TabularLM& model, std::size_t epoch, std::string tag, const EpochRecord& rec) {
  Checkpoint c{model, epoch, std::move(tag), {}, {}};
  c.metrics.add("valid_nll_nats", rec.valid_loss);
  c.metrics.add("valid_rouge_l", rec.valid_rouge);
  return c;
}

}  // namespace

SupervisedResult supervised_train(const TabularLM& student, const TabularLM* teacher, double mix_rate,
                                  std::span<const Example> data, const SyntheticTask& task,
                                  const SupervisedOptions& opts, Rng& rng) {
  if (!(opts.lr > 0.0) || !std::isfinite(opts.lr)) throw ConfigError("lr must be positive");
  if (opts.batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(mix_rate >= 0.0 && mix_rate <= 1.0)) throw ConfigError("mix_rate must be in [0, 1]");
  if (mix_rate > 0.0 && teacher == nullptr) throw std::invalid_argument("supervised_train: teacher required");
  if (teacher && !(teacher->vocab() == student.vocab())) throw ConfigError("teacher and student vocabularies differ");
  if (!(task.vocab() == student.vocab())) throw ConfigError("task and student vocabularies differ");

  TabularLM model = student;
  SupervisedResult res;
  auto record = [&](std::size_t epoch) {
    EpochRecord rec{epoch, mean_objective(model, teacher, mix_rate, data), test_lm_loss(model, task.valid),
                    validation_rouge(model, task.valid, task.max_len(), opts.eval_seed)};
    if (!std::isfinite(rec.train_loss) || !std::isfinite(rec.valid_loss)) {
      throw TrainingAborted("supervised training diverged at epoch " + std::to_string(epoch) +
                            ": train loss " + format_double(rec.train_loss) + ", valid loss " +
                            format_double(rec.valid_loss));
    }
    if (res.history.empty() || rec.valid_loss < res.best_loss.metrics.at("valid_nll_nats")) {
      res.best_loss = snapshot(model, epoch, "best_valid_loss", rec);
    }
    if (res.history.empty() || rec.valid_rouge > res.best_rouge.metrics.at("valid_rouge_l")) {
      res.best_rouge = snapshot(model, epoch, "best_valid_rouge", rec);
    }
    res.history.push_back(rec);
    res.last = snapshot(model, epoch, "last", rec);
  };

  record(0);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t epoch = 1; epoch <= opts.epochs; ++epoch) {
    shuffle_indices(order, rng);
    for (std::size_t b = 0; b < order.size(); b += opts.batch_size) {
      const std::size_t e = std::min(order.size(), b + opts.batch_size);
      ParamVector grad(model.params().size(), 0.0);
      for (std::size_t i = b; i < e; ++i) example_loss_grad(model, teacher, mix_rate, data[order[i]], &grad);
      grad *= 1.0 / static_cast<double>(e - b);
      if (!grad.all_finite()) {
        throw TrainingAborted("non-finite gradient at epoch " + std::to_string(epoch) + ", batch offset " +
                              std::to_string(b));
      }
      model.params().axpy(-opts.lr, grad);
    }
    record(epoch);
  }
  return res;
}

SupervisedResult sft_train(const TabularLM& student, const SyntheticTask& task, const SupervisedOptions& opts,
                           Rng& rng) {
  return supervised_train(student, nullptr, 0.0, task.train, task, opts, rng);
}

SupervisedResult word_kd_train(const TabularLM& student, const TabularLM& teacher, const SyntheticTask& task,
                               const SupervisedOptions& opts, double mix_rate, Rng& rng) {
  return supervised_train(student, &teacher, mix_rate, task.train, task, opts, rng);
}

std::vector<Example> generate_corpus(const TabularLM& teacher, std::span<const Sequence> prompts,
                                     std::size_t n, std::size_t max_len, Rng& rng) {
  if (prompts.empty()) throw std::invalid_argument("generate_corpus: empty prompt list");
  std::vector<Example> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Sequence& x = prompts[rng.below(prompts.size())];
    out.push_back({x, sample(teacher, x, max_len, rng)});
  }
  return out;
}

SupervisedResult seqkd_train(const TabularLM& student, const TabularLM& teacher, const SyntheticTask& task,
                             std::size_t n_generated, const SupervisedOptions& opts, Rng& rng) {
  Rng gen = rng.substream("seqkd-corpus");
  const auto corpus = generate_corpus(teacher, task.prompts, n_generated, task.max_len(), gen);
  return supervised_train(student, nullptr, 0.0, corpus, task, opts, rng);
}

// ---------------------------------------------------------------------------
// reverse-KLD distillation

ParamVector pt_loss_grad(const TabularLM& student, std::span<const Sequence> pt_batch) {
  ParamVector g(student.params().size(), 0.0);
  if (pt_batch.empty()) return g;
  const Sequence empty;
  const double scale = -1.0 / static_cast<double>(pt_batch.size());
  for (const auto& d : pt_batch) {
    const auto keys = step_keys(student, empty, d);
    for (std::size_t t = 0; t < keys.size(); ++t) add_score(student, keys[t], d.tokens[t], scale, g);
  }
  return g;
}

void DistillConfig::validate() const {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("alpha must be in [0, 1]");
  if (clip_eps && !(*clip_eps > 0.0)) throw ConfigError("clip_eps must be positive or null");
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("lr must be positive");
  if (batch < 1) throw ConfigError("batch must be >= 1");
  if (collect_size < 1) throw ConfigError("collect_size must be >= 1");
  if (batch > collect_size) throw ConfigError("batch must not exceed collect_size");
  if (inner_epochs < 1) throw ConfigError("inner_epochs must be >= 1");
  if (eval_interval < 1) throw ConfigError("eval_interval must be >= 1");
  if (smooth_window < 1) throw ConfigError("smooth_window must be >= 1");
}

EstimatorConfig DistillConfig::estimator() const {
  EstimatorConfig e;
  e.alpha = alpha;
  e.weight_mode = weight_mode;
  e.length_norm = length_norm;
  e.clip_eps = clip_eps;
  e.single_step_decomp = single_step_decomp;
  return e;
}

nlohmann::json DistillConfig::to_json() const {
  return {{"alpha", alpha},
          {"clip_eps", clip_eps ? nlohmann::json(*clip_eps) : nlohmann::json(nullptr)},
          {"lr", lr},
          {"batch", batch},
          {"collect_size", collect_size},
          {"inner_epochs", inner_epochs},
          {"steps", steps},
          {"length_norm", length_norm_name(length_norm)},
          {"weight_mode", weight_mode == WeightMode::full ? "full" : "per_step"},
          {"single_step_decomp", single_step_decomp},
          {"pt_loss", pt_loss},
          {"seed", seed},
          {"eval_interval", eval_interval},
          {"smooth_window", smooth_window}};
}

DistillConfig DistillConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("distill: expected an object");
  DistillConfig c;
  for (const auto& [key, v] : j.items()) {
    if (key == "alpha") c.alpha = field<double>(j, "alpha");
    else if (key == "clip_eps") c.clip_eps = v.is_null() ? std::nullopt : std::optional<double>(field<double>(j, "clip_eps"));
    else if (key == "lr") c.lr = field<double>(j, "lr");
    else if (key == "batch") c.batch = field<std::size_t>(j, "batch");
    else if (key == "collect_size") c.collect_size = field<std::size_t>(j, "collect_size");
    else if (key == "inner_epochs") c.inner_epochs = field<std::size_t>(j, "inner_epochs");
    else if (key == "steps") c.steps = field<std::size_t>(j, "steps");
    else if (key == "length_norm") c.length_norm = parse_length_norm(v);
    else if (key == "weight_mode") c.weight_mode = parse_weight_mode(v);
    else if (key == "single_step_decomp") c.single_step_decomp = field<bool>(j, "single_step_decomp");
    else if (key == "pt_loss") c.pt_loss = field<bool>(j, "pt_loss");
    else if (key == "seed") c.seed = field<std::uint64_t>(j, "seed");
    else if (key == "eval_interval") c.eval_interval = field<std::size_t>(j, "eval_interval");
    else if (key == "smooth_window") c.smooth_window = field<std::size_t>(j, "smooth_window");
    else throw ConfigError("distill." + key + ": unknown key");
  }
  c.validate();
  return c;
}

std::string DistillConfig::fingerprint() const { return revkd::fingerprint(to_json().dump()); }

nlohmann::json TraceRecord::to_json() const {
  return {{"step", step},
          {"reverse_kld", json_number(reverse_kld)},
          {"forward_kld", json_number(forward_kld)},
          {"smoothed_kld", json_number(smoothed_kld)},
          {"single_norm", single_norm},
          {"long_norm", long_norm},
          {"pt_norm", pt_norm},
          {"variance_trace", variance_trace},
          {"mean_response_length", mean_response_length},
          {"wall_seconds", wall_seconds}};
}

GradientEstimate minillm_step(TabularLM& student, const TabularLM& teacher, std::span<const Trajectory> batch,
                              std::span<const Sequence> pt_batch, const DistillConfig& cfg) {
  if (batch.empty()) throw std::invalid_argument("minillm_step: empty batch");
  GradientEstimate est = minillm_gradient_from(teacher, student, batch, cfg.estimator(), false);
  auto& parts = *est.parts;
  parts.pt = cfg.pt_loss ? pt_loss_grad(student, pt_batch) : ParamVector(student.params().size(), 0.0);
  const ParamVector update = parts.single + parts.long_part + parts.pt;
  if (!update.all_finite()) {
    std::string which;
    if (!parts.single.all_finite()) which += " single";
    if (!parts.long_part.all_finite()) which += " long";
    if (!parts.pt.all_finite()) which += " pt";
    throw TrainingAborted("non-finite gradient part(s):" + which);
  }
  student.params().axpy(-cfg.lr, update);
  est.grad = update;
  return est;
}

DistillResult minillm_train(const Checkpoint& student_init, const TabularLM& teacher, const SyntheticTask& task,
                            const DistillConfig& cfg) {
  cfg.validate();
  if (!(student_init.model.vocab() == teacher.vocab()) || !(teacher.vocab() == task.vocab())) {
    throw ConfigError("student, teacher and task vocabularies differ");
  }
  const std::string fp = cfg.fingerprint();
  const Rng root(cfg.seed);
  Rng rollout_rng = root.substream("rollout");
  Rng pt_rng = root.substream("pt");
  Rng shuffle_rng = root.substream("shuffle");
  const std::uint64_t eval_seed = root.substream("eval").next_u64();
  const std::size_t max_len = task.max_len();
  const auto t0 = std::chrono::steady_clock::now();

  DistillResult res;
  TabularLM student = student_init.model;
  double smooth_sum = 0.0;

  auto trace = [&](std::size_t step, const GradientEstimate* est, double mean_len) {
    TraceRecord r;
    r.step = step;
    r.reverse_kld = exact_kld_prompts(teacher, student, task.prompts, max_len, KldKind::reverse).value;
    r.forward_kld = exact_kld_prompts(teacher, student, task.prompts, max_len, KldKind::forward).value;
    smooth_sum += r.reverse_kld;
    if (res.trace.size() >= cfg.smooth_window) smooth_sum -= res.trace[res.trace.size() - cfg.smooth_window].reverse_kld;
    r.smoothed_kld = smooth_sum / static_cast<double>(std::min(res.trace.size() + 1, cfg.smooth_window));
    if (est) {
      r.single_norm = est->parts->single.norm();
      r.long_norm = est->parts->long_part.norm();
      r.pt_norm = est->parts->pt.norm();
      r.variance_trace = est->variance_trace();
    }
    r.mean_response_length = mean_len;
    r.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    res.trace.push_back(r);
  };
  auto evaluate = [&](std::size_t step) {
    const double rouge = validation_rouge(student, task.valid, max_len, eval_seed);
    res.evals.emplace_back(step, rouge);
    if (res.evals.size() == 1 || rouge > res.selected.metrics.at("valid_rouge_l")) {
      res.selected = Checkpoint{student, step, "minillm_best_valid_rouge", {}, fp};
      res.selected.metrics.add("valid_rouge_l", rouge);
      res.selected.metrics.add("reverse_kld_nats", res.trace.back().reverse_kld);
    }
  };

  trace(0, nullptr, 0.0);
  evaluate(0);
  std::size_t step = 0;
  try {
    while (step < cfg.steps) {
      const auto rollouts =
          collect_rollouts(teacher, student, cfg.alpha, task.prompts, cfg.collect_size, max_len, rollout_rng);
      std::vector<std::size_t> order(rollouts.size());
      std::iota(order.begin(), order.end(), 0);
      for (std::size_t epoch = 0; epoch < cfg.inner_epochs && step < cfg.steps; ++epoch) {
        shuffle_indices(order, shuffle_rng);
        for (std::size_t b = 0; b < order.size() && step < cfg.steps; b += cfg.batch) {
          const std::size_t e = std::min(order.size(), b + cfg.batch);
          std::vector<Trajectory> batch;
          batch.reserve(e - b);
          double len = 0.0;
          for (std::size_t i = b; i < e; ++i) {
            batch.push_back(rollouts[order[i]]);
            len += static_cast<double>(batch.back().y.content(task.vocab().eos).size());
          }
          std::vector<Sequence> pt_batch;
          if (cfg.pt_loss && !task.pt_corpus.empty()) {
            for (std::size_t i = b; i < e; ++i) pt_batch.push_back(task.pt_corpus[pt_rng.below(task.pt_corpus.size())]);
          }
          GradientEstimate est;
          try {
            est = minillm_step(student, teacher, batch, pt_batch, cfg);
          } catch (const TrainingAborted& ex) {
            throw TrainingAborted(std::string(ex.what()) + " at step " + std::to_string(step + 1));
          }
          ++step;
          trace(step, &est, len / static_cast<double>(batch.size()));
          if (step % cfg.eval_interval == 0 || step == cfg.steps) evaluate(step);
        }
      }
    }
  } catch (const TrainingAborted& ex) {
    res.aborted = true;
    res.diagnostics = ex.what();
  }
  res.last = Checkpoint{student, step, "minillm_last", {}, fp};
  res.last.metrics.add("reverse_kld_nats", res.trace.back().reverse_kld);
  return res;
}

// ---------------------------------------------------------------------------
// evaluation

MetricReport evaluate_model(const TabularLM& model, const TabularLM& teacher, const SyntheticTask& task,
                            std::uint64_t eval_seed, const EvalOptions& opts) {
  if (!(model.vocab() == teacher.vocab()) || !(model.vocab() == task.vocab())) {
    throw ConfigError("model, teacher and task vocabularies differ");
  }
  const std::size_t max_len = task.max_len();
  const Token eos = task.vocab().eos;
  MetricReport r;
  r.seed = eval_seed;

  const auto rev = exact_kld_prompts(teacher, model, task.prompts, max_len, KldKind::reverse);
  const auto fwd = exact_kld_prompts(teacher, model, task.prompts, max_len, KldKind::forward);
  r.add("reverse_kld_nats", rev.value, rev.infinite);
  r.add("forward_kld_nats", fwd.value, fwd.infinite);

  const Rng base(eval_seed);
  std::vector<double> rouge(opts.seeds.size(), 0.0);
  double d4_sum = 0.0, len_sum = 0.0;
  std::size_t d4_count = 0, n_responses = 0;
  for (std::size_t s = 0; s < opts.seeds.size(); ++s) {
    const Rng seed_rng = base.substream(opts.seeds[s]);
    std::vector<Sequence> responses;
    responses.reserve(task.test.size());
    for (std::size_t i = 0; i < task.test.size(); ++i) {
      Rng ri = seed_rng.substream(static_cast<std::uint64_t>(i));
      responses.push_back(sample(model, task.test[i].x, max_len, ri));
      rouge[s] += rouge_l(responses.back(), task.test[i].y, eos);
      len_sum += static_cast<double>(responses.back().content(eos).size());
    }
    n_responses += responses.size();
    if (!task.test.empty()) rouge[s] /= static_cast<double>(task.test.size());
    if (const auto d4 = distinct_n(responses, 4, eos)) {
      d4_sum += *d4;
      ++d4_count;
    }
  }
  double rouge_mean = 0.0;
  for (double v : rouge) rouge_mean += v;
  rouge_mean /= static_cast<double>(std::max<std::size_t>(rouge.size(), 1));
  double rouge_var = 0.0;
  for (double v : rouge) rouge_var += (v - rouge_mean) * (v - rouge_mean);
  const bool sd_defined = rouge.size() > 1;
  r.add("rouge_l", rouge_mean);
  r.add("rouge_l_sd", sd_defined ? std::sqrt(rouge_var / static_cast<double>(rouge.size() - 1)) : std::nan(""),
        !sd_defined);
  r.add("distinct_4", d4_count ? d4_sum / static_cast<double>(d4_count) : std::nan(""), d4_count == 0);
  r.add("mean_response_length", n_responses ? len_sum / static_cast<double>(n_responses) : 0.0);
  r.add("test_lm_loss_nats", test_lm_loss(model, task.test));

  const bool labels_ok = opts.label_a != opts.label_b && opts.label_a < task.vocab().size &&
                         opts.label_b < task.vocab().size && opts.label_a != eos && opts.label_b != eos;
  if (labels_ok) {
    Rng cal = base.substream("calibration");
    const auto c = calibration_probe(model, task.ground_truth, task.prompts, opts.label_a, opts.label_b, 20, cal);
    r.add("ece", c.ece);
  } else {
    r.add("ece", std::nan(""), true);
  }

  const std::size_t l = std::min(opts.exposure_length, max_len);
  const auto curve = exposure_bias_curve_exact(model, teacher, task.prompts, l);
  const bool defined = !curve.defined.empty() && curve.defined.back();
  r.add("exaccerr_pct_l" + std::to_string(l), defined ? curve.exaccerr.back() : std::nan(""), !defined);
  return r;
}

}  // namespace revkd
