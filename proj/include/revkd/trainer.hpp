#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "revkd/pg_engine.hpp"
#include "revkd/report.hpp"
#include "revkd/rng.hpp"
#include "revkd/tabular_lm.hpp"

namespace revkd {

// ---------------------------------------------------------------------------
// synthetic task

struct TaskSpec {
  std::size_t vocab_size = 8;
  Token eos = 0;
  std::size_t teacher_order = 2;
  std::size_t student_order = 1;
  /// Length-2 prompts over content tokens; all (V-1)^2 when n_prompts >= (V-1)^2.
  std::size_t n_prompts = 49;
  std::size_t n_train = 2000;
  std::size_t n_valid = 200;
  std::size_t n_test = 500;
  std::size_t n_pt = 1000;
  std::size_t max_len = 24;
  double gt_logit_scale = 1.5;
  /// Additive pseudo-count for the teacher's count-based fit.
  double teacher_smoothing = 0.1;
  /// Allows student_order >= teacher_order (no capacity gap).
  bool allow_no_gap = false;

  void validate() const;
  Vocab vocab() const { return Vocab(vocab_size, eos); }
};

struct SyntheticTask {
  TaskSpec spec;
  TabularLM ground_truth;
  std::vector<Sequence> prompts;
  std::vector<double> prompt_weights;  // uniform
  std::vector<Example> train, valid, test;
  std::vector<Sequence> pt_corpus;     // unconditional sequences (empty prompt)

  Vocab vocab() const { return ground_truth.vocab(); }
  std::size_t max_len() const { return spec.max_len; }
};

/// Ground truth with N(0, scale^2) logits, data splits sampled from it, and a
/// teacher of the ground-truth order fit to the train split by smoothed counts.
std::pair<SyntheticTask, TabularLM> make_synthetic_task(const TaskSpec& spec, Rng& rng);

/// Closed-form maximum likelihood for a tabular model: logits are the log of
/// (count + smoothing) per context; unseen contexts stay uniform.
TabularLM fit_counts(const Vocab& vocab, std::size_t order, std::span<const Example> data, double smoothing);

// ---------------------------------------------------------------------------
// checkpoints

struct Checkpoint {
  TabularLM model;
  std::size_t step = 0;
  std::string tag;
  MetricReport metrics;
  std::string config_fingerprint;
};

nlohmann::json to_json(const Checkpoint& c);
Checkpoint checkpoint_from_json(const nlohmann::json& j);
void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// supervised baselines

struct SupervisedOptions {
  double lr = 1.0;
  std::size_t epochs = 20;
  std::size_t batch_size = 64;
  /// Seed of the fixed sampling stream used for validation Rouge-L.
  std::uint64_t eval_seed = 0;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;   // objective being minimized, nats per sequence
  double valid_loss = 0.0;   // validation NLL, nats per sequence
  double valid_rouge = 0.0;  // mean validation Rouge-L
};

struct SupervisedResult {
  Checkpoint best_loss;   // lowest validation NLL
  Checkpoint best_rouge;  // highest validation Rouge-L
  Checkpoint last;        // model after the final epoch
  std::vector<EpochRecord> history;  // epoch 0 is the initial model
};

/// Mean NLL per token over a data set.
double nll_per_token(const TabularLM& model, std::span<const Example> data);
/// Mean Rouge-L of one sampled response per example against its reference.
double validation_rouge(const TabularLM& model, std::span<const Example> data, std::size_t max_len,
                        std::uint64_t seed);

SupervisedResult sft_train(const TabularLM& student, const SyntheticTask& task, const SupervisedOptions& opts,
                           Rng& rng);
/// Per-token loss mix * CE(teacher, student) + (1 - mix) * NLL(reference token).
SupervisedResult word_kd_train(const TabularLM& student, const TabularLM& teacher, const SyntheticTask& task,
                               const SupervisedOptions& opts, double mix_rate, Rng& rng);
/// Teacher-generated corpus (temperature 1).
std::vector<Example> generate_corpus(const TabularLM& teacher, std::span<const Sequence> prompts,
                                     std::size_t n, std::size_t max_len, Rng& rng);
SupervisedResult seqkd_train(const TabularLM& student, const TabularLM& teacher, const SyntheticTask& task,
                             std::size_t n_generated, const SupervisedOptions& opts, Rng& rng);

/// Supervised training on an explicit data set; validation uses task.valid.
SupervisedResult supervised_train(const TabularLM& student, const TabularLM* teacher, double mix_rate,
                                  std::span<const Example> data, const SyntheticTask& task,
                                  const SupervisedOptions& opts, Rng& rng);

// ---------------------------------------------------------------------------
// reverse-KLD distillation

/// Gradient of -mean_d log q(d) over unconditional sequences.
ParamVector pt_loss_grad(const TabularLM& student, std::span<const Sequence> pt_batch);

struct DistillConfig {
  double alpha = 0.2;
  std::optional<double> clip_eps = 0.2;
  double lr = 0.1;
  std::size_t batch = 64;
  std::size_t collect_size = 256;
  std::size_t inner_epochs = 4;
  std::size_t steps = 2000;
  LengthNorm length_norm = LengthNorm::term_count;
  WeightMode weight_mode = WeightMode::per_step;
  bool single_step_decomp = true;
  bool pt_loss = true;
  std::uint64_t seed = 0;
  /// Validation Rouge-L cadence for final checkpoint selection.
  std::size_t eval_interval = 50;
  std::size_t smooth_window = 32;

  void validate() const;
  EstimatorConfig estimator() const;
  nlohmann::json to_json() const;
  static DistillConfig from_json(const nlohmann::json& j);
  std::string fingerprint() const;
};

struct TraceRecord {
  std::size_t step = 0;
  double reverse_kld = 0.0;  // exact, averaged over task prompts
  double forward_kld = 0.0;
  double smoothed_kld = 0.0;  // trailing mean of reverse_kld over smooth_window records
  double single_norm = 0.0;
  double long_norm = 0.0;
  double pt_norm = 0.0;
  double variance_trace = 0.0;
  double mean_response_length = 0.0;
  double wall_seconds = 0.0;

  nlohmann::json to_json() const;
};

struct DistillResult {
  Checkpoint selected;  // highest validation Rouge-L among evaluations
  Checkpoint last;      // last finite model
  std::vector<TraceRecord> trace;
  std::vector<std::pair<std::size_t, double>> evals;  // (step, validation Rouge-L)
  bool aborted = false;
  std::string diagnostics;
};

/// One parameter update from a minibatch: theta -= lr * (single + long + pt).
/// Returns the estimate with parts populated (pt zero when disabled).
GradientEstimate minillm_step(TabularLM& student, const TabularLM& teacher, std::span<const Trajectory> batch,
                              std::span<const Sequence> pt_batch, const DistillConfig& cfg);

DistillResult minillm_train(const Checkpoint& student_init, const TabularLM& teacher, const SyntheticTask& task,
                            const DistillConfig& cfg);

// ---------------------------------------------------------------------------
// evaluation

struct EvalOptions {
  std::vector<std::uint64_t> seeds{10, 20, 30, 40, 50};
  std::size_t exposure_length = 20;
  Token label_a = 1;
  Token label_b = 2;
};

/// Exact KLDs to the teacher, test Rouge-L and distinct-4 averaged over the
/// evaluation seeds, test LM loss, calibration ECE, and exact ExAccErr.
MetricReport evaluate_model(const TabularLM& model, const TabularLM& teacher, const SyntheticTask& task,
                            std::uint64_t eval_seed, const EvalOptions& opts = {});

}  // namespace revkd
