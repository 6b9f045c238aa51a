#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "revkd/toy_gaussian.hpp"
#include "revkd/trainer.hpp"

namespace revkd {

struct ExposureOptions {
  std::size_t max_l = 20;
  std::size_t rollouts_per_prompt = 10;
  /// Prefix expectations from exact marginals instead of sampled prefixes.
  bool exact = false;
};

struct ToyConfig {
  toy::Mixture1D target = toy::Mixture1D::default_bimodal();
  toy::Quadrature grid;
  double lr = 0.05;
  std::size_t steps = 5000;
  toy::Gaussian1D forward_init{3.0, 1.0};
  toy::Gaussian1D reverse_init{3.0, 1.0};
  /// Points of the density CSV.
  std::size_t density_points = 601;
};

/// Configuration shared by every command. JSON layout (all sections and keys
/// optional, unknown keys rejected):
///   {"seed": u64,
///    "task":    {vocab_size, eos, teacher_order, student_order, n_prompts, n_train,
///                n_valid, n_test, n_pt, max_len, gt_logit_scale, teacher_smoothing,
///                allow_no_gap},
///    "sft":     {lr, epochs, batch_size},
///    "kd":      {lr, epochs, batch_size, mix_rate},
///    "seqkd":   {lr, epochs, batch_size, n_generated},
///    "distill": {alpha, clip_eps, lr, batch, collect_size, inner_epochs, steps,
///                length_norm, weight_mode, single_step_decomp, pt_loss,
///                eval_interval, smooth_window},
///    "eval":    {seeds, exposure_length, label_a, label_b},
///    "exposure":{max_l, rollouts_per_prompt, exact},
///    "toy":     {target: [{weight, mu, sigma}], grid: {lo, hi, n_points}, lr, steps,
///                forward_init: {mu, sigma}, reverse_init: {mu, sigma}, density_points}}
struct RunConfig {
  std::uint64_t seed = 0;
  TaskSpec task;
  SupervisedOptions sft{1.0, 30, 64, 0};
  SupervisedOptions kd{1.0, 30, 64, 0};
  double kd_mix_rate = 0.5;
  SupervisedOptions seqkd{1.0, 30, 64, 0};
  std::size_t seqkd_n_generated = 4000;
  DistillConfig distill;
  EvalOptions eval;
  ExposureOptions exposure;
  ToyConfig toy;

  /// Throws ConfigError naming the offending field.
  static RunConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
  std::string fingerprint() const;
  /// Pushes the run seed into derived settings (distill seed, eval seeds).
  void resolve_seeds();
};

/// Parses a config file; a missing file or malformed JSON is a ConfigError.
RunConfig load_run_config(const std::filesystem::path& path);

}  // namespace revkd
