#pragma once

#include <filesystem>
#include <span>
#include <string>

#include "json.hpp"
#include "revkd/metrics.hpp"
#include "revkd/toy_gaussian.hpp"
#include "revkd/trainer.hpp"

namespace revkd {

/// l,regret,step_error,exaccerr_pct,defined,regret_se,step_error_se,n_rollouts
std::string curve_to_csv(const ExposureBiasCurve& curve);
/// epoch,train_loss,valid_loss,valid_rouge
std::string epochs_to_csv(std::span<const EpochRecord> history);
/// One TraceRecord per line.
std::string trace_to_jsonl(std::span<const TraceRecord> trace);
/// x,target,forward_fit,reverse_fit on `n` evenly spaced points of the grid.
std::string toy_density_csv(const toy::Mixture1D& target, const toy::Gaussian1D& forward_fit,
                            const toy::Gaussian1D& reverse_fit, const toy::Quadrature& grid, std::size_t n);

/// `base` if it does not exist yet, otherwise the first free base-1, base-2, ...
std::filesystem::path unique_run_dir(const std::filesystem::path& base);

struct RunManifest {
  std::string command;
  std::string config_path;
  nlohmann::json config;
  std::uint64_t seed = 0;
  std::string output_dir;
  std::string version;
  std::string start_time;
  std::string end_time;
  int exit_status = 0;

  nlohmann::json to_json() const;
};

/// Version string baked in at build time.
std::string build_version();

}  // namespace revkd
