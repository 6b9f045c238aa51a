#include "revkd/artifacts.hpp"

#include "revkd/report.hpp"

#ifndef REVKD_VERSION
#define REVKD_VERSION "unknown"
#endif

namespace revkd {

std::string curve_to_csv(const ExposureBiasCurve& c) {
  std::string out = "l,regret,step_error,exaccerr_pct,defined,regret_se,step_error_se,n_rollouts\n";
  for (std::size_t i = 0; i < c.lengths.size(); ++i) {
    out += std::to_string(c.lengths[i]) + "," + format_double(c.regret[i]) + "," + format_double(c.step_error[i]) +
           "," + format_double(c.exaccerr[i]) + "," + (c.defined[i] ? "1" : "0") + "," +
           format_double(c.regret_se[i]) + "," + format_double(c.step_error_se[i]) + "," +
           std::to_string(c.n_rollouts) + "\n";
  }
  return out;
}

std::string epochs_to_csv(std::span<const EpochRecord> history) {
  std::string out = "epoch,train_loss,valid_loss,valid_rouge\n";
  for (const auto& e : history) {
    out += std::to_string(e.epoch) + "," + format_double(e.train_loss) + "," + format_double(e.valid_loss) + "," +
           format_double(e.valid_rouge) + "\n";
  }
  return out;
}

std::string trace_to_jsonl(std::span<const TraceRecord> trace) {
  std::string out;
  for (const auto& r : trace) out += r.to_json().dump() + "\n";
  return out;
}

std::string toy_density_csv(const toy::Mixture1D& target, const toy::Gaussian1D& forward_fit,
                            const toy::Gaussian1D& reverse_fit, const toy::Quadrature& grid, std::size_t n) {
  std::string out = "x,target,forward_fit,reverse_fit\n";
  for (std::size_t i = 0; i < n; ++i) {
    const double x = grid.lo + (grid.hi - grid.lo) * static_cast<double>(i) / static_cast<double>(n - 1);
    out += format_double(x) + "," + format_double(target.pdf(x)) + "," + format_double(forward_fit.pdf(x)) + "," +
           format_double(reverse_fit.pdf(x)) + "\n";
  }
  return out;
}

std::filesystem::path unique_run_dir(const std::filesystem::path& base) {
  if (!std::filesystem::exists(base)) return base;
  for (std::size_t i = 1;; ++i) {
    std::filesystem::path p = base;
    p += "-" + std::to_string(i);
    if (!std::filesystem::exists(p)) return p;
  }
}

nlohmann::json RunManifest::to_json() const {
  return {{"command", command},       {"config_path", config_path}, {"config", config},
          {"seed", seed},             {"output_dir", output_dir},   {"version", version},
          {"start_time", start_time}, {"end_time", end_time},       {"exit_status", exit_status}};
}

std::string build_version() { return REVKD_VERSION; }

}  // namespace revkd
