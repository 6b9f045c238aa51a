// revkd: experiment driver for reverse-KLD distillation on tabular models.
// Exit codes: 0 success, 1 runtime failure, 2 usage or config error.

#include <filesystem>
#include <functional>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "revkd/artifacts.hpp"
#include "revkd/errors.hpp"
#include "revkd/model_io.hpp"
#include "revkd/parallel.hpp"
#include "revkd/report.hpp"
#include "revkd/run_config.hpp"
#include "revkd/verify.hpp"

namespace fs = std::filesystem;
using namespace revkd;

namespace {

constexpr int kOk = 0;
constexpr int kFailure = 1;
constexpr int kUsage = 2;

struct Options {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string suite = "all";
  std::string method = "minillm";
  std::size_t threads = 1;
  std::vector<std::string> checkpoints;
};

RunConfig resolve_config(const Options& o) {
  RunConfig cfg = o.config_path.empty() ? RunConfig{} : load_run_config(o.config_path);
  if (o.seed) cfg.seed = *o.seed;
  cfg.resolve_seeds();
  return cfg;
}

// Creates a fresh run directory, runs `body` in it and records the manifest.
int run_in_dir(const std::string& command, const Options& o, const RunConfig& cfg, const fs::path& base,
               const std::function<int(const fs::path&)>& body) {
  const fs::path dir = unique_run_dir(base);
  fs::create_directories(dir);
  RunManifest m;
  m.command = command;
  m.config_path = o.config_path;
  m.config = cfg.to_json();
  m.seed = cfg.seed;
  m.output_dir = dir.string();
  m.version = build_version();
  m.start_time = utc_timestamp();
  write_file_atomic(dir / "config.json", m.config.dump(2) + "\n");

  int status = kOk;
  try {
    status = body(dir);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    status = kUsage;
  } catch (const TrainingAborted& e) {
    std::cerr << "training aborted: " << e.what() << "\n";
    status = kFailure;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    status = kFailure;
  }
  m.end_time = utc_timestamp();
  m.exit_status = status;
  write_file_atomic(dir / "manifest.json", m.to_json().dump(2) + "\n");
  std::cout << dir.string() << "\n";
  return status;
}

std::pair<SyntheticTask, TabularLM> build_task(const RunConfig& cfg) {
  Rng task_rng = Rng(cfg.seed).substream("task");
  return make_synthetic_task(cfg.task, task_rng);
}

void save_supervised(const SupervisedResult& r, const fs::path& dir) {
  write_file_atomic(dir / "epochs.csv", epochs_to_csv(r.history));
  save_checkpoint(r.best_loss, dir / "checkpoint_best_valid_loss.json");
}

int cmd_verify(const Options& o) {
  if (!is_known_suite(o.suite)) {
    std::cerr << "error: unknown suite '" << o.suite
              << "' (expected gradients, decomposition, importance, oracles, all)\n";
    return kUsage;
  }
  RunConfig cfg = resolve_config(o);
  return run_in_dir("verify", o, cfg, o.out.empty() ? "runs/verify" : o.out, [&](const fs::path& dir) {
    const VerifyReport r = run_verify(o.suite, cfg.seed);
    write_file_atomic(dir / "verify_report.jsonl", r.to_jsonl());
    std::size_t failed = 0;
    for (const auto& c : r.checks) {
      if (c.hard && !c.passed) ++failed;
    }
    std::cout << r.checks.size() << " checks, " << failed << " hard failures\n";
    return r.all_hard_passed() ? kOk : kFailure;
  });
}

int cmd_distill(const Options& o) {
  if (o.method != "sft" && o.method != "kd" && o.method != "seqkd" && o.method != "minillm") {
    std::cerr << "error: unknown method '" << o.method << "' (expected sft, kd, seqkd, minillm)\n";
    return kUsage;
  }
  RunConfig cfg = resolve_config(o);
  return run_in_dir("distill", o, cfg, o.out.empty() ? "runs/distill" : o.out, [&](const fs::path& dir) {
    const auto [task, teacher] = build_task(cfg);
    save_model(teacher, dir / "teacher.json");
    const Rng root(cfg.seed);
    const TabularLM init(task.vocab(), cfg.task.student_order);
    const std::string fp = cfg.fingerprint();

    Checkpoint final_ckpt;
    int status = kOk;
    if (o.method == "sft") {
      Rng rng = root.substream("sft");
      const auto r = sft_train(init, task, cfg.sft, rng);
      save_supervised(r, dir);
      final_ckpt = r.best_rouge;
    } else if (o.method == "kd") {
      Rng rng = root.substream("kd");
      const auto r = word_kd_train(init, teacher, task, cfg.kd, cfg.kd_mix_rate, rng);
      save_supervised(r, dir);
      final_ckpt = r.best_rouge;
    } else if (o.method == "seqkd") {
      Rng rng = root.substream("seqkd");
      const auto r = seqkd_train(init, teacher, task, cfg.seqkd_n_generated, cfg.seqkd, rng);
      save_supervised(r, dir);
      final_ckpt = r.best_rouge;
    } else {
      Rng rng = root.substream("sft");
      const auto sft = sft_train(init, task, cfg.sft, rng);
      write_file_atomic(dir / "sft_epochs.csv", epochs_to_csv(sft.history));
      save_checkpoint(sft.best_loss, dir / "checkpoint_sft_init.json");
      const auto r = minillm_train(sft.best_loss, teacher, task, cfg.distill);
      write_file_atomic(dir / "trace.jsonl", trace_to_jsonl(r.trace));
      std::string evals = "step,valid_rouge\n";
      for (const auto& [step, rouge] : r.evals) evals += std::to_string(step) + "," + format_double(rouge) + "\n";
      write_file_atomic(dir / "evals.csv", evals);
      if (r.aborted) {
        save_checkpoint(r.last, dir / "checkpoint_last_good.json");
        std::cerr << "training aborted: " << r.diagnostics << "\n";
        status = kFailure;
      } else {
        save_checkpoint(r.last, dir / "checkpoint_last.json");
      }
      final_ckpt = r.selected;
    }

    MetricReport metrics = evaluate_model(final_ckpt.model, teacher, task, Rng(cfg.seed).substream("eval").next_u64(),
                                          cfg.eval);
    metrics.config_fingerprint = fp;
    metrics.timestamp = utc_timestamp();
    metrics.validate();
    final_ckpt.metrics = metrics;
    final_ckpt.config_fingerprint = fp;
    save_checkpoint(final_ckpt, dir / "checkpoint_final.json");
    write_file_atomic(dir / "metrics.csv", to_csv(metrics));
    write_file_atomic(dir / "metrics.json", to_json(metrics).dump(2) + "\n");
    return status;
  });
}

int cmd_exposure_bias(const Options& o) {
  for (const auto& c : o.checkpoints) {
    if (!fs::exists(c)) {
      std::cerr << "error: checkpoint not found: " << c << "\n";
      return kUsage;
    }
  }
  RunConfig cfg = resolve_config(o);
  return run_in_dir("exposure-bias", o, cfg, o.out.empty() ? "runs/exposure_bias" : o.out, [&](const fs::path& dir) {
    const auto [task, teacher] = build_task(cfg);
    std::vector<Checkpoint> models;
    for (const auto& c : o.checkpoints) {
      Checkpoint ck;
      try {
        ck = load_checkpoint(c);
      } catch (const std::exception& e) {
        throw ConfigError("cannot load checkpoint " + c + ": " + e.what());
      }
      if (!(ck.model.vocab() == teacher.vocab())) {
        throw ConfigError("checkpoint " + c + " has a vocabulary incompatible with the task teacher");
      }
      models.push_back(std::move(ck));
    }
    const Rng root = Rng(cfg.seed).substream("exposure");
    nlohmann::json summary = nlohmann::json::array();
    bool any_defined = false;
    for (std::size_t i = 0; i < models.size(); ++i) {
      ExposureBiasCurve curve;
      if (cfg.exposure.exact) {
        curve = exposure_bias_curve_exact(models[i].model, teacher, task.prompts, cfg.exposure.max_l);
      } else {
        Rng rng = root.substream(static_cast<std::uint64_t>(i));
        curve = exposure_bias_curve(models[i].model, teacher, task.prompts, cfg.exposure.max_l,
                                    cfg.exposure.rollouts_per_prompt, rng);
      }
      const std::string name = "curve_" + std::to_string(i) + "_" + fs::path(o.checkpoints[i]).stem().string() + ".csv";
      write_file_atomic(dir / name, curve_to_csv(curve));
      bool defined = false;
      for (bool d : curve.defined) defined = defined || d;
      any_defined = any_defined || defined;
      const bool last_defined = !curve.defined.empty() && curve.defined.back();
      summary.push_back({{"checkpoint", o.checkpoints[i]},
                         {"curve", name},
                         {"l", cfg.exposure.max_l},
                         {"exaccerr_pct", last_defined ? json_number(curve.exaccerr.back()) : nlohmann::json(nullptr)},
                         {"defined", last_defined}});
    }
    write_file_atomic(dir / "summary.json", summary.dump(2) + "\n");
    if (!any_defined && !models.empty()) {
      std::cerr << "warning: every curve point is undefined (zero oracle-prefix error)\n";
    }
    return kOk;
  });
}

int cmd_toy_gaussian(const Options& o) {
  RunConfig cfg = resolve_config(o);
  return run_in_dir("toy-gaussian", o, cfg, o.out.empty() ? "runs/toy_gaussian" : o.out, [&](const fs::path& dir) {
    const auto& t = cfg.toy;
    const auto fwd = toy::fit_forward(t.target, t.grid, t.forward_init, t.lr, t.steps);
    const auto rev = toy::fit_reverse(t.target, t.grid, t.reverse_init, t.lr, t.steps);
    const auto mm = toy::moment_match(t.target);
    auto fit_json = [](const toy::FitResult& f) {
      return nlohmann::json{{"mu", f.fit.mu},
                            {"sigma", f.fit.sigma},
                            {"objective_nats", json_number(f.objective)},
                            {"grad_norm", f.grad_norm},
                            {"steps", f.steps}};
    };
    const nlohmann::json out{{"forward", fit_json(fwd)},
                             {"reverse", fit_json(rev)},
                             {"moment_match", {{"mu", mm.mu}, {"sigma", mm.sigma}}}};
    write_file_atomic(dir / "fit.json", out.dump(2) + "\n");
    write_file_atomic(dir / "density.csv", toy_density_csv(t.target, fwd.fit, rev.fit, t.grid, t.density_points));
    return kOk;
  });
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Reverse-KLD knowledge distillation on tabular language models"};
  app.require_subcommand(1);
  Options o;

  auto add_common = [&](CLI::App* sc) {
    sc->add_option("--config", o.config_path, "JSON run config");
    sc->add_option("--seed", o.seed, "Run seed (overrides the config)");
    sc->add_option("--out", o.out, "Run directory (suffixed -1, -2, ... if it exists)");
    sc->add_option("--threads", o.threads, "Worker threads for rollouts")->check(CLI::PositiveNumber);
  };
  auto* verify = app.add_subcommand("verify", "Run gradient and estimator property suites");
  add_common(verify);
  verify->add_option("--suite", o.suite, "gradients|decomposition|importance|oracles|all");

  auto* distill = app.add_subcommand("distill", "Train a student on the synthetic task");
  add_common(distill);
  distill->add_option("--method", o.method, "sft|kd|seqkd|minillm");

  auto* exposure = app.add_subcommand("exposure-bias", "ExAccErr curves for saved checkpoints");
  add_common(exposure);
  exposure->add_option("--checkpoints", o.checkpoints, "Checkpoint files")->required()->expected(1, -1);

  auto* toy_cmd = app.add_subcommand("toy-gaussian", "Fit one Gaussian to a mixture by forward and reverse KLD");
  add_common(toy_cmd);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kUsage;
  }
  worker_threads() = o.threads;

  try {
    if (verify->parsed()) return cmd_verify(o);
    if (distill->parsed()) return cmd_distill(o);
    if (exposure->parsed()) return cmd_exposure_bias(o);
    return cmd_toy_gaussian(o);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
}
