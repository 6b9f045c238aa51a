#include "revkd/run_config.hpp"

#include <fstream>
#include <sstream>

#include "revkd/errors.hpp"
#include "revkd/report.hpp"

namespace revkd {

namespace {

using nlohmann::json;

void require_object(const json& j, const std::string& path) {
  if (!j.is_object()) throw ConfigError(path + ": expected an object");
}

template <typename T>
T get(const json& v, const std::string& path) {
  if constexpr (std::is_same_v<T, bool>) {
    if (!v.is_boolean()) throw ConfigError(path + ": expected a boolean");
  } else if constexpr (std::is_floating_point_v<T>) {
    if (!v.is_number()) throw ConfigError(path + ": expected a number");
  } else if constexpr (std::is_integral_v<T>) {
    if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<long long>() < 0)) {
      throw ConfigError(path + ": expected a non-negative integer");
    }
  }
  return v.get<T>();
}

[[noreturn]] void unknown(const std::string& path) { throw ConfigError(path + ": unknown key"); }

TaskSpec parse_task(const json& j) {
  require_object(j, "task");
  TaskSpec t;
  for (const auto& [k, v] : j.items()) {
    const std::string p = "task." + k;
    if (k == "vocab_size") t.vocab_size = get<std::size_t>(v, p);
    else if (k == "eos") t.eos = get<Token>(v, p);
    else if (k == "teacher_order") t.teacher_order = get<std::size_t>(v, p);
    else if (k == "student_order") t.student_order = get<std::size_t>(v, p);
    else if (k == "n_prompts") t.n_prompts = get<std::size_t>(v, p);
    else if (k == "n_train") t.n_train = get<std::size_t>(v, p);
    else if (k == "n_valid") t.n_valid = get<std::size_t>(v, p);
    else if (k == "n_test") t.n_test = get<std::size_t>(v, p);
    else if (k == "n_pt") t.n_pt = get<std::size_t>(v, p);
    else if (k == "max_len") t.max_len = get<std::size_t>(v, p);
    else if (k == "gt_logit_scale") t.gt_logit_scale = get<double>(v, p);
    else if (k == "teacher_smoothing") t.teacher_smoothing = get<double>(v, p);
    else if (k == "allow_no_gap") t.allow_no_gap = get<bool>(v, p);
    else unknown(p);
  }
  try {
    t.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("task: ") + e.what());
  }
  return t;
}

void parse_supervised(const json& j, const std::string& section, SupervisedOptions& o, double* mix,
                      std::size_t* n_generated) {
  require_object(j, section);
  for (const auto& [k, v] : j.items()) {
    const std::string p = section + "." + k;
    if (k == "lr") o.lr = get<double>(v, p);
    else if (k == "epochs") o.epochs = get<std::size_t>(v, p);
    else if (k == "batch_size") o.batch_size = get<std::size_t>(v, p);
    else if (k == "mix_rate" && mix) *mix = get<double>(v, p);
    else if (k == "n_generated" && n_generated) *n_generated = get<std::size_t>(v, p);
    else unknown(p);
  }
  if (!(o.lr > 0.0) || !std::isfinite(o.lr)) throw ConfigError(section + ".lr: must be positive");
  if (o.batch_size < 1) throw ConfigError(section + ".batch_size: must be >= 1");
  if (mix && !(*mix >= 0.0 && *mix <= 1.0)) throw ConfigError(section + ".mix_rate: must be in [0, 1]");
}

toy::Gaussian1D parse_gaussian(const json& j, const std::string& path) {
  require_object(j, path);
  toy::Gaussian1D g;
  for (const auto& [k, v] : j.items()) {
    if (k == "mu") g.mu = get<double>(v, path + ".mu");
    else if (k == "sigma") g.sigma = get<double>(v, path + ".sigma");
    else unknown(path + "." + k);
  }
  if (!(g.sigma > 0.0)) throw ConfigError(path + ".sigma: must be positive");
  return g;
}

ToyConfig parse_toy(const json& j) {
  require_object(j, "toy");
  ToyConfig t;
  for (const auto& [k, v] : j.items()) {
    const std::string p = "toy." + k;
    if (k == "target") {
      if (!v.is_array()) throw ConfigError(p + ": expected an array");
      t.target.components.clear();
      for (std::size_t i = 0; i < v.size(); ++i) {
        const std::string pi = p + "[" + std::to_string(i) + "]";
        require_object(v[i], pi);
        toy::Mixture1D::Component c{1.0, {}};
        for (const auto& [ck, cv] : v[i].items()) {
          if (ck == "weight") c.weight = get<double>(cv, pi + ".weight");
          else if (ck == "mu") c.g.mu = get<double>(cv, pi + ".mu");
          else if (ck == "sigma") c.g.sigma = get<double>(cv, pi + ".sigma");
          else unknown(pi + "." + ck);
        }
        t.target.components.push_back(c);
      }
      try {
        t.target.validate();
      } catch (const ConfigError& e) {
        throw ConfigError(p + ": " + e.what());
      }
    } else if (k == "grid") {
      require_object(v, p);
      for (const auto& [gk, gv] : v.items()) {
        if (gk == "lo") t.grid.lo = get<double>(gv, p + ".lo");
        else if (gk == "hi") t.grid.hi = get<double>(gv, p + ".hi");
        else if (gk == "n_points") t.grid.n_points = get<std::size_t>(gv, p + ".n_points");
        else unknown(p + "." + gk);
      }
      try {
        t.grid.validate();
      } catch (const ConfigError& e) {
        throw ConfigError(p + ": " + e.what());
      }
    } else if (k == "lr") t.lr = get<double>(v, p);
    else if (k == "steps") t.steps = get<std::size_t>(v, p);
    else if (k == "forward_init") t.forward_init = parse_gaussian(v, p);
    else if (k == "reverse_init") t.reverse_init = parse_gaussian(v, p);
    else if (k == "density_points") t.density_points = get<std::size_t>(v, p);
    else unknown(p);
  }
  if (!(t.lr > 0.0)) throw ConfigError("toy.lr: must be positive");
  if (t.density_points < 2) throw ConfigError("toy.density_points: must be >= 2");
  return t;
}

json gaussian_json(const toy::Gaussian1D& g) { return {{"mu", g.mu}, {"sigma", g.sigma}}; }

}  // namespace

RunConfig RunConfig::from_json(const json& j) {
  require_object(j, "config");
  RunConfig c;
  for (const auto& [k, v] : j.items()) {
    if (k == "seed") c.seed = get<std::uint64_t>(v, "seed");
    else if (k == "task") c.task = parse_task(v);
    else if (k == "sft") parse_supervised(v, "sft", c.sft, nullptr, nullptr);
    else if (k == "kd") parse_supervised(v, "kd", c.kd, &c.kd_mix_rate, nullptr);
    else if (k == "seqkd") parse_supervised(v, "seqkd", c.seqkd, nullptr, &c.seqkd_n_generated);
    else if (k == "distill") {
      require_object(v, "distill");
      if (v.contains("seed")) throw ConfigError("distill.seed: unknown key (the run seed is used)");
      try {
        c.distill = DistillConfig::from_json(v);
      } catch (const ConfigError& e) {
        const std::string msg = e.what();
        throw ConfigError(msg.rfind("distill", 0) == 0 ? msg : "distill." + msg);
      }
    } else if (k == "eval") {
      require_object(v, "eval");
      for (const auto& [ek, ev] : v.items()) {
        const std::string p = "eval." + ek;
        if (ek == "seeds") {
          if (!ev.is_array() || ev.empty()) throw ConfigError(p + ": expected a non-empty array");
          c.eval.seeds.clear();
          for (const auto& s : ev) c.eval.seeds.push_back(get<std::uint64_t>(s, p));
        } else if (ek == "exposure_length") c.eval.exposure_length = get<std::size_t>(ev, p);
        else if (ek == "label_a") c.eval.label_a = get<Token>(ev, p);
        else if (ek == "label_b") c.eval.label_b = get<Token>(ev, p);
        else unknown(p);
      }
    } else if (k == "exposure") {
      require_object(v, "exposure");
      for (const auto& [ek, ev] : v.items()) {
        const std::string p = "exposure." + ek;
        if (ek == "max_l") c.exposure.max_l = get<std::size_t>(ev, p);
        else if (ek == "rollouts_per_prompt") c.exposure.rollouts_per_prompt = get<std::size_t>(ev, p);
        else if (ek == "exact") c.exposure.exact = get<bool>(ev, p);
        else unknown(p);
      }
      if (c.exposure.max_l < 1) throw ConfigError("exposure.max_l: must be >= 1");
      if (c.exposure.rollouts_per_prompt < 1) throw ConfigError("exposure.rollouts_per_prompt: must be >= 1");
    } else if (k == "toy") c.toy = parse_toy(v);
    else unknown(k);
  }
  c.resolve_seeds();
  return c;
}

json RunConfig::to_json() const {
  json target = json::array();
  for (const auto& comp : toy.target.components) {
    target.push_back({{"weight", comp.weight}, {"mu", comp.g.mu}, {"sigma", comp.g.sigma}});
  }
  json distill_json = distill.to_json();
  distill_json.erase("seed");
  return {{"seed", seed},
          {"task",
           {{"vocab_size", task.vocab_size},
            {"eos", task.eos},
            {"teacher_order", task.teacher_order},
            {"student_order", task.student_order},
            {"n_prompts", task.n_prompts},
            {"n_train", task.n_train},
            {"n_valid", task.n_valid},
            {"n_test", task.n_test},
            {"n_pt", task.n_pt},
            {"max_len", task.max_len},
            {"gt_logit_scale", task.gt_logit_scale},
            {"teacher_smoothing", task.teacher_smoothing},
            {"allow_no_gap", task.allow_no_gap}}},
          {"sft", {{"lr", sft.lr}, {"epochs", sft.epochs}, {"batch_size", sft.batch_size}}},
          {"kd", {{"lr", kd.lr}, {"epochs", kd.epochs}, {"batch_size", kd.batch_size}, {"mix_rate", kd_mix_rate}}},
          {"seqkd",
           {{"lr", seqkd.lr},
            {"epochs", seqkd.epochs},
            {"batch_size", seqkd.batch_size},
            {"n_generated", seqkd_n_generated}}},
          {"distill", distill_json},
          {"eval",
           {{"seeds", eval.seeds},
            {"exposure_length", eval.exposure_length},
            {"label_a", eval.label_a},
            {"label_b", eval.label_b}}},
          {"exposure",
           {{"max_l", exposure.max_l}, {"rollouts_per_prompt", exposure.rollouts_per_prompt}, {"exact", exposure.exact}}},
          {"toy",
           {{"target", target},
            {"grid", {{"lo", toy.grid.lo}, {"hi", toy.grid.hi}, {"n_points", toy.grid.n_points}}},
            {"lr", toy.lr},
            {"steps", toy.steps},
            {"forward_init", gaussian_json(toy.forward_init)},
            {"reverse_init", gaussian_json(toy.reverse_init)},
            {"density_points", toy.density_points}}}};
}

std::string RunConfig::fingerprint() const { return revkd::fingerprint(to_json().dump()); }

void RunConfig::resolve_seeds() {
  distill.seed = Rng(seed).substream("distill").next_u64();
  const std::uint64_t eval_seed = Rng(seed).substream("eval").next_u64();
  sft.eval_seed = kd.eval_seed = seqkd.eval_seed = eval_seed;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  json j;
  try {
    j = json::parse(ss.str());
  } catch (const json::exception& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return RunConfig::from_json(j);
}

}  // namespace revkd
