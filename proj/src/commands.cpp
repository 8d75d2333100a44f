#include "tepo/commands.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <mutex>
#include <sstream>
#include <thread>

#include "tepo/checkpoint.hpp"
#include "tepo/verify_suite.hpp"

namespace tepo::cli {

namespace fs = std::filesystem;

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read '" + p.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write '" + p.string() + "'");
  out << text;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) {
    const auto b = cur.find_first_not_of(" \t");
    const auto e = cur.find_last_not_of(" \t");
    if (b != std::string::npos) out.push_back(cur.substr(b, e - b + 1));
  }
  return out;
}

void apply_overrides(TrainConfig& c, const std::vector<std::string>& sets) {
  for (const auto& s : sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
    apply_setting(c, s.substr(0, eq), s.substr(eq + 1));
  }
}

double mean_of(const std::vector<double>& v) {
  if (v.empty()) return std::nan("");
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double std_of(const std::vector<double>& v) {
  if (v.size() < 2) return v.empty() ? std::nan("") : 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

std::string num(double v) { return std::isnan(v) ? "" : format_double(v); }

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

}  // namespace

fs::path output_root(const std::string& flag) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv("TEPO_LAB_OUT"); env && *env) return env;
  return "runs";
}

fs::path run_directory(const fs::path& out_root, const TrainConfig& config) {
  return out_root / config_hash(config) / std::to_string(config.seed);
}

RunOutcome execute_run(const TrainConfig& config, const fs::path& out_root, bool resume, bool quiet) {
  config.validate();
  RunOutcome out;
  out.dir = run_directory(out_root, config);
  fs::create_directories(out.dir);
  write_file(out.dir / "config.resolved", serialize_config(config));

  std::optional<TrainerState> start;
  const fs::path ckpt = out.dir / "checkpoint.bin";
  const auto mode = resume && fs::exists(ckpt) ? std::ios::app : std::ios::trunc;
  if (mode == std::ios::app) start = load_checkpoint(ckpt);

  std::ofstream metrics(out.dir / "metrics.jsonl", std::ios::binary | mode);
  std::ofstream evals(out.dir / "eval.jsonl", std::ios::binary | mode);
  if (!metrics || !evals) throw std::runtime_error("cannot open run files in '" + out.dir.string() + "'");

  TrainCallbacks cb;
  cb.on_step = [&](const StepMetrics& m) {
    metrics << m.to_json() << '\n';
    metrics.flush();
    out.final_reward = m.mean_reward;
    out.final_entropy = m.mean_entropy;
    if (!quiet) {
      std::cout << "step " << m.step << " reward " << format_double(m.mean_reward) << " entropy "
                << format_double(m.mean_entropy) << " clip " << format_double(m.clip_fraction) << '\n';
    }
  };
  cb.on_eval = [&](std::int64_t step, double acc) {
    nlohmann::ordered_json j;
    j["step"] = step;
    j["accuracy"] = acc;
    evals << j.dump() << '\n';
    if (!quiet) std::cout << "eval step " << step << " accuracy " << format_double(acc) << '\n';
  };

  try {
    out.state = train(config, cb, std::move(start));
  } catch (const TrainingAborted& e) {
    write_file(out.dir / "diagnostic.txt", std::string(e.what()) + "\n\nconfig:\n" + serialize_config(config));
    throw;
  }
  save_checkpoint(out.state, ckpt);
  std::ostringstream summary;
  summary << "config_hash,seed,best_eval_accuracy,steps_to_threshold\n"
          << config_hash(config) << ',' << config.seed << ',' << format_double(out.state.best_eval) << ','
          << out.state.steps_to_threshold << '\n';
  write_file(out.dir / "summary.csv", summary.str());
  return out;
}

// --- ablation -----------------------------------------------------------------------

std::string to_string(Axis a) {
  switch (a) {
    case Axis::kl_beta_sweep: return "kl_beta_sweep";
    case Axis::entropy_bonus_sweep: return "entropy_bonus_sweep";
    case Axis::is_mode_sweep: return "is_mode_sweep";
    case Axis::agg_mode_sweep: return "agg_mode_sweep";
    case Axis::mask_condition_sweep: return "mask_condition_sweep";
  }
  return "?";
}

Axis axis_from_string(const std::string& s) {
  for (Axis a : {Axis::kl_beta_sweep, Axis::entropy_bonus_sweep, Axis::is_mode_sweep, Axis::agg_mode_sweep,
                 Axis::mask_condition_sweep}) {
    if (to_string(a) == s) return a;
  }
  throw ConfigError("grid.axis: unknown axis '" + s + "'");
}

std::vector<std::string> default_axis_values(Axis axis) {
  switch (axis) {
    case Axis::kl_beta_sweep: return {"1", "0.1", "0.01", "0.001", "0.0001"};
    case Axis::entropy_bonus_sweep: return {"0.01", "-0.01"};
    case Axis::is_mode_sweep: return {"token", "none", "cispo_stopgrad", "prefix", "sequence_geo"};
    case Axis::agg_mode_sweep: return {"token_mean", "seq_mean_token_mean", "seq_mean_token_sum"};
    case Axis::mask_condition_sweep: return {"off", "neg_adv_entropy_up", "union", "pos_adv_entropy_down"};
  }
  return {};
}

void apply_axis_value(TrainConfig& c, Axis axis, const std::string& value) {
  switch (axis) {
    case Axis::kl_beta_sweep: apply_setting(c, "objective.kl.beta", value); break;
    case Axis::entropy_bonus_sweep: apply_setting(c, "objective.entropy_bonus.coef", value); break;
    case Axis::is_mode_sweep: apply_setting(c, "objective.is_mode", value); break;
    case Axis::agg_mode_sweep: apply_setting(c, "objective.agg_mode", value); break;
    case Axis::mask_condition_sweep:
      if (value == "off") {
        c.objective.kl.mode = KlMode::off;
      } else {
        c.objective.kl.mode = KlMode::masked;
        apply_setting(c, "objective.kl.mask_condition", value);
      }
      break;
  }
}

AblationGrid load_grid(const fs::path& path) {
  if (!fs::exists(path)) throw ConfigError("grid file '" + path.string() + "' does not exist");
  AblationGrid g;
  g.name = path.stem().string();
  const auto kv = parse_key_values(read_file(path), path.string());
  bool have_axis = false;
  bool have_values = false;
  for (const auto& [k, v] : kv) {
    if (k == "grid.base") g.base = load_config(path.parent_path() / v);
  }
  for (const auto& [k, v] : kv) {
    if (k == "grid.base") continue;
    if (k == "grid.name") {
      g.name = v;
    } else if (k == "grid.axis") {
      g.axis = axis_from_string(v);
      have_axis = true;
    } else if (k == "grid.values") {
      g.values = split(v, ',');
      have_values = true;
    } else if (k == "grid.seeds") {
      g.seeds.clear();
      for (const auto& s : split(v, ',')) {
        TrainConfig probe;
        apply_setting(probe, "train.seed", s);
        g.seeds.push_back(probe.seed);
      }
    } else if (k == "grid.cap") {
      g.cap = std::stoi(v);
    } else if (k == "grid.workers") {
      g.workers = std::stoi(v);
    } else if (k.rfind("grid.", 0) == 0) {
      throw ConfigError("unknown grid key '" + k + "'");
    } else {
      apply_setting(g.base, k, v);
    }
  }
  if (!have_axis) throw ConfigError(path.string() + ": grid.axis is required");
  if (!have_values) g.values = default_axis_values(g.axis);
  if (g.values.empty()) throw ConfigError(path.string() + ": grid.values is empty");
  if (g.seeds.empty()) throw ConfigError(path.string() + ": grid.seeds is empty");
  if (g.run_count() > static_cast<std::size_t>(g.cap)) {
    throw ConfigError(path.string() + ": " + std::to_string(g.run_count()) + " runs exceed grid.cap " +
                      std::to_string(g.cap));
  }
  for (const auto& v : g.values) {
    TrainConfig c = g.base;
    apply_axis_value(c, g.axis, v);
    c.validate();
  }
  return g;
}

std::vector<CellResult> run_grid(const AblationGrid& grid, const fs::path& out_root) {
  std::vector<CellResult> cells(grid.values.size());
  struct Job {
    std::size_t cell;
    TrainConfig config;
  };
  std::vector<Job> jobs;
  for (std::size_t c = 0; c < grid.values.size(); ++c) {
    TrainConfig cfg = grid.base;
    apply_axis_value(cfg, grid.axis, grid.values[c]);
    cells[c].value = grid.values[c];
    cells[c].config_hash = config_hash(cfg);
    for (auto s : grid.seeds) {
      cfg.seed = s;
      jobs.push_back({c, cfg});
    }
  }
  std::vector<std::optional<RunOutcome>> outcomes(jobs.size());
  std::vector<std::string> errors(jobs.size());
  std::atomic<std::size_t> next{0};
  const unsigned hw = std::max(1u, std::thread::hardware_concurrency());
  const unsigned workers =
      grid.workers > 0 ? static_cast<unsigned>(grid.workers) : std::min(hw, 4u);
  auto worker = [&] {
    for (std::size_t j; (j = next.fetch_add(1)) < jobs.size();) {
      try {
        outcomes[j] = execute_run(jobs[j].config, out_root);
      } catch (const std::exception& e) {
        errors[j] = e.what();
      }
    }
  };
  std::vector<std::thread> pool;
  for (unsigned w = 0; w < std::min<std::size_t>(workers, jobs.size()); ++w) pool.emplace_back(worker);
  for (auto& t : pool) t.join();

  for (std::size_t j = 0; j < jobs.size(); ++j) {
    auto& cell = cells[jobs[j].cell];
    ++cell.runs;
    if (!outcomes[j]) {
      ++cell.failed;
      if (cell.error.empty()) cell.error = "seed " + std::to_string(jobs[j].config.seed) + ": " + errors[j];
      continue;
    }
    const auto& o = *outcomes[j];
    cell.best_eval.push_back(o.state.best_eval);
    if (o.state.steps_to_threshold >= 0) {
      cell.steps_to_threshold.push_back(static_cast<double>(o.state.steps_to_threshold));
    }
    cell.final_reward.push_back(o.final_reward);
    cell.final_entropy.push_back(o.final_entropy);
  }
  return cells;
}

std::string comparison_csv(const AblationGrid& grid, const std::vector<CellResult>& cells) {
  std::ostringstream os;
  os << "grid,axis,value,config_hash,runs,failed,best_eval_accuracy_mean,best_eval_accuracy_std,"
        "best_eval_accuracy_min,best_eval_accuracy_max,reached_threshold,steps_to_threshold_mean,"
        "steps_to_threshold_std,final_mean_reward_mean,final_mean_reward_std,final_mean_entropy_mean,"
        "final_mean_entropy_std,error\n";
  for (const auto& c : cells) {
    const auto [mn, mx] = c.best_eval.empty()
                              ? std::pair{std::nan(""), std::nan("")}
                              : std::pair{*std::min_element(c.best_eval.begin(), c.best_eval.end()),
                                          *std::max_element(c.best_eval.begin(), c.best_eval.end())};
    os << csv_field(grid.name) << ',' << to_string(grid.axis) << ',' << csv_field(c.value) << ','
       << c.config_hash << ',' << c.runs << ',' << c.failed << ',' << num(mean_of(c.best_eval)) << ','
       << num(std_of(c.best_eval)) << ',' << num(mn) << ',' << num(mx) << ',' << c.steps_to_threshold.size()
       << ',' << num(mean_of(c.steps_to_threshold)) << ',' << num(std_of(c.steps_to_threshold)) << ','
       << num(mean_of(c.final_reward)) << ',' << num(std_of(c.final_reward)) << ','
       << num(mean_of(c.final_entropy)) << ',' << num(std_of(c.final_entropy)) << ',' << csv_field(c.error)
       << '\n';
  }
  return os.str();
}

// --- export -------------------------------------------------------------------------

std::size_t export_runs(const std::vector<fs::path>& inputs, const fs::path& out) {
  std::vector<fs::path> runs;
  for (const auto& in : inputs) {
    if (!fs::exists(in)) throw std::runtime_error("export: '" + in.string() + "' does not exist");
    if (fs::exists(in / "metrics.jsonl")) {
      runs.push_back(in);
      continue;
    }
    for (const auto& e : fs::recursive_directory_iterator(in)) {
      if (e.is_regular_file() && e.path().filename() == "metrics.jsonl") runs.push_back(e.path().parent_path());
    }
  }
  std::sort(runs.begin(), runs.end());
  runs.erase(std::unique(runs.begin(), runs.end()), runs.end());
  if (runs.empty()) throw std::runtime_error("export: no run directories (metrics.jsonl) found");

  fs::create_directories(out);
  std::ostringstream metrics, evals, summary;
  metrics << "config_hash,seed,step,mean_reward,mean_entropy,clip_fraction,grad_norm,mean_kl,"
             "masked_token_fraction,filtered_prompt_fraction,wall_ms\n";
  evals << "config_hash,seed,step,accuracy\n";
  summary << "config_hash,seed,best_eval_accuracy,steps_to_threshold\n";
  nlohmann::ordered_json index = nlohmann::ordered_json::array();

  for (const auto& dir : runs) {
    for (const char* required : {"metrics.jsonl", "summary.csv", "config.resolved"}) {
      if (!fs::exists(dir / required)) {
        throw std::runtime_error("export: run '" + dir.string() + "' is missing " + required);
      }
    }
    std::istringstream ml(read_file(dir / "metrics.jsonl"));
    std::string line, hash;
    std::uint64_t seed = 0;
    std::size_t steps = 0;
    while (std::getline(ml, line)) {
      if (line.empty()) continue;
      const auto m = StepMetrics::from_json(line);
      hash = m.config_hash;
      seed = m.seed;
      ++steps;
      metrics << m.config_hash << ',' << m.seed << ',' << m.step << ',' << format_double(m.mean_reward) << ','
              << format_double(m.mean_entropy) << ',' << format_double(m.clip_fraction) << ','
              << format_double(m.grad_norm) << ',' << format_double(m.mean_kl) << ','
              << format_double(m.masked_token_fraction) << ',' << format_double(m.filtered_prompt_fraction)
              << ',' << format_double(m.wall_ms) << '\n';
    }
    const TrainConfig cfg = config_from_text(read_file(dir / "config.resolved"), (dir / "config.resolved").string());
    if (hash.empty()) {
      hash = config_hash(cfg);
      seed = cfg.seed;
    }
    if (fs::exists(dir / "eval.jsonl")) {
      std::istringstream el(read_file(dir / "eval.jsonl"));
      while (std::getline(el, line)) {
        if (line.empty()) continue;
        const auto j = nlohmann::json::parse(line);
        evals << hash << ',' << seed << ',' << j.at("step").get<std::int64_t>() << ','
              << format_double(j.at("accuracy").get<double>()) << '\n';
      }
    }
    std::istringstream sl(read_file(dir / "summary.csv"));
    std::getline(sl, line);  // header
    if (std::getline(sl, line)) summary << line << '\n';

    nlohmann::ordered_json r;
    r["config_hash"] = hash;
    r["seed"] = seed;
    r["run_dir"] = dir.string();
    r["steps"] = steps;
    r["config"] = config_to_map(cfg);
    index.push_back(r);
  }
  write_file(out / "metrics.csv", metrics.str());
  write_file(out / "eval.csv", evals.str());
  write_file(out / "summary.csv", summary.str());
  write_file(out / "runs.json", index.dump(2) + "\n");
  return runs.size();
}

// --- CLI ----------------------------------------------------------------------------

namespace {

TrainConfig load_with_overrides(const std::string& path, const std::vector<std::string>& sets) {
  TrainConfig c;
  if (!path.empty()) {
    if (!fs::exists(path)) throw UsageError("config file '" + path + "' does not exist");
    c = load_config(path);
  }
  apply_overrides(c, sets);
  return c;
}

int guarded(const std::function<int()>& body) {
  try {
    return body();
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kUsage;
  } catch (const TrainingAborted& e) {
    std::cerr << "training aborted: " << e.what() << '\n';
    return kRunFailure;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRunFailure;
  }
}

}  // namespace

int main_entry(int argc, char** argv) {
  CLI::App app{"tepo_lab: token-level policy optimization experiments"};
  app.require_subcommand(1);

  std::string out_flag;
  app.add_option("--out", out_flag, "output root (default $TEPO_LAB_OUT or ./runs)");

  auto* train_cmd = app.add_subcommand("train", "run one training job");
  std::string config_path;
  std::vector<std::string> sets;
  std::uint64_t seed = 0;
  bool resume = false, quiet = false;
  train_cmd->add_option("--config", config_path, "config file")->required();
  train_cmd->add_option("--seed", seed, "overrides train.seed");
  train_cmd->add_option("--set", sets, "key=value override (repeatable)");
  train_cmd->add_flag("--resume", resume, "continue from the run directory's checkpoint");
  train_cmd->add_flag("--quiet", quiet, "no per-step output");

  auto* ablate_cmd = app.add_subcommand("ablate", "run an ablation grid");
  std::string grid_path;
  int workers = 0;
  bool dry_run = false;
  ablate_cmd->add_option("--grid", grid_path, "grid file")->required();
  ablate_cmd->add_option("--workers", workers, "parallel runs");
  ablate_cmd->add_option("--set", sets, "key=value override of the base config (repeatable)");
  ablate_cmd->add_flag("--dry-run", dry_run, "list the runs without executing them");

  auto* verify_cmd = app.add_subcommand("verify", "run the numerical verification suite");
  std::string json_path;
  std::vector<std::string> tol_sets;
  std::uint64_t verify_seed = VerifyOptions{}.seed;
  verify_cmd->add_option("--json", json_path, "write the JSON report here");
  verify_cmd->add_option("--tol", tol_sets, "name=value tolerance override (repeatable)");
  verify_cmd->add_option("--seed", verify_seed, "generator seed");

  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  std::string ckpt_path, decode = "greedy", csv_path;
  double temperature = 1.0;
  int k = 1, n_prompts = 256;
  std::uint64_t eval_seed = 1;
  eval_cmd->add_option("--checkpoint", ckpt_path, "checkpoint.bin")->required();
  eval_cmd->add_option("--config", config_path, "config file describing the task");
  eval_cmd->add_option("--set", sets, "key=value override (repeatable)");
  eval_cmd->add_option("--decode", decode, "greedy | sample")->check(CLI::IsMember({"greedy", "sample"}));
  eval_cmd->add_option("--temperature", temperature, "sampling temperature");
  eval_cmd->add_option("-k", k, "samples per prompt");
  eval_cmd->add_option("--prompts", n_prompts, "number of prompts");
  eval_cmd->add_option("--seed", eval_seed, "prompt stream seed");
  eval_cmd->add_option("--csv", csv_path, "append a result row to this CSV");

  auto* export_cmd = app.add_subcommand("export", "consolidate run directories for plotting");
  std::vector<std::string> run_dirs;
  std::string export_out;
  export_cmd->add_option("--runs", run_dirs, "run directories or roots")->required();
  export_cmd->add_option("--to", export_out, "destination directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  if (train_cmd->parsed()) {
    return guarded([&] {
      TrainConfig c = load_with_overrides(config_path, sets);
      if (train_cmd->count("--seed")) c.seed = seed;
      const auto o = execute_run(c, output_root(out_flag), resume, quiet);
      std::cout << "run " << o.dir.string() << " best_eval " << format_double(o.state.best_eval)
                << " steps_to_threshold " << o.state.steps_to_threshold << '\n';
      return kOk;
    });
  }
  if (ablate_cmd->parsed()) {
    return guarded([&] {
      AblationGrid g = load_grid(grid_path);
      apply_overrides(g.base, sets);
      if (workers > 0) g.workers = workers;
      const fs::path root = output_root(out_flag);
      if (dry_run) {
        for (const auto& v : g.values) {
          TrainConfig c = g.base;
          apply_axis_value(c, g.axis, v);
          for (auto s : g.seeds) {
            c.seed = s;
            std::cout << to_string(g.axis) << '=' << v << " seed=" << s << " -> "
                      << run_directory(root, c).string() << '\n';
          }
        }
        return kOk;
      }
      const auto cells = run_grid(g, root);
      const fs::path dir = root / "ablations" / g.name;
      fs::create_directories(dir);
      const std::string csv = comparison_csv(g, cells);
      write_file(dir / "comparison.csv", csv);
      std::cout << csv << "wrote " << (dir / "comparison.csv").string() << '\n';
      const bool any_ok = std::any_of(cells.begin(), cells.end(), [](const CellResult& c) { return c.failed < c.runs; });
      const bool any_failed =
          std::any_of(cells.begin(), cells.end(), [](const CellResult& c) { return c.failed > 0; });
      return any_ok && !any_failed ? kOk : kRunFailure;
    });
  }
  if (verify_cmd->parsed()) {
    return guarded([&] {
      Tolerances tol;
      std::map<std::string, double*> named{{"closed_form", &tol.closed_form},
                                           {"first_order_rel", &tol.first_order_rel},
                                           {"first_order_lr", &tol.first_order_lr},
                                           {"covariance_rel", &tol.covariance_rel},
                                           {"covariance_min_abs", &tol.covariance_min_abs},
                                           {"on_policy_gap", &tol.on_policy_gap},
                                           {"gradient_rel", &tol.gradient_rel},
                                           {"fd_step", &tol.fd_step},
                                           {"clip_boundary_margin", &tol.clip_boundary_margin},
                                           {"clip_strict_fraction", &tol.clip_strict_fraction}};
      for (const auto& s : tol_sets) {
        const auto eq = s.find('=');
        const auto it = eq == std::string::npos ? named.end() : named.find(s.substr(0, eq));
        if (it == named.end()) throw UsageError("--tol expects one of the named tolerances as name=value: '" + s + "'");
        try {
          *it->second = std::stod(s.substr(eq + 1));
        } catch (const std::exception&) {
          throw UsageError("--tol " + s + ": not a number");
        }
      }
      VerifyOptions opt;
      opt.seed = verify_seed;
      const auto reports = run_all(tol, opt);
      for (const auto& r : reports) {
        std::cout << (r.status == CheckStatus::pass ? "PASS" : r.status == CheckStatus::fail ? "FAIL" : "INCONCLUSIVE")
                  << "  " << r.name << "  instances=" << r.instances << " max_error=" << r.max_error
                  << " tolerance=" << r.tolerance << (r.note.empty() ? "" : "  (" + r.note + ")") << '\n';
      }
      if (!json_path.empty()) write_file(json_path, reports_to_json(reports) + "\n");
      return all_passed(reports) ? kOk : kRunFailure;
    });
  }
  if (eval_cmd->parsed()) {
    return guarded([&] {
      TrainConfig c = load_with_overrides(config_path, sets);
      if (!fs::exists(ckpt_path)) throw UsageError("checkpoint '" + ckpt_path + "' does not exist");
      const auto st = load_checkpoint(ckpt_path);
      if (st.policy.vocab().size != c.task.vocab.size) {
        throw ConfigError("checkpoint vocab_size " + std::to_string(st.policy.vocab().size) +
                          " does not match task.vocab_size " + std::to_string(c.task.vocab.size));
      }
      const Decode d = decode == "greedy" ? Decode::greedy() : Decode::sample(temperature, k);
      const double acc = evaluate(st.policy, c.task, n_prompts, d, eval_seed);
      std::cout << format_double(acc) << '\n';
      if (!csv_path.empty()) {
        const bool fresh = !fs::exists(csv_path);
        std::ofstream out(csv_path, std::ios::app);
        if (fresh) out << "checkpoint,task,decode,temperature,k,prompts,seed,accuracy\n";
        out << csv_field(ckpt_path) << ',' << to_string(c.task.family) << ',' << decode << ','
            << format_double(d.kind == Decode::Kind::greedy ? 0.0 : temperature) << ','
            << (d.kind == Decode::Kind::greedy ? 1 : k) << ',' << n_prompts << ',' << eval_seed << ','
            << format_double(acc) << '\n';
      }
      return kOk;
    });
  }
  if (export_cmd->parsed()) {
    return guarded([&] {
      std::vector<fs::path> in(run_dirs.begin(), run_dirs.end());
      const auto n = export_runs(in, export_out);
      std::cout << "exported " << n << " runs to " << export_out << '\n';
      return kOk;
    });
  }
  return kUsage;
}

}  // namespace tepo::cli
