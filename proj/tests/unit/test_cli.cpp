#include <doctest.h>

#include <json.hpp>

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include "helpers.hpp"
#include "tepo/checkpoint.hpp"
#include "tepo/commands.hpp"
#include "tepo/config.hpp"

using namespace tepo;
using namespace tepo::cli;
namespace fs = std::filesystem;
using testutil::scratch_dir;

namespace {

const fs::path kConfigs = TEPO_CONFIG_DIR;

struct Invocation {
  int code;
  std::string out;
  std::string err;
};

Invocation invoke(std::vector<std::string> args) {
  args.insert(args.begin(), "tepo_lab");
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  std::ostringstream out, err;
  auto* old_out = std::cout.rdbuf(out.rdbuf());
  auto* old_err = std::cerr.rdbuf(err.rdbuf());
  const int code = main_entry(static_cast<int>(argv.size()), argv.data());
  std::cout.rdbuf(old_out);
  std::cerr.rdbuf(old_err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

const char* kTiny =
    "train.prompts_per_batch = 4\n"
    "train.group_size = 4\n"
    "train.mini_batch_prompts = 2\n"
    "train.updates_per_rollout = 1\n"
    "train.max_steps = 3\n"
    "train.eval_prompts = 8\n";

}  // namespace

TEST_CASE("config text round trips through the canonical form") {
  TrainConfig c;
  c.objective = grpo_objective();
  c.objective.kl.mask_condition = MaskCondition::either;
  c.learning_rate = 0.1;
  c.task.family = TaskFamily::balanced_brackets;
  c.eval_decode = Decode::greedy();
  const auto text = serialize_config(c);
  const auto back = config_from_text(text);
  CHECK(serialize_config(back) == text);
  CHECK(config_hash(back) == config_hash(c));
  CHECK(text.find("objective.kl.mask_condition = union") != std::string::npos);
}

TEST_CASE("config hash ignores only the seed") {
  TrainConfig a, b;
  b.seed = 99;
  CHECK(config_hash(a) == config_hash(b));
  CHECK(config_hash(a).size() == 16);
  b.objective.kl.beta = 0.002;
  CHECK(config_hash(a) != config_hash(b));
}

TEST_CASE("config parsing errors name the key") {
  CHECK_THROWS_WITH_AS(config_from_text("objective.kl.bta = 1"), doctest::Contains("objective.kl.bta"), ConfigError);
  CHECK_THROWS_WITH_AS(config_from_text("objective.is_mode = trajectory"), doctest::Contains("objective.is_mode"),
                       ConfigError);
  CHECK_THROWS_WITH_AS(config_from_text("train.group_size = four"), doctest::Contains("train.group_size"),
                       ConfigError);
  CHECK_THROWS_AS(config_from_text("just words"), ConfigError);
  CHECK_THROWS_AS(config_from_text("task.vocab_size = 3"), ConfigError);
  const auto c = config_from_text("# comment\n  train.seed = 5   # trailing\n\n");
  CHECK(c.seed == 5);
}

TEST_CASE("shipped configs load and validate") {
  for (const char* name : {"default.cfg", "grpo.cfg"}) {
    CAPTURE(name);
    const auto c = load_config(kConfigs / name);
    CHECK_NOTHROW(c.validate());
  }
  const auto tepo = load_config(kConfigs / "default.cfg");
  CHECK(tepo.objective.is_mode == IsMode::sequence_geo);
  CHECK(tepo.objective.kl.mode == KlMode::masked);
  const auto grpo = load_config(kConfigs / "grpo.cfg");
  CHECK(grpo.objective.is_mode == IsMode::token);
  CHECK(grpo.objective.kl.mode == KlMode::off);
}

TEST_CASE("shipped ablation grids") {
  const auto a = load_grid(kConfigs / "panel_a.grid");
  CHECK(a.axis == Axis::kl_beta_sweep);
  CHECK(a.values.size() == 5);
  CHECK(a.run_count() == 10);
  CHECK(a.base.objective.kl.mode == KlMode::undifferentiated);
  const auto c = load_grid(kConfigs / "panel_c.grid");
  CHECK(c.values.size() == 5);
  for (const char* n : {"panel_b.grid", "panel_d.grid", "panel_e.grid"}) CHECK_NOTHROW(load_grid(kConfigs / n));
}

TEST_CASE("axis values map onto config fields") {
  TrainConfig c;
  apply_axis_value(c, Axis::mask_condition_sweep, "off");
  CHECK(c.objective.kl.mode == KlMode::off);
  apply_axis_value(c, Axis::mask_condition_sweep, "neg_adv_entropy_up");
  CHECK(c.objective.kl.mode == KlMode::masked);
  CHECK(c.objective.kl.mask_condition == MaskCondition::neg_adv_entropy_up);
  apply_axis_value(c, Axis::is_mode_sweep, "prefix");
  CHECK(c.objective.is_mode == IsMode::prefix);
  apply_axis_value(c, Axis::kl_beta_sweep, "0.5");
  CHECK(c.objective.kl.beta == 0.5);
  apply_axis_value(c, Axis::entropy_bonus_sweep, "-0.01");
  CHECK(c.objective.entropy_bonus.coef == -0.01);
  apply_axis_value(c, Axis::agg_mode_sweep, "seq_mean_token_sum");
  CHECK(c.objective.agg_mode == AggMode::seq_mean_token_sum);
  CHECK_THROWS(apply_axis_value(c, Axis::is_mode_sweep, "bogus"));
  for (auto ax : {Axis::kl_beta_sweep, Axis::entropy_bonus_sweep, Axis::is_mode_sweep, Axis::agg_mode_sweep,
                  Axis::mask_condition_sweep}) {
    CHECK(axis_from_string(to_string(ax)) == ax);
    CHECK_FALSE(default_axis_values(ax).empty());
  }
}

TEST_CASE("grid cap and grid errors") {
  const auto d = scratch_dir("grid");
  write(d / "base.cfg", kTiny);
  write(d / "big.grid", "grid.base = base.cfg\ngrid.axis = kl_beta_sweep\ngrid.values = 1, 2, 3\n"
                        "grid.seeds = 1, 2, 3, 4\ngrid.cap = 10\n");
  CHECK_THROWS_WITH_AS(load_grid(d / "big.grid"), doctest::Contains("exceed"), ConfigError);
  write(d / "noaxis.grid", "grid.base = base.cfg\n");
  CHECK_THROWS_AS(load_grid(d / "noaxis.grid"), ConfigError);
  write(d / "typo.grid", "grid.axis = kl_beta_sweep\ngrid.vaules = 1\n");
  CHECK_THROWS_AS(load_grid(d / "typo.grid"), ConfigError);
  CHECK_THROWS_AS(load_grid(d / "missing.grid"), ConfigError);
}

TEST_CASE("output root precedence") {
  CHECK(output_root("/x") == fs::path("/x"));
  ::setenv("TEPO_LAB_OUT", "/from/env", 1);
  CHECK(output_root("") == fs::path("/from/env"));
  CHECK(output_root("/x") == fs::path("/x"));
  ::unsetenv("TEPO_LAB_OUT");
  CHECK(output_root("") == fs::path("runs"));
}

TEST_CASE("usage errors exit with code 2") {
  CHECK(invoke({}).code == kUsage);
  CHECK(invoke({"train"}).code == kUsage);
  const auto r = invoke({"train", "--config", "/nonexistent/x.cfg"});
  CHECK(r.code == kUsage);
  CHECK(r.err.find("/nonexistent/x.cfg") != std::string::npos);
  const auto d = scratch_dir("usage");
  write(d / "bad.cfg", "train.group_size = 1\n");
  CHECK(invoke({"--out", d.string(), "train", "--config", (d / "bad.cfg").string()}).code == kUsage);
  CHECK(invoke({"verify", "--tol", "nonsense=1"}).code == kUsage);
}

TEST_CASE("train writes a complete run directory") {
  const auto d = scratch_dir("train");
  write(d / "tiny.cfg", kTiny);
  const auto r = invoke({"--out", (d / "runs").string(), "train", "--config", (d / "tiny.cfg").string(), "--seed",
                         "4", "--quiet"});
  REQUIRE(r.code == kOk);
  auto c = load_config(d / "tiny.cfg");
  c.seed = 4;
  const auto run = d / "runs" / config_hash(c) / "4";
  for (const char* f : {"config.resolved", "metrics.jsonl", "eval.jsonl", "checkpoint.bin", "summary.csv"}) {
    CAPTURE(f);
    CHECK(fs::exists(run / f));
  }
  CHECK(load_config(run / "config.resolved").seed == 4);
  std::istringstream lines(slurp(run / "metrics.jsonl"));
  std::string line;
  int n = 0;
  while (std::getline(lines, line)) CHECK(StepMetrics::from_json(line).step == ++n);
  CHECK(n == 3);
  CHECK(load_checkpoint(run / "checkpoint.bin").step == 3);
}

TEST_CASE("resume continues an interrupted run in place") {
  const auto d = scratch_dir("resume");
  write(d / "tiny.cfg", kTiny);
  const auto c = load_config(d / "tiny.cfg");
  execute_run(c, d);
  const auto run = run_directory(d, c);
  const auto full = slurp(run / "metrics.jsonl");

  // put the directory back in the state it had after step 1
  auto one = c;
  one.max_steps = 1;
  save_checkpoint(train(one), run / "checkpoint.bin");
  write(run / "metrics.jsonl", full.substr(0, full.find('\n') + 1));

  const auto o = execute_run(c, d, true);
  CHECK(o.state.step == 3);
  CHECK(slurp(run / "metrics.jsonl") == full);
}

TEST_CASE("eval prints the accuracy of a checkpoint") {
  const auto d = scratch_dir("eval");
  TaskSpec task;
  task.family = TaskFamily::key_copy;
  auto policy = SoftmaxPolicy::tabular(task.vocab, 7);
  const std::uint64_t seed = 17;
  const auto prompts = generate_prompts(task, 32, seed);
  for (const auto& p : prompts) {
    std::vector<Token> answer = p.key;
    answer.push_back(task.vocab.end_token());
    for (std::size_t t = 0; t < answer.size(); ++t) {
      const auto ctx = make_context(p.id, p.tokens, std::span<const Token>(answer).first(t), 7);
      policy.register_context(ctx);
      const auto& keys = policy.row_keys();
      const auto row = static_cast<std::size_t>(
          std::find(keys.begin(), keys.end(), policy.window_key(ctx)) - keys.begin());
      policy.params()[row * task.vocab.size + static_cast<std::size_t>(answer[t])] = 60.0;
    }
  }
  TrainerState st;
  st.policy = policy;
  save_checkpoint(st, d / "perfect.bin");
  write(d / "task.cfg", "task.family = key_copy\npolicy.context_order = 7\n");
  const auto r = invoke({"eval", "--checkpoint", (d / "perfect.bin").string(), "--config", (d / "task.cfg").string(),
                         "--prompts", "32", "--seed", "17", "--csv", (d / "eval.csv").string()});
  REQUIRE(r.code == kOk);
  CHECK(r.out == "1\n");
  CHECK(slurp(d / "eval.csv").find("accuracy") != std::string::npos);
  CHECK(invoke({"eval", "--checkpoint", (d / "missing.bin").string()}).code == kUsage);
  write(d / "v.cfg", "task.vocab_size = 20\n");
  CHECK(invoke({"eval", "--checkpoint", (d / "perfect.bin").string(), "--config", (d / "v.cfg").string()}).code ==
        kUsage);
}

TEST_CASE("export consolidates runs for plotting") {
  const auto d = scratch_dir("export");
  write(d / "tiny.cfg", kTiny);
  auto c = load_config(d / "tiny.cfg");
  for (std::uint64_t s : {1, 2}) {
    c.seed = s;
    execute_run(c, d / "runs");
  }
  const auto r = invoke({"export", "--runs", (d / "runs").string(), "--to", (d / "out").string()});
  REQUIRE(r.code == kOk);
  std::istringstream m(slurp(d / "out" / "metrics.csv"));
  std::string header;
  std::getline(m, header);
  CHECK(header.rfind("config_hash,seed,step,mean_reward,mean_entropy", 0) == 0);
  int rows = 0;
  for (std::string l; std::getline(m, l);) ++rows;
  CHECK(rows == 6);
  const auto idx = nlohmann::json::parse(slurp(d / "out" / "runs.json"));
  CHECK(idx.size() == 2);
  CHECK(fs::exists(d / "out" / "eval.csv"));
  CHECK(fs::exists(d / "out" / "summary.csv"));
  CHECK(invoke({"export", "--runs", (d / "nothing").string(), "--to", (d / "o2").string()}).code == kRunFailure);
}

TEST_CASE("ablate dry run lists every cell") {
  const auto d = scratch_dir("ablate");
  const auto r = invoke({"--out", d.string(), "ablate", "--grid", (kConfigs / "panel_a.grid").string(), "--dry-run"});
  REQUIRE(r.code == kOk);
  int lines = 0;
  std::istringstream in(r.out);
  for (std::string l; std::getline(in, l);) ++lines;
  CHECK(lines == 10);
}

TEST_CASE("a small grid runs and writes a comparison table") {
  const auto d = scratch_dir("grid_run");
  write(d / "base.cfg", kTiny);
  write(d / "g.grid", "grid.base = base.cfg\ngrid.axis = is_mode_sweep\ngrid.values = token, sequence_geo\n"
                      "grid.seeds = 1, 2\ngrid.workers = 2\n");
  const auto r = invoke({"--out", d.string(), "ablate", "--grid", (d / "g.grid").string()});
  REQUIRE(r.code == kOk);
  std::istringstream csv(slurp(d / "ablations" / "g" / "comparison.csv"));
  std::string header;
  std::getline(csv, header);
  CHECK(header.rfind("grid,axis,value,config_hash,runs,failed", 0) == 0);
  int rows = 0;
  for (std::string l; std::getline(csv, l);) ++rows;
  CHECK(rows == 2);
}
