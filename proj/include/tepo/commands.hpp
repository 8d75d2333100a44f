#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "tepo/config.hpp"

namespace tepo::cli {

enum ExitCode : int { kOk = 0, kRunFailure = 1, kUsage = 2 };

/// Entry point of the tepo_lab binary.
int main_entry(int argc, char** argv);

/// <out>/<config_hash>/<seed>
std::filesystem::path run_directory(const std::filesystem::path& out_root, const TrainConfig& config);

/// --out if given, else $TEPO_LAB_OUT, else ./runs
std::filesystem::path output_root(const std::string& flag);

struct RunOutcome {
  std::filesystem::path dir;
  TrainerState state;
  double final_reward = 0.0;
  double final_entropy = 0.0;
};

/// Trains and writes metrics.jsonl, eval.jsonl, summary.csv, checkpoint.bin and
/// config.resolved. Throws on failure (TrainingAborted after writing
/// diagnostic.txt).
RunOutcome execute_run(const TrainConfig& config, const std::filesystem::path& out_root, bool resume = false,
                       bool quiet = true);

enum class Axis { kl_beta_sweep, entropy_bonus_sweep, is_mode_sweep, agg_mode_sweep, mask_condition_sweep };

std::string to_string(Axis a);
Axis axis_from_string(const std::string& s);

struct AblationGrid {
  std::string name = "grid";
  TrainConfig base;
  Axis axis = Axis::kl_beta_sweep;
  std::vector<std::string> values;
  std::vector<std::uint64_t> seeds{1, 2};
  int cap = 200;
  int workers = 0;  // 0: hardware concurrency, at most 4

  std::size_t run_count() const { return values.size() * seeds.size(); }
};

/// Default values per axis (the five-row Panel-style sweeps).
std::vector<std::string> default_axis_values(Axis axis);

/// Grid file: grid.* keys plus any config keys applied to the base config;
/// grid.base names a config file relative to the grid file.
AblationGrid load_grid(const std::filesystem::path& path);

/// Applies one axis value to a config.
void apply_axis_value(TrainConfig& config, Axis axis, const std::string& value);

struct CellResult {
  std::string value;
  std::string config_hash;
  std::size_t runs = 0;
  std::size_t failed = 0;
  std::vector<double> best_eval;
  std::vector<double> steps_to_threshold;  // runs that reached the threshold
  std::vector<double> final_reward;
  std::vector<double> final_entropy;
  std::string error;
};

std::vector<CellResult> run_grid(const AblationGrid& grid, const std::filesystem::path& out_root);
std::string comparison_csv(const AblationGrid& grid, const std::vector<CellResult>& cells);

/// Consolidates run directories found under `inputs` into out/metrics.csv,
/// out/eval.csv, out/summary.csv and out/runs.json. Returns the run count.
std::size_t export_runs(const std::vector<std::filesystem::path>& inputs, const std::filesystem::path& out);

}  // namespace tepo::cli
