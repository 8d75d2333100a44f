#pragma once

// Rollout -> filter -> advantage -> minibatch ascent loop.

#include <cstdint>
#include <functional>
#include <optional>
#include <string>

#include "tepo/env.hpp"
#include "tepo/grouping.hpp"
#include "tepo/objectives.hpp"
#include "tepo/policy.hpp"

namespace tepo {

struct Decode {
  enum class Kind { greedy, sample } kind = Kind::greedy;
  double temperature = 1.0;
  int k = 1;

  static Decode greedy() { return {}; }
  static Decode sample(double temperature, int k) { return {Kind::sample, temperature, k}; }
};

struct TrainConfig {
  int prompts_per_batch = 64;
  int group_size = 8;
  int updates_per_rollout = 8;
  int mini_batch_prompts = 16;
  double learning_rate = 16.0;
  int max_steps = 60;
  double temperature = 1.0;
  std::uint64_t seed = 1;
  ObjectiveConfig objective = tepo_objective();
  TaskSpec task;
  int eval_every = 1;
  int eval_prompts = 64;
  Decode eval_decode = Decode::sample(1.0, 4);
  double accuracy_threshold = 0.9;
  /// stop once eval accuracy reaches accuracy_threshold
  bool stop_at_threshold = false;
  bool deterministic = true;
  PolicyKind policy_kind = PolicyKind::tabular;
  int context_order = SoftmaxPolicy::kDefaultContextOrder;
  double init_scale = 0.0;
  StdMode std_mode = StdMode::population;

  void validate() const;
};

struct StepMetrics {
  std::int64_t step = 0;
  double mean_reward = 0.0;
  double mean_entropy = 0.0;
  double clip_fraction = 0.0;
  double grad_norm = 0.0;
  double mean_kl = 0.0;
  double masked_token_fraction = 0.0;
  double filtered_prompt_fraction = 0.0;
  double wall_ms = 0.0;
  std::string config_hash;
  std::uint64_t seed = 0;

  /// One line of metrics.jsonl, fixed key order, no trailing newline.
  std::string to_json() const;
  static StepMetrics from_json(const std::string& line);
};

struct TrainerState {
  SoftmaxPolicy policy = SoftmaxPolicy::tabular(Vocabulary{});
  std::int64_t step = 0;
  double best_eval = 0.0;
  std::int64_t steps_to_threshold = -1;
};

struct TrainCallbacks {
  std::function<void(const StepMetrics&)> on_step;
  std::function<void(std::int64_t step, double accuracy)> on_eval;
};

class TrainingAborted : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

SoftmaxPolicy initial_policy(const TrainConfig& config);

/// Runs steps state.step+1 .. config.max_steps. Pass a loaded state to resume.
/// Throws TrainingAborted on a non-finite objective or gradient.
TrainerState train(const TrainConfig& config, const TrainCallbacks& callbacks = {},
                   std::optional<TrainerState> resume = std::nullopt);

/// Fraction of prompts (or of prompt samples) earning reward 1.
double evaluate(const SoftmaxPolicy& policy, const TaskSpec& task, int n_prompts, const Decode& decode,
                std::uint64_t seed);

/// The fixed held-out prompt stream the trainer evaluates on.
std::uint64_t eval_stream_seed(std::uint64_t seed);

}  // namespace tepo
