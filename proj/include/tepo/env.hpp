#pragma once

// Synthetic autoregressive token tasks with binary terminal rewards.
//
// Token layout for vocab size V: payload ids 0..V-3, separator V-2, END V-1.
//
//   target_sum        prompt = SEP.. SEP target     reward iff the response is
//                     a non-empty run of digits summing to target
//   key_copy          prompt = SEP.. key[0..L)      reward iff response == key
//   balanced_brackets prompt = SEP.. "(" x depth    '(' = 0, ')' = 1; reward iff
//                     the response (non-empty, brackets only) closes the
//                     prompt's open depth without ever going negative
//
// A trailing END is stripped before the rule is applied; responses that hit
// the length cap without END are judged the same way.

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "tepo/policy.hpp"

namespace tepo {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class TaskFamily { target_sum, balanced_brackets, key_copy };

struct TaskSpec {
  TaskFamily family = TaskFamily::target_sum;
  Vocabulary vocab{12};
  int max_response_len = 16;
  int prompt_len = 4;
  // target_sum
  int target_min = 1;
  int target_max = 9;
  // key_copy
  int key_len = 3;
  // balanced_brackets
  int open_min = 1;
  int open_max = 3;
  std::uint64_t seed = 0;

  /// Throws ConfigError when the family cannot guarantee a rewarded response.
  void validate() const;
};

struct Prompt {
  std::uint64_t id = 0;
  std::vector<Token> tokens;
  // verifier metadata: target sum, or open bracket depth
  int target = 0;
  std::vector<Token> key;
};

struct Response {
  std::vector<Token> tokens;
  std::vector<double> behavior_log_probs;
  double temperature = 1.0;
};

/// Prompt `id` of the task; a pure function of (task.seed, id).
Prompt make_prompt(const TaskSpec& task, std::uint64_t id);

/// `n` prompts whose ids are drawn from the stream seed.
std::vector<Prompt> generate_prompts(const TaskSpec& task, std::size_t n, std::uint64_t stream_seed);

/// Deterministic, pure rule check. Returns 1 or 0.
int verify(const TaskSpec& task, const Prompt& prompt, std::span<const Token> response);

/// Autoregressive sampling until END or `max_len` tokens. Log-probs are those
/// of the tempered distribution each token was drawn from.
Response rollout(const SoftmaxPolicy& policy, const Prompt& prompt, int max_len, double temperature,
                 Rng& rng);

/// Contexts visited by a response: entry t conditions token t.
std::vector<Context> response_contexts(const Prompt& prompt, std::span<const Token> response, int order);

/// One JSON object per line: {"id", "tokens", "metadata"}.
std::string prompts_to_jsonl(const TaskSpec& task, std::span<const Prompt> prompts);

std::string to_string(TaskFamily f);
TaskFamily task_family_from_string(const std::string& s);

}  // namespace tepo
