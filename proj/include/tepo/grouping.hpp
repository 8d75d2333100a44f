#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "tepo/env.hpp"
#include "tepo/policy.hpp"

namespace tepo {

/// One prompt with G sampled responses and their verified rewards.
struct RolloutGroup {
  Prompt prompt;
  std::vector<Response> responses;
  std::vector<double> rewards;

  std::size_t group_size() const { return responses.size(); }
  std::size_t token_count() const;
};

/// Group-normalized advantages; token t of response i carries per_response[i].
struct AdvantageSet {
  std::vector<double> per_response;

  double token_advantage(std::size_t response, std::size_t /*token*/) const { return per_response[response]; }
};

enum class StdMode { population, sample };

/// Raised when every reward in a group is equal. Groups must go through
/// dynamic_filter first, so reaching this is a caller bug.
class DegenerateGroupError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Per-response RNG stream: derive_seed({seed, prompt.id, response_index}).
RolloutGroup group_rollout(const SoftmaxPolicy& policy, const TaskSpec& task, const Prompt& prompt,
                           int group_size, int max_len, double temperature, std::uint64_t seed);

/// Rollouts for every prompt. OpenMP-parallel across prompts; the result is
/// identical to collect_groups_serial because every response owns its stream.
std::vector<RolloutGroup> collect_groups(const SoftmaxPolicy& policy, const TaskSpec& task,
                                         std::span<const Prompt> prompts, int group_size, int max_len,
                                         double temperature, std::uint64_t seed);

std::vector<RolloutGroup> collect_groups_serial(const SoftmaxPolicy& policy, const TaskSpec& task,
                                                std::span<const Prompt> prompts, int group_size,
                                                int max_len, double temperature, std::uint64_t seed);

/// A_i = (r_i - mean r) / std r. No epsilon in the denominator.
AdvantageSet normalize_advantages(std::span<const double> rewards, StdMode mode = StdMode::population);

struct FilterResult {
  std::vector<RolloutGroup> kept;
  double filtered_fraction = 0.0;
};

/// Keeps groups with 0 < sum(rewards) < G, i.e. drops all-correct and
/// all-wrong prompts.
FilterResult dynamic_filter(std::vector<RolloutGroup> groups);

}  // namespace tepo
