#include "tepo/grouping.hpp"

#include <cmath>
#include <string>

namespace tepo {

std::size_t RolloutGroup::token_count() const {
  std::size_t n = 0;
  for (const auto& r : responses) n += r.tokens.size();
  return n;
}

RolloutGroup group_rollout(const SoftmaxPolicy& policy, const TaskSpec& task, const Prompt& prompt,
                           int group_size, int max_len, double temperature, std::uint64_t seed) {
  if (group_size < 2) throw std::invalid_argument("group size must be >= 2");
  RolloutGroup g;
  g.prompt = prompt;
  g.responses.reserve(static_cast<std::size_t>(group_size));
  g.rewards.reserve(static_cast<std::size_t>(group_size));
  for (int i = 0; i < group_size; ++i) {
    Rng rng(derive_seed({seed, prompt.id, static_cast<std::uint64_t>(i)}));
    g.responses.push_back(rollout(policy, prompt, max_len, temperature, rng));
    g.rewards.push_back(static_cast<double>(verify(task, prompt, g.responses.back().tokens)));
  }
  return g;
}

std::vector<RolloutGroup> collect_groups(const SoftmaxPolicy& policy, const TaskSpec& task,
                                         std::span<const Prompt> prompts, int group_size, int max_len,
                                         double temperature, std::uint64_t seed) {
  std::vector<RolloutGroup> out(prompts.size());
  const auto n = static_cast<std::ptrdiff_t>(prompts.size());
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t p = 0; p < n; ++p) {
    const auto i = static_cast<std::size_t>(p);
    out[i] = group_rollout(policy, task, prompts[i], group_size, max_len, temperature, seed);
  }
  return out;
}

std::vector<RolloutGroup> collect_groups_serial(const SoftmaxPolicy& policy, const TaskSpec& task,
                                                std::span<const Prompt> prompts, int group_size,
                                                int max_len, double temperature, std::uint64_t seed) {
  std::vector<RolloutGroup> out;
  out.reserve(prompts.size());
  for (const auto& p : prompts) {
    out.push_back(group_rollout(policy, task, p, group_size, max_len, temperature, seed));
  }
  return out;
}

AdvantageSet normalize_advantages(std::span<const double> rewards, StdMode mode) {
  const std::size_t n = rewards.size();
  if (n < 2) throw std::invalid_argument("advantage normalization needs at least 2 rewards");
  double mean = 0.0;
  for (double r : rewards) mean += r;
  mean /= static_cast<double>(n);
  double ss = 0.0;
  for (double r : rewards) ss += (r - mean) * (r - mean);
  const double denom = mode == StdMode::population ? static_cast<double>(n) : static_cast<double>(n - 1);
  const double sd = std::sqrt(ss / denom);
  if (!(sd > 0.0)) {
    throw DegenerateGroupError("degenerate group: all " + std::to_string(n) +
                               " rewards equal; dynamic_filter should have removed it");
  }
  AdvantageSet a;
  a.per_response.reserve(n);
  for (double r : rewards) a.per_response.push_back((r - mean) / sd);
  return a;
}

FilterResult dynamic_filter(std::vector<RolloutGroup> groups) {
  FilterResult res;
  if (groups.empty()) return res;
  const std::size_t total = groups.size();
  for (auto& g : groups) {
    double sum = 0.0;
    for (double r : g.rewards) sum += r;
    if (sum > 0.0 && sum < static_cast<double>(g.group_size())) res.kept.push_back(std::move(g));
  }
  res.filtered_fraction = static_cast<double>(total - res.kept.size()) / static_cast<double>(total);
  return res;
}

}  // namespace tepo
