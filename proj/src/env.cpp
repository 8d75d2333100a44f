#include "tepo/env.hpp"

#include <json.hpp>

namespace tepo {

namespace {

constexpr Token kOpen = 0;
constexpr Token kClose = 1;

std::span<const Token> strip_end(const Vocabulary& vocab, std::span<const Token> r) {
  if (!r.empty() && r.back() == vocab.end_token()) return r.first(r.size() - 1);
  return r;
}

}  // namespace

std::string to_string(TaskFamily f) {
  switch (f) {
    case TaskFamily::target_sum: return "target_sum";
    case TaskFamily::balanced_brackets: return "balanced_brackets";
    case TaskFamily::key_copy: return "key_copy";
  }
  return "?";
}

TaskFamily task_family_from_string(const std::string& s) {
  if (s == "target_sum") return TaskFamily::target_sum;
  if (s == "balanced_brackets") return TaskFamily::balanced_brackets;
  if (s == "key_copy") return TaskFamily::key_copy;
  throw ConfigError("unknown task family '" + s + "'");
}

void TaskSpec::validate() const {
  const int payload = vocab.payload_size();
  if (payload < 2) throw ConfigError("task vocabulary needs at least 2 payload tokens (size >= 4)");
  if (max_response_len < 1) throw ConfigError("task.max_response_len must be >= 1");
  if (prompt_len < 1) throw ConfigError("task.prompt_len must be >= 1");
  switch (family) {
    case TaskFamily::target_sum:
      // single-token target encoding; the one-digit response "target" solves it
      if (target_min < 0 || target_max < target_min || target_max > payload - 1) {
        throw ConfigError("task.target_min/target_max must satisfy 0 <= min <= max <= " +
                          std::to_string(payload - 1));
      }
      break;
    case TaskFamily::key_copy:
      if (key_len < 1 || key_len > prompt_len || key_len > max_response_len) {
        throw ConfigError("task.key_len must be in [1, min(prompt_len, max_response_len)]");
      }
      break;
    case TaskFamily::balanced_brackets:
      if (open_min < 0 || open_max < open_min || open_max > prompt_len || open_max > max_response_len) {
        throw ConfigError("task.open_min/open_max must satisfy 0 <= min <= max <= min(prompt_len, max_response_len)");
      }
      if (open_min == 0 && max_response_len < 2) {
        throw ConfigError("depth-0 bracket prompts need max_response_len >= 2");
      }
      break;
  }
}

Prompt make_prompt(const TaskSpec& task, std::uint64_t id) {
  Rng rng(derive_seed({task.seed, id, 0x70726f6d7074ULL}));
  Prompt p;
  p.id = id;
  p.tokens.assign(static_cast<std::size_t>(task.prompt_len), task.vocab.separator());
  const auto len = p.tokens.size();
  switch (task.family) {
    case TaskFamily::target_sum:
      p.target = static_cast<int>(rng.uniform_int(task.target_min, task.target_max));
      p.tokens[len - 1] = static_cast<Token>(p.target);
      break;
    case TaskFamily::key_copy:
      for (int i = 0; i < task.key_len; ++i) {
        p.key.push_back(static_cast<Token>(rng.uniform_int(0, task.vocab.payload_size() - 1)));
      }
      std::copy(p.key.begin(), p.key.end(), p.tokens.end() - task.key_len);
      break;
    case TaskFamily::balanced_brackets:
      p.target = static_cast<int>(rng.uniform_int(task.open_min, task.open_max));
      std::fill(p.tokens.end() - p.target, p.tokens.end(), kOpen);
      break;
  }
  return p;
}

std::vector<Prompt> generate_prompts(const TaskSpec& task, std::size_t n, std::uint64_t stream_seed) {
  if (n < 1) throw std::invalid_argument("generate_prompts needs n >= 1");
  task.validate();
  std::vector<Prompt> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(make_prompt(task, derive_seed({stream_seed, i})));
  return out;
}

int verify(const TaskSpec& task, const Prompt& prompt, std::span<const Token> response) {
  const auto body = strip_end(task.vocab, response);
  if (body.empty()) return 0;
  switch (task.family) {
    case TaskFamily::target_sum: {
      int sum = 0;
      for (Token t : body) {
        if (t < 0 || t >= task.vocab.payload_size()) return 0;
        sum += t;
      }
      return sum == prompt.target ? 1 : 0;
    }
    case TaskFamily::key_copy:
      return std::equal(body.begin(), body.end(), prompt.key.begin(), prompt.key.end()) ? 1 : 0;
    case TaskFamily::balanced_brackets: {
      int depth = prompt.target;
      for (Token t : body) {
        if (t == kOpen) {
          ++depth;
        } else if (t == kClose) {
          if (--depth < 0) return 0;
        } else {
          return 0;
        }
      }
      return depth == 0 ? 1 : 0;
    }
  }
  return 0;
}

Response rollout(const SoftmaxPolicy& policy, const Prompt& prompt, int max_len, double temperature,
                 Rng& rng) {
  if (temperature < 0.0) throw std::invalid_argument("temperature must be >= 0");
  Response r;
  r.temperature = temperature;
  const Token end = policy.vocab().end_token();
  for (int t = 0; t < max_len; ++t) {
    const Context ctx = make_context(prompt.id, prompt.tokens, r.tokens, policy.context_order());
    const TokenDistribution sampled = tempered(policy.distribution(ctx), temperature);
    const Token tok = sample_token(sampled, 1.0, rng);
    r.tokens.push_back(tok);
    r.behavior_log_probs.push_back(sampled.log_probs[static_cast<std::size_t>(tok)]);
    if (tok == end) break;
  }
  return r;
}

std::vector<Context> response_contexts(const Prompt& prompt, std::span<const Token> response, int order) {
  std::vector<Context> out;
  out.reserve(response.size());
  for (std::size_t t = 0; t < response.size(); ++t) {
    out.push_back(make_context(prompt.id, prompt.tokens, response.first(t), order));
  }
  return out;
}

std::string prompts_to_jsonl(const TaskSpec& task, std::span<const Prompt> prompts) {
  std::string out;
  for (const auto& p : prompts) {
    nlohmann::ordered_json j;
    j["id"] = p.id;
    j["tokens"] = p.tokens;
    nlohmann::ordered_json meta;
    meta["family"] = to_string(task.family);
    switch (task.family) {
      case TaskFamily::target_sum: meta["target"] = p.target; break;
      case TaskFamily::key_copy: meta["key"] = p.key; break;
      case TaskFamily::balanced_brackets: meta["open_depth"] = p.target; break;
    }
    j["metadata"] = meta;
    out += j.dump();
    out += '\n';
  }
  return out;
}

}  // namespace tepo
