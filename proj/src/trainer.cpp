#include "tepo/trainer.hpp"

#include <json.hpp>

#include <chrono>
#include <cmath>
#include <numeric>

#include "tepo/config.hpp"

namespace tepo {

namespace {

constexpr std::uint64_t kPromptTag = 0x01;
constexpr std::uint64_t kRolloutTag = 0x02;
constexpr std::uint64_t kShuffleTag = 0x03;
constexpr std::uint64_t kEvalTag = 0x04;
constexpr std::uint64_t kInitTag = 0x05;

void require(bool ok, const std::string& what) {
  if (!ok) throw ConfigError(what);
}

}  // namespace

void TrainConfig::validate() const {
  require(prompts_per_batch >= 1, "train.prompts_per_batch must be >= 1");
  require(group_size >= 2, "train.group_size must be >= 2");
  require(updates_per_rollout >= 1, "train.updates_per_rollout must be >= 1");
  require(mini_batch_prompts >= 1 && mini_batch_prompts <= prompts_per_batch,
          "train.mini_batch_prompts must be in [1, train.prompts_per_batch]");
  require(learning_rate >= 0.0 && std::isfinite(learning_rate), "train.learning_rate must be >= 0");
  require(max_steps >= 0, "train.max_steps must be >= 0");
  require(temperature > 0.0 && std::isfinite(temperature), "train.temperature must be > 0");
  require(eval_every >= 0, "train.eval_every must be >= 0");
  require(eval_prompts >= 1, "train.eval_prompts must be >= 1");
  require(eval_decode.k >= 1, "train.eval_samples must be >= 1");
  require(eval_decode.temperature > 0.0, "train.eval_temperature must be > 0");
  require(accuracy_threshold >= 0.0 && accuracy_threshold <= 1.0, "train.accuracy_threshold must be in [0, 1]");
  require(context_order >= 1 && context_order <= SoftmaxPolicy::kMaxContextOrder,
          "policy.context_order must be in [1, 8]");
  require(init_scale >= 0.0, "train.init_scale must be >= 0");
  task.validate();
  try {
    objective.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

std::string StepMetrics::to_json() const {
  nlohmann::ordered_json j;
  j["step"] = step;
  j["mean_reward"] = mean_reward;
  j["mean_entropy"] = mean_entropy;
  j["clip_fraction"] = clip_fraction;
  j["grad_norm"] = grad_norm;
  j["mean_kl"] = mean_kl;
  j["masked_token_fraction"] = masked_token_fraction;
  j["filtered_prompt_fraction"] = filtered_prompt_fraction;
  j["wall_ms"] = wall_ms;
  j["config_hash"] = config_hash;
  j["seed"] = seed;
  return j.dump();
}

StepMetrics StepMetrics::from_json(const std::string& line) {
  const auto j = nlohmann::json::parse(line);
  StepMetrics m;
  m.step = j.at("step").get<std::int64_t>();
  m.mean_reward = j.at("mean_reward").get<double>();
  m.mean_entropy = j.at("mean_entropy").get<double>();
  m.clip_fraction = j.at("clip_fraction").get<double>();
  m.grad_norm = j.at("grad_norm").get<double>();
  m.mean_kl = j.at("mean_kl").get<double>();
  m.masked_token_fraction = j.at("masked_token_fraction").get<double>();
  m.filtered_prompt_fraction = j.at("filtered_prompt_fraction").get<double>();
  m.wall_ms = j.at("wall_ms").get<double>();
  m.config_hash = j.at("config_hash").get<std::string>();
  m.seed = j.at("seed").get<std::uint64_t>();
  return m;
}

SoftmaxPolicy initial_policy(const TrainConfig& config) {
  SoftmaxPolicy p = config.policy_kind == PolicyKind::tabular
                        ? SoftmaxPolicy::tabular(config.task.vocab, config.context_order)
                        : SoftmaxPolicy::linear(config.task.vocab, config.context_order);
  if (config.init_scale > 0.0) {
    // tabular rows appear lazily at zero; only the linear weights get noise
    Rng rng(derive_seed({config.seed, kInitTag}));
    p.randomize(rng, config.init_scale);
  }
  return p;
}

std::uint64_t eval_stream_seed(std::uint64_t seed) { return derive_seed({seed, kEvalTag}); }

double evaluate(const SoftmaxPolicy& policy, const TaskSpec& task, int n_prompts, const Decode& decode,
                std::uint64_t seed) {
  if (n_prompts < 1) throw std::invalid_argument("evaluate needs n_prompts >= 1");
  const auto prompts = generate_prompts(task, static_cast<std::size_t>(n_prompts), seed);
  if (decode.kind == Decode::Kind::greedy) {
    Rng unused(0);
    int hits = 0;
    for (const auto& p : prompts) {
      hits += verify(task, p, rollout(policy, p, task.max_response_len, 0.0, unused).tokens);
    }
    return static_cast<double>(hits) / static_cast<double>(prompts.size());
  }
  if (decode.k < 1) throw std::invalid_argument("sample decoding needs k >= 1");
  long hits = 0;
  for (const auto& p : prompts) {
    for (int j = 0; j < decode.k; ++j) {
      Rng rng(derive_seed({seed, p.id, static_cast<std::uint64_t>(j)}));
      hits += verify(task, p, rollout(policy, p, task.max_response_len, decode.temperature, rng).tokens);
    }
  }
  return static_cast<double>(hits) / (static_cast<double>(prompts.size()) * decode.k);
}

TrainerState train(const TrainConfig& config, const TrainCallbacks& callbacks, std::optional<TrainerState> resume) {
  config.validate();
  const std::string hash = config_hash(config);
  TrainerState state;
  if (resume) {
    state = std::move(*resume);
    if (state.policy.vocab().size != config.task.vocab.size ||
        state.policy.context_order() != config.context_order || state.policy.kind() != config.policy_kind) {
      throw ConfigError("resume checkpoint does not match the configured policy");
    }
  } else {
    state.policy = initial_policy(config);
  }
  const LossOptions loss_opts{config.deterministic, true};
  const int max_len = config.task.max_response_len;
  const std::uint64_t eval_seed = eval_stream_seed(config.seed);

  for (std::int64_t step = state.step + 1; step <= config.max_steps; ++step) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto ustep = static_cast<std::uint64_t>(step);
    StepMetrics m;
    m.step = step;
    m.config_hash = hash;
    m.seed = config.seed;

    const auto prompts = generate_prompts(config.task, static_cast<std::size_t>(config.prompts_per_batch),
                                          derive_seed({config.seed, ustep, kPromptTag}));
    const SoftmaxPolicy policy_old = state.policy;
    auto groups = collect_groups(policy_old, config.task, prompts, config.group_size, max_len, config.temperature,
                                 derive_seed({config.seed, ustep, kRolloutTag}));

    double reward_sum = 0.0, ent_sum = 0.0;
    std::size_t n_resp = 0, n_tok = 0;
    for (const auto& g : groups) {
      for (std::size_t i = 0; i < g.responses.size(); ++i) {
        reward_sum += g.rewards[i];
        ++n_resp;
        for (const auto& ctx : response_contexts(g.prompt, g.responses[i].tokens, config.context_order)) {
          ent_sum += entropy(policy_old.distribution(ctx));
          ++n_tok;
        }
      }
    }
    m.mean_reward = reward_sum / static_cast<double>(n_resp);
    m.mean_entropy = n_tok ? ent_sum / static_cast<double>(n_tok) : 0.0;

    FilterResult filtered = dynamic_filter(std::move(groups));
    m.filtered_prompt_fraction = filtered.filtered_fraction;
    const auto& kept = filtered.kept;

    if (!kept.empty()) {
      std::vector<AdvantageSet> adv;
      adv.reserve(kept.size());
      for (const auto& g : kept) adv.push_back(normalize_advantages(g.rewards, config.std_mode));
      {
        const PreparedBatch all = prepare_batch(kept, adv, config.context_order);
        register_batch(state.policy, all);
      }

      std::size_t tokens_seen = 0, clipped = 0, masked = 0;
      double kl_sum = 0.0, gnorm_sum = 0.0;
      int updates = 0;
      std::vector<std::size_t> order(kept.size());
      const auto mb = static_cast<std::size_t>(config.mini_batch_prompts);
      for (int pass = 0; pass < config.updates_per_rollout; ++pass) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng shuffle(derive_seed({config.seed, ustep, kShuffleTag, static_cast<std::uint64_t>(pass)}));
        for (std::size_t i = order.size(); i > 1; --i) {
          std::swap(order[i - 1], order[static_cast<std::size_t>(shuffle.uniform_int(0, static_cast<std::int64_t>(i) - 1))]);
        }
        for (std::size_t b = 0; b < order.size(); b += mb) {
          std::vector<RolloutGroup> mg;
          std::vector<AdvantageSet> ma;
          for (std::size_t k = b; k < std::min(order.size(), b + mb); ++k) {
            mg.push_back(kept[order[k]]);
            ma.push_back(adv[order[k]]);
          }
          LossResult res;
          try {
            res = loss_and_grad(mg, ma, state.policy, policy_old, config.objective, loss_opts);
          } catch (const NumericalError& e) {
            throw TrainingAborted("step " + std::to_string(step) + ", update pass " + std::to_string(pass) +
                                  ": " + e.what());
          }
          auto params = state.policy.params();
          for (std::size_t i = 0; i < params.size(); ++i) params[i] += config.learning_rate * res.grad.values[i];
          for (const auto& t : res.terms.tokens) {
            clipped += t.clipped ? 1 : 0;
            masked += t.mask ? 1 : 0;
            kl_sum += t.kl;
          }
          tokens_seen += res.terms.tokens.size();
          gnorm_sum += res.grad.l2_norm();
          ++updates;
        }
      }
      const double nt = static_cast<double>(tokens_seen);
      m.clip_fraction = static_cast<double>(clipped) / nt;
      m.masked_token_fraction = static_cast<double>(masked) / nt;
      m.mean_kl = kl_sum / nt;
      m.grad_norm = gnorm_sum / updates;
    }

    if (!config.deterministic) {
      m.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    }
    state.step = step;
    if (callbacks.on_step) callbacks.on_step(m);

    const bool last = step == config.max_steps;
    if ((config.eval_every > 0 && step % config.eval_every == 0) || last) {
      const double acc = evaluate(state.policy, config.task, config.eval_prompts, config.eval_decode, eval_seed);
      state.best_eval = std::max(state.best_eval, acc);
      if (state.steps_to_threshold < 0 && acc >= config.accuracy_threshold) state.steps_to_threshold = step;
      if (callbacks.on_eval) callbacks.on_eval(step, acc);
      if (config.stop_at_threshold && state.steps_to_threshold >= 0) break;
    }
  }
  return state;
}

}  // namespace tepo
