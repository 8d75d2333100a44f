#include "tepo/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

namespace tepo {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad(const std::string& key, const std::string& value, const std::string& why) {
  throw ConfigError(key + ": invalid value '" + value + "' (" + why + ")");
}

double to_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) bad(key, v, "expected a number");
  return out;
}

long long to_int(const std::string& key, const std::string& v) {
  long long out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) bad(key, v, "expected an integer");
  return out;
}

int to_i32(const std::string& key, const std::string& v) {
  const long long x = to_int(key, v);
  if (x < INT32_MIN || x > INT32_MAX) bad(key, v, "out of range");
  return static_cast<int>(x);
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) bad(key, v, "expected a non-negative integer");
  return out;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  bad(key, v, "expected true or false");
}

template <typename F>
auto enum_value(const std::string& key, const std::string& v, F parse) {
  try {
    return parse(v);
  } catch (const std::exception& e) {
    bad(key, v, e.what());
  }
}

using Setter = std::function<void(TrainConfig&, const std::string&, const std::string&)>;
using Getter = std::function<std::string(const TrainConfig&)>;

struct Field {
  Getter get;
  Setter set;
};

std::string fmt_int(long long v) { return std::to_string(v); }
std::string fmt_bool(bool b) { return b ? "true" : "false"; }

const std::map<std::string, Field>& fields() {
  static const std::map<std::string, Field> table = [] {
    std::map<std::string, Field> m;
#define INT_FIELD(key, member)                                                                       \
  m[key] = {[](const TrainConfig& c) { return fmt_int(c.member); },                                  \
            [](TrainConfig& c, const std::string& k, const std::string& v) { c.member = to_i32(k, v); }}
#define DBL_FIELD(key, member)                                                                          \
  m[key] = {[](const TrainConfig& c) { return format_double(c.member); },                               \
            [](TrainConfig& c, const std::string& k, const std::string& v) { c.member = to_double(k, v); }}
#define BOOL_FIELD(key, member)                                                                       \
  m[key] = {[](const TrainConfig& c) { return fmt_bool(c.member); },                                  \
            [](TrainConfig& c, const std::string& k, const std::string& v) { c.member = to_bool(k, v); }}
#define ENUM_FIELD(key, member, parse)                                                        \
  m[key] = {[](const TrainConfig& c) { return to_string(c.member); },                         \
            [](TrainConfig& c, const std::string& k, const std::string& v) {                  \
              c.member = enum_value(k, v, [](const std::string& s) { return parse(s); }); \
            }}

    INT_FIELD("train.prompts_per_batch", prompts_per_batch);
    INT_FIELD("train.group_size", group_size);
    INT_FIELD("train.updates_per_rollout", updates_per_rollout);
    INT_FIELD("train.mini_batch_prompts", mini_batch_prompts);
    DBL_FIELD("train.learning_rate", learning_rate);
    INT_FIELD("train.max_steps", max_steps);
    DBL_FIELD("train.temperature", temperature);
    m["train.seed"] = {[](const TrainConfig& c) { return std::to_string(c.seed); },
                       [](TrainConfig& c, const std::string& k, const std::string& v) { c.seed = to_u64(k, v); }};
    INT_FIELD("train.eval_every", eval_every);
    INT_FIELD("train.eval_prompts", eval_prompts);
    DBL_FIELD("train.accuracy_threshold", accuracy_threshold);
    m["train.eval_decode"] = {
        [](const TrainConfig& c) {
          return std::string(c.eval_decode.kind == Decode::Kind::greedy ? "greedy" : "sample");
        },
        [](TrainConfig& c, const std::string& k, const std::string& v) {
          if (v == "greedy") c.eval_decode.kind = Decode::Kind::greedy;
          else if (v == "sample") c.eval_decode.kind = Decode::Kind::sample;
          else bad(k, v, "expected greedy|sample");
        }};
    DBL_FIELD("train.eval_temperature", eval_decode.temperature);
    INT_FIELD("train.eval_samples", eval_decode.k);
    BOOL_FIELD("train.stop_at_threshold", stop_at_threshold);
    BOOL_FIELD("train.deterministic", deterministic);
    DBL_FIELD("train.init_scale", init_scale);
    m["train.std_mode"] = {
        [](const TrainConfig& c) { return std::string(c.std_mode == StdMode::population ? "population" : "sample"); },
        [](TrainConfig& c, const std::string& k, const std::string& v) {
          if (v == "population") c.std_mode = StdMode::population;
          else if (v == "sample") c.std_mode = StdMode::sample;
          else bad(k, v, "expected population|sample");
        }};

    m["policy.kind"] = {
        [](const TrainConfig& c) { return std::string(c.policy_kind == PolicyKind::tabular ? "tabular" : "linear"); },
        [](TrainConfig& c, const std::string& k, const std::string& v) {
          if (v == "tabular") c.policy_kind = PolicyKind::tabular;
          else if (v == "linear") c.policy_kind = PolicyKind::linear;
          else bad(k, v, "expected tabular|linear");
        }};
    INT_FIELD("policy.context_order", context_order);

    ENUM_FIELD("task.family", task.family, task_family_from_string);
    m["task.vocab_size"] = {[](const TrainConfig& c) { return fmt_int(c.task.vocab.size); },
                            [](TrainConfig& c, const std::string& k, const std::string& v) {
                              const int n = to_i32(k, v);
                              if (n < 4) bad(k, v, "must be >= 4");
                              c.task.vocab = Vocabulary(n);
                            }};
    INT_FIELD("task.max_response_len", task.max_response_len);
    INT_FIELD("task.prompt_len", task.prompt_len);
    INT_FIELD("task.target_min", task.target_min);
    INT_FIELD("task.target_max", task.target_max);
    INT_FIELD("task.key_len", task.key_len);
    INT_FIELD("task.open_min", task.open_min);
    INT_FIELD("task.open_max", task.open_max);
    m["task.seed"] = {[](const TrainConfig& c) { return std::to_string(c.task.seed); },
                      [](TrainConfig& c, const std::string& k, const std::string& v) { c.task.seed = to_u64(k, v); }};

    ENUM_FIELD("objective.is_mode", objective.is_mode, is_mode_from_string);
    ENUM_FIELD("objective.agg_mode", objective.agg_mode, agg_mode_from_string);
    DBL_FIELD("objective.clip.eps_low", objective.clip.eps_low);
    DBL_FIELD("objective.clip.eps_high", objective.clip.eps_high);
    ENUM_FIELD("objective.clip.form", objective.clip.form, clip_form_from_string);
    ENUM_FIELD("objective.kl.mode", objective.kl.mode, kl_mode_from_string);
    DBL_FIELD("objective.kl.beta", objective.kl.beta);
    ENUM_FIELD("objective.kl.mask_condition", objective.kl.mask_condition, mask_condition_from_string);
    ENUM_FIELD("objective.kl.estimator", objective.kl.estimator, kl_estimator_from_string);
    ENUM_FIELD("objective.kl.direction", objective.kl.direction, kl_direction_from_string);
    DBL_FIELD("objective.entropy_bonus.coef", objective.entropy_bonus.coef);
#undef INT_FIELD
#undef DBL_FIELD
#undef BOOL_FIELD
#undef ENUM_FIELD
    return m;
  }();
  return table;
}

}  // namespace

std::string format_double(double v) {
  char buf[64];
  const auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return ec == std::errc() ? std::string(buf, p) : std::string("nan");
}

std::map<std::string, std::string> config_to_map(const TrainConfig& config) {
  std::map<std::string, std::string> out;
  for (const auto& [k, f] : fields()) out[k] = f.get(config);
  return out;
}

void apply_setting(TrainConfig& config, const std::string& key, const std::string& value) {
  const auto it = fields().find(key);
  if (it == fields().end()) throw ConfigError("unknown config key '" + key + "'");
  it->second.set(config, key, value);
}

std::vector<std::pair<std::string, std::string>> parse_key_values(const std::string& text,
                                                                  const std::string& origin) {
  std::vector<std::pair<std::string, std::string>> out;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key=value");
    }
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty key");
    out.emplace_back(std::move(key), std::move(value));
  }
  return out;
}

TrainConfig config_from_text(const std::string& text, const std::string& origin) {
  TrainConfig c;
  for (const auto& [k, v] : parse_key_values(text, origin)) apply_setting(c, k, v);
  return c;
}

TrainConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return config_from_text(ss.str(), path.string());
}

std::string serialize_config(const TrainConfig& config) {
  std::string out;
  for (const auto& [k, v] : config_to_map(config)) out += k + " = " + v + "\n";
  return out;
}

std::string config_hash(const TrainConfig& config) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& [k, v] : config_to_map(config)) {
    if (k == "train.seed") continue;
    for (char ch : k + "=" + v + "\n") {
      h ^= static_cast<unsigned char>(ch);
      h *= 0x100000001b3ULL;
    }
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace tepo
