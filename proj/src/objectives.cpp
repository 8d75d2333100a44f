#include "tepo/objectives.hpp"

#include <omp.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <sstream>

namespace tepo {

// --- config -------------------------------------------------------------------

namespace {

template <typename E>
struct Names;

template <>
struct Names<IsMode> {
  static constexpr std::pair<IsMode, const char*> table[] = {
      {IsMode::token, "token"},
      {IsMode::sequence_geo, "sequence_geo"},
      {IsMode::prefix, "prefix"},
      {IsMode::none, "none"},
      {IsMode::cispo_stopgrad, "cispo_stopgrad"}};
  static constexpr const char* what = "objective.is_mode";
};
template <>
struct Names<AggMode> {
  static constexpr std::pair<AggMode, const char*> table[] = {
      {AggMode::token_mean, "token_mean"},
      {AggMode::seq_mean_token_mean, "seq_mean_token_mean"},
      {AggMode::seq_mean_token_sum, "seq_mean_token_sum"}};
  static constexpr const char* what = "objective.agg_mode";
};
template <>
struct Names<ClipForm> {
  static constexpr std::pair<ClipForm, const char*> table[] = {
      {ClipForm::dual, "dual"}, {ClipForm::literal, "literal"}, {ClipForm::none, "none"}};
  static constexpr const char* what = "objective.clip.form";
};
template <>
struct Names<KlMode> {
  static constexpr std::pair<KlMode, const char*> table[] = {
      {KlMode::off, "off"}, {KlMode::undifferentiated, "undifferentiated"}, {KlMode::masked, "masked"}};
  static constexpr const char* what = "objective.kl.mode";
};
template <>
struct Names<MaskCondition> {
  static constexpr std::pair<MaskCondition, const char*> table[] = {
      {MaskCondition::pos_adv_entropy_down, "pos_adv_entropy_down"},
      {MaskCondition::neg_adv_entropy_up, "neg_adv_entropy_up"},
      {MaskCondition::either, "union"}};
  static constexpr const char* what = "objective.kl.mask_condition";
};
template <>
struct Names<KlEstimator> {
  static constexpr std::pair<KlEstimator, const char*> table[] = {{KlEstimator::exact, "exact"},
                                                                  {KlEstimator::k3, "k3"}};
  static constexpr const char* what = "objective.kl.estimator";
};
template <>
struct Names<KlDirection> {
  static constexpr std::pair<KlDirection, const char*> table[] = {{KlDirection::forward, "forward"},
                                                                  {KlDirection::reverse, "reverse"}};
  static constexpr const char* what = "objective.kl.direction";
};

template <typename E>
std::string name_of(E e) {
  for (const auto& [v, n] : Names<E>::table)
    if (v == e) return n;
  return "?";
}

template <typename E>
E parse_name(const std::string& s) {
  std::string allowed;
  for (const auto& [v, n] : Names<E>::table) {
    if (s == n) return v;
    allowed += allowed.empty() ? n : std::string("|") + n;
  }
  throw std::invalid_argument(std::string(Names<E>::what) + ": unknown value '" + s + "' (expected " + allowed +
                              ")");
}

}  // namespace

std::string to_string(IsMode m) { return name_of(m); }
std::string to_string(AggMode m) { return name_of(m); }
std::string to_string(ClipForm f) { return name_of(f); }
std::string to_string(KlMode m) { return name_of(m); }
std::string to_string(MaskCondition c) { return name_of(c); }
std::string to_string(KlEstimator e) { return name_of(e); }
std::string to_string(KlDirection d) { return name_of(d); }
IsMode is_mode_from_string(const std::string& s) { return parse_name<IsMode>(s); }
AggMode agg_mode_from_string(const std::string& s) { return parse_name<AggMode>(s); }
ClipForm clip_form_from_string(const std::string& s) { return parse_name<ClipForm>(s); }
KlMode kl_mode_from_string(const std::string& s) { return parse_name<KlMode>(s); }
MaskCondition mask_condition_from_string(const std::string& s) { return parse_name<MaskCondition>(s); }
KlEstimator kl_estimator_from_string(const std::string& s) { return parse_name<KlEstimator>(s); }
KlDirection kl_direction_from_string(const std::string& s) { return parse_name<KlDirection>(s); }

void ObjectiveConfig::validate() const {
  if (!(clip.eps_low >= 0.0 && clip.eps_low < 1.0)) {
    throw std::invalid_argument("objective.clip.eps_low must be in [0, 1)");
  }
  if (!(clip.eps_high >= 0.0 && clip.eps_high < 1.0)) {
    throw std::invalid_argument("objective.clip.eps_high must be in [0, 1)");
  }
  if (!(kl.beta >= 0.0) || !std::isfinite(kl.beta)) throw std::invalid_argument("objective.kl.beta must be >= 0");
  if (!std::isfinite(entropy_bonus.coef)) throw std::invalid_argument("objective.entropy_bonus.coef must be finite");
}

ObjectiveConfig tepo_objective(double beta) {
  ObjectiveConfig c;
  c.is_mode = IsMode::sequence_geo;
  c.agg_mode = AggMode::token_mean;
  c.kl.mode = KlMode::masked;
  c.kl.beta = beta;
  c.kl.mask_condition = MaskCondition::pos_adv_entropy_down;
  return c;
}

ObjectiveConfig grpo_objective() { return ObjectiveConfig{}; }

// --- scalar pieces --------------------------------------------------------------

double token_ratio(double new_logp, double old_logp) { return std::exp(new_logp - old_logp); }

double sequence_weight(std::span<const double> new_logps, std::span<const double> old_logps) {
  if (new_logps.size() != old_logps.size()) throw std::invalid_argument("sequence_weight: length mismatch");
  if (new_logps.empty()) throw std::invalid_argument("sequence_weight: empty sequence");
  return prefix_weight(new_logps, old_logps, new_logps.size());
}

double prefix_weight(std::span<const double> new_logps, std::span<const double> old_logps, std::size_t t) {
  if (new_logps.size() != old_logps.size()) throw std::invalid_argument("prefix_weight: length mismatch");
  if (t < 1 || t > new_logps.size()) throw std::invalid_argument("prefix_weight: position out of range");
  double s = 0.0;
  for (std::size_t j = 0; j < t; ++j) s += new_logps[j] - old_logps[j];
  return std::exp(s / static_cast<double>(t));
}

double token_kl(const TokenDistribution& p, const TokenDistribution& q, KlEstimator estimator, Token realized) {
  if (p.size() != q.size()) throw std::invalid_argument("token_kl: vocabulary mismatch");
  if (estimator == KlEstimator::exact) {
    double kl = 0.0;
    for (std::size_t a = 0; a < p.size(); ++a) {
      if (p.probs[a] > 0.0) kl += p.probs[a] * (p.log_probs[a] - q.log_probs[a]);
    }
    return std::max(kl, 0.0);
  }
  if (realized < 0 || static_cast<std::size_t>(realized) >= p.size()) {
    throw std::invalid_argument("token_kl: k3 estimator needs the realized token");
  }
  const auto y = static_cast<std::size_t>(realized);
  const double log_r = q.log_probs[y] - p.log_probs[y];
  return std::exp(log_r) - log_r - 1.0;
}

double delta_entropy(const TokenDistribution& dist_new, const TokenDistribution& dist_old) {
  return entropy(dist_new) - entropy(dist_old);
}

bool kl_mask(double advantage, double delta_h, MaskCondition condition) {
  const bool pos_down = advantage > 0.0 && delta_h < 0.0;
  const bool neg_up = advantage < 0.0 && delta_h > 0.0;
  switch (condition) {
    case MaskCondition::pos_adv_entropy_down: return pos_down;
    case MaskCondition::neg_adv_entropy_up: return neg_up;
    case MaskCondition::either: return pos_down || neg_up;
  }
  return false;
}

namespace {

struct SurrogateEval {
  double value;
  bool clipped;
  bool differentiable;  // d value / d weight is A rather than 0
};

SurrogateEval eval_surrogate(double w, double A, const ClipConfig& clip) {
  const double lo = 1.0 - clip.eps_low;
  const double hi = 1.0 + clip.eps_high;
  switch (clip.form) {
    case ClipForm::none: return {w * A, false, true};
    case ClipForm::literal:
      if (w > hi) return {hi * A, true, false};
      return {w * A, false, true};
    case ClipForm::dual: {
      const double raw = w * A;
      const double clipped = std::clamp(w, lo, hi) * A;
      if (clipped < raw) return {clipped, true, false};
      return {raw, false, true};
    }
  }
  return {w * A, false, true};
}

}  // namespace

SurrogateValue surrogate_term(double weight, double advantage, const ClipConfig& clip) {
  if (!(weight > 0.0)) throw std::invalid_argument("surrogate_term: weight must be > 0");
  const auto s = eval_surrogate(weight, advantage, clip);
  return {s.value, s.clipped};
}

double GradientAccumulator::l2_norm() const {
  double s = 0.0;
  for (double v : values) s += v * v;
  return std::sqrt(s);
}

double clip_fraction(const TokenLossTerms& terms) {
  if (terms.tokens.empty()) return 0.0;
  std::size_t n = 0;
  for (const auto& t : terms.tokens) n += t.clipped ? 1 : 0;
  return static_cast<double>(n) / static_cast<double>(terms.tokens.size());
}

// --- batch ------------------------------------------------------------------------

PreparedBatch prepare_batch(std::span<const RolloutGroup> groups, std::span<const AdvantageSet> advantages,
                            int context_order) {
  if (groups.empty()) throw std::invalid_argument("objective over an empty group list");
  if (groups.size() != advantages.size()) throw std::invalid_argument("one AdvantageSet per group required");
  PreparedBatch b;
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const auto& grp = groups[g];
    if (advantages[g].per_response.size() != grp.responses.size()) {
      throw std::invalid_argument("advantage count does not match group size");
    }
    for (std::size_t i = 0; i < grp.responses.size(); ++i) {
      const auto& toks = grp.responses[i].tokens;
      if (toks.empty()) throw std::invalid_argument("empty response in batch");
      PreparedBatch::ResponseRange range{b.steps.size(), 0, advantages[g].per_response[i]};
      for (std::size_t t = 0; t < toks.size(); ++t) {
        b.steps.push_back({make_context(grp.prompt.id, grp.prompt.tokens,
                                        std::span<const Token>(toks).first(t), context_order),
                           toks[t]});
      }
      range.end = b.steps.size();
      b.responses.push_back(range);
    }
  }
  return b;
}

void register_batch(SoftmaxPolicy& policy, const PreparedBatch& batch) {
  for (const auto& s : batch.steps) policy.register_context(s.ctx);
}

namespace {

double clipped_stopgrad_weight(double r, const ClipConfig& clip) {
  const double lo = 1.0 - clip.eps_low;
  const double hi = 1.0 + clip.eps_high;
  switch (clip.form) {
    case ClipForm::none: return r;
    case ClipForm::literal: return std::min(r, hi);
    case ClipForm::dual: return std::clamp(r, lo, hi);
  }
  return r;
}

double aggregation_weight(AggMode mode, std::size_t total_tokens, std::size_t responses, std::size_t length) {
  switch (mode) {
    case AggMode::token_mean: return 1.0 / static_cast<double>(total_tokens);
    case AggMode::seq_mean_token_mean:
      return 1.0 / (static_cast<double>(responses) * static_cast<double>(length));
    case AggMode::seq_mean_token_sum: return 1.0 / static_cast<double>(responses);
  }
  return 0.0;
}

}  // namespace

FrozenTerms freeze(const PreparedBatch& batch, const SoftmaxPolicy& policy_new, const SoftmaxPolicy& policy_old,
                   const ObjectiveConfig& config) {
  const std::size_t n = batch.steps.size();
  FrozenTerms f;
  f.anchor_log_probs.resize(n);
  f.stopgrad_weights.assign(n, 1.0);
  f.stopgrad_clipped.assign(n, 0);
  f.delta_entropy.resize(n);
  f.mask.assign(n, 0);
  for (const auto& resp : batch.responses) {
    for (std::size_t k = resp.begin; k < resp.end; ++k) {
      const auto& step = batch.steps[k];
      const auto dn = policy_new.distribution(step.ctx);
      const auto dold = policy_old.distribution(step.ctx);
      const auto y = static_cast<std::size_t>(step.token);
      f.anchor_log_probs[k] = dn.log_probs[y];
      if (config.is_mode == IsMode::cispo_stopgrad) {
        const double r = token_ratio(dn.log_probs[y], dold.log_probs[y]);
        f.stopgrad_weights[k] = clipped_stopgrad_weight(r, config.clip);
        f.stopgrad_clipped[k] = f.stopgrad_weights[k] != r ? 1 : 0;
      }
      f.delta_entropy[k] = delta_entropy(dn, dold);
      switch (config.kl.mode) {
        case KlMode::off: f.mask[k] = 0; break;
        case KlMode::undifferentiated: f.mask[k] = 1; break;
        case KlMode::masked:
          f.mask[k] = kl_mask(resp.advantage, f.delta_entropy[k], config.kl.mask_condition) ? 1 : 0;
          break;
      }
    }
  }
  return f;
}

namespace {

// Everything one response contributes: objective part, per-token terms and
// per-token logit-space gradients (V values per token, written in place).
void response_kernel(const PreparedBatch& batch, std::size_t r, const SoftmaxPolicy& policy_new,
                     const SoftmaxPolicy& policy_old, const ObjectiveConfig& cfg, const FrozenTerms& frozen,
                     bool want_grad, double* objective_out, TokenTerm* terms, double* logit_grads) {
  const auto& resp = batch.responses[r];
  const std::size_t T = resp.end - resp.begin;
  const std::size_t V = static_cast<std::size_t>(policy_new.vocab().size);
  const double A = resp.advantage;
  const double beta = cfg.kl.mode == KlMode::off ? 0.0 : cfg.kl.beta;
  const double ent_coef = cfg.entropy_bonus.coef;

  std::vector<TokenDistribution> dn(T), dold(T);
  std::vector<double> ln(T), lo(T), agg(T), coef(T, 0.0);
  for (std::size_t t = 0; t < T; ++t) {
    const auto& step = batch.steps[resp.begin + t];
    dn[t] = policy_new.distribution(step.ctx);
    dold[t] = policy_old.distribution(step.ctx);
    const auto y = static_cast<std::size_t>(step.token);
    ln[t] = dn[t].log_probs[y];
    lo[t] = dold[t].log_probs[y];
    agg[t] = aggregation_weight(cfg.agg_mode, batch.token_count(), batch.responses.size(), T);
  }

  double obj = 0.0;
  switch (cfg.is_mode) {
    case IsMode::token:
      for (std::size_t t = 0; t < T; ++t) {
        const double w = std::exp(ln[t] - lo[t]);
        const auto s = eval_surrogate(w, A, cfg.clip);
        terms[t].weight = w;
        terms[t].clipped = s.clipped;
        terms[t].surrogate = s.value;
        obj += agg[t] * s.value;
        if (s.differentiable) coef[t] += agg[t] * A * w;
      }
      break;
    case IsMode::sequence_geo: {
      double mean_log = 0.0;
      for (std::size_t t = 0; t < T; ++t) mean_log += ln[t] - lo[t];
      const double w = std::exp(mean_log / static_cast<double>(T));
      const auto s = eval_surrogate(w, A, cfg.clip);
      double agg_sum = 0.0;
      for (std::size_t t = 0; t < T; ++t) {
        terms[t].weight = w;
        terms[t].clipped = s.clipped;
        terms[t].surrogate = s.value;
        obj += agg[t] * s.value;
        agg_sum += agg[t];
      }
      // d w / d ln_j = w / T for every j; each of the T copies contributes.
      if (s.differentiable) {
        const double c = agg_sum * A * w / static_cast<double>(T);
        for (std::size_t t = 0; t < T; ++t) coef[t] += c;
      }
      break;
    }
    case IsMode::prefix: {
      double run = 0.0;
      std::vector<double> contrib(T, 0.0);
      for (std::size_t t = 0; t < T; ++t) {
        run += ln[t] - lo[t];
        const double len = static_cast<double>(t + 1);
        const double w = std::exp(run / len);
        const auto s = eval_surrogate(w, A, cfg.clip);
        terms[t].weight = w;
        terms[t].clipped = s.clipped;
        terms[t].surrogate = s.value;
        obj += agg[t] * s.value;
        if (s.differentiable) contrib[t] = agg[t] * A * w / len;
      }
      double suffix = 0.0;
      for (std::size_t t = T; t-- > 0;) {
        suffix += contrib[t];
        coef[t] += suffix;
      }
      break;
    }
    case IsMode::none:
    case IsMode::cispo_stopgrad:
      for (std::size_t t = 0; t < T; ++t) {
        const std::size_t k = resp.begin + t;
        const double c = frozen.stopgrad_weights[k];
        const double e = std::exp(ln[t] - frozen.anchor_log_probs[k]);
        const double value = c * A * e;
        terms[t].weight = cfg.is_mode == IsMode::none ? e : c;
        terms[t].clipped = frozen.stopgrad_clipped[k] != 0;
        terms[t].surrogate = value;
        obj += agg[t] * value;
        coef[t] += agg[t] * value;
      }
      break;
  }

  for (std::size_t t = 0; t < T; ++t) {
    const std::size_t k = resp.begin + t;
    const auto y = static_cast<std::size_t>(batch.steps[k].token);
    const auto& p = dn[t];
    const auto& q = dold[t];
    TokenTerm& term = terms[t];
    term.advantage = A;
    term.mask = frozen.mask[k] != 0;
    term.delta_entropy = frozen.delta_entropy[k];
    term.entropy = entropy(p);
    term.entropy_bonus = ent_coef * term.entropy;
    obj += agg[t] * term.entropy_bonus;

    // KL value for the configured estimator and direction.
    const bool forward = cfg.kl.direction == KlDirection::forward;
    double kl_exact = 0.0;
    if (cfg.kl.estimator == KlEstimator::exact) {
      for (std::size_t a = 0; a < V; ++a) {
        kl_exact += forward ? p.probs[a] * (p.log_probs[a] - q.log_probs[a])
                            : q.probs[a] * (q.log_probs[a] - p.log_probs[a]);
      }
      term.kl = kl_exact;
    } else {
      const double log_r = forward ? lo[t] - ln[t] : ln[t] - lo[t];
      term.kl = std::exp(log_r) - log_r - 1.0;
    }
    const double kl_scale = term.mask ? beta * agg[t] : 0.0;
    obj -= kl_scale * term.kl;

    if (!want_grad) continue;
    double* g = logit_grads + t * V;
    // surrogate and k3 terms act through ln pi(y): coefficient times (e_y - p)
    double c = coef[t];
    if (kl_scale != 0.0 && cfg.kl.estimator == KlEstimator::k3) {
      const double r = std::exp(forward ? lo[t] - ln[t] : ln[t] - lo[t]);
      c -= kl_scale * (forward ? 1.0 - r : r - 1.0);
    }
    for (std::size_t a = 0; a < V; ++a) g[a] = -c * p.probs[a];
    g[y] += c;
    if (kl_scale != 0.0 && cfg.kl.estimator == KlEstimator::exact) {
      for (std::size_t a = 0; a < V; ++a) {
        g[a] -= kl_scale * (forward ? p.probs[a] * (p.log_probs[a] - q.log_probs[a] - kl_exact)
                                    : p.probs[a] - q.probs[a]);
      }
    }
    if (ent_coef != 0.0) {
      const double h = term.entropy;
      for (std::size_t a = 0; a < V; ++a) g[a] += ent_coef * agg[t] * (-p.probs[a] * (p.log_probs[a] + h));
    }
  }
  *objective_out = obj;
}

[[noreturn]] void numerical_failure(const PreparedBatch& batch, const std::vector<double>& parts,
                                    const ObjectiveConfig& cfg) {
  std::ostringstream os;
  os << "non-finite objective or gradient (is_mode=" << to_string(cfg.is_mode)
     << ", agg_mode=" << to_string(cfg.agg_mode) << ", kl.mode=" << to_string(cfg.kl.mode) << ")";
  for (std::size_t r = 0; r < parts.size(); ++r) {
    if (!std::isfinite(parts[r])) {
      os << "; first bad response " << r << " (tokens " << batch.responses[r].begin << ".."
         << batch.responses[r].end << ", advantage " << batch.responses[r].advantage << ")";
      break;
    }
  }
  throw NumericalError(os.str());
}

}  // namespace

LossResult evaluate_objective(const PreparedBatch& batch, const SoftmaxPolicy& policy_new,
                              const SoftmaxPolicy& policy_old, const ObjectiveConfig& config,
                              const FrozenTerms& frozen, const LossOptions& options) {
  if (batch.responses.empty()) throw std::invalid_argument("objective over an empty batch");
  const std::size_t N = batch.steps.size();
  const std::size_t V = static_cast<std::size_t>(policy_new.vocab().size);
  const bool want_grad = options.compute_gradient;

  LossResult out;
  out.terms.tokens.resize(N);
  std::vector<double> logit_grads(want_grad ? N * V : 0);
  std::vector<double> parts(batch.responses.size(), 0.0);

  const auto R = static_cast<std::ptrdiff_t>(batch.responses.size());
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t r = 0; r < R; ++r) {
    const auto& resp = batch.responses[static_cast<std::size_t>(r)];
    response_kernel(batch, static_cast<std::size_t>(r), policy_new, policy_old, config, frozen, want_grad,
                    &parts[static_cast<std::size_t>(r)], out.terms.tokens.data() + resp.begin,
                    want_grad ? logit_grads.data() + resp.begin * V : nullptr);
  }

  for (double p : parts) out.objective += p;

  if (want_grad) {
    out.grad = GradientAccumulator(policy_new.param_count());
    out.grad.count = N;
    if (options.deterministic) {
      for (std::size_t k = 0; k < N; ++k) {
        policy_new.accumulate_param_gradient(batch.steps[k].ctx, std::span<const double>(&logit_grads[k * V], V),
                                             out.grad.values);
      }
    } else {
      const int threads = omp_get_max_threads();
      std::vector<std::vector<double>> local(static_cast<std::size_t>(threads));
#pragma omp parallel
      {
        auto& mine = local[static_cast<std::size_t>(omp_get_thread_num())];
        mine.assign(policy_new.param_count(), 0.0);
#pragma omp for schedule(static)
        for (std::ptrdiff_t k = 0; k < static_cast<std::ptrdiff_t>(N); ++k) {
          const auto kk = static_cast<std::size_t>(k);
          policy_new.accumulate_param_gradient(batch.steps[kk].ctx,
                                               std::span<const double>(&logit_grads[kk * V], V), mine);
        }
      }
      for (const auto& l : local) {
        if (l.empty()) continue;
        for (std::size_t i = 0; i < l.size(); ++i) out.grad.values[i] += l[i];
      }
    }
    for (double v : out.grad.values) {
      if (!std::isfinite(v)) numerical_failure(batch, parts, config);
    }
  }
  if (!std::isfinite(out.objective)) numerical_failure(batch, parts, config);
  return out;
}

LossResult loss_and_grad(const PreparedBatch& batch, const SoftmaxPolicy& policy_new,
                         const SoftmaxPolicy& policy_old, const ObjectiveConfig& config,
                         const LossOptions& options) {
  config.validate();
  const FrozenTerms frozen = freeze(batch, policy_new, policy_old, config);
  return evaluate_objective(batch, policy_new, policy_old, config, frozen, options);
}

LossResult loss_and_grad(std::span<const RolloutGroup> groups, std::span<const AdvantageSet> advantages,
                         const SoftmaxPolicy& policy_new, const SoftmaxPolicy& policy_old,
                         const ObjectiveConfig& config, const LossOptions& options) {
  const PreparedBatch batch = prepare_batch(groups, advantages, policy_new.context_order());
  return loss_and_grad(batch, policy_new, policy_old, config, options);
}

GradientAccumulator exact_trajectory_is_gradient(std::span<const RolloutGroup> groups,
                                                 std::span<const AdvantageSet> advantages,
                                                 const SoftmaxPolicy& policy_new,
                                                 const SoftmaxPolicy& policy_old) {
  const PreparedBatch batch = prepare_batch(groups, advantages, policy_new.context_order());
  const std::size_t V = static_cast<std::size_t>(policy_new.vocab().size);
  const double inv_n = 1.0 / static_cast<double>(batch.token_count());
  GradientAccumulator acc(policy_new.param_count());
  acc.count = batch.token_count();
  std::vector<double> g(V);
  for (const auto& resp : batch.responses) {
    double log_rho = 0.0;
    std::vector<TokenDistribution> dists;
    for (std::size_t k = resp.begin; k < resp.end; ++k) {
      const auto& step = batch.steps[k];
      dists.push_back(policy_new.distribution(step.ctx));
      const auto y = static_cast<std::size_t>(step.token);
      log_rho += dists.back().log_probs[y] - policy_old.log_prob(step.ctx, step.token);
    }
    const double c = inv_n * resp.advantage * std::exp(log_rho);
    for (std::size_t k = resp.begin; k < resp.end; ++k) {
      const auto& p = dists[k - resp.begin];
      for (std::size_t a = 0; a < V; ++a) g[a] = -c * p.probs[a];
      g[static_cast<std::size_t>(batch.steps[k].token)] += c;
      policy_new.accumulate_param_gradient(batch.steps[k].ctx, g, acc.values);
    }
  }
  return acc;
}

EntropyShiftDecomposition entropy_shift_decomposition(const SoftmaxPolicy& policy_old,
                                                      const SoftmaxPolicy& policy_new, const Prompt& prompt,
                                                      int max_len) {
  // Visitation-weighted averages over the states each policy reaches.
  struct Sums {
    double mass = 0.0, h_old = 0.0, h_new = 0.0;
  };
  const int order = policy_old.context_order();
  const Token end = policy_old.vocab().end_token();
  const int V = policy_old.vocab().size;
  auto walk = [&](const SoftmaxPolicy& sampler) {
    Sums s;
    std::vector<Token> prefix;
    std::function<void(double)> rec = [&](double reach) {
      if (reach == 0.0 || static_cast<int>(prefix.size()) >= max_len) return;
      const Context ctx = make_context(prompt.id, prompt.tokens, prefix, order);
      const auto d = sampler.distribution(ctx);
      s.mass += reach;
      s.h_old += reach * entropy(policy_old.distribution(ctx));
      s.h_new += reach * entropy(policy_new.distribution(ctx));
      for (Token a = 0; a < V; ++a) {
        if (a == end) continue;
        prefix.push_back(a);
        rec(reach * d.probs[static_cast<std::size_t>(a)]);
        prefix.pop_back();
      }
    };
    rec(1.0);
    return s;
  };
  const Sums on_old = walk(policy_old);
  const Sums on_new = walk(policy_new);
  EntropyShiftDecomposition out;
  const double new_on_new = on_new.h_new / on_new.mass;
  const double new_on_old = on_old.h_new / on_old.mass;
  const double old_on_old = on_old.h_old / on_old.mass;
  out.total = new_on_new - old_on_old;
  out.state_shift = new_on_new - new_on_old;
  out.during_sampling = new_on_old - old_on_old;
  return out;
}

}  // namespace tepo
