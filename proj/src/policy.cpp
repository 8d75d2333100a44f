#include "tepo/policy.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace tepo {

Vocabulary::Vocabulary(int n) : size(n) {
  if (n < 2) throw std::invalid_argument("vocabulary size must be >= 2, got " + std::to_string(n));
}

Context make_context(std::uint64_t prompt_id, std::span<const Token> prompt,
                     std::span<const Token> prefix, int order) {
  Context ctx;
  ctx.prompt_id = prompt_id;
  const std::size_t k = static_cast<std::size_t>(order);
  const std::size_t total = prompt.size() + prefix.size();
  const std::size_t start = total > k ? total - k : 0;
  ctx.window.reserve(std::min(k, total));
  for (std::size_t i = start; i < total; ++i) {
    ctx.window.push_back(i < prompt.size() ? prompt[i] : prefix[i - prompt.size()]);
  }
  return ctx;
}

TokenDistribution TokenDistribution::from_logits(std::span<const double> logits) {
  TokenDistribution d;
  const std::size_t n = logits.size();
  d.probs.resize(n);
  d.log_probs.resize(n);
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (std::size_t i = 0; i < n; ++i) z += std::exp(logits[i] - mx);
  const double log_z = std::log(z);
  for (std::size_t i = 0; i < n; ++i) {
    d.log_probs[i] = logits[i] - mx - log_z;
    d.probs[i] = std::exp(d.log_probs[i]);
  }
  return d;
}

Token argmax_token(const TokenDistribution& dist) {
  return static_cast<Token>(std::max_element(dist.log_probs.begin(), dist.log_probs.end()) -
                            dist.log_probs.begin());
}

TokenDistribution tempered(const TokenDistribution& dist, double temperature) {
  if (temperature < 0.0) throw std::invalid_argument("temperature must be >= 0");
  if (temperature == 0.0) {
    TokenDistribution d;
    d.probs.assign(dist.size(), 0.0);
    d.log_probs.assign(dist.size(), -std::numeric_limits<double>::infinity());
    const auto a = static_cast<std::size_t>(argmax_token(dist));
    d.probs[a] = 1.0;
    d.log_probs[a] = 0.0;
    return d;
  }
  if (temperature == 1.0) return dist;
  std::vector<double> scaled(dist.size());
  for (std::size_t i = 0; i < dist.size(); ++i) scaled[i] = dist.log_probs[i] / temperature;
  return TokenDistribution::from_logits(scaled);
}

double entropy(const TokenDistribution& dist) {
  double h = 0.0;
  for (std::size_t i = 0; i < dist.size(); ++i) {
    if (dist.probs[i] > 0.0) h -= dist.probs[i] * dist.log_probs[i];
  }
  return h;
}

std::vector<double> entropy_logit_gradient(const TokenDistribution& dist) {
  const double h = entropy(dist);
  std::vector<double> g(dist.size());
  for (std::size_t i = 0; i < dist.size(); ++i) {
    g[i] = dist.probs[i] > 0.0 ? -dist.probs[i] * (dist.log_probs[i] + h) : 0.0;
  }
  return g;
}

std::vector<double> policy_objective_logit_gradient(const TokenDistribution& dist,
                                                    std::span<const double> advantages) {
  if (advantages.size() != dist.size()) {
    throw std::invalid_argument("advantage vector must have one entry per token");
  }
  double mean = 0.0;
  for (std::size_t i = 0; i < dist.size(); ++i) mean += dist.probs[i] * advantages[i];
  std::vector<double> g(dist.size());
  for (std::size_t i = 0; i < dist.size(); ++i) g[i] = dist.probs[i] * (advantages[i] - mean);
  return g;
}

Token sample_token(const TokenDistribution& dist, double temperature, Rng& rng) {
  if (temperature == 0.0) return argmax_token(dist);
  const TokenDistribution d = tempered(dist, temperature);
  const double u = rng.uniform();
  double acc = 0.0;
  Token last_positive = 0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (d.probs[i] <= 0.0) continue;
    acc += d.probs[i];
    last_positive = static_cast<Token>(i);
    if (u < acc) return last_positive;
  }
  return last_positive;  // u landed in the rounding gap above acc
}

// ---------------------------------------------------------------------------

SoftmaxPolicy::SoftmaxPolicy(PolicyKind kind, Vocabulary vocab, int order)
    : kind_(kind), vocab_(vocab), order_(order) {
  if (order < 1 || order > kMaxContextOrder) {
    throw std::invalid_argument("context order must be in [1, 8], got " + std::to_string(order));
  }
  // Window keys are base-(V+1) numbers with `order` digits.
  const double key_bits = order * std::log2(static_cast<double>(vocab.size + 1));
  if (key_bits >= 63.0) throw std::invalid_argument("vocabulary too large for this context order");
  if (kind == PolicyKind::linear) {
    const auto features = static_cast<std::size_t>(order) * (vocab.size + 1);
    params_.assign(features * vocab.size + vocab.size, 0.0);
  }
}

SoftmaxPolicy SoftmaxPolicy::tabular(Vocabulary vocab, int context_order) {
  return SoftmaxPolicy(PolicyKind::tabular, vocab, context_order);
}

SoftmaxPolicy SoftmaxPolicy::linear(Vocabulary vocab, int context_order) {
  return SoftmaxPolicy(PolicyKind::linear, vocab, context_order);
}

void SoftmaxPolicy::check_window(const Context& ctx) const {
  if (ctx.window.size() > static_cast<std::size_t>(order_)) {
    throw std::invalid_argument("context window longer than the policy's context order");
  }
  for (Token t : ctx.window) {
    if (!vocab_.contains(t)) {
      throw std::invalid_argument("context token " + std::to_string(t) + " outside vocabulary");
    }
  }
}

std::uint64_t SoftmaxPolicy::window_key(const Context& ctx) const {
  check_window(ctx);
  const auto base = static_cast<std::uint64_t>(vocab_.size + 1);
  const auto pad = static_cast<std::uint64_t>(vocab_.size);
  const std::size_t missing = static_cast<std::size_t>(order_) - ctx.window.size();
  std::uint64_t key = 0;
  for (int slot = 0; slot < order_; ++slot) {
    const auto s = static_cast<std::size_t>(slot);
    const std::uint64_t digit = s < missing ? pad : static_cast<std::uint64_t>(ctx.window[s - missing]);
    key = key * base + digit;
  }
  return key;
}

std::size_t SoftmaxPolicy::feature_index(int slot, Token token) const {
  return static_cast<std::size_t>(slot) * (vocab_.size + 1) + static_cast<std::size_t>(token);
}

std::vector<double> SoftmaxPolicy::logits(const Context& ctx) const {
  const auto V = static_cast<std::size_t>(vocab_.size);
  std::vector<double> out(V, 0.0);
  if (kind_ == PolicyKind::tabular) {
    const auto it = row_of_key_.find(window_key(ctx));
    if (it == row_of_key_.end()) {
      if (strict_) throw UnknownContextError("no tabular row for context of prompt " +
                                             std::to_string(ctx.prompt_id));
      return out;
    }
    std::copy_n(params_.begin() + static_cast<std::ptrdiff_t>(it->second * V), V, out.begin());
    return out;
  }
  check_window(ctx);
  const std::size_t missing = static_cast<std::size_t>(order_) - ctx.window.size();
  const std::size_t bias = params_.size() - V;
  for (std::size_t a = 0; a < V; ++a) out[a] = params_[bias + a];
  for (int slot = 0; slot < order_; ++slot) {
    const auto s = static_cast<std::size_t>(slot);
    const Token tok = s < missing ? static_cast<Token>(vocab_.size) : ctx.window[s - missing];
    const std::size_t row = feature_index(slot, tok) * V;
    for (std::size_t a = 0; a < V; ++a) out[a] += params_[row + a];
  }
  return out;
}

TokenDistribution SoftmaxPolicy::distribution(const Context& ctx) const {
  return TokenDistribution::from_logits(logits(ctx));
}

double SoftmaxPolicy::log_prob(const Context& ctx, Token token) const {
  if (!vocab_.contains(token)) throw std::invalid_argument("token outside vocabulary");
  return distribution(ctx).log_probs[static_cast<std::size_t>(token)];
}

void SoftmaxPolicy::accumulate_param_gradient(const Context& ctx, std::span<const double> logit_grad,
                                              std::span<double> grad) const {
  const auto V = static_cast<std::size_t>(vocab_.size);
  if (logit_grad.size() != V) throw std::invalid_argument("logit gradient has wrong size");
  if (grad.size() < params_.size()) throw std::invalid_argument("gradient buffer smaller than parameters");
  if (kind_ == PolicyKind::tabular) {
    const auto it = row_of_key_.find(window_key(ctx));
    if (it == row_of_key_.end()) {
      throw UnknownContextError("gradient requested for an unregistered tabular context");
    }
    double* row = grad.data() + it->second * V;
    for (std::size_t a = 0; a < V; ++a) row[a] += logit_grad[a];
    return;
  }
  const std::size_t missing = static_cast<std::size_t>(order_) - ctx.window.size();
  const std::size_t bias = params_.size() - V;
  for (std::size_t a = 0; a < V; ++a) grad[bias + a] += logit_grad[a];
  for (int slot = 0; slot < order_; ++slot) {
    const auto s = static_cast<std::size_t>(slot);
    const Token tok = s < missing ? static_cast<Token>(vocab_.size) : ctx.window[s - missing];
    double* row = grad.data() + feature_index(slot, tok) * V;
    for (std::size_t a = 0; a < V; ++a) row[a] += logit_grad[a];
  }
}

bool SoftmaxPolicy::register_context(const Context& ctx) {
  if (kind_ != PolicyKind::tabular) {
    check_window(ctx);
    return false;
  }
  const std::uint64_t key = window_key(ctx);
  if (row_of_key_.contains(key)) return false;
  row_of_key_.emplace(key, row_keys_.size());
  row_keys_.push_back(key);
  params_.resize(params_.size() + static_cast<std::size_t>(vocab_.size), 0.0);
  return true;
}

bool SoftmaxPolicy::has_context(const Context& ctx) const {
  if (kind_ != PolicyKind::tabular) return true;
  return row_of_key_.contains(window_key(ctx));
}

void SoftmaxPolicy::restore_tabular_rows(std::vector<std::uint64_t> keys, std::vector<double> params) {
  if (kind_ != PolicyKind::tabular) throw std::logic_error("restore_tabular_rows on a linear policy");
  if (params.size() != keys.size() * static_cast<std::size_t>(vocab_.size)) {
    throw std::invalid_argument("tabular parameter count does not match row count");
  }
  row_of_key_.clear();
  for (std::size_t r = 0; r < keys.size(); ++r) {
    if (!row_of_key_.emplace(keys[r], r).second) throw std::invalid_argument("duplicate tabular row key");
  }
  row_keys_ = std::move(keys);
  params_ = std::move(params);
}

void SoftmaxPolicy::randomize(Rng& rng, double scale) {
  for (double& p : params_) p = scale * rng.normal();
}

}  // namespace tepo
