#pragma once

// Softmax token policies with exact entropy and analytic logit/parameter
// gradients. All logs are natural logs (nats).

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <unordered_map>
#include <vector>

#include "tepo/rng.hpp"

namespace tepo {

using Token = std::int32_t;

/// Finite token vocabulary. The last id is END, the one before it is the
/// separator; everything below is payload.
struct Vocabulary {
  int size = 12;

  explicit Vocabulary(int n = 12);

  Token end_token() const { return static_cast<Token>(size - 1); }
  Token separator() const { return static_cast<Token>(size - 2); }
  int payload_size() const { return size - 2; }
  bool contains(Token t) const { return t >= 0 && t < size; }
};

/// Conditioning state: the last `order` tokens of (prompt ++ generated prefix).
struct Context {
  std::uint64_t prompt_id = 0;
  std::vector<Token> window;
};

Context make_context(std::uint64_t prompt_id, std::span<const Token> prompt,
                     std::span<const Token> prefix, int order);

struct TokenDistribution {
  std::vector<double> probs;
  std::vector<double> log_probs;

  std::size_t size() const { return probs.size(); }

  /// Stabilized softmax (max logit subtracted before exponentiation).
  static TokenDistribution from_logits(std::span<const double> logits);
};

/// Distribution actually sampled from at `temperature`. Temperature 0 is
/// greedy decoding: a one-hot on the argmax (lowest id on ties).
TokenDistribution tempered(const TokenDistribution& dist, double temperature);

/// -sum p ln p with 0 ln 0 = 0.
double entropy(const TokenDistribution& dist);

/// dH/d(logit_i) = -p_i (ln p_i + H).
std::vector<double> entropy_logit_gradient(const TokenDistribution& dist);

/// d E_{a~pi}[A(a)] / d(logit_i) = p_i (A_i - E_pi[A]).
std::vector<double> policy_objective_logit_gradient(const TokenDistribution& dist,
                                                    std::span<const double> advantages);

Token sample_token(const TokenDistribution& dist, double temperature, Rng& rng);

Token argmax_token(const TokenDistribution& dist);

enum class PolicyKind { tabular, linear };

/// Thrown in strict mode when a tabular policy meets a context it has no row
/// for, which means the environment and the policy disagree.
class UnknownContextError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Parametric softmax policy over a fixed vocabulary.
///
/// tabular: one logit row per distinct context window. Rows are registered
///   lazily; an unregistered window has all-zero logits (uniform), exactly
///   what a freshly registered row holds.
/// linear:  logits = b + sum_pos W[pos, window[pos]], i.e. a weight matrix
///   over the one-hot encoding of each window slot (pad slot included).
///
/// Reads are safe from any number of threads. Mutation (params(),
/// register_context) is single-writer.
class SoftmaxPolicy {
 public:
  static constexpr int kMaxContextOrder = 8;
  static constexpr int kDefaultContextOrder = 3;

  static SoftmaxPolicy tabular(Vocabulary vocab, int context_order = kDefaultContextOrder);
  static SoftmaxPolicy linear(Vocabulary vocab, int context_order = kDefaultContextOrder);

  PolicyKind kind() const { return kind_; }
  const Vocabulary& vocab() const { return vocab_; }
  int context_order() const { return order_; }
  bool strict() const { return strict_; }
  void set_strict(bool s) { strict_ = s; }

  std::vector<double> logits(const Context& ctx) const;
  TokenDistribution distribution(const Context& ctx) const;
  double log_prob(const Context& ctx, Token token) const;

  /// grad += chain rule of a logit-space gradient through this policy's
  /// parameterization at `ctx`. `grad` uses the parameter layout.
  void accumulate_param_gradient(const Context& ctx, std::span<const double> logit_grad,
                                 std::span<double> grad) const;

  /// Adds a tabular row for the window if it has none. No-op for linear.
  /// Returns true when a row was added.
  bool register_context(const Context& ctx);
  bool has_context(const Context& ctx) const;

  std::size_t param_count() const { return params_.size(); }
  std::span<double> params() { return params_; }
  std::span<const double> params() const { return params_; }

  /// Tabular only: window key of each row, in parameter order.
  const std::vector<std::uint64_t>& row_keys() const { return row_keys_; }

  /// Rebuilds a tabular policy from stored keys and parameters.
  void restore_tabular_rows(std::vector<std::uint64_t> keys, std::vector<double> params);

  /// Fills all parameters with N(0, scale^2).
  void randomize(Rng& rng, double scale);

  std::uint64_t window_key(const Context& ctx) const;

 private:
  SoftmaxPolicy(PolicyKind kind, Vocabulary vocab, int order);

  void check_window(const Context& ctx) const;
  std::size_t feature_index(int slot, Token token) const;

  PolicyKind kind_;
  Vocabulary vocab_;
  int order_;
  bool strict_ = false;
  std::vector<double> params_;
  std::unordered_map<std::uint64_t, std::size_t> row_of_key_;
  std::vector<std::uint64_t> row_keys_;
};

}  // namespace tepo
