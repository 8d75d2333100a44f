#pragma once

// Policy-optimization objectives over rollout groups: importance weights,
// aggregation, clipping, KL penalties with the selective token mask, entropy
// bonus, and their exact parameter gradients.
//
// Per token (response i, position t) the objective adds
//
//   agg_{i,t} * [ surrogate(weight_{i,t}, A_i) - beta * KL_{i,t} * M_{i,t}
//                 + entropy_coef * H(pi_new(.|s_{i,t})) ]
//
// and the gradient is taken w.r.t. the new policy only. The KL mask, the
// entropy change it is based on, the old policy, and the stop-gradient
// weights of `none` / `cispo_stopgrad` are constants under differentiation.

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "tepo/grouping.hpp"
#include "tepo/policy.hpp"

namespace tepo {

enum class IsMode { token, sequence_geo, prefix, none, cispo_stopgrad };
enum class AggMode { token_mean, seq_mean_token_mean, seq_mean_token_sum };
enum class ClipForm { dual, literal, none };
enum class KlMode { off, undifferentiated, masked };
enum class MaskCondition { pos_adv_entropy_down, neg_adv_entropy_up, either };
enum class KlEstimator { exact, k3 };
enum class KlDirection { forward, reverse };

struct ClipConfig {
  double eps_low = 0.2;
  double eps_high = 0.28;
  ClipForm form = ClipForm::dual;
};

struct KlConfig {
  KlMode mode = KlMode::off;
  double beta = 0.0;
  MaskCondition mask_condition = MaskCondition::pos_adv_entropy_down;
  KlEstimator estimator = KlEstimator::exact;
  /// forward is KL(pi_new || pi_old)
  KlDirection direction = KlDirection::forward;
};

struct EntropyBonusConfig {
  double coef = 0.0;
};

struct ObjectiveConfig {
  IsMode is_mode = IsMode::token;
  AggMode agg_mode = AggMode::token_mean;
  ClipConfig clip;
  KlConfig kl;
  EntropyBonusConfig entropy_bonus;

  void validate() const;
};

/// Sequence-level geometric-mean weight, token-mean aggregation, KL masked
/// to positive-advantage tokens whose entropy dropped.
ObjectiveConfig tepo_objective(double beta = 0.001);

/// Token-level ratios with clip-higher and no KL (GRPO/DAPO).
ObjectiveConfig grpo_objective();

std::string to_string(IsMode m);
std::string to_string(AggMode m);
std::string to_string(ClipForm f);
std::string to_string(KlMode m);
std::string to_string(MaskCondition c);
std::string to_string(KlEstimator e);
std::string to_string(KlDirection d);
IsMode is_mode_from_string(const std::string& s);
AggMode agg_mode_from_string(const std::string& s);
ClipForm clip_form_from_string(const std::string& s);
KlMode kl_mode_from_string(const std::string& s);
MaskCondition mask_condition_from_string(const std::string& s);
KlEstimator kl_estimator_from_string(const std::string& s);
KlDirection kl_direction_from_string(const std::string& s);

// --- scalar building blocks -------------------------------------------------

double token_ratio(double new_logp, double old_logp);

/// exp(mean_t(new_t - old_t)): geometric mean of the token ratios.
double sequence_weight(std::span<const double> new_logps, std::span<const double> old_logps);

/// Geometric-mean weight over positions 1..t (1-based, inclusive).
double prefix_weight(std::span<const double> new_logps, std::span<const double> old_logps, std::size_t t);

/// exact: sum_a p(a) ln(p(a)/q(a)); k3: r - ln r - 1 with r = q(y)/p(y) at the
/// realized token y. Forward direction (p = new, q = old).
double token_kl(const TokenDistribution& dist_new, const TokenDistribution& dist_old, KlEstimator estimator,
                Token realized = -1);

/// H(new) - H(old) at the same context.
double delta_entropy(const TokenDistribution& dist_new, const TokenDistribution& dist_old);

/// Strict inequalities; zero advantage or zero entropy change never masks.
bool kl_mask(double advantage, double delta_h, MaskCondition condition);

struct SurrogateValue {
  double value = 0.0;
  bool clipped = false;
};

/// dual:    min(w A, clip(w) A), clipped iff the clip branch is strictly smaller
/// literal: min(w, clip(w)) A,   clipped iff w > 1 + eps_high
/// none:    w A
SurrogateValue surrogate_term(double weight, double advantage, const ClipConfig& clip);

// --- batch objective ----------------------------------------------------------

struct TokenTerm {
  double weight = 1.0;
  bool clipped = false;
  double advantage = 0.0;
  double kl = 0.0;
  bool mask = false;
  double delta_entropy = 0.0;
  double entropy = 0.0;
  double entropy_bonus = 0.0;
  double surrogate = 0.0;
};

struct TokenLossTerms {
  std::vector<TokenTerm> tokens;
};

/// Dense gradient in the policy's parameter layout.
struct GradientAccumulator {
  std::vector<double> values;
  std::size_t count = 0;

  explicit GradientAccumulator(std::size_t n = 0) : values(n, 0.0) {}
  double l2_norm() const;
};

struct LossResult {
  double objective = 0.0;
  GradientAccumulator grad;
  TokenLossTerms terms;
};

class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Flattened token steps of a set of groups, responses contiguous.
struct PreparedBatch {
  struct Step {
    Context ctx;
    Token token = 0;
  };
  struct ResponseRange {
    std::size_t begin = 0;
    std::size_t end = 0;
    double advantage = 0.0;
  };
  std::vector<Step> steps;
  std::vector<ResponseRange> responses;

  std::size_t token_count() const { return steps.size(); }
};

PreparedBatch prepare_batch(std::span<const RolloutGroup> groups, std::span<const AdvantageSet> advantages,
                            int context_order);

/// Registers every context of the batch with a tabular policy.
void register_batch(SoftmaxPolicy& policy, const PreparedBatch& batch);

/// Quantities held constant under differentiation, captured at an anchor
/// parameter point.
struct FrozenTerms {
  std::vector<double> anchor_log_probs;
  std::vector<double> stopgrad_weights;
  std::vector<std::uint8_t> stopgrad_clipped;
  std::vector<double> delta_entropy;
  std::vector<std::uint8_t> mask;
};

FrozenTerms freeze(const PreparedBatch& batch, const SoftmaxPolicy& policy_new,
                   const SoftmaxPolicy& policy_old, const ObjectiveConfig& config);

struct LossOptions {
  /// Fixed-order gradient reduction (bit-reproducible across thread counts).
  bool deterministic = true;
  bool compute_gradient = true;
};

/// Objective and gradient with the frozen terms given explicitly. With frozen
/// terms captured elsewhere this is the function a finite-difference oracle
/// differentiates.
LossResult evaluate_objective(const PreparedBatch& batch, const SoftmaxPolicy& policy_new,
                              const SoftmaxPolicy& policy_old, const ObjectiveConfig& config,
                              const FrozenTerms& frozen, const LossOptions& options = {});

/// OpenMP-parallel over responses. Frozen terms are taken at policy_new.
LossResult loss_and_grad(const PreparedBatch& batch, const SoftmaxPolicy& policy_new,
                         const SoftmaxPolicy& policy_old, const ObjectiveConfig& config,
                         const LossOptions& options = {});

LossResult loss_and_grad(std::span<const RolloutGroup> groups, std::span<const AdvantageSet> advantages,
                         const SoftmaxPolicy& policy_new, const SoftmaxPolicy& policy_old,
                         const ObjectiveConfig& config, const LossOptions& options = {});

/// Straight-line single-threaded reference implementation, kept for testing
/// the parallel kernel. Written from the definitions, O(T^2) per response.
LossResult loss_and_grad_serial(std::span<const RolloutGroup> groups, std::span<const AdvantageSet> advantages,
                                const SoftmaxPolicy& policy_new, const SoftmaxPolicy& policy_old,
                                const ObjectiveConfig& config);

/// Off-policy gradient that keeps the full trajectory ratio:
///   (1/N) sum_i A_i prod_j rho_{i,j} sum_t grad ln pi(y_{i,t})
/// with N the total token count, matching token-mean aggregation.
GradientAccumulator exact_trajectory_is_gradient(std::span<const RolloutGroup> groups,
                                                 std::span<const AdvantageSet> advantages,
                                                 const SoftmaxPolicy& policy_new,
                                                 const SoftmaxPolicy& policy_old);

double clip_fraction(const TokenLossTerms& terms);

/// Split of an entropy change between two policies into the part caused by
/// the shift of the visited-state distribution and the part measured on the
/// old state distribution. Exact enumeration of every response; tiny scale.
struct EntropyShiftDecomposition {
  double total = 0.0;             // E_{d_new} H(new) - E_{d_old} H(old)
  double state_shift = 0.0;       // E_{d_new} H(new) - E_{d_old} H(new)
  double during_sampling = 0.0;   // E_{d_old} H(new) - E_{d_old} H(old)
};

EntropyShiftDecomposition entropy_shift_decomposition(const SoftmaxPolicy& policy_old,
                                                      const SoftmaxPolicy& policy_new, const Prompt& prompt,
                                                      int max_len);

}  // namespace tepo
