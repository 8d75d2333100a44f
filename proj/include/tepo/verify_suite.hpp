#pragma once

// Numerical checks of the objective's derivations: the KL-regularized
// closed-form update, entropy-change signs under a policy-gradient step, the
// covariance approximation of the entropy change under a natural-gradient
// step, the gap between token-level and trajectory importance weighting, a
// finite-difference audit of every objective variant, and clip-fraction
// dominance of sequence-level weights.

#include <cstdint>
#include <string>
#include <vector>

#include "tepo/objectives.hpp"

namespace tepo {

enum class CheckStatus { pass, fail, inconclusive };

std::string to_string(CheckStatus s);
CheckStatus check_status_from_string(const std::string& s);

struct InstanceDetail {
  std::string label;
  double error = 0.0;
  bool ok = true;
};

struct VerificationReport {
  std::string name;
  std::size_t instances = 0;
  double max_error = 0.0;
  double tolerance = 0.0;
  CheckStatus status = CheckStatus::pass;
  std::string note;
  std::vector<InstanceDetail> details;

  bool passed() const { return status == CheckStatus::pass; }
  std::string to_json() const;
  static VerificationReport from_json(const std::string& text);
};

struct Tolerances {
  double closed_form = 1e-6;
  /// below this the simplex solver cannot certify agreement
  double closed_form_solver_floor = 1e-10;
  double first_order_rel = 0.10;
  double first_order_lr = 1e-4;
  double covariance_rel = 0.20;
  double covariance_min_abs = 1e-3;
  double on_policy_gap = 1e-10;
  double gradient_rel = 1e-5;
  double fd_step = 1e-6;
  double clip_boundary_margin = 1e-4;
  double clip_strict_fraction = 0.80;
};

struct VerifyOptions {
  std::uint64_t seed = 7;
  int closed_form_per_cell = 4;        // per (dim, beta) cell, dims 2..10
  int entropy_sign_instances = 500;
  int covariance_instances = 200;
  double covariance_beta = 1e4;
  int gap_on_policy_instances = 50;
  int audit_per_combination = 6;  // x 90 combinations
  int clip_batches = 100;
};

// --- single-instance building blocks ------------------------------------------

/// pi_{k+1}(a) proportional to pi_k(a) exp(A(a) / beta).
std::vector<double> kl_closed_form(std::span<const double> pi_k, std::span<const double> A, double beta);

struct SimplexSolution {
  std::vector<double> p;
  int iterations = 0;
  bool converged = false;
};

/// argmax_p E_p[A] - beta KL(p || pi_k) over the open simplex by damped
/// Newton steps restricted to the simplex tangent space.
SimplexSolution maximize_kl_regularized(std::span<const double> pi_k, std::span<const double> A, double beta);

/// <grad H, grad J> in logit space, J = E_{a~pi}[A(a)].
double entropy_policy_gradient_inner(std::span<const double> logits, std::span<const double> A);

/// H after one exact ascent step phi += lr * grad J, minus H before.
double entropy_change_after_pg_step(std::span<const double> logits, std::span<const double> A, double lr);

/// Cov_{a~pi}(ln pi(a), r(a)).
double logprob_reward_covariance(std::span<const double> logits, std::span<const double> r);

// --- checks -------------------------------------------------------------------

VerificationReport check_lemma1_update(std::span<const double> pi_k, std::span<const double> A, double beta,
                                       const Tolerances& tol = {});
VerificationReport check_lemma1_suite(const Tolerances& tol, const VerifyOptions& opt);
VerificationReport check_entropy_change_signs(const Tolerances& tol, const VerifyOptions& opt);
VerificationReport check_covariance_formula(const Tolerances& tol, const VerifyOptions& opt);
VerificationReport check_is_gradient_gap(const Tolerances& tol, const VerifyOptions& opt);
VerificationReport check_gradient_audit(const Tolerances& tol, const VerifyOptions& opt);
VerificationReport check_clip_fraction_dominance(const Tolerances& tol, const VerifyOptions& opt);

/// Off-policy gap ||token-level grad - trajectory grad|| along
/// theta(s) = theta_old + s (theta_new - theta_old), s = 0, 0.1, ..., 1, on the
/// fixed two-token toy.
std::vector<double> is_gap_interpolation_curve();

std::vector<VerificationReport> run_all(const Tolerances& tol = {}, const VerifyOptions& opt = {});

/// true when no report failed (inconclusive is not a failure)
bool all_passed(const std::vector<VerificationReport>& reports);

std::string reports_to_json(const std::vector<VerificationReport>& reports);

}  // namespace tepo
