#include <doctest.h>

#include <cmath>

#include "helpers.hpp"
#include "tepo/verify_suite.hpp"

using namespace tepo;
using testutil::numeric_gradient;

namespace {

std::vector<double> log_of(std::vector<double> p) {
  for (auto& x : p) x = std::log(x);
  return p;
}

double entropy_of(std::span<const double> logits) { return entropy(TokenDistribution::from_logits(logits)); }

// direct covariance under pi, written out from the definition
double covariance(std::span<const double> p, std::span<const double> r) {
  double el = 0.0, er = 0.0, elr = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    el += p[i] * std::log(p[i]);
    er += p[i] * r[i];
    elr += p[i] * std::log(p[i]) * r[i];
  }
  return elr - el * er;
}

}  // namespace

TEST_CASE("closed-form KL-regularized update") {
  const std::vector<double> pi{0.5, 0.5}, A{1.0, -1.0};
  const auto c = kl_closed_form(pi, A, 1.0);
  CHECK(c[0] == doctest::Approx(0.880797).epsilon(1e-6));
  CHECK(c[1] == doctest::Approx(0.119203).epsilon(1e-6));
  const auto rep = check_lemma1_update(pi, A, 1.0);
  CHECK(rep.status == CheckStatus::pass);
  CHECK(rep.max_error <= 1e-6);

  const std::vector<double> p3{0.2, 0.3, 0.5}, flat{0.7, 0.7, 0.7};
  const auto same = kl_closed_form(p3, flat, 0.5);
  for (std::size_t i = 0; i < 3; ++i) CHECK(same[i] == doctest::Approx(p3[i]).epsilon(1e-14));

  const std::vector<double> A3{2.0, -1.0, 0.3};
  const auto stiff = kl_closed_form(p3, A3, 1e6);
  for (std::size_t i = 0; i < 3; ++i) CHECK(std::abs(stiff[i] - p3[i]) < 1e-5);
}

TEST_CASE("simplex maximizer attains the regularized optimum") {
  // the returned point must beat nearby feasible points on the objective
  const std::vector<double> pi{0.1, 0.6, 0.3}, A{1.5, -0.5, 0.2};
  const double beta = 0.7;
  const auto sol = maximize_kl_regularized(pi, A, beta);
  REQUIRE(sol.converged);
  auto f = [&](const std::vector<double>& p) {
    double v = 0.0;
    for (std::size_t i = 0; i < 3; ++i) v += p[i] * A[i] - beta * p[i] * std::log(p[i] / pi[i]);
    return v;
  };
  const double best = f(sol.p);
  Rng rng(4);
  for (int k = 0; k < 200; ++k) {
    auto q = sol.p;
    const auto i = static_cast<std::size_t>(rng.uniform_int(0, 2));
    const auto j = (i + 1 + static_cast<std::size_t>(rng.uniform_int(0, 1))) % 3;
    const double d = rng.uniform(-1e-3, 1e-3);
    q[i] += d;
    q[j] -= d;
    CHECK(f(q) <= best + 1e-15);
  }
}

TEST_CASE("lemma check is inconclusive below the solver floor") {
  Tolerances tol;
  tol.closed_form = 1e-12;
  const auto r = check_lemma1_update(std::vector<double>{0.5, 0.5}, std::vector<double>{1.0, -1.0}, 1.0, tol);
  CHECK(r.status == CheckStatus::inconclusive);
  CHECK_FALSE(r.note.empty());
  VerifyOptions opt;
  opt.closed_form_per_cell = 1;
  const auto suite = check_lemma1_suite(tol, opt);
  CHECK(suite.status == CheckStatus::inconclusive);
  CHECK(all_passed({suite}));
}

TEST_CASE("entropy and policy gradients are anti-aligned for a favoured dominant action") {
  const auto logits = log_of({0.9, 0.1});
  const std::vector<double> A{1.0, -1.0};
  // oracle: finite differences of H and of J = E[A]
  const auto gh = numeric_gradient(logits, entropy_of);
  const auto gj = numeric_gradient(logits, [&](std::span<const double> l) {
    const auto p = TokenDistribution::from_logits(l).probs;
    return p[0] * A[0] + p[1] * A[1];
  });
  const double inner = gh[0] * gj[0] + gh[1] * gj[1];
  CHECK(inner == doctest::Approx(-0.071190).epsilon(1e-5));
  CHECK(entropy_policy_gradient_inner(logits, A) == doctest::Approx(inner).epsilon(1e-7));
  CHECK(entropy_change_after_pg_step(logits, A, 1e-3) < 0.0);

  const std::vector<double> mirrored{-1.0, 1.0};
  CHECK(entropy_change_after_pg_step(logits, mirrored, 1e-3) > 0.0);

  const std::vector<double> uniform(4, 0.0), any{0.3, -2.0, 1.0, 0.5};
  CHECK(std::abs(entropy_policy_gradient_inner(uniform, any)) < 1e-15);
}

TEST_CASE("first-order prediction of the entropy change") {
  Rng rng(8);
  for (int k = 0; k < 50; ++k) {
    std::vector<double> logits(static_cast<std::size_t>(rng.uniform_int(2, 7))), A(logits.size());
    for (auto& x : logits) x = rng.normal();
    for (auto& x : A) x = rng.uniform(-1.0, 1.0);
    const double lr = 1e-5;
    const double predicted = lr * entropy_policy_gradient_inner(logits, A);
    const double measured = entropy_change_after_pg_step(logits, A, lr);
    if (std::abs(predicted) > 1e-9) CHECK(measured == doctest::Approx(predicted).epsilon(0.01));
  }
}

TEST_CASE("covariance of log-prob and reward") {
  const std::vector<double> p{0.9, 0.1};
  const auto logits = log_of(p);
  const std::vector<double> r{1.0, -1.0}, swapped{-1.0, 1.0};
  const double cov = logprob_reward_covariance(logits, r);
  CHECK(cov == doctest::Approx(covariance(p, r)).epsilon(1e-12));
  CHECK(cov > 0.0);
  CHECK(logprob_reward_covariance(logits, swapped) == doctest::Approx(-cov));

  // natural-gradient step on a softmax: logits move by r / beta
  const double beta = 1e3;
  auto step = [&](const std::vector<double>& rr) {
    auto l = logits;
    for (std::size_t i = 0; i < l.size(); ++i) l[i] += rr[i] / beta;
    return entropy_of(l) - entropy_of(logits);
  };
  CHECK(step(r) < 0.0);
  CHECK(step(swapped) > 0.0);
  CHECK(step(r) == doctest::Approx(-cov / beta).epsilon(0.2));
  const std::vector<double> flat{0.4, 0.4};
  CHECK(logprob_reward_covariance(logits, flat) == doctest::Approx(0.0));
  CHECK(std::abs(step(flat)) <= 10.0 / (beta * beta));
}

TEST_CASE("importance-weighting gap curve") {
  const auto curve = is_gap_interpolation_curve();
  REQUIRE(curve.size() == 11);
  CHECK(curve.front() <= 1e-10);
  CHECK(curve.back() > 1e-3);
  for (std::size_t i = 1; i < curve.size(); ++i) CHECK(curve[i] >= curve[i - 1]);
}

TEST_CASE("reports round trip through JSON") {
  VerificationReport r;
  r.name = "x";
  r.instances = 3;
  r.max_error = 2.5e-9;
  r.tolerance = 1e-6;
  r.status = CheckStatus::inconclusive;
  r.note = "solver";
  r.details = {{"a", 1e-9, true}, {"b", 2.5e-9, false}};
  const auto back = VerificationReport::from_json(r.to_json());
  CHECK(back.name == r.name);
  CHECK(back.instances == 3);
  CHECK(back.max_error == r.max_error);
  CHECK(back.status == CheckStatus::inconclusive);
  CHECK(back.note == "solver");
  REQUIRE(back.details.size() == 2);
  CHECK(back.details[1].label == "b");
  CHECK_FALSE(back.details[1].ok);
  CHECK(back.to_json() == r.to_json());
  CHECK(check_status_from_string("fail") == CheckStatus::fail);
}

TEST_CASE("reduced suite is deterministic and passes") {
  VerifyOptions opt;
  opt.closed_form_per_cell = 1;
  opt.entropy_sign_instances = 40;
  opt.covariance_instances = 20;
  opt.gap_on_policy_instances = 5;
  opt.audit_per_combination = 1;
  opt.clip_batches = 20;
  const auto a = run_all({}, opt);
  const auto b = run_all({}, opt);
  CHECK(reports_to_json(a) == reports_to_json(b));
  for (const auto& r : a) {
    CAPTURE(r.name);
    CHECK(r.status == CheckStatus::pass);
  }
  CHECK(all_passed(a));
}

TEST_CASE("a failed check fails the aggregate") {
  VerificationReport bad;
  bad.status = CheckStatus::fail;
  VerificationReport ok;
  CHECK_FALSE(all_passed({ok, bad}));
}
