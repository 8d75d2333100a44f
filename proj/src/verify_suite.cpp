#include "tepo/verify_suite.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "tepo/env.hpp"

namespace tepo {

namespace {

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(6);
  os << v;
  return os.str();
}

double shannon(std::span<const double> p) {
  double h = 0.0;
  for (double x : p)
    if (x > 0.0) h -= x * std::log(x);
  return h;
}

std::vector<double> softmax(std::span<const double> logits) {
  return TokenDistribution::from_logits(logits).probs;
}

std::vector<double> random_simplex(Rng& rng, int n, double spread = 1.0) {
  std::vector<double> l(static_cast<std::size_t>(n));
  for (auto& x : l) x = spread * rng.normal();
  return softmax(l);
}

void finish(VerificationReport& r) {
  bool ok = true;
  for (const auto& d : r.details) ok = ok && d.ok;
  r.status = ok && r.max_error <= r.tolerance ? CheckStatus::pass : CheckStatus::fail;
}

// A batch of tiny groups with arbitrary token sequences; rewards are real so
// advantages are never degenerate.
struct TinyBatch {
  std::vector<RolloutGroup> groups;
  std::vector<AdvantageSet> adv;
};

TinyBatch random_tiny_batch(Rng& rng, const Vocabulary& vocab, int max_groups, int max_g, int max_t) {
  TinyBatch b;
  const int n_groups = static_cast<int>(rng.uniform_int(1, max_groups));
  for (int g = 0; g < n_groups; ++g) {
    RolloutGroup grp;
    grp.prompt.id = rng.next();
    for (int i = 0; i < 2; ++i) grp.prompt.tokens.push_back(static_cast<Token>(rng.uniform_int(0, vocab.size - 1)));
    const int G = static_cast<int>(rng.uniform_int(2, max_g));
    for (int i = 0; i < G; ++i) {
      Response r;
      const int T = static_cast<int>(rng.uniform_int(1, max_t));
      for (int t = 0; t < T; ++t) r.tokens.push_back(static_cast<Token>(rng.uniform_int(0, vocab.size - 1)));
      r.behavior_log_probs.assign(r.tokens.size(), 0.0);
      grp.responses.push_back(std::move(r));
      grp.rewards.push_back(rng.uniform(-1.0, 1.0));
    }
    b.adv.push_back(normalize_advantages(grp.rewards));
    b.groups.push_back(std::move(grp));
  }
  return b;
}

void perturb(SoftmaxPolicy& p, Rng& rng, double scale) {
  for (auto& x : p.params()) x += scale * rng.normal();
}

}  // namespace

std::string to_string(CheckStatus s) {
  switch (s) {
    case CheckStatus::pass: return "pass";
    case CheckStatus::fail: return "fail";
    case CheckStatus::inconclusive: return "inconclusive";
  }
  return "?";
}

CheckStatus check_status_from_string(const std::string& s) {
  if (s == "pass") return CheckStatus::pass;
  if (s == "fail") return CheckStatus::fail;
  if (s == "inconclusive") return CheckStatus::inconclusive;
  throw std::invalid_argument("unknown check status '" + s + "'");
}

namespace {

nlohmann::ordered_json report_json(const VerificationReport& r) {
  nlohmann::ordered_json j;
  j["name"] = r.name;
  j["status"] = to_string(r.status);
  j["instances"] = r.instances;
  j["max_error"] = r.max_error;
  j["tolerance"] = r.tolerance;
  j["note"] = r.note;
  auto& d = j["details"] = nlohmann::ordered_json::array();
  for (const auto& x : r.details) d.push_back({{"label", x.label}, {"error", x.error}, {"ok", x.ok}});
  return j;
}

}  // namespace

std::string VerificationReport::to_json() const { return report_json(*this).dump(); }

VerificationReport VerificationReport::from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  VerificationReport r;
  r.name = j.at("name").get<std::string>();
  r.status = check_status_from_string(j.at("status").get<std::string>());
  r.instances = j.at("instances").get<std::size_t>();
  r.max_error = j.at("max_error").get<double>();
  r.tolerance = j.at("tolerance").get<double>();
  r.note = j.value("note", "");
  for (const auto& d : j.at("details")) {
    r.details.push_back({d.at("label").get<std::string>(), d.at("error").get<double>(), d.at("ok").get<bool>()});
  }
  return r;
}

std::string reports_to_json(const std::vector<VerificationReport>& reports) {
  nlohmann::ordered_json j;
  j["passed"] = all_passed(reports);
  auto& arr = j["checks"] = nlohmann::ordered_json::array();
  for (const auto& r : reports) arr.push_back(report_json(r));
  return j.dump(2);
}

bool all_passed(const std::vector<VerificationReport>& reports) {
  return std::none_of(reports.begin(), reports.end(),
                      [](const VerificationReport& r) { return r.status == CheckStatus::fail; });
}

// --- KL-regularized update ------------------------------------------------------

std::vector<double> kl_closed_form(std::span<const double> pi_k, std::span<const double> A, double beta) {
  if (!(beta > 0.0)) throw std::invalid_argument("beta must be > 0");
  if (pi_k.size() != A.size() || pi_k.empty()) throw std::invalid_argument("pi_k and A must have equal size");
  std::vector<double> logits(pi_k.size());
  for (std::size_t i = 0; i < logits.size(); ++i) logits[i] = std::log(pi_k[i]) + A[i] / beta;
  return softmax(logits);
}

SimplexSolution maximize_kl_regularized(std::span<const double> pi_k, std::span<const double> A, double beta) {
  const std::size_t n = pi_k.size();
  auto objective = [&](const std::vector<double>& p) {
    double f = 0.0;
    for (std::size_t i = 0; i < n; ++i) f += p[i] * A[i] - beta * p[i] * std::log(p[i] / pi_k[i]);
    return f;
  };
  SimplexSolution s;
  s.p.assign(n, 1.0 / static_cast<double>(n));
  std::vector<double> g(n), d(n), trial(n);
  for (s.iterations = 0; s.iterations < 500; ++s.iterations) {
    for (std::size_t i = 0; i < n; ++i) g[i] = A[i] - beta * (std::log(s.p[i] / pi_k[i]) + 1.0);
    // Hessian is diag(-beta / p); project the Newton step onto sum(d) = 0.
    double gbar = 0.0;
    for (std::size_t i = 0; i < n; ++i) gbar += s.p[i] * g[i];
    double decrement = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      d[i] = s.p[i] * (g[i] - gbar) / beta;
      decrement += d[i] * (g[i] - gbar);
    }
    if (decrement < 1e-24) {
      s.converged = true;
      break;
    }
    double t = 1.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (d[i] < 0.0) t = std::min(t, -0.99 * s.p[i] / d[i]);
    }
    if (t == 1.0 && decrement < 1e-8) {
      // quadratic-convergence region: f differences are below rounding, take
      // the full step
      for (std::size_t i = 0; i < n; ++i) trial[i] = s.p[i] + d[i];
      const double sum = std::accumulate(trial.begin(), trial.end(), 0.0);
      for (std::size_t i = 0; i < n; ++i) s.p[i] = trial[i] / sum;
      continue;
    }
    const double f0 = objective(s.p);
    bool moved = false;
    for (int k = 0; k < 60; ++k, t *= 0.5) {
      for (std::size_t i = 0; i < n; ++i) trial[i] = s.p[i] + t * d[i];
      const double sum = std::accumulate(trial.begin(), trial.end(), 0.0);
      for (auto& x : trial) x /= sum;
      if (objective(trial) >= f0 + 0.25 * t * decrement) {
        moved = true;
        break;
      }
    }
    if (!moved) {
      // no representable ascent left: the iterate sits at rounding level
      s.converged = false;
      break;
    }
    s.p = trial;
  }
  return s;
}

VerificationReport check_lemma1_update(std::span<const double> pi_k, std::span<const double> A, double beta,
                                       const Tolerances& tol) {
  VerificationReport r;
  r.name = "kl_closed_form_update";
  r.tolerance = tol.closed_form;
  r.instances = 1;
  const auto closed = kl_closed_form(pi_k, A, beta);
  const auto num = maximize_kl_regularized(pi_k, A, beta);
  for (std::size_t i = 0; i < closed.size(); ++i) r.max_error = std::max(r.max_error, std::abs(closed[i] - num.p[i]));
  r.details.push_back({"dim=" + std::to_string(pi_k.size()) + " beta=" + fmt(beta), r.max_error,
                       r.max_error <= tol.closed_form});
  if (!num.converged) {
    r.status = CheckStatus::inconclusive;
    r.note = "simplex solver did not converge";
  } else if (tol.closed_form < tol.closed_form_solver_floor) {
    r.status = CheckStatus::inconclusive;
    r.note = "tolerance below solver precision floor " + fmt(tol.closed_form_solver_floor);
  } else {
    r.status = r.max_error <= tol.closed_form ? CheckStatus::pass : CheckStatus::fail;
  }
  return r;
}

VerificationReport check_lemma1_suite(const Tolerances& tol, const VerifyOptions& opt) {
  VerificationReport r;
  r.name = "kl_closed_form_update";
  r.tolerance = tol.closed_form;
  Rng rng(derive_seed({opt.seed, 1}));
  bool inconclusive = false;
  std::string why;
  for (int dim = 2; dim <= 10; ++dim) {
    for (double beta : {0.1, 1.0, 10.0}) {
      for (int k = 0; k < opt.closed_form_per_cell; ++k) {
        const auto pi = random_simplex(rng, dim);
        std::vector<double> A(static_cast<std::size_t>(dim));
        for (auto& a : A) a = rng.uniform(-3.0, 3.0);
        const auto one = check_lemma1_update(pi, A, beta, tol);
        r.max_error = std::max(r.max_error, one.max_error);
        r.details.push_back(one.details.front());
        ++r.instances;
        if (one.status == CheckStatus::inconclusive) {
          inconclusive = true;
          why = one.note;
        }
      }
    }
  }
  finish(r);
  if (r.status == CheckStatus::fail && inconclusive) {
    r.status = CheckStatus::inconclusive;
    r.note = why;
  } else if (inconclusive && r.status == CheckStatus::pass) {
    r.status = CheckStatus::inconclusive;
    r.note = why;
  }
  return r;
}

// --- entropy change under a policy-gradient step ----------------------------------

double entropy_policy_gradient_inner(std::span<const double> logits, std::span<const double> A) {
  const auto d = TokenDistribution::from_logits(logits);
  const auto gh = entropy_logit_gradient(d);
  const auto gj = policy_objective_logit_gradient(d, A);
  double s = 0.0;
  for (std::size_t i = 0; i < gh.size(); ++i) s += gh[i] * gj[i];
  return s;
}

double entropy_change_after_pg_step(std::span<const double> logits, std::span<const double> A, double lr) {
  const auto d = TokenDistribution::from_logits(logits);
  const auto gj = policy_objective_logit_gradient(d, A);
  std::vector<double> next(logits.begin(), logits.end());
  for (std::size_t i = 0; i < next.size(); ++i) next[i] += lr * gj[i];
  return entropy(TokenDistribution::from_logits(next)) - entropy(d);
}

VerificationReport check_entropy_change_signs(const Tolerances& tol, const VerifyOptions& opt) {
  VerificationReport r;
  r.name = "entropy_change_signs";
  r.tolerance = tol.first_order_rel;
  Rng rng(derive_seed({opt.seed, 2}));
  for (int k = 0; k < opt.entropy_sign_instances; ++k) {
    const int n = static_cast<int>(rng.uniform_int(2, 8));
    const auto dom = static_cast<std::size_t>(rng.uniform_int(0, n - 1));
    const double p_dom = rng.uniform(0.8, 0.99);
    std::vector<double> p(static_cast<std::size_t>(n));
    const auto rest = random_simplex(rng, n - 1);
    for (std::size_t i = 0, j = 0; i < p.size(); ++i) p[i] = i == dom ? p_dom : (1.0 - p_dom) * rest[j++];
    std::vector<double> logits(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) logits[i] = std::log(p[i]);

    const bool top = k % 2 == 0;
    std::vector<double> A(p.size());
    double hi = -1e300, lo = 1e300;
    for (std::size_t i = 0; i < A.size(); ++i) {
      if (i == dom) continue;
      A[i] = rng.uniform(-1.0, 1.0);
      hi = std::max(hi, A[i]);
      lo = std::min(lo, A[i]);
    }
    const double margin = rng.uniform(0.05, 1.0);
    A[dom] = top ? hi + margin : lo - margin;

    const double inner = entropy_policy_gradient_inner(logits, A);
    double lr = tol.first_order_lr;
    double measured = entropy_change_after_pg_step(logits, A, lr);
    double rel = std::abs(measured - lr * inner) / std::abs(lr * inner);
    for (int h = 0; h < 10 && !(rel <= tol.first_order_rel); ++h) {
      lr *= 0.5;
      measured = entropy_change_after_pg_step(logits, A, lr);
      rel = std::abs(measured - lr * inner) / std::abs(lr * inner);
    }
    const bool sign_ok = top ? measured < 0.0 : measured > 0.0;
    r.max_error = std::max(r.max_error, rel);
    r.details.push_back({std::string(top ? "top" : "bottom") + " n=" + std::to_string(n) + " p=" + fmt(p_dom) +
                             " lr=" + fmt(lr) + " dH=" + fmt(measured),
                         rel, sign_ok && rel <= tol.first_order_rel});
    ++r.instances;
  }
  finish(r);
  return r;
}

// --- covariance form of the entropy change -----------------------------------------

double logprob_reward_covariance(std::span<const double> logits, std::span<const double> r) {
  const auto d = TokenDistribution::from_logits(logits);
  double el = 0.0, er = 0.0, elr = 0.0;
  for (std::size_t a = 0; a < d.size(); ++a) {
    el += d.probs[a] * d.log_probs[a];
    er += d.probs[a] * r[a];
    elr += d.probs[a] * d.log_probs[a] * r[a];
  }
  return elr - el * er;
}

VerificationReport check_covariance_formula(const Tolerances& tol, const VerifyOptions& opt) {
  VerificationReport r;
  r.name = "covariance_formula";
  r.tolerance = tol.covariance_rel;
  const double beta = opt.covariance_beta;
  Rng rng(derive_seed({opt.seed, 3}));
  int attempts = 0;
  while (static_cast<int>(r.instances) < opt.covariance_instances && attempts < 100 * opt.covariance_instances) {
    ++attempts;
    // a single state, or a small mixture of states under a fixed visitation distribution
    const int states = rng.uniform() < 0.75 ? 1 : static_cast<int>(rng.uniform_int(2, 3));
    const auto d = random_simplex(rng, states);
    double cov = 0.0, dh = 0.0;
    for (int s = 0; s < states; ++s) {
      const int n = static_cast<int>(rng.uniform_int(2, 8));
      std::vector<double> logits(static_cast<std::size_t>(n)), rew(logits.size()), next(logits.size());
      for (auto& x : logits) x = 1.5 * rng.normal();
      for (auto& x : rew) x = rng.uniform(-1.0, 1.0);
      for (std::size_t a = 0; a < next.size(); ++a) next[a] = logits[a] + rew[a] / beta;
      cov += d[static_cast<std::size_t>(s)] * logprob_reward_covariance(logits, rew);
      dh += d[static_cast<std::size_t>(s)] * (shannon(softmax(next)) - shannon(softmax(logits)));
    }
    if (std::abs(cov) <= tol.covariance_min_abs) continue;
    const double predicted = -cov / beta;
    const bool sign_ok = (dh < 0.0) == (predicted < 0.0) && dh != 0.0;
    const double rel = std::abs(dh - predicted) / std::abs(predicted);
    r.max_error = std::max(r.max_error, rel);
    r.details.push_back({"states=" + std::to_string(states) + " cov=" + fmt(cov) + " dH=" + fmt(dh), rel,
                         sign_ok && rel <= tol.covariance_rel});
    ++r.instances;
  }
  finish(r);
  if (static_cast<int>(r.instances) < opt.covariance_instances) {
    r.status = CheckStatus::inconclusive;
    r.note = "generator produced too few instances with |Cov| above the threshold";
  }
  r.note += (r.note.empty() ? "" : "; ") + std::string("beta=") + fmt(beta);
  return r;
}

// --- token-level vs trajectory importance weighting ----------------------------------

namespace {

ObjectiveConfig plain_token_objective() {
  ObjectiveConfig c;
  c.is_mode = IsMode::token;
  c.agg_mode = AggMode::token_mean;
  c.clip.form = ClipForm::none;
  c.kl.mode = KlMode::off;
  return c;
}

double gap_norm(std::span<const RolloutGroup> groups, std::span<const AdvantageSet> adv, const SoftmaxPolicy& pnew,
                const SoftmaxPolicy& pold) {
  const auto a = loss_and_grad(groups, adv, pnew, pold, plain_token_objective()).grad.values;
  const auto b = exact_trajectory_is_gradient(groups, adv, pnew, pold).values;
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

struct GapToy {
  std::vector<RolloutGroup> groups;
  std::vector<AdvantageSet> adv;
  SoftmaxPolicy old_policy = SoftmaxPolicy::tabular(Vocabulary(3), 1);
  SoftmaxPolicy new_policy = SoftmaxPolicy::tabular(Vocabulary(3), 1);
};

// Vocabulary {0, SEP=1, END=2}, order 1. Response "0 0" has token ratios 2 and
// 0.5 under the new policy (product 1); response "END" has ratio 0.5.
GapToy make_gap_toy() {
  GapToy toy;
  RolloutGroup g;
  g.prompt.id = 1;
  g.prompt.tokens = {1};
  g.responses.push_back({{0, 0}, {0.0, 0.0}, 1.0});
  g.responses.push_back({{2}, {0.0}, 1.0});
  g.rewards = {1.0, 0.0};
  toy.adv.push_back(normalize_advantages(g.rewards));
  toy.groups.push_back(g);
  const auto batch = prepare_batch(toy.groups, toy.adv, 1);
  register_batch(toy.old_policy, batch);
  register_batch(toy.new_policy, batch);
  const Context after_sep = make_context(1, g.prompt.tokens, {}, 1);
  const std::vector<Token> zero{0};
  const Context after_zero = make_context(1, g.prompt.tokens, zero, 1);
  auto set_row = [&](const Context& c, double x) {
    auto params = toy.new_policy.params();
    const std::size_t row = static_cast<std::size_t>(
        std::find(toy.new_policy.row_keys().begin(), toy.new_policy.row_keys().end(), toy.new_policy.window_key(c)) -
        toy.new_policy.row_keys().begin());
    params[row * 3 + 0] = x;
  };
  set_row(after_sep, std::log(4.0));  // pi(0) = 2/3, pi(END) = 1/6
  set_row(after_zero, std::log(0.4));  // pi(0) = 1/6
  return toy;
}

}  // namespace

std::vector<double> is_gap_interpolation_curve() {
  const GapToy toy = make_gap_toy();
  std::vector<double> curve;
  for (int k = 0; k <= 10; ++k) {
    const double s = k / 10.0;
    SoftmaxPolicy mid = toy.old_policy;
    auto p = mid.params();
    const auto pn = toy.new_policy.params();
    const auto po = toy.old_policy.params();
    for (std::size_t i = 0; i < p.size(); ++i) p[i] = po[i] + s * (pn[i] - po[i]);
    curve.push_back(gap_norm(toy.groups, toy.adv, mid, toy.old_policy));
  }
  return curve;
}

VerificationReport check_is_gradient_gap(const Tolerances& tol, const VerifyOptions& opt) {
  VerificationReport r;
  r.name = "is_gradient_gap";
  r.tolerance = tol.on_policy_gap;
  Rng rng(derive_seed({opt.seed, 4}));
  for (int k = 0; k < opt.gap_on_policy_instances; ++k) {
    const Vocabulary vocab(static_cast<int>(rng.uniform_int(3, 6)));
    const int order = static_cast<int>(rng.uniform_int(1, 2));
    auto b = random_tiny_batch(rng, vocab, 2, 3, 8);
    SoftmaxPolicy pol = k % 2 ? SoftmaxPolicy::linear(vocab, order) : SoftmaxPolicy::tabular(vocab, order);
    register_batch(pol, prepare_batch(b.groups, b.adv, order));
    pol.randomize(rng, 1.0);
    const double gap = gap_norm(b.groups, b.adv, pol, pol);
    r.max_error = std::max(r.max_error, gap);
    r.details.push_back({"on_policy #" + std::to_string(k), gap, gap <= tol.on_policy_gap});
    ++r.instances;
  }
  const auto curve = is_gap_interpolation_curve();
  bool monotone = true;
  for (std::size_t i = 1; i < curve.size(); ++i) monotone = monotone && curve[i] > curve[i - 1];
  for (std::size_t i = 0; i < curve.size(); ++i) {
    r.details.push_back({"off_policy_toy s=" + fmt(static_cast<double>(i) / 10.0), curve[i], monotone});
  }
  r.note = "off-policy toy gap at s=1: " + fmt(curve.back()) + (monotone ? " (monotone)" : " (NOT monotone)");
  finish(r);
  return r;
}

// --- finite-difference audit of the whole objective family ---------------------------

VerificationReport check_gradient_audit(const Tolerances& tol, const VerifyOptions& opt) {
  VerificationReport r;
  r.name = "gradient_audit";
  r.tolerance = tol.gradient_rel;
  Rng rng(derive_seed({opt.seed, 5}));
  const IsMode is_modes[] = {IsMode::token, IsMode::sequence_geo, IsMode::prefix, IsMode::none,
                             IsMode::cispo_stopgrad};
  const AggMode agg_modes[] = {AggMode::token_mean, AggMode::seq_mean_token_mean, AggMode::seq_mean_token_sum};
  const ClipForm clip_forms[] = {ClipForm::dual, ClipForm::literal};
  const KlMode kl_modes[] = {KlMode::off, KlMode::undifferentiated, KlMode::masked};
  const MaskCondition conditions[] = {MaskCondition::pos_adv_entropy_down, MaskCondition::neg_adv_entropy_up,
                                      MaskCondition::either};
  std::size_t excluded = 0;
  for (auto is : is_modes)
    for (auto agg : agg_modes)
      for (auto form : clip_forms)
        for (auto kl : kl_modes)
          for (int k = 0; k < opt.audit_per_combination; ++k) {
            ObjectiveConfig cfg;
            cfg.is_mode = is;
            cfg.agg_mode = agg;
            cfg.clip.form = form;
            cfg.kl.mode = kl;
            cfg.kl.beta = rng.uniform(0.05, 1.0);
            cfg.kl.mask_condition = conditions[rng.uniform_int(0, 2)];
            cfg.kl.estimator = rng.uniform() < 0.5 ? KlEstimator::exact : KlEstimator::k3;
            cfg.kl.direction = rng.uniform() < 0.5 ? KlDirection::forward : KlDirection::reverse;
            const double bonus[] = {0.0, 0.05, -0.05};
            cfg.entropy_bonus.coef = bonus[rng.uniform_int(0, 2)];

            for (int attempt = 0;; ++attempt) {
              const Vocabulary vocab(static_cast<int>(rng.uniform_int(4, 6)));
              const int order = static_cast<int>(rng.uniform_int(1, 2));
              auto b = random_tiny_batch(rng, vocab, 2, 4, 4);
              const bool tab = rng.uniform() < 0.5;
              SoftmaxPolicy pold = tab ? SoftmaxPolicy::tabular(vocab, order) : SoftmaxPolicy::linear(vocab, order);
              const auto batch = prepare_batch(b.groups, b.adv, order);
              register_batch(pold, batch);
              pold.randomize(rng, 0.5);
              SoftmaxPolicy pnew = pold;
              perturb(pnew, rng, 0.3);

              const auto frozen = freeze(batch, pnew, pold, cfg);
              const auto analytic = evaluate_objective(batch, pnew, pold, cfg, frozen);
              bool near_boundary = false;
              if (is != IsMode::none && is != IsMode::cispo_stopgrad) {
                for (const auto& t : analytic.terms.tokens) {
                  near_boundary = near_boundary ||
                                  std::abs(t.weight - (1.0 - cfg.clip.eps_low)) < tol.clip_boundary_margin ||
                                  std::abs(t.weight - (1.0 + cfg.clip.eps_high)) < tol.clip_boundary_margin;
                }
              }
              if (near_boundary && attempt < 20) {
                ++excluded;
                continue;
              }

              const LossOptions no_grad{true, false};
              auto params = pnew.params();
              double err = 0.0, scale = 0.0;
              for (std::size_t i = 0; i < params.size(); ++i) {
                const double keep = params[i];
                params[i] = keep + tol.fd_step;
                const double up = evaluate_objective(batch, pnew, pold, cfg, frozen, no_grad).objective;
                params[i] = keep - tol.fd_step;
                const double down = evaluate_objective(batch, pnew, pold, cfg, frozen, no_grad).objective;
                params[i] = keep;
                const double fd = (up - down) / (2.0 * tol.fd_step);
                err = std::max(err, std::abs(fd - analytic.grad.values[i]));
                scale = std::max({scale, std::abs(fd), std::abs(analytic.grad.values[i])});
              }
              const double rel = err / std::max(scale, 1e-3);
              r.max_error = std::max(r.max_error, rel);
              r.details.push_back({to_string(is) + "/" + to_string(agg) + "/" + to_string(form) + "/" +
                                       to_string(kl) + (tab ? "/tabular" : "/linear"),
                                   rel, rel <= tol.gradient_rel});
              ++r.instances;
              break;
            }
          }
  r.note = std::to_string(excluded) + " draws resampled for a weight within " + fmt(tol.clip_boundary_margin) +
           " of a clip bound; relative error = max|fd - analytic| / max(max|grad|, 1e-3)";
  finish(r);
  return r;
}

// --- clip fraction: sequence-level vs token-level weights ------------------------------

VerificationReport check_clip_fraction_dominance(const Tolerances& tol, const VerifyOptions& opt) {
  VerificationReport r;
  r.name = "clip_fraction_dominance";
  r.tolerance = 1.0 - tol.clip_strict_fraction;
  Rng rng(derive_seed({opt.seed, 6}));
  TaskSpec task;
  task.seed = derive_seed({opt.seed, 61});
  ObjectiveConfig tok;
  tok.is_mode = IsMode::token;
  ObjectiveConfig seq = tok;
  seq.is_mode = IsMode::sequence_geo;
  std::size_t strict = 0, batches = 0;
  int attempts = 0;
  while (static_cast<int>(batches) < opt.clip_batches && attempts < 10 * opt.clip_batches) {
    ++attempts;
    SoftmaxPolicy pold = SoftmaxPolicy::linear(task.vocab, 2);
    pold.randomize(rng, 0.5);
    const auto prompts = generate_prompts(task, 8, rng.next());
    auto groups = collect_groups(pold, task, prompts, 4, task.max_response_len, 1.0, rng.next());
    std::vector<AdvantageSet> adv;
    for (auto& g : groups) {
      for (auto& x : g.rewards) x = rng.uniform(-1.0, 1.0);
      adv.push_back(normalize_advantages(g.rewards));
    }
    SoftmaxPolicy pnew = pold;
    perturb(pnew, rng, rng.uniform(0.05, 0.3));

    const auto batch = prepare_batch(groups, adv, 2);
    double s1 = 0.0, s2 = 0.0;
    for (const auto& st : batch.steps) {
      const double lr = pnew.log_prob(st.ctx, st.token) - pold.log_prob(st.ctx, st.token);
      s1 += lr;
      s2 += lr * lr;
    }
    const double n = static_cast<double>(batch.steps.size());
    if (!(s2 / n - (s1 / n) * (s1 / n) > 0.0)) continue;  // needs ratio dispersion

    const double cf_tok = clip_fraction(loss_and_grad(batch, pnew, pold, tok).terms);
    const double cf_seq = clip_fraction(loss_and_grad(batch, pnew, pold, seq).terms);
    const bool ok = cf_seq <= cf_tok;
    strict += cf_seq < cf_tok ? 1 : 0;
    r.details.push_back({"token=" + fmt(cf_tok) + " seq=" + fmt(cf_seq), cf_seq - cf_tok, ok});
    ++batches;
  }
  r.instances = batches;
  const double strict_frac = batches ? static_cast<double>(strict) / static_cast<double>(batches) : 0.0;
  r.max_error = 1.0 - strict_frac;
  r.note = "strictly lower on " + std::to_string(strict) + "/" + std::to_string(batches) + " batches";
  finish(r);
  if (static_cast<int>(batches) < opt.clip_batches) r.status = CheckStatus::fail;
  return r;
}

std::vector<VerificationReport> run_all(const Tolerances& tol, const VerifyOptions& opt) {
  return {check_lemma1_suite(tol, opt),         check_entropy_change_signs(tol, opt),
          check_covariance_formula(tol, opt),   check_is_gradient_gap(tol, opt),
          check_gradient_audit(tol, opt),       check_clip_fraction_dominance(tol, opt)};
}

}  // namespace tepo
