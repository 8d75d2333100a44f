#include <algorithm>
#include <cmath>

#include "tepo/objectives.hpp"

// Reference implementation. Deliberately naive: one token term at a time,
// derivative of each importance weight w.r.t. every log-prob it depends on,
// chain rule straight into parameter space. Anchor = the current point.

namespace tepo {

namespace {

struct Tok {
  Context ctx;
  Token y;
  TokenDistribution p, q;
  double ln, lo;
};

void add_logprob_grad(const SoftmaxPolicy& pol, const Tok& tk, double c, std::vector<double>& grad) {
  if (c == 0.0) return;
  std::vector<double> g(tk.p.size());
  for (std::size_t a = 0; a < g.size(); ++a) {
    g[a] = c * ((static_cast<Token>(a) == tk.y ? 1.0 : 0.0) - tk.p.probs[a]);
  }
  pol.accumulate_param_gradient(tk.ctx, g, grad);
}

}  // namespace

LossResult loss_and_grad_serial(std::span<const RolloutGroup> groups, std::span<const AdvantageSet> advantages,
                                const SoftmaxPolicy& pnew, const SoftmaxPolicy& pold, const ObjectiveConfig& cfg) {
  cfg.validate();
  if (groups.empty() || groups.size() != advantages.size()) throw std::invalid_argument("bad batch");

  std::size_t N = 0, R = 0;
  for (const auto& g : groups) {
    N += g.token_count();
    R += g.responses.size();
  }
  const double lo_b = 1.0 - cfg.clip.eps_low, hi_b = 1.0 + cfg.clip.eps_high;

  LossResult out;
  out.grad = GradientAccumulator(pnew.param_count());
  out.grad.count = N;

  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    const auto& grp = groups[gi];
    for (std::size_t i = 0; i < grp.responses.size(); ++i) {
      const auto& toks = grp.responses[i].tokens;
      const double A = advantages[gi].per_response[i];
      const std::size_t T = toks.size();

      std::vector<Tok> seq;
      for (std::size_t t = 0; t < T; ++t) {
        Tok tk;
        tk.ctx = make_context(grp.prompt.id, grp.prompt.tokens, std::span<const Token>(toks).first(t),
                              pnew.context_order());
        tk.y = toks[t];
        tk.p = pnew.distribution(tk.ctx);
        tk.q = pold.distribution(tk.ctx);
        tk.ln = tk.p.log_probs[static_cast<std::size_t>(tk.y)];
        tk.lo = tk.q.log_probs[static_cast<std::size_t>(tk.y)];
        seq.push_back(std::move(tk));
      }

      double alpha = 0.0;
      if (cfg.agg_mode == AggMode::token_mean) alpha = 1.0 / double(N);
      if (cfg.agg_mode == AggMode::seq_mean_token_mean) alpha = 1.0 / (double(R) * double(T));
      if (cfg.agg_mode == AggMode::seq_mean_token_sum) alpha = 1.0 / double(R);

      for (std::size_t t = 0; t < T; ++t) {
        const Tok& tk = seq[t];
        TokenTerm term;
        term.advantage = A;

        // importance weight of this token and which log-probs it depends on
        double w = 1.0;
        std::size_t dep_begin = t, dep_end = t + 1;
        double dep_scale = 1.0;  // d ln w / d ln_j for j in [dep_begin, dep_end)
        bool stopgrad = false;
        double cispo = 1.0;
        switch (cfg.is_mode) {
          case IsMode::token: w = std::exp(tk.ln - tk.lo); break;
          case IsMode::sequence_geo: {
            double s = 0.0;
            for (const auto& x : seq) s += x.ln - x.lo;
            w = std::exp(s / double(T));
            dep_begin = 0;
            dep_end = T;
            dep_scale = 1.0 / double(T);
            break;
          }
          case IsMode::prefix: {
            double s = 0.0;
            for (std::size_t j = 0; j <= t; ++j) s += seq[j].ln - seq[j].lo;
            w = std::exp(s / double(t + 1));
            dep_begin = 0;
            dep_end = t + 1;
            dep_scale = 1.0 / double(t + 1);
            break;
          }
          case IsMode::none: stopgrad = true; break;
          case IsMode::cispo_stopgrad: {
            stopgrad = true;
            const double r = std::exp(tk.ln - tk.lo);
            if (cfg.clip.form == ClipForm::dual) cispo = std::min(std::max(r, lo_b), hi_b);
            else if (cfg.clip.form == ClipForm::literal) cispo = std::min(r, hi_b);
            else cispo = r;
            term.clipped = cispo != r;
            break;
          }
        }

        double surr = 0.0;
        bool live = true;
        if (stopgrad) {
          // sg[c] * A * pi/sg[pi]: value c A, gradient c A grad ln pi
          surr = cispo * A;
          term.weight = cispo;
        } else {
          term.weight = w;
          const double plain = w * A;
          if (cfg.clip.form == ClipForm::none) {
            surr = plain;
          } else if (cfg.clip.form == ClipForm::literal) {
            if (w > hi_b) {
              surr = hi_b * A;
              live = false;
              term.clipped = true;
            } else {
              surr = plain;
            }
          } else {
            const double c = std::min(std::max(w, lo_b), hi_b) * A;
            if (c < plain) {
              surr = c;
              live = false;
              term.clipped = true;
            } else {
              surr = plain;
            }
          }
        }
        term.surrogate = surr;
        out.objective += alpha * surr;
        if (stopgrad) {
          add_logprob_grad(pnew, tk, alpha * surr, out.grad.values);
        } else if (live) {
          for (std::size_t j = dep_begin; j < dep_end; ++j) {
            add_logprob_grad(pnew, seq[j], alpha * A * w * dep_scale, out.grad.values);
          }
        }

        // KL with the mask taken at the current point
        const double Hn = entropy(tk.p), Ho = entropy(tk.q);
        term.entropy = Hn;
        term.delta_entropy = Hn - Ho;
        bool m = false;
        if (cfg.kl.mode == KlMode::undifferentiated) m = true;
        if (cfg.kl.mode == KlMode::masked) m = kl_mask(A, Hn - Ho, cfg.kl.mask_condition);
        term.mask = m;
        const bool fwd = cfg.kl.direction == KlDirection::forward;
        const std::size_t V = tk.p.size();
        std::vector<double> gk(V, 0.0);
        if (cfg.kl.estimator == KlEstimator::exact) {
          double kl = 0.0;
          for (std::size_t a = 0; a < V; ++a) {
            kl += fwd ? tk.p.probs[a] * (tk.p.log_probs[a] - tk.q.log_probs[a])
                      : tk.q.probs[a] * (tk.q.log_probs[a] - tk.p.log_probs[a]);
          }
          term.kl = kl;
          // d/dphi_b of sum_a p_a(ln p_a - ln q_a), with dp_a/dphi_b = p_a(δ_ab - p_b)
          for (std::size_t b = 0; b < V; ++b) {
            double s = 0.0;
            for (std::size_t a = 0; a < V; ++a) {
              const double dpa = tk.p.probs[a] * ((a == b ? 1.0 : 0.0) - tk.p.probs[b]);
              if (fwd) {
                s += dpa * (tk.p.log_probs[a] - tk.q.log_probs[a] + 1.0);
              } else {
                s += -tk.q.probs[a] * ((a == b ? 1.0 : 0.0) - tk.p.probs[b]);
              }
            }
            gk[b] = s;
          }
        } else {
          const double lr = fwd ? tk.lo - tk.ln : tk.ln - tk.lo;
          const double r = std::exp(lr);
          term.kl = r - lr - 1.0;
          // d k3 / d ln_y = (r - 1) * d lr / d ln_y
          const double d = (r - 1.0) * (fwd ? -1.0 : 1.0);
          for (std::size_t a = 0; a < V; ++a) {
            gk[a] = d * ((static_cast<Token>(a) == tk.y ? 1.0 : 0.0) - tk.p.probs[a]);
          }
        }
        if (m && cfg.kl.mode != KlMode::off) {
          const double b = cfg.kl.beta;
          out.objective -= alpha * b * term.kl;
          for (auto& v : gk) v *= -alpha * b;
          pnew.accumulate_param_gradient(tk.ctx, gk, out.grad.values);
        }

        term.entropy_bonus = cfg.entropy_bonus.coef * Hn;
        if (cfg.entropy_bonus.coef != 0.0) {
          out.objective += alpha * term.entropy_bonus;
          auto ge = entropy_logit_gradient(tk.p);
          for (auto& v : ge) v *= alpha * cfg.entropy_bonus.coef;
          pnew.accumulate_param_gradient(tk.ctx, ge, out.grad.values);
        }
        out.terms.tokens.push_back(term);
      }
    }
  }
  return out;
}

}  // namespace tepo
