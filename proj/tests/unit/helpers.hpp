#pragma once

#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "tepo/grouping.hpp"
#include "tepo/objectives.hpp"
#include "tepo/policy.hpp"

namespace testutil {

using namespace tepo;

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

/// Central differences of f over every coordinate of x.
inline std::vector<double> numeric_gradient(std::vector<double> x, const std::function<double(std::span<const double>)>& f,
                                            double h = 1e-6) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const double up = f(x);
    x[i] = keep - h;
    const double down = f(x);
    x[i] = keep;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

struct Batch {
  std::vector<RolloutGroup> groups;
  std::vector<AdvantageSet> adv;
};

/// Arbitrary token sequences with real-valued rewards.
inline Batch random_batch(Rng& rng, const Vocabulary& vocab, int n_groups, int G, int max_t) {
  Batch b;
  for (int g = 0; g < n_groups; ++g) {
    RolloutGroup grp;
    grp.prompt.id = static_cast<std::uint64_t>(g + 1);
    grp.prompt.tokens = {static_cast<Token>(vocab.separator()), static_cast<Token>(rng.uniform_int(0, vocab.size - 1))};
    for (int i = 0; i < G; ++i) {
      Response r;
      const int T = static_cast<int>(rng.uniform_int(1, max_t));
      for (int t = 0; t < T; ++t) r.tokens.push_back(static_cast<Token>(rng.uniform_int(0, vocab.size - 1)));
      r.behavior_log_probs.assign(r.tokens.size(), 0.0);
      grp.responses.push_back(r);
      grp.rewards.push_back(rng.uniform(-1.0, 1.0));
    }
    b.adv.push_back(normalize_advantages(grp.rewards));
    b.groups.push_back(grp);
  }
  return b;
}

struct PolicyPair {
  SoftmaxPolicy old_policy;
  SoftmaxPolicy new_policy;
};

inline PolicyPair random_pair(Rng& rng, const Batch& b, bool tabular, const Vocabulary& vocab, int order,
                              double old_scale, double shift) {
  PolicyPair p{tabular ? SoftmaxPolicy::tabular(vocab, order) : SoftmaxPolicy::linear(vocab, order),
               SoftmaxPolicy::tabular(vocab, order)};
  register_batch(p.old_policy, prepare_batch(b.groups, b.adv, order));
  p.old_policy.randomize(rng, old_scale);
  p.new_policy = p.old_policy;
  for (auto& x : p.new_policy.params()) x += shift * rng.normal();
  return p;
}

inline std::filesystem::path scratch_dir(const std::string& name) {
  auto d = std::filesystem::temp_directory_path() / ("tepo_test_" + name);
  std::filesystem::remove_all(d);
  std::filesystem::create_directories(d);
  return d;
}

}  // namespace testutil
