#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "sata/baselines.hpp"

using namespace sata;

namespace {

Tensor random_input(std::size_t n, std::size_t d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<double> v(n * d);
  for (auto& x : v) x = nd(rng);
  return Tensor::constant({n, d}, std::move(v));
}

Model small_model(std::uint64_t seed) {
  ModelDims d;
  d.input = 6;
  d.hidden = 5;
  d.classes = 3;
  d.projection = 4;
  Model m = Model::create(d, seed);
  m.set_roles_for_adaptation();
  return m;
}

std::map<std::string, std::vector<double>> values_by_name(const Model& m) {
  std::map<std::string, std::vector<double>> out;
  for (const auto& p : m.parameters()) out[p.name] = {p.tensor.data().begin(), p.tensor.data().end()};
  return out;
}

}  // namespace

TEST(Entropy, UniformAndOneHot) {
  EXPECT_NEAR(entropy_loss(Tensor::full({3, 4}, 0.25)).item(), std::log(4.0), 1e-15);
  EXPECT_EQ(entropy_loss(Tensor::constant({2, 2}, {1, 0, 0, 1})).item(), 0.0);
}

TEST(Entropy, MatchesDirectSummation) {
  std::mt19937_64 rng(4);
  for (int c = 0; c < 20; ++c) {
    const Tensor p = oracle::random_probs(5, 4, rng);
    EXPECT_NEAR(entropy_loss(p).item(), static_cast<double>(oracle::entropy(oracle::to_matrix(p))), 1e-12);
  }
}

TEST(Entropy, RejectsNonProbabilityRows) {
  EXPECT_THROW(entropy_loss(Tensor::constant({1, 2}, {0.2, 0.2})), ContractError);
}

TEST(Policy, Names) {
  for (auto p : {PolicyKind::Source, PolicyKind::BnAdapt, PolicyKind::Tent, PolicyKind::Sata})
    EXPECT_EQ(parse_policy(to_string(p)), p);
  EXPECT_THROW(parse_policy("cotta"), ConfigError);
}

TEST(Policy, SourceAndBnAdaptMutateNothing) {
  for (auto policy : {PolicyKind::Source, PolicyKind::BnAdapt}) {
    Model m = small_model(3);
    const auto before = m.checksum();
    for (int b = 0; b < 20; ++b) policy_step(policy, m, nullptr, random_input(16, 6, b));
    EXPECT_EQ(m.checksum(), before);
  }
}

TEST(Policy, SourceUsesRunningStatistics) {
  Model m = small_model(3);
  const Tensor x = random_input(16, 6, 1);
  const auto src = policy_step(PolicyKind::Source, m, nullptr, x);
  EXPECT_EQ(src, argmax_rows(m.predict(x, BnMode::RunningStats)));
  const auto bn = policy_step(PolicyKind::BnAdapt, m, nullptr, x);
  EXPECT_EQ(bn, argmax_rows(m.predict(x, BnMode::BatchStats)));
}

TEST(Policy, TentTouchesOnlyBnAffine) {
  Model m = small_model(5);
  Optimizer opt(m.params_with_role(ParamRole::BnAffine), {});
  const auto before = values_by_name(m);
  policy_step(PolicyKind::Tent, m, &opt, random_input(16, 6, 2));
  const auto after = values_by_name(m);
  for (const auto& p : m.parameters()) {
    if (p.role == ParamRole::BnAffine)
      EXPECT_NE(before.at(p.name), after.at(p.name)) << p.name;
    else
      EXPECT_EQ(before.at(p.name), after.at(p.name)) << p.name;
  }
}

TEST(Policy, TentSgdStepFollowsFiniteDifferenceGradient) {
  Model m = small_model(6);
  const Tensor x = random_input(12, 6, 3);
  const double lr = 0.05;
  auto params = m.params_with_role(ParamRole::BnAffine);

  // numeric gradient of the entropy at the pre-step parameters
  std::vector<std::vector<double>> numeric;
  for (auto& p : params) {
    auto v = p.mutable_data();
    std::vector<double> g(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double o = v[i];
      v[i] = o + 1e-5;
      const double up = entropy_loss(m.predict(x)).item();
      v[i] = o - 1e-5;
      const double down = entropy_loss(m.predict(x)).item();
      v[i] = o;
      g[i] = (up - down) / 2e-5;
    }
    numeric.push_back(std::move(g));
  }
  std::vector<std::vector<double>> before;
  for (auto& p : params) before.emplace_back(p.data().begin(), p.data().end());

  OptimizerConfig cfg;
  cfg.kind = OptimizerKind::Sgd;
  cfg.learning_rate = lr;
  Optimizer opt(params, cfg);
  policy_step(PolicyKind::Tent, m, &opt, x);
  for (std::size_t k = 0; k < params.size(); ++k)
    for (std::size_t i = 0; i < before[k].size(); ++i) {
      const double want = before[k][i] - lr * numeric[k][i];
      const double got = params[k][i];
      EXPECT_NEAR(got, want, 1e-4 * std::max(1.0, std::abs(want)));
    }
}

TEST(Policy, TentPredictsBeforeUpdating) {
  Model m = small_model(7);
  const Tensor x = random_input(16, 6, 4);
  const auto expected = argmax_rows(m.predict(x));
  OptimizerConfig cfg;
  cfg.learning_rate = 0.5;  // large enough to move decisions
  Optimizer opt(m.params_with_role(ParamRole::BnAffine), cfg);
  EXPECT_EQ(policy_step(PolicyKind::Tent, m, &opt, x), expected);
}

TEST(Policy, TooSmallBatchPropagates) {
  Model m = small_model(1);
  EXPECT_THROW(policy_step(PolicyKind::BnAdapt, m, nullptr, random_input(1, 6, 1)), BatchTooSmallError);
  EXPECT_THROW(policy_step(PolicyKind::Tent, m, nullptr, random_input(4, 6, 1)), ConfigError);
}

TEST(Optimizer, AdamMatchesRule) {
  Tensor w = Tensor::parameter({3}, {0.5, -1.0, 2.0});
  OptimizerConfig cfg;
  cfg.learning_rate = 0.01;
  Optimizer opt({w}, cfg);
  std::vector<long double> m(3, 0), v(3, 0), ref{0.5L, -1.0L, 2.0L};
  for (int t = 1; t <= 5; ++t) {
    opt.zero_grad();
    backward(sum(w * w * w));
    std::vector<long double> g(3);
    for (int i = 0; i < 3; ++i) g[i] = 3.0L * ref[i] * ref[i];
    opt.step();
    for (int i = 0; i < 3; ++i) {
      m[i] = 0.9L * m[i] + 0.1L * g[i];
      v[i] = 0.999L * v[i] + 0.001L * g[i] * g[i];
      const long double mh = m[i] / (1 - std::pow(0.9L, t)), vh = v[i] / (1 - std::pow(0.999L, t));
      ref[i] -= 0.01L * mh / (std::sqrt(vh) + 1e-8L);
      EXPECT_NEAR(w[i], static_cast<double>(ref[i]), 1e-12);
    }
  }
  EXPECT_EQ(opt.steps(), 5);
}

TEST(Optimizer, SkipsTensorsWithoutGradient) {
  Tensor a = Tensor::parameter({1}, {1.0});
  Tensor b = Tensor::parameter({1}, {1.0});
  Optimizer opt({a, b}, {});
  backward(sum(a * a));
  opt.step();
  EXPECT_NE(a[0], 1.0);
  EXPECT_EQ(b[0], 1.0);
  EXPECT_EQ(parse_optimizer("sgd"), OptimizerKind::Sgd);
  EXPECT_THROW(parse_optimizer("lbfgs"), ConfigError);
}
