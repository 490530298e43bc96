#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "oracles.hpp"
#include "sata/objective.hpp"
#include "sata/stream.hpp"

using namespace sata;

namespace {

Tensor random_input(std::size_t n, std::size_t d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<double> v(n * d);
  for (auto& x : v) x = nd(rng);
  return Tensor::constant({n, d}, std::move(v));
}

Tensor one_hot(std::size_t n, std::size_t c, const std::vector<int>& hot) {
  std::vector<double> v(n * c, 0.0);
  for (std::size_t i = 0; i < n; ++i) v[i * c + hot[i]] = 1.0;
  return Tensor::constant({n, c}, std::move(v));
}

ModelDims tiny_dims() {
  ModelDims d;
  d.input = 6;
  d.hidden = 5;
  d.classes = 3;
  d.projection = 4;
  return d;
}

}  // namespace

TEST(Prototypes, OneSamplePerClass) {
  const Tensor f = Tensor::constant({3, 2}, {1, 2, 3, 4, 5, 6});
  const std::vector<int> y{2, 0, 1};
  const PrototypeBank bank = compute_prototypes(f, y, 3);
  EXPECT_EQ(bank.prototypes().at(2, 1), 2.0);
  EXPECT_EQ(bank.prototypes().at(0, 0), 3.0);
}

TEST(Prototypes, IdenticalSamplesAverageToThemselves) {
  const Tensor f = Tensor::constant({4, 2}, {0.3, 0.7, 0.3, 0.7, -1, 2, -1, 2});
  const PrototypeBank bank = compute_prototypes(f, std::vector<int>{0, 0, 1, 1}, 2);
  EXPECT_EQ(bank.prototypes().at(0, 0), 0.3);
  EXPECT_EQ(bank.prototypes().at(1, 1), 2.0);
}

TEST(Prototypes, MatchesPerClassSummation) {
  const Tensor f = random_input(60, 4, 5);
  std::vector<int> y(60);
  for (std::size_t i = 0; i < 60; ++i) y[i] = static_cast<int>((i * 7) % 3);
  const PrototypeBank bank = compute_prototypes(f, y, 3);
  for (int c = 0; c < 3; ++c) {
    std::vector<long double> acc(4, 0.0L);
    int n = 0;
    for (std::size_t i = 0; i < 60; ++i) {
      if (y[i] != c) continue;
      ++n;
      for (std::size_t j = 0; j < 4; ++j) acc[j] += f.at(i, j);
    }
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(bank.prototypes().at(c, j), static_cast<double>(acc[j] / n), 1e-12);
  }
}

TEST(Prototypes, MissingClass) {
  EXPECT_THROW(compute_prototypes(random_input(4, 2, 1), std::vector<int>{0, 0, 2, 2}, 3), MissingClassError);
}

TEST(Prototypes, ParamRoundTrip) {
  const PrototypeBank bank = compute_prototypes(random_input(6, 3, 2), std::vector<int>{0, 1, 2, 0, 1, 2}, 3);
  const PrototypeBank back = PrototypeBank::from_param_map(bank.to_param_map());
  for (std::size_t i = 0; i < 9; ++i) EXPECT_EQ(back.prototypes()[i], bank.prototypes()[i]);
}

TEST(AnchorLoss, UniformGivesTwoLogC) {
  const Tensor u = Tensor::full({1, 4}, 0.25);
  EXPECT_NEAR(source_anchor_loss(u, u, u).item(), 2.0 * std::log(4.0), 1e-15);
  EXPECT_NEAR(source_anchor_loss(u, u, u).item(), 2.772588722239781, 1e-12);
}

TEST(AnchorLoss, MatchingOneHotIsZero) {
  const Tensor h = one_hot(3, 4, {1, 3, 0});
  EXPECT_EQ(source_anchor_loss(h, h, h).item(), 0.0);
}

TEST(AnchorLoss, MatchesDoubleLoop) {
  std::mt19937_64 rng(3);
  for (int c = 0; c < 20; ++c) {
    const Tensor p = oracle::random_probs(2, 3, rng), q = oracle::random_probs(2, 3, rng),
                 a = oracle::random_probs(2, 3, rng);
    const long double ref = oracle::anchor_loss(oracle::to_matrix(p), oracle::to_matrix(q), oracle::to_matrix(a));
    EXPECT_NEAR(source_anchor_loss(p, q, a).item(), static_cast<double>(ref), 1e-12);
  }
}

TEST(AnchorLoss, ZeroAnchorEntriesAreClamped) {
  const Tensor p = Tensor::constant({1, 2}, {0.5, 0.5});
  const Tensor a = Tensor::constant({1, 2}, {1.0, 0.0});
  const double v = source_anchor_loss(p, p, a).item();
  EXPECT_TRUE(std::isfinite(v));
  EXPECT_NEAR(v, -std::log(1e-12), 1e-9);
}

TEST(AnchorLoss, RejectsNonProbabilityRows) {
  const Tensor bad = Tensor::constant({1, 2}, {0.5, 0.6});
  const Tensor u = Tensor::full({1, 2}, 0.5);
  EXPECT_THROW(source_anchor_loss(bad, u, u), ContractError);
  EXPECT_THROW(source_anchor_loss(u, u, bad), ContractError);
}

TEST(AnchorLoss, NoGradientReachesTheAnchor) {
  Tensor logits = Tensor::parameter({2, 3}, {0.1, 0.5, -0.3, 1.0, 0.0, 0.2});
  Tensor anchor_logits = Tensor::parameter({2, 3}, {1, 2, 3, 3, 2, 1});
  const Tensor a = softmax(anchor_logits);
  const Tensor p = softmax(logits);
  backward(source_anchor_loss(p, p, a));
  EXPECT_TRUE(logits.has_grad());
  EXPECT_FALSE(anchor_logits.has_grad());
}

TEST(PseudoLabel, OneHotUniformAndScan) {
  EXPECT_EQ(pseudo_label(one_hot(2, 4, {3, 1})), (std::vector<int>{3, 1}));
  EXPECT_EQ(pseudo_label(Tensor::full({1, 5}, 0.2)), std::vector<int>{0});
  std::mt19937_64 rng(8);
  const Tensor p = oracle::random_probs(30, 6, rng);
  const auto got = pseudo_label(p);
  for (std::size_t i = 0; i < 30; ++i) {
    int best = 0;
    for (int j = 1; j < 6; ++j)
      if (p.at(i, j) > p.at(i, best)) best = j;
    EXPECT_EQ(got[i], best);
  }
}

TEST(PrototypeView, SelfMatchAndScaleInvariance) {
  const Tensor protos = random_input(4, 5, 12);
  const PrototypeBank bank(protos);
  std::vector<double> row(protos.data().begin() + 10, protos.data().begin() + 15);
  auto v1 = assign_prototype_view(Tensor::constant({1, 5}, row), bank);
  EXPECT_EQ(v1.indices, std::vector<int>{2});
  for (auto& x : row) x *= 5.0;
  auto v5 = assign_prototype_view(Tensor::constant({1, 5}, row), bank);
  EXPECT_EQ(v5.indices, std::vector<int>{2});
  for (std::size_t j = 0; j < 5; ++j) EXPECT_EQ(v5.features.at(0, j), protos.at(2, j));
  EXPECT_FALSE(v5.features.requires_grad());
}

TEST(PrototypeView, MatchesExhaustiveCosineScan) {
  const PrototypeBank bank(random_input(10, 8, 3));
  const Tensor f = random_input(40, 8, 4);
  const auto view = assign_prototype_view(f, bank);
  for (std::size_t i = 0; i < 40; ++i) {
    long double best = -2.0L;
    int arg = -1;
    for (int c = 0; c < 10; ++c) {
      long double dot = 0, nf = 0, np = 0;
      for (std::size_t j = 0; j < 8; ++j) {
        dot += static_cast<long double>(f.at(i, j)) * bank.prototypes().at(c, j);
        nf += static_cast<long double>(f.at(i, j)) * f.at(i, j);
        np += static_cast<long double>(bank.prototypes().at(c, j)) * bank.prototypes().at(c, j);
      }
      const long double cs = dot / std::sqrt(nf * np);
      if (cs > best) best = cs, arg = c;
    }
    EXPECT_EQ(view.indices[i], arg);
  }
}

TEST(PrototypeView, DegenerateFeature) {
  const PrototypeBank bank(random_input(3, 2, 1));
  EXPECT_THROW(assign_prototype_view(Tensor::zeros({1, 2}), bank), DegenerateVectorError);
}

TEST(Contrastive, MatchesNestedLoop) {
  std::mt19937_64 rng(9);
  for (int c = 0; c < 20; ++c) {
    const Tensor z = oracle::random_unit_rows(4, 2, rng);
    const std::vector<int> y{0, 1, 1, 0};
    const long double ref = oracle::contrastive(oracle::to_matrix(z), y, 0.1L);
    EXPECT_NEAR(contrastive_loss(z, y, 0.1).item(), static_cast<double>(ref), 1e-10);
  }
}

TEST(Contrastive, PermutationInvariant) {
  std::mt19937_64 rng(10);
  const Tensor z = oracle::random_unit_rows(9, 4, rng);
  const std::vector<int> y{0, 1, 2, 0, 1, 2, 0, 1, 2};
  const std::vector<std::size_t> perm{4, 8, 0, 2, 7, 1, 5, 3, 6};
  std::vector<double> zp;
  std::vector<int> yp;
  for (std::size_t r : perm) {
    zp.insert(zp.end(), z.data().begin() + r * 4, z.data().begin() + (r + 1) * 4);
    yp.push_back(y[r]);
  }
  const double a = contrastive_loss(z, y, 0.1).item();
  const double b = contrastive_loss(Tensor::constant({9, 4}, zp), yp, 0.1).item();
  EXPECT_NEAR(a, b, 1e-12);
}

TEST(Contrastive, RotationInvariant) {
  std::mt19937_64 rng(11);
  const Tensor z = oracle::random_unit_rows(9, 4, rng);
  const std::vector<int> y{0, 1, 2, 0, 1, 2, 0, 1, 2};
  const Tensor q = Tensor::constant({4, 4}, detail::random_orthonormal(4, rng));
  const double a = contrastive_loss(z, y, 0.1).item();
  const double b = contrastive_loss(matmul(z, q), y, 0.1).item();
  EXPECT_NEAR(a, b, 1e-9);
}

TEST(Contrastive, Errors) {
  std::mt19937_64 rng(1);
  const Tensor z = oracle::random_unit_rows(3, 2, rng);
  EXPECT_THROW(contrastive_loss(z, std::vector<int>{0, 0, 1}, 0.1), EmptyPositiveSetError);
  EXPECT_THROW(contrastive_loss(z, std::vector<int>{0, 0, 0}, 0.0), ConfigError);
}

TEST(Contrastive, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(13);
  Tensor raw = oracle::random_unit_rows(6, 3, rng).clone(true);
  const std::vector<int> y{0, 1, 0, 1, 0, 1};
  auto loss = [&] { return contrastive_loss(l2_normalize(raw), y, 0.5); };
  const auto res = oracle::check_gradients({raw}, loss);
  EXPECT_EQ(res.failures, 0u) << res.worst_rel;
}

TEST(Augment, IdentityConfigAndDeterminism) {
  const Tensor x = random_input(5, 4, 2);
  Rng r1(3), r2(3);
  AugmentConfig id{1.0, 1.0, 0.0};
  const Tensor same = augment(x, r1, id);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(same[i], x[i]);
  Rng a(7), b(7);
  const Tensor ya = augment(x, a), yb = augment(x, b);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(ya[i], yb[i]);
}

TEST(Augment, MonteCarloMoments) {
  // zero input isolates the noise; a constant input checks the scale range
  Rng rng(99);
  const Tensor zero = Tensor::zeros({1000, 100});
  const Tensor n = augment(zero, rng);
  long double s = 0, ss = 0;
  for (double v : n.data()) s += v, ss += static_cast<long double>(v) * v;
  const double mean = static_cast<double>(s / n.size());
  EXPECT_NEAR(mean, 0.0, 0.005);
  EXPECT_NEAR(std::sqrt(static_cast<double>(ss / n.size())), 0.05, 0.05 * 0.02);

  const Tensor ones = Tensor::full({100000, 1}, 1.0);
  const Tensor y = augment(ones, rng, {0.9, 1.1, 0.0});
  long double d = 0;
  for (double v : y.data()) {
    EXPECT_GE(v, 0.9);
    EXPECT_LE(v, 1.1);
    d += v - 1.0;
  }
  EXPECT_NEAR(static_cast<double>(d / y.size()), 0.0, 0.005);
}

namespace {

struct Fixture {
  Model live;
  SourceSnapshot source;
  PrototypeBank bank;
  Tensor x;
  Tensor x_aug;

  static Fixture make(std::size_t n) {
    Model src = Model::create(tiny_dims(), 5);
    const Tensor feats = src.forward_features(random_input(30, 6, 6));
    std::vector<int> y(30);
    for (std::size_t i = 0; i < 30; ++i) y[i] = static_cast<int>(i % 3);
    PrototypeBank bank = compute_prototypes(feats.detach(), y, 3);
    Model live = src.clone();
    live.reset_projection(77);
    live.set_roles_for_adaptation();
    Rng rng(4);
    const Tensor x = random_input(n, 6, 8);
    const Tensor xa = augment(x, rng);
    return {live, snapshot(src), bank, x, xa};
  }
};

}  // namespace

TEST(ViewBatch, LayoutAndLabels) {
  auto f = Fixture::make(5);
  const ViewBatch vb = build_view_batch(f.live, f.source, &f.bank, f.x, f.x_aug, {});
  EXPECT_EQ(vb.embeddings.shape(), (Shape{15, 4}));
  ASSERT_EQ(vb.view_labels.size(), 15u);
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_EQ(vb.view_labels[i], vb.pseudo_labels[i]);
    EXPECT_EQ(vb.view_labels[5 + i], vb.pseudo_labels[i]);
    EXPECT_EQ(vb.view_labels[10 + i], vb.pseudo_labels[i]);
  }
  EXPECT_EQ(vb.pseudo_labels, pseudo_label(f.source.predict(f.x)));
  EXPECT_FALSE(vb.anchor_probs.requires_grad());
}

TEST(ViewBatch, SingleSampleAlignmentOverThreeRows) {
  auto f = Fixture::make(2);
  ViewBatch vb = build_view_batch(f.live, f.source, &f.bank, f.x, f.x_aug, {});
  // restrict to the first sample's three views
  std::vector<double> rows;
  for (std::size_t v = 0; v < 3; ++v)
    rows.insert(rows.end(), vb.embeddings.data().begin() + v * 2 * 4,
                vb.embeddings.data().begin() + v * 2 * 4 + 4);
  const Tensor z = Tensor::constant({3, 4}, rows);
  const std::vector<int> y(3, vb.pseudo_labels[0]);
  EXPECT_NEAR(contrastive_loss(z, y, 0.1).item(),
              static_cast<double>(oracle::contrastive(oracle::to_matrix(z), y, 0.1L)), 1e-10);
}

TEST(ViewBatch, DuplicateSampleIsFiniteAndConsistent) {
  auto f = Fixture::make(4);
  std::vector<double> v(f.x.data().begin(), f.x.data().end());
  std::copy(v.begin(), v.begin() + 6, v.begin() + 6);
  const Tensor x = Tensor::constant({4, 6}, v);
  const ViewBatch vb = build_view_batch(f.live, f.source, &f.bank, x, x, {SataOptions{}.tau, false, false, false});
  const double loss = target_alignment_loss(vb, 0.1).item();
  EXPECT_TRUE(std::isfinite(loss));
  EXPECT_EQ(vb.pseudo_labels[0], vb.pseudo_labels[1]);
}

TEST(ViewBatch, PrototypesGetNoGradient) {
  auto f = Fixture::make(6);
  const ViewBatch vb = build_view_batch(f.live, f.source, &f.bank, f.x, f.x_aug, {});
  backward(sata_loss(vb, {}).total);
  EXPECT_FALSE(f.bank.prototypes().has_grad());
  EXPECT_FALSE(vb.prototype_features.has_grad());
  for (const auto& p : f.live.parameters()) EXPECT_EQ(p.tensor.has_grad(), p.role != ParamRole::Frozen) << p.name;
}

TEST(SataLoss, DisabledAlignmentIsAnchoringBitwise) {
  auto f = Fixture::make(6);
  SataOptions opts;
  opts.disable_ta = true;
  const ViewBatch vb = build_view_batch(f.live, f.source, &f.bank, f.x, f.x_aug, opts);
  const SataLoss l = sata_loss(vb, opts);
  EXPECT_EQ(l.total.item(), source_anchor_loss(vb.probs, vb.aug_probs, vb.anchor_probs).item());
  EXPECT_FALSE(l.alignment.defined());
}

TEST(SataLoss, DisabledPrototypesUsesTwoViews) {
  auto f = Fixture::make(6);
  SataOptions opts;
  opts.disable_prototypes = true;
  const ViewBatch vb = build_view_batch(f.live, f.source, &f.bank, f.x, f.x_aug, opts);
  EXPECT_EQ(vb.embeddings.rows(), 12u);
  EXPECT_TRUE(vb.prototype_indices.empty());
}

TEST(SataLoss, SumOfIndependentTerms) {
  auto f = Fixture::make(6);
  const ViewBatch vb = build_view_batch(f.live, f.source, &f.bank, f.x, f.x_aug, {});
  const long double sa = oracle::anchor_loss(oracle::to_matrix(vb.probs), oracle::to_matrix(vb.aug_probs),
                                             oracle::to_matrix(vb.anchor_probs));
  const long double ta = oracle::contrastive(oracle::to_matrix(vb.embeddings), vb.view_labels, 0.1L);
  EXPECT_NEAR(sata_loss(vb, {}).total.item(), static_cast<double>(sa + ta), 1e-10);
}

TEST(SataLoss, GradientsMatchFiniteDifferences) {
  auto f = Fixture::make(8);
  auto loss = [&] {
    return sata_loss(build_view_batch(f.live, f.source, &f.bank, f.x, f.x_aug, {}), {}).total;
  };
  const auto res = oracle::check_gradients(f.live.trainable_params(), loss);
  EXPECT_EQ(res.checked, f.live.trainable_count());
  EXPECT_EQ(res.failures, 0u) << res.worst_rel;
}

TEST(SataLoss, NeedsTwoViewsForAlignment) {
  auto f = Fixture::make(4);
  SataOptions opts;
  opts.disable_prototypes = true;
  opts.disable_augmented_view = true;
  EXPECT_THROW(build_view_batch(f.live, f.source, &f.bank, f.x, Tensor(), opts), ConfigError);
}
