#include <bm/data.hpp>
#include <bm/semisup.hpp>

#include "oracles.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

namespace {

using bm::Consistency;
using bm::Matrix;
using bm::Mlp;

constexpr Consistency kAll[] = {Consistency::SoftmaxKl, Consistency::SoftmaxL2, Consistency::DirichletKl};

/// Consistency in long double, written out independently of the library.
long double consistency_ld(Consistency kind, const std::vector<long double>& fr, const std::vector<long double>& f) {
  const auto softmax = [](const std::vector<long double>& v) {
    long double top = *std::max_element(v.begin(), v.end()), z = 0;
    std::vector<long double> p(v.size());
    for (std::size_t k = 0; k < v.size(); ++k) z += (p[k] = std::exp(v[k] - top));
    for (auto& x : p) x /= z;
    return p;
  };
  if (kind == Consistency::DirichletKl) {
    std::vector<long double> a(fr.size()), b(f.size());
    long double a0 = 0, b0 = 0;
    for (std::size_t k = 0; k < f.size(); ++k) {
      a0 += (a[k] = std::exp(fr[k]));
      b0 += (b[k] = std::exp(f[k]));
    }
    long double kl = std::lgamma(a0) - std::lgamma(b0);
    for (std::size_t k = 0; k < f.size(); ++k) {
      kl += std::lgamma(b[k]) - std::lgamma(a[k]) + (a[k] - b[k]) * (bm::specfn::digamma(a[k]) - bm::specfn::digamma(a0));
    }
    return kl;
  }
  const auto p = softmax(fr), q = softmax(f);
  long double s = 0;
  for (std::size_t k = 0; k < p.size(); ++k) {
    s += kind == Consistency::SoftmaxKl ? p[k] * std::log(p[k] / q[k]) : (p[k] - q[k]) * (p[k] - q[k]);
  }
  return s;
}

std::vector<double> random_logits(std::size_t k, std::mt19937_64& rng, double sd = 1.5) {
  std::normal_distribution<double> n(0.0, sd);
  std::vector<double> f(k);
  for (double& v : f) v = n(rng);
  return f;
}

TEST(Consistency, ZeroAtEquality) {
  std::mt19937_64 rng(1);
  for (int t = 0; t < 50; ++t) {
    const auto f = random_logits(2 + t % 6, rng);
    for (auto kind : kAll) EXPECT_EQ(bm::consistency(kind, f, f), 0.0) << bm::to_string(kind);
  }
}

TEST(Consistency, PositiveAwayFromEquality) {
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<int> coord(0, 1);
  for (int t = 0; t < 50; ++t) {
    const auto f = random_logits(2, rng);
    auto g = f;
    g[static_cast<std::size_t>(coord(rng))] += 1e-3;
    for (auto kind : kAll) EXPECT_GT(bm::consistency(kind, f, g), 0.0) << bm::to_string(kind);
  }
}

TEST(PiConsistency, HandCases) {
  const std::vector<double> zero{0.0, 0.0}, ln3{std::log(3.0), 0.0}, ln2{std::log(2.0), 0.0};
  bm::PiConfig l2;
  EXPECT_NEAR(bm::pi_consistency(zero, ln3, l2), 0.125, 1e-15);
  bm::PiConfig dir{0.1, Consistency::DirichletKl, 0.5};
  EXPECT_NEAR(bm::pi_consistency(ln2, zero, dir), 0.19315, 1e-5);
  EXPECT_NEAR(bm::pi_consistency(ln2, zero, dir),
              bm::kl_dirichlet(bm::Concentration({2.0, 1.0}), bm::Concentration({1.0, 1.0})), 1e-15);
  EXPECT_EQ(bm::pi_consistency(ln3, ln3, l2), 0.0);
  EXPECT_EQ(bm::pi_consistency(ln3, ln3, dir), 0.0);
}

TEST(Consistency, DimensionMismatch) {
  const std::vector<double> a{0.0, 0.0}, b{0.0, 0.0, 0.0};
  for (auto kind : kAll) EXPECT_THROW(bm::consistency(kind, a, b), bm::DimensionError);
}

TEST(Consistency, GradientMatchesFiniteDifference) {
  std::mt19937_64 rng(3);
  for (auto kind : kAll) {
    double worst = 0.0;
    for (int t = 0; t < 100; ++t) {
      const auto fr = random_logits(2 + t % 8, rng);
      const auto f = random_logits(fr.size(), rng);
      const auto analytic = bm::consistency_grad(kind, fr, f);
      const std::vector<long double> ref(fr.begin(), fr.end());
      const auto numeric =
          oracle::numeric_gradient_ld([&](const std::vector<long double>& g) { return consistency_ld(kind, ref, g); }, f);
      worst = std::max(worst, oracle::max_relative_error(analytic, numeric));
    }
    EXPECT_LE(worst, 1e-5) << bm::to_string(kind);
  }
}

TEST(Config, Validation) {
  EXPECT_NO_THROW(bm::PiConfig{}.validate());
  EXPECT_NO_THROW(bm::VatConfig{}.validate());
  EXPECT_THROW((bm::PiConfig{-1.0, Consistency::SoftmaxL2, 0.5}.validate()), bm::ConfigError);
  bm::VatConfig v;
  v.power_iters = 0;
  EXPECT_THROW(v.validate(), bm::ConfigError);
  v = {};
  v.epsilon = 0;
  EXPECT_THROW(v.validate(), bm::ConfigError);
  EXPECT_EQ(bm::PiConfig{}.coeff, 0.5);
  EXPECT_EQ(bm::VatConfig{}.coeff, 0.03);
  EXPECT_EQ(bm::VatConfig{}.xi, 1e-6);
  EXPECT_EQ(bm::VatConfig{}.power_iters, 1);
  EXPECT_EQ(bm::PiConfig{}.noise_sd, 0.1);
}

Mlp small_net(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const std::vector<int> dims{2, 8, 8, 3};
  return Mlp::he(dims, rng);
}

Matrix random_inputs(int n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  Matrix x(n, 2);
  for (int i = 0; i < n; ++i) x.row(i) << g(rng), g(rng);
  return x;
}

TEST(VatDirection, NormIsEpsilon) {
  const Mlp m = small_net(4);
  const Matrix x = random_inputs(20, 5);
  for (auto kind : {Consistency::SoftmaxKl, Consistency::DirichletKl}) {
    bm::VatConfig cfg;
    cfg.consistency = kind;
    cfg.epsilon = 0.7;
    std::mt19937_64 rng(6);
    const auto dir = bm::vat_direction(m, x, cfg, rng);
    for (Eigen::Index i = 0; i < x.rows(); ++i) EXPECT_NEAR(dir.r.row(i).norm(), 0.7, 1e-9);
  }
}

TEST(VatDirection, DeterministicUnderSeed) {
  const Mlp m = small_net(4);
  const Matrix x = random_inputs(10, 5);
  std::mt19937_64 a(9), b(9);
  EXPECT_EQ(bm::vat_direction(m, x, {}, a).r, bm::vat_direction(m, x, {}, b).r);
}

TEST(VatDirection, FlatModelIsFlagged) {
  Mlp zero({{Matrix::Zero(4, 2), bm::Vector::Zero(4)}, {Matrix::Zero(3, 4), bm::Vector::Zero(3)}});
  const Matrix x = random_inputs(5, 1);
  std::mt19937_64 rng(2);
  const auto dir = bm::vat_direction(zero, x, {}, rng);
  for (bool f : dir.flat) EXPECT_TRUE(f);
  for (Eigen::Index i = 0; i < x.rows(); ++i) EXPECT_NEAR(dir.r.row(i).norm(), 0.5, 1e-12);
}

TEST(VatLoss, ZeroForConstantModel) {
  Mlp zero({{Matrix::Zero(4, 2), bm::Vector::Zero(4)}, {Matrix::Zero(3, 4), bm::Vector::Zero(3)}});
  const Matrix x = random_inputs(5, 1);
  for (auto kind : {Consistency::SoftmaxKl, Consistency::DirichletKl}) {
    bm::VatConfig cfg;
    cfg.consistency = kind;
    std::mt19937_64 rng(2);
    EXPECT_EQ(bm::vat_loss(zero, x, cfg, rng), 0.0);
  }
}

TEST(VatLoss, NonNegativeAndDelegatesToKl) {
  const Mlp m = small_net(7);
  const Matrix x = random_inputs(30, 8);
  bm::VatConfig cfg;
  cfg.consistency = Consistency::DirichletKl;
  std::mt19937_64 r1(3), r2(3);
  const double loss = bm::vat_loss(m, x, cfg, r1);
  const auto dir = bm::vat_direction(m, x, cfg, r2);
  const Matrix clean = m.forward(x), pert = m.forward(x + dir.r);
  bm::LossConfig lc;
  double expected = 0.0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    expected += bm::kl_dirichlet(bm::alpha_from_logits({clean.row(i).data(), 3}, lc),
                                 bm::alpha_from_logits({pert.row(i).data(), 3}, lc));
  }
  EXPECT_NEAR(loss, expected / 30.0, 1e-12 * std::max(1.0, loss));
  cfg.consistency = Consistency::SoftmaxKl;
  std::mt19937_64 r3(3);
  EXPECT_GE(bm::vat_loss(m, x, cfg, r3), 0.0);
}

TEST(ConsistencyTerm, ParameterGradientMatchesFiniteDifference) {
  // Reference logits are frozen: the finite difference moves only the
  // perturbed pass.
  const Matrix x = random_inputs(6, 11);
  const Matrix xp = x.array() + 0.3;
  for (auto kind : kAll) {
    const Mlp m = small_net(12);
    const Matrix ref = m.forward(x);
    const auto term = bm::consistency_term(m, xp, ref, kind);
    const bm::Vector analytic = Mlp::flatten(term.grads.layers);
    const auto numeric = oracle::mlp_numeric_gradient_of(m, xp, [&](const oracle::LogitsLd& f) {
      long double total = 0;
      for (std::size_t i = 0; i < f.size(); ++i) {
        const std::vector<long double> r(ref.row(static_cast<Eigen::Index>(i)).begin(),
                                         ref.row(static_cast<Eigen::Index>(i)).end());
        total += consistency_ld(kind, r, f[i]);
      }
      return total / static_cast<long double>(f.size());
    });
    double worst = 0.0;
    int checked = 0;
    for (std::size_t i = 0; i < numeric.grad.size(); ++i) {
      if (!numeric.valid[i]) continue;
      ++checked;
      worst = std::max(worst, oracle::relative_error(analytic[static_cast<Eigen::Index>(i)], numeric.grad[i]));
    }
    EXPECT_GT(checked, 50);
    EXPECT_LE(worst, 1e-5) << bm::to_string(kind);
  }
}

TEST(ConsistencyTerm, StopGradientThroughReference) {
  // The reference enters only through its softmax, so a constant shift of
  // the reference logits leaves the gradient unchanged.
  const Mlp m = small_net(13);
  const Matrix x = random_inputs(4, 14);
  const Matrix ref = m.forward(x);
  const Matrix shifted = ref.array() + 2.0;
  const auto a = bm::consistency_term(m, x, ref, Consistency::SoftmaxKl);
  const auto b = bm::consistency_term(m, x, shifted, Consistency::SoftmaxKl);
  EXPECT_LT((Mlp::flatten(a.grads.layers) - Mlp::flatten(b.grads.layers)).norm(), 1e-14);
  // At the clean point itself the gradient is zero even though the clean
  // pass depends on the same parameters.
  EXPECT_LT(Mlp::flatten(a.grads.layers).norm(), 1e-14);
}

TEST(SemisupObjective, CoefficientBehaviour) {
  const Mlp m = small_net(15);
  auto labeled = bm::gen_blobs(3, 4, (Matrix(3, 2) << 0, 0, 2, 2, -2, 2).finished(), 0.3, 1);
  const Matrix unlabeled = random_inputs(16, 16);
  bm::LossConfig lc;
  for (auto method : {bm::SemisupMethod::Pi, bm::SemisupMethod::Vat}) {
    bm::SemisupConfig cfg;
    cfg.method = method;
    cfg.pi.coeff = cfg.vat.coeff = 0.0;
    std::mt19937_64 r1(1), r2(1);
    const double sup = bm::batch_loss(bm::LossKind::BeliefMatching, m.forward(labeled.inputs), labeled.labels, lc).loss;
    EXPECT_DOUBLE_EQ(bm::semisup_objective(m, labeled, unlabeled, bm::LossKind::BeliefMatching, lc, cfg, r1), sup);
    cfg.pi.coeff = 0.5;
    cfg.vat.coeff = 0.03;
    const auto step = bm::semisup_step(m, labeled, unlabeled, bm::LossKind::BeliefMatching, lc, cfg, r2);
    EXPECT_GE(step.consistency, 0.0);
    EXPECT_GE(step.objective, step.supervised);
    EXPECT_DOUBLE_EQ(step.objective, step.supervised + cfg.coeff() * step.consistency);
  }
}

TEST(VatDirection, BeatsRandomDirectionsOnTrainedNet) {
  auto data = bm::gen_two_moons(400, 0.1, 17);
  bm::standardize(data);
  std::mt19937_64 init(18);
  const std::vector<int> dims{2, 32, 32, 2};
  bm::TrainConfig tc;
  tc.epochs = 30;
  const Mlp m = bm::train(Mlp::he(dims, init), data, nullptr, tc).model;
  for (auto kind : {Consistency::SoftmaxKl, Consistency::DirichletKl}) {
    bm::VatConfig cfg;
    cfg.consistency = kind;
    cfg.epsilon = 0.1;
    std::mt19937_64 rng(19);
    double adversarial = 0.0, random = 0.0;
    const Matrix x = data.inputs.topRows(100);
    const Matrix ref = m.forward(x);
    for (int t = 0; t < 100; ++t) {
      const auto dir = bm::vat_direction(m, x, cfg, rng);
      const Matrix rand_dir = cfg.epsilon * bm::detail::random_unit_rows(x.rows(), x.cols(), rng);
      adversarial += bm::consistency_term(m, x + dir.r, ref, kind).value;
      random += bm::consistency_term(m, x + rand_dir, ref, kind).value;
    }
    EXPECT_GT(adversarial, random) << bm::to_string(kind);
  }
}

TEST(TrainSemisup, DeterministicAndValidated) {
  auto data = bm::gen_two_moons(120, 0.1, 20);
  bm::standardize(data);
  const std::vector<std::size_t> li{0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
  std::vector<std::size_t> ui;
  for (std::size_t i = 10; i < data.size(); ++i) ui.push_back(i);
  const auto labeled = data.subset(li);
  const Matrix unlabeled = data.subset(ui).inputs;
  bm::TrainConfig tc;
  tc.epochs = 6;
  bm::SemisupConfig sc;
  const std::vector<int> dims{2, 8, 2};
  std::mt19937_64 r1(1), r2(1);
  const auto a = bm::train_semisup(Mlp::he(dims, r1), labeled, unlabeled, nullptr, tc, sc);
  const auto b = bm::train_semisup(Mlp::he(dims, r2), labeled, unlabeled, nullptr, tc, sc);
  EXPECT_EQ(a.model.parameters(), b.model.parameters());
  EXPECT_EQ(a.log.size(), 6u);
  sc.vat.epsilon = -1;
  EXPECT_THROW(bm::train_semisup(a.model, labeled, unlabeled, nullptr, tc, sc), bm::ConfigError);
}

}  // namespace
