#include <bm/data.hpp>
#include <bm/nn.hpp>

#include "oracles.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <limits>
#include <random>

namespace {

using bm::Matrix;
using bm::Mlp;

Matrix random_matrix(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = n(rng);
  }
  return m;
}

bm::LabeledDataset separable_blobs(std::uint64_t seed) {
  Matrix centers(2, 2);
  centers << -3, 0, 3, 0;
  return bm::gen_blobs(2, 50, centers, 0.5, seed);
}

TEST(HeInit, VarianceMatchesFanIn) {
  std::mt19937_64 rng(3);
  const auto layer = bm::he_init(1000, 1000, rng);
  const double n = static_cast<double>(layer.weights.size());
  const double mean = layer.weights.sum() / n;
  const double var = (layer.weights.array() - mean).square().sum() / (n - 1);
  EXPECT_NEAR(var / (2.0 / 1000), 1.0, 0.05);
  EXPECT_TRUE(layer.biases.isZero(0.0));
}

TEST(HeInit, DeterministicUnderSeed) {
  std::mt19937_64 a(11), b(11);
  EXPECT_EQ(bm::he_init(20, 7, a).weights, bm::he_init(20, 7, b).weights);
}

TEST(Mlp, RejectsBrokenChain) {
  std::vector<bm::Layer> layers{{Matrix::Zero(3, 2), bm::Vector::Zero(3)}, {Matrix::Zero(2, 4), bm::Vector::Zero(2)}};
  EXPECT_THROW(Mlp{layers}, bm::DimensionError);
}

TEST(Mlp, ZeroWeightsGiveZeroLogits) {
  Mlp m({{Matrix::Zero(4, 3), bm::Vector::Zero(4)}, {Matrix::Zero(2, 4), bm::Vector::Zero(2)}});
  std::mt19937_64 rng(1);
  EXPECT_TRUE(m.forward(random_matrix(5, 3, rng)).isZero(0.0));
}

TEST(Mlp, SingleLinearLayerHandCase) {
  Matrix w(2, 2);
  w << 1, 2, 3, 4;
  bm::Vector b(2);
  b << 0.5, -1;
  Mlp m({{w, b}});
  Matrix x(2, 2);
  x << 1, 0, 2, -1;
  Matrix expected(2, 2);
  expected << 1.5, 2, 0.5, 1;
  EXPECT_EQ(m.forward(x), expected);
}

TEST(Mlp, ForwardRejectsWrongWidth) {
  std::mt19937_64 rng(2);
  const std::vector<int> dims{3, 4, 2};
  const Mlp m = Mlp::he(dims, rng);
  EXPECT_THROW(m.forward(Matrix::Zero(2, 5)), bm::DimensionError);
}

TEST(Mlp, RowsAreIndependent) {
  std::mt19937_64 rng(5);
  const std::vector<int> dims{3, 8, 8, 4};
  const Mlp m = Mlp::he(dims, rng);
  Matrix x = random_matrix(6, 3, rng);
  const Matrix before = m.forward(x);
  x.row(2) += Eigen::RowVector3d(0.3, -0.2, 1.0);
  const Matrix after = m.forward(x);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    if (i == 2) {
      EXPECT_NE(before.row(i), after.row(i));
    } else {
      EXPECT_EQ(before.row(i), after.row(i));
    }
  }
}

TEST(Mlp, BackwardWithoutForwardThrows) {
  std::mt19937_64 rng(2);
  const std::vector<int> dims{3, 4, 2};
  const Mlp m = Mlp::he(dims, rng);
  EXPECT_THROW((void)m.backward(bm::ForwardTape{}, Matrix::Zero(1, 2)), std::logic_error);
}

TEST(Mlp, ZeroUpstreamGradient) {
  std::mt19937_64 rng(4);
  const std::vector<int> dims{3, 5, 2};
  const Mlp m = Mlp::he(dims, rng);
  bm::ForwardTape tape;
  m.forward(random_matrix(4, 3, rng), &tape);
  const auto g = m.backward(tape, Matrix::Zero(4, 2));
  EXPECT_EQ(g.squared_norm(), 0.0);
}

TEST(Mlp, LinearSoftmaxGradientClosedForm) {
  Matrix w(2, 3);
  w << 0.1, -0.2, 0.3, 0.0, 0.4, -0.1;
  Mlp m({{w, bm::Vector::Zero(2)}});
  Matrix x(1, 3);
  x << 1.0, 2.0, -1.0;
  bm::ForwardTape tape;
  const Matrix f = m.forward(x, &tape);
  const std::vector<int> y{1};
  const auto loss = bm::batch_loss(bm::LossKind::SoftmaxCe, f, y, {});
  const auto g = m.backward(tape, loss.grad);
  const auto phi = bm::softmax({f.row(0).data(), 2});
  Matrix expected(2, 3);
  for (int k = 0; k < 2; ++k) expected.row(k) = (phi[static_cast<std::size_t>(k)] - (k == 1 ? 1.0 : 0.0)) * x.row(0);
  EXPECT_LT((g.layers[0].weights - expected).cwiseAbs().maxCoeff(), 1e-15);
}

class BackpropFiniteDifference : public ::testing::TestWithParam<bm::LossKind> {};

TEST_P(BackpropFiniteDifference, MatchesOnTwoLayerNet) {
  const bm::LossKind kind = GetParam();
  int checked = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(100 + seed);
    const std::vector<int> dims{2, 16, 16, 3};
    const Mlp m = Mlp::he(dims, rng);
    const Matrix x = random_matrix(8, 2, rng);
    std::vector<int> y(8);
    std::uniform_int_distribution<int> cls(0, 2);
    for (int& v : y) v = cls(rng);
    bm::LossConfig cfg;
    cfg.lam = 0.01;
    bm::ForwardTape tape;
    const Matrix f = m.forward(x, &tape);
    const auto loss = bm::batch_loss(kind, f, y, cfg);
    const bm::Vector analytic = Mlp::flatten(m.backward(tape, loss.grad).layers);
    const auto numeric = oracle::mlp_numeric_gradient(m, x, y, kind, 0.01L);
    for (std::size_t i = 0; i < numeric.grad.size(); ++i) {
      if (!numeric.valid[i]) continue;
      ++checked;
      EXPECT_LE(oracle::relative_error(analytic[static_cast<Eigen::Index>(i)], numeric.grad[i]), 1e-5)
          << "seed " << seed << " parameter " << i;
    }
  }
  EXPECT_GT(checked, 3000);
}

INSTANTIATE_TEST_SUITE_P(BothLosses, BackpropFiniteDifference,
                         ::testing::Values(bm::LossKind::SoftmaxCe, bm::LossKind::BeliefMatching),
                         [](const auto& info) { return info.param == bm::LossKind::SoftmaxCe ? "softmax" : "bm"; });

TEST(Backprop, InputGradientMatchesFiniteDifference) {
  std::mt19937_64 rng(8);
  const std::vector<int> dims{3, 6, 2};
  const Mlp m = Mlp::he(dims, rng);
  Matrix x = random_matrix(1, 3, rng);
  const std::vector<int> y{0};
  bm::ForwardTape tape;
  const auto loss = bm::batch_loss(bm::LossKind::SoftmaxCe, m.forward(x, &tape), y, {});
  const auto g = m.backward(tape, loss.grad);
  for (Eigen::Index c = 0; c < 3; ++c) {
    const double h = 1e-6;
    Matrix up = x, down = x;
    up(0, c) += h;
    down(0, c) -= h;
    const double fd = (bm::batch_loss(bm::LossKind::SoftmaxCe, m.forward(up), y, {}).loss -
                       bm::batch_loss(bm::LossKind::SoftmaxCe, m.forward(down), y, {}).loss) /
                      (2 * h);
    EXPECT_NEAR(g.input(0, c), fd, 1e-7);
  }
}

TEST(Parameters, FlattenRoundTrip) {
  std::mt19937_64 rng(6);
  const std::vector<int> dims{3, 4, 2};
  Mlp m = Mlp::he(dims, rng);
  const bm::Vector p = m.parameters();
  EXPECT_EQ(p.size(), 3 * 4 + 4 + 4 * 2 + 2);
  bm::Vector q = p * 2.0;
  m.set_parameters(q);
  EXPECT_EQ(m.parameters(), q);
  EXPECT_EQ(m.layers()[0].weights(1, 2), p[1 * 3 + 2] * 2.0);
}

bm::Gradients gradients_with(std::initializer_list<double> values) {
  bm::Gradients g;
  bm::Layer l{Matrix(1, static_cast<Eigen::Index>(values.size())), bm::Vector::Zero(1)};
  Eigen::Index i = 0;
  for (double v : values) l.weights(0, i++) = v;
  g.layers.push_back(l);
  return g;
}

TEST(ClipGradNorm, BelowThresholdUnchanged) {
  auto g = gradients_with({0.3, 0.4});
  EXPECT_DOUBLE_EQ(bm::clip_grad_norm(g, 1.0), 0.5);
  EXPECT_EQ(g.layers[0].weights(0, 0), 0.3);
  EXPECT_EQ(g.layers[0].weights(0, 1), 0.4);
}

TEST(ClipGradNorm, ScalesToUnitNorm) {
  auto g = gradients_with({0.0, 4.0});
  EXPECT_DOUBLE_EQ(bm::clip_grad_norm(g, 1.0), 4.0);
  EXPECT_DOUBLE_EQ(std::sqrt(g.squared_norm()), 1.0);
}

TEST(ClipGradNorm, ZeroUnchanged) {
  auto g = gradients_with({0.0, 0.0});
  bm::clip_grad_norm(g);
  EXPECT_EQ(g.squared_norm(), 0.0);
}

TEST(ClipGradNorm, NonFiniteIsDivergence) {
  auto g = gradients_with({1.0, std::numeric_limits<double>::quiet_NaN()});
  EXPECT_THROW(bm::clip_grad_norm(g), bm::DivergenceError);
}

TEST(LrSchedule, WarmupFractions) {
  EXPECT_DOUBLE_EQ(bm::lr_schedule(0, 0.1), 0.01);
  EXPECT_DOUBLE_EQ(bm::lr_schedule(3, 0.1), 0.06);
  const double expected[] = {0.1, 0.2, 0.4, 0.6, 0.8};
  for (int e = 0; e < 5; ++e) EXPECT_DOUBLE_EQ(bm::lr_schedule(e, 1.0), expected[e]);
  EXPECT_EQ(bm::lr_schedule(5, 0.1), 0.1);
  EXPECT_EQ(bm::lr_schedule(50, 0.1), 0.1);
}

TEST(LrSchedule, Milestones) {
  const std::vector<int> milestones{10, 20};
  EXPECT_DOUBLE_EQ(bm::lr_schedule(9, 1.0, 5, milestones), 1.0);
  EXPECT_DOUBLE_EQ(bm::lr_schedule(10, 1.0, 5, milestones), 0.1);
  EXPECT_NEAR(bm::lr_schedule(25, 1.0, 5, milestones), 0.01, 1e-17);
}

TEST(LrSchedule, ShortWarmupUsesTail) {
  EXPECT_DOUBLE_EQ(bm::lr_schedule(0, 1.0, 2), 0.6);
  EXPECT_DOUBLE_EQ(bm::lr_schedule(1, 1.0, 2), 0.8);
  EXPECT_DOUBLE_EQ(bm::lr_schedule(2, 1.0, 2), 1.0);
  EXPECT_DOUBLE_EQ(bm::lr_schedule(0, 1.0, 0), 1.0);
  EXPECT_THROW(bm::lr_schedule(-1, 1.0), std::invalid_argument);
}

TEST(Optimizers, SgdMomentumHandSteps) {
  bm::SgdMomentum opt{0.9, {}};
  bm::Vector p(2), g(2);
  p << 1.0, -2.0;
  g << 0.5, 1.0;
  opt.step(p, g, 0.1);
  EXPECT_DOUBLE_EQ(p[0], 1.0 - 0.1 * 0.5);
  EXPECT_DOUBLE_EQ(p[1], -2.0 - 0.1 * 1.0);
  opt.step(p, g, 0.1);  // v = 0.9 * g + g
  EXPECT_DOUBLE_EQ(p[0], 0.95 - 0.1 * 0.95);
  EXPECT_DOUBLE_EQ(p[1], -2.1 - 0.1 * 1.9);
}

TEST(Optimizers, AdamHandSteps) {
  bm::Adam opt;
  bm::Vector p(2), g(2);
  p << 1.0, -2.0;
  g << 0.5, -4.0;
  opt.step(p, g, 3e-4);
  // First bias-corrected step is lr * g / (|g| + eps).
  EXPECT_NEAR(p[0], 1.0 - 3e-4 * 0.5 / (0.5 + 1e-8), 1e-15);
  EXPECT_NEAR(p[1], -2.0 + 3e-4 * 4.0 / (4.0 + 1e-8), 1e-15);
  bm::Vector g2(2);
  g2 << 1.0, 0.0;
  opt.step(p, g2, 3e-4);
  const double m = (0.9 * 0.05 + 0.1 * 1.0) / (1 - 0.81);
  const double v = (0.999 * 0.00025 + 0.001 * 1.0) / (1 - 0.999 * 0.999);
  EXPECT_NEAR(p[0], 1.0 - 3e-4 * 0.5 / (0.5 + 1e-8) - 3e-4 * m / (std::sqrt(v) + 1e-8), 1e-15);
}

TEST(TrainConfig, Validation) {
  bm::TrainConfig cfg;
  EXPECT_NO_THROW(cfg.validate());
  cfg.epochs = 3;
  EXPECT_THROW(cfg.validate(), bm::ConfigError);  // warm-up longer than training
  cfg = {};
  cfg.batch_size = 0;
  EXPECT_THROW(cfg.validate(), bm::ConfigError);
  cfg = {};
  cfg.base_lr = -1;
  EXPECT_THROW(cfg.validate(), bm::ConfigError);
}

TEST(Train, SeparableBlobsReachZeroTrainingError) {
  const auto data = separable_blobs(1);
  std::mt19937_64 rng(2);
  const std::vector<int> dims{2, 16, 16, 2};
  bm::TrainConfig cfg;
  cfg.epochs = 200;
  cfg.batch_size = 16;
  cfg.base_lr = 0.05;
  cfg.seed = 3;
  for (auto kind : {bm::LossKind::SoftmaxCe, bm::LossKind::BeliefMatching}) {
    cfg.loss = kind;
    const auto result = bm::train(Mlp::he(dims, rng), data, nullptr, cfg);
    EXPECT_EQ(bm::evaluate(result.model, data, kind, cfg.loss_cfg).error, 0.0);
    EXPECT_EQ(result.log.size(), 200u);
  }
}

TEST(Train, SameSeedSameLog) {
  const auto data = bm::gen_two_moons(200, 0.1, 4);
  const std::vector<int> dims{2, 8, 8, 2};
  bm::TrainConfig cfg;
  cfg.epochs = 8;
  cfg.loss = bm::LossKind::BeliefMatching;
  cfg.seed = 9;
  std::mt19937_64 r1(1), r2(1);
  const auto a = bm::train(Mlp::he(dims, r1), data, &data, cfg);
  const auto b = bm::train(Mlp::he(dims, r2), data, &data, cfg);
  ASSERT_EQ(a.log.size(), b.log.size());
  for (std::size_t e = 0; e < a.log.size(); ++e) {
    EXPECT_EQ(a.log[e].train_loss, b.log[e].train_loss);
    EXPECT_EQ(a.log[e].val_error, b.log[e].val_error);
  }
  EXPECT_EQ(a.model.parameters(), b.model.parameters());
}

TEST(Train, BeliefMatchingLossDecreasesOnTwoMoons) {
  auto data = bm::gen_two_moons(500, 0.1, 12);
  bm::standardize(data);
  const std::vector<int> dims{2, 32, 32, 2};
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    bm::TrainConfig cfg;
    cfg.epochs = 10;
    cfg.loss = bm::LossKind::BeliefMatching;
    cfg.seed = seed;
    std::mt19937_64 rng(seed);
    const auto result = bm::train(Mlp::he(dims, rng), data, nullptr, cfg);
    for (std::size_t e = 1; e < result.log.size(); ++e) {
      EXPECT_LT(result.log[e].train_loss, result.log[e - 1].train_loss) << "seed " << seed << " epoch " << e;
    }
  }
}

TEST(Train, ClippingInactiveBelowThreshold) {
  // Tiny learning rate and inputs keep every gradient norm under 1.
  auto data = bm::gen_two_moons(64, 0.1, 5);
  data.inputs *= 0.01;
  const std::vector<int> dims{2, 4, 2};
  bm::TrainConfig cfg;
  cfg.epochs = 6;
  cfg.base_lr = 1e-3;
  std::mt19937_64 r1(7), r2(7);
  const Mlp init = Mlp::he(dims, r1);
  bm::ForwardTape tape;
  const auto loss = bm::batch_loss(cfg.loss, init.forward(data.inputs, &tape), data.labels, cfg.loss_cfg);
  ASSERT_LT(init.backward(tape, loss.grad).squared_norm(), 0.25);
  const auto clipped = bm::train(init, data, nullptr, cfg);
  cfg.clip_norm = std::numeric_limits<double>::infinity();
  const auto unclipped = bm::train(init, data, nullptr, cfg);
  EXPECT_EQ(clipped.model.parameters(), unclipped.model.parameters());
}

TEST(Train, DivergenceIsReported) {
  auto data = bm::gen_two_moons(32, 0.1, 5);
  data.inputs(0, 0) = std::numeric_limits<double>::infinity();
  const std::vector<int> dims{2, 4, 2};
  std::mt19937_64 rng(1);
  bm::TrainConfig cfg;
  cfg.epochs = 5;
  EXPECT_THROW(bm::train(Mlp::he(dims, rng), data, nullptr, cfg), bm::DivergenceError);
}

TEST(Checkpoint, JsonRoundTrip) {
  std::mt19937_64 rng(21);
  const std::vector<int> dims{3, 5, 4};
  bm::ModelCheckpoint ckpt;
  ckpt.model = Mlp::he(dims, rng);
  ckpt.model.layers()[0].biases[1] = 0.1 + 1e-17;
  ckpt.input_mean = {0.1, 0.2, 0.3};
  ckpt.input_sd = {1.0, 2.0, 3.0};
  ckpt.loss = bm::LossKind::BeliefMatching;
  ckpt.loss_cfg.lam = 0.003;
  const auto path = (std::filesystem::temp_directory_path() / "bm_ckpt_roundtrip.json").string();
  bm::save_checkpoint(path, ckpt);
  const auto back = bm::load_checkpoint(path);
  EXPECT_EQ(back.model.parameters(), ckpt.model.parameters());
  EXPECT_EQ(back.model.dims(), dims);
  EXPECT_EQ(back.input_sd, ckpt.input_sd);
  EXPECT_EQ(back.loss, bm::LossKind::BeliefMatching);
  EXPECT_EQ(back.loss_cfg.lam, 0.003);
  EXPECT_FALSE(back.loss_cfg.prior.has_value());
  std::filesystem::remove(path);
}

TEST(Checkpoint, Errors) {
  EXPECT_THROW(bm::load_checkpoint("/nonexistent/model.json"), bm::IoError);
  auto j = bm::checkpoint_to_json({Mlp({{Matrix::Zero(2, 2), bm::Vector::Zero(2)}}), {0, 0}, {1, 1}, {}, {}});
  j["version"] = 99;
  EXPECT_THROW(bm::checkpoint_from_json(j), bm::DomainError);
  j["version"] = 1;
  j["layers"][0]["weights"] = std::vector<double>{1.0};
  EXPECT_THROW(bm::checkpoint_from_json(j), bm::DimensionError);
}

}  // namespace
