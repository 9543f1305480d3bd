#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "wcn/training.hpp"

using namespace wcn;

namespace {

Dataset make_set(Shape shape, std::vector<std::vector<double>> xs, std::vector<double> ys) {
  Dataset d;
  d.shape = shape;
  for (auto& x : xs) d.inputs.emplace_back(shape, std::move(x));
  d.labels = std::move(ys);
  return d;
}

Matrix<double> random_psd(int n, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> normal;
  Matrix<double> a(n, n + 3);
  for (Eigen::Index k = 0; k < a.size(); ++k) a.data()[k] = normal(gen);
  return a * a.transpose();
}

NetworkSpec readout_only(Shape in) {
  NetworkSpec s;
  s.input = in;
  s.activation = Activation::identity;
  s.width = 1;
  return s;
}

NetworkSpec small_conv(Activation a, Readout r = Readout::flatten) {
  NetworkSpec s;
  s.layers = {ConvLayer{3, 3}};
  s.activation = a;
  s.readout = r;
  s.input = {4, 4, 1};
  return s;
}

}  // namespace

TEST(StabilityLr, SimpleKernels) {
  EXPECT_NEAR(stability_lr(Matrix<double>::Identity(5, 5)), 0.25, 1e-12);
  Matrix<double> d = Matrix<double>::Zero(2, 2);
  d(0, 0) = 2.0;
  d(1, 1) = 1.0;
  EXPECT_NEAR(stability_lr(d), 0.125, 1e-9);
}

TEST(StabilityLr, MatchesDenseEigensolver) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto k = random_psd(12, seed);
    const double lmax = Eigen::SelfAdjointEigenSolver<Matrix<double>>(k).eigenvalues().maxCoeff();
    EXPECT_NEAR(0.25 / stability_lr(k), lmax, 1e-6 * lmax);
  }
}

TEST(StabilityLr, ZeroKernelIsAnError) {
  EXPECT_THROW(stability_lr(Matrix<double>::Zero(3, 3)), KernelError);
  EXPECT_THROW(stability_lr(Matrix<double>::Zero(2, 3)), KernelError);
}

TEST(Accuracy, TiesCountAsWrong) {
  Vector<double> f(4);
  f << 0.3, -2.0, 0.0, 1.0;
  EXPECT_DOUBLE_EQ(accuracy(f, {1, -1, 1, -1}), 0.5);
  EXPECT_DOUBLE_EQ(accuracy(f, {1, -1, -1, 1}), 0.75);
}

// f = theta x with one example (x = 1, y = 1): theta 0 -> 0.5 -> 0.75.
TEST(TrainFull, HandIteratedGradientDescent) {
  auto st = build_network(readout_only({1, 1, 1}), 0);
  st.weights[0](0, 0) = 0.0;
  const auto train = make_set({1, 1, 1}, {{1.0}}, {1.0});
  train_full(st, train, Dataset{}, 0.5, StopRule{1});
  EXPECT_DOUBLE_EQ(st.weights[0](0, 0), 0.5);
  train_full(st, train, Dataset{}, 0.5, StopRule{1});
  EXPECT_DOUBLE_EQ(st.weights[0](0, 0), 0.75);
}

TEST(TrainFull, ZeroLearningRateIsConstant) {
  const auto data = synthetic({4, 4, 1}, 6, 3, 2);
  auto st = build_network(small_conv(Activation::tanh).with_width(5), 3);
  const auto tr = train_full(st, data.train, data.test, 0.0, StopRule{5});
  ASSERT_EQ(tr.steps.size(), 6u);
  for (const auto& r : tr.steps) {
    EXPECT_EQ(r.train_loss, tr.steps[0].train_loss);
    EXPECT_EQ(r.test_loss, tr.steps[0].test_loss);
  }
}

TEST(TrainFull, StopsAtPerfectAccuracyAndLogsStride) {
  const auto data = synthetic({4, 4, 1}, 8, 0, 5);
  auto st = build_network(small_conv(Activation::tanh).with_width(32), 1);
  const double lr = stability_lr(kernel(st, data.train.inputs, data.train.inputs));
  TrainOptions opt;
  opt.log_stride = 3;
  const auto tr = train_full(st, data.train, data.test, lr, StopRule{5000, true, {}}, opt);
  ASSERT_TRUE(tr.perfect_step);
  EXPECT_EQ(tr.steps.back().step, *tr.perfect_step);
  EXPECT_EQ(tr.steps.back().train_accuracy, 1.0);
  for (std::size_t k = 0; k + 1 < tr.steps.size(); ++k) {
    EXPECT_EQ(tr.steps[k].step % 3, 0);
    EXPECT_LT(tr.steps[k].step, tr.steps[k + 1].step);
  }
  EXPECT_EQ(tr.loss_increases, 0);
}

TEST(TrainFull, DivergenceAbortsWithPartialTrajectory) {
  const auto data = synthetic({4, 4, 1}, 6, 0, 5);
  auto st = build_network(small_conv(Activation::identity).with_width(8), 1);
  const double lr = 50.0 * stability_lr(kernel(st, data.train.inputs, data.train.inputs));
  const auto tr = train_full(st, data.train, data.test, lr, StopRule{10000});
  EXPECT_TRUE(tr.diverged);
  EXPECT_LT(tr.steps.size(), 10001u);
  EXPECT_TRUE(!std::isfinite(tr.steps.back().train_loss) || tr.steps.back().train_loss > 1e6);
}

TEST(TrainFull, SnapshotsAtStrideOnProbe) {
  const auto data = synthetic({4, 4, 1}, 4, 0, 5);
  auto st = build_network(small_conv(Activation::tanh).with_width(4), 1);
  TrainOptions opt;
  opt.probe = &data.train.inputs;
  opt.snapshot_stride = 10;
  const auto tr = train_full(st, data.train, data.test, 0.01, StopRule{35}, opt);
  ASSERT_EQ(tr.snapshots.size(), 4u);
  EXPECT_EQ(tr.snapshots[3].step, 30);
  EXPECT_EQ(tr.snapshots[0].theta.rows(), 4);
}

TEST(TrainFull, DeterministicAndJsonLines) {
  const auto data = synthetic({4, 4, 1}, 6, 4, 9);
  auto run = [&] {
    auto st = build_network(small_conv(Activation::relu).with_width(6), 4);
    std::ostringstream os;
    train_full(st, data.train, data.test, 0.05, StopRule{20}).write_jsonl(os);
    return os.str();
  };
  const std::string a = run();
  EXPECT_EQ(a, run());
  EXPECT_EQ(std::count(a.begin(), a.end(), '\n'), 21);
  EXPECT_EQ(nlohmann::json::parse(a.substr(0, a.find('\n')))["model"], "full");
}

TEST(EvolveLinear, IdentityKernelConvergesInOneStep) {
  Vector<double> f0(3);
  f0 << 0.2, -0.7, 3.0;
  const auto tr = evolve_linear(Matrix<double>::Identity(3, 3), Matrix<double>(0, 3), f0, Vector<double>(0),
                                {1, -1, 1}, {}, 1.0, 1);
  EXPECT_EQ(tr.steps[1].train_loss, 0.0);
}

TEST(EvolveLinear, ResidualNonIncreasingBelowCriticalRate) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto k = random_psd(10, seed);
    const double lr = 3.9 * stability_lr(k);
    Vector<double> f0 = Vector<double>::Zero(10);
    std::vector<double> y(10);
    for (int i = 0; i < 10; ++i) y[std::size_t(i)] = i % 3 ? 1.0 : -1.0;
    const auto tr = evolve_linear(k, Matrix<double>(0, 10), f0, Vector<double>(0), y, {}, lr, 200);
    for (std::size_t s = 1; s < tr.steps.size(); ++s)
      EXPECT_LE(tr.steps[s].train_loss, tr.steps[s - 1].train_loss * (1 + 1e-12));
  }
}

TEST(EvolveLinear, HalvedRateDoubledStepsSameFixedPoint) {
  const auto k = random_psd(6, 3) + Matrix<double>::Identity(6, 6);
  const double lr = stability_lr(k);
  const std::vector<double> y{1, -1, 1, 1, -1, -1};
  const auto a = evolve_linear(k, Matrix<double>(0, 6), Vector<double>::Zero(6), Vector<double>(0), y, {}, lr, 4000);
  const auto b = evolve_linear(k, Matrix<double>(0, 6), Vector<double>::Zero(6), Vector<double>(0), y, {}, lr / 2, 8000);
  EXPECT_LT(std::sqrt(2 * a.steps.back().train_loss), 1e-6);
  EXPECT_LT(std::sqrt(2 * b.steps.back().train_loss), 1e-6);
}

// A readout-only network is linear in its parameters, so GD and the
// frozen-kernel iteration coincide.
TEST(EvolveLinear, MatchesFullTrainingForParameterLinearModel) {
  const auto data = synthetic({3, 3, 2}, 7, 5, 4);
  auto st = build_network(readout_only({3, 3, 2}), 8);
  const auto ktt = kernel(st, data.train.inputs, data.train.inputs);
  const auto ket = kernel(st, data.test.inputs, data.train.inputs);
  const double lr = 0.5 * stability_lr(ktt);
  const auto lin = evolve_linear(ktt, ket, outputs(st, data.train.inputs), outputs(st, data.test.inputs),
                                 data.train.labels, data.test.labels, lr, 50);
  const auto full = train_full(st, data.train, data.test, lr, StopRule{50});
  ASSERT_EQ(lin.steps.size(), full.steps.size());
  for (std::size_t s = 0; s < lin.steps.size(); ++s) {
    EXPECT_NEAR(lin.steps[s].train_loss, full.steps[s].train_loss, 1e-8 * full.steps[s].train_loss);
    EXPECT_NEAR(lin.steps[s].test_loss, full.steps[s].test_loss, 1e-8 * full.steps[s].test_loss);
  }
}

TEST(DetectInstability, SmoothDriftIsQuiet) {
  std::vector<DriftPoint> d;
  std::vector<StepRecord> s;
  for (long t = 10; t <= 500; t += 10) d.push_back({t, 1.0 / double(t)});
  for (long t = 0; t <= 500; ++t) s.push_back({t, 10.0 / double(t + 1), 1, 0, 0});
  EXPECT_FALSE(detect_instability(d, s));
}

TEST(DetectInstability, JumpAt250) {
  std::vector<DriftPoint> d;
  for (long t = 10; t <= 500; t += 10) d.push_back({t, t == 250 ? 0.01 * 100 : 0.01});
  EXPECT_EQ(detect_instability(d, {}), 250);
}

TEST(DetectInstability, LossSpike) {
  std::vector<StepRecord> s;
  for (long t = 0; t <= 100; ++t) s.push_back({t, t == 70 ? 5.0 : 0.1, 1, 0, 0});
  EXPECT_EQ(detect_instability({}, s), 70);
}

TEST(LossGap, StepZeroGapIsExactlyZero) {
  const auto data = synthetic({4, 4, 1}, 6, 5, 12);
  GapOptions opt;
  opt.widths = {4, 8, 16};
  opt.seeds = 2;
  opt.horizon = 5;
  const auto g = loss_gap_experiment(small_conv(Activation::tanh), data.train, data.test, opt);
  ASSERT_EQ(g.widths.size(), 3u);
  for (const auto& w : g.widths) {
    EXPECT_EQ(w.steps.front(), 0);
    EXPECT_EQ(w.loss_gap(0), 0.0);
    EXPECT_EQ(w.seeds_used, 2);
    EXPECT_EQ(w.steps.size(), 6u);
  }
  EXPECT_EQ(g.lr_policy, "stability");
}

TEST(LossGap, NeedsThreeWidths) {
  const auto data = synthetic({4, 4, 1}, 4, 4, 1);
  GapOptions opt;
  opt.widths = {8};
  EXPECT_THROW(loss_gap_experiment(small_conv(Activation::tanh), data.train, data.test, opt), FitError);
}
