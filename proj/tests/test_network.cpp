#include <gtest/gtest.h>

#include <random>

#include "test_util.hpp"
#include "wcn/forward.hpp"
#include "wcn/ohl.hpp"

using namespace wcn;
using wcn::testing::central_difference;
using wcn::testing::random_batch;
using wcn::testing::relative_error;

namespace {

NetworkSpec conv_spec(Activation act, Readout ro, int n, Shape in = {5, 4, 2}) {
  NetworkSpec s;
  s.layers = {ConvLayer{3, 3}};
  s.activation = act;
  s.readout = ro;
  s.input = in;
  s.width = n;
  return s;
}

struct KindCase {
  const char* name;
  NetworkSpec spec;
};

std::vector<KindCase> layer_kind_cases() {
  std::vector<KindCase> out;
  {
    NetworkSpec s = conv_spec(Activation::tanh, Readout::flatten, 5);
    s.layers = {ConvLayer{3, 3}, ConvLayer{3, 1}};
    out.push_back({"conv_flatten", s});
  }
  {
    NetworkSpec s = conv_spec(Activation::tanh, Readout::flatten, 4);
    s.layers = {DenseLayer{}, DenseLayer{}};
    out.push_back({"dense", s});
  }
  {
    NetworkSpec s = conv_spec(Activation::tanh, Readout::gap, 4);
    s.layers = {ConvLayer{3, 3}, SkipLayer{1, ConvLayer{3, 3}}, SkipLayer{1, ConvLayer{1, 1}}};
    out.push_back({"skip_gap_readout", s});
  }
  {
    NetworkSpec s = conv_spec(Activation::tanh, Readout::flatten, 4);
    s.layers = {ConvLayer{3, 3}, GapLayer{}, DenseLayer{}, SkipLayer{3, DenseLayer{}}};
    out.push_back({"gap_layer_dense_skip", s});
  }
  {
    NetworkSpec s = conv_spec(Activation::tanh, Readout::flatten, 3, {6, 6, 1});
    s.layers = {ConvLayer{3, 3}, MaxPoolLayer{2, 2}, ConvLayer{3, 3}};
    out.push_back({"maxpool", s});
  }
  {
    NetworkSpec s = conv_spec(Activation::relu, Readout::gap, 6);
    s.layers = {ConvLayer{3, 3}, ConvLayer{3, 3}};
    out.push_back({"relu_conv_gap", s});
  }
  return out;
}

}  // namespace

TEST(BuildNetwork, DeterministicInSeed) {
  const auto spec = conv_spec(Activation::tanh, Readout::flatten, 8);
  const auto a = build_network(spec, 42), b = build_network(spec, 42), c = build_network(spec, 43);
  ASSERT_EQ(a.weights.size(), b.weights.size());
  for (std::size_t k = 0; k < a.weights.size(); ++k) {
    ASSERT_EQ(0, std::memcmp(a.weights[k].data(), b.weights[k].data(),
                             sizeof(double) * std::size_t(a.weights[k].size())));
  }
  EXPECT_NE(a.weights[0](0, 0), c.weights[0](0, 0));
}

TEST(BuildNetwork, FirstConvWeightCount) {
  const auto st = build_network(conv_spec(Activation::tanh, Readout::flatten, 16, {8, 8, 1}), 1);
  EXPECT_EQ(st.weights[0].size(), 3 * 3 * 1 * 16);
}

TEST(BuildNetwork, SkipShapeMismatchNamesLayer) {
  NetworkSpec s = conv_spec(Activation::tanh, Readout::flatten, 8, {5, 5, 3});
  s.layers = {ConvLayer{3, 3}, SkipLayer{0, ConvLayer{3, 3}}};
  try {
    build_network(s, 0);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("skip layer 2"), std::string::npos) << e.what();
  }
  s.layers = {ConvLayer{3, 3}, SkipLayer{2, ConvLayer{3, 3}}};
  EXPECT_THROW(build_network(s, 0), ShapeError);
}

TEST(BuildNetwork, EvenKernelRejected) {
  NetworkSpec s = conv_spec(Activation::tanh, Readout::flatten, 8);
  s.layers = {ConvLayer{2, 3}};
  EXPECT_THROW(build_network(s, 0), ArchitectureError);
}

TEST(BuildNetwork, WeightsLookStandardNormal) {
  const auto st = build_network(conv_spec(Activation::tanh, Readout::flatten, 256, {8, 8, 4}), 9);
  const auto v = st.flat();
  const double mean = v.mean();
  const double var = (v.array() - mean).square().mean();
  const double se = 1.0 / std::sqrt(double(v.size()));
  EXPECT_LT(std::abs(mean), 4 * se);
  EXPECT_LT(std::abs(var - 1.0), 4 * std::sqrt(2.0) * se);
}

TEST(Forward, ZeroInputGivesZero) {
  for (auto act : {Activation::identity, Activation::tanh, Activation::relu}) {
    for (const auto& c : layer_kind_cases()) {
      NetworkSpec s = c.spec;
      s.activation = act;
      const auto st = build_network(s, 3);
      Tensor zero(s.input);
      EXPECT_EQ(wcn::testing::eval(st, zero), 0.0) << c.name;
    }
  }
}

TEST(Forward, IdentityDenseIsHomogeneous) {
  NetworkSpec s = conv_spec(Activation::identity, Readout::flatten, 7);
  s.layers = {DenseLayer{}, DenseLayer{}, DenseLayer{}};
  const auto st = build_network(s, 5);
  const auto xs = random_batch(s.input, 3, 11);
  for (const auto& x : xs) {
    const double f1 = wcn::testing::eval(st, x), f2 = wcn::testing::eval(st, x.scaled(2.0));
    EXPECT_NEAR(f2, 2.0 * f1, 1e-12 * (1 + std::abs(f1)));
  }
}

// Hand evaluation: 1x1 input v, 1x1 kernel, c_in = 1, n = 4, all weights 1,
// identity. Conv fan-in normalization is 1/sqrt(1*1*c_in) = 1 so every
// channel carries v; the GAP readout gives (1/(1*1*sqrt(4))) * 4v = 2v.
TEST(Forward, OneByOneGapHandValue) {
  NetworkSpec s;
  s.layers = {ConvLayer{1, 1}};
  s.activation = Activation::identity;
  s.readout = Readout::gap;
  s.input = {1, 1, 1};
  s.width = 4;
  auto st = build_network(s, 0);
  for (auto& w : st.weights) w.setOnes();
  for (double v : {1.0, -0.5, 3.25}) {
    Tensor x(s.input, v);
    EXPECT_DOUBLE_EQ(wcn::testing::eval(st, x), 2.0 * v);
  }
}

TEST(Forward, BatchMatchesSingle) {
  for (const auto& c : layer_kind_cases()) {
    const auto st = build_network(c.spec, 17);
    const auto xs = random_batch(c.spec.input, 5, 2);
    const auto all = forward(st, xs, 2);
    for (std::size_t i = 0; i < xs.size(); ++i)
      EXPECT_NEAR(all(Eigen::Index(i)), wcn::testing::eval(st, xs[i]), 1e-13) << c.name;
  }
}

TEST(Forward, RejectsMalformedInput) {
  const auto st = build_network(conv_spec(Activation::tanh, Readout::flatten, 4), 1);
  Tensor bad(Shape{3, 3, 1});
  EXPECT_THROW(wcn::testing::eval(st, bad), ShapeError);
}

TEST(Gradient, MatchesFiniteDifferencesForEveryLayerKind) {
  std::mt19937_64 gen(123);
  for (const auto& c : layer_kind_cases()) {
    const auto st = build_network(c.spec, 29);
    const auto x = random_batch(c.spec.input, 1, 31)[0];
    const auto g = gradient(st, x);
    ASSERT_EQ(std::size_t(g.size()), st.parameter_count()) << c.name;
    std::uniform_int_distribution<Eigen::Index> pick(0, g.size() - 1);
    for (int k = 0; k < 20; ++k) {
      const Eigen::Index idx = pick(gen);
      const double fd = central_difference(st, x, idx);
      EXPECT_LT(relative_error(fd, g(idx)), 1e-4) << c.name << " coordinate " << idx;
    }
  }
}

TEST(Gradient, WeightedGradientIsSeedCombination) {
  for (const auto& c : layer_kind_cases()) {
    const auto st = build_network(c.spec, 8);
    const auto xs = random_batch(c.spec.input, 3, 4);
    Vector<double> seeds(3);
    seeds << 0.5, -1.25, 2.0;
    const auto tr = forward_trace(st, std::span<const Tensor>(xs));
    const auto grads = weighted_gradient(st, tr, seeds);
    Vector<double> flat(static_cast<Eigen::Index>(st.parameter_count()));
    Eigen::Index off = 0;
    for (const auto& g : grads) {
      flat.segment(off, g.size()) = Eigen::Map<const Vector<double>>(g.data(), g.size());
      off += g.size();
    }
    Vector<double> expect = Vector<double>::Zero(flat.size());
    for (int a = 0; a < 3; ++a) expect += seeds(a) * gradient(st, xs[std::size_t(a)]);
    EXPECT_LT((flat - expect).norm(), 1e-12 * (1 + expect.norm())) << c.name;
  }
}

TEST(Gradient, ReadoutGradientIsScaledLastActivation) {
  NetworkSpec s = conv_spec(Activation::identity, Readout::flatten, 6);
  s.layers = {DenseLayer{}, DenseLayer{}};
  const auto st = build_network(s, 2);
  const auto x = random_batch(s.input, 1, 3)[0];
  const auto tr = forward_trace(st, std::span<const Tensor>(&x, 1));
  const auto g = gradient(st, x);
  const Eigen::Index nv = st.readout().size();
  const Vector<double> gv = g.tail(nv);
  const Vector<double> last = tr.act.back().row(0).transpose() / std::sqrt(6.0);
  EXPECT_LT((gv - last).norm(), 1e-14);
}

TEST(Gradient, FirstLayerVanishesAtZeroInput) {
  for (auto act : {Activation::identity, Activation::tanh}) {
    NetworkSpec s = conv_spec(act, Readout::flatten, 5);
    s.layers = {ConvLayer{3, 3}, ConvLayer{3, 3}};
    const auto st = build_network(s, 6);
    Tensor zero(s.input);
    const auto g = gradient(st, zero);
    const Eigen::Index first = st.weights[0].size();
    EXPECT_EQ(g.head(first).cwiseAbs().maxCoeff(), 0.0);
    for (Eigen::Index k : {Eigen::Index(0), first / 2, first - 1})
      EXPECT_NEAR(central_difference(st, zero, k), 0.0, 1e-12);
  }
}

TEST(Ntk, SymmetricPsdAndMatchesGradientDots) {
  for (const auto& c : layer_kind_cases()) {
    const auto st = build_network(c.spec, 12);
    const auto xs = random_batch(c.spec.input, 6, 13);
    const auto K = ntk_matrix(st, std::span<const Tensor>(xs));
    EXPECT_LT((K - K.transpose()).cwiseAbs().maxCoeff(), 1e-14);
    Eigen::SelfAdjointEigenSolver<Matrix<double>> es(K);
    EXPECT_GE(es.eigenvalues().minCoeff(), -1e-8 * K.trace()) << c.name;
    std::vector<Vector<double>> gs;
    for (const auto& x : xs) gs.push_back(gradient(st, x));
    for (std::size_t i = 0; i < xs.size(); ++i) {
      EXPECT_GE(K(Eigen::Index(i), Eigen::Index(i)), 0.0);
      for (std::size_t j = 0; j < xs.size(); ++j) {
        const double kij = K(Eigen::Index(i), Eigen::Index(j));
        EXPECT_NEAR(kij, gs[i].dot(gs[j]), 1e-12 * (1 + std::abs(kij))) << c.name;
        EXPECT_LE(std::abs(kij), std::sqrt(K(Eigen::Index(i), Eigen::Index(i)) *
                                           K(Eigen::Index(j), Eigen::Index(j))) * (1 + 1e-12));
      }
    }
  }
}

TEST(Ntk, RectangularBlockMatchesSquare) {
  const auto c = layer_kind_cases()[2];
  const auto st = build_network(c.spec, 21);
  const auto xs = random_batch(c.spec.input, 7, 22);
  const auto K = ntk_matrix(st, std::span<const Tensor>(xs));
  const std::span<const Tensor> all(xs);
  const auto B = ntk_matrix(st, all.subspan(0, 3), all.subspan(2, 5), 2);
  EXPECT_LT((B - K.block(0, 2, 3, 5)).cwiseAbs().maxCoeff(), 1e-13);
}

TEST(Ntk, BitStableAcrossCalls) {
  const auto c = layer_kind_cases()[0];
  const auto st = build_network(c.spec, 1);
  const auto xs = random_batch(c.spec.input, 5, 2);
  const auto K1 = ntk_matrix(st, std::span<const Tensor>(xs));
  const auto K2 = ntk_matrix(st, std::span<const Tensor>(xs));
  EXPECT_EQ(0, std::memcmp(K1.data(), K2.data(), sizeof(double) * std::size_t(K1.size())));
}

TEST(AnalyticOhl, MatchesEmpiricalNtk) {
  for (auto ro : {Readout::flatten, Readout::gap}) {
    for (auto act : {Activation::tanh, Activation::relu, Activation::identity}) {
      const auto spec = conv_spec(act, ro, 32, {6, 5, 2});
      const auto st = build_network(spec, 77);
      const auto xs = random_batch(spec.input, 3, 78);
      const auto K = ntk_matrix(st, std::span<const Tensor>(xs));
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
          const double a = analytic_ohl_ntk(st, xs[std::size_t(i)], xs[std::size_t(j)]);
          EXPECT_LT(std::abs(a - K(i, j)) / std::abs(K(i, j)), 1e-10);
          if (i == j) {
            EXPECT_GE(a, 0.0);
          }
        }
    }
  }
}

// Identity activation, 1x1 image, 1x1 kernel, c_in = 1, flatten:
// f = (1/sqrt(n)) sum_i V_i U_i x, so Theta(x1,x2) = x1 x2 (|U|^2 + |V|^2) / n.
TEST(AnalyticOhl, IdentityOneByOneHandFormula) {
  NetworkSpec s;
  s.layers = {ConvLayer{1, 1}};
  s.activation = Activation::identity;
  s.readout = Readout::flatten;
  s.input = {1, 1, 1};
  s.width = 9;
  const auto st = build_network(s, 4);
  const double x1 = 0.7, x2 = -1.3;
  const double hand = x1 * x2 * (st.weights[0].squaredNorm() + st.readout().squaredNorm()) / 9.0;
  EXPECT_NEAR(analytic_ohl_ntk(st, Tensor(s.input, x1), Tensor(s.input, x2)), hand, 1e-14);
}

TEST(AnalyticOhl, RejectsDeeperNetworks) {
  NetworkSpec s = conv_spec(Activation::tanh, Readout::flatten, 4);
  s.layers = {ConvLayer{3, 3}, ConvLayer{3, 3}};
  const auto st = build_network(s, 0);
  Tensor x(s.input);
  EXPECT_THROW(analytic_ohl_ntk(st, x, x), ArchitectureError);
}

TEST(Precision, FloatPathTracksDouble) {
  const auto spec = conv_spec(Activation::tanh, Readout::flatten, 16);
  const auto st = build_network(spec, 3);
  const auto sf = st.cast<float>();
  const auto xs = random_batch(spec.input, 4, 5);
  const auto fd = forward(st, xs);
  const auto ff = forward(sf, xs);
  EXPECT_LT((fd - ff.cast<double>()).cwiseAbs().maxCoeff(), 1e-4);
}
