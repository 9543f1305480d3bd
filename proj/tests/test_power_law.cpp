#include <gtest/gtest.h>

#include <cmath>

#include "wcn/power_law.hpp"

using namespace wcn;

namespace {

std::vector<double> eval(const std::vector<int>& ns, double (*f)(double)) {
  std::vector<double> out;
  for (int n : ns) out.push_back(f(double(n)));
  return out;
}

const std::vector<int> kPowers{16, 32, 64, 128, 256, 512};

}  // namespace

TEST(FitPowerLaw, ExactInversePower) {
  const auto fit = fit_power_law(kPowers, eval(kPowers, [](double n) { return 7.0 / n; }), FitRange::all());
  EXPECT_NEAR(fit.alpha, 1.0, 1e-12);
  EXPECT_NEAR(fit.log_amplitude, std::log(7.0), 1e-12);
  EXPECT_NEAR(fit.r_squared, 1.0, 1e-12);
  EXPECT_EQ(fit.n_min, 16);
  EXPECT_EQ(fit.n_max, 512);
}

TEST(FitPowerLaw, ExactInverseSquare) {
  const auto fit = fit_power_law(kPowers, eval(kPowers, [](double n) { return 3.0 / (n * n); }), FitRange::all());
  EXPECT_NEAR(fit.alpha, 2.0, 1e-12);
}

// Reference values from numpy.polyfit on log-log data.
TEST(FitPowerLaw, SmallWidthsBiasTheExponent) {
  const std::vector<int> all{16, 32, 64, 256, 512, 1024, 2048};
  const auto y = eval(all, [](double n) { return 1.0 / n + 5.0 / (n * n); });
  const auto small = fit_power_law(all, y, {16, 64});
  const auto large = fit_power_law(all, y, {256, 2048});
  EXPECT_NEAR(small.alpha, 1.1418964830002956, 1e-12);
  EXPECT_NEAR(large.alpha, 1.0080157456804821, 1e-12);
  EXPECT_GT(small.alpha, large.alpha);
  EXPECT_LT(std::abs(large.alpha - 1.0), 0.05);
}

TEST(FitPowerLaw, NoisyReferenceFit) {
  const std::vector<int> ns{64, 128, 256, 512, 1024};
  const double noise[] = {0.1, -0.05, 0.02, 0.0, -0.07};
  std::vector<double> y;
  for (std::size_t k = 0; k < ns.size(); ++k) y.push_back(2.5 * std::pow(double(ns[k]), -1.3) * std::exp(noise[k]));
  const auto fit = fit_power_law(ns, y);
  EXPECT_NEAR(fit.alpha, 1.34183815618578, 1e-12);
  EXPECT_NEAR(fit.log_amplitude, 1.1482907318741584, 1e-12);
  EXPECT_NEAR(fit.r_squared, 0.9989157155199815, 1e-12);
}

TEST(FitPowerLaw, ScaleChangesOnlyAmplitude) {
  const std::vector<int> ns{64, 128, 256, 512};
  const std::vector<double> y{0.3, 0.17, 0.07, 0.04};
  const auto a = fit_power_law(ns, y);
  for (double c : {1e-6, 0.5, 3.0, 1e8}) {
    std::vector<double> z;
    for (double v : y) z.push_back(c * v);
    const auto b = fit_power_law(ns, z);
    EXPECT_NEAR(b.alpha, a.alpha, 1e-12);
    EXPECT_NEAR(b.log_amplitude, a.log_amplitude + std::log(c), 1e-9);
    EXPECT_NEAR(b.r_squared, a.r_squared, 1e-12);
  }
}

TEST(FitPowerLaw, DefaultRangeStartsAt64) {
  const std::vector<int> ns{16, 32, 64, 128, 256};
  const auto fit = fit_power_law(ns, {1, 1, 1, 1, 1});
  EXPECT_EQ(fit.widths, (std::vector<int>{64, 128, 256}));
  EXPECT_EQ(fit.r_squared, 1.0);
}

TEST(FitPowerLaw, Errors) {
  try {
    fit_power_law({64, 128, 256}, {1.0, 0.0, 0.5});
    FAIL();
  } catch (const FitError& e) {
    EXPECT_NE(std::string(e.what()).find("width 128"), std::string::npos);
  }
  EXPECT_THROW(fit_power_law({64, 128}, {1.0, 0.5}), FitError);
  EXPECT_THROW(fit_power_law({16, 32, 64}, {1.0, 0.5, 0.25}), FitError);  // only one width >= 64
}

TEST(ScalingSeries, Validation) {
  ScalingSeries s;
  s.observable = "var";
  s.widths = {8, 16};
  s.samples = {{1.0, 2.0}, {3.0}};
  EXPECT_THROW(s.validate(), SeriesError);
  s.samples[1].push_back(5.0);
  EXPECT_NO_THROW(s.validate());
  EXPECT_EQ(s.means(), (std::vector<double>{1.5, 4.0}));
  EXPECT_NEAR(s.std_errors()[0], 0.5, 1e-15);
  s.widths = {16, 8};
  EXPECT_THROW(s.validate(), SeriesError);
}
