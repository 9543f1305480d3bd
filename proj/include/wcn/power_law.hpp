#pragma once
// Width-indexed measurement series and 1/n^alpha fits.

#include <climits>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace wcn {

class FitError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class SeriesError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ScalingSeries {
  std::string observable;
  std::vector<int> widths;
  /// samples[w] holds one scalar per seed; the per-width value is their mean.
  std::vector<std::vector<double>> samples;
  std::string reduction;
  nlohmann::json metadata = nlohmann::json::object();
  /// Seeds dropped per width (non-finite or diverged).
  std::vector<int> excluded;

  void validate() const {
    if (samples.size() != widths.size()) throw SeriesError(observable + ": samples and widths differ in length");
    for (std::size_t k = 0; k < widths.size(); ++k) {
      if (k > 0 && widths[k] <= widths[k - 1]) throw SeriesError(observable + ": widths must be strictly increasing");
      if (samples[k].size() < 2)
        throw SeriesError(observable + ": width " + std::to_string(widths[k]) + " has " +
                          std::to_string(samples[k].size()) + " samples, at least 2 are required");
    }
  }

  std::vector<double> means() const {
    std::vector<double> out;
    for (const auto& s : samples) {
      double acc = 0.0;
      for (double v : s) acc += v;
      out.push_back(s.empty() ? 0.0 : acc / double(s.size()));
    }
    return out;
  }

  /// Standard error of each per-width mean (unbiased sample variance).
  std::vector<double> std_errors() const {
    const auto m = means();
    std::vector<double> out;
    for (std::size_t k = 0; k < samples.size(); ++k) {
      const auto& s = samples[k];
      if (s.size() < 2) {
        out.push_back(0.0);
        continue;
      }
      double sq = 0.0;
      for (double v : s) sq += (v - m[k]) * (v - m[k]);
      out.push_back(std::sqrt(sq / double(s.size() - 1) / double(s.size())));
    }
    return out;
  }

  int total_excluded() const {
    int t = 0;
    for (int e : excluded) t += e;
    return t;
  }
};

struct FitRange {
  int n_min = 64;
  int n_max = INT_MAX;

  static FitRange all() { return {0, INT_MAX}; }
};

struct PowerLawFit {
  double alpha = 0.0;
  double log_amplitude = 0.0;
  double r_squared = 0.0;
  int n_min = 0;
  int n_max = 0;
  std::vector<int> widths;

  double predict(double n) const { return std::exp(log_amplitude - alpha * std::log(n)); }
};

/// OLS of log(value) on log(n) over widths inside `range`; alpha is the
/// negated slope.
inline PowerLawFit fit_power_law(const std::vector<int>& widths, const std::vector<double>& values,
                                 FitRange range = {}) {
  if (widths.size() != values.size()) throw FitError("widths and values differ in length");
  std::vector<double> xs, ys;
  PowerLawFit fit;
  for (std::size_t k = 0; k < widths.size(); ++k) {
    if (widths[k] < range.n_min || widths[k] > range.n_max) continue;
    if (!(values[k] > 0.0))
      throw FitError("nonpositive mean " + std::to_string(values[k]) + " at width " + std::to_string(widths[k]));
    xs.push_back(std::log(double(widths[k])));
    ys.push_back(std::log(values[k]));
    fit.widths.push_back(widths[k]);
  }
  if (xs.size() < 3)
    throw FitError("power-law fit needs at least 3 widths in range, got " + std::to_string(xs.size()));
  const double n = double(xs.size());
  double mx = 0, my = 0;
  for (std::size_t k = 0; k < xs.size(); ++k) mx += xs[k], my += ys[k];
  mx /= n;
  my /= n;
  double sxx = 0, sxy = 0, syy = 0;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    sxx += (xs[k] - mx) * (xs[k] - mx);
    sxy += (xs[k] - mx) * (ys[k] - my);
    syy += (ys[k] - my) * (ys[k] - my);
  }
  const double slope = sxy / sxx;
  fit.alpha = -slope;
  fit.log_amplitude = my - slope * mx;
  fit.r_squared = syy > 0.0 ? std::min(1.0, std::max(0.0, sxy * sxy / (sxx * syy))) : 1.0;
  fit.n_min = fit.widths.front();
  fit.n_max = fit.widths.back();
  return fit;
}

inline PowerLawFit fit_power_law(const ScalingSeries& s, FitRange range = {}) {
  return fit_power_law(s.widths, s.means(), range);
}

inline nlohmann::json to_json(const PowerLawFit& f) {
  return {{"alpha", f.alpha},
          {"log_amplitude", f.log_amplitude},
          {"r_squared", f.r_squared},
          {"fit_range", {f.n_min, f.n_max}},
          {"widths", f.widths}};
}

inline nlohmann::json to_json(const ScalingSeries& s) {
  return {{"observable", s.observable}, {"widths", s.widths},     {"samples", s.samples},
          {"means", s.means()},         {"std_errors", s.std_errors()}, {"reduction", s.reduction},
          {"excluded", s.excluded},     {"metadata", s.metadata}};
}

}  // namespace wcn
