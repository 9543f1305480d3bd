#pragma once
// Ensemble measurements of width scaling: NTK mean and variance at
// initialization, dTheta/dt at t = 0 and kernel drift after training.
// Kernel-valued observables are reduced over a probe grid (all pairs of a
// probe set) to one scalar per seed.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "wcn/arch_io.hpp"
#include "wcn/training.hpp"

namespace wcn {

class ResourceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct LabOptions {
  std::vector<int> widths;
  int seeds = 2;
  std::uint64_t root_seed = 0;
  unsigned workers = 1;
  std::size_t max_parameters = 50'000'000;
};

template <typename T>
constexpr const char* precision_name() {
  return sizeof(T) == sizeof(double) ? "double" : "float";
}

namespace detail {

inline void check_lab_options(const LabOptions& opt, const NetworkSpec& family) {
  if (opt.seeds < 2) throw SeriesError("seeds must be at least 2, got " + std::to_string(opt.seeds));
  if (opt.widths.empty()) throw SeriesError("widths must be nonempty");
  for (std::size_t k = 0; k < opt.widths.size(); ++k) {
    if (k > 0 && opt.widths[k] <= opt.widths[k - 1]) throw SeriesError("widths must be strictly increasing");
    const std::size_t p = make_layout(family.with_width(opt.widths[k])).parameter_count();
    if (p > opt.max_parameters)
      throw ResourceError("width " + std::to_string(opt.widths[k]) + " needs " + std::to_string(p) +
                          " parameters, over the budget of " + std::to_string(opt.max_parameters));
  }
}

template <typename T>
nlohmann::json lab_metadata(const NetworkSpec& family, const LabOptions& opt, const Dataset& probe) {
  nlohmann::json arch = to_json(family);
  arch.erase("width");
  return {{"architecture", arch},
          {"precision", precision_name<T>()},
          {"root_seed", opt.root_seed},
          {"seeds", opt.seeds},
          {"seed_rule", "derive_seed(root_seed, width, index)"},
          {"probe_size", probe.size()},
          {"probe_digest", probe.digest}};
}

template <typename T>
NetworkState<T> ensemble_member(const NetworkSpec& family, int width, std::uint64_t root, std::size_t index) {
  return build_network<T>(family.with_width(width), derive_seed(root, std::uint64_t(width), index));
}

/// Gradient of 1/2 sum (f - y)^2 at `st`, one matrix per weight array.
template <typename T>
std::vector<Matrix<T>> loss_gradient(const NetworkState<T>& st, const Dataset& train) {
  const Trace<T> tr = forward_trace(st, std::span<const Tensor>(train.inputs));
  Vector<T> r(tr.batch);
  for (Eigen::Index i = 0; i < r.size(); ++i) r(i) = tr.output(i) - T(train.labels[std::size_t(i)]);
  return weighted_gradient(st, tr, r);
}

}  // namespace detail

/// Mean and variance of Theta at initialization over the probe grid.
/// Per seed s the mean series stores mean_e sign(m_e) Theta_se and the
/// variance series N/(N-1) mean_e (Theta_se - m_e)^2, where m_e is the
/// across-seed mean; the per-width means are then mean_e |m_e| and the
/// probe-averaged unbiased variance.
template <typename T = double>
std::pair<ScalingSeries, ScalingSeries> measure_ntk_stats(const NetworkSpec& family, const Dataset& probe,
                                                          const LabOptions& opt) {
  detail::check_lab_options(opt, family);
  ScalingSeries mean, var;
  mean.observable = "ntk_mean";
  var.observable = "ntk_variance";
  mean.reduction = "mean over probe grid of |across-seed mean of Theta|";
  var.reduction = "mean over probe grid of unbiased across-seed variance of Theta";
  mean.metadata = var.metadata = detail::lab_metadata<T>(family, opt, probe);
  const std::size_t S = std::size_t(opt.seeds);
  for (int n : opt.widths) {
    std::vector<Matrix<double>> thetas(S);
    parallel_for(
        S, [&](std::size_t s) {
          thetas[s] = kernel(detail::ensemble_member<T>(family, n, opt.root_seed, s), probe.inputs, probe.inputs);
        },
        opt.workers);
    Matrix<double> m = Matrix<double>::Zero(thetas[0].rows(), thetas[0].cols());
    for (const auto& t : thetas) m += t;
    m /= double(S);
    const Matrix<double> sign = m.unaryExpr([](double v) { return double((v > 0) - (v < 0)); });
    std::vector<double> ms, vs;
    for (const auto& t : thetas) {
      ms.push_back(sign.cwiseProduct(t).mean());
      vs.push_back(double(S) / double(S - 1) * (t - m).array().square().mean());
    }
    mean.widths.push_back(n);
    var.widths.push_back(n);
    mean.samples.push_back(std::move(ms));
    var.samples.push_back(std::move(vs));
    mean.excluded.push_back(0);
    var.excluded.push_back(0);
  }
  return {mean, var};
}

/// One-sided difference of Theta along one GD step of size
/// eta = fd_step * stability_lr(Theta_train); per seed the mean |dTheta/dt|
/// over the probe grid.
template <typename T = double>
ScalingSeries measure_dtheta_dt0(const NetworkSpec& family, const Dataset& train, const Dataset& probe,
                                 const LabOptions& opt, double fd_step = 0.01) {
  if (!(fd_step > 0.0)) throw SeriesError("fd_step must be positive");
  detail::check_lab_options(opt, family);
  ScalingSeries out;
  out.observable = "dtheta_dt0";
  out.reduction = "mean over probe grid of |dTheta/dt|, averaged over seeds";
  out.metadata = detail::lab_metadata<T>(family, opt, probe);
  out.metadata["fd_step"] = fd_step;
  out.metadata["train_digest"] = train.digest;
  const std::size_t S = std::size_t(opt.seeds);
  for (int n : opt.widths) {
    std::vector<double> samples(S);
    parallel_for(
        S,
        [&](std::size_t s) {
          NetworkState<T> st = detail::ensemble_member<T>(family, n, opt.root_seed, s);
          const Matrix<double> ktt = kernel(st, train.inputs, train.inputs);
          const bool same = &probe == &train || probe.digest == train.digest;
          const Matrix<double> before = same ? ktt : kernel(st, probe.inputs, probe.inputs);
          double eta = 0.0;
          try {
            eta = fd_step * stability_lr(ktt);
          } catch (const KernelError&) {
            samples[s] = std::nan("");
            return;
          }
          const auto grads = detail::loss_gradient(st, train);
          for (std::size_t k = 0; k < grads.size(); ++k) st.weights[k] -= T(eta) * grads[k];
          const Matrix<double> after = kernel(st, probe.inputs, probe.inputs);
          samples[s] = ((after - before) / eta).cwiseAbs().mean();
        },
        opt.workers);
    std::vector<double> kept;
    int dropped = 0;
    for (double v : samples) {
      if (std::isfinite(v))
        kept.push_back(v);
      else
        ++dropped;
    }
    out.widths.push_back(n);
    out.samples.push_back(std::move(kept));
    out.excluded.push_back(dropped);
  }
  return out;
}

struct DriftOptions {
  /// Positive: fixed rate; otherwise stability_lr of each seed's train kernel.
  double lr = 0.0;
  long step_cap = 10000;
  long snapshot_stride = 10;
};

struct DriftSeed {
  std::optional<long> perfect_step;
  bool capped = false;
  std::optional<long> instability;
  double lr = 0.0;
  long loss_increases = 0;
};

struct DriftWidth {
  int width = 0;
  /// First step at which every seed had reached 100% train accuracy.
  long measure_step = 0;
  std::vector<DriftSeed> seeds;
};

struct DriftResult {
  ScalingSeries series;
  std::vector<DriftWidth> details;

  int capped() const {
    int c = 0;
    for (const auto& w : details)
      for (const auto& s : w.seeds) c += s.capped;
    return c;
  }
};

/// Mean |Theta(T) - Theta(0)| over the probe grid, where T is the first step
/// at which all seeds of a width reach 100% train accuracy (or the step cap).
template <typename T = double>
DriftResult measure_kernel_drift(const NetworkSpec& family, const Dataset& train, const Dataset& probe,
                                 const LabOptions& opt, const DriftOptions& dopt = {}) {
  detail::check_lab_options(opt, family);
  DriftResult out;
  out.series.observable = "kernel_drift";
  out.series.reduction = "mean over probe grid of |Theta(T) - Theta(0)|, averaged over seeds";
  out.series.metadata = detail::lab_metadata<T>(family, opt, probe);
  out.series.metadata["train_digest"] = train.digest;
  out.series.metadata["lr_policy"] = dopt.lr > 0.0 ? "fixed" : "stability";
  out.series.metadata["step_cap"] = dopt.step_cap;
  const std::size_t S = std::size_t(opt.seeds);
  const Dataset none;
  for (int n : opt.widths) {
    std::vector<NetworkState<T>> states(S);
    std::vector<Matrix<double>> theta0(S);
    std::vector<Trajectory> trajs(S);
    DriftWidth w;
    w.width = n;
    w.seeds.resize(S);
    TrainOptions topt;
    topt.probe = &probe.inputs;
    topt.snapshot_stride = dopt.snapshot_stride;
    topt.log_stride = 1;
    parallel_for(
        S,
        [&](std::size_t s) {
          states[s] = detail::ensemble_member<T>(family, n, opt.root_seed, s);
          theta0[s] = kernel(states[s], probe.inputs, probe.inputs);
          const Matrix<double> ktt =
              &probe == &train ? theta0[s] : kernel(states[s], train.inputs, train.inputs);
          w.seeds[s].lr = dopt.lr > 0.0 ? dopt.lr : stability_lr(ktt);
          trajs[s] = train_full(states[s], train, none, w.seeds[s].lr, StopRule{dopt.step_cap, true, {}}, topt);
        },
        opt.workers);
    long measure = 0;
    for (std::size_t s = 0; s < S; ++s) {
      w.seeds[s].perfect_step = trajs[s].perfect_step;
      w.seeds[s].capped = !trajs[s].perfect_step;
      if (!trajs[s].diverged) measure = std::max(measure, trajs[s].steps.back().step);
    }
    w.measure_step = measure;
    std::vector<double> samples(S);
    parallel_for(
        S,
        [&](std::size_t s) {
          Trajectory& tr = trajs[s];
          const long at = tr.steps.back().step;
          if (at < measure && !tr.diverged) {
            TrainOptions more = topt;
            more.start_step = at;
            Trajectory rest = train_full(states[s], train, none, w.seeds[s].lr, StopRule{measure - at}, more);
            tr.steps.insert(tr.steps.end(), rest.steps.begin() + 1, rest.steps.end());
            for (auto& snap : rest.snapshots)
              if (tr.snapshots.empty() || snap.step > tr.snapshots.back().step) tr.snapshots.push_back(std::move(snap));
            tr.diverged = rest.diverged;
            tr.loss_increases += rest.loss_increases;
          }
          w.seeds[s].instability = detect_instability(tr);
          w.seeds[s].loss_increases = tr.loss_increases;
          samples[s] = tr.diverged ? std::nan("")
                                   : (kernel(states[s], probe.inputs, probe.inputs) - theta0[s]).cwiseAbs().mean();
        },
        opt.workers);
    std::vector<double> kept;
    int dropped = 0;
    for (double v : samples) {
      if (std::isfinite(v))
        kept.push_back(v);
      else
        ++dropped;
    }
    out.series.widths.push_back(n);
    out.series.samples.push_back(std::move(kept));
    out.series.excluded.push_back(dropped);
    out.details.push_back(std::move(w));
  }
  nlohmann::json steps = nlohmann::json::array();
  for (const auto& w : out.details) steps.push_back(w.measure_step);
  out.series.metadata["measure_steps"] = steps;
  out.series.metadata["capped_seeds"] = out.capped();
  return out;
}

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// Writes <stem>.json (series, fit, digest), <stem>.csv (width, mean, stderr)
/// and <stem>_plot.csv (log n, log value, fit line) into `dir`.
inline nlohmann::json write_series_files(const std::filesystem::path& dir, const std::string& stem,
                                         const ScalingSeries& s, const std::optional<PowerLawFit>& fit,
                                         const std::string& config_digest, const std::string& fit_error = "") {
  std::filesystem::create_directories(dir);
  nlohmann::json j{{"config_digest", config_digest}, {"series", to_json(s)}};
  if (fit)
    j["fit"] = to_json(*fit);
  else
    j["fit"] = {{"error", fit_error}};
  std::ofstream(dir / (stem + ".json")) << j.dump(2) << '\n';
  const auto means = s.means();
  const auto errs = s.std_errors();
  std::ofstream csv(dir / (stem + ".csv"));
  csv << "# config_digest " << config_digest << "\nwidth,mean,stderr\n";
  for (std::size_t k = 0; k < s.widths.size(); ++k)
    csv << s.widths[k] << ',' << format_double(means[k]) << ',' << format_double(errs[k]) << '\n';
  std::ofstream plot(dir / (stem + "_plot.csv"));
  plot << "# config_digest " << config_digest << "\nlog_n,log_value,fit_line\n";
  for (std::size_t k = 0; k < s.widths.size(); ++k) {
    const double ln = std::log(double(s.widths[k]));
    plot << format_double(ln) << ',' << format_double(means[k] > 0 ? std::log(means[k]) : std::nan("")) << ','
         << (fit ? format_double(fit->log_amplitude - fit->alpha * ln) : std::string("nan")) << '\n';
  }
  return j;
}

}  // namespace wcn
