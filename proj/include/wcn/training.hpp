#pragma once
// Full-batch gradient descent on 1/2 sum (f - y)^2, frozen-kernel linearized
// evolution, full-vs-linear test-loss gaps and late-time instability checks.

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "wcn/dataset.hpp"
#include "wcn/forward.hpp"
#include "wcn/parallel.hpp"
#include "wcn/power_law.hpp"

namespace wcn {

class KernelError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct StepRecord {
  long step = 0;
  double train_loss = 0.0;
  double train_accuracy = 0.0;
  double test_loss = 0.0;
  double test_accuracy = 0.0;
};

struct KernelSnapshot {
  long step = 0;
  Matrix<double> theta;
};

struct Trajectory {
  std::string model = "full";  // full | linear
  std::vector<StepRecord> steps;
  std::vector<KernelSnapshot> snapshots;
  bool diverged = false;
  std::optional<long> perfect_step;
  /// Steps whose train loss exceeded the previous step's.
  long loss_increases = 0;

  void write_jsonl(std::ostream& os) const {
    for (const auto& r : steps)
      os << nlohmann::json{{"model", model},
                           {"step", r.step},
                           {"train_loss", r.train_loss},
                           {"train_accuracy", r.train_accuracy},
                           {"test_loss", r.test_loss},
                           {"test_accuracy", r.test_accuracy}}
                .dump()
         << '\n';
  }
};

/// Training stops at the first step satisfying any enabled rule.
struct StopRule {
  long max_steps = 1000;
  bool at_perfect_accuracy = false;
  std::optional<double> loss_below;
};

struct TrainOptions {
  long log_stride = 1;
  /// Kernel snapshots on `probe` every `snapshot_stride` global steps.
  long snapshot_stride = 10;
  const Batch* probe = nullptr;
  long start_step = 0;
  double divergence_loss = 1e6;
};

inline double half_sse(const Vector<double>& f, const std::vector<double>& y) {
  double acc = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) acc += 0.5 * (f(Eigen::Index(i)) - y[i]) * (f(Eigen::Index(i)) - y[i]);
  return acc;
}

/// Mean of 1/2 (f - y)^2; zero for an empty split.
inline double mean_half_se(const Vector<double>& f, const std::vector<double>& y) {
  return y.empty() ? 0.0 : half_sse(f, y) / double(y.size());
}

/// sign(f) against +-1 labels; f = 0 counts as wrong.
inline double accuracy(const Vector<double>& f, const std::vector<double>& y) {
  if (y.empty()) return 0.0;
  std::size_t right = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double v = f(Eigen::Index(i));
    right += (v > 0.0 && y[i] > 0.0) || (v < 0.0 && y[i] < 0.0);
  }
  return double(right) / double(y.size());
}

/// 0.25 / lambda_max by power iteration; stops when successive Rayleigh
/// quotients agree to 1e-12 relative.
inline double stability_lr(const Matrix<double>& K) {
  if (K.rows() != K.cols() || K.rows() == 0) throw KernelError("stability_lr needs a nonempty square kernel");
  if (K.cwiseAbs().maxCoeff() == 0.0) throw KernelError("stability_lr: kernel is identically zero");
  Vector<double> v(K.rows());
  for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = 1.0 + 0.1 * double(i % 7);
  v.normalize();
  double lambda = 0.0;
  for (int it = 0; it < 100000; ++it) {
    Vector<double> w = K * v;
    const double next = v.dot(w);
    const double norm = w.norm();
    if (norm == 0.0) throw KernelError("stability_lr: power iteration hit the kernel's null space");
    v = w / norm;
    if (it > 0 && std::abs(next - lambda) <= 1e-12 * std::abs(next)) {
      lambda = next;
      break;
    }
    lambda = next;
  }
  if (!(lambda > 0.0)) throw KernelError("stability_lr: largest eigenvalue is not positive");
  return 0.25 / lambda;
}

template <typename T>
Vector<double> outputs(const NetworkState<T>& st, const Batch& xs) {
  if (xs.empty()) return Vector<double>(0);
  return forward(st, std::span<const Tensor>(xs)).template cast<double>();
}

template <typename T>
Matrix<double> kernel(const NetworkState<T>& st, const Batch& rows, const Batch& cols) {
  if (&rows == &cols) return ntk_matrix(st, std::span<const Tensor>(rows)).template cast<double>();
  return ntk_matrix(st, std::span<const Tensor>(rows), std::span<const Tensor>(cols)).template cast<double>();
}

/// Full-batch GD, updating `st` in place. Step indices are global
/// (start_step + local step); the first record is taken before any update.
template <typename T>
Trajectory train_full(NetworkState<T>& st, const Dataset& train, const Dataset& test, double lr, const StopRule& stop,
                      const TrainOptions& opt = {}) {
  Trajectory tr;
  tr.model = "full";
  const std::span<const Tensor> xs(train.inputs);
  double prev_loss = std::numeric_limits<double>::infinity();
  for (long local = 0;; ++local) {
    const long step = opt.start_step + local;
    const Trace<T> trace = forward_trace(st, xs);
    const Vector<double> f = trace.output.template cast<double>();
    const double loss = half_sse(f, train.labels);
    const double acc = accuracy(f, train.labels);
    const bool diverged = !std::isfinite(loss) || loss > opt.divergence_loss;
    const bool stop_now = diverged || local >= stop.max_steps || (stop.at_perfect_accuracy && acc == 1.0) ||
                          (stop.loss_below && loss < *stop.loss_below);
    if (local % std::max(1L, opt.log_stride) == 0 || stop_now) {
      const Vector<double> ft = outputs(st, test.inputs);
      tr.steps.push_back({step, loss, acc, mean_half_se(ft, test.labels), accuracy(ft, test.labels)});
    }
    if (opt.probe && opt.snapshot_stride > 0 && step % opt.snapshot_stride == 0 && !diverged)
      tr.snapshots.push_back({step, kernel(st, *opt.probe, *opt.probe)});
    if (loss > prev_loss) ++tr.loss_increases;
    prev_loss = loss;
    if (acc == 1.0 && !tr.perfect_step) tr.perfect_step = step;
    if (diverged) tr.diverged = true;
    if (stop_now) break;
    Vector<T> residual(trace.batch);
    for (Eigen::Index i = 0; i < residual.size(); ++i) residual(i) = T(f(i) - train.labels[std::size_t(i)]);
    const auto grads = weighted_gradient(st, trace, residual);
    for (std::size_t k = 0; k < grads.size(); ++k) st.weights[k] -= T(lr) * grads[k];
  }
  return tr;
}

/// Discretized frozen-kernel dynamics:
/// f_train <- f_train - lr Theta_tt (f_train - y), f_test <- f_test - lr Theta_et (f_train - y).
inline Trajectory evolve_linear(const Matrix<double>& theta_tt, const Matrix<double>& theta_et,
                                Vector<double> f_train, Vector<double> f_test, const std::vector<double>& y_train,
                                const std::vector<double>& y_test, double lr, long steps, long log_stride = 1,
                                double divergence_loss = 1e6) {
  Trajectory tr;
  tr.model = "linear";
  Vector<double> y(Eigen::Index(y_train.size()));
  for (Eigen::Index i = 0; i < y.size(); ++i) y(i) = y_train[std::size_t(i)];
  double prev_loss = std::numeric_limits<double>::infinity();
  for (long step = 0;; ++step) {
    const double loss = half_sse(f_train, y_train);
    const double acc = accuracy(f_train, y_train);
    const bool diverged = !std::isfinite(loss) || loss > divergence_loss;
    const bool stop_now = diverged || step >= steps;
    if (step % std::max(1L, log_stride) == 0 || stop_now)
      tr.steps.push_back({step, loss, acc, mean_half_se(f_test, y_test), accuracy(f_test, y_test)});
    if (loss > prev_loss) ++tr.loss_increases;
    prev_loss = loss;
    if (acc == 1.0 && !tr.perfect_step) tr.perfect_step = step;
    if (diverged) tr.diverged = true;
    if (stop_now) break;
    const Vector<double> r = f_train - y;
    if (f_test.size() > 0) f_test -= lr * (theta_et * r);
    f_train -= lr * (theta_tt * r);
  }
  return tr;
}

struct DriftPoint {
  long step = 0;
  double drift = 0.0;
};

/// Mean |Theta(t) - Theta(t - s)| between consecutive snapshots.
inline std::vector<DriftPoint> snapshot_drifts(const std::vector<KernelSnapshot>& snaps) {
  std::vector<DriftPoint> out;
  for (std::size_t k = 1; k < snaps.size(); ++k)
    out.push_back({snaps[k].step, (snaps[k].theta - snaps[k - 1].theta).cwiseAbs().mean()});
  return out;
}

/// Earliest step whose snapshot drift exceeds 10x the median of all earlier
/// drifts (at least two), or whose train loss is 10x the previous record's.
inline std::optional<long> detect_instability(const std::vector<DriftPoint>& drifts,
                                              const std::vector<StepRecord>& steps) {
  std::optional<long> hit;
  for (std::size_t k = 2; k < drifts.size(); ++k) {
    std::vector<double> prior;
    for (std::size_t j = 0; j < k; ++j) prior.push_back(drifts[j].drift);
    std::sort(prior.begin(), prior.end());
    const std::size_t m = prior.size();
    const double median = m % 2 ? prior[m / 2] : 0.5 * (prior[m / 2 - 1] + prior[m / 2]);
    if (drifts[k].drift > 10.0 * median) {
      hit = drifts[k].step;
      break;
    }
  }
  for (std::size_t k = 1; k < steps.size(); ++k)
    if (steps[k].train_loss > 10.0 * steps[k - 1].train_loss) {
      if (!hit || steps[k].step < *hit) hit = steps[k].step;
      break;
    }
  return hit;
}

inline std::optional<long> detect_instability(const Trajectory& t) {
  return detect_instability(snapshot_drifts(t.snapshots), t.steps);
}

struct GapWidth {
  int width = 0;
  std::vector<long> steps;
  /// Seed-averaged test metrics at each logged step.
  std::vector<double> full_test_loss, linear_test_loss, full_test_accuracy, linear_test_accuracy;
  int seeds_used = 0;
  int excluded = 0;

  double loss_gap(std::size_t k) const { return full_test_loss[k] - linear_test_loss[k]; }
};

struct GapSeries {
  std::vector<GapWidth> widths;
  double lr = 0.0;
  std::string lr_policy;

  std::vector<int> width_list() const {
    std::vector<int> w;
    for (const auto& g : widths) w.push_back(g.width);
    return w;
  }

  /// Position of `step` in the logged steps, or an error.
  static std::size_t index_of(const GapWidth& g, long step) {
    const auto it = std::find(g.steps.begin(), g.steps.end(), step);
    if (it == g.steps.end()) throw FitError("step " + std::to_string(step) + " was not logged");
    return std::size_t(it - g.steps.begin());
  }

  /// Step minimizing the seed-averaged full-model test loss at the widest width.
  long early_stopping_step() const {
    if (widths.empty()) throw FitError("empty gap series");
    const auto& g = widths.back();
    std::size_t best = 0;
    for (std::size_t k = 1; k < g.steps.size(); ++k)
      if (g.full_test_loss[k] < g.full_test_loss[best]) best = k;
    return g.steps[best];
  }

  std::vector<double> gaps_at(long step) const {
    std::vector<double> out;
    for (const auto& g : widths) out.push_back(g.loss_gap(index_of(g, step)));
    return out;
  }

  PowerLawFit fit_at(long step) const {
    std::vector<double> mag;
    for (double v : gaps_at(step)) mag.push_back(std::abs(v));
    return fit_power_law(width_list(), mag, FitRange::all());
  }
};

struct GapOptions {
  std::vector<int> widths;
  int seeds = 2;
  std::uint64_t root_seed = 0;
  /// Positive: fixed rate; otherwise stability_lr of each seed's train kernel.
  double lr = 0.0;
  long horizon = 100;
  long log_stride = 1;
  unsigned workers = 1;
};

/// Per (width, seed): train_full and evolve_linear from one initialization,
/// then average test losses over seeds per width.
template <typename T = double>
GapSeries loss_gap_experiment(const NetworkSpec& family, const Dataset& train, const Dataset& test,
                              const GapOptions& opt) {
  if (opt.widths.size() < 3)
    throw FitError("loss-gap experiment needs at least 3 widths, got " + std::to_string(opt.widths.size()));
  GapSeries out;
  out.lr = opt.lr;
  out.lr_policy = opt.lr > 0.0 ? "fixed" : "stability";
  const std::size_t S = std::size_t(opt.seeds);
  for (int n : opt.widths) {
    std::vector<std::pair<Trajectory, Trajectory>> runs(S);
    parallel_for(
        S,
        [&](std::size_t s) {
          NetworkState<T> st = build_network<T>(family.with_width(n), derive_seed(opt.root_seed, std::uint64_t(n), s));
          const Matrix<double> ktt = kernel(st, train.inputs, train.inputs);
          const Matrix<double> ket = test.inputs.empty() ? Matrix<double>(0, ktt.cols())
                                                         : kernel(st, test.inputs, train.inputs);
          const double lr = opt.lr > 0.0 ? opt.lr : stability_lr(ktt);
          const Vector<double> f0 = outputs(st, train.inputs), f0t = outputs(st, test.inputs);
          runs[s].second = evolve_linear(ktt, ket, f0, f0t, train.labels, test.labels, lr, opt.horizon, opt.log_stride);
          runs[s].first = train_full(st, train, test, lr, StopRule{opt.horizon, false, {}}, {opt.log_stride, 0});
        },
        opt.workers);
    GapWidth g;
    g.width = n;
    for (const auto& [full, lin] : runs) {
      if (full.diverged || lin.diverged) {
        ++g.excluded;
        continue;
      }
      if (g.steps.empty()) {
        for (const auto& r : full.steps) g.steps.push_back(r.step);
        g.full_test_loss.assign(g.steps.size(), 0.0);
        g.linear_test_loss.assign(g.steps.size(), 0.0);
        g.full_test_accuracy.assign(g.steps.size(), 0.0);
        g.linear_test_accuracy.assign(g.steps.size(), 0.0);
      }
      for (std::size_t k = 0; k < g.steps.size(); ++k) {
        g.full_test_loss[k] += full.steps[k].test_loss;
        g.linear_test_loss[k] += lin.steps[k].test_loss;
        g.full_test_accuracy[k] += full.steps[k].test_accuracy;
        g.linear_test_accuracy[k] += lin.steps[k].test_accuracy;
      }
      ++g.seeds_used;
    }
    for (auto* v : {&g.full_test_loss, &g.linear_test_loss, &g.full_test_accuracy, &g.linear_test_accuracy})
      for (double& x : *v) x /= double(std::max(1, g.seeds_used));
    out.widths.push_back(std::move(g));
  }
  return out;
}

}  // namespace wcn
