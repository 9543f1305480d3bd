#pragma once
// Exact ground truth for deep-linear networks.
//
// decompose/evaluate_sum: the network map as a sum of weight-sharing chains,
// one per path through the layer graph (conv offset, skip branch, GAP
// position). wick_pair/wick_ntk: exact second moments by propagating
// channel-traced cross-moments T(p, q) = sum_c E[h1(p,c) h2(q,c)] upward and
// backward-signal moments downward. mc_oracle: seeded Monte Carlo for products
// of f and NTK contractions.

#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "wcn/correlation.hpp"
#include "wcn/forward.hpp"
#include "wcn/parallel.hpp"

namespace wcn {

class NonlinearSpecError : public ArchitectureError {
 public:
  using ArchitectureError::ArchitectureError;
};

class UnrealizableSpecError : public SpecError {
 public:
  using SpecError::SpecError;
};

inline void require_linear(const NetworkSpec& spec, const char* what) {
  if (spec.activation != Activation::identity)
    throw NonlinearSpecError(std::string(what) + " needs identity activation, got " +
                             to_string(spec.activation));
  if (spec.has_maxpool()) throw NonlinearSpecError(std::string(what) + " does not support max-pool layers");
}

struct ChainStep {
  enum Kind { conv, dense, jump, gap, readout };
  Kind kind = dense;
  /// Layer index (0-based) or -1 for the readout.
  int layer = -1;
  /// Kernel offset for conv, position for gap and GAP readout, -1 otherwise.
  int index = -1;
};

/// A weight array (storage index) and the slice a chain reads from it
/// (kernel offset for conv, -1 for the whole array).
using WeightSlice = std::pair<int, int>;

struct ChainPath {
  std::vector<ChainStep> steps;
  /// Weighted hidden layers along the path.
  int depth = 0;
  std::vector<WeightSlice> weights;
};

struct ChainDecomposition {
  NetworkSpec spec;
  std::vector<ChainPath> chains;

  std::size_t size() const { return chains.size(); }

  std::map<WeightSlice, std::vector<std::size_t>> sharing_map() const {
    std::map<WeightSlice, std::vector<std::size_t>> out;
    for (std::size_t i = 0; i < chains.size(); ++i)
      for (const auto& w : chains[i].weights) out[w].push_back(i);
    return out;
  }
};

inline constexpr std::size_t default_chain_cap = 2'000'000;

inline ChainDecomposition decompose(const NetworkSpec& spec, std::size_t cap = default_chain_cap) {
  require_linear(spec, "chain decomposition");
  const Layout lay = make_layout(spec);
  const std::size_t L = spec.layers.size();
  // paths[a]: chains producing activation a from the input.
  std::vector<std::vector<ChainPath>> paths(L + 1);
  paths[0].push_back({});
  auto extend = [&](std::vector<ChainPath>& out, const std::vector<ChainPath>& from, ChainStep step,
                    std::optional<WeightSlice> w) {
    for (const auto& c : from) {
      if (out.size() >= cap)
        throw ArchitectureError("chain decomposition exceeds " + std::to_string(cap) + " chains");
      ChainPath p = c;
      p.steps.push_back(step);
      if (w) {
        p.weights.push_back(*w);
        if (step.kind != ChainStep::readout) ++p.depth;
      }
      out.push_back(std::move(p));
    }
  };
  auto straight = [&](std::size_t i, const std::variant<ConvLayer, DenseLayer>& op,
                      std::vector<ChainPath>& out) {
    const int widx = lay.weight_index[i];
    if (const auto* c = std::get_if<ConvLayer>(&op)) {
      for (int o = 0; o < c->kernel_h * c->kernel_w; ++o)
        extend(out, paths[i], {ChainStep::conv, int(i), o}, WeightSlice{widx, o});
    } else {
      extend(out, paths[i], {ChainStep::dense, int(i), -1}, WeightSlice{widx, -1});
    }
  };
  for (std::size_t i = 0; i < L; ++i) {
    auto& out = paths[i + 1];
    const auto& l = spec.layers[i];
    if (const auto* c = std::get_if<ConvLayer>(&l)) {
      straight(i, *c, out);
    } else if (std::holds_alternative<DenseLayer>(l)) {
      straight(i, DenseLayer{}, out);
    } else if (const auto* s = std::get_if<SkipLayer>(&l)) {
      straight(i, s->inner, out);
      extend(out, paths[std::size_t(s->target)], {ChainStep::jump, int(i), s->target}, std::nullopt);
    } else if (std::holds_alternative<GapLayer>(l)) {
      for (int p = 0; p < lay.shapes[i].positions(); ++p)
        extend(out, paths[i], {ChainStep::gap, int(i), p}, std::nullopt);
    }
  }
  ChainDecomposition d{spec, {}};
  const int vidx = int(lay.weight_dims.size()) - 1;
  if (spec.readout == Readout::flatten) {
    extend(d.chains, paths[L], {ChainStep::readout, -1, -1}, WeightSlice{vidx, -1});
  } else {
    for (int p = 0; p < lay.shapes[L].positions(); ++p)
      extend(d.chains, paths[L], {ChainStep::readout, -1, p}, WeightSlice{vidx, -1});
  }
  return d;
}

/// f_I(x) for one chain, using the parent's weights and normalizations.
template <typename T>
T evaluate_chain(const ChainPath& chain, const NetworkState<T>& st, const Tensor& x) {
  const auto& spec = st.spec;
  const auto& lay = st.layout;
  RowMatrix<T> h = detail::pack<T>(std::span<const Tensor>(&x, 1), spec.input);
  RowMatrix<T> tmp;
  for (const auto& s : chain.steps) {
    if (s.kind == ChainStep::readout) {
      const Shape& last = lay.shapes.back();
      const T norm = detail::readout_norm<T>(spec.readout, last);
      const Matrix<T>& v = st.readout();
      if (spec.readout == Readout::flatten) return norm * h.cwiseProduct(v).sum();
      return norm * h.row(s.index).dot(v.row(0));
    }
    const Shape& in = lay.shapes[std::size_t(s.layer)];
    const auto& l = spec.layers[std::size_t(s.layer)];
    const int widx = lay.weight_index[std::size_t(s.layer)];
    switch (s.kind) {
      case ChainStep::conv: {
        const ConvLayer c = std::holds_alternative<ConvLayer>(l)
                                ? std::get<ConvLayer>(l)
                                : std::get<ConvLayer>(std::get<SkipLayer>(l).inner);
        const int ka = s.index / c.kernel_w, kb = s.index % c.kernel_w;
        detail::shift_rows(h, 1, in, ka - c.kernel_h / 2, kb - c.kernel_w / 2, tmp, false);
        h = detail::conv_norm<T>(c, in) *
            (tmp * st.weights[std::size_t(widx)].middleRows(Eigen::Index(s.index) * in.channels, in.channels));
        break;
      }
      case ChainStep::dense: {
        Eigen::Map<const RowMatrix<T>> flat(h.data(), 1, Eigen::Index(in.size()));
        tmp = detail::dense_norm<T>(in) * (flat * st.weights[std::size_t(widx)]);
        h = tmp;
        break;
      }
      case ChainStep::jump: break;
      case ChainStep::gap: {
        tmp = h.row(s.index) / T(in.positions());
        h = tmp;
        break;
      }
      case ChainStep::readout: break;
    }
  }
  throw ArchitectureError("chain has no readout step");
}

/// sum_I f_I(x), accumulated in chain order.
template <typename T>
T evaluate_sum(const ChainDecomposition& d, const NetworkState<T>& st, const Tensor& x) {
  T acc = T(0);
  for (const auto& c : d.chains) acc += evaluate_chain(c, st, x);
  return acc;
}

namespace detail {

/// T'(p, q) = scale * sum_o T(p + o, q + o), zero outside the image.
inline Matrix<double> shifted_trace_sum(const Matrix<double>& t, const Shape& s, const ConvLayer& c,
                                        double scale, int sign) {
  const Eigen::Index P = s.positions();
  Matrix<double> out = Matrix<double>::Zero(P, P);
  for (int ka = 0; ka < c.kernel_h; ++ka)
    for (int kb = 0; kb < c.kernel_w; ++kb) {
      const int dr = sign * (ka - c.kernel_h / 2), ds = sign * (kb - c.kernel_w / 2);
      std::vector<Eigen::Index> src(std::size_t(P), -1);
      for (int r = 0; r < s.height; ++r)
        for (int q = 0; q < s.width; ++q) {
          const int rr = r + dr, qq = q + ds;
          if (rr >= 0 && rr < s.height && qq >= 0 && qq < s.width)
            src[std::size_t(r * s.width + q)] = Eigen::Index(rr) * s.width + qq;
        }
      for (Eigen::Index p = 0; p < P; ++p) {
        if (src[std::size_t(p)] < 0) continue;
        for (Eigen::Index q = 0; q < P; ++q)
          if (src[std::size_t(q)] >= 0) out(p, q) += t(src[std::size_t(p)], src[std::size_t(q)]);
      }
    }
  return scale * out;
}

inline std::variant<ConvLayer, DenseLayer> weighted_op(const LayerSpec& l) {
  if (const auto* c = std::get_if<ConvLayer>(&l)) return *c;
  if (const auto* s = std::get_if<SkipLayer>(&l)) return s->inner;
  return DenseLayer{};
}

/// Forward traces T_a for a = 0..L.
inline std::vector<Matrix<double>> forward_moments(const NetworkSpec& spec, const Layout& lay,
                                                   const Tensor& x1, const Tensor& x2) {
  if (!(x1.shape == spec.input) || !(x2.shape == spec.input))
    throw ShapeError("oracle input does not match network input shape " + to_string(spec.input));
  const Shape& s0 = spec.input;
  const Eigen::Index P0 = s0.positions();
  std::vector<Matrix<double>> t;
  Matrix<double> t0(P0, P0);
  for (Eigen::Index p = 0; p < P0; ++p)
    for (Eigen::Index q = 0; q < P0; ++q) {
      double acc = 0;
      for (int c = 0; c < s0.channels; ++c)
        acc += x1.data[std::size_t(p * s0.channels + c)] * x2.data[std::size_t(q * s0.channels + c)];
      t0(p, q) = acc;
    }
  t.push_back(std::move(t0));
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const Shape& in = lay.shapes[i];
    const Shape& out = lay.shapes[i + 1];
    const auto& l = spec.layers[i];
    Matrix<double> next;
    if (std::holds_alternative<GapLayer>(l)) {
      next = Matrix<double>::Constant(1, 1, t[i].sum() / (double(in.positions()) * in.positions()));
    } else {
      const auto op = weighted_op(l);
      if (const auto* c = std::get_if<ConvLayer>(&op)) {
        next = shifted_trace_sum(t[i], in, *c,
                                 double(out.channels) / (double(c->kernel_h) * c->kernel_w * in.channels), 1);
      } else {
        next = Matrix<double>::Constant(1, 1, double(out.channels) * t[i].trace() / double(in.size()));
      }
      if (const auto* s = std::get_if<SkipLayer>(&l)) next += t[std::size_t(s->target)];
    }
    t.push_back(std::move(next));
  }
  return t;
}

/// Per-channel backward moments b_a = E[delta1_a(p,c) delta2_a(q,c)] for
/// a = 1..L (index 0 left empty). Cross moments between activations are kept
/// so that several consumers of one activation combine exactly.
inline std::vector<Matrix<double>> backward_moments(const NetworkSpec& spec, const Layout& lay) {
  const std::size_t L = spec.layers.size();
  std::vector<std::vector<int>> skips_to(L + 1);
  for (std::size_t i = 0; i < L; ++i)
    if (const auto* s = std::get_if<SkipLayer>(&spec.layers[i])) skips_to[std::size_t(s->target)].push_back(int(i + 1));
  // K[a][b], a <= b.
  std::vector<std::vector<Matrix<double>>> K(L + 1, std::vector<Matrix<double>>(L + 1));
  auto get = [&](std::size_t a, std::size_t b) -> Matrix<double> {
    return a <= b ? K[a][b] : Matrix<double>(K[b][a].transpose());
  };
  const Shape& last = lay.shapes[L];
  const Eigen::Index PL = last.positions();
  if (spec.readout == Readout::flatten)
    K[L][L] = Matrix<double>::Identity(PL, PL) / double(last.size());
  else
    K[L][L] = Matrix<double>::Constant(PL, PL, 1.0 / (double(PL) * PL * last.channels));
  for (std::size_t a = L; a-- > 1;) {
    const Shape& s = lay.shapes[a];
    const Shape& up = lay.shapes[a + 1];
    const Eigen::Index P = s.positions();
    const auto& layer = spec.layers[a];  // layer a+1 (0-based index a) consumes h_a
    const bool weightless = std::holds_alternative<GapLayer>(layer);
    // Deterministic back-map of a cross moment through a GAP layer.
    auto gap_back = [&](const Matrix<double>& k_up) {  // (1 x Pb) -> (P x Pb)
      Matrix<double> out(P, k_up.cols());
      for (Eigen::Index p = 0; p < P; ++p) out.row(p) = k_up.row(0) / double(P);
      return out;
    };
    for (std::size_t b = a + 1; b <= L; ++b) {
      Matrix<double> k = Matrix<double>::Zero(P, lay.shapes[b].positions());
      if (weightless) k += gap_back(get(a + 1, b));
      for (int l : skips_to[a]) k += get(std::size_t(l), b);
      K[a][b] = k;
    }
    Matrix<double> k;
    const Matrix<double> kup = K[a + 1][a + 1];
    if (weightless) {
      k = Matrix<double>::Constant(P, P, kup(0, 0) / (double(P) * P));
    } else {
      const auto op = weighted_op(layer);
      if (const auto* c = std::get_if<ConvLayer>(&op)) {
        k = shifted_trace_sum(kup, s, *c, double(up.channels) / (double(c->kernel_h) * c->kernel_w * s.channels), -1);
      } else {
        k = Matrix<double>::Identity(P, P) * (double(up.channels) * kup(0, 0) / double(s.size()));
      }
    }
    for (int l : skips_to[a]) {
      if (weightless) {
        const Matrix<double> cross = gap_back(get(a + 1, std::size_t(l)));
        k += cross + cross.transpose();
      }
      for (int l2 : skips_to[a]) k += get(std::size_t(l), std::size_t(l2));
    }
    K[a][a] = k;
  }
  std::vector<Matrix<double>> b(L + 1);
  for (std::size_t a = 1; a <= L; ++a) b[a] = K[a][a];
  return b;
}

}  // namespace detail

/// Exact E[f(x1) f(x2)] over weight draws.
inline double wick_pair(const NetworkSpec& spec, const Tensor& x1, const Tensor& x2) {
  require_linear(spec, "wick_pair");
  const Layout lay = make_layout(spec);
  const auto t = detail::forward_moments(spec, lay, x1, x2);
  const Shape& last = lay.shapes.back();
  const double P = last.positions();
  if (spec.readout == Readout::flatten) return t.back().trace() / double(last.size());
  return t.back().sum() / (P * P * last.channels);
}

/// Exact E[Theta(x1, x2)]: per weight array, forward moment below times
/// backward moment above.
inline double wick_ntk(const NetworkSpec& spec, const Tensor& x1, const Tensor& x2) {
  require_linear(spec, "wick_ntk");
  const Layout lay = make_layout(spec);
  const auto t = detail::forward_moments(spec, lay, x1, x2);
  const auto b = detail::backward_moments(spec, lay);
  double total = 0.0;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    if (lay.weight_index[i] < 0) continue;
    const Shape& in = lay.shapes[i];
    const Shape& out = lay.shapes[i + 1];
    const auto op = detail::weighted_op(spec.layers[i]);
    const double n = out.channels;
    if (const auto* c = std::get_if<ConvLayer>(&op)) {
      const double c2 = 1.0 / (double(c->kernel_h) * c->kernel_w * in.channels);
      // sum_o sum_pq b(p,q) T(p+o, q+o) == sum_pq b(p,q) * shifted T
      const Matrix<double> ts = detail::shifted_trace_sum(t[i], in, *c, 1.0, 1);
      total += c2 * n * b[i + 1].cwiseProduct(ts).sum();
    } else {
      total += n * b[i + 1](0, 0) * t[i].trace() / double(in.size());
    }
  }
  const Shape& last = lay.shapes.back();
  const double P = last.positions();
  if (spec.readout == Readout::flatten)
    total += t.back().trace() / double(last.size());
  else
    total += t.back().sum() / (P * P * last.channels);
  return total;
}

struct MonteCarloEstimate {
  double mean = 0.0;
  double std_error = 0.0;
  std::size_t samples = 0;
};

inline MonteCarloEstimate summarize(const std::vector<double>& xs) {
  MonteCarloEstimate e;
  e.samples = xs.size();
  if (xs.empty()) return e;
  double mean = 0.0;
  for (double v : xs) mean += v;
  mean /= double(xs.size());
  double ss = 0.0;
  for (double v : xs) ss += (v - mean) * (v - mean);
  e.mean = mean;
  e.std_error = xs.size() > 1 ? std::sqrt(ss / double(xs.size() - 1) / double(xs.size())) : 0.0;
  return e;
}

/// Checks that every factor carries at most one slot, so the correlation is a
/// product of outputs and NTK entries.
inline void check_realizable(const CorrelationSpec& corr) {
  for (std::size_t i = 0; i < corr.factors.size(); ++i)
    if (corr.factors[i].slots.size() > 1)
      throw UnrealizableSpecError("factors[" + std::to_string(i) + "] (input " + corr.factors[i].input +
                                  ") carries " + std::to_string(corr.factors[i].slots.size()) +
                                  " derivative slots; only f and first-derivative factors are supported");
}

/// One sample of prod f(x_i) * prod Theta(x_a, x_b) for the given state.
inline double correlation_sample(const CorrelationSpec& corr, const NetworkState<double>& st,
                                 const std::map<std::string, Tensor>& inputs) {
  auto input = [&](std::size_t i) -> const Tensor& {
    auto it = inputs.find(corr.factors[i].input);
    if (it == inputs.end())
      throw SpecError("factors[" + std::to_string(i) + "]: no tensor bound to input \"" +
                      corr.factors[i].input + "\"");
    return it->second;
  };
  double value = 1.0;
  for (std::size_t i = 0; i < corr.factors.size(); ++i)
    if (corr.factors[i].slots.empty()) value *= forward(st, std::span<const Tensor>(&input(i), 1))(0);
  const auto own = corr.owners();
  for (const auto& [a, b] : corr.pairs) {
    const Tensor& xa = input(std::size_t(own.at(a)));
    const Tensor& xb = input(std::size_t(own.at(b)));
    const auto fa = gradient_factors(st, std::span<const Tensor>(&xa, 1));
    const auto fb = gradient_factors(st, std::span<const Tensor>(&xb, 1));
    value *= theta_entry(fa[0], fb[0]);
  }
  return value;
}

/// Per-sample values, sample k drawn with seed derive_seed(root, width, k).
inline std::vector<double> mc_samples(const NetworkSpec& spec, const CorrelationSpec& corr,
                                      const std::map<std::string, Tensor>& inputs, std::size_t n_samples,
                                      std::uint64_t root_seed, unsigned workers = default_workers()) {
  check_realizable(corr);
  std::vector<double> out(n_samples);
  parallel_for(
      n_samples,
      [&](std::size_t k) {
        const auto st = build_network<double>(spec, derive_seed(root_seed, std::uint64_t(spec.width), k));
        out[k] = correlation_sample(corr, st, inputs);
      },
      workers);
  return out;
}

inline MonteCarloEstimate mc_oracle(const NetworkSpec& spec, const CorrelationSpec& corr,
                                    const std::map<std::string, Tensor>& inputs, std::size_t n_samples,
                                    std::uint64_t root_seed, unsigned workers = default_workers()) {
  return summarize(mc_samples(spec, corr, inputs, n_samples, root_seed, workers));
}

}  // namespace wcn
