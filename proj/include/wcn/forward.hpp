#pragma once
// Forward evaluation, reverse-mode gradients and the empirical NTK.
//
// A batch of N examples is held as a row-major (N*P x C) matrix, example a
// occupying rows [a*P, (a+1)*P) with position p = r*W + s.

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "wcn/network.hpp"
#include "wcn/tensor.hpp"

namespace wcn {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

namespace detail {

template <typename T>
RowMatrix<T> pack(std::span<const Tensor> batch, const Shape& shape) {
  RowMatrix<T> out(Eigen::Index(batch.size()) * shape.positions(), shape.channels);
  for (std::size_t a = 0; a < batch.size(); ++a) {
    if (!(batch[a].shape == shape))
      throw ShapeError("example " + std::to_string(a) + " has shape " + to_string(batch[a].shape) +
                       ", network expects " + to_string(shape));
    T* dst = out.data() + Eigen::Index(a) * shape.positions() * shape.channels;
    for (std::size_t k = 0; k < batch[a].data.size(); ++k) dst[k] = T(batch[a].data[k]);
  }
  return out;
}

template <typename T>
void activate(Activation act, const RowMatrix<T>& z, RowMatrix<T>& out) {
  switch (act) {
    case Activation::identity: out = z; break;
    case Activation::tanh: out = z.array().tanh(); break;
    case Activation::relu: out = z.array().max(T(0)); break;
  }
}

/// sigma'(z); relu'(0) is 0.
template <typename T>
void scale_by_derivative(Activation act, const RowMatrix<T>& z, RowMatrix<T>& delta) {
  switch (act) {
    case Activation::identity: break;
    case Activation::tanh: delta.array() *= T(1) - z.array().tanh().square(); break;
    case Activation::relu: delta.array() *= (z.array() > T(0)).template cast<T>(); break;
  }
}

/// dst(a, r, s) (+)= src(a, r + dr, s + ds), zero outside the image.
template <typename T>
void shift_rows(const RowMatrix<T>& src, Eigen::Index batch, const Shape& s, int dr, int ds,
                RowMatrix<T>& dst, bool accumulate) {
  if (!accumulate) dst.setZero(src.rows(), src.cols());
  const int r0 = std::max(0, -dr), r1 = std::min(s.height, s.height - dr);
  const int c0 = std::max(0, -ds), c1 = std::min(s.width, s.width - ds);
  if (r0 >= r1 || c0 >= c1) return;
  const Eigen::Index len = c1 - c0;
  const Eigen::Index P = s.positions();
  for (Eigen::Index a = 0; a < batch; ++a) {
    for (int r = r0; r < r1; ++r) {
      const Eigen::Index to = a * P + Eigen::Index(r) * s.width + c0;
      const Eigen::Index from = a * P + Eigen::Index(r + dr) * s.width + c0 + ds;
      if (accumulate)
        dst.middleRows(to, len) += src.middleRows(from, len);
      else
        dst.middleRows(to, len) = src.middleRows(from, len);
    }
  }
}

template <typename T>
T conv_norm(const ConvLayer& c, const Shape& in) {
  return T(1.0 / std::sqrt(double(c.kernel_h) * c.kernel_w * in.channels));
}
template <typename T>
T dense_norm(const Shape& in) {
  return T(1.0 / std::sqrt(double(in.size())));
}

template <typename T>
T readout_norm(Readout r, const Shape& last) {
  if (r == Readout::flatten) return T(1.0 / std::sqrt(double(last.size())));
  return T(1.0 / (double(last.positions()) * std::sqrt(double(last.channels))));
}

template <typename T>
void conv_forward(const ConvLayer& c, const Shape& in, const RowMatrix<T>& a, Eigen::Index batch,
                  const Matrix<T>& w, RowMatrix<T>& z) {
  z.setZero(a.rows(), w.cols());
  RowMatrix<T> shifted;
  for (int ka = 0; ka < c.kernel_h; ++ka) {
    for (int kb = 0; kb < c.kernel_w; ++kb) {
      const int o = ka * c.kernel_w + kb;
      shift_rows(a, batch, in, ka - c.kernel_h / 2, kb - c.kernel_w / 2, shifted, false);
      z.noalias() += shifted * w.middleRows(Eigen::Index(o) * in.channels, in.channels);
    }
  }
  z *= conv_norm<T>(c, in);
}

template <typename T>
void dense_forward(const Shape& in, const RowMatrix<T>& a, Eigen::Index batch, const Matrix<T>& w,
                   RowMatrix<T>& z) {
  Eigen::Map<const RowMatrix<T>> flat(a.data(), batch, Eigen::Index(in.size()));
  z.noalias() = flat * w;
  z *= dense_norm<T>(in);
}

}  // namespace detail

/// Everything the backward pass needs from one forward evaluation.
template <typename T>
struct Trace {
  Eigen::Index batch = 0;
  std::vector<RowMatrix<T>> act;  // act[0] = input, act[l] after layer l
  std::vector<RowMatrix<T>> pre;  // pre[l-1] = pre-activation of layer l
  std::vector<std::vector<Eigen::Index>> argmax;  // max-pool source rows per layer
  Vector<T> output;
};

template <typename T>
Trace<T> forward_trace(const NetworkState<T>& st, std::span<const Tensor> batch) {
  const auto& spec = st.spec;
  const auto& lay = st.layout;
  Trace<T> tr;
  tr.batch = Eigen::Index(batch.size());
  tr.act.push_back(detail::pack<T>(batch, spec.input));
  tr.pre.resize(spec.layers.size());
  tr.argmax.resize(spec.layers.size());
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const Shape& in = lay.shapes[i];
    const Shape& out = lay.shapes[i + 1];
    const RowMatrix<T>& a = tr.act[i];
    RowMatrix<T>& z = tr.pre[i];
    const auto& l = spec.layers[i];
    const int widx = lay.weight_index[i];
    bool apply_sigma = true;
    auto straight = [&](const std::variant<ConvLayer, DenseLayer>& op) {
      if (const auto* c = std::get_if<ConvLayer>(&op))
        detail::conv_forward(*c, in, a, tr.batch, st.weights[std::size_t(widx)], z);
      else
        detail::dense_forward(in, a, tr.batch, st.weights[std::size_t(widx)], z);
    };
    if (const auto* c = std::get_if<ConvLayer>(&l)) {
      straight(*c);
    } else if (std::holds_alternative<DenseLayer>(l)) {
      straight(DenseLayer{});
    } else if (const auto* s = std::get_if<SkipLayer>(&l)) {
      straight(s->inner);
      z += tr.act[std::size_t(s->target)];
    } else if (std::holds_alternative<GapLayer>(l)) {
      const Eigen::Index P = in.positions();
      z.resize(tr.batch, in.channels);
      for (Eigen::Index b = 0; b < tr.batch; ++b)
        z.row(b) = a.middleRows(b * P, P).colwise().sum() / T(P);
    } else if (const auto* m = std::get_if<MaxPoolLayer>(&l)) {
      apply_sigma = false;
      const Eigen::Index Pin = in.positions(), Pout = out.positions();
      z.resize(tr.batch * Pout, in.channels);
      auto& idx = tr.argmax[i];
      idx.assign(std::size_t(z.size()), 0);
      for (Eigen::Index b = 0; b < tr.batch; ++b)
        for (int r = 0; r < out.height; ++r)
          for (int s = 0; s < out.width; ++s)
            for (int ch = 0; ch < in.channels; ++ch) {
              Eigen::Index best = -1;
              T bv = T(0);
              for (int u = 0; u < m->window; ++u)
                for (int v = 0; v < m->window; ++v) {
                  const Eigen::Index row =
                      b * Pin + Eigen::Index(r * m->stride + u) * in.width + (s * m->stride + v);
                  if (best < 0 || a(row, ch) > bv) {
                    best = row;
                    bv = a(row, ch);
                  }
                }
              const Eigen::Index orow = b * Pout + Eigen::Index(r) * out.width + s;
              z(orow, ch) = bv;
              idx[std::size_t(orow * in.channels + ch)] = best;
            }
    }
    RowMatrix<T> next;
    if (apply_sigma)
      detail::activate(spec.activation, z, next);
    else
      next = z;
    tr.act.push_back(std::move(next));
  }

  const Shape& last = lay.shapes.back();
  const RowMatrix<T>& ad = tr.act.back();
  const Matrix<T>& v = st.readout();
  const T norm = detail::readout_norm<T>(spec.readout, last);
  const Eigen::Index P = last.positions();
  tr.output.resize(tr.batch);
  for (Eigen::Index b = 0; b < tr.batch; ++b) {
    auto block = ad.middleRows(b * P, P);
    if (spec.readout == Readout::flatten)
      tr.output(b) = norm * block.cwiseProduct(v).sum();
    else
      tr.output(b) = norm * (block.colwise().sum() * v.row(0).transpose())(0, 0);
  }
  return tr;
}

template <typename T>
Vector<T> forward(const NetworkState<T>& st, std::span<const Tensor> batch,
                  std::size_t chunk = 64) {
  Vector<T> out(Eigen::Index(batch.size()));
  for (std::size_t b = 0; b < batch.size(); b += chunk) {
    const std::size_t e = std::min(batch.size(), b + chunk);
    out.segment(Eigen::Index(b), Eigen::Index(e - b)) = forward_trace(st, batch.subspan(b, e - b)).output;
  }
  return out;
}

/// Pre-activation deltas d(sum_a seed_a f(x_a)) / dz for every layer.
template <typename T>
std::vector<RowMatrix<T>> backward_deltas(const NetworkState<T>& st, const Trace<T>& tr,
                                          const Vector<T>& seeds) {
  const auto& spec = st.spec;
  const auto& lay = st.layout;
  const std::size_t L = spec.layers.size();
  std::vector<RowMatrix<T>> dact(L + 1);
  for (std::size_t t = 0; t <= L; ++t) dact[t].setZero(tr.act[t].rows(), tr.act[t].cols());

  const Shape& last = lay.shapes.back();
  const Eigen::Index P = last.positions();
  const T norm = detail::readout_norm<T>(spec.readout, last);
  const Matrix<T>& v = st.readout();
  for (Eigen::Index b = 0; b < tr.batch; ++b) {
    auto block = dact[L].middleRows(b * P, P);
    if (spec.readout == Readout::flatten)
      block = (seeds(b) * norm) * v;
    else
      block.rowwise() = (seeds(b) * norm) * v.row(0);
  }

  std::vector<RowMatrix<T>> dpre(L);
  RowMatrix<T> tmp;
  for (std::size_t i = L; i-- > 0;) {
    const Shape& in = lay.shapes[i];
    const Shape& out = lay.shapes[i + 1];
    const auto& l = spec.layers[i];
    RowMatrix<T>& dz = dpre[i];
    dz = dact[i + 1];
    if (const auto* m = std::get_if<MaxPoolLayer>(&l)) {
      (void)m;
      const auto& idx = tr.argmax[i];
      for (Eigen::Index row = 0; row < dz.rows(); ++row)
        for (Eigen::Index ch = 0; ch < dz.cols(); ++ch)
          dact[i](idx[std::size_t(row * dz.cols() + ch)], ch) += dz(row, ch);
      continue;
    }
    detail::scale_by_derivative(spec.activation, tr.pre[i], dz);
    const int widx = lay.weight_index[i];
    auto straight = [&](const std::variant<ConvLayer, DenseLayer>& op) {
      const Matrix<T>& w = st.weights[std::size_t(widx)];
      if (const auto* c = std::get_if<ConvLayer>(&op)) {
        const T cn = detail::conv_norm<T>(*c, in);
        for (int ka = 0; ka < c->kernel_h; ++ka)
          for (int kb = 0; kb < c->kernel_w; ++kb) {
            const int o = ka * c->kernel_w + kb;
            tmp.noalias() = dz * w.middleRows(Eigen::Index(o) * in.channels, in.channels).transpose();
            tmp *= cn;
            detail::shift_rows(tmp, tr.batch, in, -(ka - c->kernel_h / 2), -(kb - c->kernel_w / 2),
                               dact[i], true);
          }
      } else {
        Eigen::Map<RowMatrix<T>> flat(dact[i].data(), tr.batch, Eigen::Index(in.size()));
        flat.noalias() += (detail::dense_norm<T>(in) * dz) * w.transpose();
      }
    };
    if (const auto* c = std::get_if<ConvLayer>(&l)) {
      straight(*c);
    } else if (std::holds_alternative<DenseLayer>(l)) {
      straight(DenseLayer{});
    } else if (const auto* s = std::get_if<SkipLayer>(&l)) {
      straight(s->inner);
      dact[std::size_t(s->target)] += dz;
    } else if (std::holds_alternative<GapLayer>(l)) {
      const Eigen::Index Pin = in.positions();
      for (Eigen::Index b = 0; b < tr.batch; ++b)
        dact[i].middleRows(b * Pin, Pin).rowwise() += dz.row(b) / T(Pin);
    }
    (void)out;
  }
  return dpre;
}

/// sum_a seed_a * df(x_a)/dtheta, one matrix per weight array (same layout
/// as NetworkState::weights).
template <typename T>
std::vector<Matrix<T>> weighted_gradient(const NetworkState<T>& st, const Trace<T>& tr,
                                         const Vector<T>& seeds) {
  const auto dpre = backward_deltas(st, tr, seeds);
  const auto& spec = st.spec;
  const auto& lay = st.layout;
  std::vector<Matrix<T>> grads;
  for (const auto& w : st.weights) grads.push_back(Matrix<T>::Zero(w.rows(), w.cols()));
  RowMatrix<T> shifted;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const int widx = lay.weight_index[i];
    if (widx < 0) continue;
    const Shape& in = lay.shapes[i];
    const auto& l = spec.layers[i];
    std::variant<ConvLayer, DenseLayer> op = DenseLayer{};
    if (const auto* c = std::get_if<ConvLayer>(&l)) op = *c;
    if (const auto* s = std::get_if<SkipLayer>(&l)) op = s->inner;
    Matrix<T>& g = grads[std::size_t(widx)];
    if (const auto* c = std::get_if<ConvLayer>(&op)) {
      const T cn = detail::conv_norm<T>(*c, in);
      for (int ka = 0; ka < c->kernel_h; ++ka)
        for (int kb = 0; kb < c->kernel_w; ++kb) {
          const int o = ka * c->kernel_w + kb;
          detail::shift_rows(tr.act[i], tr.batch, in, ka - c->kernel_h / 2, kb - c->kernel_w / 2,
                             shifted, false);
          g.middleRows(Eigen::Index(o) * in.channels, in.channels).noalias() =
              cn * (shifted.transpose() * dpre[i]);
        }
    } else {
      Eigen::Map<const RowMatrix<T>> flat(tr.act[i].data(), tr.batch, Eigen::Index(in.size()));
      g.noalias() = detail::dense_norm<T>(in) * (flat.transpose() * dpre[i]);
    }
  }
  const Shape& last = lay.shapes.back();
  const Eigen::Index P = last.positions();
  const T norm = detail::readout_norm<T>(spec.readout, last);
  Matrix<T>& gv = grads.back();
  for (Eigen::Index b = 0; b < tr.batch; ++b) {
    auto block = tr.act.back().middleRows(b * P, P);
    if (spec.readout == Readout::flatten)
      gv += (seeds(b) * norm) * block;
    else
      gv += (seeds(b) * norm) * block.colwise().sum();
  }
  return grads;
}

/// One weight array's contribution to df(x)/dtheta for a single example:
/// either a dense block or the rank-one product scale * u v^T.
template <typename T>
struct GradientBlock {
  Matrix<T> full;
  Vector<T> u, v;
  bool rank_one = false;

  T dot(const GradientBlock& o) const {
    if (rank_one) return u.dot(o.u) * v.dot(o.v);
    return full.cwiseProduct(o.full).sum();
  }
  Matrix<T> dense() const { return rank_one ? Matrix<T>(u * v.transpose()) : full; }
};

template <typename T>
using GradientFactors = std::vector<GradientBlock<T>>;

/// Per-example gradient factors, one entry per weight array in storage order.
template <typename T>
std::vector<GradientFactors<T>> gradient_factors(const NetworkState<T>& st,
                                                 std::span<const Tensor> batch) {
  const Trace<T> tr = forward_trace(st, batch);
  const Vector<T> ones = Vector<T>::Ones(tr.batch);
  const auto dpre = backward_deltas(st, tr, ones);
  const auto& spec = st.spec;
  const auto& lay = st.layout;
  std::vector<GradientFactors<T>> out(std::size_t(tr.batch));
  for (auto& f : out) f.resize(st.weights.size());
  RowMatrix<T> shifted;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const int widx = lay.weight_index[i];
    if (widx < 0) continue;
    const Shape& in = lay.shapes[i];
    const auto& l = spec.layers[i];
    std::variant<ConvLayer, DenseLayer> op = DenseLayer{};
    if (const auto* c = std::get_if<ConvLayer>(&l)) op = *c;
    if (const auto* s = std::get_if<SkipLayer>(&l)) op = s->inner;
    const auto& w = st.weights[std::size_t(widx)];
    if (const auto* c = std::get_if<ConvLayer>(&op)) {
      const T cn = detail::conv_norm<T>(*c, in);
      const Eigen::Index P = in.positions();
      for (auto& f : out) f[std::size_t(widx)].full.setZero(w.rows(), w.cols());
      for (int ka = 0; ka < c->kernel_h; ++ka)
        for (int kb = 0; kb < c->kernel_w; ++kb) {
          const int o = ka * c->kernel_w + kb;
          detail::shift_rows(tr.act[i], tr.batch, in, ka - c->kernel_h / 2, kb - c->kernel_w / 2,
                             shifted, false);
          for (Eigen::Index b = 0; b < tr.batch; ++b)
            out[std::size_t(b)][std::size_t(widx)]
                .full.middleRows(Eigen::Index(o) * in.channels, in.channels)
                .noalias() = cn * (shifted.middleRows(b * P, P).transpose() *
                                   dpre[i].middleRows(b * P, P));
        }
    } else {
      const Eigen::Index D = Eigen::Index(in.size());
      const T dn = detail::dense_norm<T>(in);
      for (Eigen::Index b = 0; b < tr.batch; ++b) {
        auto& blk = out[std::size_t(b)][std::size_t(widx)];
        blk.rank_one = true;
        blk.u = dn * Eigen::Map<const Vector<T>>(tr.act[i].data() + b * D, D);
        blk.v = dpre[i].row(b).transpose();
      }
    }
  }
  const Shape& last = lay.shapes.back();
  const Eigen::Index P = last.positions();
  const T norm = detail::readout_norm<T>(spec.readout, last);
  for (Eigen::Index b = 0; b < tr.batch; ++b) {
    auto block = tr.act.back().middleRows(b * P, P);
    auto& g = out[std::size_t(b)].back();
    if (spec.readout == Readout::flatten)
      g.full = norm * block;
    else
      g.full = norm * block.colwise().sum();
  }
  return out;
}

/// Flat df(x)/dtheta in NetworkState::flat() order.
template <typename T>
Vector<T> gradient(const NetworkState<T>& st, const Tensor& x) {
  const auto f = gradient_factors(st, std::span<const Tensor>(&x, 1));
  Vector<T> g(static_cast<Eigen::Index>(st.parameter_count()));
  Eigen::Index off = 0;
  for (const auto& blk : f[0]) {
    const Matrix<T> d = blk.dense();
    g.segment(off, d.size()) = Eigen::Map<const Vector<T>>(d.data(), d.size());
    off += d.size();
  }
  return g;
}

template <typename T>
T theta_entry(const GradientFactors<T>& a, const GradientFactors<T>& b) {
  T acc = T(0);
  for (std::size_t k = 0; k < a.size(); ++k) acc += a[k].dot(b[k]);
  return acc;
}

/// Theta(rows_i, cols_j) summed over weight arrays in storage order. Row
/// factors are held in memory; columns are streamed in chunks. Pass the same
/// span for rows and cols to get a symmetric Gram matrix.
template <typename T>
Matrix<T> ntk_matrix(const NetworkState<T>& st, std::span<const Tensor> rows,
                     std::span<const Tensor> cols, std::size_t chunk = 16) {
  std::vector<GradientFactors<T>> rf;
  for (std::size_t b = 0; b < rows.size(); b += chunk) {
    auto part = gradient_factors(st, rows.subspan(b, std::min(chunk, rows.size() - b)));
    for (auto& p : part) rf.push_back(std::move(p));
  }
  Matrix<T> K(Eigen::Index(rows.size()), Eigen::Index(cols.size()));
  const bool same = rows.data() == cols.data() && rows.size() == cols.size();
  if (same) {
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (std::size_t j = 0; j <= i; ++j) {
        const T v = theta_entry(rf[i], rf[j]);
        K(Eigen::Index(i), Eigen::Index(j)) = v;
        K(Eigen::Index(j), Eigen::Index(i)) = v;
      }
    return K;
  }
  for (std::size_t b = 0; b < cols.size(); b += chunk) {
    const auto cf = gradient_factors(st, cols.subspan(b, std::min(chunk, cols.size() - b)));
    for (std::size_t j = 0; j < cf.size(); ++j)
      for (std::size_t i = 0; i < rows.size(); ++i)
        K(Eigen::Index(i), Eigen::Index(b + j)) = theta_entry(rf[i], cf[j]);
  }
  return K;
}

template <typename T>
Matrix<T> ntk_matrix(const NetworkState<T>& st, std::span<const Tensor> examples) {
  return ntk_matrix(st, examples, examples);
}

}  // namespace wcn
