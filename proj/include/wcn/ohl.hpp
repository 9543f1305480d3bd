#pragma once
// Closed-form NTK of a one-hidden-layer CNN,
//
//   Theta(x,x') = sum_i [ c_V^2 <sigma(z_i), sigma(z'_i)>_V
//                        + c_V^2 c_U^2 sum_A (sum_R V_iR sigma'(z_Ri) X_RA)
//                                           (sum_S V_iS sigma'(z'_Si) X'_SA) ]
//
// with z = c_U X U the conv pre-activations, X the im2col patch matrix and
// V_iR the readout weight seen by position R (per-position for flatten,
// shared for GAP). Evaluated directly, without going through backprop.

#include <cmath>

#include "wcn/forward.hpp"

namespace wcn {

namespace detail {

/// im2col patches for a single example: (positions x kh*kw*c_in), column
/// index (ka*kw + kb)*c_in + j.
template <typename T>
Matrix<T> patches(const Tensor& x, const ConvLayer& c) {
  const Shape& s = x.shape;
  Matrix<T> X = Matrix<T>::Zero(s.positions(), Eigen::Index(c.kernel_h) * c.kernel_w * s.channels);
  for (int r = 0; r < s.height; ++r)
    for (int q = 0; q < s.width; ++q)
      for (int ka = 0; ka < c.kernel_h; ++ka)
        for (int kb = 0; kb < c.kernel_w; ++kb) {
          const int rr = r + ka - c.kernel_h / 2, qq = q + kb - c.kernel_w / 2;
          if (rr < 0 || rr >= s.height || qq < 0 || qq >= s.width) continue;
          for (int j = 0; j < s.channels; ++j)
            X(Eigen::Index(r) * s.width + q, (Eigen::Index(ka) * c.kernel_w + kb) * s.channels + j) =
                T(x.at(rr, qq, j));
        }
  return X;
}

template <typename T>
T sigma(Activation a, T z) {
  switch (a) {
    case Activation::identity: return z;
    case Activation::tanh: return std::tanh(z);
    case Activation::relu: return z > T(0) ? z : T(0);
  }
  return z;
}

template <typename T>
T sigma_prime(Activation a, T z) {
  switch (a) {
    case Activation::identity: return T(1);
    case Activation::tanh: {
      const T t = std::tanh(z);
      return T(1) - t * t;
    }
    case Activation::relu: return z > T(0) ? T(1) : T(0);
  }
  return T(1);
}

}  // namespace detail

template <typename T>
T analytic_ohl_ntk(const NetworkState<T>& st, const Tensor& x1, const Tensor& x2) {
  const auto& spec = st.spec;
  if (spec.layers.size() != 1 || !std::holds_alternative<ConvLayer>(spec.layers[0]))
    throw ArchitectureError(
        "analytic one-hidden-layer NTK needs exactly one conv layer followed by the readout");
  if (!(x1.shape == spec.input) || !(x2.shape == spec.input))
    throw ShapeError("input does not match network input shape " + to_string(spec.input));
  const auto& conv = std::get<ConvLayer>(spec.layers[0]);
  const Shape& last = st.layout.shapes.back();
  const Eigen::Index P = last.positions();
  const Eigen::Index n = last.channels;
  const T cu = detail::conv_norm<T>(conv, spec.input);
  const T cv = detail::readout_norm<T>(spec.readout, last);
  const Matrix<T>& U = st.weights[0];
  const Matrix<T>& V = st.readout();
  const Matrix<T> X1 = detail::patches<T>(x1, conv), X2 = detail::patches<T>(x2, conv);
  const Matrix<T> Z1 = cu * X1 * U, Z2 = cu * X2 * U;  // (P x n)
  const bool flat = spec.readout == Readout::flatten;
  auto v_at = [&](Eigen::Index R, Eigen::Index i) { return flat ? V(R, i) : V(0, i); };

  T v_term = T(0), u_term = T(0);
  Vector<T> b1(X1.cols()), b2(X2.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    if (flat) {
      for (Eigen::Index R = 0; R < P; ++R)
        v_term += detail::sigma(spec.activation, Z1(R, i)) * detail::sigma(spec.activation, Z2(R, i));
    } else {
      T s1 = T(0), s2 = T(0);
      for (Eigen::Index R = 0; R < P; ++R) {
        s1 += detail::sigma(spec.activation, Z1(R, i));
        s2 += detail::sigma(spec.activation, Z2(R, i));
      }
      v_term += s1 * s2;
    }
    b1.setZero();
    b2.setZero();
    for (Eigen::Index R = 0; R < P; ++R) {
      b1 += (v_at(R, i) * detail::sigma_prime(spec.activation, Z1(R, i))) * X1.row(R).transpose();
      b2 += (v_at(R, i) * detail::sigma_prime(spec.activation, Z2(R, i))) * X2.row(R).transpose();
    }
    u_term += b1.dot(b2);
  }
  return cv * cv * (v_term + cu * cu * u_term);
}

}  // namespace wcn
