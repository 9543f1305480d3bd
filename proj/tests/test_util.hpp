#pragma once

#include <cmath>
#include <random>

#include "wcn/forward.hpp"

namespace wcn::testing {

inline Tensor random_tensor(Shape s, std::mt19937_64& gen) {
  std::normal_distribution<double> nd;
  Tensor t(s);
  for (auto& v : t.data) v = nd(gen);
  return t;
}

inline Batch random_batch(Shape s, std::size_t count, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  Batch b;
  for (std::size_t i = 0; i < count; ++i) b.push_back(random_tensor(s, gen));
  return b;
}

inline double eval(const NetworkState<double>& st, const Tensor& x) {
  return forward(st, std::span<const Tensor>(&x, 1))(0);
}

/// Central difference of f(x) with respect to flat parameter k.
inline double central_difference(const NetworkState<double>& st, const Tensor& x, Eigen::Index k,
                                 double h = 1e-5) {
  NetworkState<double> p = st;
  Vector<double> flat = st.flat();
  flat(k) += h;
  p.set_flat(flat);
  const double up = eval(p, x);
  flat(k) -= 2 * h;
  p.set_flat(flat);
  const double down = eval(p, x);
  return (up - down) / (2 * h);
}

inline double relative_error(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-7});
}

}  // namespace wcn::testing
