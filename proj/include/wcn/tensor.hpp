#pragma once
// Plain (height, width, channels) input tensor, stored HWC.

#include <span>
#include <string>
#include <vector>

#include "wcn/network.hpp"

namespace wcn {

struct Tensor {
  Shape shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(Shape s, double fill = 0.0) : shape(s), data(s.size(), fill) {}
  Tensor(Shape s, std::vector<double> values) : shape(s), data(std::move(values)) {
    if (data.size() != shape.size())
      throw ShapeError("tensor data has " + std::to_string(data.size()) + " values for shape " +
                       to_string(shape));
  }

  double& at(int r, int s, int c) { return data[(std::size_t(r) * shape.width + s) * shape.channels + c]; }
  double at(int r, int s, int c) const {
    return data[(std::size_t(r) * shape.width + s) * shape.channels + c];
  }

  Tensor scaled(double k) const {
    Tensor t = *this;
    for (auto& v : t.data) v *= k;
    return t;
  }
  double dot(const Tensor& o) const {
    double acc = 0.0;
    for (std::size_t i = 0; i < data.size(); ++i) acc += data[i] * o.data[i];
    return acc;
  }
};

using Batch = std::vector<Tensor>;

}  // namespace wcn
