#pragma once
// Architecture description and weight storage for NTK-parameterized CNNs.
//
// Every weight is stored as an i.i.d. N(0,1) draw. All width factors
// (1/sqrt(fan-in), 1/(WH sqrt(n)), ...) are applied inside the forward map.

#include <cstddef>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Dense>

namespace wcn {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <typename T>
using Vector = Eigen::Matrix<T, Eigen::Dynamic, 1>;

class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ArchitectureError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Activation { identity, tanh, relu };
enum class Readout { flatten, gap };

inline std::string to_string(Activation a) {
  switch (a) {
    case Activation::identity: return "identity";
    case Activation::tanh: return "tanh";
    case Activation::relu: return "relu";
  }
  return "?";
}

inline std::string to_string(Readout r) { return r == Readout::flatten ? "flatten" : "gap"; }

struct Shape {
  int height = 1;
  int width = 1;
  int channels = 1;

  int positions() const { return height * width; }
  std::size_t size() const { return std::size_t(height) * width * channels; }
  bool operator==(const Shape&) const = default;
};

inline std::string to_string(const Shape& s) {
  return "(" + std::to_string(s.height) + "x" + std::to_string(s.width) + "x" +
         std::to_string(s.channels) + ")";
}

struct ConvLayer {
  int kernel_h = 3;
  int kernel_w = 3;
};
struct DenseLayer {};
struct SkipLayer {
  /// Activation index the skip reads from (0 is the network input).
  int target = 0;
  std::variant<ConvLayer, DenseLayer> inner = ConvLayer{};
};
struct GapLayer {};
struct MaxPoolLayer {
  int window = 2;
  int stride = 2;
};

using LayerSpec = std::variant<ConvLayer, DenseLayer, SkipLayer, GapLayer, MaxPoolLayer>;

inline std::string kind_name(const LayerSpec& l) {
  struct {
    std::string operator()(const ConvLayer&) const { return "conv"; }
    std::string operator()(const DenseLayer&) const { return "dense"; }
    std::string operator()(const SkipLayer&) const { return "skip"; }
    std::string operator()(const GapLayer&) const { return "gap"; }
    std::string operator()(const MaxPoolLayer&) const { return "maxpool"; }
  } v;
  return std::visit(v, l);
}

struct NetworkSpec {
  std::vector<LayerSpec> layers;
  Activation activation = Activation::tanh;
  Readout readout = Readout::flatten;
  Shape input{28, 28, 1};
  int width = 16;

  NetworkSpec with_width(int n) const {
    NetworkSpec s = *this;
    s.width = n;
    return s;
  }

  bool has_maxpool() const {
    for (const auto& l : layers)
      if (std::holds_alternative<MaxPoolLayer>(l)) return true;
    return false;
  }

  /// Identity activation and no max-pool: the network map is linear in x and
  /// multilinear in the layer weights.
  bool linear_decomposable() const {
    return activation == Activation::identity && !has_maxpool();
  }
};

/// Static layout of a validated spec: activation shapes and weight shapes.
struct Layout {
  /// shapes[0] is the input, shapes[l] the activation after layer l.
  std::vector<Shape> shapes;
  /// For every layer, the index into the weight list or -1 when the layer has
  /// no weights.
  std::vector<int> weight_index;
  /// (rows, cols) for each weighted layer, readout last.
  std::vector<std::pair<Eigen::Index, Eigen::Index>> weight_dims;
  int weighted_layers = 0;

  std::size_t parameter_count() const {
    std::size_t total = 0;
    for (auto [r, c] : weight_dims) total += std::size_t(r) * std::size_t(c);
    return total;
  }
};

namespace detail {

inline Shape straight_shape(const std::variant<ConvLayer, DenseLayer>& op, const Shape& in, int n,
                            std::size_t layer) {
  if (const auto* c = std::get_if<ConvLayer>(&op)) {
    if (c->kernel_h <= 0 || c->kernel_w <= 0 || c->kernel_h % 2 == 0 || c->kernel_w % 2 == 0)
      throw ArchitectureError("layer " + std::to_string(layer) + ": conv kernel dims must be odd");
    return {in.height, in.width, n};
  }
  return {1, 1, n};
}

inline std::pair<Eigen::Index, Eigen::Index> straight_dims(
    const std::variant<ConvLayer, DenseLayer>& op, const Shape& in, int n) {
  if (const auto* c = std::get_if<ConvLayer>(&op))
    return {Eigen::Index(c->kernel_h) * c->kernel_w * in.channels, n};
  return {Eigen::Index(in.size()), n};
}

}  // namespace detail

/// Validates shapes and computes the weight layout.
inline Layout make_layout(const NetworkSpec& spec) {
  if (spec.width <= 0) throw ArchitectureError("width must be positive");
  if (spec.input.height <= 0 || spec.input.width <= 0 || spec.input.channels <= 0)
    throw ShapeError("input shape must be positive, got " + to_string(spec.input));
  Layout out;
  out.shapes.push_back(spec.input);
  const int n = spec.width;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const std::size_t layer = i + 1;
    const Shape& in = out.shapes.back();
    const auto& l = spec.layers[i];
    Shape next;
    int widx = -1;
    if (const auto* c = std::get_if<ConvLayer>(&l)) {
      next = detail::straight_shape(*c, in, n, layer);
      widx = out.weighted_layers++;
      out.weight_dims.push_back(detail::straight_dims(*c, in, n));
    } else if (std::holds_alternative<DenseLayer>(l)) {
      next = {1, 1, n};
      widx = out.weighted_layers++;
      out.weight_dims.push_back({Eigen::Index(in.size()), n});
    } else if (const auto* s = std::get_if<SkipLayer>(&l)) {
      if (s->target < 0 || std::size_t(s->target) >= layer)
        throw ShapeError("skip layer " + std::to_string(layer) + ": target " +
                         std::to_string(s->target) + " is not an earlier activation");
      next = detail::straight_shape(s->inner, in, n, layer);
      const Shape& t = out.shapes[std::size_t(s->target)];
      if (!(t == next))
        throw ShapeError("skip layer " + std::to_string(layer) + ": target activation " +
                         std::to_string(s->target) + " has shape " + to_string(t) +
                         " but the straight path produces " + to_string(next));
      widx = out.weighted_layers++;
      out.weight_dims.push_back(detail::straight_dims(s->inner, in, n));
    } else if (std::holds_alternative<GapLayer>(l)) {
      next = {1, 1, in.channels};
    } else if (const auto* m = std::get_if<MaxPoolLayer>(&l)) {
      if (m->window <= 0 || m->stride <= 0)
        throw ArchitectureError("layer " + std::to_string(layer) + ": bad max-pool window");
      if (in.height < m->window || in.width < m->window)
        throw ShapeError("layer " + std::to_string(layer) + ": max-pool window larger than input " +
                         to_string(in));
      next = {(in.height - m->window) / m->stride + 1, (in.width - m->window) / m->stride + 1,
              in.channels};
    } else {
      throw ArchitectureError("layer " + std::to_string(layer) + ": unsupported layer kind");
    }
    out.shapes.push_back(next);
    out.weight_index.push_back(widx);
  }
  const Shape& last = out.shapes.back();
  if (spec.readout == Readout::flatten)
    out.weight_dims.push_back({Eigen::Index(last.positions()), last.channels});
  else
    out.weight_dims.push_back({1, last.channels});
  return out;
}

/// Concrete weights. Immutable after construction except through training,
/// which produces new states.
template <typename T>
struct NetworkState {
  NetworkSpec spec;
  Layout layout;
  /// One matrix per weighted hidden layer (rows = fan-in index, cols = output
  /// channel), readout V last (flatten: positions x channels, gap: 1 x channels).
  std::vector<Matrix<T>> weights;
  std::uint64_t seed = 0;

  std::size_t parameter_count() const { return layout.parameter_count(); }
  const Matrix<T>& readout() const { return weights.back(); }

  template <typename U>
  NetworkState<U> cast() const {
    NetworkState<U> out{spec, layout, {}, seed};
    for (const auto& w : weights) out.weights.push_back(w.template cast<U>());
    return out;
  }

  Vector<T> flat() const {
    Vector<T> v(static_cast<Eigen::Index>(parameter_count()));
    Eigen::Index off = 0;
    for (const auto& w : weights) {
      v.segment(off, w.size()) = Eigen::Map<const Vector<T>>(w.data(), w.size());
      off += w.size();
    }
    return v;
  }

  void set_flat(const Vector<T>& v) {
    Eigen::Index off = 0;
    for (auto& w : weights) {
      Eigen::Map<Vector<T>>(w.data(), w.size()) = v.segment(off, w.size());
      off += w.size();
    }
  }
};

/// Draws every weight from N(0,1) with a 64-bit Mersenne twister seeded by
/// `seed`, layer by layer in order, column-major within a layer.
template <typename T = double>
NetworkState<T> build_network(const NetworkSpec& spec, std::uint64_t seed) {
  NetworkState<T> st;
  st.spec = spec;
  st.layout = make_layout(spec);
  st.seed = seed;
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (auto [rows, cols] : st.layout.weight_dims) {
    Matrix<T> w(rows, cols);
    for (Eigen::Index k = 0; k < w.size(); ++k) w.data()[k] = T(normal(gen));
    st.weights.push_back(std::move(w));
  }
  return st;
}

}  // namespace wcn
