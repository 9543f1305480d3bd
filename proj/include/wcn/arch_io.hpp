#pragma once
// JSON form of NetworkSpec.
//
//   {"input": [H, W, C], "activation": "tanh", "readout": "flatten", "width": 64,
//    "layers": [{"type": "conv", "kernel": [3, 3]}, {"type": "dense"}, {"type": "gap"},
//               {"type": "skip", "target": 1, "inner": {"type": "conv", "kernel": [3, 3]}},
//               {"type": "maxpool", "window": 2, "stride": 2}]}

#include <set>
#include <stdexcept>
#include <string>

#include <nlohmann/json.hpp>

#include "wcn/network.hpp"

namespace wcn {

/// Config validation failure; the message starts with the JSON field path.
class SchemaError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline nlohmann::json straight_json(const std::variant<ConvLayer, DenseLayer>& op) {
  if (const auto* c = std::get_if<ConvLayer>(&op)) return {{"type", "conv"}, {"kernel", {c->kernel_h, c->kernel_w}}};
  return {{"type", "dense"}};
}

inline void only_fields(const nlohmann::json& j, const std::string& path, std::set<std::string> known) {
  if (!j.is_object()) throw SchemaError(path + ": expected an object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!known.count(it.key())) throw SchemaError(path + "." + it.key() + ": unknown field");
}

inline int positive_int(const nlohmann::json& j, const std::string& path) {
  if (!j.is_number_integer() || j.get<long long>() <= 0) throw SchemaError(path + ": expected a positive integer");
  return j.get<int>();
}

inline std::string string_field(const nlohmann::json& j, const std::string& key, const std::string& path) {
  if (!j.contains(key)) throw SchemaError(path + "." + key + ": required");
  if (!j[key].is_string()) throw SchemaError(path + "." + key + ": expected a string");
  return j[key].get<std::string>();
}

inline ConvLayer parse_conv(const nlohmann::json& j, const std::string& path) {
  ConvLayer c;
  if (j.contains("kernel")) {
    const auto& k = j["kernel"];
    if (!k.is_array() || k.size() != 2) throw SchemaError(path + ".kernel: expected [kh, kw]");
    c.kernel_h = positive_int(k[0], path + ".kernel[0]");
    c.kernel_w = positive_int(k[1], path + ".kernel[1]");
    if (c.kernel_h % 2 == 0 || c.kernel_w % 2 == 0) throw SchemaError(path + ".kernel: dimensions must be odd");
  }
  return c;
}

inline std::variant<ConvLayer, DenseLayer> parse_straight(const nlohmann::json& j, const std::string& path) {
  const std::string type = string_field(j, "type", path);
  if (type == "conv") {
    only_fields(j, path, {"type", "kernel"});
    return parse_conv(j, path);
  }
  if (type == "dense") {
    only_fields(j, path, {"type"});
    return DenseLayer{};
  }
  throw SchemaError(path + ".type: expected conv or dense, got '" + type + "'");
}

}  // namespace detail

inline nlohmann::json to_json(const NetworkSpec& s) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : s.layers) {
    if (const auto* c = std::get_if<ConvLayer>(&l))
      layers.push_back(detail::straight_json(*c));
    else if (std::holds_alternative<DenseLayer>(l))
      layers.push_back(detail::straight_json(DenseLayer{}));
    else if (const auto* k = std::get_if<SkipLayer>(&l))
      layers.push_back({{"type", "skip"}, {"target", k->target}, {"inner", detail::straight_json(k->inner)}});
    else if (std::holds_alternative<GapLayer>(l))
      layers.push_back({{"type", "gap"}});
    else if (const auto* m = std::get_if<MaxPoolLayer>(&l))
      layers.push_back({{"type", "maxpool"}, {"window", m->window}, {"stride", m->stride}});
  }
  return {{"input", {s.input.height, s.input.width, s.input.channels}},
          {"activation", to_string(s.activation)},
          {"readout", to_string(s.readout)},
          {"width", s.width},
          {"layers", layers}};
}

/// Parses and validates (via make_layout) an architecture object.
inline NetworkSpec parse_network_spec(const nlohmann::json& j, const std::string& path = "architecture") {
  detail::only_fields(j, path, {"input", "activation", "readout", "width", "layers"});
  NetworkSpec s;
  if (!j.contains("input")) throw SchemaError(path + ".input: required");
  const auto& in = j["input"];
  if (!in.is_array() || in.size() != 3) throw SchemaError(path + ".input: expected [height, width, channels]");
  s.input = {detail::positive_int(in[0], path + ".input[0]"), detail::positive_int(in[1], path + ".input[1]"),
             detail::positive_int(in[2], path + ".input[2]")};
  const std::string act = detail::string_field(j, "activation", path);
  if (act == "identity" || act == "linear")
    s.activation = Activation::identity;
  else if (act == "tanh")
    s.activation = Activation::tanh;
  else if (act == "relu")
    s.activation = Activation::relu;
  else
    throw SchemaError(path + ".activation: expected identity, tanh or relu, got '" + act + "'");
  const std::string ro = j.contains("readout") ? detail::string_field(j, "readout", path) : "flatten";
  if (ro == "flatten")
    s.readout = Readout::flatten;
  else if (ro == "gap")
    s.readout = Readout::gap;
  else
    throw SchemaError(path + ".readout: expected flatten or gap, got '" + ro + "'");
  if (j.contains("width")) s.width = detail::positive_int(j["width"], path + ".width");
  if (!j.contains("layers") || !j["layers"].is_array()) throw SchemaError(path + ".layers: expected an array");
  for (std::size_t i = 0; i < j["layers"].size(); ++i) {
    const auto& l = j["layers"][i];
    const std::string lp = path + ".layers[" + std::to_string(i) + "]";
    const std::string type = detail::string_field(l, "type", lp);
    if (type == "conv" || type == "dense") {
      const auto op = detail::parse_straight(l, lp);
      if (const auto* c = std::get_if<ConvLayer>(&op))
        s.layers.push_back(*c);
      else
        s.layers.push_back(DenseLayer{});
    } else if (type == "skip") {
      detail::only_fields(l, lp, {"type", "target", "inner"});
      if (!l.contains("target") || !l["target"].is_number_integer() || l["target"].get<long long>() < 0)
        throw SchemaError(lp + ".target: expected a nonnegative integer");
      if (!l.contains("inner")) throw SchemaError(lp + ".inner: required");
      s.layers.push_back(SkipLayer{l["target"].get<int>(), detail::parse_straight(l["inner"], lp + ".inner")});
    } else if (type == "gap") {
      detail::only_fields(l, lp, {"type"});
      s.layers.push_back(GapLayer{});
    } else if (type == "maxpool") {
      detail::only_fields(l, lp, {"type", "window", "stride"});
      MaxPoolLayer m;
      if (l.contains("window")) m.window = detail::positive_int(l["window"], lp + ".window");
      if (l.contains("stride")) m.stride = detail::positive_int(l["stride"], lp + ".stride");
      s.layers.push_back(m);
    } else {
      throw SchemaError(lp + ".type: unknown layer type '" + type + "'");
    }
  }
  try {
    make_layout(s);
  } catch (const std::exception& e) {
    throw SchemaError(path + ": " + e.what());
  }
  return s;
}

}  // namespace wcn
