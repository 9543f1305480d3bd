#pragma once
// Symbolic correlation functions: factors of f carrying derivative slots,
// slots contracted in pairs. Parsing, cluster graph and its exponent.

#include <algorithm>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <boost/rational.hpp>
#include <nlohmann/json.hpp>

namespace wcn {

using Rational = boost::rational<long long>;

inline std::string to_string(const Rational& r) {
  if (r.denominator() == 1) return std::to_string(r.numerator());
  return std::to_string(r.numerator()) + "/" + std::to_string(r.denominator());
}

class SpecError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Factor {
  std::string input;
  std::vector<std::string> slots;
};

struct CorrelationSpec {
  std::vector<Factor> factors;
  std::vector<std::pair<std::string, std::string>> pairs;
  /// Optional per-factor hidden-layer counts.
  std::vector<int> depths;
  /// Optional per-factor weight-type chains, e.g. {"U", "W2", "V"}.
  std::vector<std::vector<std::string>> chains;

  int m() const { return int(factors.size()); }

  /// Factor index owning each slot label.
  std::map<std::string, int> owners() const {
    std::map<std::string, int> out;
    for (int i = 0; i < m(); ++i)
      for (const auto& s : factors[std::size_t(i)].slots) out[s] = i;
    return out;
  }

  /// Number of contractions between factors (i, j), i <= j. Self-pairings
  /// appear with i == j.
  std::map<std::pair<int, int>, int> contractions() const {
    const auto own = owners();
    std::map<std::pair<int, int>, int> out;
    for (const auto& [a, b] : pairs) {
      int i = own.at(a), j = own.at(b);
      if (i > j) std::swap(i, j);
      ++out[{i, j}];
    }
    return out;
  }

  std::vector<std::pair<int, int>> self_pairings() const {
    std::vector<std::pair<int, int>> out;
    for (const auto& [ij, k] : contractions())
      if (ij.first == ij.second) out.push_back({ij.first, k});
    return out;
  }

  bool has_mixed_depths() const { return !depths.empty() || !chains.empty(); }
};

namespace detail {

inline std::string path(const std::string& base, std::size_t i) {
  return base + "[" + std::to_string(i) + "]";
}

inline void check_chain(const std::vector<std::string>& c, const std::string& where) {
  if (c.size() < 2 || c.front() != "U" || c.back() != "V")
    throw SpecError(where + ": chain must start with \"U\", end with \"V\" and have length >= 2");
  for (std::size_t k = 1; k + 1 < c.size(); ++k) {
    const auto& t = c[k];
    if (t.size() < 2 || t[0] != 'W' || t.find_first_not_of("0123456789", 1) != std::string::npos)
      throw SpecError(path(where, k) + ": inner chain entries must be W<level>, got \"" + t + "\"");
  }
  for (std::size_t a = 0; a < c.size(); ++a)
    for (std::size_t b = a + 1; b < c.size(); ++b)
      if (c[a] == c[b]) throw SpecError(path(where, b) + ": weight type \"" + c[b] + "\" repeated");
}

}  // namespace detail

/// Validates a spec assembled in code; the parser calls this as well.
inline void validate(const CorrelationSpec& spec) {
  std::map<std::string, std::string> seen;
  for (std::size_t i = 0; i < spec.factors.size(); ++i)
    for (std::size_t k = 0; k < spec.factors[i].slots.size(); ++k) {
      const auto& s = spec.factors[i].slots[k];
      const std::string where = detail::path(detail::path("factors", i) + ".slots", k);
      auto [it, fresh] = seen.emplace(s, where);
      if (!fresh)
        throw SpecError(where + ": duplicate slot label \"" + s + "\" (first at " + it->second + ")");
    }
  if (spec.factors.size() % 2 != 0)
    throw SpecError("factors: number of factors m = " + std::to_string(spec.factors.size()) +
                    " must be even");
  std::map<std::string, std::string> paired;
  for (std::size_t p = 0; p < spec.pairs.size(); ++p) {
    const auto& [a, b] = spec.pairs[p];
    for (int side = 0; side < 2; ++side) {
      const std::string& s = side == 0 ? a : b;
      const std::string where = detail::path(detail::path("pairs", p), std::size_t(side));
      if (!seen.count(s)) throw SpecError(where + ": unknown slot label \"" + s + "\"");
      auto [it, fresh] = paired.emplace(s, where);
      if (!fresh)
        throw SpecError(where + ": slot \"" + s + "\" is paired more than once (also at " +
                        it->second + ")");
    }
  }
  for (const auto& [s, where] : seen)
    if (!paired.count(s)) throw SpecError(where + ": slot \"" + s + "\" is unpaired");
  if (!spec.depths.empty()) {
    if (spec.depths.size() != spec.factors.size())
      throw SpecError("depths: expected " + std::to_string(spec.factors.size()) + " entries, got " +
                      std::to_string(spec.depths.size()));
    for (std::size_t i = 0; i < spec.depths.size(); ++i)
      if (spec.depths[i] < 1) throw SpecError(detail::path("depths", i) + ": depth must be >= 1");
  }
  if (!spec.chains.empty()) {
    if (spec.chains.size() != spec.factors.size())
      throw SpecError("chains: expected " + std::to_string(spec.factors.size()) + " entries, got " +
                      std::to_string(spec.chains.size()));
    for (std::size_t i = 0; i < spec.chains.size(); ++i) {
      detail::check_chain(spec.chains[i], detail::path("chains", i));
      if (!spec.depths.empty() && int(spec.chains[i].size()) - 1 != spec.depths[i])
        throw SpecError(detail::path("chains", i) + ": chain length disagrees with depths[" +
                        std::to_string(i) + "]");
    }
  }
}

inline CorrelationSpec parse_spec(const nlohmann::json& doc) {
  using nlohmann::json;
  if (!doc.is_object()) throw SpecError("<root>: expected an object");
  CorrelationSpec spec;
  if (!doc.contains("factors") || !doc["factors"].is_array())
    throw SpecError("factors: required array is missing");
  const auto& fs = doc["factors"];
  for (std::size_t i = 0; i < fs.size(); ++i) {
    const std::string where = detail::path("factors", i);
    const auto& f = fs[i];
    if (!f.is_object()) throw SpecError(where + ": expected an object");
    Factor fac;
    if (f.contains("input")) {
      if (!f["input"].is_string()) throw SpecError(where + ".input: expected a string");
      fac.input = f["input"].get<std::string>();
    } else {
      fac.input = "x" + std::to_string(i + 1);
    }
    if (f.contains("slots")) {
      if (!f["slots"].is_array()) throw SpecError(where + ".slots: expected an array");
      for (std::size_t k = 0; k < f["slots"].size(); ++k) {
        if (!f["slots"][k].is_string())
          throw SpecError(detail::path(where + ".slots", k) + ": expected a string");
        fac.slots.push_back(f["slots"][k].get<std::string>());
      }
    }
    spec.factors.push_back(std::move(fac));
  }
  if (doc.contains("pairs")) {
    const auto& ps = doc["pairs"];
    if (!ps.is_array()) throw SpecError("pairs: expected an array");
    for (std::size_t p = 0; p < ps.size(); ++p) {
      const auto& pr = ps[p];
      if (!pr.is_array() || pr.size() != 2 || !pr[0].is_string() || !pr[1].is_string())
        throw SpecError(detail::path("pairs", p) + ": expected [slot, slot]");
      spec.pairs.emplace_back(pr[0].get<std::string>(), pr[1].get<std::string>());
    }
  }
  if (doc.contains("depths")) {
    const auto& ds = doc["depths"];
    if (!ds.is_array()) throw SpecError("depths: expected an array");
    for (std::size_t i = 0; i < ds.size(); ++i) {
      if (!ds[i].is_number_integer()) throw SpecError(detail::path("depths", i) + ": expected an integer");
      spec.depths.push_back(ds[i].get<int>());
    }
  }
  if (doc.contains("chains")) {
    const auto& cs = doc["chains"];
    if (!cs.is_array()) throw SpecError("chains: expected an array");
    for (std::size_t i = 0; i < cs.size(); ++i) {
      if (!cs[i].is_array()) throw SpecError(detail::path("chains", i) + ": expected an array");
      std::vector<std::string> c;
      for (std::size_t k = 0; k < cs[i].size(); ++k) {
        if (!cs[i][k].is_string())
          throw SpecError(detail::path(detail::path("chains", i), k) + ": expected a string");
        c.push_back(cs[i][k].get<std::string>());
      }
      spec.chains.push_back(std::move(c));
    }
  }
  validate(spec);
  return spec;
}

inline CorrelationSpec parse_spec_text(const std::string& text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw SpecError(std::string("<document>: ") + e.what());
  }
  return parse_spec(doc);
}

inline CorrelationSpec load_spec(const std::string& file) {
  std::ifstream in(file);
  if (!in) throw SpecError(file + ": cannot open");
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse_spec_text(ss.str());
  } catch (const SpecError& e) {
    throw SpecError(file + ": " + e.what());
  }
}

inline nlohmann::json to_json(const CorrelationSpec& spec) {
  nlohmann::json doc;
  doc["factors"] = nlohmann::json::array();
  for (const auto& f : spec.factors) doc["factors"].push_back({{"input", f.input}, {"slots", f.slots}});
  doc["pairs"] = nlohmann::json::array();
  for (const auto& [a, b] : spec.pairs) doc["pairs"].push_back({a, b});
  if (!spec.depths.empty()) doc["depths"] = spec.depths;
  if (!spec.chains.empty()) doc["chains"] = spec.chains;
  return doc;
}

struct ClusterGraph {
  int vertices = 0;
  /// Distinct-factor contractions, collapsed to simple edges (i < j).
  std::vector<std::pair<int, int>> edges;
  std::vector<std::vector<int>> components;
  int n_even = 0;
  int n_odd = 0;
};

inline ClusterGraph cluster_graph(const CorrelationSpec& spec) {
  ClusterGraph g;
  g.vertices = spec.m();
  std::vector<int> parent(std::size_t(g.vertices));
  std::iota(parent.begin(), parent.end(), 0);
  auto find = [&](int v) {
    while (parent[std::size_t(v)] != v) v = parent[std::size_t(v)] = parent[std::size_t(parent[std::size_t(v)])];
    return v;
  };
  for (const auto& [ij, k] : spec.contractions()) {
    if (ij.first == ij.second) continue;
    g.edges.push_back(ij);
    parent[std::size_t(find(ij.first))] = find(ij.second);
  }
  std::map<int, std::vector<int>> comp;
  for (int v = 0; v < g.vertices; ++v) comp[find(v)].push_back(v);
  for (auto& [root, vs] : comp) {
    (vs.size() % 2 == 0 ? g.n_even : g.n_odd)++;
    g.components.push_back(std::move(vs));
  }
  std::sort(g.components.begin(), g.components.end());
  return g;
}

/// s_C = n_e + n_o/2 - m/2.
inline Rational conjecture_exponent(const CorrelationSpec& spec) {
  const auto g = cluster_graph(spec);
  return Rational(g.n_even) + Rational(g.n_odd, 2) - Rational(spec.m(), 2);
}

}  // namespace wcn
