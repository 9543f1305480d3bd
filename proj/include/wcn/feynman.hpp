#pragma once
// Feynman diagrams of deep-linear correlation functions and their
// double-line blow-ups.
//
// Every factor is a chain of weight types U, W<l>..., V. A diagram picks one
// perfect matching per type over the factors carrying it. A chain of length
// k (k - 1 hidden layers) blows up into levels 1..k-1: U touches level 1, the
// j-th inner W touches levels j and j+1, V touches the top level.

#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "wcn/correlation.hpp"

namespace wcn {

class BudgetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DiagramError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

inline constexpr std::uint64_t default_diagram_cap = 10'000'000;

using Chain = std::vector<std::string>;

inline Chain uniform_chain(int depth) {
  Chain c{"U"};
  for (int l = 1; l < depth; ++l) c.push_back("W" + std::to_string(l));
  c.push_back("V");
  return c;
}

inline std::vector<Chain> uniform_chains(int m, int depth) {
  if (depth < 1) throw SpecError("depth must be >= 1");
  return std::vector<Chain>(std::size_t(m), uniform_chain(depth));
}

/// Chains from the correlation spec's own `chains` or `depths` fields.
inline std::vector<Chain> mixed_chains(const CorrelationSpec& spec) {
  if (!spec.chains.empty()) return spec.chains;
  if (spec.depths.empty()) throw SpecError("depths: mixed mode needs per-factor depths or chains");
  std::vector<Chain> out;
  for (int d : spec.depths) out.push_back(uniform_chain(d));
  return out;
}

using Matching = std::vector<std::pair<int, int>>;

struct FeynmanDiagram {
  std::vector<Chain> chains;
  /// Edge types in order of first appearance across the chains.
  std::vector<std::string> types;
  /// One perfect matching per type, over the vertices carrying it.
  std::vector<Matching> matchings;

  int vertices() const { return int(chains.size()); }
};

namespace detail {

inline void all_matchings(std::vector<int>& pool, Matching& cur, std::vector<Matching>& out) {
  if (pool.empty()) {
    out.push_back(cur);
    return;
  }
  const int a = pool.front();
  for (std::size_t k = 1; k < pool.size(); ++k) {
    const int b = pool[k];
    std::vector<int> rest;
    for (std::size_t q = 1; q < pool.size(); ++q)
      if (q != k) rest.push_back(pool[q]);
    cur.push_back({a, b});
    all_matchings(rest, cur, out);
    cur.pop_back();
  }
}

struct UnionFind {
  std::vector<int> parent;
  explicit UnionFind(std::size_t n) : parent(n) { std::iota(parent.begin(), parent.end(), 0); }
  int find(int v) {
    while (parent[std::size_t(v)] != v) {
      parent[std::size_t(v)] = parent[std::size_t(parent[std::size_t(v)])];
      v = parent[std::size_t(v)];
    }
    return v;
  }
  void unite(int a, int b) { parent[std::size_t(find(a))] = find(b); }
  int count() {
    int c = 0;
    for (std::size_t v = 0; v < parent.size(); ++v) c += find(int(v)) == int(v);
    return c;
  }
};

}  // namespace detail

/// Enumeration plan: types, carriers and all matchings per type.
struct DiagramFamily {
  std::vector<Chain> chains;
  std::vector<std::string> types;
  std::vector<std::vector<int>> carriers;
  std::vector<std::vector<Matching>> options;
  /// Required edge counts between distinct factors.
  std::map<std::pair<int, int>, int> required;
  /// Non-empty when the family is empty or unsupported.
  std::string empty_reason;

  /// Product of per-type matching counts, saturating.
  std::uint64_t unfiltered_count() const {
    if (!empty_reason.empty()) return 0;
    std::uint64_t total = 1;
    for (const auto& o : options) {
      if (total > std::numeric_limits<std::uint64_t>::max() / std::max<std::uint64_t>(1, o.size()))
        return std::numeric_limits<std::uint64_t>::max();
      total *= o.size();
    }
    return total;
  }
};

inline std::uint64_t double_factorial_odd(int n) {
  std::uint64_t r = 1;
  for (int k = n - 1; k > 1; k -= 2) r *= std::uint64_t(k);
  return r;
}

inline DiagramFamily plan_family(const CorrelationSpec& spec, const std::vector<Chain>& chains,
                                 std::uint64_t cap = default_diagram_cap) {
  if (int(chains.size()) != spec.m())
    throw SpecError("chains: expected " + std::to_string(spec.m()) + " entries, got " +
                    std::to_string(chains.size()));
  for (std::size_t i = 0; i < chains.size(); ++i) detail::check_chain(chains[i], detail::path("chains", i));
  DiagramFamily fam;
  fam.chains = chains;
  for (const auto& c : chains)
    for (const auto& t : c)
      if (std::find(fam.types.begin(), fam.types.end(), t) == fam.types.end()) fam.types.push_back(t);
  for (const auto& t : fam.types) {
    std::vector<int> carry;
    for (int i = 0; i < spec.m(); ++i)
      if (std::find(chains[std::size_t(i)].begin(), chains[std::size_t(i)].end(), t) !=
          chains[std::size_t(i)].end())
        carry.push_back(i);
    fam.carriers.push_back(carry);
  }
  for (const auto& [ij, k] : spec.contractions()) {
    if (ij.first == ij.second) {
      fam.empty_reason = "factor " + std::to_string(ij.first) + " contracts " + std::to_string(k) +
                         " slot pair(s) with itself; self-contractions need self-edges, which no "
                         "matching diagram provides";
      return fam;
    }
    fam.required[ij] = k;
  }
  std::uint64_t bound = 1;
  for (std::size_t t = 0; t < fam.types.size(); ++t) {
    const auto& carry = fam.carriers[t];
    if (carry.size() % 2 != 0) {
      fam.empty_reason = "weight type " + fam.types[t] + " is carried by an odd number of factors (" +
                         std::to_string(carry.size()) + ")";
      return fam;
    }
    const std::uint64_t c = double_factorial_odd(int(carry.size()));
    if (bound > cap / std::max<std::uint64_t>(1, c))
      throw BudgetError("diagram family exceeds the cap of " + std::to_string(cap) +
                        " (unfiltered count above cap at type " + fam.types[t] + ")");
    bound *= c;
  }
  for (auto carry : fam.carriers) {
    std::vector<Matching> opts;
    Matching cur;
    detail::all_matchings(carry, cur, opts);
    fam.options.push_back(std::move(opts));
  }
  return fam;
}

/// Visits every diagram satisfying the contraction constraint, in
/// lexicographic order of per-type matching indices. Returns the count.
template <typename Visitor>
std::uint64_t for_each_diagram(const DiagramFamily& fam, Visitor&& visit) {
  if (!fam.empty_reason.empty()) return 0;
  const std::size_t T = fam.types.size();
  const int m = int(fam.chains.size());
  FeynmanDiagram d{fam.chains, fam.types, std::vector<Matching>(T)};
  std::vector<std::size_t> idx(T, 0);
  std::vector<int> mult(std::size_t(m * m));
  std::uint64_t count = 0;
  for (std::size_t t = 0; t < T; ++t) d.matchings[t] = fam.options[t][0];
  while (true) {
    std::fill(mult.begin(), mult.end(), 0);
    for (const auto& mt : d.matchings)
      for (auto [a, b] : mt) ++mult[std::size_t(std::min(a, b) * m + std::max(a, b))];
    bool ok = true;
    for (const auto& [ij, k] : fam.required)
      if (mult[std::size_t(ij.first * m + ij.second)] < k) {
        ok = false;
        break;
      }
    if (ok) {
      ++count;
      visit(static_cast<const FeynmanDiagram&>(d));
    }
    std::size_t t = T;
    while (t-- > 0) {
      if (++idx[t] < fam.options[t].size()) {
        d.matchings[t] = fam.options[t][idx[t]];
        break;
      }
      idx[t] = 0;
      d.matchings[t] = fam.options[t][0];
    }
    if (t == std::size_t(-1)) break;
  }
  return count;
}

inline std::vector<FeynmanDiagram> enumerate_diagrams(const CorrelationSpec& spec,
                                                      const std::vector<Chain>& chains,
                                                      std::uint64_t cap = default_diagram_cap) {
  const auto fam = plan_family(spec, chains, cap);
  std::vector<FeynmanDiagram> out;
  for_each_diagram(fam, [&](const FeynmanDiagram& d) { out.push_back(d); });
  return out;
}

struct DoubleLineGraph {
  /// (factor, level) for each level vertex; levels start at 1.
  std::vector<std::pair<int, int>> nodes;
  std::vector<std::pair<int, int>> edges;
  /// Loop id of every node.
  std::vector<int> loop_of;
  int loops = 0;
};

inline DoubleLineGraph double_line(const FeynmanDiagram& d) {
  DoubleLineGraph g;
  const int m = d.vertices();
  std::vector<int> offset(std::size_t(m) + 1, 0);
  for (int i = 0; i < m; ++i) {
    const int levels = int(d.chains[std::size_t(i)].size()) - 1;
    offset[std::size_t(i) + 1] = offset[std::size_t(i)] + levels;
    for (int l = 1; l <= levels; ++l) g.nodes.push_back({i, l});
  }
  auto node = [&](int v, int level) { return offset[std::size_t(v)] + level - 1; };
  auto levels_of = [&](int v, const std::string& type) -> std::vector<int> {
    const Chain& c = d.chains[std::size_t(v)];
    const int pos = int(std::find(c.begin(), c.end(), type) - c.begin());
    const int top = int(c.size()) - 1;
    if (pos == int(c.size())) throw DiagramError("vertex " + std::to_string(v) + " lacks type " + type);
    if (pos == 0) return {1};
    if (pos == top) return {top};
    return {pos, pos + 1};
  };
  for (std::size_t t = 0; t < d.types.size(); ++t)
    for (auto [a, b] : d.matchings[t]) {
      const auto la = levels_of(a, d.types[t]), lb = levels_of(b, d.types[t]);
      if (la.size() != lb.size())
        throw DiagramError("type " + d.types[t] + " has mismatched level spans");
      for (std::size_t k = 0; k < la.size(); ++k) g.edges.push_back({node(a, la[k]), node(b, lb[k])});
    }
  std::vector<int> degree(g.nodes.size(), 0);
  detail::UnionFind uf(g.nodes.size());
  for (auto [x, y] : g.edges) {
    ++degree[std::size_t(x)];
    ++degree[std::size_t(y)];
    uf.unite(x, y);
  }
  for (std::size_t k = 0; k < degree.size(); ++k)
    if (degree[k] != 2)
      throw DiagramError("double-line vertex (" + std::to_string(g.nodes[k].first) + ", level " +
                         std::to_string(g.nodes[k].second) + ") has degree " +
                         std::to_string(degree[k]));
  std::map<int, int> ids;
  for (std::size_t k = 0; k < g.nodes.size(); ++k) {
    auto [it, fresh] = ids.emplace(uf.find(int(k)), int(ids.size()));
    g.loop_of.push_back(it->second);
  }
  g.loops = int(ids.size());
  return g;
}

/// Connected components of the single-line diagram, as vertex lists.
inline std::vector<std::vector<int>> diagram_components(const FeynmanDiagram& d) {
  detail::UnionFind uf(std::size_t(d.vertices()));
  for (const auto& mt : d.matchings)
    for (auto [a, b] : mt) uf.unite(a, b);
  std::map<int, std::vector<int>> comp;
  for (int v = 0; v < d.vertices(); ++v) comp[uf.find(v)].push_back(v);
  std::vector<std::vector<int>> out;
  for (auto& [r, vs] : comp) out.push_back(std::move(vs));
  return out;
}

/// s = loops - sum_i (k_i - 1)/2 with k_i the chain length of vertex i.
inline Rational diagram_exponent(const FeynmanDiagram& d, const DoubleLineGraph& g) {
  Rational s(g.loops);
  for (const auto& c : d.chains) s -= Rational(static_cast<long long>(c.size()) - 1, 2);
  return s;
}

inline Rational diagram_exponent(const FeynmanDiagram& d) { return diagram_exponent(d, double_line(d)); }

struct EulerCheck {
  int vertices = 0;
  int edges = 0;
  int faces = 0;
  int chi() const { return vertices - edges + faces; }
};

/// v - e + f for each single-line component, f counted in the blow-up.
inline std::vector<EulerCheck> euler_characters(const FeynmanDiagram& d, const DoubleLineGraph& g) {
  std::vector<EulerCheck> out;
  for (const auto& comp : diagram_components(d)) {
    EulerCheck e;
    e.vertices = int(comp.size());
    int degree_sum = 0;
    std::set<int> faces;
    for (int v : comp) degree_sum += int(d.chains[std::size_t(v)].size());
    for (std::size_t k = 0; k < g.nodes.size(); ++k)
      if (std::find(comp.begin(), comp.end(), g.nodes[k].first) != comp.end()) faces.insert(g.loop_of[k]);
    e.edges = degree_sum / 2;
    e.faces = int(faces.size());
    out.push_back(e);
  }
  return out;
}

/// Maximum exponent over a family, or empty with a diagnostic.
struct ExponentResult {
  std::optional<Rational> value;
  std::string diagnostic;
  std::uint64_t diagrams = 0;

  bool vanishes() const { return !value.has_value(); }
};

inline std::string to_string(const ExponentResult& r) {
  return r.value ? to_string(*r.value) : std::string("vanishes");
}

struct ComponentBound {
  /// max_gamma c_gamma - m/2 over the enumerated family.
  std::optional<Rational> enumerated;
  /// n_e + n_o/2 - m/2 from the cluster graph alone.
  Rational cluster;
};

/// Everything derivable from one pass over the family.
struct Prediction {
  Rational conjecture;
  ExponentResult deep_linear;
  ComponentBound bound;
  std::uint64_t unfiltered = 0;
  int max_chi = std::numeric_limits<int>::min();
  bool chi_ok = true;
};

inline Prediction predict(const CorrelationSpec& spec, const std::vector<Chain>& chains,
                          std::uint64_t cap = default_diagram_cap) {
  Prediction p;
  p.conjecture = conjecture_exponent(spec);
  p.bound.cluster = p.conjecture;
  const auto fam = plan_family(spec, chains, cap);
  p.unfiltered = fam.unfiltered_count();
  std::optional<Rational> best;
  std::optional<int> best_c;
  p.deep_linear.diagrams = for_each_diagram(fam, [&](const FeynmanDiagram& d) {
    const auto g = double_line(d);
    const Rational s = diagram_exponent(d, g);
    if (!best || s > *best) best = s;
    for (const auto& e : euler_characters(d, g)) {
      p.max_chi = std::max(p.max_chi, e.chi());
      if (e.chi() > 1) p.chi_ok = false;
    }
    const int c = int(diagram_components(d).size());
    if (!best_c || c > *best_c) best_c = c;
  });
  p.deep_linear.value = best;
  if (!best) {
    p.deep_linear.diagnostic =
        fam.empty_reason.empty() ? "no diagram satisfies the contraction constraints" : fam.empty_reason;
  } else {
    p.bound.enumerated = Rational(*best_c) - Rational(spec.m(), 2);
  }
  return p;
}

inline ExponentResult deep_linear_exponent(const CorrelationSpec& spec, const std::vector<Chain>& chains,
                                           std::uint64_t cap = default_diagram_cap) {
  return predict(spec, chains, cap).deep_linear;
}

inline ComponentBound component_bound(const CorrelationSpec& spec, const std::vector<Chain>& chains,
                                      std::uint64_t cap = default_diagram_cap) {
  return predict(spec, chains, cap).bound;
}

}  // namespace wcn
