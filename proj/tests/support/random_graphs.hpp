#pragma once

#include <algorithm>
#include <numeric>
#include <random>

#include "dfad/graph_data.hpp"

namespace dfad::testing {

inline Graph random_graph(std::size_t n, std::size_t feature_dim, std::mt19937_64& rng,
                          double edge_prob = 0.4, int label = 0) {
  std::bernoulli_distribution coin(edge_prob);
  std::normal_distribution<double> nd(0.0, 1.0);
  Graph g = Graph::empty(n, label);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      if (coin(rng)) g.set_edge(i, j);
  g.feature_dim = feature_dim;
  g.features.resize(n * feature_dim);
  for (auto& v : g.features) v = nd(rng);
  return g;
}

/// Relabels node i of `g` as perm[i].
inline Graph permute(const Graph& g, const std::vector<std::size_t>& perm) {
  Graph out = Graph::empty(g.n, g.label);
  out.feature_dim = g.feature_dim;
  out.features.resize(g.features.size());
  for (std::size_t i = 0; i < g.n; ++i) {
    std::copy_n(g.features.data() + i * g.feature_dim, g.feature_dim,
                out.features.data() + perm[i] * g.feature_dim);
    for (std::size_t j = 0; j < g.n; ++j)
      if (g.edge(i, j)) out.set_edge(perm[i], perm[j]);
  }
  return out;
}

inline std::vector<std::size_t> random_permutation(std::size_t n, std::mt19937_64& rng) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), std::size_t{0});
  std::shuffle(p.begin(), p.end(), rng);
  return p;
}

}  // namespace dfad::testing
