#pragma once

// Graph-classification datasets: TU text-format I/O, node-feature
// construction, stratified folds and zero-padded batching.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dfad/tensor.hpp"

namespace dfad {

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Graph {
  std::size_t n = 0;
  std::vector<std::uint8_t> adjacency;  // n*n, symmetric, zero diagonal
  std::size_t feature_dim = 0;
  std::vector<double> features;  // n*feature_dim, row-major
  int label = 0;                 // dense class index
  std::vector<int> node_labels;  // raw node labels, empty when unavailable

  bool edge(std::size_t i, std::size_t j) const { return adjacency[i * n + j] != 0; }
  void set_edge(std::size_t i, std::size_t j) {
    if (i == j) return;
    adjacency[i * n + j] = 1;
    adjacency[j * n + i] = 1;
  }
  std::size_t degree(std::size_t i) const {
    std::size_t d = 0;
    for (std::size_t j = 0; j < n; ++j) d += adjacency[i * n + j];
    return d;
  }
  std::size_t edge_count() const {
    std::size_t e = 0;
    for (auto a : adjacency) e += a;
    return e / 2;
  }

  static Graph empty(std::size_t n, int label = 0) {
    Graph g;
    g.n = n;
    g.adjacency.assign(n * n, 0);
    g.label = label;
    return g;
  }
};

struct Dataset {
  std::string name;
  std::vector<Graph> graphs;
  std::size_t num_classes = 0;
  std::size_t feature_dim = 0;
  std::vector<int> original_labels;  // original_labels[c] is the file value of class c
  bool has_node_labels = false;

  double avg_nodes() const {
    if (graphs.empty()) return 0.0;
    double s = 0.0;
    for (const auto& g : graphs) s += static_cast<double>(g.n);
    return s / static_cast<double>(graphs.size());
  }

  std::vector<std::size_t> class_counts() const {
    std::vector<std::size_t> c(num_classes, 0);
    for (const auto& g : graphs) ++c.at(static_cast<std::size_t>(g.label));
    return c;
  }

  std::vector<Graph> subset(std::span<const std::size_t> idx) const {
    std::vector<Graph> out;
    out.reserve(idx.size());
    for (auto i : idx) out.push_back(graphs.at(i));
    return out;
  }
};

namespace detail {

inline std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DatasetError("cannot open " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  while (!lines.empty() &&
         lines.back().find_first_not_of(" \t") == std::string::npos) {
    lines.pop_back();
  }
  return lines;
}

inline long parse_int(const std::string& tok, const std::string& file, std::size_t line) {
  std::size_t b = tok.find_first_not_of(" \t");
  std::size_t e = tok.find_last_not_of(" \t");
  if (b == std::string::npos) {
    throw DatasetError(file + ":" + std::to_string(line) + ": empty field");
  }
  std::string t = tok.substr(b, e - b + 1);
  std::size_t used = 0;
  long v = 0;
  try {
    // Some TU files write integer labels as floats ("1.0").
    double d = std::stod(t, &used);
    v = std::lround(d);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != t.size()) {
    throw DatasetError(file + ":" + std::to_string(line) + ": not an integer: '" + t + "'");
  }
  return v;
}

inline std::vector<long> read_int_column(const std::filesystem::path& path) {
  auto lines = read_lines(path);
  std::vector<long> out;
  out.reserve(lines.size());
  for (std::size_t i = 0; i < lines.size(); ++i) {
    out.push_back(parse_int(lines[i], path.filename().string(), i + 1));
  }
  return out;
}

}  // namespace detail

/// Reads NAME_A.txt, NAME_graph_indicator.txt, NAME_graph_labels.txt and,
/// when present, NAME_node_labels.txt from `root`. The returned dataset has
/// no node features yet (see build_features).
inline Dataset parse_tu_dataset(const std::filesystem::path& root, const std::string& name) {
  namespace fs = std::filesystem;
  const fs::path a_path = root / (name + "_A.txt");
  const fs::path ind_path = root / (name + "_graph_indicator.txt");
  const fs::path gl_path = root / (name + "_graph_labels.txt");
  const fs::path nl_path = root / (name + "_node_labels.txt");
  for (const auto& p : {a_path, ind_path, gl_path}) {
    if (!fs::exists(p)) throw DatasetError("missing mandatory file " + p.string());
  }

  auto indicator = detail::read_int_column(ind_path);
  auto graph_labels = detail::read_int_column(gl_path);
  const std::size_t num_graphs = graph_labels.size();
  if (num_graphs == 0) throw DatasetError(gl_path.filename().string() + ": no graphs");

  // Per-graph node ranges. Node t (1-based) belongs to graph indicator[t-1].
  std::vector<std::size_t> count(num_graphs, 0);
  std::vector<std::size_t> local(indicator.size());
  for (std::size_t t = 0; t < indicator.size(); ++t) {
    long g = indicator[t];
    if (g < 1 || static_cast<std::size_t>(g) > num_graphs) {
      throw DatasetError(ind_path.filename().string() + ":" + std::to_string(t + 1) +
                         ": graph id " + std::to_string(g) + " outside 1.." +
                         std::to_string(num_graphs));
    }
    local[t] = count[g - 1]++;
  }
  for (std::size_t g = 0; g < num_graphs; ++g) {
    if (count[g] == 0) throw DatasetError("graph " + std::to_string(g + 1) + " has no nodes");
  }

  std::set<long> distinct(graph_labels.begin(), graph_labels.end());
  Dataset ds;
  ds.name = name;
  ds.original_labels.assign(distinct.begin(), distinct.end());
  ds.num_classes = distinct.size();
  ds.graphs.resize(num_graphs);
  for (std::size_t g = 0; g < num_graphs; ++g) {
    auto& gr = ds.graphs[g];
    gr = Graph::empty(count[g]);
    auto it = std::lower_bound(ds.original_labels.begin(), ds.original_labels.end(),
                               graph_labels[g]);
    gr.label = static_cast<int>(it - ds.original_labels.begin());
  }

  auto edges = detail::read_lines(a_path);
  const std::string afile = a_path.filename().string();
  for (std::size_t ln = 0; ln < edges.size(); ++ln) {
    const auto& line = edges[ln];
    auto comma = line.find(',');
    if (comma == std::string::npos) {
      if (line.find_first_not_of(" \t") == std::string::npos) continue;
      throw DatasetError(afile + ":" + std::to_string(ln + 1) + ": expected 'i, j'");
    }
    long i = detail::parse_int(line.substr(0, comma), afile, ln + 1);
    long j = detail::parse_int(line.substr(comma + 1), afile, ln + 1);
    auto bad = [&](long v) { return v < 1 || static_cast<std::size_t>(v) > indicator.size(); };
    if (bad(i) || bad(j)) {
      throw DatasetError(afile + ":" + std::to_string(ln + 1) + ": node id outside 1.." +
                         std::to_string(indicator.size()));
    }
    if (indicator[i - 1] != indicator[j - 1]) {
      throw DatasetError(afile + ":" + std::to_string(ln + 1) + ": edge " + std::to_string(i) +
                         ", " + std::to_string(j) + " crosses graphs " +
                         std::to_string(indicator[i - 1]) + " and " +
                         std::to_string(indicator[j - 1]));
    }
    if (i == j) continue;
    ds.graphs[indicator[i - 1] - 1].set_edge(local[i - 1], local[j - 1]);
  }

  if (std::filesystem::exists(nl_path)) {
    auto nl = detail::read_int_column(nl_path);
    if (nl.size() != indicator.size()) {
      throw DatasetError(nl_path.filename().string() + ": has " + std::to_string(nl.size()) +
                         " lines, expected " + std::to_string(indicator.size()));
    }
    for (std::size_t t = 0; t < nl.size(); ++t) {
      auto& gr = ds.graphs[indicator[t] - 1];
      if (gr.node_labels.empty()) gr.node_labels.assign(gr.n, 0);
      gr.node_labels[local[t]] = static_cast<int>(nl[t]);
    }
    ds.has_node_labels = true;
  }
  return ds;
}

/// Writes `ds` back in TU layout (edges in both directions, original label
/// values). Node labels are written when every graph carries them.
inline void write_tu_dataset(const Dataset& ds, const std::filesystem::path& root,
                             const std::string& name) {
  std::filesystem::create_directories(root);
  std::ofstream a(root / (name + "_A.txt"));
  std::ofstream ind(root / (name + "_graph_indicator.txt"));
  std::ofstream gl(root / (name + "_graph_labels.txt"));
  bool labels = ds.has_node_labels &&
                std::all_of(ds.graphs.begin(), ds.graphs.end(),
                            [](const Graph& g) { return g.node_labels.size() == g.n; });
  std::ofstream nl;
  if (labels) nl.open(root / (name + "_node_labels.txt"));
  std::size_t base = 1;
  for (std::size_t g = 0; g < ds.graphs.size(); ++g) {
    const auto& gr = ds.graphs[g];
    for (std::size_t i = 0; i < gr.n; ++i) {
      ind << g + 1 << '\n';
      if (labels) nl << gr.node_labels[i] << '\n';
      for (std::size_t j = 0; j < gr.n; ++j) {
        if (gr.edge(i, j)) a << base + i << ", " << base + j << '\n';
      }
    }
    gl << ds.original_labels.at(static_cast<std::size_t>(gr.label)) << '\n';
    base += gr.n;
  }
  if (!a || !ind || !gl) throw DatasetError("failed writing TU files under " + root.string());
}

enum class FeaturePolicy { node_label_onehot, degree_onehot, constant };

inline std::string to_string(FeaturePolicy p) {
  switch (p) {
    case FeaturePolicy::node_label_onehot: return "node-label-onehot";
    case FeaturePolicy::degree_onehot: return "degree-onehot";
    case FeaturePolicy::constant: return "constant";
  }
  return "?";
}

inline FeaturePolicy feature_policy_from_string(const std::string& s) {
  if (s == "node-label-onehot") return FeaturePolicy::node_label_onehot;
  if (s == "degree-onehot") return FeaturePolicy::degree_onehot;
  if (s == "constant") return FeaturePolicy::constant;
  throw std::invalid_argument("unknown feature policy '" + s +
                              "' (expected node-label-onehot, degree-onehot or constant)");
}

/// Replaces every graph's features according to `policy`. Degree one-hot
/// uses min(max degree, cap_degree) + 1 bins; degrees above the cap land in
/// the top bin.
inline Dataset build_features(Dataset ds, FeaturePolicy policy, std::size_t cap_degree = 64) {
  switch (policy) {
    case FeaturePolicy::node_label_onehot: {
      if (!ds.has_node_labels) {
        throw DatasetError(ds.name +
                           ": node-label-onehot needs NAME_node_labels.txt; use degree-onehot for "
                           "datasets without node labels");
      }
      std::set<int> distinct;
      for (const auto& g : ds.graphs) distinct.insert(g.node_labels.begin(), g.node_labels.end());
      std::vector<int> vocab(distinct.begin(), distinct.end());
      ds.feature_dim = vocab.size();
      for (auto& g : ds.graphs) {
        g.feature_dim = ds.feature_dim;
        g.features.assign(g.n * g.feature_dim, 0.0);
        for (std::size_t i = 0; i < g.n; ++i) {
          auto pos = std::lower_bound(vocab.begin(), vocab.end(), g.node_labels[i]) - vocab.begin();
          g.features[i * g.feature_dim + static_cast<std::size_t>(pos)] = 1.0;
        }
      }
      break;
    }
    case FeaturePolicy::degree_onehot: {
      std::size_t max_deg = 0;
      for (const auto& g : ds.graphs)
        for (std::size_t i = 0; i < g.n; ++i) max_deg = std::max(max_deg, g.degree(i));
      std::size_t top = std::min(max_deg, cap_degree);
      ds.feature_dim = top + 1;
      for (auto& g : ds.graphs) {
        g.feature_dim = ds.feature_dim;
        g.features.assign(g.n * g.feature_dim, 0.0);
        for (std::size_t i = 0; i < g.n; ++i) {
          g.features[i * g.feature_dim + std::min(g.degree(i), top)] = 1.0;
        }
      }
      break;
    }
    case FeaturePolicy::constant: {
      ds.feature_dim = 1;
      for (auto& g : ds.graphs) {
        g.feature_dim = 1;
        g.features.assign(g.n, 1.0);
      }
      break;
    }
  }
  return ds;
}

struct FoldPlan {
  std::vector<std::vector<std::size_t>> folds;
  std::uint64_t seed = 0;
  bool relaxed = false;  // some class has fewer members than folds

  std::size_t k() const { return folds.size(); }

  /// Every index not in fold `f`, ascending.
  std::vector<std::size_t> train_indices(std::size_t f) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < folds.size(); ++i) {
      if (i == f) continue;
      out.insert(out.end(), folds[i].begin(), folds[i].end());
    }
    std::sort(out.begin(), out.end());
    return out;
  }
};

/// Seeded stratified k-fold split. Members of each class are shuffled and
/// dealt round-robin; the dealing position carries over between classes so
/// fold sizes differ by at most one.
inline FoldPlan stratified_kfold(const Dataset& ds, std::size_t k, std::uint64_t seed) {
  if (k == 0 || k > ds.graphs.size()) {
    throw std::invalid_argument("stratified_kfold: k=" + std::to_string(k) + " with " +
                                std::to_string(ds.graphs.size()) + " graphs");
  }
  FoldPlan plan;
  plan.seed = seed;
  plan.folds.resize(k);
  std::mt19937_64 rng(seed);
  std::vector<std::vector<std::size_t>> by_class(ds.num_classes);
  for (std::size_t i = 0; i < ds.graphs.size(); ++i) {
    by_class.at(static_cast<std::size_t>(ds.graphs[i].label)).push_back(i);
  }
  std::size_t pos = 0;
  for (auto& members : by_class) {
    if (!members.empty() && members.size() < k) plan.relaxed = true;
    std::shuffle(members.begin(), members.end(), rng);
    for (auto idx : members) {
      plan.folds[pos % k].push_back(idx);
      ++pos;
    }
  }
  for (auto& f : plan.folds) std::sort(f.begin(), f.end());
  return plan;
}

/// Seeded stratified subset holding round(fraction * |graphs|) graphs (at
/// least one), with per-class counts proportional to the input.
inline std::vector<Graph> stratified_subset(std::span<const Graph> graphs, double fraction,
                                            std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    throw std::invalid_argument("fraction must lie in (0, 1], got " + std::to_string(fraction));
  }
  if (graphs.empty()) throw std::invalid_argument("stratified_subset: no graphs");
  std::size_t want = static_cast<std::size_t>(std::llround(fraction * double(graphs.size())));
  if (want == 0) throw std::invalid_argument("stratified_subset: fraction selects no graphs");
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < graphs.size(); ++i) by_class[graphs[i].label].push_back(i);
  std::mt19937_64 rng(seed);
  // Interleave classes after shuffling so any prefix is near-stratified.
  std::vector<std::pair<double, std::size_t>> keyed;
  for (auto& [_, members] : by_class) {
    std::shuffle(members.begin(), members.end(), rng);
    for (std::size_t r = 0; r < members.size(); ++r) {
      keyed.emplace_back((static_cast<double>(r) + 0.5) / static_cast<double>(members.size()),
                         members[r]);
    }
  }
  std::stable_sort(keyed.begin(), keyed.end(),
                   [](const auto& a, const auto& b) { return a.first < b.first; });
  std::vector<std::size_t> picked;
  for (std::size_t i = 0; i < want; ++i) picked.push_back(keyed[i].second);
  std::sort(picked.begin(), picked.end());
  std::vector<Graph> out;
  for (auto i : picked) out.push_back(graphs[i]);
  return out;
}

struct GraphBatch {
  std::size_t batch_size = 0;
  std::size_t max_nodes = 0;
  std::size_t feature_dim = 0;
  Tensor features;   // [B, N_max, T]
  Tensor adjacency;  // [B, N_max, N_max]
  Tensor node_mask;  // [B, N_max]
  std::vector<int> labels;
};

inline GraphBatch make_batch(std::span<const Graph> graphs,
                             std::optional<std::size_t> max_nodes = std::nullopt) {
  if (graphs.empty()) throw std::invalid_argument("make_batch: empty graph list");
  std::size_t largest = 0;
  std::size_t t = graphs[0].feature_dim;
  for (const auto& g : graphs) {
    largest = std::max(largest, g.n);
    if (g.feature_dim != t || g.features.size() != g.n * t) {
      throw ShapeError("make_batch: inconsistent node features (feature_dim " +
                       std::to_string(g.feature_dim) + " vs " + std::to_string(t) + ")");
    }
  }
  std::size_t n = max_nodes.value_or(largest);
  if (n < largest) {
    throw std::invalid_argument("make_batch: N_max=" + std::to_string(n) +
                                " is smaller than the largest graph (" + std::to_string(largest) +
                                " nodes)");
  }
  std::size_t b = graphs.size();
  std::vector<double> f(b * n * t, 0.0), a(b * n * n, 0.0), m(b * n, 0.0);
  GraphBatch out;
  for (std::size_t s = 0; s < b; ++s) {
    const auto& g = graphs[s];
    for (std::size_t i = 0; i < g.n; ++i) {
      m[s * n + i] = 1.0;
      std::copy_n(g.features.data() + i * t, t, f.data() + (s * n + i) * t);
      for (std::size_t j = 0; j < g.n; ++j) a[(s * n + i) * n + j] = g.adjacency[i * g.n + j];
    }
    out.labels.push_back(g.label);
  }
  out.batch_size = b;
  out.max_nodes = n;
  out.feature_dim = t;
  out.features = Tensor({b, n, t}, std::move(f));
  out.adjacency = Tensor({b, n, n}, std::move(a));
  out.node_mask = Tensor({b, n}, std::move(m));
  return out;
}

/// Two-class synthetic set: class 0 cycles, class 1 stars, sizes 4..7 nodes,
/// degree one-hot features. Degree information alone separates the classes.
inline Dataset make_cycles_vs_stars(std::size_t count, std::uint64_t seed) {
  constexpr std::size_t kDegreeBins = 7;  // degrees 0..6
  Dataset ds;
  ds.name = "CYCLES_VS_STARS";
  ds.num_classes = 2;
  ds.original_labels = {0, 1};
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> size_dist(4, 7);
  for (std::size_t i = 0; i < count; ++i) {
    int label = static_cast<int>(i % 2);
    std::size_t n = size_dist(rng);
    Graph g = Graph::empty(n, label);
    if (label == 0) {
      for (std::size_t v = 0; v < n; ++v) g.set_edge(v, (v + 1) % n);
    } else {
      for (std::size_t v = 1; v < n; ++v) g.set_edge(0, v);
    }
    g.feature_dim = kDegreeBins;
    g.features.assign(n * kDegreeBins, 0.0);
    for (std::size_t v = 0; v < n; ++v) g.features[v * kDegreeBins + g.degree(v)] = 1.0;
    ds.graphs.push_back(std::move(g));
  }
  ds.feature_dim = kDegreeBins;
  return ds;
}

}  // namespace dfad
