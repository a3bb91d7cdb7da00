#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include <unistd.h>

#include "dfad/graph_data.hpp"

using namespace dfad;
namespace fs = std::filesystem;

namespace {

const fs::path kData = fs::path(DFAD_SOURCE_DIR) / "data";
const fs::path kFixture = fs::path(DFAD_SOURCE_DIR) / "tests" / "data" / "FIXTURE";

fs::path scratch_dir(const std::string& tag) {
  fs::path p = fs::temp_directory_path() / ("dfad_test_" + tag + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

Graph from_edges(std::size_t n, std::initializer_list<std::pair<std::size_t, std::size_t>> edges) {
  Graph g = Graph::empty(n);
  for (auto [i, j] : edges) g.set_edge(i, j);
  return g;
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream(p) << text;
}

}  // namespace

TEST(TuParser, HandWrittenFixture) {
  Dataset ds = parse_tu_dataset(kFixture, "FIXTURE");
  ASSERT_EQ(ds.graphs.size(), 6u);
  EXPECT_EQ(ds.num_classes, 2u);
  EXPECT_EQ(ds.original_labels, (std::vector<int>{-1, 1}));
  EXPECT_TRUE(ds.has_node_labels);

  std::vector<Graph> expected = {
      from_edges(3, {{0, 1}, {1, 2}, {2, 0}}),
      from_edges(4, {{0, 1}, {1, 2}, {2, 3}}),
      from_edges(1, {}),
      from_edges(4, {{0, 1}, {0, 2}, {0, 3}}),
      from_edges(2, {{0, 1}}),
      from_edges(3, {{0, 2}}),
  };
  std::vector<int> labels{1, 0, 1, 0, 1, 0};
  for (std::size_t g = 0; g < 6; ++g) {
    EXPECT_EQ(ds.graphs[g].n, expected[g].n) << "graph " << g;
    EXPECT_EQ(ds.graphs[g].adjacency, expected[g].adjacency) << "graph " << g;
    EXPECT_EQ(ds.graphs[g].label, labels[g]) << "graph " << g;
  }
  EXPECT_EQ(ds.graphs[1].node_labels, (std::vector<int>{0, 0, 1, 1}));
  EXPECT_NEAR(ds.avg_nodes(), 17.0 / 6.0, 1e-12);
}

TEST(TuParser, SingleEdgeIsSymmetrized) {
  fs::path dir = scratch_dir("single");
  write_file(dir / "ONE_A.txt", "1, 2\n");
  write_file(dir / "ONE_graph_indicator.txt", "1\n1\n");
  write_file(dir / "ONE_graph_labels.txt", "0\n");
  Dataset ds = parse_tu_dataset(dir, "ONE");
  ASSERT_EQ(ds.graphs.size(), 1u);
  EXPECT_EQ(ds.graphs[0].adjacency, (std::vector<std::uint8_t>{0, 1, 1, 0}));
  EXPECT_FALSE(ds.has_node_labels);
  fs::remove_all(dir);
}

TEST(TuParser, MissingFileIsNamed) {
  fs::path dir = scratch_dir("missing");
  write_file(dir / "X_A.txt", "1, 2\n");
  write_file(dir / "X_graph_labels.txt", "0\n");
  try {
    parse_tu_dataset(dir, "X");
    FAIL() << "expected DatasetError";
  } catch (const DatasetError& e) {
    EXPECT_NE(std::string(e.what()).find("X_graph_indicator.txt"), std::string::npos) << e.what();
  }
  fs::remove_all(dir);
}

TEST(TuParser, CrossGraphEdgeReportsLine) {
  fs::path dir = scratch_dir("cross");
  write_file(dir / "X_A.txt", "1, 2\n2, 3\n");
  write_file(dir / "X_graph_indicator.txt", "1\n1\n2\n");
  write_file(dir / "X_graph_labels.txt", "0\n1\n");
  try {
    parse_tu_dataset(dir, "X");
    FAIL() << "expected DatasetError";
  } catch (const DatasetError& e) {
    EXPECT_NE(std::string(e.what()).find("X_A.txt:2"), std::string::npos) << e.what();
  }
  fs::remove_all(dir);
}

TEST(TuParser, EmptyGraphRejected) {
  fs::path dir = scratch_dir("empty");
  write_file(dir / "X_A.txt", "1, 2\n");
  write_file(dir / "X_graph_indicator.txt", "1\n1\n");
  write_file(dir / "X_graph_labels.txt", "0\n1\n");
  EXPECT_THROW(parse_tu_dataset(dir, "X"), DatasetError);
  fs::remove_all(dir);
}

TEST(TuParser, Mutag) {
  Dataset ds = parse_tu_dataset(kData / "MUTAG", "MUTAG");
  EXPECT_EQ(ds.graphs.size(), 188u);
  EXPECT_EQ(ds.num_classes, 2u);
  EXPECT_NEAR(ds.avg_nodes(), 17.93, 0.01);
  EXPECT_EQ(ds.class_counts(), (std::vector<std::size_t>{63, 125}));
  for (const auto& g : ds.graphs) {
    for (std::size_t i = 0; i < g.n; ++i) {
      EXPECT_FALSE(g.edge(i, i));
      for (std::size_t j = 0; j < g.n; ++j) EXPECT_EQ(g.edge(i, j), g.edge(j, i));
    }
  }
}

TEST(TuParser, RoundTrip) {
  for (auto [root, name] : {std::pair{kFixture, std::string("FIXTURE")},
                            std::pair{kData / "MUTAG", std::string("MUTAG")}}) {
    Dataset a = parse_tu_dataset(root, name);
    fs::path dir = scratch_dir("roundtrip");
    write_tu_dataset(a, dir, name);
    Dataset b = parse_tu_dataset(dir, name);
    ASSERT_EQ(a.graphs.size(), b.graphs.size());
    EXPECT_EQ(a.original_labels, b.original_labels);
    for (std::size_t g = 0; g < a.graphs.size(); ++g) {
      EXPECT_EQ(a.graphs[g].adjacency, b.graphs[g].adjacency);
      EXPECT_EQ(a.graphs[g].label, b.graphs[g].label);
      EXPECT_EQ(a.graphs[g].node_labels, b.graphs[g].node_labels);
    }
    fs::remove_all(dir);
  }
}

TEST(Features, DegreeOneHotPath) {
  Dataset ds;
  ds.num_classes = 1;
  ds.graphs.push_back(from_edges(3, {{0, 1}, {1, 2}}));
  Dataset f = build_features(ds, FeaturePolicy::degree_onehot, 10);
  ASSERT_EQ(f.feature_dim, 3u);
  EXPECT_EQ(f.graphs[0].features, (std::vector<double>{0, 1, 0, 0, 0, 1, 0, 1, 0}));
}

TEST(Features, NodeLabelOneHot) {
  Dataset ds;
  ds.num_classes = 1;
  ds.has_node_labels = true;
  Graph g = Graph::empty(3);
  g.node_labels = {0, 1, 0};
  ds.graphs.push_back(g);
  Dataset f = build_features(ds, FeaturePolicy::node_label_onehot);
  ASSERT_EQ(f.feature_dim, 2u);
  EXPECT_EQ(f.graphs[0].features, (std::vector<double>{1, 0, 0, 1, 1, 0}));
}

TEST(Features, DegreeCapOverflowsIntoTopBin) {
  Dataset ds;
  ds.num_classes = 1;
  Graph star = Graph::empty(13);
  for (std::size_t v = 1; v < 13; ++v) star.set_edge(0, v);
  ds.graphs.push_back(star);
  Dataset f = build_features(ds, FeaturePolicy::degree_onehot, 10);
  ASSERT_EQ(f.feature_dim, 11u);
  const auto& row = f.graphs[0].features;
  for (std::size_t c = 0; c < 11; ++c) EXPECT_EQ(row[c], c == 10 ? 1.0 : 0.0);
}

TEST(Features, RowsAreOneHotAndLabelPolicyNeedsLabels) {
  Dataset ds = build_features(parse_tu_dataset(kFixture, "FIXTURE"), FeaturePolicy::node_label_onehot);
  EXPECT_EQ(ds.feature_dim, 3u);
  for (const auto& g : ds.graphs) {
    for (std::size_t i = 0; i < g.n; ++i) {
      double s = 0.0;
      for (std::size_t c = 0; c < g.feature_dim; ++c) s += g.features[i * g.feature_dim + c];
      EXPECT_EQ(s, 1.0);
    }
  }
  Dataset c = build_features(ds, FeaturePolicy::constant);
  EXPECT_EQ(c.feature_dim, 1u);
  EXPECT_EQ(c.graphs[0].features, (std::vector<double>{1, 1, 1}));

  Dataset unlabeled = ds;
  unlabeled.has_node_labels = false;
  try {
    build_features(unlabeled, FeaturePolicy::node_label_onehot);
    FAIL() << "expected DatasetError";
  } catch (const DatasetError& e) {
    EXPECT_NE(std::string(e.what()).find("degree-onehot"), std::string::npos);
  }
}

namespace {

void expect_partition(const FoldPlan& plan, std::size_t n) {
  std::set<std::size_t> seen;
  std::size_t total = 0;
  for (const auto& f : plan.folds) {
    total += f.size();
    seen.insert(f.begin(), f.end());
  }
  EXPECT_EQ(total, n);
  EXPECT_EQ(seen.size(), n);
}

}  // namespace

TEST(Folds, BalancedToySplit) {
  Dataset ds = make_cycles_vs_stars(20, 1);
  FoldPlan plan = stratified_kfold(ds, 10, 4);
  expect_partition(plan, 20);
  EXPECT_FALSE(plan.relaxed);
  for (const auto& f : plan.folds) {
    ASSERT_EQ(f.size(), 2u);
    EXPECT_NE(ds.graphs[f[0]].label, ds.graphs[f[1]].label);
  }
}

TEST(Folds, MutagSizesAndBalance) {
  Dataset ds = parse_tu_dataset(kData / "MUTAG", "MUTAG");
  FoldPlan plan = stratified_kfold(ds, 10, 0);
  expect_partition(plan, 188);
  auto counts = ds.class_counts();
  for (const auto& f : plan.folds) {
    EXPECT_TRUE(f.size() == 18 || f.size() == 19) << f.size();
    std::vector<double> per(2, 0.0);
    for (auto i : f) per[ds.graphs[i].label] += 1.0;
    for (std::size_t c = 0; c < 2; ++c) {
      double expected = double(counts[c]) * double(f.size()) / 188.0;
      EXPECT_LE(std::fabs(per[c] - expected), 1.0);
    }
  }
  EXPECT_EQ(plan.folds, stratified_kfold(ds, 10, 0).folds);
  EXPECT_NE(plan.folds, stratified_kfold(ds, 10, 1).folds);
  auto train = plan.train_indices(3);
  EXPECT_EQ(train.size() + plan.folds[3].size(), 188u);
}

TEST(Folds, TooManyFoldsRejectedAndSmallClassesRelax) {
  Dataset ds = parse_tu_dataset(kFixture, "FIXTURE");
  EXPECT_THROW(stratified_kfold(ds, 7, 0), std::invalid_argument);
  EXPECT_THROW(stratified_kfold(ds, 0, 0), std::invalid_argument);
  FoldPlan plan = stratified_kfold(ds, 6, 0);
  EXPECT_TRUE(plan.relaxed);
  expect_partition(plan, 6);
}

TEST(Subset, FractionAndStratification) {
  Dataset ds = parse_tu_dataset(kData / "MUTAG", "MUTAG");
  auto half = stratified_subset(ds.graphs, 0.5, 3);
  EXPECT_EQ(half.size(), 94u);
  std::size_t pos = 0;
  for (const auto& g : half) pos += g.label;
  EXPECT_NEAR(double(pos), 125.0 / 2.0, 1.0);
  auto one = stratified_subset(ds.graphs, 1.0 / 188.0, 3);
  EXPECT_EQ(one.size(), 1u);
  EXPECT_THROW(stratified_subset(ds.graphs, 0.001, 3), std::invalid_argument);
  EXPECT_THROW(stratified_subset(ds.graphs, 0.0, 3), std::invalid_argument);
}

TEST(Batch, PaddingAndMask) {
  Dataset ds = build_features(parse_tu_dataset(kFixture, "FIXTURE"), FeaturePolicy::node_label_onehot);
  std::vector<Graph> two{ds.graphs[0], ds.graphs[1]};  // sizes 3 and 4
  GraphBatch b = make_batch(two);
  EXPECT_EQ(b.max_nodes, 4u);
  EXPECT_EQ(b.node_mask.values()[0] + b.node_mask.values()[1] + b.node_mask.values()[2] +
                b.node_mask.values()[3],
            3.0);
  GraphBatch wide = make_batch(two, 11);
  const std::size_t n = 11, t = 3;
  for (std::size_t s = 0; s < 2; ++s) {
    double mask_sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double m = wide.node_mask.at(s * n + i);
      mask_sum += m;
      if (m == 0.0) {
        for (std::size_t c = 0; c < t; ++c) EXPECT_EQ(wide.features.at((s * n + i) * t + c), 0.0);
        for (std::size_t j = 0; j < n; ++j) {
          EXPECT_EQ(wide.adjacency.at((s * n + i) * n + j), 0.0);
          EXPECT_EQ(wide.adjacency.at((s * n + j) * n + i), 0.0);
        }
      }
    }
    EXPECT_EQ(mask_sum, double(two[s].n));
  }
  EXPECT_EQ(wide.labels, (std::vector<int>{1, 0}));
  EXPECT_THROW(make_batch(two, 3), std::invalid_argument);
  EXPECT_THROW(make_batch(std::span<const Graph>{}), std::invalid_argument);
}

TEST(Batch, ExactFitIsBitIdentical) {
  Dataset ds = build_features(parse_tu_dataset(kFixture, "FIXTURE"), FeaturePolicy::node_label_onehot);
  const Graph& g = ds.graphs[3];
  GraphBatch b = make_batch(std::span<const Graph>(&g, 1), g.n);
  EXPECT_TRUE(std::equal(g.features.begin(), g.features.end(), b.features.values().begin()));
  for (std::size_t k = 0; k < g.n * g.n; ++k) EXPECT_EQ(b.adjacency.at(k), double(g.adjacency[k]));
}

TEST(Toy, CyclesVsStarsAreWellFormed) {
  Dataset ds = make_cycles_vs_stars(20, 9);
  EXPECT_EQ(ds.graphs.size(), 20u);
  EXPECT_EQ(ds.class_counts(), (std::vector<std::size_t>{10, 10}));
  for (const auto& g : ds.graphs) {
    EXPECT_EQ(g.features.size(), g.n * ds.feature_dim);
    if (g.label == 0) {
      for (std::size_t v = 0; v < g.n; ++v) EXPECT_EQ(g.degree(v), 2u);
    } else {
      EXPECT_EQ(g.degree(0), g.n - 1);
    }
  }
}
