#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <set>

#include "kanlab/graphs.hpp"
#include "kanlab/preprocess.hpp"

using namespace kanlab;

namespace {

Tensor uniform_image(std::int64_t h, std::int64_t w, double v) {
  return Tensor::full({h, w}, v);
}

// Piecewise-smooth test image: bilinear upsampling of a coarse random grid
// (the regime SLIC is designed for; MRI slices are smooth after filtering).
Tensor smooth_image(std::int64_t h, std::int64_t w, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> coarse(16);
  for (auto& v : coarse) v = rng.uniform();
  return resample(Tensor::from({4, 4}, coarse), {h, w});
}

Tensor smooth_volume(std::int64_t e, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> coarse(27);
  for (auto& v : coarse) v = rng.uniform();
  return resample(Tensor::from({3, 3, 3}, coarse), {e, e, e});
}

Graph path3() {
  // 0 - 1 - 2
  Graph g;
  g.node_features = Tensor::zeros({3, 2});
  g.edges = {{0, 1, 1.0}, {1, 2, 1.0}};
  g.centroids = {{0, 0, 0}, {1, 0, 0}, {2, 0, 0}};
  return g;
}

Graph complete(int n) {
  Graph g;
  g.node_features = Tensor::zeros({n, 2});
  for (int u = 0; u < n; ++u)
    for (int v = u + 1; v < n; ++v) g.edges.push_back({u, v, 1.0});
  g.centroids.assign(std::size_t(n), {0, 0, 0});
  return g;
}

}  // namespace

TEST_SUITE_BEGIN("graphs");

TEST_CASE("slic partitions the image") {
  auto img = smooth_image(32, 32, 12);
  auto seg = slic_segment(img, 16);
  REQUIRE(seg.segment_count >= 1);
  std::vector<std::int64_t> sizes(std::size_t(seg.segment_count), 0);
  for (auto l : seg.labels) {
    REQUIRE(l >= 0);
    REQUIRE(l < seg.segment_count);
    sizes[std::size_t(l)] += 1;
  }
  for (auto s : sizes) CHECK(s > 0);  // every label owns pixels
}

TEST_CASE("slic near-regular tiling on a uniform image") {
  auto img = uniform_image(32, 32, 0.5);
  auto seg = slic_segment(img, 16);
  CHECK(seg.segment_count == 16);
  std::vector<std::int64_t> sizes(std::size_t(seg.segment_count), 0);
  for (auto l : seg.labels) sizes[std::size_t(l)] += 1;
  const double expected = 32.0 * 32.0 / 16.0;
  for (auto s : sizes) {
    CHECK(double(s) >= 0.5 * expected);
    CHECK(double(s) <= 1.5 * expected);
  }
}

TEST_CASE("slic single segment when n_segments = 1") {
  auto seg = slic_segment(smooth_image(24, 24, 3), 1);
  CHECK(seg.segment_count == 1);
  for (auto l : seg.labels) CHECK(l == 0);
}

TEST_CASE("slic respects a two-intensity boundary") {
  // left half 0.2, right half 0.8; at compactness 0.1 no segment may
  // straddle the edge by more than the grid interval
  const std::int64_t n = 32;
  std::vector<double> vals(std::size_t(n * n));
  for (std::int64_t y = 0; y < n; ++y)
    for (std::int64_t x = 0; x < n; ++x)
      vals[std::size_t(y * n + x)] = x < n / 2 ? 0.2 : 0.8;
  auto seg = slic_segment(Tensor::from({n, n}, vals), 16, 0.1);
  const double step = std::sqrt(double(n * n) / 16.0);
  for (int s = 0; s < seg.segment_count; ++s) {
    std::int64_t min_x = n, max_x = -1;
    bool has_left = false, has_right = false;
    for (std::int64_t y = 0; y < n; ++y)
      for (std::int64_t x = 0; x < n; ++x) {
        if (seg.labels[std::size_t(y * n + x)] != s) continue;
        min_x = std::min(min_x, x);
        max_x = std::max(max_x, x);
        (x < n / 2 ? has_left : has_right) = true;
      }
    if (has_left && has_right) {
      // straddling segments must hug the boundary
      CHECK(double(n / 2 - min_x) <= step);
      CHECK(double(max_x - (n / 2 - 1)) <= step);
    }
  }
}

TEST_CASE("slic 3d volumes segment cleanly") {
  auto seg = slic_segment(smooth_volume(16, 9), 8);
  CHECK(seg.segment_count >= 4);
  std::set<std::int32_t> seen(seg.labels.begin(), seg.labels.end());
  CHECK(int(seen.size()) == seg.segment_count);
}

TEST_CASE("slic input validation") {
  auto img = uniform_image(8, 8, 0.1);
  CHECK_THROWS_AS(slic_segment(img, 0), ConfigError);
  CHECK_THROWS_AS(slic_segment(img, 65), ConfigError);
  std::vector<double> bad(64, 0.5);
  bad[5] = NAN;
  CHECK_THROWS_AS(slic_segment(Tensor::from({8, 8}, bad), 4), NumericError);
}

TEST_CASE("build_graph features and edges") {
  auto img = smooth_image(32, 32, 21);
  auto seg = slic_segment(img, 16);
  REQUIRE(seg.segment_count > 6);
  auto g = build_graph(seg, img);

  const auto n = g.node_features.dim(0);
  CHECK(n == seg.segment_count);
  CHECK(g.node_features.dim(1) == 4);  // intensity, area, cx, cy

  SUBCASE("relative areas sum to one") {
    double total = 0.0;
    for (std::int64_t i = 0; i < n; ++i) total += g.node_features.at({i, 1});
    CHECK(total == doctest::Approx(1.0).epsilon(1e-9));
  }
  SUBCASE("edges undirected, no self-pairs, weights in (0, 1]") {
    std::set<std::pair<int, int>> seen;
    for (const auto& e : g.edges) {
      CHECK(e.u < e.v);
      CHECK(e.weight > 0.0);
      CHECK(e.weight <= 1.0);
      CHECK(seen.insert({e.u, e.v}).second);
    }
  }
  SUBCASE("every node has at least k edges after symmetrization") {
    std::vector<int> degree(std::size_t(n), 0);
    for (const auto& e : g.edges) {
      degree[std::size_t(e.u)] += 1;
      degree[std::size_t(e.v)] += 1;
    }
    for (int d : degree) CHECK(d >= 6);
  }
  SUBCASE("constant image gives constant mean-intensity features") {
    auto flat = uniform_image(32, 32, 0.7);
    auto seg2 = slic_segment(flat, 16);
    auto g2 = build_graph(seg2, flat);
    for (std::int64_t i = 0; i < g2.node_features.dim(0); ++i)
      CHECK(g2.node_features.at({i, 0}) == doctest::Approx(0.7));
  }
  SUBCASE("k >= node count rejected") {
    GraphBuildOptions opt;
    opt.k = seg.segment_count;
    CHECK_THROWS_AS(build_graph(seg, img, opt), ConfigError);
  }
  SUBCASE("feature set without centroids is available") {
    GraphBuildOptions opt;
    opt.include_centroids = false;
    auto g2 = build_graph(seg, img, opt);
    CHECK(g2.node_features.dim(1) == 2);
  }
}

TEST_CASE("edge weight is inverse of one plus distance") {
  // two far nodes plus filler so k-NN connects them at known distances
  SegmentLabels seg;
  seg.extents = {1, 4};
  seg.labels = {0, 1, 2, 3};
  seg.segment_count = 4;
  auto img = Tensor::from({1, 4}, {0.1, 0.2, 0.3, 0.4});
  GraphBuildOptions opt;
  opt.k = 1;
  auto g = build_graph(seg, img, opt);
  // centroids at x = 0, 1, 2, 3; nearest neighbours at distance 1
  bool found = false;
  for (const auto& e : g.edges)
    if (e.u == 0 && e.v == 1) {
      CHECK(e.weight == doctest::Approx(0.5));
      found = true;
    }
  CHECK(found);
}

TEST_CASE("graph metrics") {
  SUBCASE("triangle") {
    auto m = graph_metrics(complete(3));
    CHECK(m.avg_degree == doctest::Approx(2.0));
    CHECK(m.avg_clustering == doctest::Approx(1.0));
    CHECK_FALSE(m.assortativity_defined);  // all degrees equal
  }
  SUBCASE("complete graphs K4 K5") {
    for (int n : {4, 5}) {
      auto m = graph_metrics(complete(n));
      CHECK(m.avg_degree == doctest::Approx(double(n - 1)));
      CHECK(m.avg_clustering == doctest::Approx(1.0));
    }
  }
  SUBCASE("3-node path") {
    auto m = graph_metrics(path3());
    CHECK(m.avg_degree == doctest::Approx(4.0 / 3.0));
    CHECK(m.avg_clustering == 0.0);
  }
  SUBCASE("5-node star has assortativity -1") {
    Graph g;
    g.node_features = Tensor::zeros({5, 2});
    for (int i = 1; i < 5; ++i) g.edges.push_back({0, i, 1.0});
    g.centroids.assign(5, {0, 0, 0});
    auto m = graph_metrics(g);
    CHECK(m.assortativity_defined);
    CHECK(m.assortativity == doctest::Approx(-1.0));
  }
}

TEST_CASE("cohort differences") {
  auto make = [](double shift, int edges) {
    Graph g;
    g.node_features =
        Tensor::from({2, 3}, {0.1 + shift, 0.5, 0.2, 0.3 + shift, 0.5, 0.4});
    for (int e = 0; e < edges; ++e)
      g.edges.push_back({0, 1, 1.0});  // duplicates fine for counting
    g.centroids.assign(2, {0, 0, 0});
    return g;
  };
  SUBCASE("identical cohorts are all-zero") {
    std::vector<Graph> a{make(0, 3), make(0, 2)};
    auto d = cohort_difference(a, a);
    CHECK(d.feature_difference == 0.0);
    CHECK(d.edge_count_difference == 0.0);
    CHECK(d.node_count_difference == 0.0);
  }
  SUBCASE("uniform single-feature shift gives |delta|") {
    std::vector<Graph> a{make(0, 3)};
    std::vector<Graph> b{make(0.25, 3)};
    auto d = cohort_difference(a, b);
    CHECK(d.feature_difference == doctest::Approx(0.25));
  }
  SUBCASE("edge count normalization is |ea-eb|/(ea+eb)") {
    std::vector<Graph> a{make(0, 100)};
    std::vector<Graph> b{make(0, 110)};
    auto d = cohort_difference(a, b);
    CHECK(d.edge_count_difference == doctest::Approx(10.0 / 210.0));
  }
  SUBCASE("feature arity mismatch rejected") {
    Graph g2;
    g2.node_features = Tensor::zeros({2, 2});
    g2.centroids.assign(2, {0, 0, 0});
    std::vector<Graph> a{make(0, 1)};
    std::vector<Graph> b{g2};
    CHECK_THROWS_AS(cohort_difference(a, b), DimensionError);
  }
}

TEST_CASE("pipeline determinism") {
  auto img = smooth_image(24, 24, 99);
  auto seg1 = slic_segment(img, 9);
  REQUIRE(seg1.segment_count > 6);
  auto seg2 = slic_segment(img, 9);
  CHECK(seg1.labels == seg2.labels);
  auto g1 = build_graph(seg1, img);
  auto g2 = build_graph(seg2, img);
  REQUIRE(g1.edges.size() == g2.edges.size());
  for (std::size_t i = 0; i < g1.edges.size(); ++i) {
    CHECK(g1.edges[i].u == g2.edges[i].u);
    CHECK(g1.edges[i].weight == g2.edges[i].weight);
  }
  for (std::int64_t i = 0; i < g1.node_features.numel(); ++i)
    CHECK(g1.node_features.data()[std::size_t(i)] ==
          g2.node_features.data()[std::size_t(i)]);
}

TEST_CASE("graph json round trip carries features, edges and provenance") {
  namespace fs = std::filesystem;
  const auto dir = fs::temp_directory_path() / "kanlab_graph_json";
  fs::create_directories(dir);
  auto img = smooth_image(24, 24, 77);
  auto seg = slic_segment(img, 12);
  REQUIRE(seg.segment_count > 6);
  auto g = build_graph(seg, img);
  GraphProvenance prov{"volumes/s000.kvt", seg.segment_count, 6, true};
  const auto path = (dir / "g.json").string();
  save_graph_json(g, prov, path);

  GraphProvenance back_prov;
  auto back = load_graph_json(path, &back_prov);
  CHECK(back.node_features.shape() == g.node_features.shape());
  for (std::int64_t i = 0; i < g.node_features.numel(); ++i)
    CHECK(back.node_features.data()[std::size_t(i)] ==
          doctest::Approx(g.node_features.data()[std::size_t(i)]));
  REQUIRE(back.edges.size() == g.edges.size());
  CHECK(back.edges[3].weight == doctest::Approx(g.edges[3].weight));
  CHECK(back_prov.source_image == "volumes/s000.kvt");
  CHECK(back_prov.segment_count == seg.segment_count);
  CHECK(back_prov.k == 6);
  fs::remove_all(dir);
}

TEST_CASE("normalized adjacency") {
  SUBCASE("self-loops only reduce to identity") {
    Graph g;
    g.node_features = Tensor::zeros({3, 2});
    g.centroids.assign(3, {0, 0, 0});
    auto adj = normalized_adjacency(g);
    CHECK(adj.n == 3);
    for (int i = 0; i < 3; ++i) {
      CHECK(adj.row_ptr[std::size_t(i) + 1] - adj.row_ptr[std::size_t(i)] == 1);
      CHECK(adj.val[std::size_t(i)] == doctest::Approx(1.0));
    }
  }
  SUBCASE("two nodes, unit edge: off-diagonals 0.5") {
    Graph g;
    g.node_features = Tensor::zeros({2, 1});
    g.centroids.assign(2, {0, 0, 0});
    g.edges = {{0, 1, 1.0}};
    auto adj = normalized_adjacency(g);
    // degrees 2 each; entries 1/2 everywhere
    for (double v : adj.val) CHECK(v == doctest::Approx(0.5));
  }
}

TEST_SUITE_END();
