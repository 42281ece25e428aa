#pragma once

#include <array>
#include <span>
#include <vector>

#include "kanlab/common.hpp"
#include "kanlab/tensor.hpp"

namespace kanlab {

// ---------------------------------------------------------------------------
// Superpixel / supervoxel segmentation (SLIC) and graph construction.
// Images are rank-2 tensors [H x W], volumes rank-3 [D x H x W], intensities
// in [0, 1]. All functions are pure and safe to run per-image in parallel.
// ---------------------------------------------------------------------------

struct SegmentLabels {
  std::vector<std::int32_t> labels;  // one per pixel/voxel, row-major
  Shape extents;
  int segment_count = 0;
};

// Local k-means in joint (intensity, scaled spatial) space, initialized on a
// regular grid, with a final connectivity pass that merges orphan fragments
// into adjacent segments. Distance D = sqrt(d_int^2 + (d_sp/S)^2 * m^2) with
// grid interval S = (N / n_segments)^(1/dim).
SegmentLabels slic_segment(const Tensor& image, int n_segments,
                           double compactness = 0.1, int iterations = 10);

struct GraphEdge {
  int u = 0, v = 0;  // u < v
  double weight = 0.0;
};

struct Graph {
  Tensor node_features;  // [n_nodes x f]
  std::vector<GraphEdge> edges;  // undirected, deduplicated, no self-pairs
  std::vector<std::array<double, 3>> centroids;  // pixel coords, unused axes 0
};

struct GraphBuildOptions {
  int k = 6;                     // neighbours per node before symmetrization
  bool include_centroids = true; // centroid coordinates as node features
};

// Node features: (mean intensity, relative area/volume[, normalized centroid
// per axis]); edges are the symmetrized k-nearest-neighbour pairs over
// Euclidean centroid distance with weight 1 / (1 + distance).
Graph build_graph(const SegmentLabels& labels, const Tensor& image,
                  const GraphBuildOptions& options = {});

struct GraphMetrics {
  double avg_degree = 0.0;
  double avg_clustering = 0.0;
  double assortativity = 0.0;
  bool assortativity_defined = false;  // false when all degrees are equal
};

GraphMetrics graph_metrics(const Graph& graph);

struct CohortDifference {
  double feature_difference = 0.0;
  double edge_count_difference = 0.0;
  double node_count_difference = 0.0;
};

CohortDifference cohort_difference(std::span<const Graph> cohort_a,
                                   std::span<const Graph> cohort_b);

// Symmetrically normalized adjacency with self-loops, D^(-1/2) A~ D^(-1/2),
// in CSR form; the input graph's edge weights participate when use_weights is
// set (self-loops always weigh 1).
struct CsrAdjacency {
  int n = 0;
  std::vector<int> row_ptr;  // n + 1
  std::vector<int> col;
  std::vector<double> val;
};

CsrAdjacency normalized_adjacency(const Graph& graph, bool use_weights = true);

// Graph file: JSON with the node feature matrix, edge triples and provenance
// (source image path, segment count, k).
struct GraphProvenance {
  std::string source_image;
  int segment_count = 0;
  int k = 0;
  bool include_centroids = true;
};

void save_graph_json(const Graph& graph, const GraphProvenance& provenance,
                     const std::string& path);
Graph load_graph_json(const std::string& path,
                      GraphProvenance* provenance_out = nullptr);

}  // namespace kanlab
