#include "kanlab/graphs.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include <json.hpp>

namespace kanlab {

namespace {

struct Dims {
  int rank = 0;
  std::int64_t e[3] = {1, 1, 1};  // extents, slowest first
  std::int64_t count() const { return e[0] * e[1] * e[2]; }
};

Dims image_dims(const Tensor& image) {
  if (image.rank() != 2 && image.rank() != 3)
    throw DimensionError("expected a 2D image or 3D volume");
  Dims d;
  d.rank = image.rank();
  for (int i = 0; i < d.rank; ++i) d.e[i + 3 - d.rank] = image.dim(i);
  return d;
}

struct Cluster {
  double pos[3];
  double intensity;
  std::int64_t size;
};

}  // namespace

SegmentLabels slic_segment(const Tensor& image, int n_segments,
                           double compactness, int iterations) {
  const Dims dims = image_dims(image);
  const std::int64_t npix = dims.count();
  if (n_segments < 1) throw ConfigError("slic: n_segments must be >= 1");
  if (n_segments > npix)
    throw ConfigError("slic: n_segments exceeds pixel count");
  for (double v : image.data())
    if (!std::isfinite(v)) throw NumericError("slic: non-finite intensity");

  const int rank = image.rank();
  const double grid_s =
      std::pow(double(npix) / double(n_segments), 1.0 / rank);

  // Regular-grid initialization: per-axis center counts approximating the
  // requested segment total.
  int counts[3] = {1, 1, 1};
  for (int a = 3 - rank; a < 3; ++a) {
    counts[a] = std::max(
        1, int(std::llround(double(dims.e[a]) / grid_s)));
    counts[a] = int(std::min<std::int64_t>(counts[a], dims.e[a]));
  }
  std::vector<Cluster> clusters;
  const auto img = image.data();
  auto flat = [&](std::int64_t z, std::int64_t y, std::int64_t x) {
    return (z * dims.e[1] + y) * dims.e[2] + x;
  };
  for (int cz = 0; cz < counts[0]; ++cz)
    for (int cy = 0; cy < counts[1]; ++cy)
      for (int cx = 0; cx < counts[2]; ++cx) {
        Cluster c{};
        const int idx[3] = {cz, cy, cx};
        for (int a = 0; a < 3; ++a)
          c.pos[a] = (idx[a] + 0.5) * double(dims.e[a]) / counts[a] - 0.5;
        const auto pz = std::int64_t(std::llround(c.pos[0]));
        const auto py = std::int64_t(std::llround(c.pos[1]));
        const auto px = std::int64_t(std::llround(c.pos[2]));
        c.intensity = img[std::size_t(flat(
            std::clamp<std::int64_t>(pz, 0, dims.e[0] - 1),
            std::clamp<std::int64_t>(py, 0, dims.e[1] - 1),
            std::clamp<std::int64_t>(px, 0, dims.e[2] - 1)))];
        clusters.push_back(c);
      }
  const int ncl = int(clusters.size());

  std::vector<std::int32_t> labels(std::size_t(npix), 0);
  const double m2_over_s2 = (compactness * compactness) / (grid_s * grid_s);

  // Per-pixel assignment to the best cluster whose 2S window covers it;
  // candidates are found through a cluster bucket grid of cell size S.
  const std::int64_t cells[3] = {
      std::max<std::int64_t>(1, std::int64_t(std::ceil(dims.e[0] / grid_s))),
      std::max<std::int64_t>(1, std::int64_t(std::ceil(dims.e[1] / grid_s))),
      std::max<std::int64_t>(1, std::int64_t(std::ceil(dims.e[2] / grid_s)))};
  auto cell_of = [&](const double* pos, std::int64_t* cc) {
    for (int a = 0; a < 3; ++a) {
      auto v = std::int64_t(pos[a] / grid_s);
      cc[a] = std::clamp<std::int64_t>(v, 0, cells[a] - 1);
    }
  };

  for (int iter = 0; iter < iterations; ++iter) {
    std::vector<std::vector<int>> buckets(
        std::size_t(cells[0] * cells[1] * cells[2]));
    for (int c = 0; c < ncl; ++c) {
      std::int64_t cc[3];
      cell_of(clusters[std::size_t(c)].pos, cc);
      buckets[std::size_t((cc[0] * cells[1] + cc[1]) * cells[2] + cc[2])]
          .push_back(c);
    }

    parallel_for(npix, [&](std::int64_t b, std::int64_t e) {
      for (std::int64_t p = b; p < e; ++p) {
        const std::int64_t pz = p / (dims.e[1] * dims.e[2]);
        const std::int64_t py = (p / dims.e[2]) % dims.e[1];
        const std::int64_t px = p % dims.e[2];
        const double pv = img[std::size_t(p)];
        double best = 1e300;
        int best_c = labels[std::size_t(p)];
        std::int64_t pc[3];
        const double ppos[3] = {double(pz), double(py), double(px)};
        cell_of(ppos, pc);
        // search radius of 2 bucket cells covers the 2S x 2S windows
        for (std::int64_t dz = -2; dz <= 2; ++dz) {
          const std::int64_t z = pc[0] + dz;
          if (z < 0 || z >= cells[0]) continue;
          for (std::int64_t dy = -2; dy <= 2; ++dy) {
            const std::int64_t y = pc[1] + dy;
            if (y < 0 || y >= cells[1]) continue;
            for (std::int64_t dx = -2; dx <= 2; ++dx) {
              const std::int64_t x = pc[2] + dx;
              if (x < 0 || x >= cells[2]) continue;
              for (int c :
                   buckets[std::size_t((z * cells[1] + y) * cells[2] + x)]) {
                const Cluster& cl = clusters[std::size_t(c)];
                if (std::fabs(ppos[0] - cl.pos[0]) > grid_s ||
                    std::fabs(ppos[1] - cl.pos[1]) > grid_s ||
                    std::fabs(ppos[2] - cl.pos[2]) > grid_s)
                  continue;
                const double di = pv - cl.intensity;
                double ds = 0.0;
                for (int a = 0; a < 3; ++a) {
                  const double dd = ppos[a] - cl.pos[a];
                  ds += dd * dd;
                }
                const double dist = di * di + ds * m2_over_s2;
                if (dist < best || (dist == best && c < best_c)) {
                  best = dist;
                  best_c = c;
                }
              }
            }
          }
        }
        if (best == 1e300) {
          // no window covers this pixel; fall back to the spatially nearest
          double nearest = 1e300;
          for (int c = 0; c < ncl; ++c) {
            const Cluster& cl = clusters[std::size_t(c)];
            double ds = 0.0;
            for (int a = 0; a < 3; ++a) {
              const double dd = ppos[a] - cl.pos[a];
              ds += dd * dd;
            }
            if (ds < nearest) {
              nearest = ds;
              best_c = c;
            }
          }
        }
        labels[std::size_t(p)] = best_c;
      }
    });

    // recompute centers
    std::vector<Cluster> next(std::size_t(ncl), Cluster{});
    for (std::int64_t p = 0; p < npix; ++p) {
      Cluster& c = next[std::size_t(labels[std::size_t(p)])];
      c.pos[0] += double(p / (dims.e[1] * dims.e[2]));
      c.pos[1] += double((p / dims.e[2]) % dims.e[1]);
      c.pos[2] += double(p % dims.e[2]);
      c.intensity += img[std::size_t(p)];
      c.size += 1;
    }
    for (int c = 0; c < ncl; ++c) {
      if (next[std::size_t(c)].size == 0) continue;  // keep previous center
      const double inv = 1.0 / double(next[std::size_t(c)].size);
      for (int a = 0; a < 3; ++a)
        clusters[std::size_t(c)].pos[a] = next[std::size_t(c)].pos[a] * inv;
      clusters[std::size_t(c)].intensity = next[std::size_t(c)].intensity * inv;
    }
  }

  // Connectivity pass: sequential flood fill; fragments smaller than a
  // quarter of the expected segment size are absorbed by the previously
  // visited neighbouring segment.
  const std::int64_t min_size = std::max<std::int64_t>(1, npix / ncl / 4);
  std::vector<std::int32_t> out(std::size_t(npix), -1);
  std::vector<std::int64_t> stack;
  int next_label = 0;
  for (std::int64_t p0 = 0; p0 < npix; ++p0) {
    if (out[std::size_t(p0)] >= 0) continue;
    // label of a previously processed neighbour, for possible merging
    std::int32_t adjacent = -1;
    stack.assign(1, p0);
    out[std::size_t(p0)] = next_label;
    std::vector<std::int64_t> component{p0};
    const std::int32_t want = labels[std::size_t(p0)];
    while (!stack.empty()) {
      const std::int64_t p = stack.back();
      stack.pop_back();
      const std::int64_t pz = p / (dims.e[1] * dims.e[2]);
      const std::int64_t py = (p / dims.e[2]) % dims.e[1];
      const std::int64_t px = p % dims.e[2];
      const std::int64_t nb[6][3] = {{pz - 1, py, px}, {pz + 1, py, px},
                                     {pz, py - 1, px}, {pz, py + 1, px},
                                     {pz, py, px - 1}, {pz, py, px + 1}};
      for (const auto& n : nb) {
        if (n[0] < 0 || n[0] >= dims.e[0] || n[1] < 0 || n[1] >= dims.e[1] ||
            n[2] < 0 || n[2] >= dims.e[2])
          continue;
        const std::int64_t q = flat(n[0], n[1], n[2]);
        if (labels[std::size_t(q)] == want) {
          if (out[std::size_t(q)] < 0) {
            out[std::size_t(q)] = next_label;
            component.push_back(q);
            stack.push_back(q);
          }
        } else if (out[std::size_t(q)] >= 0 &&
                   out[std::size_t(q)] != next_label) {
          adjacent = out[std::size_t(q)];
        }
      }
    }
    if (std::int64_t(component.size()) < min_size && adjacent >= 0) {
      for (std::int64_t q : component) out[std::size_t(q)] = adjacent;
    } else {
      ++next_label;
    }
  }

  SegmentLabels result;
  result.labels = std::move(out);
  result.extents = image.shape();
  result.segment_count = next_label;
  return result;
}

Graph build_graph(const SegmentLabels& labels, const Tensor& image,
                  const GraphBuildOptions& options) {
  const Dims dims = image_dims(image);
  if (labels.extents != image.shape())
    throw DimensionError("build_graph: labels not congruent with image");
  const std::int64_t npix = dims.count();
  const int n = labels.segment_count;
  if (n < 1) throw ConfigError("build_graph: empty segmentation");
  if (options.k >= n)
    throw ConfigError("build_graph: k must be below the node count");
  const int rank = image.rank();

  std::vector<double> sum_intensity(std::size_t(n), 0.0);
  std::vector<double> sum_pos(std::size_t(n) * 3, 0.0);
  std::vector<std::int64_t> size(std::size_t(n), 0);
  const auto img = image.data();
  for (std::int64_t p = 0; p < npix; ++p) {
    const auto l = std::size_t(labels.labels[std::size_t(p)]);
    sum_intensity[l] += img[std::size_t(p)];
    sum_pos[l * 3 + 0] += double(p / (dims.e[1] * dims.e[2]));
    sum_pos[l * 3 + 1] += double((p / dims.e[2]) % dims.e[1]);
    sum_pos[l * 3 + 2] += double(p % dims.e[2]);
    size[l] += 1;
  }

  Graph g;
  g.centroids.resize(std::size_t(n));
  const int f = options.include_centroids ? 2 + rank : 2;
  std::vector<double> feat(std::size_t(n) * std::size_t(f));
  for (int i = 0; i < n; ++i) {
    if (size[std::size_t(i)] == 0)
      throw Error("build_graph: segment without pixels");
    const double inv = 1.0 / double(size[std::size_t(i)]);
    std::array<double, 3> c{};
    for (int a = 0; a < 3; ++a)
      c[std::size_t(a)] = sum_pos[std::size_t(i) * 3 + std::size_t(a)] * inv;
    g.centroids[std::size_t(i)] = c;
    double* row = feat.data() + std::size_t(i) * std::size_t(f);
    row[0] = sum_intensity[std::size_t(i)] * inv;
    row[1] = double(size[std::size_t(i)]) / double(npix);
    if (options.include_centroids) {
      // normalized to [0, 1] per axis; axes ordered x, y(, z) fastest-first
      for (int a = 0; a < rank; ++a) {
        const int axis = 2 - a;  // x, then y, then z
        const double extent = double(dims.e[axis]);
        row[2 + a] =
            extent > 1 ? c[std::size_t(axis)] / (extent - 1.0) : 0.0;
      }
    }
  }
  g.node_features = Tensor::from({n, f}, std::move(feat));

  // symmetrized k-NN over Euclidean centroid distance, ties to lower index
  std::vector<std::pair<double, int>> cand;
  std::vector<std::pair<int, int>> pairs;
  for (int u = 0; u < n; ++u) {
    cand.clear();
    for (int v = 0; v < n; ++v) {
      if (v == u) continue;
      double d2 = 0.0;
      for (int a = 0; a < 3; ++a) {
        const double dd = g.centroids[std::size_t(u)][std::size_t(a)] -
                          g.centroids[std::size_t(v)][std::size_t(a)];
        d2 += dd * dd;
      }
      cand.emplace_back(d2, v);
    }
    std::partial_sort(cand.begin(), cand.begin() + options.k, cand.end());
    for (int j = 0; j < options.k; ++j) {
      const int v = cand[std::size_t(j)].second;
      pairs.emplace_back(std::min(u, v), std::max(u, v));
    }
  }
  std::sort(pairs.begin(), pairs.end());
  pairs.erase(std::unique(pairs.begin(), pairs.end()), pairs.end());
  g.edges.reserve(pairs.size());
  for (auto [u, v] : pairs) {
    double d2 = 0.0;
    for (int a = 0; a < 3; ++a) {
      const double dd = g.centroids[std::size_t(u)][std::size_t(a)] -
                        g.centroids[std::size_t(v)][std::size_t(a)];
      d2 += dd * dd;
    }
    g.edges.push_back({u, v, 1.0 / (1.0 + std::sqrt(d2))});
  }
  return g;
}

GraphMetrics graph_metrics(const Graph& graph) {
  const int n = int(graph.node_features.dim(0));
  if (n < 1) throw InputError("graph_metrics: empty graph");
  std::vector<std::vector<int>> adj(static_cast<std::size_t>(n));
  for (const auto& e : graph.edges) {
    adj[std::size_t(e.u)].push_back(e.v);
    adj[std::size_t(e.v)].push_back(e.u);
  }
  for (auto& a : adj) std::sort(a.begin(), a.end());

  GraphMetrics m;
  m.avg_degree = 2.0 * double(graph.edges.size()) / double(n);

  double clustering = 0.0;
  for (int u = 0; u < n; ++u) {
    const auto& nb = adj[std::size_t(u)];
    const int d = int(nb.size());
    if (d < 2) continue;
    int links = 0;
    for (int i = 0; i < d; ++i)
      for (int j = i + 1; j < d; ++j) {
        const auto& nv = adj[std::size_t(nb[std::size_t(i)])];
        if (std::binary_search(nv.begin(), nv.end(), nb[std::size_t(j)]))
          ++links;
      }
    clustering += 2.0 * double(links) / (double(d) * double(d - 1));
  }
  m.avg_clustering = clustering / double(n);

  // degree assortativity: Pearson correlation over ordered edge endpoints
  double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
  const double cnt = 2.0 * double(graph.edges.size());
  if (cnt == 0) return m;
  for (const auto& e : graph.edges) {
    const double du = double(adj[std::size_t(e.u)].size());
    const double dv = double(adj[std::size_t(e.v)].size());
    sx += du + dv;
    sy += du + dv;
    sxx += du * du + dv * dv;
    syy += du * du + dv * dv;
    sxy += 2.0 * du * dv;
  }
  const double vx = sxx / cnt - (sx / cnt) * (sx / cnt);
  const double vy = syy / cnt - (sy / cnt) * (sy / cnt);
  if (vx <= 1e-12 || vy <= 1e-12) {
    m.assortativity = std::numeric_limits<double>::quiet_NaN();
    m.assortativity_defined = false;
  } else {
    m.assortativity =
        (sxy / cnt - (sx / cnt) * (sy / cnt)) / std::sqrt(vx * vy);
    m.assortativity_defined = true;
  }
  return m;
}

CohortDifference cohort_difference(std::span<const Graph> cohort_a,
                                   std::span<const Graph> cohort_b) {
  if (cohort_a.empty() || cohort_b.empty())
    throw InputError("cohort_difference: cohorts must be non-empty");
  const auto arity = cohort_a[0].node_features.dim(1);
  auto mean_features = [&](std::span<const Graph> cohort) {
    std::vector<double> acc(std::size_t(arity), 0.0);
    for (const auto& g : cohort) {
      if (g.node_features.dim(1) != arity)
        throw DimensionError("cohort_difference: feature arity mismatch");
      const auto nn = g.node_features.dim(0);
      const auto d = g.node_features.data();
      for (std::int64_t j = 0; j < arity; ++j) {
        double s = 0.0;
        for (std::int64_t i = 0; i < nn; ++i)
          s += d[std::size_t(i * arity + j)];
        acc[std::size_t(j)] += s / double(nn);
      }
    }
    for (auto& v : acc) v /= double(cohort.size());
    return acc;
  };
  const auto ma = mean_features(cohort_a);
  const auto mb = mean_features(cohort_b);
  CohortDifference out;
  double d2 = 0.0;
  for (std::int64_t j = 0; j < arity; ++j) {
    const double dd = ma[std::size_t(j)] - mb[std::size_t(j)];
    d2 += dd * dd;
  }
  out.feature_difference = std::sqrt(d2);

  double ea = 0, eb = 0, na = 0, nb = 0;
  for (const auto& g : cohort_a) {
    ea += double(g.edges.size());
    na += double(g.node_features.dim(0));
  }
  for (const auto& g : cohort_b) {
    eb += double(g.edges.size());
    nb += double(g.node_features.dim(0));
  }
  out.edge_count_difference = (ea + eb) > 0 ? std::fabs(ea - eb) / (ea + eb) : 0.0;
  out.node_count_difference = (na + nb) > 0 ? std::fabs(na - nb) / (na + nb) : 0.0;
  return out;
}

void save_graph_json(const Graph& graph, const GraphProvenance& provenance,
                     const std::string& path) {
  nlohmann::json j;
  const auto n = graph.node_features.dim(0);
  const auto f = graph.node_features.dim(1);
  nlohmann::json features = nlohmann::json::array();
  for (std::int64_t i = 0; i < n; ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (std::int64_t c = 0; c < f; ++c)
      row.push_back(graph.node_features.at({i, c}));
    features.push_back(std::move(row));
  }
  j["node_features"] = std::move(features);
  nlohmann::json edges = nlohmann::json::array();
  for (const auto& e : graph.edges)
    edges.push_back({e.u, e.v, e.weight});
  j["edges"] = std::move(edges);
  nlohmann::json centroids = nlohmann::json::array();
  for (const auto& c : graph.centroids)
    centroids.push_back({c[0], c[1], c[2]});
  j["centroids"] = std::move(centroids);
  j["provenance"] = {{"source_image", provenance.source_image},
                     {"segment_count", provenance.segment_count},
                     {"k", provenance.k},
                     {"include_centroids", provenance.include_centroids}};
  std::ofstream os(path);
  if (!os) throw IoError("cannot write graph json: " + path);
  os << j.dump() << "\n";
}

Graph load_graph_json(const std::string& path,
                      GraphProvenance* provenance_out) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read graph json: " + path);
  nlohmann::json j = nlohmann::json::parse(is);
  Graph g;
  const auto& features = j.at("node_features");
  const auto n = std::int64_t(features.size());
  if (n == 0) throw InputError("graph json has no nodes: " + path);
  const auto f = std::int64_t(features[0].size());
  std::vector<double> data;
  data.reserve(std::size_t(n * f));
  for (const auto& row : features) {
    if (std::int64_t(row.size()) != f)
      throw InputError("ragged node feature matrix in " + path);
    for (const auto& v : row) data.push_back(v.get<double>());
  }
  g.node_features = Tensor::from({n, f}, std::move(data));
  for (const auto& e : j.at("edges")) {
    g.edges.push_back(
        {e[0].get<int>(), e[1].get<int>(), e[2].get<double>()});
  }
  for (const auto& c : j.at("centroids")) {
    g.centroids.push_back(
        {c[0].get<double>(), c[1].get<double>(), c[2].get<double>()});
  }
  if (provenance_out && j.contains("provenance")) {
    const auto& p = j["provenance"];
    provenance_out->source_image = p.value("source_image", std::string());
    provenance_out->segment_count = p.value("segment_count", 0);
    provenance_out->k = p.value("k", 0);
    provenance_out->include_centroids = p.value("include_centroids", true);
  }
  return g;
}

CsrAdjacency normalized_adjacency(const Graph& graph, bool use_weights) {
  const int n = int(graph.node_features.dim(0));
  std::vector<std::vector<std::pair<int, double>>> rows(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) rows[std::size_t(i)].emplace_back(i, 1.0);
  for (const auto& e : graph.edges) {
    const double w = use_weights ? e.weight : 1.0;
    rows[std::size_t(e.u)].emplace_back(e.v, w);
    rows[std::size_t(e.v)].emplace_back(e.u, w);
  }
  std::vector<double> degree(static_cast<std::size_t>(n), 0.0);
  for (int i = 0; i < n; ++i)
    for (auto [j, w] : rows[std::size_t(i)]) degree[std::size_t(i)] += w;

  CsrAdjacency adj;
  adj.n = n;
  adj.row_ptr.assign(std::size_t(n) + 1, 0);
  for (int i = 0; i < n; ++i) {
    auto& r = rows[std::size_t(i)];
    std::sort(r.begin(), r.end());
    adj.row_ptr[std::size_t(i) + 1] = adj.row_ptr[std::size_t(i)] + int(r.size());
    for (auto [j, w] : r) {
      adj.col.push_back(j);
      adj.val.push_back(w / std::sqrt(degree[std::size_t(i)] *
                                      degree[std::size_t(j)]));
    }
  }
  return adj;
}

}  // namespace kanlab
