#pragma once

#include <optional>
#include <string>
#include <vector>

#include "kanlab/bspline.hpp"
#include "kanlab/graphs.hpp"
#include "kanlab/tensor.hpp"

namespace kanlab {

// ---------------------------------------------------------------------------
// Neural layers. Image tensors are [batch x channels x spatial...] with
// spatial rank 2 or 3. All forward functions record tape nodes when gradients
// are flowing.
// ---------------------------------------------------------------------------

struct ConvLayer {
  Tensor kernel;  // [out_ch x in_ch x k x k (x k)]
  Tensor bias;    // [out_ch]
  int stride = 1;
  int padding = 1;
  int spatial_rank = 2;
};

// Zero-padded cross-correlation; with stride 1, padding 1 and kernel 3 the
// spatial extents are preserved.
Tensor conv_forward(const ConvLayer& layer, const Tensor& x);

struct SplineConvLayer {
  ConvLayer conv;
  SplineGrid grid;  // per-output-channel control points
  Tensor w1;        // scalar mix weight on the spline branch
  Tensor w2;        // scalar mix weight on the silu branch
};

// w1 * spline(conv(x)) + w2 * silu(conv(x)). In training mode the grid is
// extended (a structural event, not differentiated) whenever the conv output
// leaves its domain; in eval mode the frozen grid is applied to inputs
// clamped to the domain, matching the constant extrapolation of the refit.
Tensor splineconv_forward(SplineConvLayer& layer, const Tensor& x,
                          bool training);

struct BatchNormLayer {
  Tensor gamma, beta;  // [channels]
  std::vector<double> running_mean, running_var;
  double momentum = 0.1;
  double epsilon = 1e-5;
};

// Train mode normalizes with batch statistics and updates the running
// estimates; eval mode normalizes with the running estimates. A train-mode
// batch of size 1 normalizes with running statistics while still updating
// them from the sample (variance clamped at epsilon).
Tensor batchnorm_forward(BatchNormLayer& layer, const Tensor& x,
                         bool training);

struct GCNConvLayer {
  Tensor weight;  // [in_features x out_features]
};

// relu(D^(-1/2) A~ D^(-1/2) H W) over a precomputed normalized adjacency.
Tensor gcn_forward(const GCNConvLayer& layer, const CsrAdjacency& adj,
                   const Tensor& h);
// Convenience overload building the adjacency from the graph's edges.
Tensor gcn_forward(const GCNConvLayer& layer, const Graph& graph,
                   const Tensor& h);

// Window 2, stride 2, floor division; extents of size 1 pass through.
Tensor maxpool(const Tensor& x);
// [batch x channels x spatial...] -> [batch x channels]
Tensor global_avg_pool(const Tensor& x);
// Mean over nodes: [nodes x features] -> [1 x features]
Tensor global_mean_pool_nodes(const Tensor& h);
// x [batch x in] * w [in x out] + b [out]
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);
// Inverted dropout; identity in eval mode.
Tensor dropout(const Tensor& x, double p, bool training, Rng& rng);

// ---------------------------------------------------------------------------
// Model assembly
// ---------------------------------------------------------------------------

enum class Family { cnn, convkan, gcn };
enum class Dimensionality { d2, d3 };

std::string family_name(Family f);
std::string dimensionality_name(Dimensionality d);
Family family_from(const std::string& s);
Dimensionality dimensionality_from(const std::string& s);

struct ModelConfig {
  Family family = Family::cnn;
  Dimensionality dim = Dimensionality::d2;
  std::vector<int> channels;     // conv filter plan / gcn hidden widths
  double dropout_rate = 0.5;
  int head_hidden = 64;
  int num_classes = 2;
  int in_channels = 1;           // image channels (cnn/convkan)
  int node_features = 4;         // gcn input feature arity
  int spline_control_points = 6;
  int spline_degree = 3;
  double spline_lo = -1.0, spline_hi = 1.0;

  // Reference layer plans: cnn 32/64/128/256 (2D and 3D), convkan 32/64/128
  // (2D) or 32/64/128/256 (3D) with dropout 0.5; gcn 4 layers of 64 hidden
  // channels with dropout 0.3.
  static ModelConfig preset(Family family, Dimensionality dim);
};

struct Param {
  std::string name;
  Tensor value;
};

class Model {
 public:
  Model(ModelConfig config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  std::uint64_t seed() const { return seed_; }

  // Image families. x: [batch x in_channels x spatial...]. Returns logits
  // [batch x num_classes].
  Tensor forward_image(const Tensor& x, bool training, Rng* dropout_rng);
  // Graph family. Returns logits [1 x num_classes].
  Tensor forward_graph(const CsrAdjacency& adj, const Tensor& features,
                       bool training, Rng* dropout_rng);

  std::vector<Param> parameters();  // stable order and names
  std::vector<double> snapshot_parameters();
  void restore_parameters(const std::vector<double>& flat);

  // Checkpoint: JSON descriptor plus one tensor blob per parameter.
  void save_checkpoint(const std::string& dir,
                       const std::string& extra_json_fields) const;
  static Model load_checkpoint(const std::string& dir);

 private:
  friend struct ModelIo;
  struct Block {
    bool spline = false;
    ConvLayer conv;
    std::optional<SplineConvLayer> sconv;
    BatchNormLayer bn;
  };
  ModelConfig config_;
  std::uint64_t seed_ = 0;
  std::vector<Block> blocks_;          // cnn / convkan
  std::vector<GCNConvLayer> gcn_layers_;
  Tensor fc1_w_, fc1_b_;  // hidden head (cnn/convkan)
  Tensor fc2_w_, fc2_b_;  // classification layer (all families)
  void init_params();
};

// Generic model entry point mirroring the per-family forwards.
Tensor model_logits_image(Model& model, const Tensor& x, bool training,
                          Rng* rng);

}  // namespace kanlab
