#pragma once

#include <vector>

#include "kanlab/common.hpp"
#include "kanlab/tensor.hpp"

namespace kanlab {

// Basis function values at one point: a dense length-k vector of which at
// most degree+1 entries (the active span) are nonzero.
struct BasisValues {
  std::vector<double> values;
  int active_begin = 0;  // first possibly-nonzero index
  int active_end = 0;    // one past the last
};

// ---------------------------------------------------------------------------
// Uniform B-spline grid with learnable control points. The knot count n obeys
// n = k + d + 1 for k control points of degree d; knots extend d steps beyond
// each side of the interior domain [lo, hi] so that the full basis is
// available everywhere inside it. Control points are stored as a
// [channels x k] tensor so convolutional layers can learn one activation
// shape per output channel.
// ---------------------------------------------------------------------------

class SplineGrid {
 public:
  SplineGrid() = default;  // empty grid; assign a made grid before use
  static SplineGrid make(int control_count, int degree, double lo, double hi,
                         int channels = 1);

  int degree() const { return degree_; }
  int control_count() const { return control_count_; }
  int channels() const { return int(control_points_.dim(0)); }
  int knot_count() const { return int(knots_.size()); }
  const std::vector<double>& knots() const { return knots_; }
  double domain_lo() const { return lo_; }
  double domain_hi() const { return hi_; }
  double step() const { return step_; }
  bool covers(double mn, double mx) const { return mn >= lo_ && mx <= hi_; }

  Tensor& control_points() { return control_points_; }
  const Tensor& control_points() const { return control_points_; }
  void set_control_points(Tensor t);

  // Greville-abscissae coefficients representing f(x) = x on the domain,
  // optionally perturbed by uniform noise in [-amp, amp] (the layer init).
  void init_identity(Rng* rng = nullptr, double noise_amp = 0.0);

  // Greville abscissa of control point i.
  double greville(int i) const;

  // Spline value at x for one channel, no tape participation.
  double eval_scalar(double x, int channel = 0) const;

 private:
  friend BasisValues basis_eval(const SplineGrid&, double);
  friend SplineGrid extend_grid(const SplineGrid&, double, double);
  friend struct SplineKernel;

  int degree_ = 0;
  int control_count_ = 0;
  std::vector<double> knots_;
  double lo_ = 0.0, hi_ = 0.0, step_ = 0.0;
  Tensor control_points_;  // [channels x k]
};

// Basis functions N_{i,d}(x) for all i. x must lie in [lo, hi].
BasisValues basis_eval(const SplineGrid& grid, double x);

// Low-level evaluation of the degree-d basis (and optionally its first
// derivative) on the span containing x. Writes d+1 values; `first` receives
// the index of the first active control point.
struct SplineKernel {
  static void basis_at(const SplineGrid& g, double x, double* nvals,
                       double* dvals, int* first);
  static int find_span(const SplineGrid& g, double x);
};

// Elementwise spline activation B(x) = sum_i c_i N_{i,d}(x) using the control
// points of `channel`; differentiable with respect to x and the control
// points. Every entry of x must lie inside the interior domain.
Tensor spline_eval(const SplineGrid& grid, const Tensor& x, int channel = 0);

// Batched variant for layer activations: x has shape [batch x channels x
// spatial...] and element (b, c, ...) uses control-point row c.
Tensor spline_eval_channelwise(const SplineGrid& grid, const Tensor& x);

// Returns a grid whose interior domain covers [observed_min, observed_max],
// produced by widening the violated side(s) in 25%-of-width increments and
// refitting the control points by least squares against dense samples of the
// old spline (constant-extrapolated beyond the old domain). No-op copy when
// the range is already covered.
SplineGrid extend_grid(const SplineGrid& grid, double observed_min,
                       double observed_max);

}  // namespace kanlab
