#include "kanlab/bspline.hpp"

#include <algorithm>
#include <cmath>

#include "kanlab/mathx.hpp"

namespace kanlab {

SplineGrid SplineGrid::make(int control_count, int degree, double lo,
                            double hi, int channels) {
  if (degree < 0 || control_count <= degree)
    throw ConfigError("spline grid needs control_count > degree >= 0");
  if (!(lo < hi)) throw ConfigError("spline grid needs lo < hi");
  if (channels < 1) throw ConfigError("spline grid needs channels >= 1");
  SplineGrid g;
  g.degree_ = degree;
  g.control_count_ = control_count;
  g.lo_ = lo;
  g.hi_ = hi;
  const int n = control_count + degree + 1;  // n = k + d + 1
  const int interior_spans = control_count - degree;
  g.step_ = (hi - lo) / interior_spans;
  g.knots_.resize(std::size_t(n));
  for (int i = 0; i < n; ++i)
    g.knots_[std::size_t(i)] = lo + (i - degree) * g.step_;
  g.control_points_ =
      Tensor::zeros({std::int64_t(channels), std::int64_t(control_count)});
  return g;
}

void SplineGrid::set_control_points(Tensor t) {
  if (t.rank() != 2 || int(t.dim(1)) != control_count_)
    throw DimensionError("control points must be [channels x k]");
  control_points_ = std::move(t);
}

double SplineGrid::greville(int i) const {
  if (degree_ == 0)  // midpoint of span i
    return 0.5 * (knots_[std::size_t(i)] + knots_[std::size_t(i + 1)]);
  double s = 0.0;
  for (int j = 1; j <= degree_; ++j) s += knots_[std::size_t(i + j)];
  return s / degree_;
}

void SplineGrid::init_identity(Rng* rng, double noise_amp) {
  auto d = control_points_.mutable_data();
  const int ch = channels();
  for (int c = 0; c < ch; ++c) {
    for (int i = 0; i < control_count_; ++i) {
      double v = greville(i);
      if (rng && noise_amp > 0.0) v += rng->uniform(-noise_amp, noise_amp);
      d[std::size_t(c * control_count_ + i)] = v;
    }
  }
}

int SplineKernel::find_span(const SplineGrid& g, double x) {
  // uniform knots: direct index, clamped to the valid interior spans
  const int lo_span = g.degree_;
  const int hi_span = g.knot_count() - g.degree_ - 2;
  int s = g.degree_ + int(std::floor((x - g.lo_) / g.step_));
  return std::clamp(s, lo_span, hi_span);
}

// Triangular de Boor scheme. nvals receives the d+1 nonzero basis values
// N_{first..first+d, d}(x); dvals (optional) their first derivatives.
void SplineKernel::basis_at(const SplineGrid& g, double x, double* nvals,
                            double* dvals, int* first) {
  const int d = g.degree_;
  const int s = find_span(g, x);
  *first = s - d;
  const auto& t = g.knots_;
  double left[16], right[16];
  nvals[0] = 1.0;
  double lower[16];  // degree d-1 values, for derivatives
  for (int j = 1; j <= d; ++j) {
    if (dvals && j == d) std::copy(nvals, nvals + d, lower);
    left[j] = x - t[std::size_t(s + 1 - j)];
    right[j] = t[std::size_t(s + j)] - x;
    double saved = 0.0;
    for (int r = 0; r < j; ++r) {
      const double denom = right[r + 1] + left[j - r];
      const double temp = nvals[r] / denom;
      nvals[r] = saved + right[r + 1] * temp;
      saved = left[j - r] * temp;
    }
    nvals[j] = saved;
  }
  if (!dvals) return;
  if (d == 0) {
    dvals[0] = 0.0;
    return;
  }
  // N'_{i,d} = d * (N_{i,d-1}/(t[i+d]-t[i]) - N_{i+1,d-1}/(t[i+d+1]-t[i+1]))
  // where the degree-(d-1) functions active on span s are indices s-d+1..s.
  auto low = [&](int i) -> double {
    if (i < s - d + 1 || i > s) return 0.0;
    return lower[i - (s - d + 1)];
  };
  for (int r = 0; r <= d; ++r) {
    const int i = s - d + r;
    const double a = low(i) / (t[std::size_t(i + d)] - t[std::size_t(i)]);
    const double b =
        low(i + 1) / (t[std::size_t(i + d + 1)] - t[std::size_t(i + 1)]);
    dvals[r] = d * (a - b);
  }
}

BasisValues basis_eval(const SplineGrid& grid, double x) {
  if (!(x >= grid.domain_lo() && x <= grid.domain_hi()))
    throw OutOfDomainError("basis_eval: x outside interior domain (extend first)");
  BasisValues out;
  out.values.assign(std::size_t(grid.control_count()), 0.0);
  double nv[16];
  int first = 0;
  SplineKernel::basis_at(grid, x, nv, nullptr, &first);
  out.active_begin = first;
  out.active_end = first + grid.degree() + 1;
  for (int r = 0; r <= grid.degree(); ++r)
    out.values[std::size_t(first + r)] = nv[r];
  return out;
}

double SplineGrid::eval_scalar(double x, int channel) const {
  if (!(x >= lo_ && x <= hi_))
    throw OutOfDomainError("spline eval: x outside interior domain");
  double nv[16];
  int first = 0;
  SplineKernel::basis_at(*this, x, nv, nullptr, &first);
  const auto c = control_points_.data();
  double acc = 0.0;
  for (int r = 0; r <= degree_; ++r)
    acc += c[std::size_t(channel * control_count_ + first + r)] * nv[r];
  return acc;
}

namespace {

// Shared implementation: channel_of(i) maps a flat element index to the
// control-point row that activates it.
template <class ChannelOf>
Tensor spline_eval_impl(const SplineGrid& grid, const Tensor& x,
                        ChannelOf channel_of) {
  const auto n = x.numel();
  const auto xd = x.data();
  const double lo = grid.domain_lo(), hi = grid.domain_hi();
  for (std::int64_t i = 0; i < n; ++i) {
    const double v = xd[std::size_t(i)];
    if (!(v >= lo && v <= hi))
      throw OutOfDomainError("spline_eval: input outside grid domain");
  }
  const int k = grid.control_count();
  const int d = grid.degree();
  const Tensor& cp = grid.control_points();
  const auto cpd = cp.data();
  std::vector<double> out(static_cast<std::size_t>(n));
  parallel_for(n, [&](std::int64_t b, std::int64_t e) {
    double nv[16];
    int first;
    for (std::int64_t i = b; i < e; ++i) {
      SplineKernel::basis_at(grid, xd[std::size_t(i)], nv, nullptr, &first);
      const std::size_t row = std::size_t(channel_of(i)) * std::size_t(k);
      double acc = 0.0;
      for (int r = 0; r <= d; ++r)
        acc += cpd[row + std::size_t(first + r)] * nv[r];
      out[std::size_t(i)] = acc;
    }
  });
  Tensor result = Tensor::from(x.shape(), std::move(out));
  // Basis values are recomputed in the backward pass instead of stored; the
  // activation tensors dominate memory at training scale.
  SplineGrid geom = grid;  // copies knot geometry, shares the control tensor
  Tensor xc = x, cc = cp, rc = result;
  maybe_record({x, cp}, result, [=]() mutable {
    auto g = rc.grad();
    const bool dx = xc.tracked();
    const bool dc = cc.tracked();
    if (!dx && !dc) return;
    auto xg = dx ? xc.grad() : std::span<double>();
    auto cg = dc ? cc.grad() : std::span<double>();
    const auto xv = xc.data();
    const auto cv = cc.data();
    const int kk = geom.control_count();
    const int dd = geom.degree();
    // chunked by element with per-chunk control-grad partials, combined in
    // chunk order for bit-stable accumulation
    const std::int64_t nel = xc.numel();
    const std::int64_t nchunks = std::min<std::int64_t>(nel, 16);
    std::vector<std::vector<double>> cpart;
    if (dc)
      cpart.assign(std::size_t(nchunks),
                   std::vector<double>(cv.size(), 0.0));
    parallel_chunks(nel, nchunks, [&](std::int64_t chunk, std::int64_t b,
                                      std::int64_t e) {
      double nv[16], dv[16];
      int first;
      for (std::int64_t i = b; i < e; ++i) {
        const double gi = g[std::size_t(i)];
        if (gi == 0.0) continue;
        SplineKernel::basis_at(geom, xv[std::size_t(i)], nv, dv, &first);
        const std::size_t row = std::size_t(channel_of(i)) * std::size_t(kk);
        if (dx) {
          double acc = 0.0;
          for (int r = 0; r <= dd; ++r)
            acc += cv[row + std::size_t(first + r)] * dv[r];
          xg[std::size_t(i)] += acc * gi;
        }
        if (dc) {
          auto& part = cpart[std::size_t(chunk)];
          for (int r = 0; r <= dd; ++r)
            part[row + std::size_t(first + r)] += nv[r] * gi;
        }
      }
    });
    if (dc) {
      for (const auto& part : cpart)
        for (std::size_t j = 0; j < part.size(); ++j) cg[j] += part[j];
    }
  });
  return result;
}

}  // namespace

Tensor spline_eval(const SplineGrid& grid, const Tensor& x, int channel) {
  if (channel < 0 || channel >= grid.channels())
    throw DimensionError("spline_eval: channel out of range");
  return spline_eval_impl(grid, x, [channel](std::int64_t) { return channel; });
}

Tensor spline_eval_channelwise(const SplineGrid& grid, const Tensor& x) {
  if (x.rank() < 2) throw DimensionError("spline_eval_channelwise: need [batch x channels x ...]");
  const std::int64_t channels = x.dim(1);
  if (channels != grid.channels())
    throw DimensionError("spline_eval_channelwise: channel count mismatch");
  std::int64_t spatial = 1;
  for (int i = 2; i < x.rank(); ++i) spatial *= x.dim(i);
  return spline_eval_impl(grid, x, [channels, spatial](std::int64_t i) {
    return (i / spatial) % channels;
  });
}

SplineGrid extend_grid(const SplineGrid& grid, double observed_min,
                       double observed_max) {
  if (!std::isfinite(observed_min) || !std::isfinite(observed_max))
    throw InputError("extend_grid: observed bounds must be finite");
  if (grid.covers(observed_min, observed_max)) return grid;

  double lo = grid.domain_lo();
  double hi = grid.domain_hi();
  while (observed_min < lo || observed_max > hi) {
    const double width = hi - lo;
    if (observed_min < lo) lo -= 0.25 * width;
    if (observed_max > hi) hi += 0.25 * width;
  }

  const int k = grid.control_count();
  const int ch = grid.channels();
  SplineGrid wider = SplineGrid::make(k, grid.degree(), lo, hi, ch);

  // Weighted least-squares refit: sample the old spline densely over the
  // new domain, holding values constant beyond the old domain. Samples in
  // the nested (old) domain carry almost all of the weight so the refit
  // reproduces the existing activation there; the lightly weighted tail
  // samples anchor the constant extrapolation. One normal-equation solve
  // per channel with a shared Gram matrix.
  const int samples = 512;
  const double tail_weight = 1e-3;
  std::vector<double> basis(std::size_t(samples) * std::size_t(k), 0.0);
  std::vector<double> xs(static_cast<std::size_t>(samples));
  for (int j = 0; j < samples; ++j) {
    const double x = lo + (hi - lo) * (double(j) / (samples - 1));
    xs[std::size_t(j)] = x;
    const bool nested = x >= grid.domain_lo() && x <= grid.domain_hi();
    const double sw = nested ? 1.0 : std::sqrt(tail_weight);
    double nv[16];
    int first;
    SplineKernel::basis_at(wider, x, nv, nullptr, &first);
    for (int r = 0; r <= grid.degree(); ++r)
      basis[std::size_t(j) * std::size_t(k) + std::size_t(first + r)] =
          nv[r] * sw;
  }
  std::vector<double> ata(std::size_t(k) * std::size_t(k), 0.0);
  kernels::matmul_tn(basis.data(), basis.data(), ata.data(), samples, k, k,
                     true);

  Tensor controls = Tensor::zeros({std::int64_t(ch), std::int64_t(k)});
  auto cd = controls.mutable_data();
  for (int c = 0; c < ch; ++c) {
    std::vector<double> atg(std::size_t(k), 0.0);
    for (int j = 0; j < samples; ++j) {
      const double x = xs[std::size_t(j)];
      const bool nested = x >= grid.domain_lo() && x <= grid.domain_hi();
      const double sw = nested ? 1.0 : std::sqrt(tail_weight);
      const double xc = std::clamp(x, grid.domain_lo(), grid.domain_hi());
      const double target = grid.eval_scalar(xc, c) * sw;
      for (int i = 0; i < k; ++i)
        atg[std::size_t(i)] +=
            basis[std::size_t(j) * std::size_t(k) + std::size_t(i)] * target;
    }
    const auto sol = mathx::solve_dense(ata, atg, k);
    for (int i = 0; i < k; ++i) cd[std::size_t(c * k + i)] = sol[std::size_t(i)];
  }
  controls.set_requires_grad(grid.control_points().requires_grad());
  wider.set_control_points(std::move(controls));
  return wider;
}

}  // namespace kanlab
