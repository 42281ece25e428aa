#include "kanlab/layers.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include <json.hpp>

namespace kanlab {

namespace {

struct ConvGeom {
  int rank;                 // spatial rank
  std::int64_t batch, cin, cout, k;
  std::int64_t in[3] = {1, 1, 1};   // input spatial extents
  std::int64_t out[3] = {1, 1, 1};  // output spatial extents
  std::int64_t rows;                // cin * k^rank
  std::int64_t positions;           // product of out extents
  int stride, pad;
};

ConvGeom conv_geometry(const ConvLayer& layer, const Tensor& x) {
  const int r = layer.spatial_rank;
  if (r != 2 && r != 3) throw DimensionError("conv: spatial rank must be 2 or 3");
  if (layer.kernel.rank() != r + 2)
    throw DimensionError("conv: kernel rank mismatch");
  if (x.rank() != r + 2)
    throw DimensionError("conv: input must be [batch x channels x spatial]");
  ConvGeom g;
  g.rank = r;
  g.batch = x.dim(0);
  g.cin = x.dim(1);
  g.cout = layer.kernel.dim(0);
  if (layer.kernel.dim(1) != g.cin)
    throw DimensionError("conv: input channel count " + std::to_string(g.cin) +
                         " does not match kernel " +
                         std::to_string(layer.kernel.dim(1)));
  g.k = layer.kernel.dim(2);
  for (int i = 0; i < r; ++i) {
    if (layer.kernel.dim(2 + i) != g.k)
      throw DimensionError("conv: kernel must be cubic in its spatial extents");
    g.in[i] = x.dim(2 + i);
  }
  g.stride = layer.stride;
  g.pad = layer.padding;
  g.rows = g.cin;
  g.positions = 1;
  for (int i = 0; i < r; ++i) {
    g.out[i] = (g.in[i] + 2 * g.pad - g.k) / g.stride + 1;
    if (g.out[i] < 1) throw DimensionError("conv: output extent below 1");
    g.rows *= g.k;
    g.positions *= g.out[i];
  }
  return g;
}

// col[(c * k^rank + offset), position] = x[c, input coords], zero outside.
void im2col(const ConvGeom& g, const double* x, double* col) {
  const std::int64_t k = g.k;
  std::memset(col, 0,
              std::size_t(g.rows * g.positions) * sizeof(double));
  if (g.rank == 2) {
    for (std::int64_t c = 0; c < g.cin; ++c) {
      const double* xc = x + c * g.in[0] * g.in[1];
      for (std::int64_t ky = 0; ky < k; ++ky)
        for (std::int64_t kx = 0; kx < k; ++kx) {
          double* row = col + ((c * k + ky) * k + kx) * g.positions;
          for (std::int64_t oy = 0; oy < g.out[0]; ++oy) {
            const std::int64_t iy = oy * g.stride + ky - g.pad;
            if (iy < 0 || iy >= g.in[0]) continue;
            const double* xrow = xc + iy * g.in[1];
            double* crow = row + oy * g.out[1];
            for (std::int64_t ox = 0; ox < g.out[1]; ++ox) {
              const std::int64_t ix = ox * g.stride + kx - g.pad;
              if (ix >= 0 && ix < g.in[1]) crow[ox] = xrow[ix];
            }
          }
        }
    }
  } else {
    for (std::int64_t c = 0; c < g.cin; ++c) {
      const double* xc = x + c * g.in[0] * g.in[1] * g.in[2];
      for (std::int64_t kz = 0; kz < k; ++kz)
        for (std::int64_t ky = 0; ky < k; ++ky)
          for (std::int64_t kx = 0; kx < k; ++kx) {
            double* row =
                col + (((c * k + kz) * k + ky) * k + kx) * g.positions;
            for (std::int64_t oz = 0; oz < g.out[0]; ++oz) {
              const std::int64_t iz = oz * g.stride + kz - g.pad;
              if (iz < 0 || iz >= g.in[0]) continue;
              for (std::int64_t oy = 0; oy < g.out[1]; ++oy) {
                const std::int64_t iy = oy * g.stride + ky - g.pad;
                if (iy < 0 || iy >= g.in[1]) continue;
                const double* xrow = xc + (iz * g.in[1] + iy) * g.in[2];
                double* crow = row + (oz * g.out[1] + oy) * g.out[2];
                for (std::int64_t ox = 0; ox < g.out[2]; ++ox) {
                  const std::int64_t ix = ox * g.stride + kx - g.pad;
                  if (ix >= 0 && ix < g.in[2]) crow[ox] = xrow[ix];
                }
              }
            }
          }
    }
  }
}

// Scatter-add of a column matrix back onto the input image.
void col2im_add(const ConvGeom& g, const double* col, double* x) {
  const std::int64_t k = g.k;
  if (g.rank == 2) {
    for (std::int64_t c = 0; c < g.cin; ++c) {
      double* xc = x + c * g.in[0] * g.in[1];
      for (std::int64_t ky = 0; ky < k; ++ky)
        for (std::int64_t kx = 0; kx < k; ++kx) {
          const double* row = col + ((c * k + ky) * k + kx) * g.positions;
          for (std::int64_t oy = 0; oy < g.out[0]; ++oy) {
            const std::int64_t iy = oy * g.stride + ky - g.pad;
            if (iy < 0 || iy >= g.in[0]) continue;
            double* xrow = xc + iy * g.in[1];
            const double* crow = row + oy * g.out[1];
            for (std::int64_t ox = 0; ox < g.out[1]; ++ox) {
              const std::int64_t ix = ox * g.stride + kx - g.pad;
              if (ix >= 0 && ix < g.in[1]) xrow[ix] += crow[ox];
            }
          }
        }
    }
  } else {
    for (std::int64_t c = 0; c < g.cin; ++c) {
      double* xc = x + c * g.in[0] * g.in[1] * g.in[2];
      for (std::int64_t kz = 0; kz < k; ++kz)
        for (std::int64_t ky = 0; ky < k; ++ky)
          for (std::int64_t kx = 0; kx < k; ++kx) {
            const double* row =
                col + (((c * k + kz) * k + ky) * k + kx) * g.positions;
            for (std::int64_t oz = 0; oz < g.out[0]; ++oz) {
              const std::int64_t iz = oz * g.stride + kz - g.pad;
              if (iz < 0 || iz >= g.in[0]) continue;
              for (std::int64_t oy = 0; oy < g.out[1]; ++oy) {
                const std::int64_t iy = oy * g.stride + ky - g.pad;
                if (iy < 0 || iy >= g.in[1]) continue;
                double* xrow = xc + (iz * g.in[1] + iy) * g.in[2];
                const double* crow = row + (oz * g.out[1] + oy) * g.out[2];
                for (std::int64_t ox = 0; ox < g.out[2]; ++ox) {
                  const std::int64_t ix = ox * g.stride + kx - g.pad;
                  if (ix >= 0 && ix < g.in[2]) xrow[ix] += crow[ox];
                }
              }
            }
          }
    }
  }
}

}  // namespace

Tensor conv_forward(const ConvLayer& layer, const Tensor& x) {
  const ConvGeom g = conv_geometry(layer, x);
  Shape out_shape{g.batch, g.cout};
  for (int i = 0; i < g.rank; ++i) out_shape.push_back(g.out[i]);
  Tensor result = Tensor::zeros(out_shape);

  const std::int64_t in_sample = x.numel() / g.batch;
  const std::int64_t out_sample = g.cout * g.positions;
  {
    auto od = result.mutable_data();
    const auto xd = x.data();
    const auto kd = layer.kernel.data();
    const auto bd = layer.bias.data();
    parallel_for(g.batch, [&](std::int64_t b0, std::int64_t b1) {
      std::vector<double> col(std::size_t(g.rows * g.positions));
      for (std::int64_t s = b0; s < b1; ++s) {
        im2col(g, xd.data() + s * in_sample, col.data());
        double* out_s = od.data() + s * out_sample;
        kernels::matmul_nn(kd.data(), col.data(), out_s, g.cout, g.rows,
                           g.positions, false);
        for (std::int64_t c = 0; c < g.cout; ++c) {
          const double bias = bd[std::size_t(c)];
          double* row = out_s + c * g.positions;
          for (std::int64_t p = 0; p < g.positions; ++p) row[p] += bias;
        }
      }
    });
  }

  Tensor xc = x, kernel = layer.kernel, bias = layer.bias, rc = result;
  maybe_record({x, layer.kernel, layer.bias}, result, [=]() mutable {
    const auto gy = rc.grad();
    const auto xd = xc.data();
    const auto kd = kernel.data();
    if (kernel.tracked() || bias.tracked()) {
      const std::int64_t nchunks = std::min<std::int64_t>(g.batch, 16);
      std::vector<std::vector<double>> wpart(
          std::size_t(nchunks),
          std::vector<double>(std::size_t(g.cout * g.rows), 0.0));
      std::vector<std::vector<double>> bpart(
          std::size_t(nchunks),
          std::vector<double>(std::size_t(g.cout), 0.0));
      parallel_chunks(g.batch, nchunks, [&](std::int64_t chunk,
                                            std::int64_t b0, std::int64_t b1) {
        std::vector<double> col(std::size_t(g.rows * g.positions));
        auto& wp = wpart[std::size_t(chunk)];
        auto& bp = bpart[std::size_t(chunk)];
        for (std::int64_t s = b0; s < b1; ++s) {
          const double* gy_s = gy.data() + s * out_sample;
          im2col(g, xd.data() + s * in_sample, col.data());
          kernels::matmul_nt(gy_s, col.data(), wp.data(), g.cout, g.positions,
                             g.rows, true);
          for (std::int64_t c = 0; c < g.cout; ++c) {
            double acc = 0.0;
            const double* row = gy_s + c * g.positions;
            for (std::int64_t p = 0; p < g.positions; ++p) acc += row[p];
            bp[std::size_t(c)] += acc;
          }
        }
      });
      if (kernel.tracked()) {
        auto kg = kernel.grad();
        for (const auto& wp : wpart)
          for (std::size_t i = 0; i < wp.size(); ++i) kg[i] += wp[i];
      }
      if (bias.tracked()) {
        auto bg = bias.grad();
        for (const auto& bp : bpart)
          for (std::size_t i = 0; i < bp.size(); ++i) bg[i] += bp[i];
      }
    }
    if (xc.tracked()) {
      auto xg = xc.grad();
      parallel_for(g.batch, [&](std::int64_t b0, std::int64_t b1) {
        std::vector<double> dcol(std::size_t(g.rows * g.positions));
        for (std::int64_t s = b0; s < b1; ++s) {
          kernels::matmul_tn(kd.data(), gy.data() + s * out_sample,
                             dcol.data(), g.cout, g.rows, g.positions, false);
          col2im_add(g, dcol.data(), xg.data() + s * in_sample);
        }
      });
    }
  });
  return result;
}

Tensor splineconv_forward(SplineConvLayer& layer, const Tensor& x,
                          bool training) {
  Tensor y = conv_forward(layer.conv, x);
  double mn = 1e300, mx = -1e300;
  for (double v : y.data()) {
    if (!std::isfinite(v))
      throw NumericError("splineconv: non-finite activation");
    mn = std::min(mn, v);
    mx = std::max(mx, v);
  }
  if (!layer.grid.covers(mn, mx)) {
    if (training) {
      layer.grid = extend_grid(layer.grid, mn, mx);
    } else {
      // frozen grid at inference: constant extrapolation via clamping
      Tensor clamped = Tensor::zeros(y.shape());
      auto cd = clamped.mutable_data();
      const auto yd = y.data();
      const double lo = layer.grid.domain_lo(), hi = layer.grid.domain_hi();
      for (std::int64_t i = 0; i < y.numel(); ++i)
        cd[std::size_t(i)] = std::clamp(yd[std::size_t(i)], lo, hi);
      Tensor spline_part = spline_eval_channelwise(layer.grid, clamped);
      return add(scale(spline_part, layer.w1.value()),
                 scale(silu(y), layer.w2.value()));
    }
  }
  Tensor spline_part = spline_eval_channelwise(layer.grid, y);
  return add(mul(layer.w1, spline_part), mul(layer.w2, silu(y)));
}

Tensor batchnorm_forward(BatchNormLayer& layer, const Tensor& x,
                         bool training) {
  if (x.rank() < 2) throw DimensionError("batchnorm: input rank below 2");
  const std::int64_t batch = x.dim(0);
  const std::int64_t channels = x.dim(1);
  if (channels != std::int64_t(layer.running_mean.size()))
    throw DimensionError("batchnorm: channel dimension mismatch");
  std::int64_t spatial = 1;
  for (int i = 2; i < x.rank(); ++i) spatial *= x.dim(i);
  const std::int64_t nred = batch * spatial;
  const auto xd = x.data();
  const auto gd = layer.gamma.data();
  const auto betad = layer.beta.data();

  auto channel_stats = [&](std::int64_t c, double& mean, double& var) {
    double s = 0.0;
    for (std::int64_t b = 0; b < batch; ++b) {
      const double* p = xd.data() + (b * channels + c) * spatial;
      for (std::int64_t i = 0; i < spatial; ++i) s += p[i];
    }
    mean = s / double(nred);
    double sq = 0.0;
    for (std::int64_t b = 0; b < batch; ++b) {
      const double* p = xd.data() + (b * channels + c) * spatial;
      for (std::int64_t i = 0; i < spatial; ++i) {
        const double d = p[i] - mean;
        sq += d * d;
      }
    }
    var = sq / double(nred);
  };

  const bool use_batch_stats = training && batch > 1;
  std::vector<double> mean(static_cast<std::size_t>(channels));
  std::vector<double> var(static_cast<std::size_t>(channels));
  for (std::int64_t c = 0; c < channels; ++c) {
    if (use_batch_stats) {
      channel_stats(c, mean[std::size_t(c)], var[std::size_t(c)]);
    } else {
      mean[std::size_t(c)] = layer.running_mean[std::size_t(c)];
      var[std::size_t(c)] = layer.running_var[std::size_t(c)];
    }
  }

  if (training) {
    // Running statistics updated from the batch in either train path; a
    // batch of size 1 contributes its per-sample statistics with the
    // variance clamped at epsilon.
    for (std::int64_t c = 0; c < channels; ++c) {
      double bm, bv;
      if (use_batch_stats) {
        bm = mean[std::size_t(c)];
        bv = nred > 1 ? var[std::size_t(c)] * double(nred) / double(nred - 1)
                      : layer.epsilon;
      } else {
        channel_stats(c, bm, bv);
        bv = std::max(bv, layer.epsilon);
      }
      layer.running_mean[std::size_t(c)] =
          (1.0 - layer.momentum) * layer.running_mean[std::size_t(c)] +
          layer.momentum * bm;
      layer.running_var[std::size_t(c)] =
          (1.0 - layer.momentum) * layer.running_var[std::size_t(c)] +
          layer.momentum * bv;
    }
  }

  std::vector<double> inv_sd(static_cast<std::size_t>(channels));
  for (std::int64_t c = 0; c < channels; ++c)
    inv_sd[std::size_t(c)] = 1.0 / std::sqrt(var[std::size_t(c)] + layer.epsilon);

  Tensor result = Tensor::zeros(x.shape());
  {
    auto od = result.mutable_data();
    parallel_for(batch * channels, [&](std::int64_t i0, std::int64_t i1) {
      for (std::int64_t bc = i0; bc < i1; ++bc) {
        const std::int64_t c = bc % channels;
        const double m = mean[std::size_t(c)];
        const double is = inv_sd[std::size_t(c)];
        const double gamma = gd[std::size_t(c)];
        const double beta = betad[std::size_t(c)];
        const double* p = xd.data() + bc * spatial;
        double* o = od.data() + bc * spatial;
        for (std::int64_t i = 0; i < spatial; ++i)
          o[i] = (p[i] - m) * is * gamma + beta;
      }
    });
  }

  Tensor xc = x, gamma = layer.gamma, beta = layer.beta, rc = result;
  auto mean_c = mean;
  auto inv_sd_c = inv_sd;
  maybe_record({x, layer.gamma, layer.beta}, result, [=]() mutable {
    const auto gy = rc.grad();
    const auto xv = xc.data();
    const auto gv = gamma.data();
    // per-channel reductions
    std::vector<double> sum_g(std::size_t(channels), 0.0);
    std::vector<double> sum_gx(std::size_t(channels), 0.0);
    for (std::int64_t b = 0; b < batch; ++b)
      for (std::int64_t c = 0; c < channels; ++c) {
        const double* gp = gy.data() + (b * channels + c) * spatial;
        const double* xp = xv.data() + (b * channels + c) * spatial;
        const double m = mean_c[std::size_t(c)];
        const double is = inv_sd_c[std::size_t(c)];
        double sg = 0.0, sgx = 0.0;
        for (std::int64_t i = 0; i < spatial; ++i) {
          sg += gp[i];
          sgx += gp[i] * (xp[i] - m) * is;
        }
        sum_g[std::size_t(c)] += sg;
        sum_gx[std::size_t(c)] += sgx;
      }
    if (beta.tracked()) {
      auto bg = beta.grad();
      for (std::int64_t c = 0; c < channels; ++c)
        bg[std::size_t(c)] += sum_g[std::size_t(c)];
    }
    if (gamma.tracked()) {
      auto gg = gamma.grad();
      for (std::int64_t c = 0; c < channels; ++c)
        gg[std::size_t(c)] += sum_gx[std::size_t(c)];
    }
    if (xc.tracked()) {
      auto xg = xc.grad();
      parallel_for(batch * channels, [&](std::int64_t i0, std::int64_t i1) {
        for (std::int64_t bc = i0; bc < i1; ++bc) {
          const std::int64_t c = bc % channels;
          const double m = mean_c[std::size_t(c)];
          const double is = inv_sd_c[std::size_t(c)];
          const double gamma_c = gv[std::size_t(c)];
          const double* gp = gy.data() + bc * spatial;
          const double* xp = xv.data() + bc * spatial;
          double* out = xg.data() + bc * spatial;
          if (use_batch_stats) {
            const double mg = sum_g[std::size_t(c)] / double(nred);
            const double mgx = sum_gx[std::size_t(c)] / double(nred);
            for (std::int64_t i = 0; i < spatial; ++i) {
              const double xhat = (xp[i] - m) * is;
              out[i] += gamma_c * is * (gp[i] - mg - xhat * mgx);
            }
          } else {
            for (std::int64_t i = 0; i < spatial; ++i)
              out[i] += gamma_c * is * gp[i];
          }
        }
      });
    }
  });
  return result;
}

Tensor gcn_forward(const GCNConvLayer& layer, const CsrAdjacency& adj,
                   const Tensor& h) {
  if (h.rank() != 2) throw DimensionError("gcn: node features must be rank-2");
  const std::int64_t n = h.dim(0);
  const std::int64_t f = h.dim(1);
  if (n != adj.n) throw DimensionError("gcn: node count mismatch");
  if (layer.weight.dim(0) != f)
    throw DimensionError("gcn: feature arity does not match weight");
  const std::int64_t o = layer.weight.dim(1);

  auto spmm = [&](const double* dense, double* out) {
    // out[n x f'] = A~ * dense, rows disjoint
    const auto fcols = std::int64_t(f);
    parallel_for(n, [&](std::int64_t r0, std::int64_t r1) {
      for (std::int64_t i = r0; i < r1; ++i) {
        double* orow = out + i * fcols;
        std::fill(orow, orow + fcols, 0.0);
        for (int e = adj.row_ptr[std::size_t(i)];
             e < adj.row_ptr[std::size_t(i) + 1]; ++e) {
          const double w = adj.val[std::size_t(e)];
          const double* hrow = dense + adj.col[std::size_t(e)] * fcols;
          for (std::int64_t j = 0; j < fcols; ++j) orow[j] += w * hrow[j];
        }
      }
    });
  };

  std::vector<double> ah(std::size_t(n * f));
  spmm(h.data().data(), ah.data());
  std::vector<double> z(std::size_t(n * o), 0.0);
  kernels::matmul_nn(ah.data(), layer.weight.data().data(), z.data(), n, f, o,
                     false);
  std::vector<double> out(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) out[i] = z[i] > 0.0 ? z[i] : 0.0;
  Tensor result = Tensor::from({n, o}, std::move(out));

  Tensor hc = h, wc = layer.weight, rc = result;
  auto ah_saved = std::make_shared<std::vector<double>>(std::move(ah));
  auto z_saved = std::make_shared<std::vector<double>>(std::move(z));
  CsrAdjacency adj_c = adj;
  maybe_record({h, layer.weight}, result, [=]() mutable {
    const auto gy = rc.grad();
    std::vector<double> dz(z_saved->size());
    for (std::size_t i = 0; i < dz.size(); ++i)
      dz[i] = (*z_saved)[i] > 0.0 ? gy[i] : 0.0;
    if (wc.tracked()) {
      kernels::matmul_tn(ah_saved->data(), dz.data(), wc.grad().data(), n, f,
                         o, true);
    }
    if (hc.tracked()) {
      std::vector<double> dah(std::size_t(n * f), 0.0);
      kernels::matmul_nt(dz.data(), wc.data().data(), dah.data(), n, o, f,
                         true);
      // dH = A~^T * dAH; A~ is symmetric
      std::vector<double> dh(std::size_t(n * f), 0.0);
      parallel_for(n, [&](std::int64_t r0, std::int64_t r1) {
        for (std::int64_t i = r0; i < r1; ++i) {
          double* orow = dh.data() + i * f;
          for (int e = adj_c.row_ptr[std::size_t(i)];
               e < adj_c.row_ptr[std::size_t(i) + 1]; ++e) {
            const double w = adj_c.val[std::size_t(e)];
            const double* grow = dah.data() + adj_c.col[std::size_t(e)] * f;
            for (std::int64_t j = 0; j < f; ++j) orow[j] += w * grow[j];
          }
        }
      });
      auto hg = hc.grad();
      for (std::size_t i = 0; i < dh.size(); ++i) hg[i] += dh[i];
    }
  });
  return result;
}

Tensor gcn_forward(const GCNConvLayer& layer, const Graph& graph,
                   const Tensor& h) {
  return gcn_forward(layer, normalized_adjacency(graph), h);
}

Tensor maxpool(const Tensor& x) {
  if (x.rank() != 4 && x.rank() != 5)
    throw DimensionError("maxpool: expected [batch x channels x spatial]");
  const int rank = x.rank() - 2;
  const std::int64_t planes = x.dim(0) * x.dim(1);
  std::int64_t in[3] = {1, 1, 1}, out[3] = {1, 1, 1};
  for (int i = 0; i < rank; ++i) {
    in[i] = x.dim(2 + i);
    out[i] = in[i] == 1 ? 1 : in[i] / 2;
  }
  Shape out_shape{x.dim(0), x.dim(1)};
  for (int i = 0; i < rank; ++i) out_shape.push_back(out[i]);
  const std::int64_t in_plane = in[0] * in[1] * in[2];
  const std::int64_t out_plane = out[0] * out[1] * out[2];

  Tensor result = Tensor::zeros(out_shape);
  auto argmax = std::make_shared<std::vector<std::int64_t>>(
      std::size_t(planes * out_plane));
  {
    auto od = result.mutable_data();
    const auto xd = x.data();
    parallel_for(planes, [&](std::int64_t p0, std::int64_t p1) {
      for (std::int64_t pl = p0; pl < p1; ++pl) {
        const double* xp = xd.data() + pl * in_plane;
        double* op = od.data() + pl * out_plane;
        std::int64_t* ap = argmax->data() + pl * out_plane;
        for (std::int64_t oz = 0; oz < out[0]; ++oz)
          for (std::int64_t oy = 0; oy < out[1]; ++oy)
            for (std::int64_t ox = 0; ox < out[2]; ++ox) {
              double best = -1e300;
              std::int64_t best_i = -1;
              const std::int64_t z0 = oz * 2, y0 = oy * 2, x0 = ox * 2;
              for (std::int64_t dz = 0; dz < (in[0] == 1 ? 1 : 2); ++dz)
                for (std::int64_t dy = 0; dy < (in[1] == 1 ? 1 : 2); ++dy)
                  for (std::int64_t dx = 0; dx < (in[2] == 1 ? 1 : 2); ++dx) {
                    const std::int64_t idx =
                        ((z0 + dz) * in[1] + (y0 + dy)) * in[2] + (x0 + dx);
                    if (xp[idx] > best) {
                      best = xp[idx];
                      best_i = idx;
                    }
                  }
              const std::int64_t oidx = (oz * out[1] + oy) * out[2] + ox;
              op[oidx] = best;
              ap[oidx] = best_i;
            }
      }
    });
  }
  Tensor xc = x, rc = result;
  maybe_record({x}, result, [=]() mutable {
    if (!xc.tracked()) return;
    const auto gy = rc.grad();
    auto xg = xc.grad();
    parallel_for(planes, [&](std::int64_t p0, std::int64_t p1) {
      for (std::int64_t pl = p0; pl < p1; ++pl) {
        const double* gp = gy.data() + pl * out_plane;
        double* xp = xg.data() + pl * in_plane;
        const std::int64_t* ap = argmax->data() + pl * out_plane;
        for (std::int64_t i = 0; i < out_plane; ++i) xp[ap[i]] += gp[i];
      }
    });
  });
  return result;
}

Tensor global_avg_pool(const Tensor& x) {
  if (x.rank() < 3)
    throw DimensionError("global_avg_pool: expected [batch x channels x spatial]");
  const std::int64_t planes = x.dim(0) * x.dim(1);
  const std::int64_t spatial = x.numel() / planes;
  Tensor result = Tensor::zeros({x.dim(0), x.dim(1)});
  {
    auto od = result.mutable_data();
    const auto xd = x.data();
    for (std::int64_t pl = 0; pl < planes; ++pl) {
      double acc = 0.0;
      const double* p = xd.data() + pl * spatial;
      for (std::int64_t i = 0; i < spatial; ++i) acc += p[i];
      od[std::size_t(pl)] = acc / double(spatial);
    }
  }
  Tensor xc = x, rc = result;
  maybe_record({x}, result, [=]() mutable {
    if (!xc.tracked()) return;
    const auto gy = rc.grad();
    auto xg = xc.grad();
    for (std::int64_t pl = 0; pl < planes; ++pl) {
      const double gshare = gy[std::size_t(pl)] / double(spatial);
      double* p = xg.data() + pl * spatial;
      for (std::int64_t i = 0; i < spatial; ++i) p[i] += gshare;
    }
  });
  return result;
}

Tensor global_mean_pool_nodes(const Tensor& h) {
  if (h.rank() != 2) throw DimensionError("global_mean_pool: rank-2 expected");
  const std::int64_t n = h.dim(0), f = h.dim(1);
  Tensor result = Tensor::zeros({1, f});
  {
    auto od = result.mutable_data();
    const auto hd = h.data();
    for (std::int64_t i = 0; i < n; ++i)
      for (std::int64_t j = 0; j < f; ++j)
        od[std::size_t(j)] += hd[std::size_t(i * f + j)];
    for (std::int64_t j = 0; j < f; ++j) od[std::size_t(j)] /= double(n);
  }
  Tensor hc = h, rc = result;
  maybe_record({h}, result, [=]() mutable {
    if (!hc.tracked()) return;
    const auto gy = rc.grad();
    auto hg = hc.grad();
    for (std::int64_t i = 0; i < n; ++i)
      for (std::int64_t j = 0; j < f; ++j)
        hg[std::size_t(i * f + j)] += gy[std::size_t(j)] / double(n);
  });
  return result;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.rank() != 2 || w.rank() != 2)
    throw DimensionError("linear: rank-2 operands expected");
  const std::int64_t batch = x.dim(0), fin = x.dim(1), fout = w.dim(1);
  if (w.dim(0) != fin || b.numel() != fout)
    throw DimensionError("linear: shape mismatch");
  Tensor result = Tensor::zeros({batch, fout});
  {
    auto od = result.mutable_data();
    kernels::matmul_nn(x.data().data(), w.data().data(), od.data(), batch, fin,
                       fout, false);
    const auto bd = b.data();
    for (std::int64_t i = 0; i < batch; ++i)
      for (std::int64_t j = 0; j < fout; ++j)
        od[std::size_t(i * fout + j)] += bd[std::size_t(j)];
  }
  Tensor xc = x, wc = w, bc = b, rc = result;
  maybe_record({x, w, b}, result, [=]() mutable {
    const auto gy = rc.grad();
    if (xc.tracked())
      kernels::matmul_nt(gy.data(), wc.data().data(), xc.grad().data(), batch,
                         fout, fin, true);
    if (wc.tracked())
      kernels::matmul_tn(xc.data().data(), gy.data(), wc.grad().data(), batch,
                         fin, fout, true);
    if (bc.tracked()) {
      auto bg = bc.grad();
      for (std::int64_t i = 0; i < batch; ++i)
        for (std::int64_t j = 0; j < fout; ++j)
          bg[std::size_t(j)] += gy[std::size_t(i * fout + j)];
    }
  });
  return result;
}

Tensor dropout(const Tensor& x, double p, bool training, Rng& rng) {
  if (p < 0.0 || p >= 1.0) throw ConfigError("dropout: p must be in [0, 1)");
  if (!training || p == 0.0) return x;
  const double keep = 1.0 - p;
  const double inv_keep = 1.0 / keep;
  auto mask = std::make_shared<std::vector<double>>(std::size_t(x.numel()));
  for (auto& m : *mask) m = rng.uniform() < keep ? inv_keep : 0.0;
  std::vector<double> out(std::size_t(x.numel()));
  const auto xd = x.data();
  for (std::int64_t i = 0; i < x.numel(); ++i)
    out[std::size_t(i)] = xd[std::size_t(i)] * (*mask)[std::size_t(i)];
  Tensor result = Tensor::from(x.shape(), std::move(out));
  Tensor xc = x, rc = result;
  maybe_record({x}, result, [=]() mutable {
    if (!xc.tracked()) return;
    const auto gy = rc.grad();
    auto xg = xc.grad();
    for (std::size_t i = 0; i < mask->size(); ++i)
      xg[i] += gy[i] * (*mask)[i];
  });
  return result;
}

// ---------------------------------------------------------------------------
// Model assembly
// ---------------------------------------------------------------------------

std::string family_name(Family f) {
  switch (f) {
    case Family::cnn: return "cnn";
    case Family::convkan: return "convkan";
    case Family::gcn: return "gcn";
  }
  return "?";
}

std::string dimensionality_name(Dimensionality d) {
  return d == Dimensionality::d2 ? "2d" : "3d";
}

Family family_from(const std::string& s) {
  if (s == "cnn") return Family::cnn;
  if (s == "convkan") return Family::convkan;
  if (s == "gcn") return Family::gcn;
  throw ConfigError("unknown model family: " + s);
}

Dimensionality dimensionality_from(const std::string& s) {
  if (s == "2d") return Dimensionality::d2;
  if (s == "3d") return Dimensionality::d3;
  throw ConfigError("unknown dimensionality: " + s);
}

ModelConfig ModelConfig::preset(Family family, Dimensionality dim) {
  ModelConfig c;
  c.family = family;
  c.dim = dim;
  switch (family) {
    case Family::cnn:
      c.channels = {32, 64, 128, 256};
      c.dropout_rate = 0.5;
      break;
    case Family::convkan:
      c.channels = dim == Dimensionality::d2 ? std::vector<int>{32, 64, 128}
                                             : std::vector<int>{32, 64, 128, 256};
      c.dropout_rate = 0.5;
      break;
    case Family::gcn:
      c.channels = {64, 64, 64, 64};
      c.dropout_rate = 0.3;
      break;
  }
  return c;
}

namespace {

Tensor kaiming_uniform(Shape shape, std::int64_t fan_in, Rng rng) {
  const double bound = std::sqrt(6.0 / double(fan_in));
  const auto n = shape_numel(shape);
  std::vector<double> v(static_cast<std::size_t>(n));
  for (auto& x : v) x = rng.uniform(-bound, bound);
  Tensor t = Tensor::from(std::move(shape), std::move(v));
  t.set_requires_grad(true);
  return t;
}

Tensor zeros_param(Shape shape) {
  Tensor t = Tensor::zeros(std::move(shape));
  t.set_requires_grad(true);
  return t;
}

}  // namespace

Model::Model(ModelConfig config, std::uint64_t seed)
    : config_(std::move(config)), seed_(seed) {
  if (config_.channels.empty())
    throw ConfigError("model: empty channel plan");
  init_params();
}

void Model::init_params() {
  Rng root(seed_);
  const int spatial_rank = config_.dim == Dimensionality::d2 ? 2 : 3;
  if (config_.family == Family::gcn) {
    int fin = config_.node_features;
    for (std::size_t i = 0; i < config_.channels.size(); ++i) {
      GCNConvLayer l;
      const int fout = config_.channels[i];
      l.weight = kaiming_uniform(
          {fin, fout}, fin,
          root.split("gcn" + std::to_string(i) + ".weight"));
      gcn_layers_.push_back(std::move(l));
      fin = fout;
    }
    fc2_w_ = kaiming_uniform({fin, config_.num_classes}, fin,
                             root.split("head.fc.weight"));
    fc2_b_ = zeros_param({config_.num_classes});
    return;
  }

  int cin = config_.in_channels;
  std::int64_t kvol = 1;
  for (int i = 0; i < spatial_rank; ++i) kvol *= 3;
  for (std::size_t i = 0; i < config_.channels.size(); ++i) {
    Block b;
    const int cout = config_.channels[i];
    Shape kshape{cout, cin};
    for (int r = 0; r < spatial_rank; ++r) kshape.push_back(3);
    const std::string prefix = "block" + std::to_string(i);
    ConvLayer conv;
    conv.kernel = kaiming_uniform(kshape, std::int64_t(cin) * kvol,
                                  root.split(prefix + ".conv.kernel"));
    conv.bias = zeros_param({cout});
    conv.spatial_rank = spatial_rank;
    if (config_.family == Family::convkan) {
      b.spline = true;
      SplineConvLayer sc;
      sc.conv = std::move(conv);
      sc.grid = SplineGrid::make(config_.spline_control_points,
                                 config_.spline_degree, config_.spline_lo,
                                 config_.spline_hi, cout);
      Rng grid_rng = root.split(prefix + ".spline.controls");
      sc.grid.init_identity(&grid_rng, 0.05);
      sc.grid.control_points().set_requires_grad(true);
      sc.w1 = Tensor::scalar(1.0);
      sc.w1.set_requires_grad(true);
      sc.w2 = Tensor::scalar(1.0);
      sc.w2.set_requires_grad(true);
      b.sconv = std::move(sc);
    } else {
      b.conv = std::move(conv);
    }
    b.bn.gamma = Tensor::full({cout}, 1.0);
    b.bn.gamma.set_requires_grad(true);
    b.bn.beta = zeros_param({cout});
    b.bn.running_mean.assign(std::size_t(cout), 0.0);
    b.bn.running_var.assign(std::size_t(cout), 1.0);
    blocks_.push_back(std::move(b));
    cin = cout;
  }
  fc1_w_ = kaiming_uniform({cin, config_.head_hidden}, cin,
                           root.split("head.fc1.weight"));
  fc1_b_ = zeros_param({config_.head_hidden});
  fc2_w_ = kaiming_uniform({config_.head_hidden, config_.num_classes},
                           config_.head_hidden, root.split("head.fc2.weight"));
  fc2_b_ = zeros_param({config_.num_classes});
}

Tensor Model::forward_image(const Tensor& x, bool training, Rng* dropout_rng) {
  if (config_.family == Family::gcn)
    throw ConfigError("forward_image: gcn models take graphs");
  if (training && config_.dropout_rate > 0.0 && !dropout_rng)
    throw ConfigError("forward_image: training requires a dropout rng");
  Tensor h = x;
  for (auto& b : blocks_) {
    if (b.spline) {
      h = splineconv_forward(*b.sconv, h, training);
    } else {
      h = relu(conv_forward(b.conv, h));
    }
    h = batchnorm_forward(b.bn, h, training);
    h = maxpool(h);
  }
  h = global_avg_pool(h);
  h = relu(linear(h, fc1_w_, fc1_b_));
  if (training && config_.dropout_rate > 0.0)
    h = dropout(h, config_.dropout_rate, training, *dropout_rng);
  return linear(h, fc2_w_, fc2_b_);
}

Tensor Model::forward_graph(const CsrAdjacency& adj, const Tensor& features,
                            bool training, Rng* dropout_rng) {
  if (config_.family != Family::gcn)
    throw ConfigError("forward_graph: image models take images");
  if (training && config_.dropout_rate > 0.0 && !dropout_rng)
    throw ConfigError("forward_graph: training requires a dropout rng");
  Tensor h = features;
  for (auto& l : gcn_layers_) {
    h = gcn_forward(l, adj, h);
    if (training && config_.dropout_rate > 0.0)
      h = dropout(h, config_.dropout_rate, training, *dropout_rng);
  }
  h = global_mean_pool_nodes(h);
  return linear(h, fc2_w_, fc2_b_);
}

std::vector<Param> Model::parameters() {
  std::vector<Param> out;
  if (config_.family == Family::gcn) {
    for (std::size_t i = 0; i < gcn_layers_.size(); ++i)
      out.push_back({"gcn" + std::to_string(i) + ".weight",
                     gcn_layers_[i].weight});
    out.push_back({"head.fc.weight", fc2_w_});
    out.push_back({"head.fc.bias", fc2_b_});
    return out;
  }
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const std::string p = "block" + std::to_string(i);
    auto& b = blocks_[i];
    ConvLayer& conv = b.spline ? b.sconv->conv : b.conv;
    out.push_back({p + ".conv.kernel", conv.kernel});
    out.push_back({p + ".conv.bias", conv.bias});
    if (b.spline) {
      out.push_back({p + ".spline.controls", b.sconv->grid.control_points()});
      out.push_back({p + ".spline.w1", b.sconv->w1});
      out.push_back({p + ".spline.w2", b.sconv->w2});
    }
    out.push_back({p + ".bn.gamma", b.bn.gamma});
    out.push_back({p + ".bn.beta", b.bn.beta});
  }
  out.push_back({"head.fc1.weight", fc1_w_});
  out.push_back({"head.fc1.bias", fc1_b_});
  out.push_back({"head.fc2.weight", fc2_w_});
  out.push_back({"head.fc2.bias", fc2_b_});
  return out;
}

std::vector<double> Model::snapshot_parameters() {
  std::vector<double> flat;
  for (auto& p : parameters())
    flat.insert(flat.end(), p.value.data().begin(), p.value.data().end());
  // batch-norm running statistics are part of the model state
  for (auto& b : blocks_) {
    flat.insert(flat.end(), b.bn.running_mean.begin(), b.bn.running_mean.end());
    flat.insert(flat.end(), b.bn.running_var.begin(), b.bn.running_var.end());
  }
  return flat;
}

void Model::restore_parameters(const std::vector<double>& flat) {
  std::size_t off = 0;
  for (auto& p : parameters()) {
    auto d = p.value.mutable_data();
    if (off + d.size() > flat.size())
      throw InputError("restore_parameters: snapshot too short");
    std::copy(flat.begin() + std::ptrdiff_t(off),
              flat.begin() + std::ptrdiff_t(off + d.size()), d.begin());
    off += d.size();
  }
  for (auto& b : blocks_) {
    for (auto& v : b.bn.running_mean) v = flat[off++];
    for (auto& v : b.bn.running_var) v = flat[off++];
  }
  if (off != flat.size())
    throw InputError("restore_parameters: snapshot length mismatch");
}

Tensor model_logits_image(Model& model, const Tensor& x, bool training,
                          Rng* rng) {
  return model.forward_image(x, training, rng);
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {
namespace fs = std::filesystem;
using nlohmann::json;
}  // namespace

void Model::save_checkpoint(const std::string& dir,
                            const std::string& extra_json_fields) const {
  fs::create_directories(fs::path(dir) / "params");
  json j;
  j["format"] = "kanlab-checkpoint-1";
  j["family"] = family_name(config_.family);
  j["dimensionality"] = dimensionality_name(config_.dim);
  j["channels"] = config_.channels;
  j["dropout"] = config_.dropout_rate;
  j["head_hidden"] = config_.head_hidden;
  j["num_classes"] = config_.num_classes;
  j["in_channels"] = config_.in_channels;
  j["node_features"] = config_.node_features;
  j["seed"] = seed_;
  json splines = json::object();
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    if (!blocks_[i].spline) continue;
    const auto& grid = blocks_[i].sconv->grid;
    json s;
    s["degree"] = grid.degree();
    s["domain"] = {grid.domain_lo(), grid.domain_hi()};
    s["control_points"] = grid.control_count();
    splines["block" + std::to_string(i)] = s;
    write_blob((fs::path(dir) / "params" /
                ("block" + std::to_string(i) + ".spline.knots.kvt"))
                   .string(),
               Tensor::from({std::int64_t(grid.knots().size())}, grid.knots()),
               BlobDtype::f64);
  }
  j["splines"] = splines;
  json running = json::object();
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    running["block" + std::to_string(i)] = {
        {"mean", blocks_[i].bn.running_mean},
        {"var", blocks_[i].bn.running_var}};
  }
  j["batchnorm_running"] = running;
  if (!extra_json_fields.empty()) {
    json extra = json::parse(extra_json_fields);
    for (auto& [k, v] : extra.items()) j[k] = v;
  }
  std::ofstream os(fs::path(dir) / "checkpoint.json");
  if (!os) throw IoError("cannot write checkpoint.json in " + dir);
  os << j.dump(2) << "\n";

  Model& self = const_cast<Model&>(*this);
  for (auto& p : self.parameters()) {
    write_blob((fs::path(dir) / "params" / (p.name + ".kvt")).string(),
               p.value, BlobDtype::f32);
  }
}

Model Model::load_checkpoint(const std::string& dir) {
  std::ifstream is(fs::path(dir) / "checkpoint.json");
  if (!is) throw IoError("cannot read checkpoint.json in " + dir);
  json j = json::parse(is);
  ModelConfig cfg;
  cfg.family = family_from(j.at("family").get<std::string>());
  cfg.dim = dimensionality_from(j.at("dimensionality").get<std::string>());
  cfg.channels = j.at("channels").get<std::vector<int>>();
  cfg.dropout_rate = j.at("dropout").get<double>();
  cfg.head_hidden = j.at("head_hidden").get<int>();
  cfg.num_classes = j.at("num_classes").get<int>();
  cfg.in_channels = j.at("in_channels").get<int>();
  cfg.node_features = j.at("node_features").get<int>();
  Model m(cfg, j.at("seed").get<std::uint64_t>());
  for (auto& p : m.parameters()) {
    Tensor stored =
        read_blob((fs::path(dir) / "params" / (p.name + ".kvt")).string());
    if (stored.shape() != p.value.shape())
      throw IoError("checkpoint parameter shape mismatch: " + p.name);
    std::copy(stored.data().begin(), stored.data().end(),
              p.value.mutable_data().begin());
  }
  for (std::size_t i = 0; i < m.blocks_.size(); ++i) {
    const auto key = "block" + std::to_string(i);
    const auto& running = j.at("batchnorm_running").at(key);
    m.blocks_[i].bn.running_mean =
        running.at("mean").get<std::vector<double>>();
    m.blocks_[i].bn.running_var = running.at("var").get<std::vector<double>>();
    if (m.blocks_[i].spline) {
      const auto& s = j.at("splines").at(key);
      const double lo = s.at("domain")[0].get<double>();
      const double hi = s.at("domain")[1].get<double>();
      auto& sc = *m.blocks_[i].sconv;
      const int cout = sc.grid.channels();
      SplineGrid grid =
          SplineGrid::make(s.at("control_points").get<int>(),
                           s.at("degree").get<int>(), lo, hi, cout);
      grid.set_control_points(sc.grid.control_points());
      sc.grid = std::move(grid);
    }
  }
  return m;
}

}  // namespace kanlab
