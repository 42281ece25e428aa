#include "kanlab/mathx.hpp"

#include <cmath>
#include <limits>

#include "kanlab/common.hpp"

namespace kanlab::mathx {

double norm_cdf(double x) { return 0.5 * std::erfc(-x * 0.70710678118654752440); }

// Acklam's rational approximation refined with one Halley step; good to
// ~1e-15 over (0, 1).
double norm_ppf(double p) {
  if (!(p > 0.0 && p < 1.0)) {
    if (p == 0.0) return -std::numeric_limits<double>::infinity();
    if (p == 1.0) return std::numeric_limits<double>::infinity();
    throw InputError("norm_ppf: p outside [0, 1]");
  }
  static const double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                             -2.759285104469687e+02, 1.383577518672690e+02,
                             -3.066479806614716e+01, 2.506628277459239e+00};
  static const double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                             -1.556989798598866e+02, 6.680131188771972e+01,
                             -1.328068155288572e+01};
  static const double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                             -2.400758277161838e+00, -2.549732539343734e+00,
                             4.374664141464968e+00,  2.938163982698783e+00};
  static const double d[] = {7.784695709041462e-03, 3.224671290700398e-01,
                             2.445134137142996e+00, 3.754408661907416e+00};
  const double plow = 0.02425;
  double x;
  if (p < plow) {
    const double q = std::sqrt(-2.0 * std::log(p));
    x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  } else if (p <= 1.0 - plow) {
    const double q = p - 0.5;
    const double r = q * q;
    x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) *
        q /
        (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
  } else {
    const double q = std::sqrt(-2.0 * std::log(1.0 - p));
    x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  }
  // Halley refinement
  const double e = norm_cdf(x) - p;
  const double u = e * std::sqrt(2.0 * 3.14159265358979323846) *
                   std::exp(0.5 * x * x);
  x = x - u / (1.0 + 0.5 * x * u);
  return x;
}

namespace {

// Continued fraction for the incomplete beta (Lentz's method).
double ibeta_cf(double a, double b, double x) {
  const double eps = 1e-15;
  const double fpmin = 1e-300;
  const double qab = a + b;
  const double qap = a + 1.0;
  const double qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::fabs(d) < fpmin) d = fpmin;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= 400; ++m) {
    const int m2 = 2 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < fpmin) d = fpmin;
    c = 1.0 + aa / c;
    if (std::fabs(c) < fpmin) c = fpmin;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < fpmin) d = fpmin;
    c = 1.0 + aa / c;
    if (std::fabs(c) < fpmin) c = fpmin;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::fabs(del - 1.0) < eps) break;
  }
  return h;
}

}  // namespace

double ibeta(double a, double b, double x) {
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  const double lbeta = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b);
  const double front = std::exp(lbeta + a * std::log(x) + b * std::log1p(-x));
  if (x < (a + 1.0) / (a + b + 2.0)) {
    return front * ibeta_cf(a, b, x) / a;
  }
  return 1.0 - front * ibeta_cf(b, a, 1.0 - x) / b;
}

double t_cdf(double t, double df) {
  if (df <= 0.0) throw InputError("t_cdf: df must be positive");
  if (t == 0.0) return 0.5;
  const double x = df / (df + t * t);
  const double p = 0.5 * ibeta(0.5 * df, 0.5, x);
  return t > 0.0 ? 1.0 - p : p;
}

double t_ppf(double p, double df) {
  if (!(p > 0.0 && p < 1.0)) throw InputError("t_ppf: p outside (0, 1)");
  if (p == 0.5) return 0.0;
  // bracket, then bisect on the monotone CDF
  double lo = -1.0, hi = 1.0;
  while (t_cdf(lo, df) > p) lo *= 2.0;
  while (t_cdf(hi, df) < p) hi *= 2.0;
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (t_cdf(mid, df) < p)
      lo = mid;
    else
      hi = mid;
    if (hi - lo < 1e-13 * (1.0 + std::fabs(hi))) break;
  }
  return 0.5 * (lo + hi);
}

// P(T <= t) for T = (Z + delta) / sqrt(V/df), V ~ chi^2_df:
//   integral over u = V/df of Phi(t*sqrt(u) - delta) * f(u) du
// where f is the density of V/df. Simpson's rule over the bulk of f.
double noncentral_t_cdf(double t, double df, double delta) {
  if (df <= 0.0) throw InputError("noncentral_t_cdf: df must be positive");
  const double mean_u = 1.0;
  const double sd_u = std::sqrt(2.0 / df);
  double lo = mean_u - 14.0 * sd_u;
  double hi = mean_u + 14.0 * sd_u;
  if (lo < 1e-12) lo = 1e-12;
  const int n = 4000;  // even
  const double h = (hi - lo) / n;
  const double half_df = 0.5 * df;
  const double log_norm = half_df * std::log(half_df) - std::lgamma(half_df);
  auto integrand = [&](double u) {
    const double logf = log_norm + (half_df - 1.0) * std::log(u) - half_df * u;
    return norm_cdf(t * std::sqrt(u) - delta) * std::exp(logf);
  };
  double acc = integrand(lo) + integrand(hi);
  for (int i = 1; i < n; ++i) {
    acc += integrand(lo + i * h) * (i % 2 ? 4.0 : 2.0);
  }
  double p = acc * h / 3.0;
  if (p < 0.0) p = 0.0;
  if (p > 1.0) p = 1.0;
  return p;
}

std::vector<double> solve_dense(std::vector<double> a, std::vector<double> b,
                                int n) {
  if (int(b.size()) != n || int(a.size()) != n * n)
    throw DimensionError("solve_dense: size mismatch");
  for (int col = 0; col < n; ++col) {
    int piv = col;
    for (int r = col + 1; r < n; ++r)
      if (std::fabs(a[r * n + col]) > std::fabs(a[piv * n + col])) piv = r;
    if (std::fabs(a[piv * n + col]) < 1e-300)
      throw NumericError("solve_dense: singular matrix");
    if (piv != col) {
      for (int c = col; c < n; ++c) std::swap(a[piv * n + c], a[col * n + c]);
      std::swap(b[piv], b[col]);
    }
    const double inv = 1.0 / a[col * n + col];
    for (int r = col + 1; r < n; ++r) {
      const double f = a[r * n + col] * inv;
      if (f == 0.0) continue;
      for (int c = col; c < n; ++c) a[r * n + c] -= f * a[col * n + c];
      b[r] -= f * b[col];
    }
  }
  std::vector<double> x(static_cast<std::size_t>(n));
  for (int r = n - 1; r >= 0; --r) {
    double s = b[std::size_t(r)];
    for (int c = r + 1; c < n; ++c) s -= a[r * n + c] * x[std::size_t(c)];
    x[std::size_t(r)] = s / a[r * n + r];
  }
  return x;
}

}  // namespace kanlab::mathx
