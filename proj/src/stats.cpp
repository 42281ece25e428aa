#include "kanlab/stats.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "kanlab/mathx.hpp"

namespace kanlab::stats {

// ---------------------------------------------------------------------------
// Classification metrics
// ---------------------------------------------------------------------------

double auroc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size())
    throw DimensionError("auroc: size mismatch");
  std::int64_t npos = 0, nneg = 0;
  for (int y : labels) (y == 1 ? npos : nneg) += 1;
  if (npos == 0 || nneg == 0)
    throw InputError("auroc: undefined for single-class labels");
  // midranks
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t i, std::size_t j) {
    return scores[i] < scores[j];
  });
  std::vector<double> rank(scores.size());
  std::size_t i = 0;
  while (i < idx.size()) {
    std::size_t j = i;
    while (j + 1 < idx.size() && scores[idx[j + 1]] == scores[idx[i]]) ++j;
    const double mid = 0.5 * (double(i + 1) + double(j + 1));
    for (std::size_t t = i; t <= j; ++t) rank[idx[t]] = mid;
    i = j + 1;
  }
  double rank_sum_pos = 0.0;
  for (std::size_t s = 0; s < scores.size(); ++s)
    if (labels[s] == 1) rank_sum_pos += rank[s];
  return (rank_sum_pos - double(npos) * double(npos + 1) / 2.0) /
         (double(npos) * double(nneg));
}

Metrics classification_metrics(std::span<const double> scores,
                               std::span<const int> labels) {
  if (scores.size() != labels.size() || scores.empty())
    throw DimensionError("classification_metrics: bad input sizes");
  for (double s : scores)
    if (!std::isfinite(s))
      throw NumericError("classification_metrics: non-finite score");

  std::int64_t tp = 0, tn = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const int pred = scores[i] >= 0.5 ? 1 : 0;
    const int y = labels[i];
    if (pred == 1 && y == 1) ++tp;
    if (pred == 0 && y == 0) ++tn;
    if (pred == 1 && y == 0) ++fp;
    if (pred == 0 && y == 1) ++fn;
  }
  const double total = double(scores.size());
  Metrics m;
  m.accuracy = double(tp + tn) / total;
  // micro recall over both classes equals accuracy for complete predictions
  m.recall = m.accuracy;
  m.f1_micro = m.accuracy;

  auto f1_of = [](double tp_c, double fp_c, double fn_c) {
    const double denom_p = tp_c + fp_c;
    const double denom_r = tp_c + fn_c;
    const double prec = denom_p > 0 ? tp_c / denom_p : 0.0;
    const double rec = denom_r > 0 ? tp_c / denom_r : 0.0;
    return (prec + rec) > 0 ? 2.0 * prec * rec / (prec + rec) : 0.0;
  };
  const double f1_pos = f1_of(double(tp), double(fp), double(fn));
  const double f1_neg = f1_of(double(tn), double(fn), double(fp));
  m.f1_macro = 0.5 * (f1_pos + f1_neg);
  m.auroc = auroc(scores, labels);
  return m;
}

// ---------------------------------------------------------------------------
// Bootstrap
// ---------------------------------------------------------------------------

Interval bootstrap_ci(std::span<const double> values, double level, int b,
                      std::uint64_t seed) {
  if (values.empty()) throw InputError("bootstrap_ci: empty input");
  if (b < 100) throw InputError("bootstrap_ci: need at least 100 resamples");
  if (!(level > 0.0 && level < 1.0))
    throw InputError("bootstrap_ci: level outside (0, 1)");
  Rng rng = Rng(seed).split("bootstrap");
  std::vector<double> means(static_cast<std::size_t>(b));
  const std::size_t n = values.size();
  for (int r = 0; r < b; ++r) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      acc += values[std::size_t(rng.index(n))];
    means[std::size_t(r)] = acc / double(n);
  }
  std::sort(means.begin(), means.end());
  auto quantile = [&](double q) {
    const double h = q * double(b - 1);
    const auto lo = std::size_t(std::floor(h));
    const double f = h - double(lo);
    if (lo + 1 >= std::size_t(b)) return means[std::size_t(b - 1)];
    return means[lo] * (1.0 - f) + means[lo + 1] * f;
  };
  const double alpha = 1.0 - level;
  Interval iv;
  iv.low = quantile(alpha / 2.0);
  iv.high = quantile(1.0 - alpha / 2.0);
  return iv;
}

// ---------------------------------------------------------------------------
// Wilcoxon signed-rank
// ---------------------------------------------------------------------------

WilcoxonResult wilcoxon_signed_rank(std::span<const double> a,
                                    std::span<const double> b) {
  if (a.size() != b.size())
    throw DimensionError("wilcoxon: samples must pair up");
  std::vector<double> diff;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    if (d != 0.0) diff.push_back(d);
  }
  WilcoxonResult res;
  res.n_effective = int(diff.size());
  if (diff.empty()) {
    res.p = 1.0;
    res.degenerate = true;
    return res;
  }
  if (diff.size() < 3 && a.size() >= 3) {
    // fewer than 3 informative pairs: the exact path still applies
  }
  if (a.size() < 3)
    throw InputError("wilcoxon: need at least 3 pairs");

  const std::size_t n = diff.size();
  // midranks of |diff|, doubled to stay integral under ties
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t i, std::size_t j) {
    return std::fabs(diff[i]) < std::fabs(diff[j]);
  });
  std::vector<std::int64_t> rank2(n);  // 2 * rank
  std::vector<std::int64_t> tie_sizes;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n &&
           std::fabs(diff[idx[j + 1]]) == std::fabs(diff[idx[i]]))
      ++j;
    const std::int64_t r2 = std::int64_t(i + 1 + j + 1);  // 2 * midrank
    for (std::size_t t = i; t <= j; ++t) rank2[idx[t]] = r2;
    tie_sizes.push_back(std::int64_t(j - i + 1));
    i = j + 1;
  }
  std::int64_t w2_plus = 0, total2 = 0;
  for (std::size_t t = 0; t < n; ++t) {
    total2 += rank2[t];
    if (diff[t] > 0.0) w2_plus += rank2[t];
  }
  res.w_plus = double(w2_plus) / 2.0;

  if (n <= 12) {
    res.exact = true;
    // subset-sum counts over the doubled ranks
    std::vector<double> count(std::size_t(total2) + 1, 0.0);
    count[0] = 1.0;
    for (std::size_t t = 0; t < n; ++t) {
      const auto r = rank2[t];
      for (std::int64_t s = total2; s >= r; --s)
        count[std::size_t(s)] += count[std::size_t(s - r)];
    }
    const double mu2 = double(total2) / 2.0;
    const double dev = std::fabs(double(w2_plus) - mu2);
    const double hi = mu2 + dev, lo = mu2 - dev;
    double tail = 0.0;
    for (std::int64_t s = 0; s <= total2; ++s) {
      if (double(s) >= hi || double(s) <= lo) tail += count[std::size_t(s)];
    }
    res.p = std::min(1.0, tail / std::pow(2.0, double(n)));
    return res;
  }

  // normal approximation with tie and continuity corrections
  const double w_plus = res.w_plus;
  const double nn = double(n);
  const double mu = nn * (nn + 1.0) / 4.0;
  double tie_term = 0.0;
  for (auto t : tie_sizes) tie_term += double(t * t * t - t);
  const double sigma2 =
      nn * (nn + 1.0) * (2.0 * nn + 1.0) / 24.0 - tie_term / 48.0;
  if (sigma2 <= 0.0) {
    res.p = 1.0;
    res.degenerate = true;
    return res;
  }
  const double z = (std::fabs(w_plus - mu) - 0.5) / std::sqrt(sigma2);
  res.p = std::clamp(2.0 * (1.0 - mathx::norm_cdf(std::max(0.0, z))), 0.0, 1.0);
  return res;
}

// ---------------------------------------------------------------------------
// Shapiro-Wilk (AS R94 approximation)
// ---------------------------------------------------------------------------

ShapiroResult shapiro_wilk(std::span<const double> x) {
  const int n = int(x.size());
  if (n < 3 || n > 5000)
    throw InputError("shapiro_wilk: n must be in [3, 5000]");
  std::vector<double> s(x.begin(), x.end());
  std::sort(s.begin(), s.end());
  const double range = s.back() - s.front();
  ShapiroResult res;
  if (range == 0.0) {
    res.w = 1.0;
    res.p = 1.0;
    res.degenerate = true;
    return res;
  }

  // expected normal order statistics (Blom) and normalized weights
  std::vector<double> m(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i)
    m[std::size_t(i)] =
        mathx::norm_ppf((double(i + 1) - 0.375) / (double(n) + 0.25));
  double summ2 = 0.0;
  for (double v : m) summ2 += v * v;
  const double ssumm2 = std::sqrt(summ2);
  const double rsn = 1.0 / std::sqrt(double(n));

  auto poly = [](const double* c, int order, double v) {
    double acc = c[0];
    double p = 1.0;
    for (int i = 1; i <= order; ++i) {
      p *= v;
      acc += c[i] * p;
    }
    return acc;
  };
  static const double c1[6] = {0.0, 0.221157, -0.147981, -2.071190, 4.434685,
                               -2.706056};
  static const double c2[6] = {0.0, 0.042981, -0.293762, -1.752461, 5.682633,
                               -3.582633};

  std::vector<double> a(std::size_t(n), 0.0);
  const double a_n = m[std::size_t(n - 1)] / ssumm2 + poly(c1, 5, rsn);
  double phi;
  if (n > 5) {
    const double a_n1 = m[std::size_t(n - 2)] / ssumm2 + poly(c2, 5, rsn);
    phi = (summ2 - 2.0 * m[std::size_t(n - 1)] * m[std::size_t(n - 1)] -
           2.0 * m[std::size_t(n - 2)] * m[std::size_t(n - 2)]) /
          (1.0 - 2.0 * a_n * a_n - 2.0 * a_n1 * a_n1);
    a[std::size_t(n - 1)] = a_n;
    a[std::size_t(n - 2)] = a_n1;
    a[0] = -a_n;
    a[1] = -a_n1;
    for (int i = 2; i < n - 2; ++i)
      a[std::size_t(i)] = m[std::size_t(i)] / std::sqrt(phi);
  } else if (n > 3) {
    phi = (summ2 - 2.0 * m[std::size_t(n - 1)] * m[std::size_t(n - 1)]) /
          (1.0 - 2.0 * a_n * a_n);
    a[std::size_t(n - 1)] = a_n;
    a[0] = -a_n;
    for (int i = 1; i < n - 1; ++i)
      a[std::size_t(i)] = m[std::size_t(i)] / std::sqrt(phi);
  } else {  // n == 3: exact weights
    a[0] = -std::sqrt(0.5);
    a[2] = std::sqrt(0.5);
  }

  double mean = 0.0;
  for (double v : s) mean += v;
  mean /= double(n);
  double ssd = 0.0, num = 0.0;
  for (int i = 0; i < n; ++i) {
    ssd += (s[std::size_t(i)] - mean) * (s[std::size_t(i)] - mean);
    num += a[std::size_t(i)] * s[std::size_t(i)];
  }
  double w = num * num / ssd;
  if (w > 1.0) w = 1.0;
  res.w = w;

  // p-value transforms
  if (n == 3) {
    const double pi6 = 1.90985931710274;
    const double stqr = 1.04719755119660;
    double p = pi6 * (std::asin(std::sqrt(w)) - stqr);
    res.p = std::clamp(p, 0.0, 1.0);
    return res;
  }
  if (n <= 11) {
    static const double c3[4] = {0.5440, -0.39978, 0.025054, -0.0006714};
    static const double c4[4] = {1.3822, -0.77857, 0.062767, -0.0020322};
    const double g = -2.273 + 0.459 * double(n);
    const double y = -std::log(g - std::log1p(-w));
    const double mu = poly(c3, 3, double(n));
    const double sigma = std::exp(poly(c4, 3, double(n)));
    res.p = std::clamp(1.0 - mathx::norm_cdf((y - mu) / sigma), 0.0, 1.0);
    return res;
  }
  static const double c5[4] = {-1.5861, -0.31082, -0.083751, 0.0038915};
  static const double c6[3] = {-0.4803, -0.082676, 0.0030302};
  const double logn = std::log(double(n));
  const double y = std::log1p(-w);
  const double mu = poly(c5, 3, logn);
  const double sigma = std::exp(poly(c6, 2, logn));
  res.p = std::clamp(1.0 - mathx::norm_cdf((y - mu) / sigma), 0.0, 1.0);
  return res;
}

// ---------------------------------------------------------------------------
// Multiple comparisons, effect sizes, consistency
// ---------------------------------------------------------------------------

std::vector<double> bh_fdr(std::span<const double> p_values) {
  const std::size_t m = p_values.size();
  for (double p : p_values)
    if (!(p >= 0.0 && p <= 1.0))
      throw InputError("bh_fdr: p-values must lie in [0, 1]");
  std::vector<std::size_t> idx(m);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(),
            [&](std::size_t i, std::size_t j) { return p_values[i] < p_values[j]; });
  std::vector<double> q(m);
  double running = 1.0;
  for (std::size_t r = m; r-- > 0;) {
    const double val =
        p_values[idx[r]] * double(m) / double(r + 1);
    running = std::min(running, std::min(1.0, val));
    q[idx[r]] = running;
  }
  return q;
}

EffectSize cohens_d(std::span<const double> a, std::span<const double> b) {
  if (a.size() < 2 || b.size() < 2)
    throw InputError("cohens_d: each sample needs at least 2 values");
  auto mean_var = [](std::span<const double> v) {
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= double(v.size());
    double ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    return std::pair<double, double>(mean, ss / double(v.size() - 1));
  };
  const auto [ma, va] = mean_var(a);
  const auto [mb, vb] = mean_var(b);
  const double pooled =
      ((double(a.size()) - 1.0) * va + (double(b.size()) - 1.0) * vb) /
      (double(a.size() + b.size()) - 2.0);
  EffectSize e;
  if (pooled <= 0.0) {
    e.infinite = ma != mb;
    e.d = e.infinite ? (ma > mb ? 1e308 : -1e308) : 0.0;
    return e;
  }
  e.d = (ma - mb) / std::sqrt(pooled);
  return e;
}

CvResult coefficient_of_variation(std::span<const double> values) {
  if (values.empty()) throw InputError("cv: empty input");
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= double(values.size());
  CvResult r;
  if (mean == 0.0) {
    r.defined = false;
    return r;
  }
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  const double pop_sd = std::sqrt(ss / double(values.size()));
  r.percent = 100.0 * pop_sd / mean;
  return r;
}

double power_ttest(double d, int n1, int n2, double alpha) {
  if (!(d > 0.0)) throw ConfigError("power_ttest: effect size must be positive");
  if (n1 < 2 || n2 < 2) throw InputError("power_ttest: groups need n >= 2");
  if (!(alpha > 0.0 && alpha < 1.0))
    throw InputError("power_ttest: alpha outside (0, 1)");
  const double df = double(n1 + n2 - 2);
  const double delta =
      d * std::sqrt(double(n1) * double(n2) / double(n1 + n2));
  const double tcrit = mathx::t_ppf(1.0 - alpha / 2.0, df);
  const double power = 1.0 - mathx::noncentral_t_cdf(tcrit, df, delta) +
                       mathx::noncentral_t_cdf(-tcrit, df, delta);
  return std::clamp(power, 0.0, 1.0);
}

int required_n(double d, double power, double alpha) {
  if (!(d > 0.0)) throw ConfigError("required_n: effect size must be positive");
  if (!(power > 0.0 && power < 1.0))
    throw InputError("required_n: power outside (0, 1)");
  for (int n = 2; n <= 1000000; ++n) {
    if (power_ttest(d, n, n, alpha) >= power) return n;
  }
  throw ConfigError("required_n: target power unattainable");
}

// ---------------------------------------------------------------------------
// Metric table CSV
// ---------------------------------------------------------------------------

void write_metric_csv(const std::string& path,
                      std::span<const MetricSample> rows) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write metrics csv: " + path);
  os << "model,dataset,fold,accuracy,f1_macro,recall,auroc\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%s,%s,%s,%.17g,%.17g,%.17g,%.17g\n",
                  r.model.c_str(), r.dataset.c_str(), r.fold.c_str(),
                  r.accuracy, r.f1_macro, r.recall, r.auroc);
    os << buf;
  }
}

std::vector<MetricSample> read_metric_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read metrics csv: " + path);
  std::string line;
  if (!std::getline(is, line)) throw IoError("empty metrics csv: " + path);
  if (line != "model,dataset,fold,accuracy,f1_macro,recall,auroc")
    throw InputError("unexpected metrics csv header in " + path);
  std::vector<MetricSample> out;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string field;
    std::vector<std::string> fields;
    while (std::getline(ss, field, ',')) fields.push_back(field);
    if (fields.size() != 7)
      throw InputError("bad metrics csv row: " + line);
    MetricSample r;
    r.model = fields[0];
    r.dataset = fields[1];
    r.fold = fields[2];
    r.accuracy = std::stod(fields[3]);
    r.f1_macro = std::stod(fields[4]);
    r.recall = std::stod(fields[5]);
    r.auroc = std::stod(fields[6]);
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace kanlab::stats
