#pragma once

#include <span>
#include <string>
#include <vector>

#include "kanlab/common.hpp"

namespace kanlab::stats {

// ---------------------------------------------------------------------------
// Classification metrics
// ---------------------------------------------------------------------------

struct Metrics {
  double accuracy = 0.0;
  double f1_macro = 0.0;
  double f1_micro = 0.0;
  double recall = 0.0;  // micro; equals accuracy for binary complete tables
  double auroc = 0.0;
};

// scores are class-1 probabilities; labels binary. Threshold 0.5; AUROC via
// the midrank Mann-Whitney statistic. Throws InputError when only one class
// is present (AUROC undefined).
Metrics classification_metrics(std::span<const double> scores,
                               std::span<const int> labels);

// AUROC alone, for callers that guard the single-class case themselves.
double auroc(std::span<const double> scores, std::span<const int> labels);

// ---------------------------------------------------------------------------
// Resampling and tests
// ---------------------------------------------------------------------------

struct Interval {
  double low = 0.0, high = 0.0;
};

// Percentile bootstrap interval of the resampled mean.
Interval bootstrap_ci(std::span<const double> values, double level = 0.95,
                      int b = 2000, std::uint64_t seed = 0);

struct WilcoxonResult {
  double p = 1.0;
  double w_plus = 0.0;     // sum of positive-difference ranks
  int n_effective = 0;     // pairs after dropping zero differences
  bool degenerate = false; // all differences zero
  bool exact = false;      // exact enumeration (n <= 12) vs normal approx
};

// Two-sided Wilcoxon signed-rank test. Zero differences are dropped; the
// exact distribution is evaluated by dynamic programming over the signed
// rank sums for n <= 12, and by a tie- and continuity-corrected normal
// approximation above.
WilcoxonResult wilcoxon_signed_rank(std::span<const double> a,
                                    std::span<const double> b);

struct ShapiroResult {
  double w = 1.0;
  double p = 1.0;
  bool degenerate = false;  // zero variance
};

// Shapiro-Wilk normality test, AS R94 approximation (3 <= n <= 5000).
ShapiroResult shapiro_wilk(std::span<const double> x);

// Benjamini-Hochberg step-up q-values: monotone, clipped to 1, original
// order restored.
std::vector<double> bh_fdr(std::span<const double> p_values);

struct EffectSize {
  double d = 0.0;
  bool infinite = false;  // zero pooled SD with nonzero mean difference
};

// (mean(a) - mean(b)) / pooled SD with (n-1) denominators.
EffectSize cohens_d(std::span<const double> a, std::span<const double> b);

struct CvResult {
  double percent = 0.0;
  bool defined = true;  // false when the mean is zero
};

// 100 * population SD / mean.
CvResult coefficient_of_variation(std::span<const double> values);

// Power of the two-sided two-sample t test at effect size d via the
// noncentral t distribution.
double power_ttest(double d, int n1, int n2, double alpha = 0.05);
// Smallest equal group size reaching `power`.
int required_n(double d, double power, double alpha = 0.05);

// ---------------------------------------------------------------------------
// Metric tables (CSV interface shared by the CLI and the comparison pass)
// ---------------------------------------------------------------------------

struct MetricSample {
  std::string model;
  std::string dataset;
  std::string fold;
  double accuracy = 0.0;
  double f1_macro = 0.0;
  double recall = 0.0;
  double auroc = 0.0;
};

void write_metric_csv(const std::string& path,
                      std::span<const MetricSample> rows);
std::vector<MetricSample> read_metric_csv(const std::string& path);

struct ComparisonResult {
  std::string dataset;
  std::string pair_a, pair_b;
  std::string metric;
  double p_raw = 1.0;
  double p_corrected = 1.0;
  double cohens_d = 0.0;
  double ci_low = 0.0, ci_high = 0.0;
  int n = 0;
  bool degenerate = false;
};

}  // namespace kanlab::stats
