#pragma once

#include <string>
#include <vector>

#include "kanlab/layers.hpp"
#include "kanlab/preprocess.hpp"
#include "kanlab/stats.hpp"
#include "kanlab/trainer.hpp"

namespace kanlab {

struct PreprocessConfig {
  int slices_per_subject = 100;
  int slice_size = 224;   // 2D resample target per axis
  int volume_size = 128;  // 3D resample target per axis
  double sigma_mm = 1.0;
};

struct GraphConfig {
  int segments = 1000;
  int knn = 6;
  double compactness = 0.1;
  int iterations = 10;
  bool include_centroids = true;
  bool weighted_adjacency = true;
};

// One experiment: datasets, model, protocol, training and stats options.
// JSON schema is strict: unknown keys are configuration errors.
struct ExperimentConfig {
  std::vector<std::string> datasets;  // manifest paths
  Family family = Family::cnn;
  Dimensionality dim = Dimensionality::d2;
  std::string protocol = "isolated_cv";  // isolated_cv | loocv | holdout
  int folds = 5;
  TrainConfig train;
  bool train_batch_size_set = false;
  PreprocessConfig preprocess;
  GraphConfig graph;
  int bootstrap_samples = 2000;
  std::string output_dir;
  std::uint64_t seed = 0;
  int jobs = 1;

  static ExperimentConfig from_json_file(const std::string& path);
  static ExperimentConfig from_json_text(const std::string& text);
  std::string to_json() const;
  void validate() const;
  std::string model_id() const;  // e.g. "cnn_2d"
};

struct RunOutputs {
  std::string run_dir;
  std::string metrics_csv;
  std::string scores_csv;
  std::vector<stats::MetricSample> metrics;
};

// Full pipeline: preprocess -> fold plan -> train -> evaluate; writes
// config.json, plan.json, per-fold checkpoints + history and metrics.csv
// (per-fold rows plus a pooled row of subject-level predictions).
RunOutputs cmd_run(const ExperimentConfig& config);

struct CompareOptions {
  std::vector<std::string> metric_csvs;
  std::string out_dir;
  std::string mode = "auto";  // auto | wilcoxon | subtract
  // Wilcoxon pairing unit. The default pairs per-fold metrics; the
  // bootstrap unit pairs metrics of resampled subject sets instead (needs
  // score_csvs), for comparisons finer than the exact floor at few folds.
  std::string unit = "per_fold";  // per_fold | bootstrap_scores
  std::vector<std::string> score_csvs;
  std::uint64_t seed = 0;
  int bootstrap_samples = 2000;
};

struct SubjectScoreRow {
  std::string model, dataset, subject;
  int label = 0;
  double score = 0.0;
};

std::vector<SubjectScoreRow> read_subject_scores_csv(const std::string& path);

struct CompareOutputs {
  std::string comparisons_csv;
  std::string comparisons_json;
  std::string cv_table_csv;
  std::vector<stats::ComparisonResult> comparisons;
  // subtraction-mode rows: comparison, dataset, metric, difference
  struct Difference {
    std::string comparison;
    std::string dataset;
    std::string metric;
    double value = 0.0;
  };
  std::vector<Difference> differences;
};

CompareOutputs cmd_compare(const CompareOptions& options);

}  // namespace kanlab
