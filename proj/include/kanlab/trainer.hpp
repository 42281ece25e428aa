#pragma once

#include <array>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "kanlab/graphs.hpp"
#include "kanlab/layers.hpp"
#include "kanlab/preprocess.hpp"
#include "kanlab/tensor.hpp"

namespace kanlab {

struct TrainConfig {
  double learning_rate = 1e-4;
  double weight_decay = 1e-5;
  int patience = 15;
  int max_epochs = 100;
  int batch_size = 64;
  std::uint64_t seed = 0;

  void validate() const;
};

// ---------------------------------------------------------------------------
// Optimization
// ---------------------------------------------------------------------------

struct AdamState {
  std::vector<std::vector<double>> m, v;
  std::int64_t step = 0;
};

// Standard Adam (beta1 0.9, beta2 0.999, eps 1e-8, bias correction); weight
// decay enters as an L2 term added to the gradient. Parameter gradients are
// read from each tensor's grad buffer.
void adam_step(std::vector<Param>& params, AdamState& state,
               const TrainConfig& config);

// Weighted cross-entropy over two classes with per-class weights inversely
// proportional to class counts, normalized to mean one. Returns the weighted
// mean of -log softmax at the true class.
Tensor weighted_ce_loss(const Tensor& logits, std::span<const int> labels,
                        std::array<std::int64_t, 2> class_counts);
std::array<double, 2> ce_class_weights(std::array<std::int64_t, 2> counts);

// ---------------------------------------------------------------------------
// Validation protocols. Folds carry global subject ids of the form
// "<dataset>/<subject>" so hold-out plans spanning datasets stay unambiguous.
// ---------------------------------------------------------------------------

struct Fold {
  std::vector<std::string> train_ids;
  std::vector<std::string> val_ids;  // early-stopping split
  std::vector<std::string> test_ids;
};

struct FoldPlan {
  std::string protocol;
  std::vector<Fold> folds;
};

std::string global_subject_id(const DatasetManifest& m,
                              const SubjectRecord& s);

// Subjects (groups) partitioned into k folds with per-fold class counts
// within one subject of the global ratio; the early-stopping validation set
// is carved from the training side (about 10%, at least one subject per
// class present in training).
FoldPlan stratified_group_kfold(const DatasetManifest& manifest, int k,
                                std::uint64_t seed);

// One fold per subject; fold i tests exactly subject i.
FoldPlan loocv_plan(const DatasetManifest& manifest, std::uint64_t seed);

// Exactly three datasets; each rotation trains on two and tests on the third.
FoldPlan holdout_plan(std::span<const DatasetManifest> manifests,
                      std::uint64_t seed);

// Throws if any fold leaks subjects between train/val/test.
void validate_fold_plan(const FoldPlan& plan);

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

// One training sample: an image (cnn/convkan) or a graph (gcn), tagged with
// its subject for leakage-free grouping and subject-level aggregation.
struct Sample {
  Tensor image;        // [channels x spatial...] for image families
  CsrAdjacency adj;    // gcn
  Tensor features;     // gcn node features
  int label = 0;
  std::string subject_gid;
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
};

struct TrainResult {
  std::vector<EpochRecord> history;
  int best_epoch = 0;
  double best_val_loss = 0.0;
  int epochs_run = 0;
};

// Trains until the validation loss fails to improve for `patience`
// consecutive epochs (or max_epochs), then restores the parameters of the
// best epoch. Deterministic for a given (samples, config, seed).
TrainResult train_loop(Model& model, std::span<const Sample> train,
                       std::span<const Sample> val, const TrainConfig& config);

// Class-1 softmax probability per sample, eval mode.
std::vector<double> predict_scores(Model& model, std::span<const Sample> samples);

// Mean class-1 probability per subject, in first-appearance order.
struct SubjectScore {
  std::string subject_gid;
  int label = 0;
  double score = 0.0;
};
std::vector<SubjectScore> aggregate_by_subject(std::span<const Sample> samples,
                                               std::span<const double> scores);

void write_history_csv(const std::string& path,
                       std::span<const EpochRecord> history);

}  // namespace kanlab
