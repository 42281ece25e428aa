#include "kanlab/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <thread>

#include <json.hpp>

#include "kanlab/graphs.hpp"

namespace kanlab {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void reject_unknown_keys(const json& j, const std::set<std::string>& known,
                         const std::string& where) {
  for (auto& [key, value] : j.items()) {
    if (!known.count(key))
      throw ConfigError("unknown config key \"" + key + "\" in " + where);
  }
}

}  // namespace

ExperimentConfig ExperimentConfig::from_json_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read config: " + path);
  std::string text((std::istreambuf_iterator<char>(is)),
                   std::istreambuf_iterator<char>());
  return from_json_text(text);
}

ExperimentConfig ExperimentConfig::from_json_text(const std::string& text) {
  json j = json::parse(text);
  reject_unknown_keys(j,
                      {"datasets", "model", "protocol", "folds", "train",
                       "preprocess", "graph", "stats", "output_dir", "seed",
                       "jobs"},
                      "config root");
  ExperimentConfig c;
  c.datasets = j.at("datasets").get<std::vector<std::string>>();
  const auto& model = j.at("model");
  reject_unknown_keys(model, {"family", "dimensionality"}, "model");
  c.family = family_from(model.at("family").get<std::string>());
  c.dim = dimensionality_from(model.at("dimensionality").get<std::string>());
  c.protocol = j.value("protocol", std::string("isolated_cv"));
  c.folds = j.value("folds", 5);
  if (j.contains("train")) {
    const auto& t = j["train"];
    reject_unknown_keys(t,
                        {"learning_rate", "weight_decay", "patience",
                         "max_epochs", "batch_size"},
                        "train");
    c.train.learning_rate = t.value("learning_rate", c.train.learning_rate);
    c.train.weight_decay = t.value("weight_decay", c.train.weight_decay);
    c.train.patience = t.value("patience", c.train.patience);
    c.train.max_epochs = t.value("max_epochs", c.train.max_epochs);
    if (t.contains("batch_size")) {
      c.train.batch_size = t["batch_size"].get<int>();
      c.train_batch_size_set = true;
    }
  }
  if (j.contains("preprocess")) {
    const auto& p = j["preprocess"];
    reject_unknown_keys(
        p, {"slices_per_subject", "slice_size", "volume_size", "sigma_mm"},
        "preprocess");
    c.preprocess.slices_per_subject =
        p.value("slices_per_subject", c.preprocess.slices_per_subject);
    c.preprocess.slice_size = p.value("slice_size", c.preprocess.slice_size);
    c.preprocess.volume_size = p.value("volume_size", c.preprocess.volume_size);
    c.preprocess.sigma_mm = p.value("sigma_mm", c.preprocess.sigma_mm);
  }
  if (j.contains("graph")) {
    const auto& g = j["graph"];
    reject_unknown_keys(g,
                        {"segments", "knn", "compactness", "iterations",
                         "include_centroids", "weighted_adjacency"},
                        "graph");
    c.graph.segments = g.value("segments", c.graph.segments);
    c.graph.knn = g.value("knn", c.graph.knn);
    c.graph.compactness = g.value("compactness", c.graph.compactness);
    c.graph.iterations = g.value("iterations", c.graph.iterations);
    c.graph.include_centroids =
        g.value("include_centroids", c.graph.include_centroids);
    c.graph.weighted_adjacency =
        g.value("weighted_adjacency", c.graph.weighted_adjacency);
  }
  if (j.contains("stats")) {
    const auto& s = j["stats"];
    reject_unknown_keys(s, {"bootstrap_samples"}, "stats");
    c.bootstrap_samples = s.value("bootstrap_samples", c.bootstrap_samples);
  }
  c.output_dir = j.value("output_dir", std::string());
  c.seed = j.value("seed", std::uint64_t(0));
  c.jobs = j.value("jobs", 1);
  if (!c.train_batch_size_set)
    c.train.batch_size = c.dim == Dimensionality::d2 ? 64 : 1;
  return c;
}

std::string ExperimentConfig::to_json() const {
  json j;
  j["datasets"] = datasets;
  j["model"] = {{"family", family_name(family)},
                {"dimensionality", dimensionality_name(dim)}};
  j["protocol"] = protocol;
  j["folds"] = folds;
  j["train"] = {{"learning_rate", train.learning_rate},
                {"weight_decay", train.weight_decay},
                {"patience", train.patience},
                {"max_epochs", train.max_epochs},
                {"batch_size", train.batch_size}};
  j["preprocess"] = {{"slices_per_subject", preprocess.slices_per_subject},
                     {"slice_size", preprocess.slice_size},
                     {"volume_size", preprocess.volume_size},
                     {"sigma_mm", preprocess.sigma_mm}};
  j["graph"] = {{"segments", graph.segments},
                {"knn", graph.knn},
                {"compactness", graph.compactness},
                {"iterations", graph.iterations},
                {"include_centroids", graph.include_centroids},
                {"weighted_adjacency", graph.weighted_adjacency}};
  j["stats"] = {{"bootstrap_samples", bootstrap_samples}};
  j["output_dir"] = output_dir;
  j["seed"] = seed;
  j["jobs"] = jobs;
  return j.dump(2);
}

void ExperimentConfig::validate() const {
  if (protocol == "holdout") {
    if (datasets.size() != 3)
      throw ConfigError("holdout protocol requires exactly 3 datasets");
  } else if (protocol == "isolated_cv" || protocol == "loocv") {
    if (datasets.size() != 1)
      throw ConfigError(protocol + " protocol requires exactly 1 dataset");
  } else {
    throw ConfigError("unknown protocol: " + protocol);
  }
  if (output_dir.empty()) throw ConfigError("output_dir is required");
  if (folds < 2 && protocol == "isolated_cv")
    throw ConfigError("isolated_cv needs folds >= 2");
  if (jobs < 1) throw ConfigError("jobs must be >= 1");
  train.validate();
}

std::string ExperimentConfig::model_id() const {
  return family_name(family) + "_" + dimensionality_name(dim);
}

// ---------------------------------------------------------------------------
// Sample preparation
// ---------------------------------------------------------------------------

namespace {

struct SubjectSamples {
  std::string gid;
  int label = 0;
  std::vector<Sample> samples;
};

// Full preprocessing for one subject under the configured pipeline.
SubjectSamples prepare_subject(const ExperimentConfig& cfg,
                               const DatasetManifest& manifest,
                               const SubjectRecord& rec) {
  SubjectSamples out;
  out.gid = global_subject_id(manifest, rec);
  out.label = rec.label == ClassLabel::pd ? 1 : 0;
  Volume vol = load_volume(rec.volume_path, manifest.voxel_size_mm);

  const bool graphs = cfg.family == Family::gcn;
  if (cfg.dim == Dimensionality::d2) {
    const int center = manifest.center_slice.value_or(int(vol.data.dim(0) / 2));
    auto slices =
        extract_slices(vol, center, cfg.preprocess.slices_per_subject);
    const std::int64_t target = cfg.preprocess.slice_size;
    const std::array<double, 2> spacing{
        vol.voxel_size_mm[1] * double(vol.data.dim(1)) / double(target),
        vol.voxel_size_mm[2] * double(vol.data.dim(2)) / double(target)};
    for (auto& slice : slices) {
      auto x = resample(slice, {target, target});
      x = normalize_intensity(x);  // per-slice normalization in 2D
      x = gaussian_filter(x, cfg.preprocess.sigma_mm, spacing);
      Sample s;
      s.label = out.label;
      s.subject_gid = out.gid;
      if (graphs) {
        auto seg = slic_segment(x, cfg.graph.segments, cfg.graph.compactness,
                                cfg.graph.iterations);
        GraphBuildOptions opt;
        opt.k = cfg.graph.knn;
        opt.include_centroids = cfg.graph.include_centroids;
        Graph g = build_graph(seg, x, opt);
        s.adj = normalized_adjacency(g, cfg.graph.weighted_adjacency);
        s.features = g.node_features;
      } else {
        std::vector<double> data(x.data().begin(), x.data().end());
        s.image = Tensor::from({1, target, target}, std::move(data));
      }
      out.samples.push_back(std::move(s));
    }
  } else {
    const std::int64_t target = cfg.preprocess.volume_size;
    std::array<double, 3> spacing{};
    for (int a = 0; a < 3; ++a)
      spacing[std::size_t(a)] = vol.voxel_size_mm[std::size_t(a)] *
                                double(vol.data.dim(a)) / double(target);
    auto x = resample(vol.data, {target, target, target});
    x = normalize_intensity(x);  // per-volume normalization in 3D
    x = gaussian_filter(x, cfg.preprocess.sigma_mm, spacing);
    Sample s;
    s.label = out.label;
    s.subject_gid = out.gid;
    if (graphs) {
      auto seg = slic_segment(x, cfg.graph.segments, cfg.graph.compactness,
                              cfg.graph.iterations);
      GraphBuildOptions opt;
      opt.k = cfg.graph.knn;
      opt.include_centroids = cfg.graph.include_centroids;
      Graph g = build_graph(seg, x, opt);
      s.adj = normalized_adjacency(g, cfg.graph.weighted_adjacency);
      s.features = g.node_features;
    } else {
      std::vector<double> data(x.data().begin(), x.data().end());
      s.image = Tensor::from({1, target, target, target}, std::move(data));
    }
    out.samples.push_back(std::move(s));
  }
  return out;
}

std::vector<Sample> gather(const std::map<std::string, SubjectSamples>& bank,
                           const std::vector<std::string>& gids) {
  std::vector<Sample> out;
  for (const auto& gid : gids) {
    auto it = bank.find(gid);
    if (it == bank.end()) throw Error("missing prepared subject " + gid);
    out.insert(out.end(), it->second.samples.begin(),
               it->second.samples.end());
  }
  return out;
}

struct FoldEval {
  std::vector<stats::MetricSample> rows;
  std::vector<SubjectScore> subject_scores;
  TrainResult train_result;
};

double nan_value() { return std::numeric_limits<double>::quiet_NaN(); }

stats::MetricSample metrics_row(const std::string& model,
                                const std::string& dataset,
                                const std::string& fold,
                                std::span<const SubjectScore> scores) {
  std::vector<double> s;
  std::vector<int> y;
  for (const auto& sc : scores) {
    s.push_back(sc.score);
    y.push_back(sc.label);
  }
  stats::MetricSample row;
  row.model = model;
  row.dataset = dataset;
  row.fold = fold;
  const bool both_classes =
      std::count(y.begin(), y.end(), 1) > 0 &&
      std::count(y.begin(), y.end(), 0) > 0;
  if (both_classes) {
    auto m = stats::classification_metrics(s, y);
    row.accuracy = m.accuracy;
    row.f1_macro = m.f1_macro;
    row.recall = m.recall;
    row.auroc = m.auroc;
  } else {
    // single-class test sets (loocv folds): threshold metrics only
    std::int64_t correct = 0;
    for (std::size_t i = 0; i < s.size(); ++i)
      correct += (s[i] >= 0.5 ? 1 : 0) == y[i];
    row.accuracy = double(correct) / double(s.size());
    row.recall = row.accuracy;
    row.f1_macro = nan_value();
    row.auroc = nan_value();
  }
  return row;
}

}  // namespace

RunOutputs cmd_run(const ExperimentConfig& config) {
  config.validate();
  fs::create_directories(config.output_dir);

  std::vector<DatasetManifest> manifests;
  for (const auto& path : config.datasets)
    manifests.push_back(load_manifest(path));

  // plan
  Rng root(config.seed);
  const std::uint64_t plan_seed = root.split("plan").next_u64();
  FoldPlan plan;
  if (config.protocol == "isolated_cv")
    plan = stratified_group_kfold(manifests[0], config.folds, plan_seed);
  else if (config.protocol == "loocv")
    plan = loocv_plan(manifests[0], plan_seed);
  else
    plan = holdout_plan(manifests, plan_seed);

  // resolved config + plan on disk
  {
    std::ofstream os(fs::path(config.output_dir) / "config.json");
    os << config.to_json() << "\n";
    json pj;
    pj["protocol"] = plan.protocol;
    json folds = json::array();
    for (const auto& f : plan.folds)
      folds.push_back({{"train", f.train_ids},
                       {"validation", f.val_ids},
                       {"test", f.test_ids}});
    pj["folds"] = folds;
    std::ofstream ps(fs::path(config.output_dir) / "plan.json");
    ps << pj.dump(2) << "\n";
    // resolved pipeline policies that the config schema does not carry
    json prov;
    prov["normalization_scope"] =
        config.dim == Dimensionality::d2 ? "per_slice" : "per_volume";
    prov["node_features"] =
        config.family != Family::gcn ? "n/a"
        : (config.graph.include_centroids
               ? "mean_intensity, relative_size, normalized_centroids"
               : "mean_intensity, relative_size");
    prov["adjacency_weights"] =
        config.graph.weighted_adjacency ? "edge_weights" : "unweighted";
    prov["subject_aggregation"] = "mean_softmax_probability";
    std::ofstream pr(fs::path(config.output_dir) / "provenance.json");
    pr << prov.dump(2) << "\n";
  }

  // preprocess every subject once
  std::map<std::string, SubjectSamples> bank;
  {
    std::vector<std::pair<const DatasetManifest*, const SubjectRecord*>> todo;
    for (const auto& m : manifests)
      for (const auto& s : m.subjects) todo.emplace_back(&m, &s);
    std::vector<SubjectSamples> prepared(todo.size());
    parallel_for(std::int64_t(todo.size()), [&](std::int64_t b, std::int64_t e) {
      for (std::int64_t i = b; i < e; ++i)
        prepared[std::size_t(i)] =
            prepare_subject(config, *todo[std::size_t(i)].first,
                            *todo[std::size_t(i)].second);
    });
    for (auto& p : prepared) bank.emplace(p.gid, std::move(p));
  }

  // map each test subject to its dataset name for per-dataset reporting
  std::map<std::string, std::string> dataset_of;
  for (const auto& m : manifests)
    for (const auto& s : m.subjects)
      dataset_of[global_subject_id(m, s)] = m.dataset_name;

  const std::string model_id = config.model_id();
  const int fold_count = int(plan.folds.size());
  std::vector<FoldEval> evals(static_cast<std::size_t>(fold_count));

  const int hw = int(std::thread::hardware_concurrency());
  const int fold_workers = std::max(1, std::min(config.jobs, fold_count));
  set_max_threads(std::max(1, hw / fold_workers));

  auto run_fold = [&](int fi) {
    const Fold& fold = plan.folds[std::size_t(fi)];
    const std::string fold_dir =
        (fs::path(config.output_dir) / ("fold_" + std::to_string(fi)))
            .string();
    fs::create_directories(fold_dir);

    ModelConfig mc = ModelConfig::preset(config.family, config.dim);
    if (config.family == Family::gcn) {
      mc.node_features = config.graph.include_centroids
                             ? (config.dim == Dimensionality::d2 ? 4 : 5)
                             : 2;
    }
    Rng fold_rng = Rng(config.seed).split("fold" + std::to_string(fi));
    Model model(mc, fold_rng.split("model").next_u64());

    auto train_samples = gather(bank, fold.train_ids);
    auto val_samples = gather(bank, fold.val_ids);
    auto test_samples = gather(bank, fold.test_ids);

    TrainConfig tc = config.train;
    tc.seed = fold_rng.split("train").next_u64();
    FoldEval ev;
    ev.train_result = train_loop(model, train_samples, val_samples, tc);

    write_history_csv(fold_dir + "/history.csv", ev.train_result.history);
    {
      char extra[128];
      std::snprintf(extra, sizeof extra,
                    "{\"epoch\": %d, \"best_val_loss\": %.17g}",
                    ev.train_result.best_epoch,
                    ev.train_result.best_val_loss);
      model.save_checkpoint(fold_dir, extra);
    }

    auto scores = predict_scores(model, test_samples);
    ev.subject_scores = aggregate_by_subject(test_samples, scores);

    // in hold-out rotations the test set is one whole dataset; in isolated
    // protocols it is a slice of the single dataset
    const std::string dataset =
        dataset_of.at(ev.subject_scores.front().subject_gid);
    ev.rows.push_back(metrics_row(model_id, dataset,
                                  std::to_string(fi), ev.subject_scores));
    evals[std::size_t(fi)] = std::move(ev);
  };

  if (fold_workers <= 1) {
    for (int fi = 0; fi < fold_count; ++fi) run_fold(fi);
  } else {
    std::atomic<int> next{0};
    auto worker = [&] {
      for (;;) {
        const int fi = next.fetch_add(1);
        if (fi >= fold_count) break;
        run_fold(fi);
      }
    };
    std::vector<std::thread> pool;
    for (int i = 0; i < fold_workers - 1; ++i) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();
  }
  set_max_threads(hw);

  // pooled subject-level predictions across folds
  RunOutputs out;
  out.run_dir = config.output_dir;
  std::vector<SubjectScore> pooled;
  for (const auto& ev : evals) {
    for (const auto& r : ev.rows) out.metrics.push_back(r);
    pooled.insert(pooled.end(), ev.subject_scores.begin(),
                  ev.subject_scores.end());
  }
  // pooled rows per dataset
  std::map<std::string, std::vector<SubjectScore>> by_dataset;
  for (const auto& s : pooled)
    by_dataset[dataset_of.at(s.subject_gid)].push_back(s);
  for (const auto& [dataset, scores] : by_dataset)
    out.metrics.push_back(metrics_row(model_id, dataset, "pooled", scores));

  out.metrics_csv = (fs::path(config.output_dir) / "metrics.csv").string();
  stats::write_metric_csv(out.metrics_csv, out.metrics);

  out.scores_csv =
      (fs::path(config.output_dir) / "subject_scores.csv").string();
  {
    std::ofstream os(out.scores_csv);
    if (!os) throw IoError("cannot write " + out.scores_csv);
    os << "model,dataset,subject,label,score\n";
    char buf[256];
    for (const auto& s : pooled) {
      std::snprintf(buf, sizeof buf, "%s,%s,%s,%d,%.17g\n", model_id.c_str(),
                    dataset_of.at(s.subject_gid).c_str(),
                    s.subject_gid.c_str(), s.label, s.score);
      os << buf;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Comparison pass
// ---------------------------------------------------------------------------

namespace {

struct MetricKey {
  std::string model, dataset;
  bool operator<(const MetricKey& o) const {
    return std::tie(model, dataset) < std::tie(o.model, o.dataset);
  }
};

const std::vector<std::pair<std::string,
                            double stats::MetricSample::*>>&
metric_fields() {
  static const std::vector<std::pair<std::string,
                                     double stats::MetricSample::*>> fields{
      {"accuracy", &stats::MetricSample::accuracy},
      {"f1_macro", &stats::MetricSample::f1_macro},
      {"recall", &stats::MetricSample::recall},
      {"auroc", &stats::MetricSample::auroc}};
  return fields;
}

}  // namespace

std::vector<SubjectScoreRow> read_subject_scores_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read " + path);
  std::string line;
  std::getline(is, line);
  if (line != "model,dataset,subject,label,score")
    throw InputError("unexpected scores header in " + path);
  std::vector<SubjectScoreRow> out;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string f;
    std::vector<std::string> fields;
    while (std::getline(ss, f, ',')) fields.push_back(f);
    if (fields.size() != 5) throw InputError("bad scores row: " + line);
    out.push_back({fields[0], fields[1], fields[2], std::stoi(fields[3]),
                   std::stod(fields[4])});
  }
  return out;
}

namespace {

// Paired bootstrap replicates of the metric set for two models scored on
// the same subjects: each replicate resamples one subject multiset and
// evaluates both models on it.
void bootstrap_metric_pairs(
    const std::vector<SubjectScoreRow>& a, const std::vector<SubjectScoreRow>& b,
    int replicates, Rng rng,
    std::array<std::pair<std::vector<double>, std::vector<double>>, 4>& out) {
  std::map<std::string, std::pair<double, int>> score_a, score_b;
  for (const auto& r : a) score_a[r.subject] = {r.score, r.label};
  for (const auto& r : b) score_b[r.subject] = {r.score, r.label};
  std::vector<std::string> common;
  for (const auto& [subject, v] : score_a)
    if (score_b.count(subject)) common.push_back(subject);
  if (common.size() < 3)
    throw InputError("bootstrap comparison needs >= 3 shared subjects");
  const std::size_t n = common.size();
  std::vector<double> sa(n), sb(n);
  std::vector<int> labels(n);
  for (int rep = 0; rep < replicates; ++rep) {
    int classes[2] = {0, 0};
    // redraw on single-class resamples; both models share the subject set
    for (int attempt = 0; attempt < 64; ++attempt) {
      classes[0] = classes[1] = 0;
      for (std::size_t i = 0; i < n; ++i) {
        const auto& subject = common[std::size_t(rng.index(n))];
        sa[i] = score_a.at(subject).first;
        sb[i] = score_b.at(subject).first;
        labels[i] = score_a.at(subject).second;
        classes[labels[i]] += 1;
      }
      if (classes[0] > 0 && classes[1] > 0) break;
    }
    if (classes[0] == 0 || classes[1] == 0) continue;
    auto ma = stats::classification_metrics(sa, labels);
    auto mb = stats::classification_metrics(sb, labels);
    out[0].first.push_back(ma.accuracy);
    out[0].second.push_back(mb.accuracy);
    out[1].first.push_back(ma.f1_macro);
    out[1].second.push_back(mb.f1_macro);
    out[2].first.push_back(ma.recall);
    out[2].second.push_back(mb.recall);
    out[3].first.push_back(ma.auroc);
    out[3].second.push_back(mb.auroc);
  }
}

}  // namespace

CompareOutputs cmd_compare(const CompareOptions& options) {
  if (options.metric_csvs.empty())
    throw ConfigError("compare: at least one metrics csv required");
  if (options.out_dir.empty())
    throw ConfigError("compare: output directory required");
  fs::create_directories(options.out_dir);

  std::vector<stats::MetricSample> rows;
  for (const auto& path : options.metric_csvs) {
    auto part = stats::read_metric_csv(path);
    rows.insert(rows.end(), part.begin(), part.end());
  }

  // fold rows keyed by (model, dataset); pooled rows are summaries, not
  // comparison samples
  std::map<MetricKey, std::vector<stats::MetricSample>> groups;
  for (const auto& r : rows) {
    if (r.fold == "pooled") continue;
    groups[{r.model, r.dataset}].push_back(r);
  }
  for (auto& [key, g] : groups) {
    std::sort(g.begin(), g.end(),
              [](const stats::MetricSample& a, const stats::MetricSample& b) {
                return a.fold < b.fold;
              });
  }

  std::set<std::string> datasets, models;
  for (const auto& [key, g] : groups) {
    datasets.insert(key.dataset);
    models.insert(key.model);
  }

  std::string mode = options.mode;
  if (mode == "auto") {
    bool all_single = true;
    for (const auto& [key, g] : groups) all_single &= g.size() == 1;
    mode = all_single ? "subtract" : "wilcoxon";
  }

  CompareOutputs out;

  if (mode == "subtract") {
    // descriptive differences, the hold-out analysis layout: within-dimension
    // pairs plus 3d-minus-2d per family
    auto value_of = [&](const std::string& model, const std::string& dataset,
                        double stats::MetricSample::*field) {
      auto it = groups.find({model, dataset});
      if (it == groups.end() || it->second.size() != 1)
        throw InputError("subtract mode expects exactly one row per model and dataset");
      return it->second.front().*field;
    };
    static const char* families[] = {"cnn", "convkan", "gcn"};
    for (const auto& dataset : datasets) {
      for (const char* fam : families) {
        const std::string m2 = std::string(fam) + "_2d";
        const std::string m3 = std::string(fam) + "_3d";
        if (!groups.count({m2, dataset}) || !groups.count({m3, dataset}))
          continue;
        for (const auto& [name, field] : metric_fields())
          out.differences.push_back({"3d_" + std::string(fam) + " - 2d_" +
                                         std::string(fam),
                                     dataset, name,
                                     value_of(m3, dataset, field) -
                                         value_of(m2, dataset, field)});
      }
      for (const char* dim : {"2d", "3d"}) {
        for (std::size_t i = 0; i < 3; ++i)
          for (std::size_t j = i + 1; j < 3; ++j) {
            const std::string ma = std::string(families[i]) + "_" + dim;
            const std::string mb = std::string(families[j]) + "_" + dim;
            if (!groups.count({ma, dataset}) || !groups.count({mb, dataset}))
              continue;
            for (const auto& [name, field] : metric_fields())
              out.differences.push_back(
                  {ma + " - " + mb, dataset, name,
                   value_of(ma, dataset, field) -
                       value_of(mb, dataset, field)});
          }
      }
    }
  } else if (mode == "wilcoxon") {
    const bool bootstrap_unit = options.unit == "bootstrap_scores";
    if (options.unit != "per_fold" && !bootstrap_unit)
      throw ConfigError("compare: unknown unit " + options.unit);
    // subject scores per (model, dataset), for the bootstrap pairing unit
    std::map<MetricKey, std::vector<SubjectScoreRow>> score_groups;
    if (bootstrap_unit) {
      if (options.score_csvs.empty())
        throw ConfigError(
            "compare: bootstrap_scores unit needs subject score csvs");
      for (const auto& path : options.score_csvs)
        for (auto& r : read_subject_scores_csv(path))
          score_groups[{r.model, r.dataset}].push_back(std::move(r));
    }
    // per dataset: all model pairs, all metrics; paired per fold or per
    // bootstrap replicate
    for (const auto& dataset : datasets) {
      std::vector<std::string> present;
      for (const auto& model : models)
        if (groups.count({model, dataset})) present.push_back(model);
      std::vector<stats::ComparisonResult> dataset_results;
      for (std::size_t i = 0; i < present.size(); ++i) {
        for (std::size_t j = i + 1; j < present.size(); ++j) {
          std::array<std::pair<std::vector<double>, std::vector<double>>, 4>
              replicate_pairs;
          if (bootstrap_unit) {
            const auto ita = score_groups.find({present[i], dataset});
            const auto itb = score_groups.find({present[j], dataset});
            if (ita == score_groups.end() || itb == score_groups.end())
              throw InputError("compare: missing subject scores for " +
                               present[i] + " or " + present[j] + " on " +
                               dataset);
            bootstrap_metric_pairs(
                ita->second, itb->second, options.bootstrap_samples,
                Rng(options.seed)
                    .split("replicates/" + dataset + "/" + present[i] + "/" +
                           present[j]),
                replicate_pairs);
          }
          const auto& ga = groups.at({present[i], dataset});
          const auto& gb = groups.at({present[j], dataset});
          if (!bootstrap_unit && ga.size() != gb.size())
            throw InputError("compare: fold counts differ for " + present[i] +
                             " vs " + present[j] + " on " + dataset);
          int metric_index = -1;
          for (const auto& [name, field] : metric_fields()) {
            ++metric_index;
            std::vector<double> a, b;
            if (bootstrap_unit) {
              a = replicate_pairs[std::size_t(metric_index)].first;
              b = replicate_pairs[std::size_t(metric_index)].second;
            } else {
              for (std::size_t f = 0; f < ga.size(); ++f) {
                const double va = ga[f].*field;
                const double vb = gb[f].*field;
                if (std::isnan(va) || std::isnan(vb)) continue;
                a.push_back(va);
                b.push_back(vb);
              }
            }
            stats::ComparisonResult r;
            r.dataset = dataset;
            r.pair_a = present[i];
            r.pair_b = present[j];
            r.metric = name;
            r.n = int(a.size());
            if (a.size() >= 3) {
              auto w = stats::wilcoxon_signed_rank(a, b);
              r.p_raw = w.p;
              r.degenerate = w.degenerate;
              auto d = stats::cohens_d(a, b);
              r.cohens_d = d.infinite
                               ? std::numeric_limits<double>::quiet_NaN()
                               : d.d;
              std::vector<double> diffs(a.size());
              for (std::size_t f = 0; f < a.size(); ++f)
                diffs[f] = a[f] - b[f];
              auto ci = stats::bootstrap_ci(
                  diffs, 0.95, options.bootstrap_samples,
                  Rng(options.seed)
                      .split(dataset + "/" + present[i] + "/" + present[j] +
                             "/" + name)
                      .next_u64());
              r.ci_low = ci.low;
              r.ci_high = ci.high;
            } else {
              r.p_raw = 1.0;
              r.degenerate = true;
            }
            dataset_results.push_back(std::move(r));
          }
        }
      }
      // Benjamini-Hochberg within the dataset's comparison family
      std::vector<double> ps;
      for (const auto& r : dataset_results) ps.push_back(r.p_raw);
      if (!ps.empty()) {
        auto corrected = stats::bh_fdr(ps);
        for (std::size_t k = 0; k < dataset_results.size(); ++k)
          dataset_results[k].p_corrected = corrected[k];
      }
      for (auto& r : dataset_results) out.comparisons.push_back(std::move(r));
    }
  } else {
    throw ConfigError("compare: unknown mode " + mode);
  }

  // consistency table: CV of per-dataset means per model and metric
  struct CvRow {
    std::string model, metric;
    double cv;
    int n_datasets;
  };
  std::vector<CvRow> cv_rows;
  for (const auto& model : models) {
    for (const auto& [name, field] : metric_fields()) {
      std::vector<double> per_dataset;
      for (const auto& dataset : datasets) {
        auto it = groups.find({model, dataset});
        if (it == groups.end()) continue;
        double acc = 0.0;
        int n = 0;
        for (const auto& r : it->second) {
          if (std::isnan(r.*field)) continue;
          acc += r.*field;
          ++n;
        }
        if (n > 0) per_dataset.push_back(acc / n);
      }
      if (per_dataset.size() < 2) continue;
      auto cv = stats::coefficient_of_variation(per_dataset);
      cv_rows.push_back(
          {model, name, cv.defined ? cv.percent : nan_value(),
           int(per_dataset.size())});
    }
  }

  // emit
  out.comparisons_csv = (fs::path(options.out_dir) / "comparisons.csv").string();
  out.comparisons_json =
      (fs::path(options.out_dir) / "comparisons.json").string();
  out.cv_table_csv = (fs::path(options.out_dir) / "cv_table.csv").string();
  {
    std::ofstream os(out.comparisons_csv);
    if (!os) throw IoError("cannot write " + out.comparisons_csv);
    char buf[512];
    if (mode == "subtract") {
      os << "comparison,dataset,metric,difference\n";
      for (const auto& d : out.differences) {
        std::snprintf(buf, sizeof buf, "%s,%s,%s,%.17g\n",
                      d.comparison.c_str(), d.dataset.c_str(),
                      d.metric.c_str(), d.value);
        os << buf;
      }
    } else {
      os << "dataset,comparison,metric,p,corrected_p,effect_size,ci_low,ci_high,n\n";
      for (const auto& r : out.comparisons) {
        std::snprintf(buf, sizeof buf,
                      "%s,%s vs %s,%s,%.17g,%.17g,%.17g,%.17g,%.17g,%d\n",
                      r.dataset.c_str(), r.pair_a.c_str(), r.pair_b.c_str(),
                      r.metric.c_str(), r.p_raw, r.p_corrected, r.cohens_d,
                      r.ci_low, r.ci_high, r.n);
        os << buf;
      }
    }
  }
  {
    json j = json::array();
    if (mode == "subtract") {
      for (const auto& d : out.differences)
        j.push_back({{"comparison", d.comparison},
                     {"dataset", d.dataset},
                     {"metric", d.metric},
                     {"difference", d.value}});
    } else {
      for (const auto& r : out.comparisons) {
        json e = {{"dataset", r.dataset},
                  {"comparison", r.pair_a + " vs " + r.pair_b},
                  {"metric", r.metric},
                  {"p", r.p_raw},
                  {"corrected_p", r.p_corrected},
                  {"n", r.n},
                  {"degenerate", r.degenerate}};
        if (std::isnan(r.cohens_d))
          e["effect_size"] = nullptr;
        else
          e["effect_size"] = r.cohens_d;
        e["ci_low"] = r.ci_low;
        e["ci_high"] = r.ci_high;
        j.push_back(e);
      }
    }
    std::ofstream os(out.comparisons_json);
    os << j.dump(2) << "\n";
  }
  {
    std::ofstream os(out.cv_table_csv);
    if (!os) throw IoError("cannot write " + out.cv_table_csv);
    os << "model,metric,cv_percent,n_datasets\n";
    char buf[256];
    for (const auto& r : cv_rows) {
      std::snprintf(buf, sizeof buf, "%s,%s,%.17g,%d\n", r.model.c_str(),
                    r.metric.c_str(), r.cv, r.n_datasets);
      os << buf;
    }
  }
  return out;
}

}  // namespace kanlab
