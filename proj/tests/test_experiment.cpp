#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "kanlab/experiment.hpp"
#include "kanlab/report.hpp"

using namespace kanlab;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name)
      : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string str(const std::string& sub = "") const {
    return sub.empty() ? path.string() : (path / sub).string();
  }
};

DatasetManifest make_dataset(const std::string& dir, const std::string& name,
                             int subjects, double effect, std::uint64_t seed) {
  SynthOptions opt;
  opt.n_subjects = subjects;
  opt.effect_size = effect;
  opt.noise_sd = 0.04;
  opt.seed = seed;
  opt.volume_extent = 32;
  opt.out_dir = dir;
  opt.dataset_name = name;
  return synth_generate(opt);
}

std::string tiny_config(const std::string& manifest, const std::string& family,
                        const std::string& out, int folds = 3) {
  return std::string(R"({
  "datasets": [")") +
         manifest + R"("],
  "model": {"family": ")" + family + R"(", "dimensionality": "2d"},
  "protocol": "isolated_cv",
  "folds": )" + std::to_string(folds) + R"(,
  "train": {"learning_rate": 0.001, "patience": 3, "max_epochs": 5, "batch_size": 8},
  "preprocess": {"slices_per_subject": 3, "slice_size": 20},
  "graph": {"segments": 25},
  "output_dir": ")" + out + R"(",
  "seed": 17
})";
}

std::string file_bytes(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  REQUIRE(bool(is));
  return std::string((std::istreambuf_iterator<char>(is)),
                     std::istreambuf_iterator<char>());
}

}  // namespace

TEST_SUITE_BEGIN("experiment");

TEST_CASE("config parsing is strict and defaulted") {
  SUBCASE("unknown keys rejected at every level") {
    CHECK_THROWS_AS(ExperimentConfig::from_json_text(
                        R"({"datasets": ["x"], "model": {"family": "cnn",
                        "dimensionality": "2d"}, "turbo": true})"),
                    ConfigError);
    CHECK_THROWS_AS(ExperimentConfig::from_json_text(
                        R"({"datasets": ["x"], "model": {"family": "cnn",
                        "dimensionality": "2d"},
                        "train": {"lr": 0.1}})"),
                    ConfigError);
  }
  SUBCASE("batch size defaults by dimensionality") {
    auto c2 = ExperimentConfig::from_json_text(
        R"({"datasets": ["x"], "model": {"family": "cnn", "dimensionality": "2d"}})");
    CHECK(c2.train.batch_size == 64);
    auto c3 = ExperimentConfig::from_json_text(
        R"({"datasets": ["x"], "model": {"family": "cnn", "dimensionality": "3d"}})");
    CHECK(c3.train.batch_size == 1);
  }
  SUBCASE("protocol dataset-count invariants") {
    auto c = ExperimentConfig::from_json_text(
        R"({"datasets": ["x"], "model": {"family": "cnn", "dimensionality": "2d"},
            "protocol": "holdout", "output_dir": "o"})");
    CHECK_THROWS_AS(c.validate(), ConfigError);
    auto c2 = ExperimentConfig::from_json_text(
        R"({"datasets": ["x", "y"], "model": {"family": "cnn", "dimensionality": "2d"},
            "protocol": "isolated_cv", "output_dir": "o"})");
    CHECK_THROWS_AS(c2.validate(), ConfigError);
  }
  SUBCASE("round trip through to_json") {
    auto c = ExperimentConfig::from_json_text(
        R"({"datasets": ["m.json"], "model": {"family": "gcn", "dimensionality": "3d"},
            "protocol": "loocv", "output_dir": "runs/x", "seed": 9})");
    auto back = ExperimentConfig::from_json_text(c.to_json());
    CHECK(back.family == Family::gcn);
    CHECK(back.dim == Dimensionality::d3);
    CHECK(back.protocol == "loocv");
    CHECK(back.seed == 9);
    CHECK(back.model_id() == "gcn_3d");
  }
}

TEST_CASE("cmd_run isolated_cv writes the full run directory") {
  TempDir tmp("kanlab_run_test");
  auto manifest = make_dataset(tmp.str("data"), "synth_a", 12, 0.6, 5);
  auto cfg = ExperimentConfig::from_json_text(
      tiny_config(tmp.str("data/manifest.json"), "cnn", tmp.str("run")));
  auto out = cmd_run(cfg);

  SUBCASE("per-fold rows plus pooled row") {
    REQUIRE(out.metrics.size() == 4);  // 3 folds + pooled
    int fold_rows = 0;
    for (const auto& r : out.metrics) {
      CHECK(r.model == "cnn_2d");
      CHECK(r.dataset == "synth_a");
      if (r.fold != "pooled") ++fold_rows;
    }
    CHECK(fold_rows == 3);
  }
  SUBCASE("artifacts exist") {
    for (const char* f :
         {"config.json", "plan.json", "metrics.csv", "subject_scores.csv"})
      CHECK(fs::exists(fs::path(tmp.str("run")) / f));
    for (int i = 0; i < 3; ++i) {
      const auto fold = fs::path(tmp.str("run")) / ("fold_" + std::to_string(i));
      CHECK(fs::exists(fold / "history.csv"));
      CHECK(fs::exists(fold / "checkpoint.json"));
    }
  }
  SUBCASE("rerunning with the same config is byte-identical") {
    const auto first = file_bytes(out.metrics_csv);
    auto cfg2 = cfg;
    cfg2.output_dir = tmp.str("run2");
    auto out2 = cmd_run(cfg2);
    CHECK(file_bytes(out2.metrics_csv) == first);
  }
}

TEST_CASE("cmd_run gcn pipeline completes") {
  TempDir tmp("kanlab_run_gcn");
  make_dataset(tmp.str("data"), "synth_a", 8, 0.6, 7);
  auto cfg = ExperimentConfig::from_json_text(
      tiny_config(tmp.str("data/manifest.json"), "gcn", tmp.str("run")));
  auto out = cmd_run(cfg);
  CHECK(out.metrics.size() == 4);
  for (const auto& r : out.metrics) CHECK(r.model == "gcn_2d");
}

TEST_CASE("cmd_run loocv emits one row per subject") {
  TempDir tmp("kanlab_run_loocv");
  make_dataset(tmp.str("data"), "synth_a", 8, 0.6, 9);
  auto text = std::string(R"({
  "datasets": [")") + tmp.str("data/manifest.json") + R"("],
  "model": {"family": "cnn", "dimensionality": "2d"},
  "protocol": "loocv",
  "train": {"learning_rate": 0.001, "patience": 2, "max_epochs": 3, "batch_size": 8},
  "preprocess": {"slices_per_subject": 2, "slice_size": 16},
  "output_dir": ")" + tmp.str("run") + R"(",
  "seed": 1
})";
  auto out = cmd_run(ExperimentConfig::from_json_text(text));
  int fold_rows = 0;
  for (const auto& r : out.metrics) fold_rows += r.fold != "pooled";
  CHECK(fold_rows == 8);
  // pooled row has a defined AUROC even though singleton folds do not
  bool pooled_found = false;
  for (const auto& r : out.metrics)
    if (r.fold == "pooled") {
      pooled_found = true;
      CHECK(std::isfinite(r.auroc));
    }
  CHECK(pooled_found);
}

TEST_CASE("cmd_run holdout emits three rotations") {
  TempDir tmp("kanlab_run_holdout");
  make_dataset(tmp.str("da"), "aa", 6, 0.6, 11);
  make_dataset(tmp.str("db"), "bb", 6, 0.6, 12);
  make_dataset(tmp.str("dc"), "cc", 6, 0.6, 13);
  auto text = std::string(R"({
  "datasets": [")") + tmp.str("da/manifest.json") + R"(", ")" +
              tmp.str("db/manifest.json") + R"(", ")" +
              tmp.str("dc/manifest.json") + R"("],
  "model": {"family": "cnn", "dimensionality": "2d"},
  "protocol": "holdout",
  "train": {"learning_rate": 0.001, "patience": 2, "max_epochs": 3, "batch_size": 8},
  "preprocess": {"slices_per_subject": 2, "slice_size": 16},
  "output_dir": ")" + tmp.str("run") + R"(",
  "seed": 2
})";
  auto out = cmd_run(ExperimentConfig::from_json_text(text));
  std::vector<std::string> fold_datasets;
  for (const auto& r : out.metrics)
    if (r.fold != "pooled") fold_datasets.push_back(r.dataset);
  REQUIRE(fold_datasets.size() == 3);
  // rotations (a+b -> c), (a+c -> b), (b+c -> a)
  CHECK(fold_datasets[0] == "cc");
  CHECK(fold_datasets[1] == "bb");
  CHECK(fold_datasets[2] == "aa");
}

TEST_CASE("cmd_compare") {
  TempDir tmp("kanlab_compare_test");
  SUBCASE("single model: empty comparisons, populated cv table") {
    std::vector<stats::MetricSample> rows;
    for (const char* ds : {"a", "b", "c"})
      for (int f = 0; f < 3; ++f)
        rows.push_back({"cnn_2d", ds, std::to_string(f), 0.8 + 0.01 * f,
                        0.8, 0.8, 0.9});
    stats::write_metric_csv(tmp.str("m.csv"), rows);
    CompareOptions opt;
    opt.metric_csvs = {tmp.str("m.csv")};
    opt.out_dir = tmp.str("out");
    opt.mode = "wilcoxon";
    auto out = cmd_compare(opt);
    CHECK(out.comparisons.empty());
    auto cv = file_bytes(out.cv_table_csv);
    CHECK(cv.find("cnn_2d,accuracy") != std::string::npos);
  }
  SUBCASE("identical metric columns give p = 1 and d = 0") {
    std::vector<stats::MetricSample> rows;
    for (const char* model : {"cnn_2d", "convkan_2d"})
      for (int f = 0; f < 5; ++f)
        rows.push_back({model, "a", std::to_string(f), 0.8, 0.8, 0.8, 0.9});
    stats::write_metric_csv(tmp.str("m2.csv"), rows);
    CompareOptions opt;
    opt.metric_csvs = {tmp.str("m2.csv")};
    opt.out_dir = tmp.str("out2");
    opt.mode = "wilcoxon";
    auto out = cmd_compare(opt);
    REQUIRE(out.comparisons.size() == 4);
    for (const auto& c : out.comparisons) {
      CHECK(c.p_raw == 1.0);
      CHECK(c.degenerate);
      CHECK(c.cohens_d == 0.0);
    }
  }
  SUBCASE("mismatched fold counts raise a pairing error") {
    std::vector<stats::MetricSample> rows;
    for (int f = 0; f < 5; ++f)
      rows.push_back({"cnn_2d", "a", std::to_string(f), 0.8, 0.8, 0.8, 0.9});
    for (int f = 0; f < 4; ++f)
      rows.push_back({"gcn_2d", "a", std::to_string(f), 0.6, 0.5, 0.6, 0.6});
    stats::write_metric_csv(tmp.str("m3.csv"), rows);
    CompareOptions opt;
    opt.metric_csvs = {tmp.str("m3.csv")};
    opt.out_dir = tmp.str("out3");
    opt.mode = "wilcoxon";
    CHECK_THROWS_AS(cmd_compare(opt), InputError);
  }
  SUBCASE("subtract mode computes within- and cross-dimension differences") {
    std::vector<stats::MetricSample> rows;
    rows.push_back({"cnn_2d", "a", "holdout", 0.70, 0.70, 0.70, 0.79});
    rows.push_back({"convkan_2d", "a", "holdout", 0.59, 0.54, 0.59, 0.54});
    rows.push_back({"convkan_3d", "a", "holdout", 0.83, 0.82, 0.83, 0.85});
    stats::write_metric_csv(tmp.str("m4.csv"), rows);
    CompareOptions opt;
    opt.metric_csvs = {tmp.str("m4.csv")};
    opt.out_dir = tmp.str("out4");
    opt.mode = "subtract";
    auto out = cmd_compare(opt);
    bool checked_cross = false, checked_within = false;
    for (const auto& d : out.differences) {
      if (d.comparison == "3d_convkan - 2d_convkan" && d.metric == "accuracy") {
        CHECK(d.value == doctest::Approx(0.24));
        checked_cross = true;
      }
      if (d.comparison == "cnn_2d - convkan_2d" && d.metric == "auroc") {
        CHECK(d.value == doctest::Approx(0.25));
        checked_within = true;
      }
    }
    CHECK(checked_cross);
    CHECK(checked_within);
  }
}

TEST_CASE("cmd_run 3d families at toy scale") {
  TempDir tmp("kanlab_run_3d");
  make_dataset(tmp.str("data"), "synth_a", 8, 0.8, 31);
  for (const char* fam : {"cnn", "convkan", "gcn"}) {
    auto text = std::string(R"({
  "datasets": [")") + tmp.str("data/manifest.json") + R"("],
  "model": {"family": ")" + fam + R"(", "dimensionality": "3d"},
  "protocol": "isolated_cv",
  "folds": 3,
  "train": {"learning_rate": 0.001, "patience": 1, "max_epochs": 2},
  "preprocess": {"volume_size": 16},
  "graph": {"segments": 20},
  "output_dir": ")" + tmp.str(std::string("run_") + fam) + R"(",
  "seed": 3
})";
    auto cfg = ExperimentConfig::from_json_text(text);
    CHECK(cfg.train.batch_size == 1);  // 3d default exercises the bn fallback
    auto out = cmd_run(cfg);
    CHECK(out.metrics.size() == 4);
    for (const auto& r : out.metrics)
      CHECK(r.model == std::string(fam) + "_3d");
  }
}

TEST_CASE("cmd_compare bootstrap_scores unit resolves below the fold floor") {
  TempDir tmp("kanlab_compare_boot");
  // two models scored on the same 24 subjects; model a separates cleanly,
  // model b is pure noise
  Rng rng(40);
  std::vector<stats::MetricSample> rows;
  {
    std::ofstream os(tmp.str("scores.csv"));
    os << "model,dataset,subject,label,score\n";
    for (int i = 0; i < 24; ++i) {
      const int label = i % 2;
      const double good = label ? rng.uniform(0.7, 1.0) : rng.uniform(0.0, 0.3);
      const double noise = rng.uniform(0.0, 1.0);
      os << "a_2d,d,s" << i << "," << label << "," << good << "\n";
      os << "b_2d,d,s" << i << "," << label << "," << noise << "\n";
    }
  }
  // metric rows with 5 folds each (the per-fold exact floor is 0.0625)
  for (const char* model : {"a_2d", "b_2d"})
    for (int f = 0; f < 5; ++f)
      rows.push_back({model, "d", std::to_string(f),
                      model[0] == 'a' ? 0.95 : 0.5, 0.5, 0.5,
                      model[0] == 'a' ? 0.99 : 0.5});
  stats::write_metric_csv(tmp.str("m.csv"), rows);

  CompareOptions opt;
  opt.metric_csvs = {tmp.str("m.csv")};
  opt.score_csvs = {tmp.str("scores.csv")};
  opt.out_dir = tmp.str("out");
  opt.mode = "wilcoxon";
  opt.unit = "bootstrap_scores";
  opt.bootstrap_samples = 500;
  opt.seed = 9;
  auto out = cmd_compare(opt);
  REQUIRE(out.comparisons.size() == 4);
  for (const auto& c : out.comparisons) {
    if (c.metric != "auroc") continue;
    CHECK(c.n > 400);
    CHECK(c.p_raw < 0.01);  // finer than the 5-fold exact floor of 0.0625
  }
  SUBCASE("per-fold unit on the same table cannot go below the floor") {
    CompareOptions fold_opt = opt;
    fold_opt.unit = "per_fold";
    fold_opt.out_dir = tmp.str("out2");
    auto fold_out = cmd_compare(fold_opt);
    for (const auto& c : fold_out.comparisons) CHECK(c.p_raw >= 0.0625);
  }
  SUBCASE("bootstrap unit without scores is a configuration error") {
    CompareOptions bad = opt;
    bad.score_csvs.clear();
    bad.out_dir = tmp.str("out3");
    CHECK_THROWS_AS(cmd_compare(bad), ConfigError);
  }
}

TEST_CASE("cmd_report emits plot data with ROC endpoints") {
  TempDir tmp("kanlab_report_test");
  make_dataset(tmp.str("data"), "synth_a", 8, 0.6, 21);
  auto cfg = ExperimentConfig::from_json_text(
      tiny_config(tmp.str("data/manifest.json"), "cnn", tmp.str("run")));
  cmd_run(cfg);

  ReportOptions ropt;
  ropt.run_dirs = {tmp.str("run")};
  ropt.out_dir = tmp.str("rep");
  auto out = cmd_report(ropt);

  SUBCASE("heatmap merges one row per model and dataset") {
    auto text = file_bytes(out.heatmap_csv);
    CHECK(text.find("cnn_2d,synth_a") != std::string::npos);
  }
  SUBCASE("roc point list starts at (0,0) and ends at (1,1)") {
    std::ifstream is(out.roc_points_csv);
    std::string line;
    std::getline(is, line);
    std::vector<std::string> lines;
    while (std::getline(is, line))
      if (!line.empty()) lines.push_back(line);
    REQUIRE(!lines.empty());
    CHECK(lines.front().substr(lines.front().size() - 4) == ",0,0");
    CHECK(lines.back().substr(lines.back().size() - 4) == ",1,1");
  }
  SUBCASE("svg output is deterministic") {
    REQUIRE(out.svgs.size() == 3);
    auto first = file_bytes(out.svgs[0]);
    ReportOptions again = ropt;
    again.out_dir = tmp.str("rep2");
    auto out2 = cmd_report(again);
    CHECK(file_bytes(out2.svgs[0]) == first);
  }
  SUBCASE("incomplete run directory is diagnosed with the missing files") {
    fs::create_directories(tmp.str("broken"));
    ReportOptions bad;
    bad.run_dirs = {tmp.str("broken")};
    bad.out_dir = tmp.str("rep3");
    CHECK_THROWS_WITH_AS(cmd_report(bad), doctest::Contains("metrics.csv"),
                         InputError);
  }
}

TEST_SUITE_END();
