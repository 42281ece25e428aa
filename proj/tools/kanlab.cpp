// kanlab: synthetic-phantom deep-learning lab
//
// Subcommands:
//   synth    generate a phantom dataset (volumes + manifest.json)
//   run      execute a configured experiment (preprocess -> folds -> train
//            -> evaluate), writing checkpoints, history and metrics.csv
//   compare  statistical comparison of metric tables (Wilcoxon + BH + effect
//            sizes, or descriptive differences for hold-out tables)
//   report   merge run directories into heatmap / ROC / CV plot data + SVGs

#include <cstdio>
#include <exception>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "kanlab/experiment.hpp"
#include "kanlab/report.hpp"

using namespace kanlab;

int main(int argc, char** argv) {
  CLI::App app{"kanlab: ConvKAN / CNN / GCN comparison lab on phantom MRI"};
  app.require_subcommand(1);

  // ---- synth ----
  auto* synth = app.add_subcommand("synth", "generate a phantom dataset");
  SynthOptions sopt;
  int synth_subjects = 60;
  synth->add_option("--subjects", synth_subjects, "number of subjects (even, >= 4)");
  synth->add_option("--effect", sopt.effect_size, "class effect size");
  synth->add_option("--noise", sopt.noise_sd, "voxel noise standard deviation");
  synth->add_option("--seed", sopt.seed, "generator seed");
  synth->add_option("--out", sopt.out_dir, "output directory")->required();
  synth->add_option("--name", sopt.dataset_name, "dataset name");
  synth->add_option("--size", sopt.volume_extent, "cubic volume extent");
  synth->add_option("--voxel-mm", sopt.voxel_size_mm, "voxel size in mm");

  // ---- run ----
  auto* run = app.add_subcommand("run", "run a configured experiment");
  std::string run_config;
  std::string run_out;
  std::uint64_t run_seed = 0;
  bool run_seed_set = false;
  int run_jobs = 0;
  run->add_option("--config", run_config, "experiment config (json)")->required();
  run->add_option("--out", run_out, "override output directory");
  run->add_option("--seed", run_seed, "override seed")
      ->each([&](const std::string&) { run_seed_set = true; });
  run->add_option("--jobs", run_jobs, "fold worker count");

  // ---- compare ----
  auto* compare = app.add_subcommand("compare", "compare metric tables");
  CompareOptions copt;
  compare->add_option("--metrics", copt.metric_csvs, "metrics csv paths")
      ->required()
      ->expected(-1);
  compare->add_option("--out", copt.out_dir, "output directory")->required();
  compare->add_option("--mode", copt.mode,
                      "auto | wilcoxon | subtract (default auto)");
  compare->add_option("--unit", copt.unit,
                      "wilcoxon pairing unit: per_fold | bootstrap_scores");
  compare->add_option("--scores", copt.score_csvs,
                      "subject score csvs (bootstrap_scores unit)")
      ->expected(-1);
  compare->add_option("--seed", copt.seed, "bootstrap seed");
  compare->add_option("--bootstrap", copt.bootstrap_samples,
                      "bootstrap resample count");

  // ---- report ----
  auto* report = app.add_subcommand("report", "emit plot data from runs");
  ReportOptions ropt;
  report->add_option("--runs", ropt.run_dirs, "completed run directories")
      ->required()
      ->expected(-1);
  report->add_option("--out", ropt.out_dir, "output directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth->parsed()) {
      sopt.n_subjects = synth_subjects;
      auto manifest = synth_generate(sopt);
      std::printf("%s/manifest.json\n", sopt.out_dir.c_str());
      std::fprintf(stderr, "synth: %zu subjects written to %s\n",
                   manifest.subjects.size(), sopt.out_dir.c_str());
    } else if (run->parsed()) {
      auto cfg = ExperimentConfig::from_json_file(run_config);
      if (!run_out.empty()) cfg.output_dir = run_out;
      if (run_seed_set) cfg.seed = run_seed;
      if (run_jobs > 0) cfg.jobs = run_jobs;
      auto out = cmd_run(cfg);
      std::printf("%s\n", out.metrics_csv.c_str());
      std::fprintf(stderr, "run: %zu metric rows in %s\n", out.metrics.size(),
                   out.run_dir.c_str());
    } else if (compare->parsed()) {
      auto out = cmd_compare(copt);
      std::printf("%s\n", out.comparisons_csv.c_str());
      std::fprintf(stderr, "compare: %zu comparisons, %zu differences\n",
                   out.comparisons.size(), out.differences.size());
    } else if (report->parsed()) {
      auto out = cmd_report(ropt);
      std::printf("%s\n", out.heatmap_csv.c_str());
      std::fprintf(stderr, "report: wrote %zu svg files\n", out.svgs.size());
    }
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "configuration error: %s\n", e.what());
    return 2;
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
