#pragma once

#include <string>
#include <vector>

namespace kanlab {

struct ReportOptions {
  std::vector<std::string> run_dirs;
  std::string out_dir;
};

struct ReportOutputs {
  std::string heatmap_csv;
  std::string roc_points_csv;
  std::string cv_bars_csv;
  std::vector<std::string> svgs;
};

// Merges completed run directories into plot data: one heatmap row per
// (model, dataset) from the pooled metrics, ROC point lists from the subject
// scores, coefficient-of-variation bar data, and deterministic static SVG
// renderings of each.
ReportOutputs cmd_report(const ReportOptions& options);

}  // namespace kanlab
