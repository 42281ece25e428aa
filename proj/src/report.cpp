#include "kanlab/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "kanlab/common.hpp"
#include "kanlab/stats.hpp"

namespace kanlab {

namespace fs = std::filesystem;

namespace {

struct ScoreRow {
  std::string model, dataset, subject;
  int label = 0;
  double score = 0.0;
};

std::vector<ScoreRow> read_scores_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read " + path);
  std::string line;
  std::getline(is, line);
  if (line != "model,dataset,subject,label,score")
    throw InputError("unexpected scores header in " + path);
  std::vector<ScoreRow> out;
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

// ROC polyline from subject scores: thresholds descend through the unique
// scores, starting at (0,0) and ending at (1,1).
std::vector<std::pair<double, double>> roc_points(
    std::vector<std::pair<double, int>> scored) {
  std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
    return a.first > b.first;
  });
  double npos = 0, nneg = 0;
  for (const auto& [s, y] : scored) (y == 1 ? npos : nneg) += 1;
  std::vector<std::pair<double, double>> pts{{0.0, 0.0}};
  double tp = 0, fp = 0;
  std::size_t i = 0;
  while (i < scored.size()) {
    std::size_t j = i;
    while (j < scored.size() && scored[j].first == scored[i].first) {
      (scored[j].second == 1 ? tp : fp) += 1;
      ++j;
    }
    pts.emplace_back(nneg > 0 ? fp / nneg : 0.0, npos > 0 ? tp / npos : 0.0);
    i = j;
  }
  if (pts.back() != std::pair<double, double>{1.0, 1.0})
    pts.emplace_back(1.0, 1.0);
  return pts;
}

std::string color_for(double v) {
  // blue (low) to red (high)
  const double t = std::clamp(v, 0.0, 1.0);
  const int r = int(std::lround(40 + 200 * t));
  const int g = 60;
  const int b = int(std::lround(240 - 200 * t));
  char buf[16];
  std::snprintf(buf, sizeof buf, "#%02x%02x%02x", r, g, b);
  return buf;
}

}  // namespace

ReportOutputs cmd_report(const ReportOptions& options) {
  if (options.run_dirs.empty())
    throw ConfigError("report: at least one run directory required");
  if (options.out_dir.empty())
    throw ConfigError("report: output directory required");

  // collect inputs, verifying each run directory is complete
  std::vector<stats::MetricSample> pooled;
  std::vector<stats::MetricSample> fold_rows;
  std::vector<ScoreRow> scores;
  for (const auto& dir : options.run_dirs) {
    std::vector<std::string> missing;
    for (const char* f : {"metrics.csv", "subject_scores.csv", "config.json"})
      if (!fs::exists(fs::path(dir) / f)) missing.push_back(f);
    if (!missing.empty()) {
      std::string msg = "report: run directory " + dir + " is missing:";
      for (const auto& m : missing) msg += " " + m;
      throw InputError(msg);
    }
    for (auto& r : stats::read_metric_csv((fs::path(dir) / "metrics.csv").string())) {
      if (r.fold == "pooled")
        pooled.push_back(r);
      else
        fold_rows.push_back(r);
    }
    auto s = read_scores_csv((fs::path(dir) / "subject_scores.csv").string());
    scores.insert(scores.end(), s.begin(), s.end());
  }

  fs::create_directories(options.out_dir);
  ReportOutputs out;

  // ---- heatmap: one row per (model, dataset), pooled metrics -------------
  std::sort(pooled.begin(), pooled.end(),
            [](const stats::MetricSample& a, const stats::MetricSample& b) {
              return std::tie(a.model, a.dataset) < std::tie(b.model, b.dataset);
            });
  out.heatmap_csv = (fs::path(options.out_dir) / "heatmap.csv").string();
  {
    std::ofstream os(out.heatmap_csv);
    if (!os) throw IoError("cannot write " + out.heatmap_csv);
    os << "model,dataset,accuracy,f1_macro,recall,auroc\n";
    char buf[256];
    for (const auto& r : pooled) {
      std::snprintf(buf, sizeof buf, "%s,%s,%.6g,%.6g,%.6g,%.6g\n",
                    r.model.c_str(), r.dataset.c_str(), r.accuracy,
                    r.f1_macro, r.recall, r.auroc);
      os << buf;
    }
  }

  // ---- roc points ---------------------------------------------------------
  std::map<std::pair<std::string, std::string>,
           std::vector<std::pair<double, int>>>
      by_run;
  for (const auto& s : scores)
    by_run[{s.model, s.dataset}].emplace_back(s.score, s.label);
  out.roc_points_csv = (fs::path(options.out_dir) / "roc_points.csv").string();
  {
    std::ofstream os(out.roc_points_csv);
    if (!os) throw IoError("cannot write " + out.roc_points_csv);
    os << "model,dataset,fpr,tpr\n";
    char buf[256];
    for (const auto& [key, scored] : by_run) {
      for (const auto& [fpr, tpr] : roc_points(scored)) {
        std::snprintf(buf, sizeof buf, "%s,%s,%.6g,%.6g\n", key.first.c_str(),
                      key.second.c_str(), fpr, tpr);
        os << buf;
      }
    }
  }

  // ---- cv bars: CV over per-dataset fold means per model/metric ----------
  struct CvBar {
    std::string model, metric;
    double cv;
  };
  std::vector<CvBar> bars;
  {
    std::map<std::pair<std::string, std::string>, std::vector<double>> vals;
    std::map<std::pair<std::string, std::string>, int> counts;
    for (const auto& r : fold_rows) {
      auto push = [&](const std::string& metric, double v) {
        if (std::isnan(v)) return;
        vals[{r.model + "|" + r.dataset, metric}].push_back(v);
      };
      push("accuracy", r.accuracy);
      push("f1_macro", r.f1_macro);
      push("recall", r.recall);
      push("auroc", r.auroc);
      (void)counts;
    }
    // model -> metric -> dataset means
    std::map<std::pair<std::string, std::string>, std::vector<double>> means;
    for (const auto& [key, v] : vals) {
      const auto& model_dataset = key.first;
      const auto model = model_dataset.substr(0, model_dataset.find('|'));
      double acc = 0;
      for (double x : v) acc += x;
      means[{model, key.second}].push_back(acc / double(v.size()));
    }
    for (const auto& [key, v] : means) {
      if (v.size() < 2) continue;
      auto cv = stats::coefficient_of_variation(v);
      if (cv.defined) bars.push_back({key.first, key.second, cv.percent});
    }
  }
  out.cv_bars_csv = (fs::path(options.out_dir) / "cv_bars.csv").string();
  {
    std::ofstream os(out.cv_bars_csv);
    if (!os) throw IoError("cannot write " + out.cv_bars_csv);
    os << "model,metric,cv_percent\n";
    char buf[256];
    for (const auto& b : bars) {
      std::snprintf(buf, sizeof buf, "%s,%s,%.6g\n", b.model.c_str(),
                    b.metric.c_str(), b.cv);
      os << buf;
    }
  }

  // ---- svg renderings ------------------------------------------------------
  {
    // heatmap grid
    const int cw = 90, ch = 24, left = 220, top = 40;
    static const char* metrics[] = {"accuracy", "f1_macro", "recall", "auroc"};
    std::ostringstream svg;
    const int width = left + 4 * cw + 20;
    const int height = top + int(pooled.size()) * ch + 20;
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width
        << "\" height=\"" << height << "\" font-family=\"monospace\" font-size=\"12\">\n";
    for (int m = 0; m < 4; ++m)
      svg << "<text x=\"" << left + m * cw + 8 << "\" y=\"" << top - 10
          << "\">" << metrics[m] << "</text>\n";
    for (std::size_t i = 0; i < pooled.size(); ++i) {
      const auto& r = pooled[i];
      const double vals[] = {r.accuracy, r.f1_macro, r.recall, r.auroc};
      svg << "<text x=\"8\" y=\"" << top + int(i) * ch + 16 << "\">" << r.model
          << " / " << r.dataset << "</text>\n";
      for (int m = 0; m < 4; ++m) {
        char cell[256];
        std::snprintf(cell, sizeof cell,
                      "<rect x=\"%d\" y=\"%d\" width=\"%d\" height=\"%d\" "
                      "fill=\"%s\"/><text x=\"%d\" y=\"%d\" fill=\"#fff\">%.2f</text>\n",
                      left + m * cw, top + int(i) * ch, cw - 2, ch - 2,
                      color_for(vals[m]).c_str(), left + m * cw + 8,
                      top + int(i) * ch + 16, vals[m]);
        svg << cell;
      }
    }
    svg << "</svg>\n";
    const auto path = (fs::path(options.out_dir) / "heatmap.svg").string();
    std::ofstream os(path);
    os << svg.str();
    out.svgs.push_back(path);
  }
  {
    // roc curves, one polyline per (model, dataset)
    const int size = 360, margin = 40;
    std::ostringstream svg;
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << size + 2 * margin
        << "\" height=\"" << size + 2 * margin
        << "\" font-family=\"monospace\" font-size=\"12\">\n";
    svg << "<rect x=\"" << margin << "\" y=\"" << margin << "\" width=\"" << size
        << "\" height=\"" << size << "\" fill=\"none\" stroke=\"#888\"/>\n";
    svg << "<line x1=\"" << margin << "\" y1=\"" << margin + size << "\" x2=\""
        << margin + size << "\" y2=\"" << margin
        << "\" stroke=\"#bbb\" stroke-dasharray=\"4\"/>\n";
    static const char* palette[] = {"#d62728", "#1f77b4", "#2ca02c",
                                    "#9467bd", "#ff7f0e", "#8c564b"};
    int idx = 0;
    for (const auto& [key, scored] : by_run) {
      std::ostringstream poly;
      for (const auto& [fpr, tpr] : roc_points(scored)) {
        poly << margin + fpr * size << "," << margin + size - tpr * size << " ";
      }
      svg << "<polyline points=\"" << poly.str() << "\" fill=\"none\" stroke=\""
          << palette[idx % 6] << "\" stroke-width=\"1.5\"/>\n";
      svg << "<text x=\"" << margin + 6 << "\" y=\"" << margin + 16 + 14 * idx
          << "\" fill=\"" << palette[idx % 6] << "\">" << key.first << " / "
          << key.second << "</text>\n";
      ++idx;
    }
    svg << "</svg>\n";
    const auto path = (fs::path(options.out_dir) / "roc.svg").string();
    std::ofstream os(path);
    os << svg.str();
    out.svgs.push_back(path);
  }
  {
    // cv bars
    const int bar_h = 18, left = 240, top = 30;
    std::ostringstream svg;
    double max_cv = 1.0;
    for (const auto& b : bars) max_cv = std::max(max_cv, b.cv);
    const int width = left + 360 + 20;
    const int height = top + int(bars.size()) * bar_h + 20;
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width
        << "\" height=\"" << height << "\" font-family=\"monospace\" font-size=\"12\">\n";
    for (std::size_t i = 0; i < bars.size(); ++i) {
      const auto& b = bars[i];
      const double w = 360.0 * b.cv / max_cv;
      char row[320];
      std::snprintf(row, sizeof row,
                    "<text x=\"8\" y=\"%d\">%s %s</text>"
                    "<rect x=\"%d\" y=\"%d\" width=\"%.1f\" height=\"%d\" fill=\"#4682b4\"/>"
                    "<text x=\"%.1f\" y=\"%d\">%.1f%%</text>\n",
                    top + int(i) * bar_h + 13, b.model.c_str(),
                    b.metric.c_str(), left, top + int(i) * bar_h,
                    w, bar_h - 4, left + w + 6.0, top + int(i) * bar_h + 13,
                    b.cv);
      svg << row;
    }
    svg << "</svg>\n";
    const auto path = (fs::path(options.out_dir) / "cv_bars.svg").string();
    std::ofstream os(path);
    os << svg.str();
    out.svgs.push_back(path);
  }
  return out;
}

}  // namespace kanlab
