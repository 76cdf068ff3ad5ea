#include "flowgate/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include <json.hpp>

namespace flowgate {

namespace fs = std::filesystem;

RocCurve roc_from_stats(const std::vector<double>& stats, const std::vector<int>& labels) {
  if (stats.size() != labels.size()) throw DimensionError("roc: stats/labels size mismatch");
  std::size_t pos = 0, neg = 0;
  for (int l : labels) (l ? pos : neg)++;
  if (pos == 0 || neg == 0)
    throw EvaluationError("roc needs both classes (positives=" + std::to_string(pos) +
                          ", negatives=" + std::to_string(neg) + ")");
  for (double s : stats)
    if (!std::isfinite(s)) throw EvaluationError("roc: non-finite statistic");

  // Sort descending; sweep thresholds over distinct values.
  std::vector<std::size_t> order(stats.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return stats[a] > stats[b]; });

  RocCurve curve;
  curve.positives = pos;
  curve.negatives = neg;
  curve.points.push_back({std::numeric_limits<double>::infinity(), 0.0, 0.0});
  std::size_t tp = 0, fp = 0, i = 0;
  while (i < order.size()) {
    const double v = stats[order[i]];
    while (i < order.size() && stats[order[i]] == v) {
      (labels[order[i]] ? tp : fp)++;
      ++i;
    }
    curve.points.push_back({v, static_cast<double>(fp) / static_cast<double>(neg),
                            static_cast<double>(tp) / static_cast<double>(pos)});
  }

  curve.auc = auc(curve);
  const auto cutoff = youden_cutoff(curve);
  curve.youden_threshold = cutoff.first;
  curve.youden_j = cutoff.second;
  return curve;
}

double auc(const RocCurve& curve) {
  double area = 0.0;
  for (std::size_t i = 1; i < curve.points.size(); ++i) {
    const RocPoint& a = curve.points[i - 1];
    const RocPoint& b = curve.points[i];
    area += (b.fpr - a.fpr) * (a.tpr + b.tpr) / 2.0;
  }
  return area;
}

std::pair<double, double> youden_cutoff(const RocCurve& curve) {
  if (curve.points.empty()) throw EvaluationError("youden: empty curve");
  double best_j = -1.0;
  double best_threshold = curve.points.front().threshold;
  // FPR is non-decreasing along the sweep, so the first maximum has the
  // lowest FPR among ties.
  for (const RocPoint& p : curve.points) {
    const double j = p.tpr - p.fpr;
    if (j > best_j) {
      best_j = j;
      best_threshold = p.threshold;
    }
  }
  return {best_threshold, best_j};
}

namespace {

RocCurve roc_from_records(const std::vector<ScoreRecord>& records, ScoreField field) {
  std::vector<double> stats;
  std::vector<int> labels;
  for (const ScoreRecord& r : records) {
    if (r.label.empty()) continue;  // unlabeled: scored but never evaluated
    stats.push_back(-record_field(r, field));  // lower score = more abnormal
    labels.push_back(is_abnormal_label(r.label) ? 1 : 0);
  }
  return roc_from_stats(stats, labels);
}

}  // namespace

RocCurve roc_posterior(const std::vector<ScoreRecord>& records) {
  return roc_from_records(records, ScoreField::kPosterior);
}

RocCurve roc_likelihood(const std::vector<ScoreRecord>& records) {
  return roc_from_records(records, ScoreField::kLoglikNormal);
}

RocCurve per_label_roc(const std::vector<ScoreRecord>& records, const std::string& subclass) {
  const bool all_abnormals = subclass == "abnormal";
  const std::string target = subclass.rfind("abnormal", 0) == 0 ? subclass : "abnormal:" + subclass;
  std::vector<double> stats;
  std::vector<int> labels;
  std::size_t matched = 0;
  for (const ScoreRecord& r : records) {
    if (r.label.empty()) continue;
    if (is_abnormal_label(r.label)) {
      if (all_abnormals || r.label == target) {
        stats.push_back(-r.posterior_score);
        labels.push_back(1);
        ++matched;
      }
    } else {
      stats.push_back(-r.posterior_score);
      labels.push_back(0);
    }
  }
  if (matched == 0) throw EvaluationError("per_label_roc: no records with subclass '" + subclass + "'");
  return roc_from_stats(stats, labels);
}

PearsonResult pearson(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw DimensionError("pearson: size mismatch");
  PearsonResult out;
  if (x.size() < 2) return out;
  const double n = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxx = 0.0, syy = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx, dy = y[i] - my;
    sxx += dx * dx;
    syy += dy * dy;
    sxy += dx * dy;
  }
  if (sxx < 1e-24 || syy < 1e-24) return out;  // degenerate variance: flagged undefined
  out.r = sxy / std::sqrt(sxx * syy);
  out.defined = true;
  return out;
}

double record_field(const ScoreRecord& r, ScoreField field) {
  switch (field) {
    case ScoreField::kPosterior:
      return r.posterior_score;
    case ScoreField::kLoglikNormal:
      return r.loglik_normal;
    case ScoreField::kLoglikAll:
      return r.loglik_all;
    case ScoreField::kZeroPixelFraction:
      return r.zero_pixel_fraction;
  }
  throw Error("unreachable field");
}

std::string field_name(ScoreField field) {
  switch (field) {
    case ScoreField::kPosterior:
      return "posterior_score";
    case ScoreField::kLoglikNormal:
      return "loglik_normal";
    case ScoreField::kLoglikAll:
      return "loglik_all";
    case ScoreField::kZeroPixelFraction:
      return "zero_pixel_fraction";
  }
  throw Error("unreachable field");
}

namespace {

std::string label_class(const std::string& label) {
  if (label.empty()) return "unlabeled";
  return is_abnormal_label(label) ? "abnormal" : "normal";
}

}  // namespace

Histogram histogram(const std::vector<ScoreRecord>& records, ScoreField field, int bins) {
  if (bins < 1) throw EvaluationError("histogram: bins must be >= 1");
  if (records.empty()) throw EvaluationError("histogram: no records");
  Histogram h;
  h.bins = bins;
  h.lo = std::numeric_limits<double>::infinity();
  h.hi = -std::numeric_limits<double>::infinity();
  for (const ScoreRecord& r : records) {
    const double v = record_field(r, field);
    h.lo = std::min(h.lo, v);
    h.hi = std::max(h.hi, v);
  }
  const double width = h.hi > h.lo ? (h.hi - h.lo) / bins : 1.0;
  for (const ScoreRecord& r : records) {
    auto& counts = h.counts[label_class(r.label)];
    if (counts.empty()) counts.assign(static_cast<std::size_t>(bins), 0);
    const double v = record_field(r, field);
    int bin = static_cast<int>(std::floor((v - h.lo) / width));
    if (bin < 0) bin = 0;
    if (bin >= bins) bin = bins - 1;
    ++counts[static_cast<std::size_t>(bin)];
  }
  return h;
}

EvaluationReport evaluate_records(const std::vector<ScoreRecord>& records, int hist_bins) {
  EvaluationReport report;
  report.posterior_roc = roc_posterior(records);
  report.likelihood_roc = roc_likelihood(records);

  std::set<std::string> abnormal_labels;
  for (const ScoreRecord& r : records) {
    if (r.label.empty()) {
      ++report.unlabeled;
      continue;
    }
    ++report.label_counts[r.label];
    if (is_abnormal_label(r.label)) abnormal_labels.insert(r.label);
  }
  for (const std::string& label : abnormal_labels) {
    const std::string subclass = label.rfind("abnormal:", 0) == 0 ? label.substr(9) : label;
    report.per_label.emplace(subclass, per_label_roc(records, label));
  }

  std::vector<double> zero_frac, loglik, posterior;
  for (const ScoreRecord& r : records) {
    zero_frac.push_back(r.zero_pixel_fraction);
    loglik.push_back(r.loglik_normal);
    posterior.push_back(r.posterior_score);
  }
  report.corr_likelihood_zero = pearson(zero_frac, loglik);
  report.corr_posterior_zero = pearson(zero_frac, posterior);

  report.posterior_hist = histogram(records, ScoreField::kPosterior, hist_bins);
  report.likelihood_hist = histogram(records, ScoreField::kLoglikNormal, hist_bins);
  return report;
}

// ---- file emission ----

namespace {

std::ofstream open_out(const std::string& path) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot open for writing: " + path);
  return os;
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fmt6(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

constexpr int kPlotSize = 480;
constexpr int kMargin = 56;

double map_x(double v, double lo, double hi) {
  return kMargin + (v - lo) / (hi - lo) * (kPlotSize - 2 * kMargin);
}

double map_y(double v, double lo, double hi) {
  return kPlotSize - kMargin - (v - lo) / (hi - lo) * (kPlotSize - 2 * kMargin);
}

void svg_header(std::ostream& os, const std::string& title) {
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kPlotSize << "\" height=\"" << kPlotSize
     << "\" viewBox=\"0 0 " << kPlotSize << " " << kPlotSize << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << kPlotSize / 2 << "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" "
     << "font-size=\"14\">" << title << "</text>\n";
}

void svg_axes(std::ostream& os, double xlo, double xhi, double ylo, double yhi, const std::string& xlabel,
              const std::string& ylabel) {
  const int x0 = kMargin, x1 = kPlotSize - kMargin, y0 = kPlotSize - kMargin, y1 = kMargin;
  os << "<line x1=\"" << x0 << "\" y1=\"" << y0 << "\" x2=\"" << x1 << "\" y2=\"" << y0
     << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << x0 << "\" y1=\"" << y0 << "\" x2=\"" << x0 << "\" y2=\"" << y1
     << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double fx = xlo + (xhi - xlo) * i / 4.0;
    const double fy = ylo + (yhi - ylo) * i / 4.0;
    const double px = map_x(fx, xlo, xhi), py = map_y(fy, ylo, yhi);
    os << "<line x1=\"" << fmt6(px) << "\" y1=\"" << y0 << "\" x2=\"" << fmt6(px) << "\" y2=\"" << y0 + 4
       << "\" stroke=\"black\"/>\n";
    os << "<text x=\"" << fmt6(px) << "\" y=\"" << y0 + 18 << "\" text-anchor=\"middle\" font-family=\"sans-serif\" "
       << "font-size=\"10\">" << fmt6(fx) << "</text>\n";
    os << "<line x1=\"" << x0 - 4 << "\" y1=\"" << fmt6(py) << "\" x2=\"" << x0 << "\" y2=\"" << fmt6(py)
       << "\" stroke=\"black\"/>\n";
    os << "<text x=\"" << x0 - 8 << "\" y=\"" << fmt6(py + 3) << "\" text-anchor=\"end\" font-family=\"sans-serif\" "
       << "font-size=\"10\">" << fmt6(fy) << "</text>\n";
  }
  os << "<text x=\"" << kPlotSize / 2 << "\" y=\"" << kPlotSize - 12
     << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">" << xlabel << "</text>\n";
  os << "<text x=\"16\" y=\"" << kPlotSize / 2 << "\" text-anchor=\"middle\" font-family=\"sans-serif\" "
     << "font-size=\"12\" transform=\"rotate(-90 16 " << kPlotSize / 2 << ")\">" << ylabel << "</text>\n";
}

}  // namespace

void write_roc_csv(const std::string& path, const RocCurve& curve) {
  auto os = open_out(path);
  os << "threshold,fpr,tpr\n";
  for (const RocPoint& p : curve.points) os << fmt(p.threshold) << "," << fmt(p.fpr) << "," << fmt(p.tpr) << "\n";
}

void write_roc_svg(const std::string& path, const RocCurve& curve, const std::string& title) {
  auto os = open_out(path);
  svg_header(os, title + " (AUC " + fmt6(curve.auc) + ")");
  svg_axes(os, 0, 1, 0, 1, "false positive rate", "true positive rate");
  os << "<line x1=\"" << map_x(0, 0, 1) << "\" y1=\"" << map_y(0, 0, 1) << "\" x2=\"" << map_x(1, 0, 1)
     << "\" y2=\"" << map_y(1, 0, 1) << "\" stroke=\"#bbbbbb\" stroke-dasharray=\"4 4\"/>\n";
  os << "<polyline fill=\"none\" stroke=\"#2b6cb0\" stroke-width=\"1.5\" points=\"";
  for (const RocPoint& p : curve.points) os << fmt6(map_x(p.fpr, 0, 1)) << "," << fmt6(map_y(p.tpr, 0, 1)) << " ";
  os << "\"/>\n";
  // Youden cutoff marker.
  for (const RocPoint& p : curve.points) {
    if (p.threshold == curve.youden_threshold) {
      os << "<circle cx=\"" << fmt6(map_x(p.fpr, 0, 1)) << "\" cy=\"" << fmt6(map_y(p.tpr, 0, 1))
         << "\" r=\"5\" fill=\"none\" stroke=\"#c53030\" stroke-width=\"1.5\"/>\n";
      os << "<text x=\"" << fmt6(map_x(p.fpr, 0, 1) + 8) << "\" y=\"" << fmt6(map_y(p.tpr, 0, 1) - 6)
         << "\" font-family=\"sans-serif\" font-size=\"10\">J=" << fmt6(curve.youden_j) << "</text>\n";
      break;
    }
  }
  os << "</svg>\n";
}

void write_histogram_csv(const std::string& path, const Histogram& hist) {
  auto os = open_out(path);
  os << "bin_lo,bin_hi";
  for (const auto& [cls, counts] : hist.counts) os << "," << cls;
  os << "\n";
  const double width = hist.hi > hist.lo ? (hist.hi - hist.lo) / hist.bins : 1.0;
  for (int b = 0; b < hist.bins; ++b) {
    os << fmt(hist.lo + b * width) << "," << fmt(hist.lo + (b + 1) * width);
    for (const auto& [cls, counts] : hist.counts) os << "," << counts[static_cast<std::size_t>(b)];
    os << "\n";
  }
}

void write_histogram_svg(const std::string& path, const Histogram& hist, const std::string& title) {
  auto os = open_out(path);
  svg_header(os, title);
  std::int64_t max_count = 1;
  for (const auto& [cls, counts] : hist.counts)
    for (std::int64_t c : counts) max_count = std::max(max_count, c);
  svg_axes(os, hist.lo, hist.hi > hist.lo ? hist.hi : hist.lo + 1, 0, static_cast<double>(max_count), "score",
           "count");
  const std::map<std::string, std::string> colors{
      {"normal", "#2b6cb0"}, {"abnormal", "#c53030"}, {"unlabeled", "#718096"}};
  const double xhi = hist.hi > hist.lo ? hist.hi : hist.lo + 1;
  const double width = (xhi - hist.lo) / hist.bins;
  const std::size_t n_classes = hist.counts.size();
  std::size_t class_idx = 0;
  for (const auto& [cls, counts] : hist.counts) {
    const std::string color = colors.count(cls) ? colors.at(cls) : "#38a169";
    for (int b = 0; b < hist.bins; ++b) {
      const std::int64_t c = counts[static_cast<std::size_t>(b)];
      if (c == 0) continue;
      const double gx0 = map_x(hist.lo + b * width, hist.lo, xhi);
      const double gx1 = map_x(hist.lo + (b + 1) * width, hist.lo, xhi);
      const double sub_w = (gx1 - gx0) / static_cast<double>(n_classes);
      const double x = gx0 + sub_w * static_cast<double>(class_idx);
      const double y = map_y(static_cast<double>(c), 0, static_cast<double>(max_count));
      const double y0 = map_y(0, 0, static_cast<double>(max_count));
      os << "<rect x=\"" << fmt6(x) << "\" y=\"" << fmt6(y) << "\" width=\"" << fmt6(std::max(sub_w - 0.5, 0.5))
         << "\" height=\"" << fmt6(y0 - y) << "\" fill=\"" << color << "\" fill-opacity=\"0.8\"/>\n";
    }
    os << "<rect x=\"" << kPlotSize - kMargin - 110 << "\" y=\"" << kMargin + 16 * static_cast<int>(class_idx)
       << "\" width=\"10\" height=\"10\" fill=\"" << color << "\"/>\n";
    os << "<text x=\"" << kPlotSize - kMargin - 96 << "\" y=\"" << kMargin + 16 * static_cast<int>(class_idx) + 9
       << "\" font-family=\"sans-serif\" font-size=\"10\">" << cls << "</text>\n";
    ++class_idx;
  }
  os << "</svg>\n";
}

void write_scatter_csv(const std::string& path, const std::vector<ScoreRecord>& records) {
  auto os = open_out(path);
  os << "id,zero_pixel_fraction,likelihood_score,posterior_score,label\n";
  for (const ScoreRecord& r : records)
    os << r.id << "," << fmt(r.zero_pixel_fraction) << "," << fmt(r.loglik_normal) << "," << fmt(r.posterior_score)
       << "," << r.label << "\n";
}

void write_scatter_svg(const std::string& path, const std::vector<ScoreRecord>& records, ScoreField y_field,
                       const std::string& title) {
  auto os = open_out(path);
  double xlo = 0.0, xhi = 0.0, ylo = 0.0, yhi = 0.0;
  bool first = true;
  for (const ScoreRecord& r : records) {
    const double x = r.zero_pixel_fraction, y = record_field(r, y_field);
    if (first) {
      xlo = xhi = x;
      ylo = yhi = y;
      first = false;
    }
    xlo = std::min(xlo, x);
    xhi = std::max(xhi, x);
    ylo = std::min(ylo, y);
    yhi = std::max(yhi, y);
  }
  if (xhi <= xlo) xhi = xlo + 1;
  if (yhi <= ylo) yhi = ylo + 1;
  svg_header(os, title);
  svg_axes(os, xlo, xhi, ylo, yhi, "zero-pixel fraction", field_name(y_field));
  for (const ScoreRecord& r : records) {
    const std::string cls = r.label.empty() ? "unlabeled" : (is_abnormal_label(r.label) ? "abnormal" : "normal");
    const std::string color = cls == "abnormal" ? "#c53030" : (cls == "normal" ? "#2b6cb0" : "#718096");
    os << "<circle cx=\"" << fmt6(map_x(r.zero_pixel_fraction, xlo, xhi)) << "\" cy=\""
       << fmt6(map_y(record_field(r, y_field), ylo, yhi)) << "\" r=\"2.5\" fill=\"" << color
       << "\" fill-opacity=\"0.7\"/>\n";
  }
  os << "</svg>\n";
}

void write_summary_json(const std::string& path, const EvaluationReport& report) {
  nlohmann::json j;
  j["counts"]["unlabeled"] = report.unlabeled;
  for (const auto& [label, count] : report.label_counts) j["counts"]["labels"][label] = count;
  j["overall"]["auc"] = report.posterior_roc.auc;
  j["overall"]["youden"]["threshold"] = report.posterior_roc.youden_threshold;
  j["overall"]["youden"]["j"] = report.posterior_roc.youden_j;
  j["overall"]["positives"] = report.posterior_roc.positives;
  j["overall"]["negatives"] = report.posterior_roc.negatives;
  for (const auto& [subclass, curve] : report.per_label) {
    j["per_label"][subclass]["auc"] = curve.auc;
    j["per_label"][subclass]["youden"]["threshold"] = curve.youden_threshold;
    j["per_label"][subclass]["youden"]["j"] = curve.youden_j;
    j["per_label"][subclass]["positives"] = curve.positives;
  }
  j["likelihood_only"]["auc"] = report.likelihood_roc.auc;
  j["likelihood_only"]["youden"]["threshold"] = report.likelihood_roc.youden_threshold;
  j["likelihood_only"]["youden"]["j"] = report.likelihood_roc.youden_j;
  j["correlations"]["likelihood_vs_zero_pixels"]["r"] = report.corr_likelihood_zero.r;
  j["correlations"]["likelihood_vs_zero_pixels"]["defined"] = report.corr_likelihood_zero.defined;
  j["correlations"]["posterior_vs_zero_pixels"]["r"] = report.corr_posterior_zero.r;
  j["correlations"]["posterior_vs_zero_pixels"]["defined"] = report.corr_posterior_zero.defined;
  auto os = open_out(path);
  os << j.dump(2) << "\n";
}

void write_evaluation_outputs(const std::string& out_dir, const EvaluationReport& report,
                              const std::vector<ScoreRecord>& records) {
  fs::create_directories(out_dir);
  const auto at = [&](const std::string& name) { return (fs::path(out_dir) / name).string(); };
  write_roc_csv(at("roc.csv"), report.posterior_roc);
  write_roc_svg(at("roc.svg"), report.posterior_roc, "posterior score ROC");
  write_roc_csv(at("roc_likelihood.csv"), report.likelihood_roc);
  write_roc_svg(at("roc_likelihood.svg"), report.likelihood_roc, "likelihood-only ROC");
  for (const auto& [subclass, curve] : report.per_label) {
    write_roc_csv(at("roc_" + subclass + ".csv"), curve);
    write_roc_svg(at("roc_" + subclass + ".svg"), curve, "ROC: " + subclass + " vs normal");
  }
  write_histogram_csv(at("histogram_posterior.csv"), report.posterior_hist);
  write_histogram_svg(at("histogram_posterior.svg"), report.posterior_hist, "posterior score histogram");
  write_histogram_csv(at("histogram_likelihood.csv"), report.likelihood_hist);
  write_histogram_svg(at("histogram_likelihood.svg"), report.likelihood_hist, "likelihood histogram");
  write_scatter_csv(at("scatter_zero_pixels.csv"), records);
  write_scatter_svg(at("scatter_likelihood.svg"), records, ScoreField::kLoglikNormal,
                    "likelihood vs zero pixels (r=" + fmt6(report.corr_likelihood_zero.r) + ")");
  write_scatter_svg(at("scatter_posterior.svg"), records, ScoreField::kPosterior,
                    "posterior vs zero pixels (r=" + fmt6(report.corr_posterior_zero.r) + ")");
  write_summary_json(at("summary.json"), report);
}

}  // namespace flowgate
