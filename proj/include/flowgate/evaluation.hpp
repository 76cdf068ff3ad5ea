#pragma once

#include <map>
#include <string>
#include <vector>

#include "flowgate/scoring.hpp"

namespace flowgate {

struct RocPoint {
  double threshold;  // decision statistic cutoff (predict positive when stat >= threshold)
  double fpr;
  double tpr;
};

/// Threshold sweep from +inf down over all distinct statistic values:
/// FPR and TPR are non-decreasing, endpoints (0,0) and (1,1) included.
struct RocCurve {
  std::vector<RocPoint> points;
  double auc = 0.0;  // trapezoidal; equals Mann-Whitney with half-credit ties
  double youden_threshold = 0.0;
  double youden_j = 0.0;  // max TPR - FPR; ties resolved toward lower FPR
  std::size_t positives = 0;
  std::size_t negatives = 0;
};

/// Statistics oriented "higher = more likely positive"; labels 1 =
/// positive, 0 = negative. Throws EvaluationError when a class is
/// missing.
RocCurve roc_from_stats(const std::vector<double>& stats, const std::vector<int>& labels);

double auc(const RocCurve& curve);
std::pair<double, double> youden_cutoff(const RocCurve& curve);  // (threshold, J)

/// Abnormal is the positive class and the decision statistic is
/// -posterior_score (lower posterior = more abnormal). Unlabeled
/// records are excluded.
RocCurve roc_posterior(const std::vector<ScoreRecord>& records);
/// Same, scored by -loglik_normal (likelihood-only comparison).
RocCurve roc_likelihood(const std::vector<ScoreRecord>& records);

/// {normal} vs {one abnormal subclass}; other abnormal records are
/// excluded. `subclass` may be bare ("bright"), prefixed
/// ("abnormal:bright"), or "abnormal" for all abnormals.
RocCurve per_label_roc(const std::vector<ScoreRecord>& records, const std::string& subclass);

struct PearsonResult {
  double r = 0.0;
  bool defined = false;  // false when either variance is degenerate
};

PearsonResult pearson(const std::vector<double>& x, const std::vector<double>& y);

enum class ScoreField { kPosterior, kLoglikNormal, kLoglikAll, kZeroPixelFraction };

double record_field(const ScoreRecord& r, ScoreField field);
std::string field_name(ScoreField field);

struct Histogram {
  double lo = 0.0;
  double hi = 0.0;
  int bins = 0;
  // class name ("normal", "abnormal", "unlabeled") -> per-bin counts
  std::map<std::string, std::vector<std::int64_t>> counts;
};

/// Equal-width bins over the observed range across all records;
/// per-class counts.
Histogram histogram(const std::vector<ScoreRecord>& records, ScoreField field, int bins);

struct EvaluationReport {
  RocCurve posterior_roc;
  RocCurve likelihood_roc;
  std::map<std::string, RocCurve> per_label;  // subclass -> curve
  PearsonResult corr_likelihood_zero;  // likelihood score vs zero-pixel fraction
  PearsonResult corr_posterior_zero;
  Histogram posterior_hist;
  Histogram likelihood_hist;
  std::map<std::string, std::size_t> label_counts;
  std::size_t unlabeled = 0;
};

EvaluationReport evaluate_records(const std::vector<ScoreRecord>& records, int hist_bins = 30);

// File emission. CSV is canonical; SVG plots are minimal hand-emitted
// vector files.
void write_roc_csv(const std::string& path, const RocCurve& curve);
void write_roc_svg(const std::string& path, const RocCurve& curve, const std::string& title);
void write_histogram_csv(const std::string& path, const Histogram& hist);
void write_histogram_svg(const std::string& path, const Histogram& hist, const std::string& title);
void write_scatter_csv(const std::string& path, const std::vector<ScoreRecord>& records);
void write_scatter_svg(const std::string& path, const std::vector<ScoreRecord>& records, ScoreField y_field,
                       const std::string& title);
void write_summary_json(const std::string& path, const EvaluationReport& report);

/// roc.csv, summary.json, histograms, scatter data and all SVGs.
void write_evaluation_outputs(const std::string& out_dir, const EvaluationReport& report,
                              const std::vector<ScoreRecord>& records);

}  // namespace flowgate
