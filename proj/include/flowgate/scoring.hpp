#pragma once

#include <string>
#include <vector>

#include "flowgate/data.hpp"
#include "flowgate/model.hpp"

namespace flowgate {

/// Pair of trained models: m0 fitted to normal-only data, m1 to the
/// unlabeled mixture. The optional log-prior constant shifts every
/// score equally and so never changes rankings or ROC curves.
struct DualScorer {
  const FlowModel* m0 = nullptr;
  const FlowModel* m1 = nullptr;
  double log_prior = 0.0;

  DualScorer(const FlowModel& normal_model, const FlowModel& mixture_model, double log_prior_constant = 0.0);
};

struct ScoreRecord {
  std::string id;
  double loglik_normal = 0.0;  // log p(x|normal), from m0
  double loglik_all = 0.0;     // log p(x), from m1
  double posterior_score = 0.0;
  double zero_pixel_fraction = 0.0;
  std::string label;
};

/// count(value == 0) / total on the raw, pre-dequantization image.
double zero_pixel_fraction(const Tensor& raw);

/// log p(normal|x) up to the omitted constant:
/// loglik_normal - loglik_all + log_prior. Higher = more normal.
/// Dequantization here is deterministic (u = 0.5) so scores repeat
/// exactly.
ScoreRecord score_sample(const DualScorer& scorer, const std::string& id, const Tensor& raw,
                         const std::string& label = "");
double posterior_score(const DualScorer& scorer, const Tensor& raw);

/// Likelihood-only score: log p(x|normal) alone. Kept for comparison;
/// it is confounded by background statistics.
double likelihood_score(const FlowModel& m0, const Tensor& raw);

std::vector<ScoreRecord> score_samples(const DualScorer& scorer, const std::vector<Sample>& samples, int threads);

enum class RankDirection { kMostAbnormal, kMostNormal };

struct Ranking {
  std::vector<ScoreRecord> records;
  bool truncated_request = false;  // k exceeded the record count
};

/// Top-k by posterior score (ascending = most abnormal first); stable
/// tie-break by sample id.
Ranking rank_by_score(std::vector<ScoreRecord> records, std::size_t k, RankDirection direction);

// Scores CSV: id,loglik_normal,loglik_all,posterior_score,
// zero_pixel_fraction,label. Doubles round-trip exactly.
void write_scores_csv(const std::string& path, const std::vector<ScoreRecord>& records);
std::vector<ScoreRecord> read_scores_csv(const std::string& path);

}  // namespace flowgate
