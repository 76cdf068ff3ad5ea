#include "flowgate/scoring.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "flowgate/parallel.hpp"

namespace flowgate {

DualScorer::DualScorer(const FlowModel& normal_model, const FlowModel& mixture_model, double log_prior_constant)
    : m0(&normal_model), m1(&mixture_model), log_prior(log_prior_constant) {
  if (m0->config().input_shape != m1->config().input_shape)
    throw DimensionError("scorer models disagree on input shape: " + shape_str(m0->config().input_shape) + " vs " +
                         shape_str(m1->config().input_shape));
  if (m0->config().n_bits != m1->config().n_bits)
    throw DataError("scorer models disagree on n_bits: " + std::to_string(m0->config().n_bits) + " vs " +
                    std::to_string(m1->config().n_bits));
}

double zero_pixel_fraction(const Tensor& raw) {
  std::int64_t zeros = 0;
  for (std::int64_t i = 0; i < raw.size(); ++i)
    if (raw[i] == 0.0) ++zeros;
  return static_cast<double>(zeros) / static_cast<double>(raw.size());
}

ScoreRecord score_sample(const DualScorer& scorer, const std::string& id, const Tensor& raw,
                         const std::string& label) {
  const Tensor x = dequantize(raw, scorer.m0->config().n_bits, nullptr);
  ScoreRecord r;
  r.id = id;
  r.loglik_normal = scorer.m0->log_prob(x);
  r.loglik_all = scorer.m1->log_prob(x);
  r.posterior_score = r.loglik_normal - r.loglik_all + scorer.log_prior;
  r.zero_pixel_fraction = zero_pixel_fraction(raw);
  r.label = label;
  return r;
}

double posterior_score(const DualScorer& scorer, const Tensor& raw) {
  return score_sample(scorer, "", raw).posterior_score;
}

double likelihood_score(const FlowModel& m0, const Tensor& raw) {
  return m0.log_prob(dequantize(raw, m0.config().n_bits, nullptr));
}

std::vector<ScoreRecord> score_samples(const DualScorer& scorer, const std::vector<Sample>& samples, int threads) {
  std::vector<ScoreRecord> records(samples.size());
  parallel_for(static_cast<std::int64_t>(samples.size()), threads, [&](std::int64_t i) {
    const Sample& s = samples[static_cast<std::size_t>(i)];
    records[static_cast<std::size_t>(i)] = score_sample(scorer, s.id, s.raw, s.label);
  });
  return records;
}

Ranking rank_by_score(std::vector<ScoreRecord> records, std::size_t k, RankDirection direction) {
  Ranking out;
  out.truncated_request = k > records.size();
  std::sort(records.begin(), records.end(), [direction](const ScoreRecord& a, const ScoreRecord& b) {
    if (a.posterior_score != b.posterior_score)
      return direction == RankDirection::kMostAbnormal ? a.posterior_score < b.posterior_score
                                                       : a.posterior_score > b.posterior_score;
    return a.id < b.id;
  });
  if (k < records.size()) records.resize(k);
  out.records = std::move(records);
  return out;
}

void write_scores_csv(const std::string& path, const std::vector<ScoreRecord>& records) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot open scores for writing: " + path);
  os << "id,loglik_normal,loglik_all,posterior_score,zero_pixel_fraction,label\n";
  char buf[256];
  for (const ScoreRecord& r : records) {
    std::snprintf(buf, sizeof buf, ",%.17g,%.17g,%.17g,%.17g,", r.loglik_normal, r.loglik_all, r.posterior_score,
                  r.zero_pixel_fraction);
    os << r.id << buf << r.label << "\n";
  }
  if (!os) throw DataError("scores write failed: " + path);
}

std::vector<ScoreRecord> read_scores_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open scores: " + path);
  std::string line;
  if (!std::getline(is, line)) throw DataError("empty scores file: " + path);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "id,loglik_normal,loglik_all,posterior_score,zero_pixel_fraction,label")
    throw DataError("unexpected scores header: " + line);
  std::vector<ScoreRecord> out;
  int line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::size_t pos = 0;
    for (int f = 0; f < 5; ++f) {
      const auto comma = line.find(',', pos);
      if (comma == std::string::npos)
        throw DataError("scores line " + std::to_string(line_no) + " needs 6 fields");
      fields.push_back(line.substr(pos, comma - pos));
      pos = comma + 1;
    }
    fields.push_back(line.substr(pos));
    ScoreRecord r;
    r.id = fields[0];
    try {
      r.loglik_normal = std::stod(fields[1]);
      r.loglik_all = std::stod(fields[2]);
      r.posterior_score = std::stod(fields[3]);
      r.zero_pixel_fraction = std::stod(fields[4]);
    } catch (const std::exception&) {
      throw DataError("scores line " + std::to_string(line_no) + " has a malformed number");
    }
    r.label = fields[5];
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace flowgate
