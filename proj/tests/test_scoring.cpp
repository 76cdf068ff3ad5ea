#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "flowgate/scoring.hpp"
#include "test_util.hpp"

using namespace flowgate;

namespace {

FlowModel make_model(std::uint64_t init_seed, double perturbation) {
  FlowConfig cfg;
  cfg.input_shape = {4, 4, 1};
  cfg.levels = 1;
  cfg.depth = 1;
  cfg.width = 4;
  cfg.n_bits = 7;
  cfg.init_seed = init_seed;
  FlowModel model(cfg);
  Rng rng(init_seed + 100);
  for (Parameter* p : model.parameters())
    for (std::int64_t i = 0; i < p->value.size(); ++i) p->value[i] += perturbation * (rng.next_double() - 0.5);
  return model;
}

Tensor random_raw(Rng& rng) {
  Tensor img({4, 4, 1});
  for (std::int64_t i = 0; i < img.size(); ++i) img[i] = static_cast<double>(rng.next_below(128));
  return img;
}

}  // namespace

TEST_CASE("posterior score is the exact log-likelihood difference") {
  const FlowModel m0 = make_model(1, 0.2);
  const FlowModel m1 = make_model(2, 0.2);
  const DualScorer scorer(m0, m1);
  Rng rng(3);
  const Tensor raw = random_raw(rng);
  const ScoreRecord r = score_sample(scorer, "x", raw);
  CHECK(r.posterior_score == r.loglik_normal - r.loglik_all);  // constant omitted: exact
  const Tensor deq = dequantize(raw, 7, nullptr);
  CHECK(r.loglik_normal == m0.log_prob(deq));
  CHECK(r.loglik_all == m1.log_prob(deq));

  const DualScorer with_prior(m0, m1, -3.2);
  CHECK(posterior_score(with_prior, raw) == doctest::Approx(r.posterior_score - 3.2).epsilon(1e-15));
}

TEST_CASE("identical models give a constant score for every input") {
  const FlowModel m = make_model(4, 0.3);
  const DualScorer scorer(m, m, 0.0);
  Rng rng(5);
  for (int i = 0; i < 5; ++i) CHECK(posterior_score(scorer, random_raw(rng)) == 0.0);
  const DualScorer shifted(m, m, 1.75);
  for (int i = 0; i < 5; ++i) CHECK(posterior_score(shifted, random_raw(rng)) == 1.75);
}

TEST_CASE("batch scoring equals per-sample scoring") {
  const FlowModel m0 = make_model(6, 0.2);
  const FlowModel m1 = make_model(7, 0.2);
  const DualScorer scorer(m0, m1);
  Rng rng(8);
  std::vector<Sample> samples;
  for (int i = 0; i < 12; ++i) samples.push_back({"s" + std::to_string(i), random_raw(rng), ""});
  const std::vector<ScoreRecord> batch = score_samples(scorer, samples, 4);
  REQUIRE(batch.size() == samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const ScoreRecord solo = score_sample(scorer, samples[i].id, samples[i].raw);
    CHECK(batch[i].id == samples[i].id);
    CHECK(batch[i].posterior_score == solo.posterior_score);
    CHECK(batch[i].loglik_normal == solo.loglik_normal);
  }
  // Deterministic dequantization: scoring twice gives identical values.
  const std::vector<ScoreRecord> again = score_samples(scorer, samples, 1);
  for (std::size_t i = 0; i < samples.size(); ++i)
    CHECK(batch[i].posterior_score == again[i].posterior_score);
}

TEST_CASE("likelihood score and the posterior identity") {
  const FlowModel m0 = make_model(9, 0.2);
  const FlowModel m1 = make_model(10, 0.2);
  Rng rng(11);
  const Tensor raw = random_raw(rng);
  CHECK(likelihood_score(m0, raw) == m0.log_prob(dequantize(raw, 7, nullptr)));

  const double constant = 0.8;
  const DualScorer scorer(m0, m1, constant);
  const ScoreRecord r = score_sample(scorer, "x", raw);
  CHECK(r.posterior_score - likelihood_score(m0, raw) == doctest::Approx(-r.loglik_all + constant).epsilon(1e-15));
  CHECK(r.posterior_score + r.loglik_all - r.loglik_normal == doctest::Approx(constant).epsilon(1e-15));
}

TEST_CASE("zero_pixel_fraction counts exactly") {
  CHECK(zero_pixel_fraction(Tensor({2, 2, 1})) == 1.0);
  CHECK(zero_pixel_fraction(Tensor({2, 2, 1}, {1, 2, 3, 4})) == 0.0);
  Tensor img({4, 4, 1}, 5.0);
  img[0] = img[3] = img[7] = img[12] = 0.0;
  CHECK(zero_pixel_fraction(img) == 0.25);
}

TEST_CASE("rank_by_score ordering, ties and truncation") {
  std::vector<ScoreRecord> records(3);
  records[0].id = "a";
  records[0].posterior_score = -5.0;
  records[1].id = "b";
  records[1].posterior_score = -1.0;
  records[2].id = "c";
  records[2].posterior_score = -9.0;

  const Ranking most_abnormal = rank_by_score(records, 2, RankDirection::kMostAbnormal);
  REQUIRE(most_abnormal.records.size() == 2);
  CHECK(most_abnormal.records[0].id == "c");
  CHECK(most_abnormal.records[1].id == "a");
  CHECK_FALSE(most_abnormal.truncated_request);

  const Ranking full = rank_by_score(records, 3, RankDirection::kMostNormal);
  CHECK(full.records[0].id == "b");
  CHECK(full.records[2].id == "c");

  const Ranking over = rank_by_score(records, 10, RankDirection::kMostNormal);
  CHECK(over.truncated_request);
  CHECK(over.records.size() == 3);

  // Stable tie-break by id.
  for (auto& r : records) r.posterior_score = 1.0;
  const Ranking tied = rank_by_score(records, 3, RankDirection::kMostAbnormal);
  CHECK(tied.records[0].id == "a");
  CHECK(tied.records[1].id == "b");
  CHECK(tied.records[2].id == "c");
}

TEST_CASE("rankings are invariant to the prior constant") {
  const FlowModel m0 = make_model(12, 0.25);
  const FlowModel m1 = make_model(13, 0.25);
  Rng rng(14);
  std::vector<Sample> samples;
  for (int i = 0; i < 10; ++i) samples.push_back({"s" + std::to_string(i), random_raw(rng), ""});
  const DualScorer plain(m0, m1, 0.0);
  const DualScorer shifted(m0, m1, -3.2);
  const auto rank_plain = rank_by_score(score_samples(plain, samples, 1), 10, RankDirection::kMostAbnormal);
  const auto rank_shifted = rank_by_score(score_samples(shifted, samples, 1), 10, RankDirection::kMostAbnormal);
  for (std::size_t i = 0; i < 10; ++i) CHECK(rank_plain.records[i].id == rank_shifted.records[i].id);
}

TEST_CASE("scorer rejects incompatible models") {
  const FlowModel m0 = make_model(15, 0.1);
  FlowConfig other;
  other.input_shape = {8, 8, 1};
  other.levels = 1;
  other.depth = 1;
  other.width = 4;
  other.n_bits = 7;
  const FlowModel m_shape(other);
  CHECK_THROWS_AS(DualScorer(m0, m_shape), DimensionError);

  other.input_shape = {4, 4, 1};
  other.n_bits = 8;
  const FlowModel m_bits(other);
  CHECK_THROWS_AS(DualScorer(m0, m_bits), DataError);
}

TEST_CASE("scores CSV round-trips exactly") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "flowgate_scores_test";
  fs::create_directories(dir);
  const std::string path = (dir / "scores.csv").string();

  std::vector<ScoreRecord> records(3);
  records[0] = {"img_0", -123.456789012345678, -120.0, -3.456789012345678, 0.25, "normal"};
  records[1] = {"img_1", -1e-17, 1e17, -1e17, 0.0, "abnormal:bright"};
  records[2] = {"img_2", 3.14159, 2.71828, 0.42331, 0.9921875, ""};
  write_scores_csv(path, records);
  const std::vector<ScoreRecord> back = read_scores_csv(path);
  REQUIRE(back.size() == records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    CHECK(back[i].id == records[i].id);
    CHECK(back[i].loglik_normal == records[i].loglik_normal);
    CHECK(back[i].loglik_all == records[i].loglik_all);
    CHECK(back[i].posterior_score == records[i].posterior_score);
    CHECK(back[i].zero_pixel_fraction == records[i].zero_pixel_fraction);
    CHECK(back[i].label == records[i].label);
  }
  fs::remove_all(dir);
}
