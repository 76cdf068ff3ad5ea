#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "flowgate/cli.hpp"
#include "flowgate/scoring.hpp"

using namespace flowgate;
namespace fs = std::filesystem;

namespace {

int run(const std::vector<std::string>& args) {
  std::vector<const char*> argv{"flowgate"};
  for (const std::string& a : args) argv.push_back(a.c_str());
  return cli::run_cli(static_cast<int>(argv.size()), argv.data());
}

std::string slurp(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  REQUIRE(is);
  return std::string(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
}

struct Workspace {
  fs::path root;
  Workspace() : root(fs::temp_directory_path() / "flowgate_cli_test") {
    fs::remove_all(root);
    fs::create_directories(root);
  }
  ~Workspace() { fs::remove_all(root); }
  std::string at(const std::string& sub) const { return (root / sub).string(); }
};

std::vector<std::string> tiny_train_flags() {
  return {"--preset", "desk2d", "--levels", "1",  "--depth",  "1", "--width", "4",
          "--epochs", "2",      "--batch",  "8",  "--warmup", "2", "--lr",    "5e-4",
          "--seed",   "7",      "--threads", "2"};
}

}  // namespace

TEST_CASE("cli pipeline: synth, train, score, eval, sample") {
  Workspace ws;

  // --- synth ---
  std::vector<std::string> synth_args{"synth",
                                      "--out",
                                      ws.at("data"),
                                      "--shape",
                                      "8x8x1",
                                      "--seed",
                                      "5",
                                      "--n-normal-train",
                                      "12",
                                      "--n-mix-normal",
                                      "8",
                                      "--n-mix-abnormal",
                                      "8",
                                      "--n-test-normal",
                                      "5",
                                      "--n-test-abnormal",
                                      "5"};
  CHECK(run(synth_args) == cli::kExitOk);
  CHECK(fs::exists(ws.root / "data" / "manifest.csv"));
  CHECK(fs::exists(ws.root / "data" / "run.json"));

  // Same seed reproduces the manifest and images byte-for-byte.
  auto synth_again = synth_args;
  synth_again[2] = ws.at("data2");
  CHECK(run(synth_again) == cli::kExitOk);
  CHECK(slurp(ws.root / "data" / "manifest.csv") == slurp(ws.root / "data2" / "manifest.csv"));
  CHECK(slurp(ws.root / "data" / "normal_train_0000.pgm") == slurp(ws.root / "data2" / "normal_train_0000.pgm"));

  // Refuses to clobber without --force.
  CHECK(run(synth_args) == cli::kExitData);
  synth_args.push_back("--force");
  CHECK(run(synth_args) == cli::kExitOk);

  // --- train m0 and m1 ---
  const std::string manifest = ws.at("data/manifest.csv");
  std::vector<std::string> train_m0{"train", "--manifest", manifest, "--out", ws.at("runA"), "--which", "m0"};
  for (const auto& f : tiny_train_flags()) train_m0.push_back(f);
  CHECK(run(train_m0) == cli::kExitOk);
  CHECK(fs::exists(ws.root / "runA" / "m0.fgck"));
  CHECK(fs::exists(ws.root / "runA" / "m0_history.csv"));

  std::vector<std::string> train_m1{"train", "--manifest", manifest, "--out", ws.at("runA"), "--which", "m1"};
  for (const auto& f : tiny_train_flags()) train_m1.push_back(f);
  CHECK(run(train_m1) == cli::kExitOk);

  // Re-running m0 with the same seed reproduces the checkpoint bytes.
  auto train_again = train_m0;
  train_again[4] = ws.at("runB");
  CHECK(run(train_again) == cli::kExitOk);
  CHECK(slurp(ws.root / "runA" / "m0.fgck") == slurp(ws.root / "runB" / "m0.fgck"));

  // --- score ---
  const std::vector<std::string> score_args{"score",      "--m0",  ws.at("runA/m0.fgck"), "--m1",
                                            ws.at("runA/m1.fgck"), "--manifest", manifest, "--out",
                                            ws.at("scores"), "--threads", "2"};
  CHECK(run(score_args) == cli::kExitOk);
  const auto records = read_scores_csv(ws.at("scores/scores.csv"));
  CHECK(records.size() == 10);  // test split size

  // Scoring twice is byte-identical (deterministic dequantization).
  auto score_again = score_args;
  score_again[8] = ws.at("scores2");
  CHECK(run(score_again) == cli::kExitOk);
  CHECK(slurp(ws.root / "scores" / "scores.csv") == slurp(ws.root / "scores2" / "scores.csv"));

  // Swapping m0/m1 negates (score - constant).
  std::vector<std::string> swapped{"score",      "--m0",  ws.at("runA/m1.fgck"), "--m1",
                                   ws.at("runA/m0.fgck"), "--manifest", manifest, "--out",
                                   ws.at("scores_swapped"), "--threads", "1"};
  CHECK(run(swapped) == cli::kExitOk);
  const auto rev = read_scores_csv(ws.at("scores_swapped/scores.csv"));
  REQUIRE(rev.size() == records.size());
  for (std::size_t i = 0; i < records.size(); ++i)
    CHECK(rev[i].posterior_score == doctest::Approx(-records[i].posterior_score).epsilon(1e-12));

  // --- eval ---
  const std::vector<std::string> eval_args{"eval", "--scores", ws.at("scores/scores.csv"), "--out", ws.at("eval")};
  CHECK(run(eval_args) == cli::kExitOk);
  CHECK(fs::exists(ws.root / "eval" / "roc.csv"));
  CHECK(fs::exists(ws.root / "eval" / "summary.json"));
  CHECK(fs::exists(ws.root / "eval" / "run.json"));

  // --- sample ---
  const std::vector<std::string> sample_args{"sample", "--checkpoint", ws.at("runA/m0.fgck"), "--out",
                                             ws.at("samples"), "--n", "2", "--seed", "3"};
  CHECK(run(sample_args) == cli::kExitOk);
  CHECK(fs::exists(ws.root / "samples" / "sample_000.pgm"));
  CHECK(fs::exists(ws.root / "samples" / "sample_001.pgm"));

  auto sample_again = sample_args;
  sample_again[4] = ws.at("samples2");
  CHECK(run(sample_again) == cli::kExitOk);
  CHECK(slurp(ws.root / "samples" / "sample_000.pgm") == slurp(ws.root / "samples2" / "sample_000.pgm"));

  // Temperature zero: identical output for any seed.
  std::vector<std::string> mode_a{"sample", "--checkpoint", ws.at("runA/m0.fgck"), "--out", ws.at("mode_a"),
                                  "--n", "1", "--seed", "1", "--temperature", "0"};
  std::vector<std::string> mode_b = mode_a;
  mode_b[4] = ws.at("mode_b");
  mode_b[8] = "942";
  CHECK(run(mode_a) == cli::kExitOk);
  CHECK(run(mode_b) == cli::kExitOk);
  CHECK(slurp(ws.root / "mode_a" / "sample_000.pgm") == slurp(ws.root / "mode_b" / "sample_000.pgm"));
}

TEST_CASE("cli guards: labels, compatibility, usage") {
  Workspace ws;
  CHECK(run({"synth", "--out", ws.at("data"), "--shape", "8x8x1", "--seed", "1", "--n-normal-train", "6",
             "--n-mix-normal", "4", "--n-mix-abnormal", "4", "--n-test-normal", "3", "--n-test-abnormal", "3"}) ==
        cli::kExitOk);

  // Manifest with an abnormal label inside normal_train: train m0 refuses
  // before any training happens.
  std::string manifest_text = slurp(ws.root / "data" / "manifest.csv");
  const std::string needle = "normal_train_0000.pgm,normal_train,";
  manifest_text.replace(manifest_text.find(needle), needle.size(), needle + "abnormal");
  std::ofstream(ws.at("data/bad_manifest.csv")) << manifest_text;
  std::vector<std::string> bad_train{"train", "--manifest", ws.at("data/bad_manifest.csv"), "--out",
                                     ws.at("bad"), "--which", "m0"};
  for (const auto& f : tiny_train_flags()) bad_train.push_back(f);
  CHECK(run(bad_train) == cli::kExitData);
  CHECK_FALSE(fs::exists(ws.root / "bad" / "m0.fgck"));

  // Train two incompatible checkpoints, then refuse to score with them.
  std::vector<std::string> train_small{"train", "--manifest", ws.at("data/manifest.csv"), "--out",
                                       ws.at("runS"), "--which", "m0"};
  for (const auto& f : tiny_train_flags()) train_small.push_back(f);
  CHECK(run(train_small) == cli::kExitOk);

  CHECK(run({"synth", "--out", ws.at("data16"), "--shape", "16x16x1", "--seed", "2", "--n-normal-train", "6",
             "--n-mix-normal", "4", "--n-mix-abnormal", "4", "--n-test-normal", "3", "--n-test-abnormal", "3"}) ==
        cli::kExitOk);
  std::vector<std::string> train_large{"train", "--manifest", ws.at("data16/manifest.csv"), "--out",
                                       ws.at("runL"), "--which", "m1"};
  for (const auto& f : tiny_train_flags()) train_large.push_back(f);
  CHECK(run(train_large) == cli::kExitOk);

  CHECK(run({"score", "--m0", ws.at("runS/m0.fgck"), "--m1", ws.at("runL/m1.fgck"), "--manifest",
             ws.at("data/manifest.csv"), "--out", ws.at("mismatch")}) == cli::kExitData);

  // Usage errors.
  CHECK(run({"train", "--manifest", ws.at("data/manifest.csv"), "--out", ws.at("x"), "--which", "m2"}) ==
        cli::kExitUsage);
  CHECK(run({"nonsense"}) == cli::kExitUsage);
  CHECK(run({"train", "--which", "m0"}) == cli::kExitUsage);  // missing required flags
  CHECK(run({"train", "--manifest", ws.at("data/manifest.csv"), "--out", ws.at("x"), "--which", "m0", "--preset",
             "bogus"}) == cli::kExitUsage);

  // Eval with no labeled rows.
  std::ofstream(ws.at("unlabeled.csv"))
      << "id,loglik_normal,loglik_all,posterior_score,zero_pixel_fraction,label\nimg,1,1,0,0.5,\n";
  CHECK(run({"eval", "--scores", ws.at("unlabeled.csv"), "--out", ws.at("evalu")}) == cli::kExitData);
}
