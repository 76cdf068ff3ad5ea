#pragma once

#include <cstdint>
#include <string>

#include "flowgate/data.hpp"
#include "flowgate/model.hpp"
#include "flowgate/trainer.hpp"

namespace flowgate::cli {

inline constexpr const char* kVersion = "0.1.0";

// Exit codes shared by every subcommand.
inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitData = 3;
inline constexpr int kExitNumeric = 4;

/// Model + training defaults bundled under a named preset
/// (cxr2d, bct3d, desk2d, desk3d).
struct Preset {
  std::string name;
  FlowConfig model;
  TrainConfig train;
  int epochs_m0 = 0;  // per-model epoch defaults (m1 may differ)
  int epochs_m1 = 0;
  double sample_temperature = 0.7;
};

Preset preset_by_name(const std::string& name);

struct SynthArgs {
  std::string out_dir;
  std::string shape_spec = "16x16x1";
  std::uint64_t seed = 0;
  SynthCounts counts;
  bool confound = false;
  double margin_shift = 0.0;  // extra range shift for abnormal margins (confound only)
  // Expert overrides for the generator margin process; negative = keep
  // the variant default.
  double margin_lo = -1.0;
  double margin_hi = -1.0;
  double margin_skew = -1.0;
  bool force = false;
};

struct TrainArgs {
  std::string manifest_path;
  std::string out_dir;
  std::string which;  // "m0" or "m1"
  std::string preset = "desk2d";
  std::uint64_t seed = 0;
  int threads = 1;
  // Optional overrides; negative means "use preset".
  int levels = -1, depth = -1, width = -1, n_bits = -1;
  int epochs = -1, batch = -1, warmup = -1;
  double lr = -1.0;
};

struct ScoreArgs {
  std::string m0_path;
  std::string m1_path;
  std::string manifest_path;
  std::string out_dir;
  int threads = 0;  // 0 = all cores
  double log_prior = 0.0;
};

struct EvalArgs {
  std::string scores_path;
  std::string out_dir;
  int bins = 30;
};

struct SampleArgs {
  std::string checkpoint_path;
  std::string out_dir;
  int count = 1;
  double temperature = 0.7;
  std::uint64_t seed = 0;
};

// Subcommand bodies; they throw flowgate errors which run_cli maps onto
// exit codes. Each writes run.json into the output directory before
// doing any work.
void cmd_synth(const SynthArgs& args);
void cmd_train(const TrainArgs& args);
void cmd_score(const ScoreArgs& args);
void cmd_eval(const EvalArgs& args);
void cmd_sample(const SampleArgs& args);

/// Full argv entry point used by the binary and by tests.
int run_cli(int argc, const char* const* argv);

}  // namespace flowgate::cli
