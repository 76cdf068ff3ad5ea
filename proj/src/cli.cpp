#include "flowgate/cli.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "flowgate/evaluation.hpp"
#include "flowgate/parallel.hpp"
#include "flowgate/scoring.hpp"

namespace flowgate::cli {

namespace fs = std::filesystem;

namespace {

Shape parse_shape(const std::string& spec) {
  Shape shape;
  std::size_t pos = 0;
  while (pos <= spec.size()) {
    const auto x = spec.find('x', pos);
    const std::string token = spec.substr(pos, x == std::string::npos ? std::string::npos : x - pos);
    try {
      shape.push_back(std::stoi(token));
    } catch (const std::exception&) {
      throw UsageError("bad shape '" + spec + "' (expected e.g. 16x16x1 or 8x16x16x1)");
    }
    if (x == std::string::npos) break;
    pos = x + 1;
  }
  if (shape.size() != 3 && shape.size() != 4)
    throw UsageError("shape '" + spec + "' must have 3 (2-D) or 4 (3-D) extents");
  return shape;
}

void write_run_json(const std::string& out_dir, const std::string& subcommand, const nlohmann::json& config) {
  fs::create_directories(out_dir);
  nlohmann::json j;
  j["tool"] = "flowgate";
  j["version"] = kVersion;
  j["subcommand"] = subcommand;
  j["config"] = config;
  std::ofstream os((fs::path(out_dir) / "run.json").string());
  if (!os) throw DataError("cannot write run.json in " + out_dir);
  os << j.dump(2) << "\n";
}

}  // namespace

Preset preset_by_name(const std::string& name) {
  Preset p;
  p.name = name;
  if (name == "cxr2d") {
    p.model = {false, {512, 512, 1}, 7, 32, 512, 8, 0};
    p.train.batch_size = 128;
    p.train.learning_rate = 1e-3;
    p.train.warmup_steps = 500;
    p.epochs_m0 = p.epochs_m1 = 200;
  } else if (name == "bct3d") {
    p.model = {true, {32, 128, 128, 1}, 4, 32, 512, 7, 0};
    p.train.batch_size = 1;
    p.train.learning_rate = 1e-4;
    p.train.warmup_steps = 500;
    p.epochs_m0 = 30;
    p.epochs_m1 = 20;
  } else if (name == "desk2d") {
    p.model = {false, {16, 16, 1}, 2, 4, 64, 7, 0};
    p.train.batch_size = 32;
    p.train.learning_rate = 1e-3;
    p.train.warmup_steps = 40;
    p.epochs_m0 = p.epochs_m1 = 14;
  } else if (name == "desk3d") {
    p.model = {true, {8, 16, 16, 1}, 2, 2, 32, 7, 0};
    p.train.batch_size = 8;
    p.train.learning_rate = 1e-3;
    p.train.warmup_steps = 40;
    p.epochs_m0 = p.epochs_m1 = 8;
  } else {
    throw UsageError("unknown preset '" + name + "' (expected cxr2d, bct3d, desk2d or desk3d)");
  }
  return p;
}

void cmd_synth(const SynthArgs& args) {
  if (fs::exists(args.out_dir) && !fs::is_empty(args.out_dir) && !args.force)
    throw DataError("output directory " + args.out_dir + " is not empty (use --force to write anyway)");
  SynthSpec spec;
  spec.shape = parse_shape(args.shape_spec);
  spec.seed = args.seed;
  if (args.confound) {
    // Both classes cover the same wide margin range so both trained
    // models see every background regime, but abnormal margins skew
    // toward the high end: more background, more zero pixels. The
    // zero-pixel fraction then varies a lot within each class and
    // differs between them, which is what lets the likelihood-only
    // score latch onto background statistics while the likelihood
    // ratio stays focused on the lesions.
    spec.margin_lo = 1.0;
    spec.margin_hi = 5.0;
    spec.abnormal_margin_shift = args.margin_shift;
    spec.abnormal_margin_skew = 0.5;
  }
  if (args.margin_lo >= 0.0) spec.margin_lo = args.margin_lo;
  if (args.margin_hi >= 0.0) spec.margin_hi = args.margin_hi;
  if (args.margin_skew > 0.0) spec.abnormal_margin_skew = args.margin_skew;

  nlohmann::json cfg;
  cfg["out"] = args.out_dir;
  cfg["shape"] = spec.shape;
  cfg["seed"] = args.seed;
  cfg["confound"] = args.confound;
  cfg["margin_shift"] = spec.abnormal_margin_shift;
  cfg["counts"] = {{"normal_train", args.counts.normal_train},
                   {"mixture_normal", args.counts.mixture_normal},
                   {"mixture_abnormal", args.counts.mixture_abnormal},
                   {"test_normal", args.counts.test_normal},
                   {"test_abnormal", args.counts.test_abnormal}};
  write_run_json(args.out_dir, "synth", cfg);

  const DatasetManifest manifest = write_synth_dataset(spec, args.counts, args.out_dir);
  std::cout << "wrote " << manifest.entries.size() << " images + manifest.csv to " << args.out_dir << "\n";
}

void cmd_train(const TrainArgs& args) {
  if (args.which != "m0" && args.which != "m1") throw UsageError("--which must be m0 or m1");
  Preset preset = preset_by_name(args.preset);
  FlowConfig mc = preset.model;
  if (args.levels > 0) mc.levels = args.levels;
  if (args.depth >= 0) mc.depth = args.depth;
  if (args.width > 0) mc.width = args.width;
  if (args.n_bits > 0) mc.n_bits = args.n_bits;
  TrainConfig tc = preset.train;
  tc.epochs = args.epochs > 0 ? args.epochs : (args.which == "m0" ? preset.epochs_m0 : preset.epochs_m1);
  if (args.batch > 0) tc.batch_size = args.batch;
  if (args.lr > 0.0) tc.learning_rate = args.lr;
  if (args.warmup >= 0) tc.warmup_steps = args.warmup;
  tc.seed = args.seed;
  tc.threads = args.threads < 1 ? 1 : args.threads;

  nlohmann::json cfg;
  cfg["manifest"] = args.manifest_path;
  cfg["which"] = args.which;
  cfg["preset"] = args.preset;
  cfg["seed"] = args.seed;
  cfg["threads"] = tc.threads;
  cfg["model"] = {{"threed", mc.threed}, {"levels", mc.levels},   {"depth", mc.depth},
                  {"width", mc.width},   {"n_bits", mc.n_bits}};
  cfg["train"] = {{"epochs", tc.epochs},
                  {"batch_size", tc.batch_size},
                  {"learning_rate", tc.learning_rate},
                  {"warmup_steps", tc.warmup_steps},
                  {"clip_norm", tc.clip_norm},
                  {"validation_fraction", tc.validation_fraction}};
  write_run_json(args.out_dir, "train", cfg);

  const DatasetManifest manifest = read_manifest(args.manifest_path);
  LoadOptions load_opts;
  load_opts.n_bits = mc.n_bits;
  const LoadedDataset ds = load_dataset(manifest, load_opts);
  const std::vector<Sample>& split = args.which == "m0" ? ds.normal_train : ds.mixture_train;
  if (split.empty()) throw DataError("split for " + args.which + " is empty");
  if (args.which == "m0")
    for (const Sample& s : split)
      if (is_abnormal_label(s.label))
        throw DataError("m0 trains on normal-only data but '" + s.id + "' is labeled " + s.label);
  if (ds.overlap_count > 0)
    std::cout << "note: " << ds.overlap_count << " file(s) shared between normal_train and mixture_train\n";

  mc.input_shape = ds.shape;
  mc.threed = ds.shape.size() == 4;
  mc.init_seed = args.seed;
  FlowModel model(mc);

  std::vector<Tensor> images;
  images.reserve(split.size());
  for (const Sample& s : split) images.push_back(s.raw);

  std::cout << "training " << args.which << " on " << images.size() << " images, " << tc.epochs << " epochs\n";
  TrainResult result = train(std::move(model), images, tc, [](const EpochRecord& r) {
    std::printf("epoch %3d  step %5lld  lr %.3g  train_nll %.4f  val_bits %.5f\n", r.epoch,
                static_cast<long long>(r.step), r.lr, r.train_nll, r.val_bits_per_dim);
  });

  TrainMeta meta;
  meta.epoch = result.history.empty() ? 0 : result.history.back().epoch;
  meta.step = result.history.empty() ? 0 : result.history.back().step;
  meta.rng_state = "seed:" + std::to_string(args.seed);
  const std::string ckpt_path = (fs::path(args.out_dir) / (args.which + ".fgck")).string();
  result.model.save(ckpt_path, meta);
  write_history_csv((fs::path(args.out_dir) / (args.which + "_history.csv")).string(), result.history);

  if (result.aborted)
    throw NumericError("training aborted (" + result.abort_reason + "); last good checkpoint kept at " + ckpt_path);
  std::cout << "best epoch " << result.best_epoch << " val_bits " << result.best_val_bits_per_dim << " -> "
            << ckpt_path << "\n";
}

void cmd_score(const ScoreArgs& args) {
  nlohmann::json cfg;
  cfg["m0"] = args.m0_path;
  cfg["m1"] = args.m1_path;
  cfg["manifest"] = args.manifest_path;
  cfg["threads"] = args.threads;
  cfg["log_prior"] = args.log_prior;
  // The mixture-vs-test population match is assumed, not verified.
  cfg["assumptions"] = {"mixture_train and test are drawn from the same population"};
  write_run_json(args.out_dir, "score", cfg);

  const FlowModel m0 = FlowModel::load(args.m0_path);
  const FlowModel m1 = FlowModel::load(args.m1_path);
  const DualScorer scorer(m0, m1, args.log_prior);

  const DatasetManifest manifest = read_manifest(args.manifest_path);
  LoadOptions load_opts;
  load_opts.n_bits = m0.config().n_bits;
  load_opts.expected_shape = m0.config().input_shape;
  const LoadedDataset ds = load_dataset(manifest, load_opts);
  if (ds.test.empty()) throw DataError("manifest has no test entries to score");

  const int threads = args.threads > 0 ? args.threads : default_thread_count();
  const std::vector<ScoreRecord> records = score_samples(scorer, ds.test, threads);
  const std::string path = (fs::path(args.out_dir) / "scores.csv").string();
  write_scores_csv(path, records);
  std::cout << "scored " << records.size() << " test images -> " << path << "\n";
}

void cmd_eval(const EvalArgs& args) {
  nlohmann::json cfg;
  cfg["scores"] = args.scores_path;
  cfg["bins"] = args.bins;
  write_run_json(args.out_dir, "eval", cfg);

  const std::vector<ScoreRecord> records = read_scores_csv(args.scores_path);
  bool any_label = false;
  for (const ScoreRecord& r : records)
    if (!r.label.empty()) any_label = true;
  if (!any_label) throw DataError("scores file has no labeled records to evaluate");

  const EvaluationReport report = evaluate_records(records, args.bins);
  write_evaluation_outputs(args.out_dir, report, records);
  std::printf("overall AUC %.4f (youden J %.4f at %.4g); likelihood-only AUC %.4f\n", report.posterior_roc.auc,
              report.posterior_roc.youden_j, report.posterior_roc.youden_threshold, report.likelihood_roc.auc);
  for (const auto& [subclass, curve] : report.per_label)
    std::printf("  %s AUC %.4f (n=%zu)\n", subclass.c_str(), curve.auc, curve.positives);
}

void cmd_sample(const SampleArgs& args) {
  if (args.count < 1) throw UsageError("--n must be >= 1");
  if (args.temperature < 0.0) throw UsageError("--temperature must be >= 0");
  nlohmann::json cfg;
  cfg["checkpoint"] = args.checkpoint_path;
  cfg["n"] = args.count;
  cfg["temperature"] = args.temperature;
  cfg["seed"] = args.seed;
  write_run_json(args.out_dir, "sample", cfg);

  const FlowModel model = FlowModel::load(args.checkpoint_path);
  const int n_bits = model.config().n_bits;
  const int max_value = (1 << n_bits) - 1;
  char name[64];
  for (int i = 0; i < args.count; ++i) {
    const Tensor x = model.sample(args.seed + static_cast<std::uint64_t>(i), args.temperature);
    const Tensor img = quantize_to_bits(x, n_bits);
    if (model.config().threed) {
      std::snprintf(name, sizeof name, "sample_%03d.fgt", i);
      write_tensor_file((fs::path(args.out_dir) / name).string(), img);
    } else {
      std::snprintf(name, sizeof name, "sample_%03d.pgm", i);
      write_pgm((fs::path(args.out_dir) / name).string(), img, max_value);
    }
  }
  std::cout << "wrote " << args.count << " sample(s) to " << args.out_dir << "\n";
}

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"flowgate: dual flow-model normality scoring for 2-D and 3-D images"};
  app.require_subcommand(1);

  SynthArgs synth;
  auto* synth_cmd = app.add_subcommand("synth", "generate a synthetic dataset with manifest");
  synth_cmd->add_option("--out", synth.out_dir, "output directory")->required();
  synth_cmd->add_option("--shape", synth.shape_spec, "image shape, e.g. 16x16x1 or 8x16x16x1");
  synth_cmd->add_option("--seed", synth.seed, "generator seed");
  synth_cmd->add_option("--n-normal-train", synth.counts.normal_train, "normal-only training images");
  synth_cmd->add_option("--n-mix-normal", synth.counts.mixture_normal, "normal images in the mixture");
  synth_cmd->add_option("--n-mix-abnormal", synth.counts.mixture_abnormal, "abnormal images in the mixture");
  synth_cmd->add_option("--n-test-normal", synth.counts.test_normal, "normal test images");
  synth_cmd->add_option("--n-test-abnormal", synth.counts.test_abnormal, "abnormal test images");
  synth_cmd->add_flag("--confound", synth.confound, "skew abnormal background margins (zero-pixel confound)");
  synth_cmd->add_option("--margin-shift", synth.margin_shift, "extra abnormal margin range shift (confound)");
  synth_cmd->add_option("--margin-lo", synth.margin_lo, "override margin range low end");
  synth_cmd->add_option("--margin-hi", synth.margin_hi, "override margin range high end");
  synth_cmd->add_option("--margin-skew", synth.margin_skew, "override abnormal margin skew exponent");
  synth_cmd->add_flag("--force", synth.force, "write into a non-empty directory");

  TrainArgs train_args;
  auto* train_cmd = app.add_subcommand("train", "train m0 (normal-only) or m1 (mixture)");
  train_cmd->add_option("--manifest", train_args.manifest_path, "dataset manifest CSV")->required();
  train_cmd->add_option("--out", train_args.out_dir, "output directory")->required();
  train_cmd->add_option("--which", train_args.which, "m0 or m1")->required();
  train_cmd->add_option("--preset", train_args.preset, "cxr2d, bct3d, desk2d or desk3d");
  train_cmd->add_option("--seed", train_args.seed, "training seed");
  train_cmd->add_option("--threads", train_args.threads, "gradient worker threads");
  train_cmd->add_option("--levels", train_args.levels, "override preset levels");
  train_cmd->add_option("--depth", train_args.depth, "override preset depth per level");
  train_cmd->add_option("--width", train_args.width, "override coupling width");
  train_cmd->add_option("--nbits", train_args.n_bits, "override input bit depth");
  train_cmd->add_option("--epochs", train_args.epochs, "override epochs");
  train_cmd->add_option("--batch", train_args.batch, "override batch size");
  train_cmd->add_option("--lr", train_args.lr, "override steady-state learning rate");
  train_cmd->add_option("--warmup", train_args.warmup, "override warmup steps");

  ScoreArgs score;
  auto* score_cmd = app.add_subcommand("score", "score the test split with two checkpoints");
  score_cmd->add_option("--m0", score.m0_path, "normal-only checkpoint")->required();
  score_cmd->add_option("--m1", score.m1_path, "mixture checkpoint")->required();
  score_cmd->add_option("--manifest", score.manifest_path, "dataset manifest CSV")->required();
  score_cmd->add_option("--out", score.out_dir, "output directory")->required();
  score_cmd->add_option("--threads", score.threads, "scoring threads (0 = all cores)");
  score_cmd->add_option("--log-prior", score.log_prior, "optional log p(normal) constant");

  EvalArgs eval;
  auto* eval_cmd = app.add_subcommand("eval", "ROC/AUC/Youden + histograms from a scores CSV");
  eval_cmd->add_option("--scores", eval.scores_path, "scores.csv from the score step")->required();
  eval_cmd->add_option("--out", eval.out_dir, "output directory")->required();
  eval_cmd->add_option("--bins", eval.bins, "histogram bins");

  SampleArgs sample;
  auto* sample_cmd = app.add_subcommand("sample", "draw fictional images from a checkpoint");
  sample_cmd->add_option("--checkpoint", sample.checkpoint_path, "model checkpoint")->required();
  sample_cmd->add_option("--out", sample.out_dir, "output directory")->required();
  sample_cmd->add_option("--n", sample.count, "number of images");
  sample_cmd->add_option("--temperature", sample.temperature, "latent temperature (0 = mode path)");
  sample_cmd->add_option("--seed", sample.seed, "sampling seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {  // --help
      app.exit(e);
      return kExitOk;
    }
    std::cerr << "usage error: " << e.what() << "\n";
    return kExitUsage;
  }

  try {
    if (synth_cmd->parsed()) cmd_synth(synth);
    if (train_cmd->parsed()) cmd_train(train_args);
    if (score_cmd->parsed()) cmd_score(score);
    if (eval_cmd->parsed()) cmd_eval(eval);
    if (sample_cmd->parsed()) cmd_sample(sample);
    return kExitOk;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace flowgate::cli
