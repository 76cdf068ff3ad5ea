#include "flowgate/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

namespace flowgate {

namespace {

constexpr std::uint32_t kCheckpointVersion = 1;
constexpr char kCheckpointMagic[4] = {'F', 'G', 'C', 'K'};

void validate_config(const FlowConfig& cfg) {
  const int spatial_rank = cfg.threed ? 3 : 2;
  if (static_cast<int>(cfg.input_shape.size()) != spatial_rank + 1)
    throw DimensionError("input shape " + shape_str(cfg.input_shape) + " does not match " +
                         (cfg.threed ? std::string("3-D") : std::string("2-D")) + " layout");
  if (cfg.levels < 1) throw DimensionError("levels must be >= 1");
  if (cfg.depth < 0) throw DimensionError("depth must be >= 0");
  if (cfg.width < 1) throw DimensionError("coupling width must be >= 1");
  if (cfg.n_bits < 1 || cfg.n_bits > 16) throw DataError("n_bits must be in [1, 16]");
  for (int ax = 0; ax < spatial_rank; ++ax) {
    int extent = cfg.input_shape[static_cast<std::size_t>(ax)];
    for (int l = 0; l < cfg.levels; ++l) {
      if (extent % 2)
        throw DimensionError("spatial extent " + std::to_string(cfg.input_shape[static_cast<std::size_t>(ax)]) +
                             " does not support " + std::to_string(cfg.levels) + " squeeze levels");
      extent /= 2;
    }
  }
}

void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw CheckpointError("checkpoint truncated");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void put_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t get_u64(std::istream& is) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) throw CheckpointError("checkpoint truncated");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

}  // namespace

FlowModel::FlowModel(FlowConfig config) : config_(std::move(config)) {
  validate_config(config_);
  Rng rng(config_.init_seed);
  int channels = config_.input_shape.back();
  levels_.reserve(static_cast<std::size_t>(config_.levels));
  for (int l = 0; l < config_.levels; ++l) {
    channels *= config_.threed ? 8 : 4;  // squeeze at level entry
    std::vector<FlowStep> steps;
    steps.reserve(static_cast<std::size_t>(config_.depth));
    for (int s = 0; s < config_.depth; ++s) {
      const std::string prefix = "level" + std::to_string(l) + ".step" + std::to_string(s) + ".";
      steps.emplace_back(channels, config_.width, config_.threed, prefix, rng);
    }
    levels_.push_back(std::move(steps));
    if (l + 1 < config_.levels) channels /= 2;  // split carries half forward
  }
}

std::vector<Parameter*> FlowModel::parameters() {
  std::vector<Parameter*> out;
  for (auto& level : levels_)
    for (auto& step : level)
      for (Parameter* p : step.parameters()) out.push_back(p);
  return out;
}

std::vector<const Parameter*> FlowModel::parameters() const {
  std::vector<const Parameter*> out;
  for (const auto& level : levels_)
    for (const auto& step : const_cast<std::vector<FlowStep>&>(level))
      for (Parameter* p : const_cast<FlowStep&>(step).parameters()) out.push_back(p);
  return out;
}

void FlowModel::check_input(const Tensor& x) const {
  if (x.shape() != config_.input_shape)
    throw DimensionError("input shape " + shape_str(x.shape()) + " does not match model shape " +
                         shape_str(config_.input_shape));
}

Var FlowModel::log_prob_var(Tape& tape, const Tensor& x) const {
  check_input(x);
  Var cur = tape.constant(x);
  Var log_det = tape.constant(Tensor::scalar(0.0));
  Var prior = tape.constant(Tensor::scalar(0.0));
  const int n_levels = static_cast<int>(levels_.size());
  for (int l = 0; l < n_levels; ++l) {
    cur = tape.permutation(
        cur, [](const Tensor& t) { return squeeze_space(t); }, [](const Tensor& t) { return unsqueeze_space(t); });
    int step_idx = 0;
    for (const FlowStep& step : levels_[static_cast<std::size_t>(l)]) {
      LayerVarOutput out = step.forward(tape, cur);
      if (!out.z.value().all_finite() || !std::isfinite(out.log_det.value()[0]))
        throw NumericError("non-finite activations at level " + std::to_string(l) + " step " +
                           std::to_string(step_idx));
      log_det = tape.add(log_det, out.log_det);
      cur = out.z;
      ++step_idx;
    }
    if (l + 1 < n_levels) {
      const int c = cur.value().channels();
      Var factored = tape.narrow_channels(cur, c / 2, c / 2);
      prior = tape.add(prior, tape.gaussian_logp(factored));
      cur = tape.narrow_channels(cur, 0, c / 2);
    }
  }
  prior = tape.add(prior, tape.gaussian_logp(cur));
  Var lp = tape.add(prior, log_det);
  if (!std::isfinite(lp.value()[0])) throw NumericError("non-finite log-probability");
  return lp;
}

double FlowModel::log_prob(const Tensor& x) const {
  Tape tape(false);
  return log_prob_var(tape, x).value()[0];
}

double FlowModel::bits_per_dim(double log_prob, std::int64_t dim, int n_bits) {
  // Normalized inputs span a unit-width domain.
  constexpr double kDomainScale = 1.0;
  const double d = static_cast<double>(dim);
  return -(log_prob + d * std::log(std::pow(2.0, n_bits) / kDomainScale)) / (d * std::log(2.0));
}

double FlowModel::bits_per_dim(const Tensor& x) const {
  return bits_per_dim(log_prob(x), config_.dim(), config_.n_bits);
}

std::vector<Tensor> FlowModel::forward_latents(const Tensor& x) const {
  check_input(x);
  std::vector<Tensor> latents;
  Tensor cur = x;
  const int n_levels = static_cast<int>(levels_.size());
  for (int l = 0; l < n_levels; ++l) {
    cur = squeeze_space(cur);
    for (const FlowStep& step : levels_[static_cast<std::size_t>(l)]) cur = step.forward(cur).z;
    if (l + 1 < n_levels) {
      auto [kept, factored] = split_channels(cur);
      latents.push_back(std::move(factored));
      cur = std::move(kept);
    }
  }
  latents.push_back(std::move(cur));
  return latents;
}

Tensor FlowModel::inverse_from_latents(const std::vector<Tensor>& latents) const {
  const int n_levels = static_cast<int>(levels_.size());
  if (latents.size() != static_cast<std::size_t>(n_levels))
    throw DimensionError("expected " + std::to_string(n_levels) + " latents, got " + std::to_string(latents.size()));
  Tensor cur = latents.back();
  for (int l = n_levels - 1; l >= 0; --l) {
    if (l + 1 < n_levels) cur = concat_channels(cur, latents[static_cast<std::size_t>(l)]);
    const auto& steps = levels_[static_cast<std::size_t>(l)];
    for (auto it = steps.rbegin(); it != steps.rend(); ++it) cur = it->inverse(cur);
    cur = unsqueeze_space(cur);
  }
  return cur;
}

std::vector<Shape> FlowModel::latent_shapes() const {
  std::vector<Shape> shapes;
  Shape cur = config_.input_shape;
  const int spatial_rank = config_.threed ? 3 : 2;
  const int n_levels = static_cast<int>(levels_.size());
  for (int l = 0; l < n_levels; ++l) {
    for (int ax = 0; ax < spatial_rank; ++ax) cur[static_cast<std::size_t>(ax)] /= 2;
    cur.back() *= config_.threed ? 8 : 4;
    if (l + 1 < n_levels) {
      Shape half = cur;
      half.back() /= 2;
      shapes.push_back(half);
      cur.back() /= 2;
    } else {
      shapes.push_back(cur);
    }
  }
  return shapes;
}

Tensor FlowModel::sample(std::uint64_t seed, double temperature, std::vector<Tensor>* drawn_latents) const {
  if (temperature < 0.0) throw DataError("temperature must be >= 0");
  Rng rng = Rng(config_.init_seed).fork(0x53414d50ULL).fork(seed);
  std::vector<Tensor> latents;
  for (const Shape& shape : latent_shapes()) {
    Tensor z(shape);
    for (std::int64_t i = 0; i < z.size(); ++i) z[i] = temperature * rng.next_normal();
    latents.push_back(std::move(z));
  }
  if (drawn_latents) *drawn_latents = latents;
  return inverse_from_latents(latents);
}

void FlowModel::initialize_actnorm(const std::vector<Tensor>& batch) {
  if (batch.empty()) throw DataError("actnorm initialization needs a non-empty batch");
  for (const Tensor& t : batch) check_input(t);
  std::vector<Tensor> cur(batch);
  const int n_levels = static_cast<int>(levels_.size());
  for (int l = 0; l < n_levels; ++l) {
    for (Tensor& t : cur) t = squeeze_space(t);
    for (FlowStep& step : levels_[static_cast<std::size_t>(l)]) {
      step.actnorm.initialize(cur);
      for (Tensor& t : cur) t = step.forward(t).z;
    }
    if (l + 1 < n_levels)
      for (Tensor& t : cur) t = split_channels(t).first;
  }
}

bool FlowModel::actnorm_initialized() const {
  for (const auto& level : levels_)
    for (const auto& step : level)
      if (!step.actnorm.initialized()) return false;
  return true;
}

void FlowModel::save(const std::string& path, const TrainMeta& meta) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open for writing: " + path);
  os.write(kCheckpointMagic, 4);
  put_u32(os, kCheckpointVersion);

  nlohmann::json j;
  j["threed"] = config_.threed;
  j["input_shape"] = config_.input_shape;
  j["levels"] = config_.levels;
  j["depth"] = config_.depth;
  j["width"] = config_.width;
  j["n_bits"] = config_.n_bits;
  j["init_seed"] = config_.init_seed;
  j["epoch"] = meta.epoch;
  j["step"] = meta.step;
  j["rng_state"] = meta.rng_state;
  std::vector<bool> actnorm_init;
  for (const auto& level : levels_)
    for (const auto& step : level) actnorm_init.push_back(step.actnorm.initialized());
  j["actnorm_initialized"] = actnorm_init;
  std::vector<std::string> names;
  for (const Parameter* p : parameters()) names.push_back(p->name);
  j["tensors"] = names;

  const std::string meta_text = j.dump();
  put_u64(os, meta_text.size());
  os.write(meta_text.data(), static_cast<std::streamsize>(meta_text.size()));
  for (const Parameter* p : parameters()) write_tensor_stream(os, p->value);
  if (!os) throw DataError("write failed: " + path);
}

FlowModel FlowModel::load(const std::string& path, TrainMeta* meta) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open: " + path);
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kCheckpointMagic, 4) != 0)
    throw CheckpointError("bad checkpoint magic (expected FGCK): " + path);
  const std::uint32_t version = get_u32(is);
  if (version != kCheckpointVersion)
    throw CheckpointError("checkpoint version " + std::to_string(version) + " unsupported (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  const std::uint64_t meta_len = get_u64(is);
  if (meta_len > (1ULL << 30)) throw CheckpointError("unreasonable metadata size");
  std::string meta_text(meta_len, '\0');
  if (!is.read(meta_text.data(), static_cast<std::streamsize>(meta_len))) throw CheckpointError("checkpoint truncated");

  nlohmann::json j;
  try {
    j = nlohmann::json::parse(meta_text);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("bad checkpoint metadata: ") + e.what());
  }
  FlowConfig cfg;
  try {
    cfg.threed = j.at("threed").get<bool>();
    cfg.input_shape = j.at("input_shape").get<Shape>();
    cfg.levels = j.at("levels").get<int>();
    cfg.depth = j.at("depth").get<int>();
    cfg.width = j.at("width").get<int>();
    cfg.n_bits = j.at("n_bits").get<int>();
    cfg.init_seed = j.at("init_seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("incomplete checkpoint metadata: ") + e.what());
  }

  FlowModel model(cfg);
  const auto names = j.at("tensors").get<std::vector<std::string>>();
  std::map<std::string, Parameter*> by_name;
  for (Parameter* p : model.parameters()) by_name[p->name] = p;
  if (names.size() != by_name.size())
    throw CheckpointError("checkpoint tensor count " + std::to_string(names.size()) + " does not match model (" +
                          std::to_string(by_name.size()) + ")");
  for (const std::string& name : names) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw CheckpointError("unknown tensor in checkpoint: " + name);
    Tensor t;
    try {
      t = read_tensor_stream(is);
    } catch (const DataError& e) {
      throw CheckpointError("checkpoint payload for " + name + ": " + e.what());
    }
    if (t.shape() != it->second->value.shape())
      throw CheckpointError("tensor " + name + " has shape " + shape_str(t.shape()) + ", expected " +
                            shape_str(it->second->value.shape()));
    it->second->value = std::move(t);
  }

  const auto actnorm_init = j.at("actnorm_initialized").get<std::vector<bool>>();
  std::size_t idx = 0;
  for (auto& level : model.levels_)
    for (auto& step : level) {
      if (idx >= actnorm_init.size()) throw CheckpointError("actnorm flag list too short");
      step.actnorm.mark_initialized(actnorm_init[idx++]);
    }

  if (meta) {
    meta->epoch = j.value("epoch", 0);
    meta->step = j.value("step", std::int64_t{0});
    meta->rng_state = j.value("rng_state", std::string());
  }
  return model;
}

}  // namespace flowgate
