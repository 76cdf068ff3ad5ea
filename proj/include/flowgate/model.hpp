#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "flowgate/layers.hpp"

namespace flowgate {

/// Architecture and data-domain description of a flow model.
struct FlowConfig {
  bool threed = false;
  Shape input_shape;  // [H,W,C] or [D,H,W,C]
  int levels = 2;
  int depth = 4;       // flow steps per level
  int width = 64;      // coupling net hidden channels
  int n_bits = 7;      // input bit depth before dequantization
  std::uint64_t init_seed = 0;

  std::int64_t dim() const { return shape_numel(input_shape); }
};

/// Training metadata stored alongside checkpoints.
struct TrainMeta {
  int epoch = 0;
  std::int64_t step = 0;
  std::string rng_state;
};

/// Multi-scale invertible model: per level a squeeze, `depth` flow
/// steps, and (except at the last level) a channel split whose second
/// half is factored out against the fixed standard-normal prior.
/// Exact log-densities in nats over the normalized input domain
/// [-0.5, 0.5); the prior mean/variance are the constants 0/1 and are
/// never trained.
class FlowModel {
 public:
  FlowModel() = default;
  explicit FlowModel(FlowConfig config);

  const FlowConfig& config() const { return config_; }
  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;

  /// log p(x) = log p(z) + sum of per-layer log-dets. Throws
  /// NumericError naming the layer when an intermediate is non-finite.
  double log_prob(const Tensor& x) const;
  Var log_prob_var(Tape& tape, const Tensor& x) const;

  double bits_per_dim(const Tensor& x) const;
  static double bits_per_dim(double log_prob, std::int64_t dim, int n_bits);

  /// Latents in factor order: one per split level, then the final one.
  std::vector<Tensor> forward_latents(const Tensor& x) const;
  Tensor inverse_from_latents(const std::vector<Tensor>& latents) const;
  std::vector<Shape> latent_shapes() const;

  /// Draw z ~ N(0, temperature^2 I) at every latent and invert.
  /// Deterministic per seed; temperature 0 gives the mode path. The
  /// drawn latents are exposed for round-trip checks.
  Tensor sample(std::uint64_t seed, double temperature, std::vector<Tensor>* drawn_latents = nullptr) const;

  void initialize_actnorm(const std::vector<Tensor>& batch);
  bool actnorm_initialized() const;

  // Checkpoint: "FGCK", version u32, JSON metadata, named FGT1 payload.
  // load(save(m)) reproduces log_prob bit-exactly.
  void save(const std::string& path, const TrainMeta& meta = {}) const;
  static FlowModel load(const std::string& path, TrainMeta* meta = nullptr);

  std::vector<std::vector<FlowStep>>& levels() { return levels_; }
  const std::vector<std::vector<FlowStep>>& levels() const { return levels_; }

 private:
  void check_input(const Tensor& x) const;

  FlowConfig config_;
  std::vector<std::vector<FlowStep>> levels_;
};

}  // namespace flowgate
