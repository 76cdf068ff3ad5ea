#include "flowgate/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>

#include "flowgate/data.hpp"
#include "flowgate/parallel.hpp"

namespace flowgate {

namespace {

constexpr std::uint64_t kShuffleStream = 0x53484655ULL;
constexpr std::uint64_t kNoiseStream = 0x4e4f4953ULL;
constexpr std::uint64_t kSplitStream = 0x53504c54ULL;

// Fixed pairwise tree over sample index; independent of thread count.
void pairwise_reduce(std::vector<std::vector<Tensor>>& grads) {
  const std::size_t n = grads.size();
  for (std::size_t stride = 1; stride < n; stride *= 2)
    for (std::size_t i = 0; i + stride < n; i += 2 * stride)
      for (std::size_t p = 0; p < grads[i].size(); ++p) {
        Tensor& dst = grads[i][p];
        const Tensor& src = grads[i + stride][p];
        for (std::int64_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
      }
}

double global_norm(const std::vector<Tensor>& grads) {
  double sq = 0.0;
  for (const Tensor& g : grads)
    for (std::int64_t i = 0; i < g.size(); ++i) sq += g[i] * g[i];
  return std::sqrt(sq);
}

}  // namespace

void AdamState::init(const std::vector<Parameter*>& params) {
  step = 0;
  m.clear();
  v.clear();
  for (const Parameter* p : params) {
    m.emplace_back(p->value.shape());
    v.emplace_back(p->value.shape());
  }
}

void adam_step(const std::vector<Parameter*>& params, const std::vector<Tensor>& grads, AdamState& state, double lr) {
  if (params.size() != grads.size() || params.size() != state.m.size())
    throw DimensionError("adam_step: parameter/gradient/state count mismatch");
  ++state.step;
  const double b1t = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double b2t = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& value = params[i]->value;
    const Tensor& g = grads[i];
    if (!value.same_shape(g)) throw DimensionError("adam_step: gradient shape mismatch for " + params[i]->name);
    Tensor& m = state.m[i];
    Tensor& v = state.v[i];
    for (std::int64_t k = 0; k < value.size(); ++k) {
      m[k] = state.beta1 * m[k] + (1.0 - state.beta1) * g[k];
      v[k] = state.beta2 * v[k] + (1.0 - state.beta2) * g[k] * g[k];
      const double m_hat = m[k] / b1t;
      const double v_hat = v[k] / b2t;
      value[k] -= lr * m_hat / (std::sqrt(v_hat) + state.epsilon);
    }
  }
}

double nll_loss(const FlowModel& model, const std::vector<Tensor>& batch) {
  if (batch.empty()) throw DataError("nll_loss: empty batch");
  double sum = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const double lp = model.log_prob(batch[i]);
    if (!std::isfinite(lp))
      throw NumericError("nll_loss: non-finite log-probability at sample " + std::to_string(i));
    sum += lp;
  }
  return -sum / static_cast<double>(batch.size());
}

double warmup_lr(double steady, int warmup_steps, std::int64_t step) {
  if (warmup_steps <= 0) return steady;
  const double ratio = static_cast<double>(step) / static_cast<double>(warmup_steps);
  return steady * (ratio < 1.0 ? ratio : 1.0);
}

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> validation_split(std::size_t n, double fraction,
                                                                               std::uint64_t seed) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng = Rng(seed).fork(kSplitStream);
  rng.shuffle(order);
  const std::size_t val_count = static_cast<std::size_t>(fraction * static_cast<double>(n));
  std::vector<std::size_t> val(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(val_count));
  std::vector<std::size_t> train(order.begin() + static_cast<std::ptrdiff_t>(val_count), order.end());
  return {std::move(val), std::move(train)};
}

std::vector<std::size_t> epoch_permutation(std::vector<std::size_t> base, std::uint64_t seed, int epoch) {
  Rng rng = Rng(seed).fork(kShuffleStream).fork(static_cast<std::uint64_t>(epoch));
  rng.shuffle(base);
  return base;
}

TrainResult train(FlowModel model, const std::vector<Tensor>& raw_images, const TrainConfig& cfg,
                  const std::function<void(const EpochRecord&)>& on_epoch) {
  if (raw_images.empty()) throw DataError("train: empty dataset");
  if (cfg.batch_size < 1) throw DataError("train: batch size must be >= 1");
  if (cfg.learning_rate <= 0.0) throw DataError("train: learning rate must be positive");
  const int n_bits = model.config().n_bits;
  const std::int64_t dim = model.config().dim();
  const int threads = cfg.threads < 1 ? 1 : cfg.threads;

  // Validation split fixed by seed, used only for checkpoint selection.
  auto [val_idx, train_idx] = validation_split(raw_images.size(), cfg.validation_fraction, cfg.seed);
  if (train_idx.empty()) throw DataError("train: validation split leaves no training samples");

  std::vector<Parameter*> params = model.parameters();
  AdamState adam;
  adam.init(params);

  auto dequantized = [&](std::size_t sample_idx, int epoch) {
    Rng rng = Rng(cfg.seed).fork(kNoiseStream).fork(static_cast<std::uint64_t>(epoch)).fork(sample_idx);
    return dequantize(raw_images[sample_idx], n_bits, &rng);
  };

  TrainResult result;
  result.best_val_bits_per_dim = std::numeric_limits<double>::infinity();
  FlowModel best = model;
  FlowModel last_good = model;
  bool reorthogonalized_once = false;
  std::int64_t global_step = 0;
  double lr = 0.0;

  auto validate = [&]() {
    if (val_idx.empty()) return std::numeric_limits<double>::quiet_NaN();
    std::vector<double> bits(val_idx.size());
    parallel_for(static_cast<std::int64_t>(val_idx.size()), threads, [&](std::int64_t i) {
      const Tensor x = dequantize(raw_images[val_idx[static_cast<std::size_t>(i)]], n_bits, nullptr);
      bits[static_cast<std::size_t>(i)] = model.bits_per_dim(x);
    });
    double sum = 0.0;
    for (double b : bits) sum += b;
    return sum / static_cast<double>(bits.size());
  };

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const std::vector<std::size_t> perm = epoch_permutation(train_idx, cfg.seed, epoch);

    double epoch_loss_sum = 0.0;
    std::size_t epoch_samples = 0;

    try {
      for (std::size_t start = 0; start < perm.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
        const std::size_t count = std::min(static_cast<std::size_t>(cfg.batch_size), perm.size() - start);
        std::vector<Tensor> batch(count);
        for (std::size_t b = 0; b < count; ++b) batch[b] = dequantized(perm[start + b], epoch);

        if (!model.actnorm_initialized()) model.initialize_actnorm(batch);

        std::vector<std::vector<Tensor>> grads(count);
        std::vector<double> losses(count);
        parallel_for(static_cast<std::int64_t>(count), threads, [&](std::int64_t b) {
          Tape tape;
          Var lp = model.log_prob_var(tape, batch[static_cast<std::size_t>(b)]);
          Var loss = tape.affine(lp, -1.0, 0.0);
          losses[static_cast<std::size_t>(b)] = loss.value()[0];
          tape.backward(loss);
          std::vector<Tensor>& g = grads[static_cast<std::size_t>(b)];
          g.reserve(params.size());
          for (const Parameter* p : params) {
            const Tensor* pg = tape.grad_for(*p);
            g.push_back(pg ? *pg : Tensor(p->value.shape()));
          }
        });

        for (std::size_t b = 0; b < count; ++b) {
          if (!std::isfinite(losses[b]))
            throw NumericError("training loss is non-finite at sample " + std::to_string(perm[start + b]));
          epoch_loss_sum += losses[b];
        }
        epoch_samples += count;

        pairwise_reduce(grads);
        std::vector<Tensor>& grad = grads[0];
        const double inv_count = 1.0 / static_cast<double>(count);
        for (Tensor& g : grad)
          for (std::int64_t k = 0; k < g.size(); ++k) g[k] *= inv_count;

        if (cfg.clip_norm > 0.0) {
          const double norm = global_norm(grad);
          if (norm > cfg.clip_norm) {
            const double scale = cfg.clip_norm / norm;
            for (Tensor& g : grad)
              for (std::int64_t k = 0; k < g.size(); ++k) g[k] *= scale;
          }
        }

        ++global_step;
        lr = warmup_lr(cfg.learning_rate, cfg.warmup_steps, global_step);
        adam_step(params, grad, adam, lr);
        last_good = model;
      }
    } catch (const SingularMatrixError&) {
      // Re-orthogonalize every kernel that fails to factor, once; a
      // second singularity aborts the run.
      if (reorthogonalized_once) {
        result.aborted = true;
        result.abort_reason = "invertible-conv kernel became singular twice";
        model = last_good;
        break;
      }
      reorthogonalized_once = true;
      Rng reinit_rng = Rng(cfg.seed).fork(0x5245494eULL).fork(static_cast<std::uint64_t>(epoch));
      for (auto& level : model.levels())
        for (auto& step : level) {
          try {
            LuFactorization lu(SquareMatrix::from_tensor(step.invconv.kernel().value));
            (void)lu;
          } catch (const SingularMatrixError&) {
            step.invconv.init_random_rotation(reinit_rng);
          }
        }
      --epoch;  // retry the epoch with repaired kernels
      continue;
    } catch (const NumericError& e) {
      result.aborted = true;
      result.abort_reason = e.what();
      model = last_good;
      break;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.step = global_step;
    rec.lr = lr;
    rec.train_nll = epoch_loss_sum / static_cast<double>(epoch_samples);
    rec.val_bits_per_dim = validate();
    result.history.push_back(rec);
    if (on_epoch) on_epoch(rec);

    const double selection = val_idx.empty() ? FlowModel::bits_per_dim(-rec.train_nll, dim, n_bits)
                                             : rec.val_bits_per_dim;
    if (selection < result.best_val_bits_per_dim) {
      result.best_val_bits_per_dim = selection;
      result.best_epoch = epoch;
      best = model;
    }
  }

  result.model = result.aborted ? model : best;
  return result;
}

void write_history_csv(const std::string& path, const std::vector<EpochRecord>& history) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot open history for writing: " + path);
  os << "epoch,step,lr,train_nll,val_bits_per_dim\n";
  char buf[160];
  for (const EpochRecord& r : history) {
    std::snprintf(buf, sizeof buf, "%d,%lld,%.17g,%.17g,%.17g\n", r.epoch, static_cast<long long>(r.step), r.lr,
                  r.train_nll, r.val_bits_per_dim);
    os << buf;
  }
  if (!os) throw DataError("history write failed: " + path);
}

}  // namespace flowgate
