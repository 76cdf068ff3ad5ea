#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "flowgate/model.hpp"
#include "test_util.hpp"

using namespace flowgate;

namespace {

constexpr double kLog2Pi = 1.8378770664093454835606594728112;

// Exact identity coupling: sigmoid(h2 - 0.1) + 0.6 == 1 at
// h2 = 0.1 + ln(2/3).
void force_identity(FlowModel& model) {
  for (auto& level : model.levels())
    for (auto& step : level) {
      step.coupling.force_constant_net(0.1 + std::log(2.0 / 3.0), 0.0);
      step.invconv.kernel().value = SquareMatrix::identity(step.invconv.channels()).as_tensor();
      for (std::int64_t i = 0; i < step.actnorm.log_scale().value.size(); ++i) {
        step.actnorm.log_scale().value[i] = 0.0;
        step.actnorm.bias().value[i] = 0.0;
      }
    }
}

// Mildly randomized parameters so the model is not trivially Gaussian.
void perturb(FlowModel& model, Rng& rng, double kernel_eps = 0.1, double net_eps = 0.5) {
  for (auto& level : model.levels())
    for (auto& step : level) {
      for (std::int64_t i = 0; i < step.invconv.kernel().value.size(); ++i)
        step.invconv.kernel().value[i] += kernel_eps * (rng.next_double() - 0.5);
      auto params = step.coupling.parameters();
      for (std::int64_t i = 0; i < params[4]->value.size(); ++i)
        params[4]->value[i] = net_eps * (rng.next_double() - 0.5);
      for (std::int64_t i = 0; i < params[5]->value.size(); ++i)
        params[5]->value[i] = 0.4 * net_eps * (rng.next_double() - 0.5);
      for (std::int64_t i = 0; i < step.actnorm.log_scale().value.size(); ++i) {
        step.actnorm.log_scale().value[i] = 0.3 * (rng.next_double() - 0.5);
        step.actnorm.bias().value[i] = 0.3 * (rng.next_double() - 0.5);
      }
    }
}

FlowConfig tiny_config() {
  FlowConfig cfg;
  cfg.threed = false;
  cfg.input_shape = {4, 4, 1};
  cfg.levels = 1;
  cfg.depth = 1;
  cfg.width = 4;
  cfg.n_bits = 7;
  return cfg;
}

}  // namespace

TEST_CASE("identity model log-prob at the origin is the standard-normal value") {
  FlowModel model(tiny_config());
  force_identity(model);
  const Tensor x({4, 4, 1});
  const double n = 16.0;
  CHECK(model.log_prob(x) == doctest::Approx(-0.5 * n * kLog2Pi).epsilon(1e-12));
}

TEST_CASE("single channel-mixing layer plus prior reproduces the one-term decomposition") {
  // z = x * K with K = 2I on a (1,2,2,2) tensor of zeros:
  // log p = prior(0) + D*H*W*log|det K| = -4 log 2pi + 4 log 4.
  Rng rng(1);
  InvertibleConv conv(2, "");
  SquareMatrix k(2);
  k.at(0, 0) = k.at(1, 1) = 2.0;
  conv.kernel().value = k.as_tensor();
  const Tensor x({1, 2, 2, 2});
  const LayerOutput out = conv.forward(x);
  Tape tape(false);
  const double total = tape.gaussian_logp(tape.constant(out.z)).value()[0] + out.log_det;
  CHECK(total == doctest::Approx(-4.0 * kLog2Pi + 4.0 * std::log(4.0)).epsilon(1e-12));
}

TEST_CASE("bits_per_dim is the declared affine function of log_prob") {
  const std::int64_t dim = 16;
  const int n_bits = 7;
  const double lp = -33.7;
  const double delta = 4.2;
  const double base = FlowModel::bits_per_dim(lp, dim, n_bits);
  const double shifted = FlowModel::bits_per_dim(lp + delta, dim, n_bits);
  CHECK(shifted - base == doctest::Approx(-delta / (static_cast<double>(dim) * std::log(2.0))).epsilon(1e-12));

  // Hand-computed toy value: identity model at the origin.
  FlowModel model(tiny_config());
  force_identity(model);
  const Tensor x({4, 4, 1});
  const double expected = -(-0.5 * 16.0 * kLog2Pi + 16.0 * std::log(128.0)) / (16.0 * std::log(2.0));
  CHECK(model.bits_per_dim(x) == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("bits_per_dim is finite on uniform-noise input for an untrained model") {
  FlowConfig cfg = tiny_config();
  cfg.depth = 2;
  FlowModel model(cfg);
  Rng rng(2);
  const Tensor x = testutil::random_tensor(cfg.input_shape, rng, -0.5, 0.5);
  CHECK(std::isfinite(model.bits_per_dim(x)));
}

TEST_CASE("full models invert: 2-D and 3-D, multiple levels") {
  Rng rng(3);
  for (const bool threed : {false, true}) {
    FlowConfig cfg;
    cfg.threed = threed;
    cfg.input_shape = threed ? Shape{4, 8, 8, 1} : Shape{16, 16, 1};
    cfg.levels = 2;
    cfg.depth = 2;
    cfg.width = 8;
    cfg.init_seed = 7;
    FlowModel model(cfg);
    perturb(model, rng);
    const Tensor x = testutil::random_tensor(cfg.input_shape, rng, -0.5, 0.5);
    const Tensor back = model.inverse_from_latents(model.forward_latents(x));
    CHECK(testutil::max_abs_diff(back, x) < 1e-6);
  }
}

TEST_CASE("latent shapes partition the input dimension") {
  FlowConfig cfg;
  cfg.input_shape = {16, 16, 1};
  cfg.levels = 3;
  cfg.depth = 1;
  cfg.width = 4;
  FlowModel model(cfg);
  std::int64_t total = 0;
  for (const Shape& s : model.latent_shapes()) total += shape_numel(s);
  CHECK(total == 256);
}

TEST_CASE("sampling: determinism, temperature 0, and latent round-trip") {
  Rng rng(4);
  FlowConfig cfg;
  cfg.input_shape = {8, 8, 1};
  cfg.levels = 2;
  cfg.depth = 2;
  cfg.width = 8;
  cfg.init_seed = 11;
  FlowModel model(cfg);
  perturb(model, rng);

  const Tensor a = model.sample(123, 0.7);
  const Tensor b = model.sample(123, 0.7);
  CHECK(testutil::max_abs_diff(a, b) == 0.0);

  // Temperature 0: the mode path, identical for any seed.
  const Tensor m1 = model.sample(1, 0.0);
  const Tensor m2 = model.sample(999, 0.0);
  CHECK(testutil::max_abs_diff(m1, m2) == 0.0);
  CHECK(testutil::max_abs_diff(m1, model.inverse_from_latents([&] {
          std::vector<Tensor> zeros;
          for (const Shape& s : model.latent_shapes()) zeros.emplace_back(s);
          return zeros;
        }())) == 0.0);

  std::vector<Tensor> drawn;
  const Tensor x = model.sample(77, 1.0, &drawn);
  const std::vector<Tensor> recovered = model.forward_latents(x);
  REQUIRE(recovered.size() == drawn.size());
  for (std::size_t i = 0; i < drawn.size(); ++i) CHECK(testutil::max_abs_diff(recovered[i], drawn[i]) < 1e-6);
}

TEST_CASE("checkpoint round-trip reproduces log_prob bit-exactly") {
  namespace fs = std::filesystem;
  Rng rng(5);
  FlowConfig cfg;
  cfg.input_shape = {8, 8, 1};
  cfg.levels = 2;
  cfg.depth = 2;
  cfg.width = 8;
  cfg.init_seed = 3;
  FlowModel model(cfg);
  perturb(model, rng);

  const fs::path dir = fs::temp_directory_path() / "flowgate_ckpt_test";
  fs::create_directories(dir);
  const std::string path = (dir / "m.fgck").string();
  TrainMeta meta;
  meta.epoch = 5;
  meta.step = 321;
  meta.rng_state = "seed:42";
  model.save(path, meta);

  TrainMeta loaded_meta;
  const FlowModel loaded = FlowModel::load(path, &loaded_meta);
  CHECK(loaded_meta.epoch == 5);
  CHECK(loaded_meta.step == 321);
  CHECK(loaded_meta.rng_state == "seed:42");
  for (int i = 0; i < 10; ++i) {
    const Tensor x = testutil::random_tensor(cfg.input_shape, rng, -0.5, 0.5);
    const double a = model.log_prob(x);
    const double b = loaded.log_prob(x);
    CHECK(a == b);  // bit-exact
  }
  fs::remove_all(dir);
}

TEST_CASE("truncated or mismatched checkpoints are rejected") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "flowgate_ckpt_bad";
  fs::create_directories(dir);
  const std::string path = (dir / "m.fgck").string();
  FlowModel model(tiny_config());
  model.save(path);

  const auto size = fs::file_size(path);
  fs::resize_file(path, size - 17);
  CHECK_THROWS_AS(FlowModel::load(path), CheckpointError);

  // Corrupt the version field (bytes 4..7).
  model.save(path);
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(4);
    const char bad[4] = {99, 0, 0, 0};
    f.write(bad, 4);
  }
  CHECK_THROWS_AS(FlowModel::load(path), CheckpointError);
  fs::remove_all(dir);
}

TEST_CASE("non-finite intermediates raise a numeric error naming the layer") {
  FlowModel model(tiny_config());
  Tensor x({4, 4, 1});
  x[0] = std::numeric_limits<double>::infinity();
  try {
    model.log_prob(x);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("level") != std::string::npos);
  }
}

TEST_CASE("normalization: grid quadrature of exp(log_prob) on a 4-pixel model") {
  Rng rng(6);
  FlowConfig cfg;
  cfg.input_shape = {2, 2, 1};
  cfg.levels = 1;
  cfg.depth = 2;
  cfg.width = 4;
  cfg.init_seed = 9;
  FlowModel model(cfg);
  perturb(model, rng, 0.08, 0.4);

  const double radius = 7.0;
  const int points = 21;
  const double h = 2.0 * radius / (points - 1);
  double integral = 0.0;
  Tensor x({2, 2, 1});
  for (int i0 = 0; i0 < points; ++i0)
    for (int i1 = 0; i1 < points; ++i1)
      for (int i2 = 0; i2 < points; ++i2)
        for (int i3 = 0; i3 < points; ++i3) {
          x[0] = -radius + h * i0;
          x[1] = -radius + h * i1;
          x[2] = -radius + h * i2;
          x[3] = -radius + h * i3;
          double weight = 1.0;
          for (int idx : {i0, i1, i2, i3})
            if (idx == 0 || idx == points - 1) weight *= 0.5;
          integral += weight * std::exp(model.log_prob(x));
        }
  integral *= h * h * h * h;
  CHECK(integral > 0.98);
  CHECK(integral < 1.02);
}
