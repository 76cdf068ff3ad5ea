#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "flowgate/layers.hpp"
#include "test_util.hpp"

using namespace flowgate;

namespace {

// Assembles the full Jacobian of a tensor->tensor map by central
// differences and returns log|det| via LU. Only for tiny inputs.
double numerical_log_det(const Tensor& x, const std::function<Tensor(const Tensor&)>& fwd, double step = 1e-5) {
  const int n = static_cast<int>(x.size());
  SquareMatrix jac(n);
  Tensor probe = x;
  for (int j = 0; j < n; ++j) {
    const double saved = probe[j];
    probe[j] = saved + step;
    const Tensor up = fwd(probe);
    probe[j] = saved - step;
    const Tensor down = fwd(probe);
    probe[j] = saved;
    for (int i = 0; i < n; ++i) jac.at(i, j) = (up[i] - down[i]) / (2.0 * step);
  }
  return log_abs_det(jac);
}

void randomize(Parameter& p, Rng& rng, double scale) {
  for (std::int64_t i = 0; i < p.value.size(); ++i) p.value[i] = scale * (rng.next_double() - 0.5);
}

// Coupling with a non-trivial final layer (the default is zero-init).
AffineCoupling random_coupling(int channels, int width, bool threed, Rng& rng) {
  AffineCoupling coupling(channels, width, threed, "", rng);
  auto params = coupling.parameters();
  randomize(*params[4], rng, 0.8);  // w3
  randomize(*params[5], rng, 0.4);  // b3
  return coupling;
}

}  // namespace

TEST_CASE("actnorm identity at zero parameters") {
  Rng rng(1);
  ActNorm an(3, "");
  const Tensor x = testutil::random_tensor({4, 4, 3}, rng);
  const LayerOutput out = an.forward(x);
  CHECK(testutil::max_abs_diff(out.z, x) == 0.0);
  CHECK(out.log_det == 0.0);
}

TEST_CASE("actnorm log-det counts pixels per channel") {
  ActNorm an(1, "");
  an.log_scale().value[0] = std::log(2.0);
  Rng rng(2);
  const Tensor x = testutil::random_tensor({2, 2, 1}, rng);
  const LayerOutput out = an.forward(x);
  CHECK(out.log_det == doctest::Approx(4.0 * std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("actnorm data init gives zero mean, unit variance") {
  Rng rng(3);
  std::vector<Tensor> batch;
  for (int i = 0; i < 8; ++i) batch.push_back(testutil::random_tensor({4, 4, 2}, rng, -3.0, 7.0));
  ActNorm an(2, "");
  an.initialize(batch);
  CHECK(an.initialized());

  double mean[2] = {0, 0}, var[2] = {0, 0};
  std::int64_t count = 0;
  std::vector<Tensor> normalized;
  for (const Tensor& x : batch) normalized.push_back(an.forward(x).z);
  for (const Tensor& z : normalized) {
    for (std::int64_t p = 0; p < z.size() / 2; ++p)
      for (int c = 0; c < 2; ++c) mean[c] += z[p * 2 + c];
    count += z.size() / 2;
  }
  for (int c = 0; c < 2; ++c) mean[c] /= static_cast<double>(count);
  for (const Tensor& z : normalized)
    for (std::int64_t p = 0; p < z.size() / 2; ++p)
      for (int c = 0; c < 2; ++c) var[c] += (z[p * 2 + c] - mean[c]) * (z[p * 2 + c] - mean[c]);
  for (int c = 0; c < 2; ++c) {
    CHECK(std::abs(mean[c]) < 1e-6);
    CHECK(std::abs(var[c] / static_cast<double>(count) - 1.0) < 1e-6);
  }
}

TEST_CASE("invconv identity kernel is a no-op") {
  Rng rng(4);
  InvertibleConv conv(3, "");
  const Tensor x = testutil::random_tensor({2, 4, 3}, rng);
  const LayerOutput out = conv.forward(x);
  CHECK(testutil::max_abs_diff(out.z, x) == 0.0);
  CHECK(out.log_det == 0.0);
}

TEST_CASE("invconv log-det arithmetic for K = 2I on a (1,2,2,2) tensor") {
  InvertibleConv conv(2, "");
  SquareMatrix k(2);
  k.at(0, 0) = k.at(1, 1) = 2.0;
  conv.kernel().value = k.as_tensor();
  Rng rng(5);
  const Tensor x = testutil::random_tensor({1, 2, 2, 2}, rng);
  const LayerOutput out = conv.forward(x);
  CHECK(out.log_det == doctest::Approx(4.0 * std::log(4.0)).epsilon(1e-12));
}

TEST_CASE("invconv log-det matches the numerical Jacobian on a (2,2,2,2) tensor") {
  Rng rng(6);
  InvertibleConv conv(2, "");
  conv.init_random_rotation(rng);
  // Move away from the rotation so |det| != 1.
  conv.kernel().value[0] += 0.3;
  conv.kernel().value[3] -= 0.2;
  const Tensor x = testutil::random_tensor({2, 2, 2, 2}, rng);
  const double analytic = conv.forward(x).log_det;
  const double numeric = numerical_log_det(x, [&](const Tensor& v) { return conv.forward(v).z; });
  CHECK(std::abs(analytic - numeric) < 1e-8);
}

TEST_CASE("random rotation kernels start volume-preserving") {
  Rng rng(7);
  for (int c : {2, 4, 8}) {
    InvertibleConv conv(c, "");
    conv.init_random_rotation(rng);
    const SquareMatrix k = SquareMatrix::from_tensor(conv.kernel().value);
    const LuFactorization lu(k);
    CHECK(std::abs(lu.log_abs_det()) < 1e-10);
    CHECK(lu.det_sign() == doctest::Approx(1.0));
  }
}

TEST_CASE("coupling with forced constant net: scale 1.1 everywhere") {
  Rng rng(8);
  AffineCoupling coupling(4, 8, false, "", rng);
  coupling.force_constant_net(0.1, 0.0);  // sigmoid(0) + 0.6 = 1.1
  const Tensor x = testutil::random_tensor({2, 2, 4}, rng);
  const LayerOutput out = coupling.forward(x);
  const auto [xa, xb] = split_channels(x);
  const auto [za, zb] = split_channels(out.z);
  CHECK(testutil::max_abs_diff(za, xa) == 0.0);
  for (std::int64_t i = 0; i < xb.size(); ++i) CHECK(zb[i] == doctest::Approx(1.1 * xb[i]).epsilon(1e-12));
  CHECK(out.log_det == doctest::Approx(static_cast<double>(xb.size()) * std::log(1.1)).epsilon(1e-9));
}

TEST_CASE("coupling scale saturates at 0.6 and stays inside (0.6, 1.6)") {
  Rng rng(9);
  AffineCoupling floor_coupling(4, 8, false, "", rng);
  floor_coupling.force_constant_net(-60.0, 0.0);  // sigmoid -> 0
  const Tensor x = testutil::random_tensor({2, 2, 4}, rng);
  const LayerOutput out = floor_coupling.forward(x);
  CHECK(out.log_det == doctest::Approx(static_cast<double>(x.size() / 2) * std::log(0.6)).epsilon(1e-9));

  // Property over random nets and inputs: per-element log-det bounds.
  for (int trial = 0; trial < 20; ++trial) {
    AffineCoupling coupling = random_coupling(4, 8, false, rng);
    const Tensor probe = testutil::random_tensor({2, 2, 4}, rng, -2.0, 2.0);
    const LayerOutput o = coupling.forward(probe);
    const double per_element = o.log_det / static_cast<double>(probe.size() / 2);
    CHECK(per_element > std::log(0.6));
    CHECK(per_element < std::log(1.6));
  }
}

TEST_CASE("coupling inverse round-trips through random nets") {
  Rng rng(10);
  for (const bool threed : {false, true}) {
    AffineCoupling coupling = random_coupling(4, 8, threed, rng);
    const Tensor x = testutil::random_tensor(threed ? Shape{2, 2, 2, 4} : Shape{4, 4, 4}, rng, -2.0, 2.0);
    const Tensor back = coupling.inverse(coupling.forward(x).z);
    CHECK(testutil::max_abs_diff(back, x) < 1e-9);
  }
}

TEST_CASE("coupling rejects odd channel counts") {
  Rng rng(11);
  CHECK_THROWS_AS(AffineCoupling(3, 8, false, "", rng), DimensionError);
}

TEST_CASE("squeeze shape law and value preservation") {
  Rng rng(12);
  const Tensor x = testutil::random_tensor({4, 4, 1}, rng);
  const Tensor s = squeeze_space(x);
  REQUIRE(s.shape() == Shape{2, 2, 4});
  std::vector<double> a(x.data(), x.data() + x.size()), b(s.data(), s.data() + s.size());
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  CHECK(a == b);

  const Tensor back = unsqueeze_space(s);
  REQUIRE(back.shape() == x.shape());
  for (std::int64_t i = 0; i < x.size(); ++i) CHECK(back[i] == x[i]);
}

TEST_CASE("3-D squeeze of [2,2,2,1] gives [1,1,1,8]") {
  Rng rng(13);
  const Tensor x = testutil::random_tensor({2, 2, 2, 1}, rng);
  const Tensor s = squeeze_space(x);
  REQUIRE(s.shape() == Shape{1, 1, 1, 8});
  const Tensor back = unsqueeze_space(s);
  for (std::int64_t i = 0; i < x.size(); ++i) CHECK(back[i] == x[i]);
}

TEST_CASE("squeeze rejects odd spatial extents") {
  Rng rng(14);
  CHECK_THROWS_AS(squeeze_space(testutil::random_tensor({3, 4, 1}, rng)), DimensionError);
  CHECK_THROWS_AS(squeeze_space(testutil::random_tensor({2, 3, 4, 1}, rng)), DimensionError);
}

TEST_CASE("split halves channels and concat restores bit-exactly") {
  Rng rng(15);
  const Tensor z = testutil::random_tensor({3, 3, 2}, rng);
  const auto [z1, z2] = split_channels(z);
  REQUIRE(z1.shape() == Shape{3, 3, 1});
  REQUIRE(z2.shape() == Shape{3, 3, 1});
  const Tensor back = concat_channels(z1, z2);
  for (std::int64_t i = 0; i < z.size(); ++i) CHECK(back[i] == z[i]);

  CHECK_THROWS_AS(split_channels(testutil::random_tensor({3, 3, 3}, rng)), DimensionError);
}

TEST_CASE("3-D split picks the documented channel ranges") {
  Rng rng(16);
  const Tensor z = testutil::random_tensor({2, 2, 2, 8}, rng);
  const auto [z1, z2] = split_channels(z);
  for (int d = 0; d < 2; ++d)
    for (int h = 0; h < 2; ++h)
      for (int w = 0; w < 2; ++w)
        for (int c = 0; c < 4; ++c) {
          CHECK(z1.at(d, h, w, c) == z.at(d, h, w, c));
          CHECK(z2.at(d, h, w, c) == z.at(d, h, w, c + 4));
        }
}

TEST_CASE("standard-normal prior factorizes over a split") {
  Rng rng(17);
  const Tensor z = testutil::random_tensor({2, 2, 4}, rng, -2.0, 2.0);
  const auto [z1, z2] = split_channels(z);
  Tape tape(false);
  const double whole = tape.gaussian_logp(tape.constant(z)).value()[0];
  const double parts = tape.gaussian_logp(tape.constant(z1)).value()[0] +
                       tape.gaussian_logp(tape.constant(z2)).value()[0];
  CHECK(whole == doctest::Approx(parts).epsilon(1e-12));
}

TEST_CASE("every layer: inverse(forward(x)) = x and log-det matches the numerical Jacobian") {
  Rng rng(18);
  for (const bool threed : {false, true}) {
    const Shape shape = threed ? Shape{2, 2, 2, 4} : Shape{2, 4, 4};
    const int channels = 4;
    const Tensor x = testutil::random_tensor(shape, rng, -1.5, 1.5);
    REQUIRE(x.size() <= 32);

    ActNorm actnorm(channels, "");
    randomize(actnorm.log_scale(), rng, 0.8);
    randomize(actnorm.bias(), rng, 1.0);
    InvertibleConv invconv(channels, "");
    invconv.init_random_rotation(rng);
    for (std::int64_t i = 0; i < invconv.kernel().value.size(); ++i)
      invconv.kernel().value[i] += 0.15 * (rng.next_double() - 0.5);
    AffineCoupling coupling = random_coupling(channels, 6, threed, rng);

    const auto check_layer = [&](auto& layer, const char* name) {
      INFO("layer: " << name << " threed: " << threed);
      const LayerOutput out = layer.forward(x);
      CHECK(testutil::max_abs_diff(layer.inverse(out.z), x) < 1e-9);
      const double numeric = numerical_log_det(x, [&](const Tensor& v) { return layer.forward(v).z; });
      CHECK(std::abs(out.log_det - numeric) < 1e-6);
    };
    check_layer(actnorm, "actnorm");
    check_layer(invconv, "invconv");
    check_layer(coupling, "coupling");

    FlowStep step(channels, 6, threed, "", rng);
    randomize(*step.coupling.parameters()[4], rng, 0.6);
    const LayerOutput out = step.forward(x);
    CHECK(testutil::max_abs_diff(step.inverse(out.z), x) < 1e-9);
    const double numeric = numerical_log_det(x, [&](const Tensor& v) { return step.forward(v).z; });
    CHECK(std::abs(out.log_det - numeric) < 1e-6);
  }
}

TEST_CASE("tape and plain layer forwards agree") {
  Rng rng(19);
  const Tensor x = testutil::random_tensor({4, 4, 4}, rng);
  FlowStep step(4, 8, false, "", rng);
  randomize(*step.coupling.parameters()[4], rng, 0.5);
  const LayerOutput plain = step.forward(x);
  Tape tape(false);
  const LayerVarOutput taped = step.forward(tape, tape.constant(x));
  CHECK(testutil::max_abs_diff(plain.z, taped.z.value()) < 1e-14);
  CHECK(plain.log_det == doctest::Approx(taped.log_det.value()[0]).epsilon(1e-12));
}

TEST_CASE("layer gradients match finite differences") {
  Rng rng(20);
  const Tensor x = testutil::random_tensor({2, 2, 4}, rng);
  const Tensor weight = testutil::random_tensor({2, 2, 4}, rng);  // fixed projection
  FlowStep step(4, 4, false, "", rng);
  randomize(*step.coupling.parameters()[4], rng, 0.6);

  // loss = sum(z * weight) + log_det exercises both outputs.
  auto build = [&](Tape& t) {
    LayerVarOutput out = step.forward(t, t.constant(x));
    Var loss = t.add(t.sum(t.mul(out.z, t.constant(weight))), out.log_det);
    if (t.tracking()) t.backward(loss);
    return loss.value()[0];
  };
  Tape tape;
  build(tape);
  auto eval = [&] {
    Tape t(false);
    return build(t);
  };
  for (Parameter* p : step.parameters()) {
    const Tensor fd = testutil::finite_difference_grad(*p, eval);
    const Tensor* analytic = tape.grad_for(*p);
    REQUIRE(analytic != nullptr);
    INFO("parameter: " << p->name);
    CHECK(testutil::grad_rel_err(*analytic, fd) < 1e-6);
  }
}
