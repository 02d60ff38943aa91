#include "fruitreid/nn/checkpoint.hpp"
#include "fruitreid/nn/layers.hpp"
#include "fruitreid/nn/losses.hpp"
#include "support/oracles.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>

using namespace fruitreid;
using namespace fruitreid::nn;
using fruitreid::testing::lovasz_oracle;

namespace {

Matrix randn(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c, double s = 1.0) {
  std::normal_distribution<double> g(0.0, s);
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = g(rng);
  return m;
}

Parameter make_param(Matrix v) {
  Parameter p;
  p.value = std::move(v);
  p.zero_grad();
  return p;
}

// Projects the op output onto fixed random weights so every entry feeds the
// gradient.
Var weigh(Tape& tape, Var x, const Matrix& w) {
  return sum_all(matmul(reshape(x, 1, x.rows() * x.cols()), tape.constant(w)));
}

constexpr double kEps = 1e-5;
constexpr double kTol = 1e-6;

/// Grad check that resamples through `reseed` whenever a probe could cross a
/// kink. Returns the relative error of the first clean draw.
double kink_safe_check(const std::function<Var(Tape&)>& loss, std::vector<Parameter*> targets,
                       const std::function<void(int)>& reseed) {
  for (int attempt = 0; attempt < 10; ++attempt) {
    reseed(attempt);
    auto r = grad_check(loss, targets, {kEps, 40, 1});
    if (r.min_kink_distance > 10 * kEps) return r.max_rel_error;
  }
  FAIL("inputs kept landing near a kink");
  return 1.0;
}

}  // namespace

TEST_CASE("softmax agrees with a long double oracle on extreme logits") {
  std::mt19937_64 rng(3);
  for (int t = 0; t < 50; ++t) {
    Eigen::VectorXd z = randn(rng, 7, 1, 300.0);
    auto p = softmax(z);
    long double m = z.maxCoeff(), s = 0;
    for (int i = 0; i < 7; ++i) s += std::exp(static_cast<long double>(z(i)) - m);
    for (int i = 0; i < 7; ++i) {
      const long double ref = std::exp(static_cast<long double>(z(i)) - m) / s;
      CHECK(std::abs(static_cast<long double>(p(i)) - ref) <= 1e-15L);
    }
    CHECK(p.sum() == doctest::Approx(1.0).epsilon(1e-14));
  }
}

TEST_CASE("softmax_segments normalizes each range independently") {
  Tape tape;
  Matrix x(5, 1);
  x << 1, 2, 3, -1, 4;
  auto y = softmax_segments(tape.constant(x), {{0, 3}, {3, 5}});
  CHECK(y.value().block(0, 0, 3, 1).sum() == doctest::Approx(1.0));
  CHECK(y.value().block(3, 0, 2, 1).sum() == doctest::Approx(1.0));
  CHECK(y.value()(4, 0) == doctest::Approx(std::exp(4.0) / (std::exp(4.0) + std::exp(-1.0))));
}

TEST_CASE("linear algebra and shape ops pass gradient checks") {
  std::mt19937_64 rng(7);
  Parameter a = make_param(randn(rng, 4, 3));
  Parameter b = make_param(randn(rng, 3, 5));
  Parameter row = make_param(randn(rng, 1, 5));
  const Matrix w = randn(rng, 20, 1);
  auto loss = [&](Tape& t) {
    Var y = add_row(matmul(t.param(a), t.param(b)), t.param(row));
    Var z = concat_cols({slice_cols(y, 0, 2), scale(slice_cols(y, 2, 3), 0.5)});
    z = concat_rows({slice_rows(z, 2, 2), add_scalar(slice_rows(z, 0, 2), 1.0)});
    z = sub(softmax_rows(z), gather_rows(z, {3, 1, 0, 2}));
    return weigh(t, z, w);
  };
  std::vector<Parameter*> targets{&a, &b, &row};
  CHECK(grad_check(loss, targets, {kEps, 0, 0}).max_rel_error < kTol);
}

TEST_CASE("relu, leaky relu and abs pass gradient checks away from kinks") {
  Parameter x;
  std::mt19937_64 wr(1);
  const Matrix w = randn(wr, 24, 1);
  auto loss = [&](Tape& t) {
    Var v = t.param(x);
    return weigh(t, concat_cols({relu(slice_cols(v, 0, 2)), leaky_relu(slice_cols(v, 2, 1)), abs(slice_cols(v, 3, 1))}), w);
  };
  double err = kink_safe_check(loss, {&x}, [&](int attempt) {
    std::mt19937_64 rng(100 + attempt);
    x = make_param(randn(rng, 6, 4));
  });
  CHECK(err < kTol);
}

TEST_CASE("reductions and pooling pass gradient checks") {
  std::mt19937_64 rng(9);
  Parameter x = make_param(randn(rng, 6, 3));
  const Matrix w1 = randn(rng, 9, 1), w2 = randn(rng, 3, 1), w3 = randn(rng, 6, 1);
  auto loss = [&](Tape& t) {
    Var v = t.param(x);
    Var a = weigh(t, segment_mean(v, {0, 1, 0, 2, 1, 2}, 3), w1);
    Var b = weigh(t, global_avg_pool(v), w2);
    Var c = weigh(t, sum_rows(v), w3);
    return add(add(a, b), add(c, add(mean_all(v), sum_all(scale(sum_cols(v), 0.1)))));
  };
  std::vector<Parameter*> targets{&x};
  CHECK(grad_check(loss, targets, {kEps, 0, 0}).max_rel_error < kTol);
}

TEST_CASE("global_avg_pool of an empty set throws") {
  Tape t;
  CHECK_THROWS_AS(global_avg_pool(t.constant(Matrix(0, 3))), EmptyInputError);
}

TEST_CASE("batch norm and layer norm pass gradient checks") {
  std::mt19937_64 rng(11);
  Parameter x = make_param(randn(rng, 7, 4));
  Parameter gain = make_param(randn(rng, 1, 4));
  Parameter bias = make_param(randn(rng, 1, 4));
  Matrix rm = Matrix::Zero(1, 4), rv = Matrix::Ones(1, 4);
  const Matrix w = randn(rng, 28, 1);
  auto loss = [&](Tape& t) {
    Var bn = batch_norm(t.param(x), t.param(gain), t.param(bias), rm, rv, true);
    Var ln = layer_norm(bn, t.param(gain), t.param(bias));
    return weigh(t, ln, w);
  };
  std::vector<Parameter*> targets{&x, &gain, &bias};
  CHECK(grad_check(loss, targets, {kEps, 0, 0}).max_rel_error < 1e-5);
}

TEST_CASE("batch norm train mode standardizes and updates running stats") {
  std::mt19937_64 rng(12);
  Matrix xv = randn(rng, 50, 3, 2.0).array() + 5.0;
  Matrix rm = Matrix::Zero(1, 3), rv = Matrix::Ones(1, 3);
  Tape t;
  Var y = batch_norm(t.constant(xv), t.constant(Matrix::Ones(1, 3)), t.constant(Matrix::Zero(1, 3)), rm, rv, true);
  for (Eigen::Index c = 0; c < 3; ++c) {
    CHECK(std::abs(y.value().col(c).mean()) < 1e-12);
    const double var = (y.value().col(c).array() - y.value().col(c).mean()).square().mean();
    CHECK(var == doctest::Approx(1.0).epsilon(1e-4));
    const double mean = xv.col(c).mean();
    const double unbiased = (xv.col(c).array() - mean).square().sum() / 49.0;
    CHECK(rm(0, c) == doctest::Approx(0.1 * mean));
    CHECK(rv(0, c) == doctest::Approx(0.9 + 0.1 * unbiased));
  }
}

TEST_CASE("batch norm eval mode uses running stats") {
  Matrix rm(1, 2), rv(1, 2);
  rm << 1.0, -2.0;
  rv << 4.0, 0.25;
  Matrix x(1, 2);
  x << 3.0, -1.0;
  Tape t;
  Var y = batch_norm(t.constant(x), t.constant(Matrix::Ones(1, 2)), t.constant(Matrix::Zero(1, 2)), rm, rv, false);
  CHECK(y.value()(0, 0) == doctest::Approx(2.0 / std::sqrt(4.0 + 1e-5)));
  CHECK(y.value()(0, 1) == doctest::Approx(1.0 / std::sqrt(0.25 + 1e-5)));
}

TEST_CASE("attention matches a direct per-segment computation") {
  std::mt19937_64 rng(13);
  const Matrix q = randn(rng, 7, 4), k = randn(rng, 7, 4), v = randn(rng, 7, 4);
  const std::vector<RowRange> segs{{0, 3}, {3, 7}};
  Tape t;
  Var out = attention(t.constant(q), t.constant(k), t.constant(v), 2, segs);
  for (const auto& s : segs) {
    for (int h = 0; h < 2; ++h) {
      const auto qs = q.block(s.begin, 2 * h, s.size(), 2);
      const auto ks = k.block(s.begin, 2 * h, s.size(), 2);
      const auto vs = v.block(s.begin, 2 * h, s.size(), 2);
      Matrix scores = qs * ks.transpose() / std::sqrt(2.0);
      for (Eigen::Index r = 0; r < scores.rows(); ++r) {
        Eigen::VectorXd row = scores.row(r).transpose();
        scores.row(r) = softmax(row).transpose();
      }
      Matrix expected = scores * vs;
      CHECK((out.value().block(s.begin, 2 * h, s.size(), 2) - expected).cwiseAbs().maxCoeff() < 1e-12);
    }
  }
}

TEST_CASE("attention and the encoder layer pass gradient checks") {
  std::mt19937_64 rng(14);
  ParamStore store(5);
  Parameter x = make_param(randn(rng, 6, 4));
  const Matrix w = randn(rng, 24, 1);
  auto loss = [&](Tape& t) { return weigh(t, encoder_layer(t, store, "enc", t.param(x), 2, 8, {{0, 2}, {2, 6}}), w); };
  {
    Tape t;
    loss(t);  // materialize parameters
  }
  std::vector<Parameter*> targets{&x, &store.param("enc.attn.q.weight"), &store.param("enc.attn.k.weight"),
                                  &store.param("enc.attn.v.weight"), &store.param("enc.norm1.gain")};
  double err = kink_safe_check(loss, targets, [&](int attempt) {
    std::mt19937_64 r(200 + attempt);
    x = make_param(randn(r, 6, 4));
  });
  CHECK(err < 1e-5);
}

TEST_CASE("encoder layer rejects widths not divisible by the head count") {
  ParamStore store;
  Tape t;
  CHECK_THROWS_AS(encoder_layer(t, store, "e", t.constant(Matrix::Zero(2, 5)), 2, 4, {{0, 2}}), ConfigError);
}

TEST_CASE("sparse convolution passes gradient checks") {
  std::mt19937_64 rng(15);
  std::vector<VoxelCoord> coords;
  std::uniform_int_distribution<int> u(-2, 2);
  while (coords.size() < 25) {
    VoxelCoord c{u(rng), u(rng), u(rng), 0};
    if (std::find(coords.begin(), coords.end(), c) == coords.end()) coords.push_back(c);
  }
  const auto map1 = kernel_neighbors(coords, 1, 3, 1);
  const auto map2 = kernel_neighbors(coords, 1, 3, 2);
  Parameter f = make_param(randn(rng, 25, 2));
  Parameter w1 = make_param(randn(rng, 27 * 2, 3));
  Parameter w2 = make_param(randn(rng, 27 * 3, 2));
  const Matrix w = randn(rng, static_cast<Eigen::Index>(map2.out_size()) * 2, 1);
  auto loss = [&](Tape& t) {
    Var h = sparse_conv(t.param(f), t.param(w1), map1);
    return weigh(t, sparse_conv(h, t.param(w2), map2), w);
  };
  std::vector<Parameter*> targets{&f, &w1, &w2};
  CHECK(grad_check(loss, targets, {kEps, 60, 2}).max_rel_error < kTol);
}

TEST_CASE("cross entropy on probabilities and logits") {
  Matrix p(2, 3), target(2, 3);
  p << 0.2, 0.3, 0.5, 0.0, 1.0, 0.0;
  target << 0, 0, 1, 1, 0, 0;
  Tape t;
  Var l = cross_entropy(t.constant(p), target, PredKind::Probabilities, Reduction::Sum);
  CHECK(l.scalar() == doctest::Approx(-std::log(0.5) - std::log(1e-12)));
  Var m = cross_entropy(t.constant(p), target, PredKind::Probabilities, Reduction::Mean);
  CHECK(m.scalar() == doctest::Approx(l.scalar() / 2.0));
  Matrix neg = target;
  neg(0, 0) = -0.1;
  CHECK_THROWS_AS(cross_entropy(t.constant(p), neg, PredKind::Probabilities, Reduction::Sum), ValidationError);

  std::mt19937_64 rng(16);
  Parameter z = make_param(randn(rng, 4, 3));
  Matrix tz = Matrix::Zero(4, 3);
  tz(0, 1) = tz(1, 0) = tz(2, 2) = tz(3, 1) = 1.0;
  auto loss = [&](Tape& tt) { return cross_entropy(tt.param(z), tz, PredKind::Logits, Reduction::Mean); };
  std::vector<Parameter*> targets{&z};
  CHECK(grad_check(loss, targets, {kEps, 0, 0}).max_rel_error < kTol);
  auto loss_p = [&](Tape& tt) { return cross_entropy(softmax_rows(tt.param(z)), tz, PredKind::Probabilities, Reduction::Sum); };
  CHECK(grad_check(loss_p, targets, {kEps, 0, 0}).max_rel_error < kTol);
}

TEST_CASE("lovasz softmax equals the level-set integral") {
  std::mt19937_64 rng(18);
  std::uniform_int_distribution<int> lab(0, 2);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 1 + trial % 15;
    Tape t;
    Var p = softmax_rows(t.constant(randn(rng, n, 3, 2.0)));
    std::vector<int> labels(static_cast<std::size_t>(n));
    for (auto& l : labels) l = lab(rng);
    Var l = lovasz_softmax(p, labels);
    CHECK(l.scalar() == doctest::Approx(lovasz_oracle(p.value(), labels)).epsilon(1e-12));
  }
}

TEST_CASE("lovasz softmax is zero for perfect predictions and passes a gradient check") {
  Matrix perfect(3, 2);
  perfect << 1, 0, 0, 1, 1, 0;
  Tape t;
  CHECK(lovasz_softmax(t.constant(perfect), std::vector<int>{0, 1, 0}).scalar() == 0.0);

  std::mt19937_64 rng(19);
  Parameter z = make_param(randn(rng, 8, 3));
  const std::vector<int> labels{0, 1, 2, 0, 1, 1, 2, 0};
  auto loss = [&](Tape& tt) { return lovasz_softmax(softmax_rows(tt.param(z)), labels); };
  std::vector<Parameter*> targets{&z};
  CHECK(grad_check(loss, targets, {1e-6, 0, 0}).max_rel_error < 1e-5);
}

TEST_CASE("mean_l1_rows averages over the selected rows") {
  Matrix pred(3, 2), target(2, 2);
  pred << 1, 2, 3, 4, 5, 6;
  target << 0, 0, 1, 1;
  Tape t;
  Var l = mean_l1_rows(t.constant(pred), target, {0, 2});
  CHECK(l.scalar() == doctest::Approx((3.0 + 9.0) / 2.0));
  CHECK(mean_l1_rows(t.constant(pred), Matrix(0, 2), {}).scalar() == 0.0);
}

TEST_CASE("adam step matches the closed form for the first update") {
  ParamStore store;
  auto& p = store.constant("w", 1, 2, 1.0);
  p.grad = Matrix(1, 2);
  p.grad << 0.5, -2.0;
  adam_step(store, {0.1}, 1);
  // With bias correction the first step moves each entry by lr * sign(g).
  CHECK(p.value(0, 0) == doctest::Approx(0.9).epsilon(1e-6));
  CHECK(p.value(0, 1) == doctest::Approx(1.1).epsilon(1e-6));
  CHECK_THROWS_AS(adam_step(store, {}, 0), ConfigError);
}

TEST_CASE("parameter initialization depends only on seed and name") {
  ParamStore a(42), b(42), c(43);
  b.uniform("other", 3, 3, 1.0);  // creation order must not matter
  const Matrix va = a.uniform("layer.weight", 4, 4, 0.5).value;
  const Matrix vb = b.uniform("layer.weight", 4, 4, 0.5).value;
  const Matrix vc = c.uniform("layer.weight", 4, 4, 0.5).value;
  CHECK(va == vb);
  CHECK(va != vc);
  CHECK(va.cwiseAbs().maxCoeff() <= 0.5);
}

TEST_CASE("checkpoint round trip preserves float-rounded tensors") {
  ParamStore store(7);
  Tape t;
  Var x = t.constant(Matrix::Random(5, 3));
  Var y = linear_layer(t, store, "head", batch_norm_layer(t, store, "bn", x, true), 4);
  (void)y;
  ParamStore expected = store;
  round_to_float(expected);
  const auto path = std::filesystem::temp_directory_path() / "fruitreid_ck.bin";
  save_checkpoint(path, store, {{"kind", "test"}});
  auto ck = load_checkpoint(path);
  CHECK(ck.config["kind"] == "test");
  CHECK(ck.store.seed() == 7);
  REQUIRE(ck.store.params().size() == expected.params().size());
  for (const auto& [name, p] : expected.params()) CHECK(ck.store.param(name).value == p.value);
  for (const auto& [name, b] : expected.buffers()) CHECK(ck.store.buffer(name) == b);

  std::ofstream(path, std::ios::binary) << "garbage";
  CHECK_THROWS_AS(load_checkpoint(path), ParseError);
  CHECK_THROWS_AS(load_checkpoint(path.string() + ".missing"), IoError);
}
