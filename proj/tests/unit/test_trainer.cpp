#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "cpf/trainer.hpp"
#include "doctest.h"
#include "helpers.hpp"

using namespace cpf;

namespace {

ModelConfig small_single(std::size_t charts) {
  ModelConfig c;
  c.charts = charts;
  c.width_scale = 1.0 / 16;
  c.flow_blocks = 2;
  c.seed = 3;
  return c;
}

ModelConfig small_full() {
  ModelConfig c;
  c.mode = "full";
  c.charts = 2;
  c.width_scale = 1.0 / 16;
  c.flow_blocks = 2;
  c.prior_blocks = 1;
  c.feature_dim = 2;
  c.seed = 4;
  return c;
}

TrainConfig quick(const std::string& mode, std::size_t iterations) {
  TrainConfig t;
  t.mode = mode;
  t.iterations = iterations;
  t.batch_size = mode == "full" ? 3 : 32;
  t.points_per_cloud = 16;
  t.log_every = 1;
  t.seed = 9;
  return t;
}

std::vector<std::vector<double>> snapshot(const ParamList& params) {
  std::vector<std::vector<double>> out;
  for (const auto& p : params) out.emplace_back(p.tensor.values().begin(), p.tensor.values().end());
  return out;
}

PointCloud gaussian_cloud(std::size_t m, Rng& rng) {
  PointCloud c;
  for (std::size_t i = 0; i < m; ++i) c.coords.insert(c.coords.end(), {0.3 + 0.2 * rng.normal(), -0.1 + 0.1 * rng.normal()});
  return c;
}

std::vector<PointCloud> small_family(std::size_t count) {
  SyntheticSpec s;
  s.kind = "ring-or-disk-family";
  s.points = 64;
  s.seed = 2;
  return generate_family(s, count).clouds;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("adam first step moves by lr times the sign") {
  Tensor theta = Tensor::parameter(1, 4, {0.5, -2, 3, 1});
  const std::vector<double> g{0.3, -7, 1e-3, 0};
  ParamList params{{"theta", theta, true}};
  Adam adam(params, 0.9, 0.999, 1e-8);
  theta.zero_grad();
  std::copy(g.begin(), g.end(), theta.mutable_grad().begin());
  const double norm = adam.step(0.01, 0.0);
  CHECK(norm == doctest::Approx(std::sqrt(0.09 + 49 + 1e-6)));
  const std::vector<double> start{0.5, -2, 3, 1};
  for (std::size_t i = 0; i < 4; ++i) {
    // bias-corrected moments are g and g^2 after one step
    const double expect = start[i] - 0.01 * g[i] / (std::abs(g[i]) + 1e-8);
    CHECK(std::abs(theta.values()[i] - expect) < 1e-15);
  }
  CHECK(theta.values()[3] == 1.0);
  CHECK(adam.steps() == 1);
}

TEST_CASE("adam with zero gradient leaves parameters unchanged") {
  Tensor theta = Tensor::parameter(2, 2, {1, 2, 3, 4});
  ParamList params{{"theta", theta, true}};
  Adam adam(params, 0.9, 0.999, 1e-8);
  for (int k = 0; k < 5; ++k) {
    theta.zero_grad();
    (void)theta.mutable_grad();
    adam.step(0.1, 10.0);
  }
  CHECK(theta.values()[0] == 1.0);
  CHECK(theta.values()[3] == 4.0);
}

TEST_CASE("adam minimizes a quadratic like the scalar recurrence") {
  Tensor theta = Tensor::parameter(1, 1, {1.0});
  ParamList params{{"theta", theta, true}};
  Adam adam(params, 0.9, 0.999, 1e-8);
  double x = 1.0, m = 0, v = 0;
  for (int t = 1; t <= 100; ++t) {
    {
      Tape tape;
      theta.zero_grad();
      tape.backward(sum(square(theta)));
    }
    adam.step(0.1, 0.0);
    const double g = 2 * x;
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    x -= 0.1 * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.999, t))) + 1e-8);
  }
  CHECK(std::abs(theta.item()) < 0.05);
  CHECK(std::abs(theta.item() - x) < 1e-12);
}

TEST_CASE("adam clipping and failures") {
  Tensor theta = Tensor::parameter(1, 2, {0, 0});
  ParamList params{{"layer.w", theta, true}};
  Adam adam(params, 0.9, 0.999, 1e-8);
  SUBCASE("clipping rescales before the update") {
    theta.zero_grad();
    theta.mutable_grad()[0] = 60;
    theta.mutable_grad()[1] = 80;
    CHECK(adam.step(1e-3, 10.0) == doctest::Approx(100.0));
    ParamList state;
    adam.collect(state);
    // first moment holds (1 - beta1) times the clipped gradient
    CHECK(state[0].tensor.values()[0] == doctest::Approx(0.1 * 6.0));
    CHECK(state[1].tensor.values()[1] == doctest::Approx(0.001 * 64.0));
  }
  SUBCASE("a NaN gradient names the parameter") {
    theta.zero_grad();
    theta.mutable_grad()[1] = std::nan("");
    try {
      adam.step(0.1, 0.0);
      FAIL("expected NumericError");
    } catch (const NumericError& e) {
      CHECK(std::string(e.what()).find("layer.w") != std::string::npos);
    }
    CHECK(theta.values()[0] == 0.0);
  }
}

TEST_CASE("learning-rate schedule") {
  TrainConfig c;
  c.mode = "full";
  c.lr = 2e-3;
  c.lr_decay_period = 5000;
  CHECK(lr_at(0, c) == 2e-3);
  CHECK(lr_at(4999, c) == 2e-3);
  CHECK(lr_at(5000, c) == doctest::Approx(2e-3 / 4).epsilon(1e-15));
  CHECK(lr_at(10000, c) == doctest::Approx(2e-3 / 16).epsilon(1e-15));
  c.mode = "single";
  CHECK(lr_at(10000, c) == 2e-3);
}

TEST_CASE("train config validation") {
  TrainConfig c;
  CHECK_NOTHROW(c.validate());
  c.beta1 = 1.0;
  CHECK_THROWS(c.validate());
  c = TrainConfig{};
  c.lr = 0;
  CHECK_THROWS(c.validate());
  c = TrainConfig{};
  c.mode = "both";
  CHECK_THROWS(c.validate());
}

TEST_CASE("zero iterations leave the model unchanged") {
  Rng rng(1);
  SingleCloudModel model(small_single(2));
  ParamList p;
  model.collect(p);
  auto before = snapshot(p);
  TrainResult r = train_single(model, gaussian_cloud(100, rng), quick("single", 0));
  CHECK(r.trace.empty());
  CHECK(snapshot(p) == before);
}

TEST_CASE("equal seeds give identical training runs") {
  Rng rng(2);
  SUBCASE("single cloud") {
    PointCloud cloud = gaussian_cloud(200, rng);
    SingleCloudModel a(small_single(2)), b(small_single(2));
    TrainResult ra = train_single(a, cloud, quick("single", 20));
    TrainResult rb = train_single(b, cloud, quick("single", 20));
    REQUIRE(ra.trace.size() == 20);
    for (std::size_t i = 0; i < 20; ++i) CHECK(ra.trace[i].loss == rb.trace[i].loss);
    ParamList pa, pb;
    a.collect(pa);
    b.collect(pb);
    CHECK(snapshot(pa) == snapshot(pb));
  }
  SUBCASE("full model") {
    auto clouds = small_family(6);
    FullModel a(small_full()), b(small_full());
    TrainResult ra = train_full(a, clouds, quick("full", 6));
    TrainResult rb = train_full(b, clouds, quick("full", 6));
    for (std::size_t i = 0; i < ra.trace.size(); ++i) CHECK(ra.trace[i].loss == rb.trace[i].loss);
    ParamList pa, pb;
    a.collect(pa);
    b.collect(pb);
    CHECK(snapshot(pa) == snapshot(pb));
  }
}

TEST_CASE("training input validation") {
  Rng rng(3);
  SingleCloudModel model(small_single(1));
  CHECK_THROWS(train_single(model, PointCloud{}, quick("single", 1)));
  PointCloud c3;
  c3.dim = 3;
  c3.coords = {0, 0, 0};
  CHECK_THROWS_AS(train_single(model, c3, quick("single", 1)), ShapeError);
  FullModel full(small_full());
  auto clouds = small_family(2);
  TrainConfig t = quick("full", 1);
  t.points_per_cloud = 65;
  CHECK_THROWS(train_full(full, clouds, t));
}

TEST_CASE("checkpoint round trip reproduces the loss") {
  testing::TempDir dir("ckpt");
  Rng rng(4);
  SUBCASE("single cloud") {
    PointCloud cloud = gaussian_cloud(200, rng);
    SingleCloudModel model(small_single(3));
    TrainConfig t = quick("single", 5);
    t.checkpoint = dir.path() / "single.ckpt";
    train_single(model, cloud, t);
    LoadedModel back = load_model(t.checkpoint);
    REQUIRE(back.single);
    CHECK(back.config.to_map() == model.config().to_map());
    Tensor x = cloud.to_tensor();
    Tensor g = gumbel_noise(x.rows(), 3, rng);
    CHECK(std::abs(back.single->loss(x, g).item() - model.loss(x, g).item()) <= 1e-12);
    // optimizer state is stored next to the weights
    Checkpoint ck = load_checkpoint(t.checkpoint);
    REQUIRE(ck.find("adam.step") != nullptr);
    CHECK(ck.find("adam.step")->tensor.item() == 5.0);
  }
  SUBCASE("full model") {
    auto clouds = small_family(4);
    FullModel model(small_full());
    TrainConfig t = quick("full", 3);
    t.checkpoint = dir.path() / "full.ckpt";
    train_full(model, clouds, t);
    LoadedModel back = load_model(t.checkpoint);
    REQUIRE(back.full);
    Tensor x = clouds[0].to_tensor();
    Rng r1(5), r2(5);
    FullTerms ta = model.elbo_terms(x, 64, r1, false);
    FullTerms tb = back.full->elbo_terms(x, 64, r2, false);
    CHECK(std::abs(model.loss(ta).item() - back.full->loss(tb).item()) <= 1e-12);
    Rng g1(6), g2(6);
    CHECK(model.generate(50, g1).coords == back.full->generate(50, g2).coords);
  }
}

TEST_CASE("checkpoint format errors") {
  testing::TempDir dir("ckfmt");
  Tensor w = Tensor::from(2, 3, {1, 2, 3, 4, 5, 6});
  save_checkpoint(dir.path() / "a.ckpt", {{"k", "v"}}, {{"w", w, true}});
  Checkpoint ck = load_checkpoint(dir.path() / "a.ckpt");
  CHECK(ck.hyper.at("k") == "v");
  CHECK(ck.find("w")->tensor.values()[5] == 6.0);
  CHECK(ck.find("w")->trainable);
  CHECK(slurp(dir.path() / "a.ckpt").substr(0, 4) == "CPF1");

  Tensor wrong = Tensor::zeros(3, 2);
  CHECK_THROWS_AS(restore_tensors({{"w", wrong, true}}, ck), ShapeError);
  CHECK_THROWS(restore_tensors({{"missing", wrong, true}}, ck));

  std::string bytes = slurp(dir.path() / "a.ckpt");
  std::ofstream(dir.path() / "trunc.ckpt", std::ios::binary) << bytes.substr(0, bytes.size() - 9);
  CHECK_THROWS(load_checkpoint(dir.path() / "trunc.ckpt"));
  std::ofstream(dir.path() / "magic.ckpt", std::ios::binary) << "XXXX" << bytes.substr(4);
  CHECK_THROWS(load_checkpoint(dir.path() / "magic.ckpt"));
  CHECK_THROWS(load_checkpoint(dir.path() / "none.ckpt"));
}

TEST_CASE("a non-finite loss aborts and keeps the last checkpoint") {
  testing::TempDir dir("abort");
  Rng rng(7);
  SingleCloudModel model(small_single(1));
  TrainConfig t = quick("single", 2);
  t.checkpoint = dir.path() / "m.ckpt";
  train_single(model, gaussian_cloud(50, rng), t);
  const std::string good = slurp(t.checkpoint);
  PointCloud bad = gaussian_cloud(50, rng);
  for (double& v : bad.coords) v = 1e300;
  CHECK_THROWS(train_single(model, bad, t));
  CHECK(slurp(t.checkpoint) == good);
}

TEST_CASE("loss trace CSV") {
  testing::TempDir dir("trace");
  write_loss_csv(dir.path() / "loss.csv", {{0, 1.5, 0.001}, {10, 0.25, 0.001}});
  CHECK(slurp(dir.path() / "loss.csv") == "iteration,loss,lr\n0,1.5,0.001\n10,0.25,0.001\n");
}

TEST_CASE("fitting a single Gaussian lowers the smoothed loss") {
  Rng rng(8);
  PointCloud cloud = gaussian_cloud(2000, rng);
  SingleCloudModel model(small_single(1));
  // Initialize on a standard normal batch so the data-dependent init does
  // not already solve the problem.
  model.actnorm_init(testing::random_tensor(256, 2, rng, 1.0));
  TrainConfig t = quick("single", 2001);
  t.lr = 1e-2;
  t.batch_size = 64;
  TrainResult r = train_single(model, cloud, t);
  // exponential smoothing with a 100-step window
  double s = r.trace.front().loss;
  const double s0 = s;
  for (const auto& rec : r.trace) s = 0.99 * s + 0.01 * rec.loss;
  CHECK(s < s0);
  // the optimum is the entropy of N(mean, diag(0.04, 0.01))
  const double entropy = std::log(2 * std::numbers::pi * std::exp(1.0)) + 0.5 * std::log(0.04 * 0.01);
  CHECK(s < entropy + 0.1);
}
