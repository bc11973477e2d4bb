#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "depthdiff/checkpoint.hpp"
#include "support.hpp"

using namespace depthdiff;
using namespace depthdiff::testing;

namespace {

using Vec = ad::Vector<double>;

const NoiseSchedule& default_schedule() {
  static const NoiseSchedule s = DiffusionConfig{}.schedule();
  return s;
}

/// Denoiser that knows the clean latent and answers with the exact target.
struct OracleDenoiser {
  Vec d0;
  const NoiseSchedule* schedule;
  Objective objective;
  int channels;

  ad::Tensor<double> operator()(const ad::Tensor<double>& z, std::span<const int> t) const {
    const int n = z.dim(0), h = z.dim(2), w = z.dim(3);
    const Eigen::Index per = Eigen::Index{channels} * h * w;
    const Eigen::Index stride = Eigen::Index{z.dim(1)} * h * w;
    ad::Vector<double> out(per * n);
    for (int k = 0; k < n; ++k) {
      const int ts = t[static_cast<std::size_t>(k)];
      const Vec zt = z.value().segment(k * stride, per);
      const Vec eps = (zt - schedule->signal(ts) * d0) / schedule->noise(ts);
      out.segment(k * per, per) = objective_target(objective, d0, eps, ts, *schedule);
    }
    return ad::Tensor<double>({n, channels, h, w}, out);
  }
};

TrainConfig small_train(int micro_batch, int accumulation) {
  TrainConfig tc;
  tc.micro_batch = micro_batch;
  tc.accumulation = accumulation;
  tc.adam.lr = 1e-3;
  return tc;
}

}  // namespace

TEST_CASE("noise schedule") {
  const auto& s = default_schedule();
  CHECK(s.steps() == 1000);
  CHECK(s.alpha_bar(999) == doctest::Approx(4.0358297653756835e-05).epsilon(1e-9));
  CHECK(s.alpha_bar(0) == 1.0 - 1e-4);
  for (int t = 1; t < 1000; ++t) CHECK(s.alpha_bar(t) < s.alpha_bar(t - 1));
  CHECK(s.alpha_bar(999) < 0.01);
  CHECK((s.beta.array() > 0).all());
  CHECK((s.beta.array() < 1).all());

  const auto one = make_schedule(1, 0.3, 0.5);
  CHECK(one.steps() == 1);
  CHECK(one.alpha_bar(0) == 0.7);
  const auto other = make_schedule(7, 0.05, 0.4);
  for (int t = 1; t < 7; ++t) CHECK(other.alpha_bar(t) < other.alpha_bar(t - 1));
  CHECK_THROWS_AS(make_schedule(10, 0.0, 0.1), ConfigError);
  CHECK_THROWS_AS(make_schedule(10, 0.2, 0.1), ConfigError);
  CHECK_THROWS_AS(make_schedule(10, 0.1, 1.0), ConfigError);
  CHECK_THROWS_AS(make_schedule(0, 0.1, 0.2), ConfigError);
}

TEST_CASE("forward process") {
  const auto& s = default_schedule();
  Rng r(1);
  const Vec d0 = random_vector(16, r);
  CHECK((forward_noise(d0, 300, Vec(Vec::Zero(16)), s) - s.signal(300) * d0).cwiseAbs().maxCoeff() < 1e-15);

  NoiseSchedule quarter;
  quarter.beta = quarter.alpha = quarter.alpha_bar = Eigen::VectorXd::Constant(1, 0.25);
  const Vec ones = Vec::Ones(4);
  CHECK(forward_noise(ones, 0, ones, quarter)(2) == doctest::Approx(1.3660254037844386).epsilon(1e-15));

  CHECK_THROWS_AS(forward_noise(d0, 1000, d0, s), UsageError);
  CHECK_THROWS_AS(forward_noise(d0, -1, d0, s), UsageError);
  CHECK_THROWS_AS(forward_noise(d0, 3, Vec(Vec::Zero(3)), s), DimensionError);
}

TEST_CASE("forward marginals match the closed form") {
  const auto& s = default_schedule();
  for (const int t : {1, 250, 500, 750, 999}) {
    Rng r = Rng(2).stream(static_cast<std::uint64_t>(t));
    const Vec d0 = Vec::Constant(1, 0.7);
    const int draws = 10000;
    double sum = 0, sq = 0;
    for (int i = 0; i < draws; ++i) {
      const double x = forward_noise(d0, t, Vec(Vec::Constant(1, r.normal())), s)(0);
      sum += x;
      sq += x * x;
    }
    const double mean = sum / draws;
    const double var = (sq - draws * mean * mean) / (draws - 1);
    const double want_var = 1 - s.alpha_bar(t);
    CAPTURE(t);
    CHECK(var == doctest::Approx(want_var).epsilon(0.05));
  }
}

TEST_CASE("v parameterization") {
  NoiseSchedule ends;
  ends.beta = ends.alpha = Eigen::VectorXd::Zero(2);
  ends.alpha_bar = Eigen::Vector2d(1.0, 0.0);
  Rng r(3);
  const Vec d0 = random_vector(10, r), eps = random_vector(10, r);
  CHECK(v_target(d0, eps, 0, ends) == eps);
  CHECK(v_target(d0, eps, 1, ends) == Vec(-d0));

  const auto& s = default_schedule();
  for (int t : {0, 17, 500, 999}) {
    const Vec dt = forward_noise(d0, t, eps, s);
    const Vec v = v_target(d0, eps, t, s);
    CHECK((x0_from_v(dt, v, t, s) - d0).cwiseAbs().maxCoeff() < 1e-6);
    CHECK((eps_from_v(dt, v, t, s) - eps).cwiseAbs().maxCoeff() < 1e-6);
  }
}

TEST_CASE("DDIM grid") {
  const auto g = ddim_timesteps(1000, 50);
  CHECK(g.size() == 50);
  CHECK(g.front() == 999);
  CHECK(g.back() == 19);
  CHECK(std::adjacent_find(g.begin(), g.end(), std::less_equal<>()) == g.end());
  CHECK(ddim_timesteps(1000, 1000).size() == 999);
  CHECK(ddim_timesteps(1, 1) == std::vector<int>{0});
  CHECK_THROWS_AS(ddim_timesteps(10, 11), ConfigError);
}

TEST_CASE("DDIM step") {
  const auto& s = default_schedule();
  Rng r(4);
  const Vec d0 = random_vector(32, r), eps = random_vector(32, r);
  for (const auto obj : {Objective::epsilon, Objective::v}) {
    for (int t : {1, 400, 999}) {
      const Vec dt = forward_noise(d0, t, eps, s);
      const Vec out = objective_target(obj, d0, eps, t, s);
      CHECK((ddim_step(dt, out, t, 0, s, obj) - d0).cwiseAbs().maxCoeff() < 1e-6);
      CHECK(ddim_step(dt, out, t, 0, s, obj, 100.0) == ddim_step(dt, out, t, 0, s, obj));
      const Vec mid = ddim_step(dt, out, t, t / 2, s, obj);
      CHECK(mid == ddim_step(dt, out, t, t / 2, s, obj));
      if (t / 2 > 0) CHECK((mid - forward_noise(d0, t / 2, eps, s)).cwiseAbs().maxCoeff() < 1e-6);
    }
  }
  const Vec big = Vec::Constant(4, 10.0);
  CHECK(ddim_step(big, Vec(Vec::Zero(4)), 5, 0, s, Objective::epsilon, 3.0).cwiseAbs().maxCoeff() == 3.0);
  CHECK_THROWS_AS(ddim_step(d0, eps, 10, 10, s, Objective::v), UsageError);
  CHECK_THROWS_AS(ddim_step(d0, eps, 10, 20, s, Objective::v), UsageError);
}

TEST_CASE("oracle denoiser recovers the clean latent through the full chain") {
  const auto& s = default_schedule();
  Rng r(5);
  const Vec d0 = random_vector(2 * 4 * 4, r, -1.5, 1.5);
  const auto cond = ad::Tensor<double>::zeros({1, 2, 4, 4});
  for (const auto obj : {Objective::epsilon, Objective::v}) {
    DiffusionConfig cfg;
    cfg.objective = obj;
    const OracleDenoiser oracle{d0, &s, obj, 2};
    const auto z = ddim_sample<double>(oracle, cond, 2, cfg, s, 77);
    CHECK((z.value() - d0).cwiseAbs().maxCoeff() < 1e-4);
  }
  DiffusionConfig single;
  single.train_steps = 1;
  single.ddim_steps = 1;
  single.beta_start = single.beta_end = 0.5;
  const auto s1 = single.schedule();
  const OracleDenoiser oracle{d0, &s1, Objective::v, 2};
  CHECK((ddim_sample<double>(oracle, cond, 2, single, s1, 1).value() - d0).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("sampling is seeded") {
  UNet<double> net(tiny_unet_config(), 6);
  Rng r(7);
  const auto cond = random_tensor({1, 2, 4, 4}, r);
  DiffusionConfig cfg;
  cfg.ddim_steps = 5;
  const auto s = cfg.schedule();
  const auto model = [&](const ad::Tensor<double>& z, std::span<const int> t) {
    ad::Tape<double> tape(false);
    return net.forward(tape, z, t);
  };
  const auto a = ddim_sample<double>(model, cond, 2, cfg, s, 10);
  CHECK(a.value() == ddim_sample<double>(model, cond, 2, cfg, s, 10).value());
  CHECK(a.value() != ddim_sample<double>(model, cond, 2, cfg, s, 11).value());
}

TEST_CASE("training loss") {
  const auto& s = default_schedule();
  UNet<double> net(tiny_unet_config(), 8);
  Rng r(9);
  ad::Tape<double> tape(false);

  SUBCASE("untrained model on unit targets is near 1") {
    std::vector<double> losses;
    for (int i = 0; i < 20; ++i) {
      const ad::Tensor<double> zd({4, 2, 4, 4}, Vec::NullaryExpr(32 * 4, [&] { return r.normal(); }));
      const auto zx = random_tensor({4, 2, 4, 4}, r);
      const Vec eps = Vec::NullaryExpr(zd.size(), [&] { return r.normal(); });
      std::vector<int> t(4);
      for (auto& ti : t) ti = static_cast<int>(r.uniform_int(1000));
      losses.push_back(training_loss(tape, net, zd, zx, t, eps, s).item());
    }
    const double mean = std::accumulate(losses.begin(), losses.end(), 0.0) / losses.size();
    MESSAGE("initial loss " << mean);
    CHECK(mean > 0.7);
    CHECK(mean < 1.5);
  }
  SUBCASE("mean reduction is invariant to batch order") {
    const auto zd = random_tensor({2, 2, 4, 4}, r);
    const auto zx = random_tensor({2, 2, 4, 4}, r);
    const Vec eps = random_vector(64, r);
    const std::vector<int> t{3, 800};
    const auto swap = [](const Vec& v) {
      Vec o(v.size());
      o << v.tail(v.size() / 2), v.head(v.size() / 2);
      return o;
    };
    const double a = training_loss(tape, net, zd, zx, t, eps, s).item();
    const double b = training_loss(tape, net, ad::Tensor<double>(zd.shape(), swap(zd.value())),
                                   ad::Tensor<double>(zx.shape(), swap(zx.value())), std::vector<int>{800, 3}, swap(eps), s)
                         .item();
    CHECK(a == doctest::Approx(b).epsilon(1e-14));
  }
  SUBCASE("shape mismatch is rejected") {
    const auto zd = random_tensor({2, 2, 4, 4}, r);
    CHECK_THROWS_AS(training_loss(tape, net, zd, random_tensor({2, 3, 4, 4}, r), std::vector<int>{1, 2}, random_vector(64, r), s),
                    DimensionError);
  }
}

TEST_CASE("exact targets give zero loss") {
  const auto& s = default_schedule();
  Rng r(10);
  const Vec d0 = random_vector(32, r), eps = random_vector(32, r);
  ad::Tape<double> tape(false);
  const ad::Tensor<double> target({1, 2, 4, 4}, objective_target(Objective::v, d0, eps, 123, s));
  const ad::Tensor<double> out({1, 2, 4, 4}, v_target(d0, eps, 123, s));
  CHECK(ad::mse_loss(tape, out, target).item() == 0.0);
}

TEST_CASE("gradient accumulation equals a single large batch at 64-bit") {
  const auto data = random_latents<double>(6, 2, 4, 4, 11);
  UNet<double> big(tiny_unet_config(), 12), acc(tiny_unet_config(), 12);
  DiffusionTrainer<double> one(big, DiffusionConfig{}, small_train(4, 1), 13);
  DiffusionTrainer<double> two(acc, DiffusionConfig{}, small_train(2, 2), 13);
  for (int i = 0; i < 3; ++i) {
    CHECK(one.step(data) == doctest::Approx(two.step(data)).epsilon(1e-12));
  }
  double worst = 0;
  for (std::size_t i = 0; i < big.params().params().size(); ++i) {
    const auto& a = big.params().params()[i].tensor.value();
    const auto& b = acc.params().params()[i].tensor.value();
    worst = std::max(worst, (a - b).norm() / std::max(a.norm(), 1e-300));
  }
  CHECK(worst < 1e-10);
}

TEST_CASE("resuming from a checkpoint reproduces the uninterrupted run bit for bit") {
  const auto data = random_latents<float>(5, 2, 4, 4, 14);
  const TrainConfig tc = small_train(2, 2);
  UNet<float> straight(tiny_unet_config(), 15);
  DiffusionTrainer<float> a(straight, DiffusionConfig{}, tc, 16);
  for (int i = 0; i < 6; ++i) a.step(data);

  UNet<float> first(tiny_unet_config(), 15);
  DiffusionTrainer<float> b(first, DiffusionConfig{}, tc, 16);
  for (int i = 0; i < 3; ++i) b.step(data);
  Checkpoint ckpt;
  ckpt.kind = "unet";
  ckpt.step = b.steps_done();
  store_parameters(ckpt, first.params(), true);
  const auto path = std::filesystem::temp_directory_path() / "depthdiff_resume.ckpt";
  write_checkpoint(path, ckpt);

  UNet<float> resumed(tiny_unet_config(), 999);
  const auto loaded = read_checkpoint(path);
  load_parameters(loaded, resumed.params(), true);
  DiffusionTrainer<float> c(resumed, DiffusionConfig{}, tc, 16);
  c.set_steps_done(loaded.step);
  for (int i = 0; i < 3; ++i) c.step(data);
  CHECK(resumed.params().value_hash() == straight.params().value_hash());
}

TEST_CASE("trainer rejects mismatched data before stepping") {
  UNet<double> net(tiny_unet_config(), 17);
  DiffusionTrainer<double> tr(net, DiffusionConfig{}, small_train(2, 1), 18);
  const auto hash = net.params().value_hash();
  CHECK_THROWS_AS(tr.step(random_latents<double>(3, 3, 4, 4, 19)), ConfigError);
  CHECK_THROWS_AS(tr.step(LatentDataset<double>{}), DataError);
  CHECK(net.params().value_hash() == hash);
  DiffusionConfig bad;
  bad.ddim_steps = 2000;
  CHECK_THROWS_AS(DiffusionTrainer<double>(net, bad, small_train(2, 1), 1), ConfigError);
}
