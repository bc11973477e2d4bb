// Acceptance run: one PASS/FAIL line per criterion. `--only N` runs a single
// criterion. Tolerances are fixed here and never read from the environment.

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "desk_experiment.hpp"
#include "depthdiff/commands.hpp"
#include "support.hpp"

using namespace depthdiff;
using namespace depthdiff::testing;
namespace fs = std::filesystem;

namespace {

// Criterion 1
constexpr double kOpGradTol = 1e-4;
constexpr double kUnetGradTol = 1e-3;
constexpr double kGradSeconds = 300;
// Criterion 2
constexpr double kRoundTripTol = 1e-6;
constexpr double kMidpointTol = 1e-12;
constexpr double kBaseTol = 1e-12;
// Criterion 3
constexpr int kMarginalDraws = 10000;
constexpr double kStdErrors = 3;
// Criterion 4
constexpr float kAdapterTol = 1e-6f;
// Criterion 5
constexpr double kInterchangeTol = 1e-6;
constexpr double kOracleChainTol = 1e-4;
// Criterion 6
constexpr double kAccumulationTol = 1e-10;
// Criterion 8
constexpr double kDeskSeconds = 3 * 3600;
constexpr double kRoundTripAbsRel = 0.05;
constexpr double kEnsembleAbsRel = 0.25;
constexpr double kEnsembleDelta1 = 0.50;
constexpr double kBaselineFactor = 2;
// Criterion 9
constexpr double kLogShareMin = 0.55;
constexpr double kLinearShareMax = 0.12;

struct Outcome {
  bool pass;
  std::string detail;
};

std::string fmt(double v) {
  std::ostringstream ss;
  ss.precision(4);
  ss << v;
  return ss.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Outcome gradients() {
  const auto t0 = std::chrono::steady_clock::now();
  double ops = 0;
  std::string worst_op;
  for (const auto& op : op_catalog()) {
    const double e = check_op(op, 20);
    if (e > ops) {
      ops = e;
      worst_op = op.name;
    }
  }

  UNet<double> net(tiny_unet_config(), 101);
  Rng r(102);
  const auto zd = random_tensor({2, 2, 4, 4}, r);
  const auto zx = random_tensor({2, 2, 4, 4}, r);
  const auto eps = random_vector(64, r);
  const std::vector<int> t{31, 707};
  const auto schedule = DiffusionConfig{}.schedule();
  const auto loss = [&] {
    ad::Tape<double> tape(false);
    return training_loss(tape, net, zd, zx, t, eps, schedule).item();
  };
  net.params().zero_grad();
  {
    ad::Tape<double> tape;
    tape.backward(training_loss(tape, net, zd, zx, t, eps, schedule));
  }
  auto params = net.params().params();
  double unet = 0;
  for (int k = 0; k < 10; ++k) {
    auto& p = params[static_cast<std::size_t>(r.uniform_int(static_cast<std::int64_t>(params.size())))];
    const auto i = static_cast<Eigen::Index>(r.uniform_int(p.tensor.size()));
    const double analytic = p.tensor.grad()(i);
    const double keep = p.tensor.value()(i);
    const double h = 1e-5;
    p.tensor.value()(i) = keep + h;
    const double up = loss();
    p.tensor.value()(i) = keep - h;
    const double down = loss();
    p.tensor.value()(i) = keep;
    const double numeric = (up - down) / (2 * h);
    unet = std::max(unet, std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-8}));
  }
  const double secs = seconds_since(t0);
  return {ops < kOpGradTol && unet < kUnetGradTol && secs < kGradSeconds,
          "op max rel err " + fmt(ops) + " (" + worst_op + "), U-Net loss max rel err " + fmt(unet) + ", " + fmt(secs) + " s"};
}

Outcome codec() {
  const DepthRange range;
  const bool ends = log_encode(range.d_min, range) == -1.0 && log_encode(range.d_max, range) == 1.0 &&
                    linear_encode(range.d_min, range) == -1.0 && linear_encode(range.d_max, range) == 1.0;
  double round_trip = 0, base = 0;
  for (int i = 0; i <= 10000; ++i) {
    const double d = range.d_min * std::pow(range.d_max / range.d_min, i / 10000.0);
    const double n = log_encode(d, range);
    round_trip = std::max(round_trip, std::abs(log_decode(n, range) - d) / d);
    const double n10 = normalize_clip(std::log10(d / range.d_min) / std::log10(range.d_max / range.d_min));
    base = std::max(base, std::abs(n - n10));
  }
  const double mid = std::abs(log_encode(std::sqrt(range.d_min * range.d_max), range));
  return {ends && round_trip < kRoundTripTol && mid < kMidpointTol && base < kBaseTol,
          std::string("endpoints ") + (ends ? "exact" : "inexact") + ", round-trip rel err " + fmt(round_trip) +
              ", midpoint " + fmt(mid) + ", base difference " + fmt(base)};
}

Outcome marginals() {
  const auto s = DiffusionConfig{}.schedule();
  const int T = s.steps();
  const double d0 = 0.8;
  double worst = 0;
  for (const int t : {1, T / 4, T / 2, 3 * T / 4, T - 1}) {
    Rng r = Rng(303).stream(static_cast<std::uint64_t>(t));
    double sum = 0, sq = 0;
    for (int i = 0; i < kMarginalDraws; ++i) {
      const double x = forward_noise(ad::Vector<double>::Constant(1, d0).eval(), t,
                                     ad::Vector<double>::Constant(1, r.normal()).eval(), s)(0);
      sum += x;
      sq += x * x;
    }
    const double n = kMarginalDraws;
    const double mean = sum / n;
    const double var = (sq - n * mean * mean) / (n - 1);
    const double want_mean = s.signal(t) * d0;
    const double want_var = 1 - s.alpha_bar(t);
    const double z_mean = std::abs(mean - want_mean) / std::sqrt(want_var / n);
    const double z_var = std::abs(var - want_var) / (want_var * std::sqrt(2.0 / (n - 1)));
    worst = std::max({worst, z_mean, z_var});
  }
  return {worst < kStdErrors, "largest deviation " + fmt(worst) + " standard errors over 5 timesteps"};
}

Outcome adapter() {
  UNetConfig cfg;
  cfg.cond_channels = 0;
  const UNet<float> base(cfg, 404);
  const auto& w = base.params().find("unet.in_conv.weight")->tensor;
  const auto& b = base.params().find("unet.in_conv.bias")->tensor;
  const auto wide = adapt_input_layer(w);
  Rng r(405);
  const ad::Tensor<float> z({2, cfg.latent_channels, 12, 12},
                            ad::Vector<float>::NullaryExpr(2 * cfg.latent_channels * 144, [&] { return float(r.normal()); }));
  ad::Tape<float> tape(false);
  const auto single = ad::conv2d(tape, z, w, b, 1, 1);
  const auto doubled = ad::conv2d(tape, ad::concat_channels(tape, z, z), wide, b, 1, 1);
  const float err = (single.value() - doubled.value()).cwiseAbs().maxCoeff();

  const int o = w.dim(0), c = w.dim(1), taps = w.dim(2) * w.dim(3);
  bool conserved = true;
  for (int k = 0; k < o; ++k) {
    for (int p = 0; p < taps; ++p) {
      float orig = 0, adapted = 0;
      for (int ch = 0; ch < c; ++ch) {
        orig += w.value()((k * c + ch) * taps + p);
        adapted += wide.value()((k * 2 * c + ch) * taps + p) + wide.value()((k * 2 * c + c + ch) * taps + p);
      }
      conserved = conserved && orig == adapted;
    }
  }
  return {err < kAdapterTol && conserved,
          "max-abs " + fmt(err) + " at f32, channel sums " + (conserved ? "conserved exactly" : "not conserved")};
}

Outcome interchange() {
  const auto s = DiffusionConfig{}.schedule();
  Rng r(505);
  const auto d0 = random_vector(4 * 12 * 12, r, -2, 2);
  const ad::Vector<double> eps = ad::Vector<double>::NullaryExpr(d0.size(), [&] { return r.normal(); });
  double recover = 0, one_step = 0;
  for (int t = 0; t < s.steps(); t += 37) {
    const auto dt = forward_noise(d0, t, eps, s);
    const auto v = v_target(d0, eps, t, s);
    recover = std::max({recover, (x0_from_v(dt, v, t, s) - d0).cwiseAbs().maxCoeff(),
                        (eps_from_v(dt, v, t, s) - eps).cwiseAbs().maxCoeff()});
    if (t > 0) {
      for (const auto obj : {Objective::epsilon, Objective::v}) {
        const auto out = objective_target(obj, d0, eps, t, s);
        one_step = std::max(one_step, (ddim_step(dt, out, t, 0, s, obj) - d0).cwiseAbs().maxCoeff());
      }
    }
  }

  // Oracle denoiser: answers with the exact target for the known clean latent.
  const ad::Vector<double> clean = random_vector(4 * 12 * 12, r, -2.5, 2.5);
  const auto cond = ad::Tensor<double>::zeros({1, 4, 12, 12});
  double chain = 0;
  for (const auto obj : {Objective::epsilon, Objective::v}) {
    DiffusionConfig cfg;
    cfg.objective = obj;
    const auto oracle = [&](const ad::Tensor<double>& z, std::span<const int> ts) {
      const int t = ts[0];
      const ad::Vector<double> zt = z.value().head(clean.size());
      const ad::Vector<double> e = (zt - s.signal(t) * clean) / s.noise(t);
      return ad::Tensor<double>({1, 4, 12, 12}, objective_target(obj, clean, e, t, s));
    };
    chain = std::max(chain, (ddim_sample<double>(oracle, cond, 4, cfg, s, 506).value() - clean).cwiseAbs().maxCoeff());
  }
  return {recover < kInterchangeTol && one_step < kInterchangeTol && chain < kOracleChainTol,
          "v/eps recovery " + fmt(recover) + ", one-step oracle " + fmt(one_step) + ", 50-step oracle chain " + fmt(chain) +
              " (max-abs, f64)"};
}

Outcome accumulation() {
  const auto data = random_latents<double>(8, 2, 4, 4, 606);
  UNet<double> big(tiny_unet_config(), 607), acc(tiny_unet_config(), 607);
  TrainConfig one_cfg;
  one_cfg.micro_batch = 4;
  one_cfg.accumulation = 1;
  one_cfg.adam.lr = 1e-3;
  TrainConfig two_cfg = one_cfg;
  two_cfg.micro_batch = 2;
  two_cfg.accumulation = 2;
  DiffusionTrainer<double> one(big, DiffusionConfig{}, one_cfg, 608);
  DiffusionTrainer<double> two(acc, DiffusionConfig{}, two_cfg, 608);
  one.step(data);
  two.step(data);
  double worst = 0;
  for (std::size_t i = 0; i < big.params().params().size(); ++i) {
    const auto& a = big.params().params()[i].tensor.value();
    const auto& b = acc.params().params()[i].tensor.value();
    worst = std::max(worst, (a - b).norm() / std::max(a.norm(), 1e-300));
  }
  return {worst < kAccumulationTol, "max relative parameter difference " + fmt(worst) + " at f64"};
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

/// Runs the CLI as a separate process when its path is known, in-process otherwise.
int run(const std::vector<std::string>& args) {
  if (const char* exe = std::getenv("DEPTHDIFF_CLI")) {
    std::string cmd = exe;
    for (const auto& a : args) cmd += " '" + a + "'";
    cmd += " > /dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  }
  std::vector<const char*> argv{"depthdiff"};
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream sink;
  return run_cli(static_cast<int>(argv.size()), argv.data(), sink, sink);
}

bool same_tree(const fs::path& a, const fs::path& b) {
  std::size_t n = 0;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file() || e.path().extension() == ".log") continue;
    const auto other = b / fs::relative(e.path(), a);
    if (!fs::exists(other) || slurp(e.path()) != slurp(other)) return false;
    ++n;
  }
  return n > 0;
}

Outcome determinism() {
  const auto dir = fs::temp_directory_path() / "depthdiff_acceptance_determinism";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const auto cfg = (dir / "run.cfg").string();
  std::ofstream(cfg) << "seed = 11\ndata.count = 8\ndata.height = 16\ndata.width = 16\n"
                        "vae.latent_channels = 2\nvae.downsample_factor = 2\nvae.base_width = 8\nvae.norm_groups = 4\n"
                        "unet.base_width = 8\nunet.depth_levels = 2\nunet.res_blocks = 1\nunet.time_embed_dim = 16\n"
                        "unet.norm_groups = 4\ndiffusion.ddim_steps = 5\nensemble.size = 3\n"
                        "train.image_vae.iterations = 4\ntrain.image_vae.micro_batch = 2\n"
                        "train.depth_vae.iterations = 4\ntrain.depth_vae.micro_batch = 2\n"
                        "train.unet.iterations = 4\ntrain.unet.micro_batch = 2\ntrain.unet.accumulation = 2\n";
  const auto d = dir.string();
  bool ok = run({"gen-data", "--config", cfg, "--out", d + "/data_a"}) == 0 &&
            run({"gen-data", "--config", cfg, "--out", d + "/data_b"}) == 0;
  const bool data_same = ok && same_tree(dir / "data_a", dir / "data_b");
  ok = ok && run({"train-vae", d + "/data_a", "--stage", "image", "--config", cfg, "--out", d}) == 0 &&
       run({"train-vae", d + "/data_a", "--stage", "depth", "--config", cfg, "--out", d}) == 0 &&
       run({"train-unet", d + "/data_a", "--config", cfg, "--out", d}) == 0 &&
       run({"infer", d + "/data_a", "--config", cfg, "--ckpt-dir", d, "--out", d + "/pred_a"}) == 0 &&
       run({"infer", d + "/data_a", "--config", cfg, "--ckpt-dir", d, "--out", d + "/pred_b"}) == 0;
  const bool infer_same = ok && same_tree(dir / "pred_a", dir / "pred_b");
  return {ok && data_same && infer_same, std::string(ok ? "commands succeeded" : "a command failed") + ", gen-data " +
                                             (data_same ? "bit-identical" : "differs") + ", infer " +
                                             (infer_same ? "bit-identical" : "differs")};
}

Outcome desk() {
  const DeskConfig cfg;
  const auto res = run_desk_experiment(cfg, std::cout);
  const bool pass = res.seconds <= kDeskSeconds && res.depth_vae_roundtrip_abs_rel < kRoundTripAbsRel &&
                    res.ensemble_abs_rel <= kEnsembleAbsRel && res.ensemble_delta1 >= kEnsembleDelta1 &&
                    res.ensemble_abs_rel * kBaselineFactor <= res.baseline_abs_rel &&
                    res.ensemble_abs_rel <= res.member_abs_rel;
  return {pass, "round-trip AbsRel " + fmt(res.depth_vae_roundtrip_abs_rel) + ", ensemble AbsRel " + fmt(res.ensemble_abs_rel) +
                    " delta1 " + fmt(res.ensemble_delta1) + ", member AbsRel " + fmt(res.member_abs_rel) +
                    ", constant baseline AbsRel " + fmt(res.baseline_abs_rel) + ", denoiser loss " + fmt(res.initial_loss) +
                    " -> " + fmt(res.final_loss) + ", " + fmt(res.seconds / 60) + " min"};
}

Outcome indoor_share() {
  const DepthRange range;
  const double lg = encoded_interval_share(0.5, 10.0, range, DepthEncoding::log);
  const double lin = encoded_interval_share(0.5, 10.0, range, DepthEncoding::linear);
  const bool closed = std::abs(lg - std::log(20.0) / std::log(160.0)) < 1e-12 && std::abs(lin - 9.5 / 79.5) < 1e-12;
  return {lg >= kLogShareMin && lin <= kLinearShareMax && closed,
          "log share " + fmt(lg) + ", linear share " + fmt(lin) + (closed ? ", matching the closed forms" : ", closed forms differ")};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"depthdiff acceptance criteria"};
  int only = 0;
  app.add_option("--only", only, "Run a single criterion (1-9)")->check(CLI::Range(1, 9));
  CLI11_PARSE(app, argc, argv);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient correctness", gradients},   {"codec laws", codec},
      {"forward-process marginals", marginals}, {"adapter identity", adapter},
      {"v/eps interchange and DDIM closure", interchange}, {"accumulation equivalence", accumulation},
      {"determinism", determinism},          {"desk end-to-end", desk},
      {"indoor share", indoor_share}};

  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (only != 0 && only != id) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    std::cout << "criterion " << id << " (" << criteria[i].first << "): " << (o.pass ? "PASS" : "FAIL") << " - " << o.detail
              << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
