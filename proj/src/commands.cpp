#include "depthdiff/commands.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>

#include "depthdiff/checkpoint.hpp"
#include "depthdiff/config.hpp"
#include "depthdiff/dataset.hpp"
#include "depthdiff/ensemble.hpp"
#include "depthdiff/image_io.hpp"
#include "depthdiff/metrics.hpp"
#include "depthdiff/pipeline.hpp"

namespace fs = std::filesystem;

namespace depthdiff {

namespace {

struct CommonOptions {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  std::optional<std::string> precision;
};

struct Options {
  CommonOptions common;
  std::optional<int> n;
  std::string stage;
  std::string resume;
  std::string init;
  std::string ckpt_dir;
  std::string regime;
  std::string data_dir;
  std::string input;
  std::string pred_dir;
  std::string gt_dir;
};

RunConfig resolve_config(const CommonOptions& o) {
  RunConfig cfg = o.config_path.empty() ? RunConfig{} : RunConfig::load(o.config_path);
  if (o.seed) cfg.set("seed", std::to_string(*o.seed));
  if (o.precision) cfg.set("precision", *o.precision);
  cfg.validate();
  return cfg;
}

void print_config(std::ostream& out, const RunConfig& cfg) {
  out << "# resolved config\n" << cfg.canonical() << "config_hash=" << hash_hex(cfg.hash()) << "\n" << std::flush;
}

fs::path ensure_dir(const std::string& dir) {
  if (dir.empty()) throw UsageError("--out is required");
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory '" + dir + "': " + ec.message());
  return fs::path(dir);
}

std::ofstream open_log(const fs::path& path, bool append) {
  std::ofstream os(path, append ? std::ios::app : std::ios::trunc);
  if (!os) throw IoError("cannot open log '" + path.string() + "'");
  return os;
}

/// Writes each line to both streams.
class TeeBuf : public std::streambuf {
 public:
  TeeBuf(std::streambuf* a, std::streambuf* b) : a_(a), b_(b) {}

 protected:
  int overflow(int c) override {
    if (c == EOF) return !EOF;
    const bool ok = a_->sputc(static_cast<char>(c)) != EOF && b_->sputc(static_cast<char>(c)) != EOF;
    return ok ? c : EOF;
  }
  int sync() override { return (a_->pubsync() == 0 && b_->pubsync() == 0) ? 0 : -1; }

 private:
  std::streambuf* a_;
  std::streambuf* b_;
};

std::uint64_t init_seed(const RunConfig& cfg, const char* what) { return Rng(cfg.seed()).stream(what).next_u64(); }

std::uint64_t unet_hash(const RunConfig& cfg) {
  return cfg.hash_of({"vae.", "unet.", "diffusion.", "depth.", "data.height", "data.width"});
}

// Checkpoint <-> model plumbing.

template <typename Scalar>
Vae<Scalar> load_vae(const fs::path& path, const RunConfig& cfg, VaeStage stage, double* scale) {
  const auto ckpt = read_checkpoint(path);
  const std::string kind = "vae_" + to_string(stage);
  if (ckpt.kind != kind) throw ConfigError("'" + path.string() + "' holds a " + ckpt.kind + " checkpoint, expected " + kind);
  if (ckpt.config_hash != cfg.vae_hash()) {
    throw ConfigError("'" + path.string() + "' was trained with VAE config hash " + hash_hex(ckpt.config_hash) +
                      ", current config has " + hash_hex(cfg.vae_hash()));
  }
  Vae<Scalar> vae(cfg.vae(), init_seed(cfg, "init/vae"));
  load_parameters(ckpt, vae.params(), false);
  if (scale != nullptr) {
    if (!ckpt.meta.contains("latent_scale")) throw ConfigError("'" + path.string() + "' has no latent scale (training incomplete)");
    *scale = ckpt.meta.at("latent_scale").get<double>();
  }
  return vae;
}

template <typename Scalar>
struct Models {
  Vae<Scalar> image_vae;
  Vae<Scalar> depth_vae;
  UNet<Scalar> unet;
  double image_scale;
  double depth_scale;

  DepthModel<Scalar> view(const RunConfig& cfg) const {
    return DepthModel<Scalar>{image_vae, depth_vae, unet, image_scale, depth_scale, cfg.depth_range(), cfg.diffusion()};
  }
};

template <typename Scalar>
Models<Scalar> load_models(const fs::path& dir, const RunConfig& cfg) {
  double si = 1, sd = 1;
  auto iv = load_vae<Scalar>(dir / "vae_image.ckpt", cfg, VaeStage::image, &si);
  auto dv = load_vae<Scalar>(dir / "vae_depth.ckpt", cfg, VaeStage::depth, &sd);
  const auto path = dir / "unet.ckpt";
  const auto ckpt = read_checkpoint(path);
  if (ckpt.kind != "unet") throw ConfigError("'" + path.string() + "' holds a " + ckpt.kind + " checkpoint, expected unet");
  if (ckpt.config_hash != unet_hash(cfg)) {
    throw ConfigError("'" + path.string() + "' was trained with config hash " + hash_hex(ckpt.config_hash) +
                      ", current config has " + hash_hex(unet_hash(cfg)));
  }
  UNet<Scalar> unet(cfg.unet(), init_seed(cfg, "init/unet"));
  load_parameters(ckpt, unet.params(), false);
  return Models<Scalar>{std::move(iv), std::move(dv), std::move(unet), si, sd};
}

// Commands.

int cmd_gen_data(const Options& o, std::ostream& out) {
  RunConfig cfg = resolve_config(o.common);
  if (o.n) cfg.set("data.count", std::to_string(*o.n));
  if (!o.regime.empty()) cfg.set("data.regime", o.regime);
  print_config(out, cfg);
  const auto dir = ensure_dir(o.common.out_dir);
  const auto sg = cfg.scene_gen();
  write_dataset(dir, sg, cfg.seed(), cfg.hash());
  out << "wrote " << sg.count << " scenes to " << dir.string() << "\n";
  return kExitOk;
}

template <typename Scalar>
int train_vae(const Options& o, const RunConfig& cfg, std::ostream& out) {
  const VaeStage stage = vae_stage_from_string(o.stage);
  const auto dir = ensure_dir(o.common.out_dir);
  const auto samples = load_dataset(o.data_dir);
  const auto range = cfg.depth_range();
  const auto data = vae_dataset<Scalar>(samples, stage, range);
  cfg.vae().check_extent(data.height, data.width);

  const std::string section = stage == VaeStage::image ? "image_vae" : "depth_vae";
  const auto tc = cfg.train(section);
  Vae<Scalar> vae(cfg.vae(), init_seed(cfg, "init/vae"));
  VaeTrainer<Scalar> trainer(vae, tc, cfg.seed(), to_string(stage));
  nlohmann::json meta{{"stage", to_string(stage)}};

  if (stage == VaeStage::depth) {
    fs::path init = o.init.empty() ? dir / "vae_image.ckpt" : fs::path(o.init);
    if (o.resume.empty() && !fs::exists(init)) {
      throw ConfigError("depth stage needs the image-VAE checkpoint as init (--init PATH), '" + init.string() +
                        "' does not exist");
    }
    if (o.resume.empty()) {
      const auto source = load_vae<Scalar>(init, cfg, VaeStage::image, nullptr);
      vae.params().copy_values_from(source.params());
      const auto h = vae.params().value_hash();
      if (h != source.params().value_hash()) throw IntegrityError("depth VAE init does not match the image VAE");
      out << "depth VAE initialized from " << init.string() << " (parameter hash " << hash_hex(h) << ")\n";
      meta["init_parameter_hash"] = hash_hex(h);
    }
  }
  if (!o.resume.empty()) {
    const auto ckpt = read_checkpoint(o.resume);
    if (ckpt.kind != "vae_" + to_string(stage) || ckpt.config_hash != cfg.vae_hash()) {
      throw ConfigError("resume checkpoint '" + o.resume + "' does not match this stage and config");
    }
    load_parameters(ckpt, vae.params(), true);
    trainer.set_steps_done(ckpt.step);
    meta = ckpt.meta;
    meta.erase("latent_scale");
    out << "resumed from " << o.resume << " at step " << ckpt.step << "\n";
  }

  const auto ckpt_path = dir / ("vae_" + to_string(stage) + ".ckpt");
  const auto save = [&](std::int64_t step, const nlohmann::json& m) {
    Checkpoint c{"vae_" + to_string(stage), cfg.vae_hash(), step, m, {}};
    store_parameters(c, vae.params(), true);
    write_checkpoint(ckpt_path, c);
  };
  auto log_file = open_log(dir / ("vae_" + to_string(stage) + "_loss.log"), !o.resume.empty());
  TeeBuf tee(out.rdbuf(), log_file.rdbuf());
  std::ostream log(&tee);
  train_loop(trainer, data, tc, &log, [&](std::int64_t s) { save(s, meta); });

  const auto latents = encode_latents(vae, data, false, false, 0);
  meta["latent_scale"] = latent_scale<Scalar>(latents);
  save(trainer.steps_done(), meta);
  out << "latent_scale=" << meta["latent_scale"].get<double>() << "\nwrote " << ckpt_path.string() << "\n";
  return kExitOk;
}

template <typename Scalar>
int train_unet(const Options& o, const RunConfig& cfg, std::ostream& out) {
  const auto dir = ensure_dir(o.common.out_dir);
  const fs::path ckpt_dir = o.ckpt_dir.empty() ? dir : fs::path(o.ckpt_dir);
  double si = 1, sd = 1;
  const auto iv = load_vae<Scalar>(ckpt_dir / "vae_image.ckpt", cfg, VaeStage::image, &si);
  const auto dv = load_vae<Scalar>(ckpt_dir / "vae_depth.ckpt", cfg, VaeStage::depth, &sd);
  const auto samples = load_dataset(o.data_dir);
  const auto range = cfg.depth_range();
  const auto latents = latent_dataset(iv, dv, vae_dataset<Scalar>(samples, VaeStage::image, range),
                                      vae_dataset<Scalar>(samples, VaeStage::depth, range), si, sd, cfg.seed());

  const auto tc = cfg.train("unet");
  UNet<Scalar> unet(cfg.unet(), init_seed(cfg, "init/unet"));
  DiffusionTrainer<Scalar> trainer(unet, cfg.diffusion(), tc, cfg.seed());
  if (!o.resume.empty()) {
    const auto ckpt = read_checkpoint(o.resume);
    if (ckpt.kind != "unet" || ckpt.config_hash != unet_hash(cfg)) {
      throw ConfigError("resume checkpoint '" + o.resume + "' does not match this config");
    }
    load_parameters(ckpt, unet.params(), true);
    trainer.set_steps_done(ckpt.step);
    out << "resumed from " << o.resume << " at step " << ckpt.step << "\n";
  }
  const auto ckpt_path = dir / "unet.ckpt";
  const nlohmann::json meta{{"image_scale", si}, {"depth_scale", sd}};
  auto log_file = open_log(dir / "unet_loss.log", !o.resume.empty());
  TeeBuf tee(out.rdbuf(), log_file.rdbuf());
  std::ostream log(&tee);
  train_loop(trainer, latents, tc, &log, [&](std::int64_t s) {
    Checkpoint c{"unet", unet_hash(cfg), s, meta, {}};
    store_parameters(c, unet.params(), true);
    write_checkpoint(ckpt_path, c);
  });
  out << "wrote " << ckpt_path.string() << "\n";
  return kExitOk;
}

/// Largest centered crop whose extents are multiples of `stride`.
RgbImage center_crop(const RgbImage& img, int stride, std::ostream& err, const std::string& name) {
  const int h = img.height() / stride * stride, w = img.width() / stride * stride;
  if (h == img.height() && w == img.width()) return img;
  if (h == 0 || w == 0) throw DataError(name + ": image smaller than the model stride " + std::to_string(stride));
  err << "warning: " << name << ": " << img.height() << "x" << img.width() << " not divisible by " << stride
      << ", center-cropping to " << h << "x" << w << "\n";
  RgbImage out;
  const int r0 = (img.height() - h) / 2, c0 = (img.width() - w) / 2;
  for (int c = 0; c < 3; ++c) out.channels[c] = img.channels[c].block(r0, c0, h, w);
  return out;
}

/// Log-depth color ramp for previews.
RgbImage colorize(const Plane& depth, const DepthRange& range) {
  static constexpr double stops[5][3] = {
      {0.99, 0.91, 0.15}, {0.37, 0.79, 0.38}, {0.13, 0.57, 0.55}, {0.23, 0.32, 0.55}, {0.27, 0.00, 0.33}};
  RgbImage img = RgbImage::zeros(static_cast<int>(depth.rows()), static_cast<int>(depth.cols()));
  for (Eigen::Index i = 0; i < depth.size(); ++i) {
    const double t = 0.5 * (log_encode(std::clamp(depth.data()[i], range.d_min, range.d_max), range) + 1.0) * 4.0;
    const int k = std::min(static_cast<int>(t), 3);
    const double f = t - k;
    for (int c = 0; c < 3; ++c) img.channels[c].data()[i] = stops[k][c] + f * (stops[k + 1][c] - stops[k][c]);
  }
  return img;
}

template <typename Scalar>
int infer(const Options& o, const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  const int n = o.n.value_or(static_cast<int>(cfg.get_int("ensemble.size")));
  if (n < 1) throw UsageError("--n must be >= 1");
  const auto dir = ensure_dir(o.common.out_dir);
  const fs::path ckpt_dir = o.ckpt_dir.empty() ? dir : fs::path(o.ckpt_dir);
  const auto models = load_models<Scalar>(ckpt_dir, cfg);
  const auto view = models.view(cfg);

  std::vector<fs::path> inputs;
  if (fs::is_directory(o.input)) {
    for (const auto& e : fs::directory_iterator(o.input)) {
      if (e.path().extension() == ".ppm") inputs.push_back(e.path());
    }
    std::sort(inputs.begin(), inputs.end());
  } else {
    inputs.emplace_back(o.input);
  }
  if (inputs.empty()) throw DataError("no .ppm images found in '" + o.input + "'");
  fs::create_directories(dir / "uncertainty");
  fs::create_directories(dir / "preview");
  const int stride = cfg.vae().downsample_factor << (cfg.unet().depth_levels - 1);
  for (const auto& path : inputs) {
    const auto stem = path.stem().string();
    const auto img = center_crop(read_ppm(path), stride, err, stem);
    const auto r = infer_ensemble(view, img, cfg.seed(), n, cfg.aggregation());
    write_pfm(dir / (stem + ".pfm"), r.depth);
    write_pfm(dir / "uncertainty" / (stem + ".pfm"), r.uncertainty);
    write_ppm(dir / "preview" / (stem + ".ppm"), colorize(r.depth.values, cfg.depth_range()));
    out << stem << " depth_min=" << r.depth.values.minCoeff() << " depth_max=" << r.depth.values.maxCoeff()
        << " mean_uncertainty=" << r.uncertainty.mean() << "\n";
  }
  return kExitOk;
}

std::map<std::string, fs::path> pfm_files(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError("'" + dir.string() + "' is not a directory");
  std::map<std::string, fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".pfm") out[e.path().stem().string()] = e.path();
  }
  return out;
}

nlohmann::json report_json(const MetricsReport& r) {
  return {{"abs_rel", r.abs_rel}, {"rmse", r.rmse},     {"delta1", r.delta1},
          {"delta2", r.delta2},   {"delta3", r.delta3}, {"valid_pixel_count", r.valid_pixel_count}};
}

void report_text(std::ostream& os, const std::string& prefix, const MetricsReport& r) {
  char buf[512];
  std::snprintf(buf, sizeof buf,
                "%s.abs_rel=%.9g\n%s.rmse=%.9g\n%s.delta1=%.9g\n%s.delta2=%.9g\n%s.delta3=%.9g\n%s.valid_pixel_count=%lld\n",
                prefix.c_str(), r.abs_rel, prefix.c_str(), r.rmse, prefix.c_str(), r.delta1, prefix.c_str(), r.delta2,
                prefix.c_str(), r.delta3, prefix.c_str(), static_cast<long long>(r.valid_pixel_count));
  os << buf;
}

int cmd_eval(const Options& o, std::ostream& out, std::ostream& err) {
  const RunConfig cfg = resolve_config(o.common);
  print_config(out, cfg);
  const auto pred = pfm_files(o.pred_dir);
  const auto gt = pfm_files(o.gt_dir);
  std::vector<std::string> unmatched;
  for (const auto& [k, p] : pred) {
    if (gt.count(k) == 0) unmatched.push_back(p.string());
  }
  for (const auto& [k, p] : gt) {
    if (pred.count(k) == 0) unmatched.push_back(p.string());
  }
  if (!unmatched.empty()) {
    for (const auto& u : unmatched) err << "unmatched: " << u << "\n";
    throw DataError(std::to_string(unmatched.size()) + " unmatched file(s)");
  }
  if (gt.empty()) throw DataError("no .pfm files to evaluate");
  const auto dir = ensure_dir(o.common.out_dir);
  const double d_max = cfg.depth_range().d_max;
  std::vector<MetricsReport> reports;
  nlohmann::json j{{"per_image", nlohmann::json::object()}};
  std::ostringstream text;
  for (const auto& [k, gpath] : gt) {
    const auto r = evaluate(read_pfm(pred.at(k)), read_pfm(gpath), d_max);
    reports.push_back(r);
    j["per_image"][k] = report_json(r);
    report_text(text, k, r);
  }
  const auto mean = mean_report(reports);
  j["mean"] = report_json(mean);
  j["count"] = reports.size();
  j["config_hash"] = hash_hex(cfg.hash());
  report_text(text, "mean", mean);
  std::ofstream(dir / "metrics.txt") << text.str();
  std::ofstream(dir / "metrics.json") << j.dump(2) << "\n";
  report_text(out, "mean", mean);
  return kExitOk;
}

template <template <typename> class Fn>
int dispatch(Precision p, const Options& o, const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  return p == Precision::f64 ? Fn<double>::run(o, cfg, out, err) : Fn<float>::run(o, cfg, out, err);
}

template <typename S>
struct TrainVaeFn {
  static int run(const Options& o, const RunConfig& c, std::ostream& out, std::ostream&) { return train_vae<S>(o, c, out); }
};
template <typename S>
struct TrainUnetFn {
  static int run(const Options& o, const RunConfig& c, std::ostream& out, std::ostream&) { return train_unet<S>(o, c, out); }
};
template <typename S>
struct InferFn {
  static int run(const Options& o, const RunConfig& c, std::ostream& out, std::ostream& err) {
    return infer<S>(o, c, out, err);
  }
};

void add_common(CLI::App* app, CommonOptions& c) {
  app->add_option("--config", c.config_path, "Config file (key=value)");
  app->add_option("--seed", c.seed, "Seed override (u64)");
  app->add_option("--out", c.out_dir, "Output directory");
  app->add_option("--precision", c.precision, "f32 or f64")->check(CLI::IsMember({"f32", "f64"}));
}

}  // namespace

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const IntegrityError*>(&e) != nullptr) return kExitIntegrity;
  if (dynamic_cast<const DataError*>(&e) != nullptr || dynamic_cast<const DimensionError*>(&e) != nullptr ||
      dynamic_cast<const NumericError*>(&e) != nullptr) {
    return kExitData;
  }
  if (dynamic_cast<const ConfigError*>(&e) != nullptr || dynamic_cast<const UsageError*>(&e) != nullptr ||
      dynamic_cast<const IoError*>(&e) != nullptr) {
    return kExitUsage;
  }
  return kExitFailure;
}

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"depthdiff: metric depth from a single image by latent diffusion"};
  app.require_subcommand(1);
  Options o;

  auto* gen = app.add_subcommand("gen-data", "Render procedural RGB-D scenes");
  add_common(gen, o.common);
  gen->add_option("--n", o.n, "Scene count (overrides data.count)");
  gen->add_option("--regime", o.regime, "indoor, outdoor or mixed")->check(CLI::IsMember({"indoor", "outdoor", "mixed"}));

  auto* tv = app.add_subcommand("train-vae", "Train the image VAE or fine-tune the depth VAE");
  add_common(tv, o.common);
  tv->add_option("data", o.data_dir, "Dataset directory")->required();
  tv->add_option("--stage", o.stage, "image or depth")->required()->check(CLI::IsMember({"image", "depth"}));
  tv->add_option("--init", o.init, "Image-VAE checkpoint for the depth stage (default OUT/vae_image.ckpt)");
  tv->add_option("--resume", o.resume, "Checkpoint to resume from");

  auto* tu = app.add_subcommand("train-unet", "Train the latent denoiser");
  add_common(tu, o.common);
  tu->add_option("data", o.data_dir, "Dataset directory")->required();
  tu->add_option("--ckpt-dir", o.ckpt_dir, "Directory holding the VAE checkpoints (default OUT)");
  tu->add_option("--resume", o.resume, "Checkpoint to resume from");

  auto* inf = app.add_subcommand("infer", "Predict metric depth with an ensemble");
  add_common(inf, o.common);
  inf->add_option("input", o.input, "PPM image or directory of PPM images")->required();
  inf->add_option("--ckpt-dir", o.ckpt_dir, "Directory holding the checkpoints (default OUT)");
  inf->add_option("--n", o.n, "Ensemble size (overrides ensemble.size)");

  auto* ev = app.add_subcommand("eval", "Score predicted depth against ground truth");
  add_common(ev, o.common);
  ev->add_option("pred", o.pred_dir, "Directory of predicted PFM files")->required();
  ev->add_option("gt", o.gt_dir, "Directory of ground-truth PFM files")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(o, out);
    if (ev->parsed()) return cmd_eval(o, out, err);
    const RunConfig cfg = resolve_config(o.common);
    if (inf->parsed() && o.n) {
      // Report the effective ensemble size in the printed config.
      RunConfig shown = cfg;
      shown.set("ensemble.size", std::to_string(*o.n));
      print_config(out, shown);
    } else {
      print_config(out, cfg);
    }
    if (tv->parsed()) return dispatch<TrainVaeFn>(cfg.precision(), o, cfg, out, err);
    if (tu->parsed()) return dispatch<TrainUnetFn>(cfg.precision(), o, cfg, out, err);
    return dispatch<InferFn>(cfg.precision(), o, cfg, out, err);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return exit_code_for(e);
  }
}

}  // namespace depthdiff
