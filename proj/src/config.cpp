#include "depthdiff/config.hpp"

#include <algorithm>
#include <cerrno>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

namespace depthdiff {

namespace {

enum class Kind { integer, unsigned64, real, boolean, choice };

struct KeySpec {
  std::string name;
  Kind kind;
  std::string fallback;
  std::vector<std::string> choices = {};
};

std::vector<KeySpec> train_keys(const std::string& section, const char* iterations, const char* micro_batch,
                                const char* accumulation, const char* lr) {
  const std::string p = "train." + section + ".";
  return {{p + "iterations", Kind::integer, iterations},
          {p + "micro_batch", Kind::integer, micro_batch},
          {p + "accumulation", Kind::integer, accumulation},
          {p + "lr", Kind::real, lr},
          {p + "lr_schedule", Kind::choice, "constant", {"constant", "cosine"}},
          {p + "hflip", Kind::boolean, "true"},
          {p + "log_every", Kind::integer, "100"},
          {p + "checkpoint_every", Kind::integer, "1000"}};
}

const std::vector<KeySpec>& key_table() {
  static const std::vector<KeySpec> table = [] {
    std::vector<KeySpec> t = {
        {"seed", Kind::unsigned64, "0"},
        {"precision", Kind::choice, "f32", {"f32", "f64"}},

        {"data.count", Kind::integer, "2000"},
        {"data.height", Kind::integer, "48"},
        {"data.width", Kind::integer, "48"},
        {"data.hfov_deg", Kind::real, "60"},
        {"data.regime", Kind::choice, "mixed", {"indoor", "outdoor", "mixed"}},
        {"data.indoor_fraction", Kind::real, "0.5"},
        {"data.holes", Kind::boolean, "false"},

        {"depth.d_min", Kind::real, "0.5"},
        {"depth.d_max", Kind::real, "80"},

        {"vae.latent_channels", Kind::integer, "4"},
        {"vae.downsample_factor", Kind::integer, "4"},
        {"vae.base_width", Kind::integer, "32"},
        {"vae.res_blocks", Kind::integer, "1"},
        {"vae.norm_groups", Kind::integer, "8"},
        {"vae.kl_weight", Kind::real, "1e-6"},
        {"vae.sample_latent", Kind::boolean, "false"},

        {"unet.base_width", Kind::integer, "64"},
        {"unet.depth_levels", Kind::integer, "3"},
        {"unet.res_blocks", Kind::integer, "2"},
        {"unet.time_embed_dim", Kind::integer, "128"},
        {"unet.norm_groups", Kind::integer, "8"},
        {"unet.objective", Kind::choice, "v", {"v", "epsilon"}},

        {"diffusion.train_steps", Kind::integer, "1000"},
        {"diffusion.beta_start", Kind::real, "1e-4"},
        {"diffusion.beta_end", Kind::real, "0.02"},
        {"diffusion.ddim_steps", Kind::integer, "50"},
        {"diffusion.clip_latent", Kind::real, "3"},

        {"ensemble.size", Kind::integer, "10"},
        {"ensemble.aggregation", Kind::choice, "median", {"median", "mean"}},
    };
    for (auto&& k : train_keys("image_vae", "4000", "8", "1", "2e-4")) t.push_back(k);
    for (auto&& k : train_keys("depth_vae", "2000", "8", "1", "1e-4")) t.push_back(k);
    for (auto&& k : train_keys("unet", "16000", "2", "16", "5e-5")) t.push_back(k);
    return t;
  }();
  return table;
}

const KeySpec& spec_of(const std::string& key) {
  for (const auto& k : key_table()) {
    if (key == k.name) return k;
  }
  throw ConfigError("unknown config key '" + key + "'");
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::string canonical_value(const KeySpec& k, const std::string& raw) {
  const auto bad = [&](const std::string& what) {
    return ConfigError("config key '" + k.name + "': " + what + ", got '" + raw + "'");
  };
  switch (k.kind) {
    case Kind::integer: {
      std::int64_t v = 0;
      const auto [p, ec] = std::from_chars(raw.data(), raw.data() + raw.size(), v);
      if (ec != std::errc{} || p != raw.data() + raw.size()) throw bad("expected an integer");
      return std::to_string(v);
    }
    case Kind::unsigned64: {
      std::uint64_t v = 0;
      const auto [p, ec] = std::from_chars(raw.data(), raw.data() + raw.size(), v);
      if (ec != std::errc{} || p != raw.data() + raw.size()) throw bad("expected an unsigned 64-bit integer");
      return std::to_string(v);
    }
    case Kind::real: {
      char* end = nullptr;
      errno = 0;
      const double v = std::strtod(raw.c_str(), &end);
      if (raw.empty() || end != raw.c_str() + raw.size() || errno != 0 || !std::isfinite(v)) {
        throw bad("expected a finite real number");
      }
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.17g", v);
      return buf;
    }
    case Kind::boolean:
      if (raw == "true" || raw == "1") return "true";
      if (raw == "false" || raw == "0") return "false";
      throw bad("expected true or false");
    case Kind::choice:
      if (std::find(k.choices.begin(), k.choices.end(), raw) == k.choices.end()) {
        std::string opts;
        for (const auto& c : k.choices) opts += (opts.empty() ? "" : "|") + c;
        throw bad("expected one of " + opts);
      }
      return raw;
  }
  throw bad("unsupported key kind");
}

}  // namespace

std::string to_string(Precision p) { return p == Precision::f32 ? "f32" : "f64"; }

Precision precision_from_string(const std::string& s) {
  if (s == "f32") return Precision::f32;
  if (s == "f64") return Precision::f64;
  throw ConfigError("unknown precision '" + s + "' (expected f32 or f64)");
}

void SceneGenConfig::validate() const {
  if (count < 0) throw ConfigError("data.count must be nonnegative");
  if (height <= 0 || width <= 0) throw ConfigError("data extents must be positive");
  if (!(hfov_deg > 0 && hfov_deg < 180)) throw ConfigError("data.hfov_deg must lie in (0, 180)");
  if (!(indoor_fraction >= 0 && indoor_fraction <= 1)) throw ConfigError("data.indoor_fraction must lie in [0, 1]");
}

RunConfig::RunConfig() {
  for (const auto& k : key_table()) values_[k.name] = canonical_value(k, k.fallback);
}

RunConfig RunConfig::parse(std::string_view text, const std::string& origin) {
  RunConfig cfg;
  std::set<std::string> seen;
  std::istringstream in{std::string(text)};
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    const std::string body = trim(std::string_view(line).substr(0, hash));
    if (body.empty()) continue;
    const auto eq = body.find('=');
    const std::string where = origin + ":" + std::to_string(lineno);
    if (eq == std::string::npos) throw ConfigError(where + ": expected key=value");
    const std::string key = trim(std::string_view(body).substr(0, eq));
    const std::string value = trim(std::string_view(body).substr(eq + 1));
    if (!seen.insert(key).second) throw ConfigError(where + ": duplicate key '" + key + "'");
    try {
      cfg.set(key, value);
    } catch (const ConfigError& e) {
      throw ConfigError(where + ": " + e.what());
    }
  }
  return cfg;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config '" + path.string() + "'");
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse(ss.str(), path.string());
}

void RunConfig::set(const std::string& key, const std::string& value) {
  values_[key] = canonical_value(spec_of(key), value);
}

const std::string& RunConfig::get(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
  return it->second;
}

std::int64_t RunConfig::get_int(const std::string& key) const { return std::stoll(get(key)); }
std::uint64_t RunConfig::get_u64(const std::string& key) const { return std::stoull(get(key)); }
double RunConfig::get_real(const std::string& key) const { return std::strtod(get(key).c_str(), nullptr); }
bool RunConfig::get_bool(const std::string& key) const { return get(key) == "true"; }

std::string RunConfig::canonical() const {
  std::string out;
  for (const auto& [k, v] : values_) out += k + "=" + v + "\n";
  return out;
}

std::uint64_t RunConfig::hash() const { return fnv1a(canonical()); }

std::uint64_t RunConfig::hash_of(const std::vector<std::string>& prefixes) const {
  std::string text;
  for (const auto& [k, v] : values_) {
    for (const auto& p : prefixes) {
      if (k.rfind(p, 0) == 0) {
        text += k + "=" + v + "\n";
        break;
      }
    }
  }
  return fnv1a(text);
}

DepthRange RunConfig::depth_range() const {
  DepthRange r{get_real("depth.d_min"), get_real("depth.d_max")};
  r.validate();
  return r;
}

SceneGenConfig RunConfig::scene_gen() const {
  SceneGenConfig s;
  s.count = static_cast<int>(get_int("data.count"));
  s.height = static_cast<int>(get_int("data.height"));
  s.width = static_cast<int>(get_int("data.width"));
  s.hfov_deg = get_real("data.hfov_deg");
  const auto& r = get("data.regime");
  s.regime = r == "indoor" ? RegimeMix::indoor : (r == "outdoor" ? RegimeMix::outdoor : RegimeMix::mixed);
  s.indoor_fraction = get_real("data.indoor_fraction");
  s.holes = get_bool("data.holes");
  s.validate();
  return s;
}

VaeConfig RunConfig::vae() const {
  VaeConfig v;
  v.latent_channels = static_cast<int>(get_int("vae.latent_channels"));
  v.downsample_factor = static_cast<int>(get_int("vae.downsample_factor"));
  v.base_width = static_cast<int>(get_int("vae.base_width"));
  v.res_blocks = static_cast<int>(get_int("vae.res_blocks"));
  v.norm_groups = static_cast<int>(get_int("vae.norm_groups"));
  v.kl_weight = get_real("vae.kl_weight");
  v.sample_latent = get_bool("vae.sample_latent");
  v.validate();
  return v;
}

UNetConfig RunConfig::unet() const {
  UNetConfig u;
  u.latent_channels = static_cast<int>(get_int("vae.latent_channels"));
  u.cond_channels = u.latent_channels;
  u.base_width = static_cast<int>(get_int("unet.base_width"));
  u.depth_levels = static_cast<int>(get_int("unet.depth_levels"));
  u.res_blocks = static_cast<int>(get_int("unet.res_blocks"));
  u.time_embed_dim = static_cast<int>(get_int("unet.time_embed_dim"));
  u.norm_groups = static_cast<int>(get_int("unet.norm_groups"));
  u.objective = objective_from_string(get("unet.objective"));
  u.validate();
  return u;
}

DiffusionConfig RunConfig::diffusion() const {
  DiffusionConfig d;
  d.train_steps = static_cast<int>(get_int("diffusion.train_steps"));
  d.beta_start = get_real("diffusion.beta_start");
  d.beta_end = get_real("diffusion.beta_end");
  d.objective = objective_from_string(get("unet.objective"));
  d.ddim_steps = static_cast<int>(get_int("diffusion.ddim_steps"));
  d.ensemble_size = static_cast<int>(get_int("ensemble.size"));
  d.clip_latent = get_real("diffusion.clip_latent");
  d.validate();
  return d;
}

TrainConfig RunConfig::train(const std::string& section) const {
  if (section != "image_vae" && section != "depth_vae" && section != "unet") {
    throw UsageError("unknown training section '" + section + "'");
  }
  const std::string p = "train." + section + ".";
  TrainConfig t;
  t.iterations = get_int(p + "iterations");
  t.micro_batch = static_cast<int>(get_int(p + "micro_batch"));
  t.accumulation = static_cast<int>(get_int(p + "accumulation"));
  t.adam.lr = get_real(p + "lr");
  t.lr_schedule = lr_schedule_from_string(get(p + "lr_schedule"));
  t.hflip = get_bool(p + "hflip");
  t.log_every = static_cast<int>(get_int(p + "log_every"));
  t.checkpoint_every = static_cast<int>(get_int(p + "checkpoint_every"));
  if (t.log_every < 1 || t.checkpoint_every < 1) throw ConfigError(p + "log_every and checkpoint_every must be >= 1");
  t.validate();
  return t;
}

void RunConfig::validate() const {
  (void)depth_range();
  (void)scene_gen();
  const auto v = vae();
  const auto u = unet();
  (void)diffusion();
  for (const char* s : {"image_vae", "depth_vae", "unet"}) (void)train(s);
  const auto sg = scene_gen();
  v.check_extent(sg.height, sg.width);
  const int stride = v.downsample_factor << (u.depth_levels - 1);
  if (sg.height % stride != 0 || sg.width % stride != 0) {
    throw ConfigError("data extent " + std::to_string(sg.height) + "x" + std::to_string(sg.width) +
                      " not divisible by vae.downsample_factor * 2^(unet.depth_levels-1) = " + std::to_string(stride));
  }
}

}  // namespace depthdiff
