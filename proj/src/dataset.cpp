#include "depthdiff/dataset.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include "depthdiff/checkpoint.hpp"
#include "depthdiff/image_io.hpp"
#include "depthdiff/rng.hpp"

namespace depthdiff {

namespace {

std::string scene_name(int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "scene_%05d", index);
  return buf;
}

}  // namespace

SceneSample generate_sample(const SceneGenConfig& cfg, std::uint64_t seed, int index) {
  const Rng r = Rng(seed).stream("gen").stream(static_cast<std::uint64_t>(index));
  Regime regime = Regime::indoor;
  switch (cfg.regime) {
    case RegimeMix::indoor: regime = Regime::indoor; break;
    case RegimeMix::outdoor: regime = Regime::outdoor; break;
    case RegimeMix::mixed: regime = r.stream("regime").uniform() < cfg.indoor_fraction ? Regime::indoor : Regime::outdoor; break;
  }
  const auto camera = cfg.camera();
  const auto spec = sample_scene(r.stream("scene").next_u64(), regime, camera, cfg.holes);
  auto rendered = render(spec, camera);
  return SceneSample{scene_name(index), regime, std::move(rendered.rgb), std::move(rendered.depth)};
}

std::vector<SceneSample> generate_samples(const SceneGenConfig& cfg, std::uint64_t seed) {
  std::vector<SceneSample> out;
  out.reserve(static_cast<std::size_t>(cfg.count));
  for (int i = 0; i < cfg.count; ++i) out.push_back(generate_sample(cfg, seed, i));
  return out;
}

void write_dataset(const std::filesystem::path& dir, const SceneGenConfig& cfg, std::uint64_t seed,
                   std::uint64_t config_hash) {
  cfg.validate();
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create '" + dir.string() + "': " + ec.message());
  std::ostringstream index;
  index << "# depthdiff dataset\nseed=" << seed << "\nconfig_hash=" << hash_hex(config_hash) << "\ncount=" << cfg.count
        << "\n";
  for (int i = 0; i < cfg.count; ++i) {
    const auto s = generate_sample(cfg, seed, i);
    write_ppm(dir / (s.name + ".ppm"), s.rgb);
    write_pfm(dir / (s.name + ".pfm"), s.depth);
    index << s.name << ' ' << to_string(s.regime) << ' ' << s.name << ".ppm " << s.name << ".pfm\n";
  }
  std::ofstream os(dir / "index.txt");
  if (!os) throw IoError("cannot write '" + (dir / "index.txt").string() + "'");
  os << index.str();
  if (!os) throw IoError("write failed for '" + (dir / "index.txt").string() + "'");
}

std::vector<SceneSample> load_dataset(const std::filesystem::path& dir) {
  const auto path = dir / "index.txt";
  std::ifstream is(path);
  if (!is) throw IoError("cannot open dataset index '" + path.string() + "'");
  std::vector<SceneSample> out;
  std::string line;
  long expected = -1;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (line.find('=') != std::string::npos) {
      if (line.rfind("count=", 0) == 0) expected = std::stol(line.substr(6));
      continue;
    }
    std::istringstream ls(line);
    std::string name, regime, rgb, depth;
    if (!(ls >> name >> regime >> rgb >> depth)) throw DataError("malformed index line in '" + path.string() + "': " + line);
    SceneSample s{name, regime_from_string(regime), read_ppm(dir / rgb), read_pfm(dir / depth)};
    if (s.rgb.height() != s.depth.height() || s.rgb.width() != s.depth.width()) {
      throw DataError("scene '" + name + "': RGB and depth extents differ");
    }
    out.push_back(std::move(s));
  }
  if (expected >= 0 && static_cast<long>(out.size()) != expected) {
    throw DataError("dataset index '" + path.string() + "' lists " + std::to_string(out.size()) + " pairs, expected " +
                    std::to_string(expected));
  }
  return out;
}

}  // namespace depthdiff
