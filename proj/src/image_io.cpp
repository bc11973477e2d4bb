#include "depthdiff/image_io.hpp"

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "depthdiff/errors.hpp"

namespace depthdiff {

namespace {

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open '" + path.string() + "' for writing");
  return os;
}

std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open '" + path.string() + "'");
  return is;
}

/// Next whitespace-delimited header token, skipping '#' comments.
std::string header_token(std::istream& is, const std::filesystem::path& path) {
  std::string tok;
  int ch;
  while ((ch = is.get()) != EOF) {
    if (ch == '#') {
      while ((ch = is.get()) != EOF && ch != '\n') {
      }
      continue;
    }
    if (std::isspace(ch)) {
      if (!tok.empty()) return tok;
      continue;
    }
    tok.push_back(static_cast<char>(ch));
  }
  if (tok.empty()) throw DataError("truncated header in '" + path.string() + "'");
  return tok;
}

int parse_extent(const std::string& tok, const std::filesystem::path& path) {
  try {
    const int v = std::stoi(tok);
    if (v <= 0) throw DataError("nonpositive extent");
    return v;
  } catch (const std::exception&) {
    throw DataError("bad image extent '" + tok + "' in '" + path.string() + "'");
  }
}

std::uint32_t to_le(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::big) return __builtin_bswap32(v);
  return v;
}

}  // namespace

void write_ppm(const std::filesystem::path& path, const RgbImage& img) {
  auto os = open_out(path);
  const int h = img.height(), w = img.width();
  os << "P6\n" << w << ' ' << h << "\n255\n";
  std::vector<unsigned char> buf(static_cast<std::size_t>(h) * w * 3);
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      for (int k = 0; k < 3; ++k) {
        const double v = std::clamp(img.channels[k](r, c), 0.0, 1.0);
        buf[(static_cast<std::size_t>(r) * w + c) * 3 + k] = static_cast<unsigned char>(std::lround(v * 255.0));
      }
    }
  }
  os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!os) throw IoError("write failed for '" + path.string() + "'");
}

RgbImage read_ppm(const std::filesystem::path& path) {
  auto is = open_in(path);
  if (header_token(is, path) != "P6") throw DataError("'" + path.string() + "' is not a binary PPM (P6)");
  const int w = parse_extent(header_token(is, path), path);
  const int h = parse_extent(header_token(is, path), path);
  if (header_token(is, path) != "255") throw DataError("'" + path.string() + "' must use maxval 255");
  std::vector<unsigned char> buf(static_cast<std::size_t>(h) * w * 3);
  is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (is.gcount() != static_cast<std::streamsize>(buf.size())) throw DataError("truncated pixel data in '" + path.string() + "'");
  RgbImage img = RgbImage::zeros(h, w);
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      for (int k = 0; k < 3; ++k) img.channels[k](r, c) = buf[(static_cast<std::size_t>(r) * w + c) * 3 + k] / 255.0;
    }
  }
  return img;
}

void write_pfm(const std::filesystem::path& path, const Plane& values) {
  auto os = open_out(path);
  const int h = static_cast<int>(values.rows()), w = static_cast<int>(values.cols());
  os << "Pf\n" << w << ' ' << h << "\n-1.0\n";
  std::vector<std::uint32_t> buf(static_cast<std::size_t>(h) * w);
  for (int r = 0; r < h; ++r) {
    const int src = h - 1 - r;  // bottom-up
    for (int c = 0; c < w; ++c) {
      buf[static_cast<std::size_t>(r) * w + c] = to_le(std::bit_cast<std::uint32_t>(static_cast<float>(values(src, c))));
    }
  }
  os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * 4));
  if (!os) throw IoError("write failed for '" + path.string() + "'");
}

void write_pfm(const std::filesystem::path& path, const DepthMap& depth) {
  write_pfm(path, depth.valid.select(depth.values, 0.0).eval());
}

DepthMap read_pfm(const std::filesystem::path& path) {
  auto is = open_in(path);
  if (header_token(is, path) != "Pf") throw DataError("'" + path.string() + "' is not a single-channel PFM");
  const int w = parse_extent(header_token(is, path), path);
  const int h = parse_extent(header_token(is, path), path);
  const std::string scale_tok = header_token(is, path);
  double scale = 0;
  try {
    scale = std::stod(scale_tok);
  } catch (const std::exception&) {
    throw DataError("bad PFM scale '" + scale_tok + "' in '" + path.string() + "'");
  }
  if (scale == 0) throw DataError("PFM scale must be nonzero in '" + path.string() + "'");
  const bool little = scale < 0;
  std::vector<std::uint32_t> buf(static_cast<std::size_t>(h) * w);
  is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * 4));
  if (is.gcount() != static_cast<std::streamsize>(buf.size() * 4)) throw DataError("truncated PFM data in '" + path.string() + "'");
  DepthMap d{Plane(h, w), Mask(h, w)};
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      std::uint32_t bits = buf[static_cast<std::size_t>(r) * w + c];
      const bool swap = little != (std::endian::native == std::endian::little);
      if (swap) bits = __builtin_bswap32(bits);
      const double v = std::bit_cast<float>(bits);
      d.values(h - 1 - r, c) = v;
      d.valid(h - 1 - r, c) = std::isfinite(v) && v > 0;
    }
  }
  return d;
}

}  // namespace depthdiff
