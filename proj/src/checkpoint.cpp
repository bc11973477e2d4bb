#include "depthdiff/checkpoint.hpp"

#include <array>
#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>

namespace depthdiff {

namespace {

constexpr std::array<char, 8> kMagic{'M', 'G', 'C', 'K', 'P', 'T', '0', '1'};

void put_u64(std::vector<char>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_u64(const char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return v;
}

std::uint32_t to_le(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::big) v = __builtin_bswap32(v);
  return v;
}

std::uint64_t parse_hash(const std::string& s) {
  if (s.size() != 16) throw IntegrityError("checkpoint manifest: malformed config hash '" + s + "'");
  return std::stoull(s, nullptr, 16);
}

}  // namespace

std::string hash_hex(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

const CheckpointEntry* Checkpoint::find(const std::string& name) const {
  for (const auto& e : entries) {
    if (e.name == name) return &e;
  }
  return nullptr;
}

const CheckpointEntry& Checkpoint::at(const std::string& name) const {
  const auto* e = find(name);
  if (e == nullptr) throw ConfigError("checkpoint (" + kind + ") has no entry '" + name + "'");
  return *e;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  nlohmann::json manifest{{"version", Checkpoint::kVersion},
                          {"kind", ckpt.kind},
                          {"config_hash", hash_hex(ckpt.config_hash)},
                          {"step", ckpt.step},
                          {"meta", ckpt.meta},
                          {"entries", nlohmann::json::array()}};
  std::uint64_t offset = 0;
  for (const auto& e : ckpt.entries) {
    if (static_cast<std::int64_t>(e.values.size()) != ad::numel(e.shape)) {
      throw DimensionError("checkpoint entry '" + e.name + "': value count does not match shape " + ad::shape_str(e.shape));
    }
    manifest["entries"].push_back(
        {{"name", e.name}, {"dtype", "f32"}, {"shape", e.shape}, {"offset", offset}, {"count", e.values.size()}});
    offset += 4 * e.values.size();
  }
  const std::string text = manifest.dump();

  std::vector<char> payload;
  payload.reserve(offset);
  for (const auto& e : ckpt.entries) {
    for (float f : e.values) {
      const std::uint32_t bits = to_le(std::bit_cast<std::uint32_t>(f));
      const auto* b = reinterpret_cast<const char*>(&bits);
      payload.insert(payload.end(), b, b + 4);
    }
  }

  std::vector<char> out(kMagic.begin(), kMagic.end());
  put_u64(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  out.insert(out.end(), payload.begin(), payload.end());
  put_u64(out, fnv1a(std::as_bytes(std::span(payload.data(), payload.size()))));

  // Write to a sibling file and rename so a crash never leaves a torn checkpoint.
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw IoError("cannot open '" + tmp.string() + "' for writing");
    os.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!os) throw IoError("write failed for '" + tmp.string() + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place at '" + path.string() + "': " + ec.message());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint '" + path.string() + "'");
  const std::vector<char> buf((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  const std::string where = "checkpoint '" + path.string() + "'";
  if (buf.size() < 24 || !std::equal(kMagic.begin(), kMagic.end(), buf.begin())) {
    throw IntegrityError(where + ": bad magic or truncated header");
  }
  const std::uint64_t mlen = get_u64(buf.data() + 8);
  if (mlen > buf.size() - 24) throw IntegrityError(where + ": manifest length exceeds file size");
  const std::size_t payload_begin = 16 + mlen;
  const std::size_t payload_size = buf.size() - 8 - payload_begin;

  const std::uint64_t stored = get_u64(buf.data() + buf.size() - 8);
  const std::uint64_t actual = fnv1a(std::as_bytes(std::span(buf.data() + payload_begin, payload_size)));
  if (stored != actual) {
    throw IntegrityError(where + ": payload checksum mismatch (stored " + hash_hex(stored) + ", computed " +
                         hash_hex(actual) + ")");
  }

  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(buf.begin() + 16, buf.begin() + static_cast<std::ptrdiff_t>(payload_begin));
  } catch (const nlohmann::json::exception& e) {
    throw IntegrityError(where + ": unreadable manifest: " + e.what());
  }

  Checkpoint ckpt;
  try {
    if (manifest.at("version").get<int>() != Checkpoint::kVersion) {
      throw IntegrityError(where + ": unsupported format version " + manifest.at("version").dump());
    }
    ckpt.kind = manifest.at("kind").get<std::string>();
    ckpt.config_hash = parse_hash(manifest.at("config_hash").get<std::string>());
    ckpt.step = manifest.at("step").get<std::int64_t>();
    ckpt.meta = manifest.at("meta");
    std::uint64_t expected_offset = 0;
    for (const auto& je : manifest.at("entries")) {
      CheckpointEntry e;
      e.name = je.at("name").get<std::string>();
      e.shape = je.at("shape").get<ad::Shape>();
      const auto offset = je.at("offset").get<std::uint64_t>();
      const auto count = je.at("count").get<std::uint64_t>();
      if (je.at("dtype").get<std::string>() != "f32") throw IntegrityError(where + ": entry '" + e.name + "' is not f32");
      if (offset != expected_offset || static_cast<std::int64_t>(count) != ad::numel(e.shape) ||
          offset + 4 * count > payload_size) {
        throw IntegrityError(where + ": entry '" + e.name + "' has inconsistent offset, count, or shape");
      }
      if (ckpt.find(e.name) != nullptr) throw IntegrityError(where + ": duplicate entry '" + e.name + "'");
      e.values.resize(count);
      const char* src = buf.data() + payload_begin + offset;
      for (std::uint64_t i = 0; i < count; ++i) {
        std::uint32_t bits;
        std::memcpy(&bits, src + 4 * i, 4);
        e.values[i] = std::bit_cast<float>(to_le(bits));
      }
      expected_offset = offset + 4 * count;
      ckpt.entries.push_back(std::move(e));
    }
    if (expected_offset != payload_size) throw IntegrityError(where + ": payload has trailing bytes");
  } catch (const nlohmann::json::exception& e) {
    throw IntegrityError(where + ": malformed manifest: " + e.what());
  }
  return ckpt;
}

}  // namespace depthdiff
