#pragma once

// Binary checkpoint container.
//
// Layout (all integers little-endian):
//   8 bytes   magic "MGCKPT01"
//   u64       manifest length in bytes
//   ...       manifest, UTF-8 JSON: version, kind, config_hash, step, meta,
//             entries [{name, dtype, shape, offset, count}]
//   ...       payload: float32 values of every entry, contiguous
//   u64       FNV-1a 64 of the payload

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "depthdiff/nn.hpp"

namespace depthdiff {

struct CheckpointEntry {
  std::string name;
  ad::Shape shape;
  std::vector<float> values;
};

struct Checkpoint {
  static constexpr int kVersion = 1;

  std::string kind;
  std::uint64_t config_hash = 0;
  std::int64_t step = 0;
  nlohmann::json meta = nlohmann::json::object();
  std::vector<CheckpointEntry> entries;

  const CheckpointEntry* find(const std::string& name) const;
  const CheckpointEntry& at(const std::string& name) const;
};

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
/// Throws IoError if unreadable and IntegrityError on any structural or checksum mismatch.
Checkpoint read_checkpoint(const std::filesystem::path& path);

std::string hash_hex(std::uint64_t h);

/// Appends every parameter of `store`; with `optimizer` set, also the Adam moments
/// as "<name>#m" and "<name>#v" plus the shared step count in meta.
template <typename Scalar>
void store_parameters(Checkpoint& ckpt, const ParameterStore<Scalar>& store, bool optimizer) {
  const auto put = [&ckpt](const std::string& name, const ad::Shape& shape, const ad::Vector<Scalar>& v) {
    CheckpointEntry e{name, shape, std::vector<float>(static_cast<std::size_t>(v.size()))};
    for (Eigen::Index i = 0; i < v.size(); ++i) e.values[static_cast<std::size_t>(i)] = static_cast<float>(v(i));
    ckpt.entries.push_back(std::move(e));
  };
  std::int64_t adam_steps = 0;
  for (const auto& p : store.params()) {
    put(p.name, p.tensor.shape(), p.tensor.value());
    if (optimizer) {
      const auto n = p.tensor.size();
      put(p.name + "#m", p.tensor.shape(), p.adam_m.size() == n ? p.adam_m : ad::Vector<Scalar>::Zero(n));
      put(p.name + "#v", p.tensor.shape(), p.adam_v.size() == n ? p.adam_v : ad::Vector<Scalar>::Zero(n));
      adam_steps = p.step_count;
    }
  }
  if (optimizer) ckpt.meta["adam_steps"] = adam_steps;
}

/// Loads every parameter of `store` by name. Missing names or shape mismatches
/// throw ConfigError. Adam moments are restored when present and requested.
template <typename Scalar>
void load_parameters(const Checkpoint& ckpt, ParameterStore<Scalar>& store, bool optimizer) {
  const auto fill = [](const CheckpointEntry& e, ad::Vector<Scalar>& v) {
    v.resize(static_cast<Eigen::Index>(e.values.size()));
    for (std::size_t i = 0; i < e.values.size(); ++i) v(static_cast<Eigen::Index>(i)) = Scalar(e.values[i]);
  };
  const std::int64_t adam_steps = ckpt.meta.value("adam_steps", std::int64_t{0});
  for (auto& p : store.params()) {
    const auto* e = ckpt.find(p.name);
    if (e == nullptr) throw ConfigError("checkpoint (" + ckpt.kind + ") has no parameter '" + p.name + "'");
    if (e->shape != p.tensor.shape()) {
      throw ConfigError("checkpoint parameter '" + p.name + "' has shape " + ad::shape_str(e->shape) + ", model expects " +
                        ad::shape_str(p.tensor.shape()));
    }
    fill(*e, p.tensor.value());
    if (optimizer) {
      const auto* m = ckpt.find(p.name + "#m");
      const auto* v = ckpt.find(p.name + "#v");
      if (m != nullptr && v != nullptr) {
        fill(*m, p.adam_m);
        fill(*v, p.adam_v);
        p.step_count = adam_steps;
      }
    }
  }
}

}  // namespace depthdiff
