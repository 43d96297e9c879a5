#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "hlm/common.hpp"
#include "hlm/optim.hpp"
#include "hlm/tensor.hpp"

#include "json.hpp"

namespace hlm {

/// Flat archive of named parameter arrays plus a manifest. The manifest is a
/// sorted-key JSON header (model kind, language, dtype, step, RNG state and a
/// config echo) followed by raw little-endian float64 data in manifest order,
/// so identical training runs produce byte-identical files.
struct Checkpoint {
  struct Array {
    std::string name;
    Shape shape;
    std::vector<double> data;
  };

  std::string kind;      // e.g. "hlm-discriminator", "seq2seq"
  std::string language;
  std::string dtype = "f64";
  long long step = 0;
  std::array<std::uint64_t, 4> rng_state{};
  nlohmann::json config = nlohmann::json::object();
  std::vector<Array> arrays;

  const Array* find(const std::string& name) const {
    for (const auto& a : arrays)
      if (a.name == name) return &a;
    return nullptr;
  }

  void save(const std::string& path) const;
  static Checkpoint load(const std::string& path);
};

/// FNV-1a over the file bytes; used to content-address checkpoint files.
std::uint64_t file_fnv1a(const std::string& path);
std::string hash_hex(std::uint64_t h);

template <typename S>
void checkpoint_from_store(Checkpoint& ckpt, const ParamStoreT<S>& store) {
  for (const auto& p : store.items()) {
    Checkpoint::Array a;
    a.name = p.name;
    a.shape = p.tensor.shape();
    a.data.assign(p.tensor.data(), p.tensor.data() + p.tensor.size());
    ckpt.arrays.push_back(std::move(a));
  }
}

/// Copies arrays into the store's parameters by name. Every store parameter
/// must be present; extra checkpoint arrays (discarded heads) are ignored.
template <typename S>
void checkpoint_into_store(const Checkpoint& ckpt, ParamStoreT<S>& store) {
  for (auto& p : store.items()) {
    const Checkpoint::Array* a = ckpt.find(p.name);
    if (!a) throw DataError("checkpoint is missing parameter " + p.name);
    if (a->shape != p.tensor.shape())
      throw DataError("checkpoint parameter " + p.name + " has shape " + shape_str(a->shape) +
                      ", expected " + shape_str(p.tensor.shape()));
    for (Eigen::Index i = 0; i < p.tensor.size(); ++i)
      p.tensor.values()[i] = S(a->data[static_cast<std::size_t>(i)]);
  }
}

}  // namespace hlm
