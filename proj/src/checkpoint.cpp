#include "hlm/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

namespace hlm {

namespace {

constexpr char kMagic[] = "HLMCKPT1\n";
constexpr std::size_t kMagicLen = sizeof(kMagic) - 1;

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint64_t get_u64(const std::string& in, std::size_t off) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i)
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[off + i])) << (8 * i);
  return v;
}

}  // namespace

void Checkpoint::save(const std::string& path) const {
  nlohmann::json manifest;
  manifest["kind"] = kind;
  manifest["language"] = language;
  manifest["dtype"] = dtype;
  manifest["step"] = step;
  std::vector<std::string> rng_hex;
  for (auto word : rng_state) rng_hex.push_back(hash_hex(word));
  manifest["rng"] = rng_hex;
  manifest["config"] = config;
  nlohmann::json params = nlohmann::json::array();
  for (const auto& a : arrays) {
    nlohmann::json p;
    p["name"] = a.name;
    p["shape"] = std::vector<long long>(a.shape.begin(), a.shape.end());
    params.push_back(p);
  }
  manifest["params"] = params;
  const std::string mtext = manifest.dump();

  std::string out;
  out.append(kMagic, kMagicLen);
  put_u64(out, mtext.size());
  out += mtext;
  for (const auto& a : arrays) {
    const std::size_t bytes = a.data.size() * sizeof(double);
    const std::size_t off = out.size();
    out.resize(off + bytes);
    std::memcpy(out.data() + off, a.data.data(), bytes);
  }

  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write checkpoint: " + path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw DataError("short write on checkpoint: " + path);
}

Checkpoint Checkpoint::load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open checkpoint: " + path);
  std::ostringstream buf;
  buf << f.rdbuf();
  const std::string in = buf.str();

  if (in.size() < kMagicLen + 8 || in.compare(0, kMagicLen, kMagic) != 0)
    throw DataError("not a checkpoint file: " + path);
  const std::uint64_t mlen = get_u64(in, kMagicLen);
  std::size_t off = kMagicLen + 8;
  if (off + mlen > in.size()) throw DataError("truncated checkpoint manifest: " + path);
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(in.substr(off, mlen));
  } catch (const nlohmann::json::exception& e) {
    throw DataError("bad checkpoint manifest in " + path + ": " + e.what());
  }
  off += mlen;

  Checkpoint ckpt;
  ckpt.kind = manifest.value("kind", "");
  ckpt.language = manifest.value("language", "");
  ckpt.dtype = manifest.value("dtype", "f64");
  ckpt.step = manifest.value("step", 0LL);
  if (manifest.contains("rng")) {
    const auto& rng = manifest["rng"];
    for (std::size_t i = 0; i < 4 && i < rng.size(); ++i)
      ckpt.rng_state[i] = std::stoull(rng[i].get<std::string>(), nullptr, 16);
  }
  ckpt.config = manifest.value("config", nlohmann::json::object());

  for (const auto& p : manifest["params"]) {
    Checkpoint::Array a;
    a.name = p["name"].get<std::string>();
    for (long long d : p["shape"].get<std::vector<long long>>())
      a.shape.push_back(static_cast<Eigen::Index>(d));
    const std::size_t count = static_cast<std::size_t>(numel(a.shape));
    const std::size_t bytes = count * sizeof(double);
    if (off + bytes > in.size()) throw DataError("truncated checkpoint data: " + path);
    a.data.resize(count);
    std::memcpy(a.data.data(), in.data() + off, bytes);
    off += bytes;
    ckpt.arrays.push_back(std::move(a));
  }
  return ckpt;
}

std::uint64_t file_fnv1a(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open file for hashing: " + path);
  std::uint64_t h = 1469598103934665603ULL;
  char chunk[4096];
  while (f.read(chunk, sizeof(chunk)) || f.gcount() > 0) {
    for (std::streamsize i = 0; i < f.gcount(); ++i) {
      h ^= static_cast<unsigned char>(chunk[i]);
      h *= 1099511628211ULL;
    }
    if (!f) break;
  }
  return h;
}

std::string hash_hex(std::uint64_t h) {
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = digits[h & 0xF];
    h >>= 4;
  }
  return out;
}

}  // namespace hlm
