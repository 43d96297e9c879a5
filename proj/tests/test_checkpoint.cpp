#include <cstdio>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "hlm/checkpoint.hpp"
#include "test_util.hpp"

using namespace hlm;

namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("checkpoint round trip preserves everything") {
  Rng rng(61);
  ParamStore store;
  store.add_trunc_normal("a.w", {3, 4}, rng);
  store.add_zeros("b.bias", {5});

  Checkpoint ckpt;
  ckpt.kind = "hlm-discriminator";
  ckpt.language = "grc";
  ckpt.step = 123;
  ckpt.rng_state = rng.state();
  ckpt.config = {{"hidden", 16}};
  checkpoint_from_store(ckpt, store);

  const std::string path = temp_path("hlm_test_ckpt.bin");
  ckpt.save(path);
  Checkpoint loaded = Checkpoint::load(path);

  CHECK(loaded.kind == "hlm-discriminator");
  CHECK(loaded.language == "grc");
  CHECK(loaded.step == 123);
  CHECK(loaded.rng_state == rng.state());
  CHECK(loaded.config["hidden"] == 16);
  REQUIRE(loaded.arrays.size() == 2);
  CHECK(loaded.arrays[0].name == "a.w");
  CHECK(loaded.arrays[0].shape == Shape{3, 4});
  for (std::size_t i = 0; i < 12; ++i)
    CHECK(loaded.arrays[0].data[i] == store.get("a.w").values()[static_cast<Eigen::Index>(i)]);

  // loading back into a fresh store restores values bit for bit
  Rng rng2(62);
  ParamStore other;
  other.add_trunc_normal("a.w", {3, 4}, rng2);
  other.add_zeros("b.bias", {5});
  checkpoint_into_store(loaded, other);
  for (Eigen::Index i = 0; i < 12; ++i)
    CHECK(other.get("a.w").values()[i] == store.get("a.w").values()[i]);
  std::remove(path.c_str());
}

TEST_CASE("identical checkpoints hash identically; different ones differ") {
  Rng rng(63);
  ParamStore store;
  store.add_trunc_normal("w", {4, 4}, rng);
  Checkpoint ckpt;
  ckpt.kind = "test";
  checkpoint_from_store(ckpt, store);

  const std::string p1 = temp_path("hlm_hash_a.bin");
  const std::string p2 = temp_path("hlm_hash_b.bin");
  ckpt.save(p1);
  ckpt.save(p2);
  CHECK(file_fnv1a(p1) == file_fnv1a(p2));

  ckpt.arrays[0].data[0] += 1.0;
  ckpt.save(p2);
  CHECK(file_fnv1a(p1) != file_fnv1a(p2));
  std::remove(p1.c_str());
  std::remove(p2.c_str());
}

TEST_CASE("missing parameters and shape clashes are data errors") {
  Rng rng(64);
  ParamStore store;
  store.add_trunc_normal("w", {2, 2}, rng);
  Checkpoint ckpt;
  checkpoint_from_store(ckpt, store);

  ParamStore bigger;
  bigger.add_trunc_normal("w", {2, 2}, rng);
  bigger.add_trunc_normal("extra", {1}, rng);
  CHECK_THROWS_AS(checkpoint_into_store(ckpt, bigger), DataError);

  ParamStore wrong;
  wrong.add_trunc_normal("w", {4}, rng);
  CHECK_THROWS_AS(checkpoint_into_store(ckpt, wrong), DataError);
}

TEST_CASE("loading a non-checkpoint file fails cleanly") {
  const std::string path = temp_path("hlm_not_ckpt.bin");
  {
    std::ofstream f(path);
    f << "not a checkpoint";
  }
  CHECK_THROWS_AS(Checkpoint::load(path), DataError);
  std::remove(path.c_str());
}
