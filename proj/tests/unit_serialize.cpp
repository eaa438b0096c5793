// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "agrifuse/errors.hpp"
#include "agrifuse/serialize.hpp"
#include "test_support.hpp"

using namespace agrifuse;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("agrifuse-test-" + std::to_string(::getpid()) + "-" +
            std::to_string(counter++));
    fs::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
  static inline int counter = 0;
};

}  // namespace

TEST_CASE("AGT1 round trip is bitwise") {
  TempDir tmp;
  Rng rng(5);
  Tensor t = testsup::random_tensor({3, 4, 5}, rng, -10, 10, false);
  const fs::path file = tmp.path / "t.agt";
  write_tensor(file, t);
  Tensor back = read_tensor(file);
  REQUIRE(back.shape() == t.shape());
  for (std::size_t i = 0; i < t.size(); ++i) {
    CHECK(back.values()[i] == t.values()[i]);
  }

  // writing twice produces identical bytes
  const fs::path file2 = tmp.path / "t2.agt";
  write_tensor(file2, t);
  std::ifstream a(file, std::ios::binary), b(file2, std::ios::binary);
  std::string sa((std::istreambuf_iterator<char>(a)), {});
  std::string sb((std::istreambuf_iterator<char>(b)), {});
  CHECK(sa == sb);
  CHECK(sa.size() == 4 + 8 * 4 + 8 * t.size());
}

TEST_CASE("AGT1 header layout") {
  TempDir tmp;
  Tensor t = Tensor::from_vector({2}, {1.0, -2.0});
  const fs::path file = tmp.path / "small.agt";
  write_tensor(file, t);
  std::ifstream in(file, std::ios::binary);
  std::string raw((std::istreambuf_iterator<char>(in)), {});
  REQUIRE(raw.size() == 4 + 8 + 8 + 16);
  CHECK(raw.substr(0, 4) == "AGT1");
  CHECK(static_cast<unsigned char>(raw[4]) == 1);   // rank, little-endian
  CHECK(static_cast<unsigned char>(raw[12]) == 2);  // dim 0
}

TEST_CASE("AGT1 rejects corrupt input") {
  TempDir tmp;
  const fs::path bad = tmp.path / "bad.agt";
  std::ofstream(bad) << "not a tensor";
  CHECK_THROWS_AS(read_tensor(bad), IoError);
  CHECK_THROWS_AS(read_tensor(tmp.path / "missing.agt"), IoError);

  // truncated payload
  Tensor t = Tensor::from_vector({4}, {1, 2, 3, 4});
  const fs::path file = tmp.path / "trunc.agt";
  write_tensor(file, t);
  fs::resize_file(file, fs::file_size(file) - 8);
  CHECK_THROWS_AS(read_tensor(file), IoError);
}

TEST_CASE("checkpoint save and load") {
  TempDir tmp;
  Rng rng(7);
  Tensor w = testsup::random_tensor({4, 3}, rng);
  Tensor b = testsup::random_tensor({3}, rng);
  ParamMap params = {{"layer.weight", &w}, {"layer.bias", &b}};
  nlohmann::json hyper = {{"d_model", 3}, {"layers", 1}};
  save_checkpoint(tmp.path / "ckpt", params, hyper);

  Tensor w2 = Tensor::zeros({4, 3}, true);
  Tensor b2 = Tensor::zeros({3}, true);
  ParamMap params2 = {{"layer.weight", &w2}, {"layer.bias", &b2}};
  nlohmann::json loaded = load_checkpoint(tmp.path / "ckpt", params2);
  CHECK(loaded["d_model"] == 3);
  for (std::size_t i = 0; i < w.size(); ++i) {
    CHECK(w2.values()[i] == w.values()[i]);
  }
  for (std::size_t i = 0; i < b.size(); ++i) {
    CHECK(b2.values()[i] == b.values()[i]);
  }

  // wrong shape is rejected
  Tensor wrong = Tensor::zeros({3, 4}, true);
  ParamMap bad = {{"layer.weight", &wrong}, {"layer.bias", &b2}};
  CHECK_THROWS_AS(load_checkpoint(tmp.path / "ckpt", bad), IoError);

  // wrong name is rejected
  ParamMap renamed = {{"other.weight", &w2}, {"layer.bias", &b2}};
  CHECK_THROWS_AS(load_checkpoint(tmp.path / "ckpt", renamed), IoError);
}

TEST_CASE("config hash is stable and order-insensitive") {
  nlohmann::json a = {{"alpha", 1}, {"beta", 2.5}};
  nlohmann::json b;
  b["beta"] = 2.5;
  b["alpha"] = 1;
  CHECK(config_hash(a) == config_hash(b));
  CHECK(config_hash(a).size() == 16);
  nlohmann::json c = {{"alpha", 1}, {"beta", 2.6}};
  CHECK(config_hash(a) != config_hash(c));
}
