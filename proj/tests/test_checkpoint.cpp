#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "cropforge/checkpoint.hpp"

using namespace cropforge;
using ag::Tensor;

TEST_CASE("base64 round trips and matches a known vector") {
  CHECK(base64_encode({}) == "");
  CHECK(base64_encode({'M', 'a', 'n'}) == "TWFu");
  CHECK(base64_encode({'M', 'a'}) == "TWE=");
  CHECK(base64_encode({'M'}) == "TQ==");
  std::vector<std::uint8_t> bytes;
  for (int i = 0; i < 256; ++i) bytes.push_back(static_cast<std::uint8_t>(i));
  CHECK(base64_decode(base64_encode(bytes)) == bytes);
  CHECK_THROWS(base64_decode("not valid!"));
}

TEST_CASE("double encoding is little-endian IEEE-754") {
  // 1.0 = 0x3FF0000000000000, little-endian bytes 00..F0 3F.
  std::string enc = doubles_to_base64({1.0});
  auto bytes = base64_decode(enc);
  REQUIRE(bytes.size() == 8);
  CHECK(bytes[0] == 0x00);
  CHECK(bytes[6] == 0xF0);
  CHECK(bytes[7] == 0x3F);
  std::vector<double> vals = {0.0, -1.5, 3.141592653589793, 1e-300};
  CHECK(base64_to_doubles(doubles_to_base64(vals)) == vals);
}

TEST_CASE("checkpoint save/load round trip with optimizer state") {
  std::map<std::string, Tensor> params;
  params["a"] = Tensor::leaf({2, 2}, {1.5, -2.5, 0.0, 4.25}, true);
  params["b"] = Tensor::leaf({3}, {0.1, 0.2, 0.3}, true);
  ag::AdamWState opt;
  opt.step = 17;
  opt.m["a"] = {1, 2, 3, 4};
  opt.v["a"] = {5, 6, 7, 8};
  opt.m["b"] = {9, 10, 11};
  opt.v["b"] = {12, 13, 14};
  nlohmann::json meta = {{"epoch", 3}, {"seed", 7}};

  auto path =
      std::filesystem::temp_directory_path() / "cropforge-ckpt-test.json";
  save_checkpoint(path.string(), params, meta, &opt);
  Checkpoint ck = load_checkpoint(path.string());
  CHECK(ck.metadata.at("epoch") == 3);
  CHECK(ck.params.at("a").shape() == ag::Shape{2, 2});
  CHECK(ck.params.at("a").data() == params.at("a").data());
  CHECK(ck.params.at("b").data() == params.at("b").data());
  REQUIRE(ck.has_optimizer);
  CHECK(ck.optimizer.step == 17);
  CHECK(ck.optimizer.m.at("a") == opt.m.at("a"));
  CHECK(ck.optimizer.v.at("b") == opt.v.at("b"));

  // Without optimizer state.
  save_checkpoint(path.string(), params, meta);
  CHECK(!load_checkpoint(path.string()).has_optimizer);
  std::filesystem::remove(path);
}

TEST_CASE("checkpoint writes are byte-deterministic") {
  std::map<std::string, Tensor> params;
  params["w"] = Tensor::leaf({2}, {0.25, -0.75}, true);
  auto dir = std::filesystem::temp_directory_path();
  auto p1 = dir / "cropforge-ck1.json", p2 = dir / "cropforge-ck2.json";
  save_checkpoint(p1.string(), params, {{"seed", 1}});
  save_checkpoint(p2.string(), params, {{"seed", 1}});
  std::ifstream f1(p1), f2(p2);
  std::string s1((std::istreambuf_iterator<char>(f1)), {});
  std::string s2((std::istreambuf_iterator<char>(f2)), {});
  CHECK(s1 == s2);
  CHECK(!s1.empty());
  std::filesystem::remove(p1);
  std::filesystem::remove(p2);
}

TEST_CASE("malformed checkpoints are rejected") {
  auto path = std::filesystem::temp_directory_path() / "cropforge-bad.json";
  {
    std::ofstream out(path);
    out << R"({"format":"something-else","params":{}})";
  }
  CHECK_THROWS(load_checkpoint(path.string()));
  CHECK_THROWS(load_checkpoint("/nonexistent/nope.json"));
  std::filesystem::remove(path);
}

TEST_CASE("config hash is stable and key-order independent") {
  nlohmann::json a = {{"x", 1}, {"y", "z"}};
  nlohmann::json b = {{"y", "z"}, {"x", 1}};
  CHECK(config_hash(a) == config_hash(b));  // nlohmann objects sort keys
  CHECK(config_hash(a) != config_hash(nlohmann::json{{"x", 2}, {"y", "z"}}));
  CHECK(config_hash(a).size() == 16);  // 64-bit hex
}
