#include "cropforge/checkpoint.hpp"

#include <array>
#include <cstring>
#include <fstream>
#include <sstream>

#include "cropforge/rng.hpp"

namespace cropforge {

namespace {
constexpr char kB64[] =
    "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
}

std::string base64_encode(const std::vector<std::uint8_t>& bytes) {
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  std::size_t i = 0;
  while (i + 3 <= bytes.size()) {
    std::uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8) | bytes[i + 2];
    out.push_back(kB64[(v >> 18) & 63]);
    out.push_back(kB64[(v >> 12) & 63]);
    out.push_back(kB64[(v >> 6) & 63]);
    out.push_back(kB64[v & 63]);
    i += 3;
  }
  std::size_t rem = bytes.size() - i;
  if (rem == 1) {
    std::uint32_t v = bytes[i] << 16;
    out.push_back(kB64[(v >> 18) & 63]);
    out.push_back(kB64[(v >> 12) & 63]);
    out += "==";
  } else if (rem == 2) {
    std::uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8);
    out.push_back(kB64[(v >> 18) & 63]);
    out.push_back(kB64[(v >> 12) & 63]);
    out.push_back(kB64[(v >> 6) & 63]);
    out += "=";
  }
  return out;
}

std::vector<std::uint8_t> base64_decode(const std::string& text) {
  static const auto table = [] {
    std::array<int, 256> t{};
    t.fill(-1);
    for (int i = 0; i < 64; ++i)
      t[static_cast<unsigned char>(kB64[i])] = i;
    return t;
  }();
  std::vector<std::uint8_t> out;
  std::uint32_t buf = 0;
  int bits = 0;
  for (char c : text) {
    if (c == '=' || c == '\n' || c == '\r') continue;
    int v = table[static_cast<unsigned char>(c)];
    if (v < 0) throw std::runtime_error("base64_decode: invalid character");
    buf = (buf << 6) | static_cast<std::uint32_t>(v);
    bits += 6;
    if (bits >= 8) {
      bits -= 8;
      out.push_back(static_cast<std::uint8_t>((buf >> bits) & 0xff));
    }
  }
  return out;
}

std::string doubles_to_base64(const std::vector<double>& values) {
  std::vector<std::uint8_t> bytes(values.size() * 8);
  for (std::size_t i = 0; i < values.size(); ++i) {
    std::uint64_t u;
    std::memcpy(&u, &values[i], 8);
    for (int b = 0; b < 8; ++b)  // little-endian byte order
      bytes[i * 8 + static_cast<std::size_t>(b)] =
          static_cast<std::uint8_t>((u >> (8 * b)) & 0xff);
  }
  return base64_encode(bytes);
}

std::vector<double> base64_to_doubles(const std::string& text) {
  auto bytes = base64_decode(text);
  if (bytes.size() % 8 != 0)
    throw std::runtime_error("base64_to_doubles: byte count not divisible by 8");
  std::vector<double> out(bytes.size() / 8);
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::uint64_t u = 0;
    for (int b = 7; b >= 0; --b)
      u = (u << 8) | bytes[i * 8 + static_cast<std::size_t>(b)];
    std::memcpy(&out[i], &u, 8);
  }
  return out;
}

void save_checkpoint(const std::string& path,
                     const std::map<std::string, ag::Tensor>& params,
                     const nlohmann::json& metadata,
                     const ag::AdamWState* optimizer) {
  nlohmann::json doc;
  doc["format"] = "cropforge-checkpoint-v1";
  doc["metadata"] = metadata;
  nlohmann::json p = nlohmann::json::object();
  for (const auto& [name, t] : params) {
    nlohmann::json entry;
    entry["shape"] = t.shape();
    entry["data"] = doubles_to_base64(t.data());
    p[name] = std::move(entry);
  }
  doc["params"] = std::move(p);
  if (optimizer) {
    nlohmann::json opt;
    opt["step"] = optimizer->step;
    nlohmann::json m = nlohmann::json::object(), v = nlohmann::json::object();
    for (const auto& [name, buf] : optimizer->m) m[name] = doubles_to_base64(buf);
    for (const auto& [name, buf] : optimizer->v) v[name] = doubles_to_base64(buf);
    opt["m"] = std::move(m);
    opt["v"] = std::move(v);
    doc["optimizer"] = std::move(opt);
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("save_checkpoint: cannot open '" + path + "'");
  f << doc.dump(2) << "\n";
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("load_checkpoint: cannot open '" + path + "'");
  nlohmann::json doc = nlohmann::json::parse(f);
  if (doc.value("format", "") != "cropforge-checkpoint-v1")
    throw std::runtime_error("load_checkpoint: unrecognized format in " + path);
  Checkpoint ck;
  ck.metadata = doc.at("metadata");
  for (auto& [name, entry] : doc.at("params").items()) {
    ag::Shape shape = entry.at("shape").get<ag::Shape>();
    auto data = base64_to_doubles(entry.at("data").get<std::string>());
    ck.params.emplace(name, ag::Tensor::leaf(shape, std::move(data), true));
  }
  if (doc.contains("optimizer")) {
    ck.has_optimizer = true;
    const auto& opt = doc.at("optimizer");
    ck.optimizer.step = opt.at("step").get<std::int64_t>();
    for (auto& [name, b64] : opt.at("m").items())
      ck.optimizer.m[name] = base64_to_doubles(b64.get<std::string>());
    for (auto& [name, b64] : opt.at("v").items())
      ck.optimizer.v[name] = base64_to_doubles(b64.get<std::string>());
  }
  return ck;
}

std::string config_hash(const nlohmann::json& config) {
  std::uint64_t h = fnv1a(config.dump());
  std::ostringstream os;
  os << std::hex << h;
  return os.str();
}

}  // namespace cropforge
