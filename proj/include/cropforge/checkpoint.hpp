#pragma once

// Checkpoint format: one JSON document mapping parameter names to
// {shape, base64-encoded little-endian float64 data}, plus metadata
// (config hash, epoch, seed) and optional optimizer state.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "cropforge/adamw.hpp"
#include "cropforge/tensor.hpp"

namespace cropforge {

std::string base64_encode(const std::vector<std::uint8_t>& bytes);
std::vector<std::uint8_t> base64_decode(const std::string& text);

std::string doubles_to_base64(const std::vector<double>& values);
std::vector<double> base64_to_doubles(const std::string& text);

struct Checkpoint {
  std::map<std::string, ag::Tensor> params;
  nlohmann::json metadata;
  ag::AdamWState optimizer;
  bool has_optimizer = false;
};

void save_checkpoint(const std::string& path,
                     const std::map<std::string, ag::Tensor>& params,
                     const nlohmann::json& metadata,
                     const ag::AdamWState* optimizer = nullptr);

Checkpoint load_checkpoint(const std::string& path);

// Stable 64-bit hash of a canonical JSON dump, hex-encoded.
std::string config_hash(const nlohmann::json& config);

}  // namespace cropforge
