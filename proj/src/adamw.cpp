#include "cropforge/adamw.hpp"

#include <cmath>

namespace cropforge::ag {

void adamw_step(std::map<std::string, Tensor>& params, AdamWState& state,
                const AdamWConfig& cfg) {
  if (cfg.lr <= 0) throw TensorError("adamw_step: lr must be positive");
  state.step += 1;
  double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (auto& [name, p] : params) {
    if (!p.has_grad()) continue;
    auto& m = state.m[name];
    auto& v = state.v[name];
    if (m.empty()) m.assign(p.numel(), 0.0);
    if (v.empty()) v.assign(p.numel(), 0.0);
    if (m.size() != p.numel() || v.size() != p.numel())
      throw TensorError("adamw_step: state shape mismatch for '" + name + "'");
    const auto& g = p.grad();
    auto& data = p.mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      double mh = m[i] / bc1;
      double vh = v[i] / bc2;
      data[i] -= cfg.lr * (mh / (std::sqrt(vh) + cfg.eps) +
                           cfg.weight_decay * data[i]);
    }
  }
}

double clip_grad_norm(std::map<std::string, Tensor>& params, double max_norm) {
  double sq = 0.0;
  for (auto& [name, p] : params) {
    if (!p.has_grad()) continue;
    for (double g : p.grad()) sq += g * g;
  }
  double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0) {
    double scale = max_norm / norm;
    for (auto& [name, p] : params) {
      if (!p.has_grad()) continue;
      auto& g = p.node()->grad;
      for (double& x : g) x *= scale;
    }
  }
  return norm;
}

void zero_grads(std::map<std::string, Tensor>& params) {
  for (auto& [name, p] : params) p.zero_grad();
}

}  // namespace cropforge::ag
