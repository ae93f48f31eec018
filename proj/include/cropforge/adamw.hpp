#pragma once

// AdamW with decoupled weight decay:
//   m <- b1 m + (1-b1) g          v <- b2 v + (1-b2) g^2
//   p <- p - lr * ( m_hat / (sqrt(v_hat) + eps) + wd * p )
// with bias-corrected m_hat, v_hat.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "cropforge/tensor.hpp"

namespace cropforge::ag {

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

struct AdamWState {
  std::map<std::string, std::vector<double>> m;
  std::map<std::string, std::vector<double>> v;
  std::int64_t step = 0;
};

// Applies one update to every param that has a populated grad. Moment
// buffers are created on first use and must keep matching shapes after.
void adamw_step(std::map<std::string, Tensor>& params, AdamWState& state,
                const AdamWConfig& cfg);

// Scales all grads so their global L2 norm is at most max_norm.
// Returns the pre-clip norm.
double clip_grad_norm(std::map<std::string, Tensor>& params, double max_norm);

void zero_grads(std::map<std::string, Tensor>& params);

}  // namespace cropforge::ag
