#pragma once

// Central finite-difference validation of the autodiff engine: every
// differentiable op over randomized shapes/seeds, plus the full
// decoder + set-prediction-loss composition on a tiny model.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "cropforge/tensor.hpp"

namespace cropforge {

struct GradCheckCase {
  std::string name;
  double worst_rel_err = 0;
  std::size_t coords_checked = 0;
  bool passed = true;
};

// Analytic vs central finite-difference gradients (step h) of a scalar
// builder over the given leaves. Passes per coordinate when
// |analytic - numeric| <= abs_floor + rel_tol * max(|analytic|, |numeric|).
// max_coords > 0 checks a deterministic subsample of coordinates.
GradCheckCase check_gradients(
    const std::string& name, std::vector<ag::Tensor>& leaves,
    const std::function<ag::Tensor()>& build_scalar, double h = 1e-6,
    double rel_tol = 1e-4, double abs_floor = 1e-8, std::size_t max_coords = 0,
    std::uint64_t subsample_seed = 0);

// The full suite: rounds randomized trials per op (shapes and values drawn
// from the seed), composition checks, and the tiny decoder + loss check.
std::vector<GradCheckCase> run_gradcheck(std::uint64_t seed, int rounds = 20,
                                         bool include_decoder = true);

bool all_passed(const std::vector<GradCheckCase>& results);

}  // namespace cropforge
