#pragma once

// Shared test utilities: finite-difference gradient checking and small
// tensor builders. Gradient checks run in double.

#include "vlseg/autograd.hpp"
#include "vlseg/rng.hpp"

#include <functional>
#include <string>
#include <vector>

namespace testutil {

using vlseg::Rng;
using vlseg::Tensor;
using vlseg::ag::Var;

inline Tensor<double> random_tensor(Rng& rng, std::vector<int> shape, double scale = 1.0) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.data) v = rng.normal(0.0, scale);
  return t;
}

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::string worst;
};

// Central-difference check of d(f)/d(params). `f` rebuilds the graph from the
// current parameter values on every call. Checks every coordinate when a
// parameter has <= max_coords entries, otherwise a deterministic subset.
// Coordinates whose analytic and numeric gradients are both below
// `noise_floor` are compared absolutely: central differences on O(1) loss
// values carry ~1e-8 of cancellation noise, which would swamp the relative
// error of a genuinely tiny gradient.
inline GradCheckResult grad_check(const std::function<Var<double>()>& f,
                                  std::vector<Var<double>> params, double h = 1e-5,
                                  int max_coords = 64, std::uint64_t pick_seed = 17,
                                  double noise_floor = 1e-6) {
  // Analytic gradients.
  for (auto& p : params) {
    auto& g = p.grad();
    std::fill(g.data.begin(), g.data.end(), 0.0);
  }
  Var<double> out = f();
  vlseg::ag::backward(out);

  GradCheckResult res;
  Rng pick(pick_seed);
  for (size_t pi = 0; pi < params.size(); ++pi) {
    auto& p = params[pi];
    std::int64_t n = p.val().size();
    std::vector<std::int64_t> coords;
    if (n <= max_coords) {
      for (std::int64_t i = 0; i < n; ++i) coords.push_back(i);
    } else {
      for (int i = 0; i < max_coords; ++i)
        coords.push_back(static_cast<std::int64_t>(pick.uniform_int(0, static_cast<int>(n - 1))));
    }
    for (std::int64_t c : coords) {
      double* slot = &p.node()->value.data[static_cast<size_t>(c)];
      double orig = *slot;
      *slot = orig + h;
      double fp = f().item();
      *slot = orig - h;
      double fm = f().item();
      *slot = orig;
      double num = (fp - fm) / (2 * h);
      double ana = p.grad().data[static_cast<size_t>(c)];
      double rel = std::abs(num - ana) / std::max(1e-8, std::abs(num) + std::abs(ana));
      if (rel > res.max_rel_err) {
        res.max_rel_err = rel;
        res.worst = "param " + std::to_string(pi) + " coord " + std::to_string(c) +
                    " analytic " + std::to_string(ana) + " numeric " + std::to_string(num);
      }
    }
  }
  return res;
}

}  // namespace testutil
