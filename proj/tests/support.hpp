#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <span>
#include <vector>

#include "simplerob/tensor.hpp"

namespace testing {

using simplerob::ad::Shape;
using simplerob::ad::Tensor;

inline Tensor random_tensor(std::mt19937_64& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(simplerob::ad::numel(shape));
  for (auto& e : v) e = u(rng);
  return Tensor(std::move(shape), std::move(v));
}

inline std::vector<std::size_t> random_labels(std::mt19937_64& rng, std::size_t n, std::size_t k) {
  std::uniform_int_distribution<std::size_t> u(0, k - 1);
  std::vector<std::size_t> out(n);
  for (auto& e : out) e = u(rng);
  return out;
}

using ScalarFn = std::function<Tensor(const std::vector<Tensor>&)>;

// Reverse-mode gradients of f at `inputs`.
inline std::vector<std::vector<double>> analytic_gradients(const ScalarFn& f, const std::vector<Tensor>& inputs) {
  simplerob::ad::Tape tape;
  std::vector<Tensor> vars;
  for (const auto& t : inputs) vars.push_back(tape.variable(t));
  tape.backward(f(vars));
  std::vector<std::vector<double>> out;
  for (const auto& v : vars) out.emplace_back(v.grad().begin(), v.grad().end());
  return out;
}

// Central differences of f at `inputs`, one coordinate at a time.
inline std::vector<std::vector<double>> numeric_gradients(const ScalarFn& f, const std::vector<Tensor>& inputs,
                                                          double h = 1e-6) {
  std::vector<std::vector<double>> out;
  for (std::size_t a = 0; a < inputs.size(); ++a) {
    std::vector<double> g(inputs[a].size());
    for (std::size_t i = 0; i < g.size(); ++i) {
      auto probe = [&](double delta) {
        std::vector<Tensor> moved;
        for (std::size_t b = 0; b < inputs.size(); ++b) moved.push_back(inputs[b].detach());
        moved[a].mutable_data()[i] += delta;
        return f(moved).item();
      };
      g[i] = (probe(h) - probe(-h)) / (2.0 * h);
    }
    out.push_back(std::move(g));
  }
  return out;
}

// Largest deviation relative to the gradient's own scale, over all inputs.
inline double relative_error(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& n) {
  double worst = 0.0;
  for (std::size_t t = 0; t < a.size(); ++t) {
    double scale = 0.0, diff = 0.0;
    for (std::size_t i = 0; i < a[t].size(); ++i) {
      scale = std::max({scale, std::abs(a[t][i]), std::abs(n[t][i])});
      diff = std::max(diff, std::abs(a[t][i] - n[t][i]));
    }
    if (scale > 0.0) worst = std::max(worst, diff / scale);
  }
  return worst;
}

inline double gradcheck(const ScalarFn& f, const std::vector<Tensor>& inputs, double h = 1e-6) {
  return relative_error(analytic_gradients(f, inputs), numeric_gradients(f, inputs, h));
}

// Σ_i w_i·t_i with fixed weights: turns any tensor output into a scalar whose
// gradient exercises every output element.
inline Tensor weighted_sum(const Tensor& t, const Tensor& w) {
  return simplerob::ad::sum(simplerob::ad::mul(simplerob::ad::reshape(t, w.shape()), w));
}

}  // namespace testing
