#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "mmrec/autodiff/tape.hpp"
#include "mmrec/tensor.hpp"

namespace mmrec::testing {

// Central differences computed with a fresh tape for every evaluation.
// Deliberately naive: it shares nothing with the replay path in grad_check.
inline std::vector<double> numeric_gradient(Parameter& p, const std::function<Var(Tape&)>& loss,
                                            double step = 1e-6) {
  auto values = p.value().data();
  std::vector<double> out(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double original = values[i];
    values[i] = original + step;
    double plus = 0.0, minus = 0.0;
    {
      Tape t(GradMode::kInference);
      plus = loss(t).item();
    }
    values[i] = original - step;
    {
      Tape t(GradMode::kInference);
      minus = loss(t).item();
    }
    values[i] = original;
    out[i] = (plus - minus) / (2.0 * step);
  }
  return out;
}

inline std::vector<double> autodiff_gradient(Parameter& p, const std::function<Var(Tape&)>& loss) {
  p.zero_grad();
  Tape t;
  Var l = loss(t);
  t.backward(l);
  auto g = p.grad().data();
  return {g.begin(), g.end()};
}

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor t = Tensor::zeros(std::move(shape));
  for (double& v : t.data()) v = dist(rng);
  return t;
}

}  // namespace mmrec::testing
