#pragma once

#include <cmath>
#include <string>
#include <unordered_map>
#include <vector>

#include "mmrec/autodiff/tape.hpp"
#include "mmrec/errors.hpp"

namespace mmrec {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 5.0;  // global L2 norm; <= 0 disables clipping

  void validate() const {
    if (!(lr > 0.0)) throw ValidationError("lr must be positive");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
      throw ValidationError("Adam betas must lie in [0, 1)");
    }
    if (!(eps > 0.0)) throw ValidationError("adam_eps must be positive");
  }
};

class Adam {
 public:
  explicit Adam(AdamConfig cfg) : cfg_(cfg) { cfg_.validate(); }

  long long step_count() const { return t_; }
  const AdamConfig& config() const { return cfg_; }

  // Applies one update from the accumulated gradients. Frozen parameters and
  // parameters without a gradient buffer are left alone. Returns the global
  // gradient norm before clipping.
  double step(const std::vector<Parameter*>& params) {
    double sq = 0.0;
    for (const Parameter* p : params) {
      if (p->frozen() || !p->has_grad()) continue;
      for (double g : p->grad().data()) {
        if (!std::isfinite(g)) throw NonFiniteError("non-finite gradient in parameter '" + p->name() + "'");
        sq += g * g;
      }
    }
    const double norm = std::sqrt(sq);
    const double clip = cfg_.clip_norm > 0.0 && norm > cfg_.clip_norm ? cfg_.clip_norm / norm : 1.0;
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (Parameter* p : params) {
      if (p->frozen() || !p->has_grad()) continue;
      Moments& s = state_[p];
      if (s.m.empty()) {
        s.m.assign(p->size(), 0.0);
        s.v.assign(p->size(), 0.0);
      }
      auto w = p->value().data();
      const auto g = p->grad().data();
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double gi = g[i] * clip;
        s.m[i] = cfg_.beta1 * s.m[i] + (1.0 - cfg_.beta1) * gi;
        s.v[i] = cfg_.beta2 * s.v[i] + (1.0 - cfg_.beta2) * gi * gi;
        w[i] -= cfg_.lr * (s.m[i] / c1) / (std::sqrt(s.v[i] / c2) + cfg_.eps);
      }
    }
    return norm;
  }

 private:
  struct Moments {
    std::vector<double> m, v;
  };
  AdamConfig cfg_;
  long long t_ = 0;
  std::unordered_map<const Parameter*, Moments> state_;
};

}  // namespace mmrec
