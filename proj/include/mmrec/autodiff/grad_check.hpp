#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "mmrec/autodiff/tape.hpp"
#include "mmrec/errors.hpp"

namespace mmrec {

// A scalar loss over a set of parameters. `loss` must build the full
// computation on the tape it is given, reading parameters through
// Tape::parameter. `loss_extended`, when set, builds the same computation
// on a long double tape. `owner` keeps whatever holds the parameters alive.
struct GradCheckProblem {
  std::vector<Parameter*> parameters;
  std::function<Var(Tape&)> loss;
  std::shared_ptr<void> owner;
  std::function<BasicVar<long double>(BasicTape<long double>&)> loss_extended;
};

struct GradCheckReport {
  bool passed = false;
  double max_rel_error = 0.0;
  double step = 0.0;
  double tolerance = 0.0;
  std::size_t scalars_checked = 0;
  std::size_t parameters_checked = 0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
  double worst_autodiff = 0.0;
  double worst_numeric = 0.0;
  double loss = 0.0;
  // Scalars whose double-precision difference was measured again in long
  // double, and the worst error before that second look.
  std::size_t scalars_remeasured = 0;
  double max_rel_error_double = 0.0;
};

inline double relative_error(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

// Compares reverse-mode gradients with central differences
// (L(theta + h) - L(theta - h)) / 2h for every scalar of every trainable
// parameter. The numeric side evaluates an inference-only tape; after each
// perturbation only the operations downstream of the parameter's leaf are
// re-evaluated, which yields the same values as a fresh forward pass.
//
// In double precision the difference carries roundoff of order
// eps * |L| / h (about 1e-11 here), which swamps gradients that happen to
// sit near zero. When `loss_extended` is available, every scalar whose
// double estimate is not clearly inside the tolerance (error >= tol / 10)
// gets the same difference with the same h recomputed on a long double
// tape, and that value decides.
inline GradCheckReport grad_check(const GradCheckProblem& problem, double step, double tol) {
  if (!(step >= 1e-7 && step <= 1e-4)) throw ValidationError("grad_check: step must lie in [1e-7, 1e-4]");
  GradCheckReport report;
  report.step = step;
  report.tolerance = tol;

  for (Parameter* p : problem.parameters) p->zero_grad();
  {
    Tape tape(GradMode::kRecord);
    Var loss = problem.loss(tape);
    report.loss = loss.item();
    tape.backward(loss);
  }

  Tape numeric(GradMode::kInference);
  Var loss = problem.loss(numeric);
  std::unique_ptr<BasicTape<long double>> wide;
  BasicVar<long double> wide_loss;

  for (Parameter* p : problem.parameters) {
    if (p->frozen()) continue;
    const auto leaf = numeric.leaf_of(*p);
    // Unused parameter: the loss cannot move, so the numeric gradient is 0.
    const std::vector<std::size_t> replay = leaf ? numeric.dependents_of(*leaf) : std::vector<std::size_t>{};
    std::vector<std::size_t> wide_replay;
    auto values = p->value().data();
    const auto grads = p->grad().data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double original = values[i];
      const double up = original + step, down = original - step;
      // divide by the step actually taken after rounding theta +- h
      const long double taken = static_cast<long double>(up) - static_cast<long double>(down);
      values[i] = up;
      numeric.replay(replay);
      const double plus = loss.item();
      values[i] = down;
      numeric.replay(replay);
      const double minus = loss.item();
      double fd = static_cast<double>((static_cast<long double>(plus) - minus) / taken);
      double err = relative_error(grads[i], fd);
      report.max_rel_error_double = std::max(report.max_rel_error_double, err);
      if (!(err < 0.1 * tol) && leaf && problem.loss_extended) {
        if (!wide) {
          values[i] = original;
          wide = std::make_unique<BasicTape<long double>>(GradMode::kInference);
          wide_loss = problem.loss_extended(*wide);
        }
        if (wide_replay.empty()) {
          const auto wide_leaf = wide->leaf_of(*p);
          if (!wide_leaf) throw AutodiffError("grad_check: the two loss builders use different parameters");
          wide_replay = wide->dependents_of(*wide_leaf);
          wide_replay.insert(wide_replay.begin(), *wide_leaf);
        }
        values[i] = up;
        wide->replay(wide_replay);
        const long double wide_plus = wide_loss.item();
        values[i] = down;
        wide->replay(wide_replay);
        fd = static_cast<double>((wide_plus - wide_loss.item()) / taken);
        err = relative_error(grads[i], fd);
        ++report.scalars_remeasured;
      }
      values[i] = original;
      if (err > report.max_rel_error || report.scalars_checked == 0) {
        report.max_rel_error = err;
        report.worst_parameter = p->name();
        report.worst_index = i;
        report.worst_autodiff = grads[i];
        report.worst_numeric = fd;
      }
      ++report.scalars_checked;
    }
    numeric.replay(replay);  // back to unperturbed values
    if (!wide_replay.empty()) wide->replay(wide_replay);
    ++report.parameters_checked;
  }
  report.passed = report.max_rel_error < tol;
  return report;
}

// Builds the problem from a seed, then checks it.
inline GradCheckReport grad_check(const std::function<GradCheckProblem(std::uint64_t)>& builder,
                                  std::uint64_t seed, double step, double tol) {
  return grad_check(builder(seed), step, tol);
}

}  // namespace mmrec
