#pragma once

#include <functional>
#include <span>
#include <vector>

#include "imode/tape.hpp"

namespace imode::ode {

struct SolverConfig {
  double rtol = 1e-7;
  double atol = 1e-9;
  int max_steps = 100000;
  double initial_dt = 0.0;  // 0 = automatic
  // > 0 switches off the error controller and marches with this step. Used
  // for convergence-order measurements and for finite-difference checks of
  // solver gradients, where adaptive step counts would change under
  // perturbation and contaminate the comparison.
  double fixed_dt = 0.0;
};

struct DivergenceError : NumericError {
  double t_last;
  DivergenceError(const std::string& what, double t);
};

struct Trajectory {
  std::vector<double> t;
  int dim = 0;
  std::vector<double> y;  // row-major, t.size() rows

  std::span<const double> row(size_t k) const { return {y.data() + k * size_t(dim), size_t(dim)}; }
  std::span<double> row(size_t k) { return {y.data() + k * size_t(dim), size_t(dim)}; }
  size_t points() const { return t.size(); }
};

// autonomous right-hand sides
using RhsD = std::function<void(std::span<const double>, std::span<double>)>;
using RhsV = std::function<ad::Var(ad::Var)>;

void validate_grid(const std::vector<double>& grid);  // ContractError if not strictly increasing

// Dormand-Prince 5(4) with PI step control and a quartic dense interpolant
// for off-step grid outputs. Grid endpoints hit by an accepted step return
// that step's solution exactly.
Trajectory dopri5(const RhsD& rhs, std::span<const double> y0, const std::vector<double>& grid,
                  const SolverConfig& cfg);

// Same stepper and controller, states recorded on the tape. Returns one Var
// per grid point. Rejected trial steps are truncated off the tape, so the
// recorded graph contains exactly the accepted discretization; gradients are
// exact for it (discretize-then-optimize).
std::vector<ad::Var> dopri5_vars(ad::Tape& tape, const RhsV& rhs, ad::Var y0,
                                 const std::vector<double>& grid, const SolverConfig& cfg);

// Fixed-step classic RK4 with substeps no longer than dt. Ground-truth
// generator; deliberately independent of the stepper above.
Trajectory rk4_reference(const RhsD& rhs, std::span<const double> y0,
                         const std::vector<double>& grid, double dt);

struct GradientResult {
  double loss = 0.0;
  std::vector<ad::Tensor> dparams;
  ad::Tensor dy0;
};

using RhsFactory = std::function<RhsV(ad::Tape&, const std::vector<ad::Var>& params)>;
using LossFn = std::function<ad::Var(ad::Tape&, std::span<const ad::Var> states)>;

// Builds the whole pipeline (bind params, integrate, loss) on a fresh tape
// and returns value-mode gradients with respect to every param tensor and y0.
GradientResult integrate_with_gradients(const RhsFactory& make_rhs, const LossFn& loss,
                                        std::span<const ad::Tensor> params,
                                        std::span<const double> y0,
                                        const std::vector<double>& grid, const SolverConfig& cfg);

}  // namespace imode::ode
